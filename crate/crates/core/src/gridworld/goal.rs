use serde::{Deserialize, Serialize};

use super::entity::{Color, DoorState, Entity, Item, ItemKind, Pos};
use super::GridState;

/// One elementary sub-goal, bound to concrete entities by description.
/// Layout generation keeps goal descriptions unique on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clause {
    PutNextTo { moved: Item, target: Item },
    PickUp { item: Item },
    Open { color: Color },
}

impl Clause {
    pub fn roles(&self) -> &'static [Role] {
        match self {
            Clause::PutNextTo { .. } => &[Role::Moved, Role::Target],
            Clause::PickUp { .. } => &[Role::Object],
            Clause::Open { .. } => &[Role::Door],
        }
    }

    /// Items whose description the clause names.
    pub fn items(&self) -> Vec<Item> {
        match *self {
            Clause::PutNextTo { moved, target } => vec![moved, target],
            Clause::PickUp { item } => vec![item],
            Clause::Open { .. } => vec![],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connector {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Goal {
    Single(Clause),
    Sequence(Clause, Connector, Clause),
}

impl Goal {
    /// Clauses in instruction order.
    pub fn clauses(&self) -> Vec<Clause> {
        match *self {
            Goal::Single(c) => vec![c],
            Goal::Sequence(a, _, b) => vec![a, b],
        }
    }

    /// Indices into `clauses()` in the order they must be achieved.
    pub fn temporal_order(&self) -> Vec<usize> {
        match self {
            Goal::Single(_) => vec![0],
            Goal::Sequence(_, Connector::Before, _) => vec![0, 1],
            Goal::Sequence(_, Connector::After, _) => vec![1, 0],
        }
    }
}

/// Which entity of a clause a word refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Moved,
    Target,
    Object,
    Door,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub clause: usize,
    pub role: Role,
}

pub fn find_item(state: &GridState, item: Item) -> Option<Pos> {
    state.grid.find(|e| e == Entity::Item(item))
}

pub fn find_door(state: &GridState, color: Color) -> Option<(Pos, DoorState)> {
    let pos = state.grid.find(|e| matches!(e, Entity::Door { color: c, .. } if c == color))?;
    match state.grid.get(pos) {
        Entity::Door { state, .. } => Some((pos, state)),
        _ => None,
    }
}

pub fn check_clause(state: &GridState, clause: &Clause) -> bool {
    match *clause {
        Clause::PutNextTo { moved, target } => match (find_item(state, moved), find_item(state, target)) {
            (Some(a), Some(b)) => a.is_adjacent(b),
            _ => false,
        },
        Clause::PickUp { item } => state.carried == Some(item),
        Clause::Open { color } => matches!(find_door(state, color), Some((_, DoorState::Open))),
    }
}

/// Whether the entity referred to by `role` of `clause` has been dealt with
/// in the current state. Used as ground truth for masked-word questions.
pub fn role_achieved(state: &GridState, clause: &Clause, role: Role) -> bool {
    match (*clause, role) {
        (Clause::PutNextTo { moved, .. }, Role::Moved) => state.carried == Some(moved),
        (Clause::PutNextTo { moved, target }, Role::Target) => {
            let Some(t) = find_item(state, target) else { return false };
            if state.carried == Some(moved) {
                state.agent_pos.is_adjacent(t)
            } else {
                find_item(state, moved).is_some_and(|m| m.is_adjacent(t))
            }
        }
        (Clause::PickUp { item }, Role::Object) => state.carried == Some(item),
        (Clause::Open { color }, Role::Door) => {
            let Some((pos, door)) = find_door(state, color) else { return false };
            let has_key = state.carried == Some(Item::new(ItemKind::Key, color));
            match door {
                DoorState::Open => true,
                DoorState::Locked => has_key,
                DoorState::Closed => state.front() == Some(pos),
            }
        }
        _ => false,
    }
}

/// Incremental success checker. A Sequence succeeds at the step where the
/// later clause becomes true, provided the earlier clause held at some
/// strictly earlier step.
#[derive(Clone, Debug)]
pub struct GoalTracker {
    goal: Goal,
    mentions: Vec<Mention>,
    first_done: bool,
    prev_second: bool,
    achieved: Vec<bool>,
}

impl GoalTracker {
    pub fn new(goal: Goal, state: &GridState) -> Self {
        let mentions: Vec<Mention> = goal
            .clauses()
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.roles().iter().map(move |&role| Mention { clause: i, role }))
            .collect();
        let n = mentions.len();
        let mut t = GoalTracker { goal, mentions, first_done: false, prev_second: false, achieved: vec![false; n] };
        if let Goal::Sequence(..) = goal {
            let order = goal.temporal_order();
            let clauses = goal.clauses();
            t.prev_second = check_clause(state, &clauses[order[1]]);
        }
        t.update_mentions(state);
        t
    }

    pub fn goal(&self) -> Goal {
        self.goal
    }

    /// Whether the temporally first clause of a Sequence has held.
    pub fn first_done(&self) -> bool {
        self.first_done
    }

    /// Advances to the new state and reports success.
    pub fn update(&mut self, state: &GridState) -> bool {
        self.update_mentions(state);
        match self.goal {
            Goal::Single(c) => check_clause(state, &c),
            Goal::Sequence(..) => {
                let order = self.goal.temporal_order();
                let clauses = self.goal.clauses();
                let first = check_clause(state, &clauses[order[0]]);
                let second = check_clause(state, &clauses[order[1]]);
                let success = self.first_done && second && !self.prev_second;
                self.first_done |= first;
                self.prev_second = second;
                success
            }
        }
    }

    fn update_mentions(&mut self, state: &GridState) {
        let clauses = self.goal.clauses();
        for (flag, m) in self.achieved.iter_mut().zip(&self.mentions) {
            if !*flag {
                *flag = clauses.get(m.clause).is_some_and(|c| role_achieved(state, c, m.role));
            }
        }
    }

    /// Whether the entity behind `m` has been dealt with at any step so far.
    pub fn achieved(&self, m: Mention) -> bool {
        self.mentions.iter().zip(&self.achieved).any(|(x, &a)| *x == m && a)
    }
}
