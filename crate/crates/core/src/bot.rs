//! Full-state planner and noisy demonstration generation.
//!
//! The planner is stateless: every call re-derives the current sub-goal from
//! the state and the goal tracker, then takes the first action of a
//! breadth-first shortest path over agent poses. Equal-length paths are
//! broken by action id because successors are expanded in id order.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{
    find_door, find_item, Action, Clause, Dir, DoorState, Entity, Goal, GoalTracker, GridEnv, GridError, GridState,
    Item, ItemKind, Observation, Pos, TaskSpec,
};
use crate::lang::Token;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no path to {0}")]
    Unreachable(String),
    #[error("goal entity missing: {0}")]
    Missing(String),
}

/// Actions substituted by noise. Toggle and done are never injected.
pub const NOISE_ACTIONS: [Action; 5] =
    [Action::TurnRight, Action::TurnLeft, Action::Forward, Action::Pickup, Action::Drop];

struct Search {
    width: usize,
    start: usize,
    order: Vec<usize>,
    parent: Vec<usize>,
    via: Vec<Action>,
}

const NONE: usize = usize::MAX;

impl Search {
    fn pose(&self, idx: usize) -> (Pos, Dir) {
        let cell = idx / 4;
        (Pos::new(cell % self.width, cell / self.width), Dir::ALL[idx % 4])
    }

    fn first_action(&self, mut idx: usize) -> Option<Action> {
        if idx == self.start {
            return None;
        }
        while self.parent[idx] != self.start {
            idx = self.parent[idx];
        }
        Some(self.via[idx])
    }
}

/// Doors that are closed but not locked count as passable; the agent opens
/// them when it reaches them.
fn walkable(e: Entity) -> bool {
    matches!(e, Entity::Empty | Entity::Door { state: DoorState::Open | DoorState::Closed, .. })
}

fn search(state: &GridState) -> Search {
    let g = &state.grid;
    let n = g.width() * g.height() * 4;
    let idx = |p: Pos, d: Dir| (p.y * g.width() + p.x) * 4 + d.index();
    let start = idx(state.agent_pos, state.agent_dir);
    let mut s = Search { width: g.width(), start, order: Vec::with_capacity(n), parent: vec![NONE; n], via: vec![Action::Done; n] };
    s.parent[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(cur) = queue.pop_front() {
        s.order.push(cur);
        let (p, d) = s.pose(cur);
        let next = [
            (Action::TurnLeft, Some((p, d.left()))),
            (Action::TurnRight, Some((p, d.right()))),
            (Action::Forward, p.offset(d).filter(|&q| g.try_get(q).is_some_and(walkable)).map(|q| (q, d))),
        ];
        for (a, to) in next {
            let Some((q, e)) = to else { continue };
            let j = idx(q, e);
            if s.parent[j] == NONE {
                s.parent[j] = cur;
                s.via[j] = a;
                queue.push_back(j);
            }
        }
    }
    s
}

fn facing(s: &Search, idx: usize) -> Option<Pos> {
    let (p, d) = s.pose(idx);
    p.offset(d)
}

/// Step towards the nearest pose facing one of `targets`, then `finish`.
fn act_on(state: &GridState, targets: &[Pos], finish: Action, what: &str) -> Result<Action, PlanError> {
    let s = search(state);
    let goal = s.order.iter().copied().find(|&i| facing(&s, i).is_some_and(|f| targets.contains(&f)));
    let goal = goal.ok_or_else(|| PlanError::Unreachable(what.to_string()))?;
    Ok(match s.first_action(goal) {
        None => finish,
        Some(Action::Forward) if matches!(state.front_entity(), Some(Entity::Door { state: DoorState::Closed, .. })) => {
            Action::Toggle
        }
        Some(a) => a,
    })
}

fn next_to_door(state: &GridState, p: Pos) -> bool {
    state.grid.neighbours(p).any(|q| matches!(state.grid.get(q), Entity::Door { .. }))
}

/// Cells the remaining plan must still be able to reach.
fn required_cells(state: &GridState, clauses: &[Clause]) -> Vec<Pos> {
    let mut out = Vec::new();
    for c in clauses {
        match *c {
            Clause::PutNextTo { moved, target } => out.extend([find_item(state, moved), find_item(state, target)].into_iter().flatten()),
            Clause::PickUp { item } => out.extend(find_item(state, item)),
            Clause::Open { color } => {
                if let Some((p, st)) = find_door(state, color) {
                    out.push(p);
                    if st == DoorState::Locked {
                        out.extend(find_item(state, Item::new(ItemKind::Key, color)));
                    }
                }
            }
        }
    }
    out
}

/// Whether every required cell keeps a reachable neighbour once `blocked` holds an item.
fn still_reachable(state: &GridState, blocked: Pos, required: &[Pos]) -> bool {
    let g = &state.grid;
    let mut seen = vec![false; g.width() * g.height()];
    let at = |p: Pos| p.y * g.width() + p.x;
    seen[at(state.agent_pos)] = true;
    let mut queue = VecDeque::from([state.agent_pos]);
    while let Some(p) = queue.pop_front() {
        for q in g.neighbours(p) {
            if q != blocked && !seen[at(q)] && walkable(g.get(q)) {
                seen[at(q)] = true;
                queue.push_back(q);
            }
        }
    }
    required.iter().all(|&r| g.neighbours(r).any(|q| q != blocked && seen[at(q)]))
}

/// Puts the carried item down somewhere harmless.
fn drop_anywhere(state: &GridState, pending: &[Clause]) -> Result<Action, PlanError> {
    let required = required_cells(state, pending);
    let s = search(state);
    let mut tried = 0;
    for &i in &s.order {
        let Some(f) = facing(&s, i) else { continue };
        if state.grid.try_get(f) != Some(Entity::Empty) || next_to_door(state, f) || f == state.agent_pos {
            continue;
        }
        // The standing cell of the chosen pose is the agent's, so it stays free.
        if still_reachable(state, f, &required) {
            return Ok(s.first_action(i).map_or(Action::Drop, |a| match a {
                Action::Forward if matches!(state.front_entity(), Some(Entity::Door { state: DoorState::Closed, .. })) => {
                    Action::Toggle
                }
                a => a,
            }));
        }
        tried += 1;
        if tried > 64 {
            break;
        }
    }
    Err(PlanError::Unreachable("a free cell to drop the carried item".into()))
}

fn locate(state: &GridState, it: Item) -> Result<Pos, PlanError> {
    find_item(state, it).ok_or_else(|| PlanError::Missing(it.to_string()))
}

/// Next action of the sub-goal plan for the tracker's goal.
pub fn plan_next_action(state: &GridState, tracker: &GoalTracker) -> Result<Action, PlanError> {
    let goal = tracker.goal();
    let clauses = goal.clauses();
    let order = goal.temporal_order();
    let (active, pending): (Clause, Vec<Clause>) = match goal {
        Goal::Single(c) => (c, vec![c]),
        Goal::Sequence(..) if !tracker.first_done() => (clauses[order[0]], vec![clauses[order[0]], clauses[order[1]]]),
        Goal::Sequence(..) => (clauses[order[1]], vec![clauses[order[1]]]),
    };
    match active {
        Clause::PickUp { item } => {
            if state.carried.is_some() {
                // Either another item, or this one picked before the earlier
                // clause held, which must be redone.
                return drop_anywhere(state, &pending);
            }
            act_on(state, &[locate(state, item)?], Action::Pickup, &item.to_string())
        }
        Clause::PutNextTo { moved, target } => {
            if state.carried == Some(moved) {
                let t = locate(state, target)?;
                let spots: Vec<Pos> = state.grid.neighbours(t).filter(|&q| state.grid.get(q) == Entity::Empty).collect();
                let required = required_cells(state, &pending[1..]);
                let safe: Vec<Pos> = spots.iter().copied().filter(|&q| still_reachable(state, q, &required)).collect();
                let preferred: Vec<Pos> = safe.iter().copied().filter(|&q| !next_to_door(state, q)).collect();
                let what = format!("a cell next to the {target}");
                return act_on(state, &preferred, Action::Drop, &what)
                    .or_else(|_| act_on(state, &safe, Action::Drop, &what))
                    .or_else(|_| act_on(state, &spots, Action::Drop, &what));
            }
            if state.carried.is_some() {
                return drop_anywhere(state, &pending);
            }
            act_on(state, &[locate(state, moved)?], Action::Pickup, &moved.to_string())
        }
        Clause::Open { color } => {
            let (door, st) = find_door(state, color).ok_or_else(|| PlanError::Missing(format!("{} door", color.name())))?;
            let what = format!("the {} door", color.name());
            if st != DoorState::Locked {
                // An open door here means it opened too early; close it so it can open again.
                return act_on(state, &[door], Action::Toggle, &what);
            }
            let key = Item::new(ItemKind::Key, color);
            if state.carried == Some(key) {
                act_on(state, &[door], Action::Toggle, &what)
            } else if state.carried.is_some() {
                drop_anywhere(state, &pending)
            } else {
                act_on(state, &[locate(state, key)?], Action::Pickup, &key.to_string())
            }
        }
    }
}

/// Random-action probabilities with their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    support: Vec<(f64, f64)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid noise distribution: {0}")]
pub struct NoiseError(String);

impl NoiseDistribution {
    pub fn new(support: Vec<(f64, f64)>) -> Result<Self, NoiseError> {
        if support.is_empty() {
            return Err(NoiseError("empty support".into()));
        }
        if let Some(&(p, w)) = support.iter().find(|(p, w)| !(0.0..=1.0).contains(p) || !(*w >= 0.0)) {
            return Err(NoiseError(format!("entry {p}:{w} out of range")));
        }
        let total: f64 = support.iter().map(|x| x.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(NoiseError(format!("weights sum to {total}, not 1")));
        }
        Ok(NoiseDistribution { support })
    }

    /// p = 0 with weight 0.45, then 0.1, 0.4 and 0.8 with weights 0.35, 0.1 and 0.1.
    pub fn wide() -> Self {
        NoiseDistribution { support: vec![(0.0, 0.45), (0.1, 0.35), (0.4, 0.1), (0.8, 0.1)] }
    }

    pub fn fixed(p: f64) -> Result<Self, NoiseError> {
        Self::new(vec![(p, 1.0)])
    }

    pub fn support(&self) -> &[(f64, f64)] {
        &self.support
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(p, w) in &self.support {
            acc += w;
            if u < acc {
                return p;
            }
        }
        self.support.last().unwrap().0
    }
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.support.iter().map(|(p, w)| format!("{p}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for NoiseDistribution {
    type Err = NoiseError;

    /// `p:weight` pairs separated by commas, e.g. `0:0.45,0.1:0.35,0.4:0.1,0.8:0.1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let support = s
            .split(',')
            .map(|part| {
                let (p, w) = part.trim().split_once(':').ok_or_else(|| NoiseError(format!("'{part}' is not p:weight")))?;
                let num = |x: &str| x.trim().parse::<f64>().map_err(|_| NoiseError(format!("'{x}' is not a number")));
                Ok((num(p)?, num(w)?))
            })
            .collect::<Result<Vec<_>, NoiseError>>()?;
        NoiseDistribution::new(support)
    }
}

/// A demonstration: the observation before each action, and the action.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskSpec,
    pub seed: u64,
    pub noise_p: f64,
    pub instruction: Vec<Token>,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = (&Observation, Action)> {
        self.observations.iter().zip(self.actions.iter().copied())
    }
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5EED_0F_B07)
}

/// Runs the bot with random-action probability `p`. Returns the trajectory
/// when the episode ends in success, `None` otherwise.
pub fn run_bot(spec: &TaskSpec, seed: u64, p: f64) -> Result<Option<Trajectory>, GridError> {
    let mut rng = noise_rng(seed);
    let (mut env, mut obs) = GridEnv::reset(spec, seed)?;
    let mut traj = Trajectory {
        task: spec.clone(),
        seed,
        noise_p: p,
        instruction: env.instruction().tokens().to_vec(),
        observations: Vec::new(),
        actions: Vec::new(),
        success: false,
    };
    while !env.is_done() {
        let action = if p > 0.0 && rng.gen_bool(p) {
            NOISE_ACTIONS[rng.gen_range(0..NOISE_ACTIONS.len())]
        } else {
            match plan_next_action(env.state(), env.tracker()) {
                Ok(a) => a,
                Err(e) => {
                    log::debug!("{spec} seed {seed}: bot gave up: {e}");
                    return Ok(None);
                }
            }
        };
        traj.observations.push(obs);
        traj.actions.push(action);
        let r = env.step(action)?;
        obs = r.observation;
        traj.success = r.success;
    }
    Ok(traj.success.then_some(traj))
}

/// Samples p from `noise` (seeded by `seed`) and runs the bot.
pub fn generate_trajectory(
    spec: &TaskSpec,
    seed: u64,
    noise: &NoiseDistribution,
) -> Result<(f64, Option<Trajectory>), GridError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let p = noise.sample(&mut rng);
    Ok((p, run_bot(spec, seed, p)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Color, Grid, Layout, TaskKind};

    fn room() -> GridState {
        let mut grid = Grid::new(7, 7);
        for p in grid.positions().collect::<Vec<_>>() {
            if p.x == 0 || p.y == 0 || p.x == 6 || p.y == 6 {
                grid.set(p, Entity::Wall);
            }
        }
        GridState { grid, agent_pos: Pos::new(3, 3), agent_dir: Dir::North, carried: None, step_count: 0, seed: 0 }
    }

    /// Shortest number of actions to face `target`, by exhaustive breadth-first enumeration of action strings.
    fn brute_force_first_actions(state: &GridState, target: Pos) -> (usize, Vec<Action>) {
        let moves = [Action::TurnLeft, Action::TurnRight, Action::Forward];
        let mut frontier: Vec<(GridState, Option<Action>)> = vec![(state.clone(), None)];
        for depth in 1..12 {
            let mut next = Vec::new();
            let mut firsts = Vec::new();
            for (s, first) in &frontier {
                for a in moves {
                    let mut t = s.clone();
                    t.apply(a);
                    let f = first.unwrap_or(a);
                    if t.front() == Some(target) && !firsts.contains(&f) {
                        firsts.push(f);
                    }
                    next.push((t, Some(f)));
                }
            }
            if !firsts.is_empty() {
                return (depth, firsts);
            }
            frontier = next;
        }
        panic!("target not reachable");
    }

    #[test]
    fn facing_target_picks_up() {
        let mut s = room();
        let ball = Item::new(ItemKind::Ball, Color::Red);
        s.grid.set(Pos::new(3, 2), Entity::Item(ball));
        let tr = GoalTracker::new(Goal::Single(Clause::PickUp { item: ball }), &s);
        assert_eq!(plan_next_action(&s, &tr).unwrap(), Action::Pickup);
    }

    #[test]
    fn first_step_is_on_a_shortest_path() {
        let ball = Item::new(ItemKind::Ball, Color::Blue);
        for (tx, ty) in [(5, 3), (1, 1), (3, 5), (2, 4), (5, 5)] {
            for d in Dir::ALL {
                let mut s = room();
                s.agent_dir = d;
                let t = Pos::new(tx, ty);
                s.grid.set(t, Entity::Item(ball));
                let tr = GoalTracker::new(Goal::Single(Clause::PickUp { item: ball }), &s);
                let a = plan_next_action(&s, &tr).unwrap();
                let (_, firsts) = brute_force_first_actions(&s, t);
                assert!(firsts.contains(&a), "target {t:?} heading {d:?}: {a:?} not in {firsts:?}");
                // Lowest action id among the optimal first moves.
                assert_eq!(a, *firsts.iter().min().unwrap());
            }
        }
    }

    #[test]
    fn unlock_goes_for_the_key_first() {
        let spec = TaskSpec::new(TaskKind::Unlock, Layout::Medium).unwrap();
        let (env, _) = GridEnv::reset(&spec, 4).unwrap();
        let Goal::Single(Clause::Open { color }) = env.goal() else { panic!() };
        let key = find_item(env.state(), Item::new(ItemKind::Key, color)).unwrap();
        let expect = act_on(env.state(), &[key], Action::Pickup, "key").unwrap();
        assert_eq!(plan_next_action(env.state(), env.tracker()).unwrap(), expect);
    }

    #[test]
    fn noiseless_bot_solves_every_task_kind() {
        for kind in TaskKind::ALL {
            for layout in Layout::ALL {
                let Ok(spec) = TaskSpec::new(kind, layout) else { continue };
                for seed in 0..40 {
                    let t = run_bot(&spec, seed, 0.0).unwrap();
                    assert!(t.is_some(), "{spec} seed {seed} failed");
                }
            }
        }
    }

    #[test]
    fn noise_string_round_trip() {
        let d: NoiseDistribution = "0:0.45,0.1:0.35,0.4:0.1,0.8:0.1".parse().unwrap();
        assert_eq!(d, NoiseDistribution::wide());
        assert!("0:0.5".parse::<NoiseDistribution>().is_err());
        assert!("1.5:1".parse::<NoiseDistribution>().is_err());
    }
}
