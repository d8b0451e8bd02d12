//! Seedable grid environment with symbolic partial observations.

mod entity;
mod goal;
mod observation;
mod task;

pub use entity::{shape_id, Action, Color, Dir, DoorState, Entity, Item, ItemKind, Pos, COLOR_COUNT, STATE_COUNT};
pub use goal::{check_clause, find_door, find_item, role_achieved, Clause, Connector, Goal, GoalTracker, Mention, Role};
pub use observation::{
    encode_observation, segment_crosses_cell, sight_line, view_to_world, Observation, AGENT_VIEW_X, AGENT_VIEW_Y,
    OBS_LEN, VIEW,
};
pub use task::{default_horizon, generate_layout, Layout, TaskKind, TaskSpec};

use thiserror::Error;

use crate::lang::Instruction;

/// Multiplier applied to the unit success reward.
pub const REWARD_SCALE: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    width: usize,
    height: usize,
    cells: Vec<Entity>,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Self {
        Grid { width, height, cells: vec![Entity::Empty; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x < self.width && p.y < self.height
    }

    pub fn get(&self, p: Pos) -> Entity {
        assert!(self.contains(p), "cell {p:?} outside {}x{} grid", self.width, self.height);
        self.cells[p.y * self.width + p.x]
    }

    pub fn try_get(&self, p: Pos) -> Option<Entity> {
        self.contains(p).then(|| self.cells[p.y * self.width + p.x])
    }

    pub fn set(&mut self, p: Pos, e: Entity) {
        assert!(self.contains(p), "cell {p:?} outside {}x{} grid", self.width, self.height);
        self.cells[p.y * self.width + p.x] = e;
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Pos::new(x, y)))
    }

    /// First cell in row-major order satisfying `pred`.
    pub fn find(&self, pred: impl Fn(Entity) -> bool) -> Option<Pos> {
        let i = self.cells.iter().position(|&e| pred(e))?;
        Some(Pos::new(i % self.width, i / self.width))
    }

    pub fn neighbours(&self, p: Pos) -> impl Iterator<Item = Pos> + '_ {
        Dir::ALL.into_iter().filter_map(move |d| p.offset(d)).filter(|&q| self.contains(q))
    }

    /// Non-agent entities as a sorted multiset, for conservation checks.
    pub fn entity_multiset(&self) -> Vec<String> {
        let mut v: Vec<String> =
            self.cells.iter().filter(|e| **e != Entity::Empty).map(|e| format!("{e:?}")).collect();
        v.sort();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridState {
    pub grid: Grid,
    pub agent_pos: Pos,
    pub agent_dir: Dir,
    pub carried: Option<Item>,
    pub step_count: u32,
    pub seed: u64,
}

impl GridState {
    /// Cell the agent faces.
    pub fn front(&self) -> Option<Pos> {
        self.agent_pos.offset(self.agent_dir).filter(|&p| self.grid.contains(p))
    }

    pub fn front_entity(&self) -> Option<Entity> {
        self.front().map(|p| self.grid.get(p))
    }

    /// Applies the dynamics of one action without touching the step counter.
    pub fn apply(&mut self, action: Action) {
        match action {
            Action::TurnLeft => self.agent_dir = self.agent_dir.left(),
            Action::TurnRight => self.agent_dir = self.agent_dir.right(),
            Action::Forward => {
                if let Some(p) = self.front() {
                    if self.grid.get(p).is_passable() {
                        self.agent_pos = p;
                    }
                }
            }
            Action::Pickup => {
                if let (None, Some(p)) = (self.carried, self.front()) {
                    if let Entity::Item(it) = self.grid.get(p) {
                        self.carried = Some(it);
                        self.grid.set(p, Entity::Empty);
                    }
                }
            }
            Action::Drop => {
                if let (Some(it), Some(p)) = (self.carried, self.front()) {
                    if self.grid.get(p) == Entity::Empty {
                        self.grid.set(p, Entity::Item(it));
                        self.carried = None;
                    }
                }
            }
            Action::Toggle => {
                if let Some(p) = self.front() {
                    if let Entity::Door { color, state } = self.grid.get(p) {
                        let next = match state {
                            DoorState::Open => DoorState::Closed,
                            DoorState::Closed => DoorState::Open,
                            DoorState::Locked if self.carried == Some(Item::new(ItemKind::Key, color)) => {
                                DoorState::Open
                            }
                            DoorState::Locked => DoorState::Locked,
                        };
                        self.grid.set(p, Entity::Door { color, state: next });
                    }
                }
            }
            Action::Done => {}
        }
    }
}

/// Scaled success reward for finishing at step `n` of horizon `h`.
pub fn success_reward(n: u32, h: u32) -> f64 {
    REWARD_SCALE * (1.0 - 0.9 * n as f64 / h as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// One episode of one task.
#[derive(Clone, Debug)]
pub struct GridEnv {
    spec: TaskSpec,
    state: GridState,
    tracker: GoalTracker,
    instruction: Instruction,
    done: bool,
    success: bool,
}

impl GridEnv {
    pub fn reset(spec: &TaskSpec, seed: u64) -> Result<(GridEnv, Observation), GridError> {
        let (state, goal) = generate_layout(spec, seed)?;
        let instruction = crate::lang::instruct(&goal);
        let tracker = GoalTracker::new(goal, &state);
        let obs = encode_observation(&state);
        Ok((GridEnv { spec: spec.clone(), state, tracker, instruction, done: false, success: false }, obs))
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, GridError> {
        if self.done {
            return Err(GridError::Usage("step called after the episode ended".into()));
        }
        self.state.apply(action);
        self.state.step_count += 1;
        let success = self.tracker.update(&self.state);
        let n = self.state.step_count;
        let h = self.spec.horizon;
        let reward = if success { success_reward(n, h) } else { 0.0 };
        self.done = success || n >= h;
        self.success = success;
        Ok(StepResult { observation: encode_observation(&self.state), reward, done: self.done, success })
    }

    pub fn observe(&self) -> Observation {
        encode_observation(&self.state)
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn goal(&self) -> Goal {
        self.tracker.goal()
    }

    pub fn tracker(&self) -> &GoalTracker {
        &self.tracker
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    /// Whether the word at instruction position `pos` refers to an entity
    /// that has been dealt with so far. Function words report false.
    pub fn mention_achieved(&self, pos: usize) -> bool {
        self.instruction.mention(pos).is_some_and(|m| self.tracker.achieved(m))
    }
}

/// Everything observable from replaying an action sequence.
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    pub instruction: Instruction,
    /// Observation before each action.
    pub observations: Vec<Observation>,
    pub actions: Vec<crate::gridworld::Action>,
    pub rewards: Vec<f64>,
    /// Per step, the mention flags of every instruction position after the action.
    pub mention_flags: Vec<Vec<bool>>,
    pub success: bool,
}

/// Replays `actions` from a fresh reset, stopping early if the episode ends.
pub fn replay(spec: &TaskSpec, seed: u64, actions: &[Action]) -> Result<EpisodeTrace, GridError> {
    let (mut env, mut obs) = GridEnv::reset(spec, seed)?;
    let len = env.instruction().len();
    let mut trace = EpisodeTrace {
        instruction: env.instruction().clone(),
        observations: Vec::with_capacity(actions.len()),
        actions: Vec::with_capacity(actions.len()),
        rewards: Vec::with_capacity(actions.len()),
        mention_flags: Vec::with_capacity(actions.len()),
        success: false,
    };
    for &a in actions {
        if env.is_done() {
            break;
        }
        trace.observations.push(obs);
        trace.actions.push(a);
        let r = env.step(a)?;
        trace.rewards.push(r.reward);
        trace.mention_flags.push((0..len).map(|i| env.mention_achieved(i)).collect());
        trace.success = r.success;
        obs = r.observation;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_room(size: usize) -> GridState {
        let mut grid = Grid::new(size, size);
        for p in grid.positions().collect::<Vec<_>>() {
            if p.x == 0 || p.y == 0 || p.x == size - 1 || p.y == size - 1 {
                grid.set(p, Entity::Wall);
            }
        }
        GridState { grid, agent_pos: Pos::new(3, 3), agent_dir: Dir::North, carried: None, step_count: 0, seed: 0 }
    }

    #[test]
    fn reward_formula_points() {
        assert!((success_reward(40, 128) - 14.375).abs() < 1e-12);
        assert!((success_reward(128, 128) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn adjacency_predicate() {
        let mut s = empty_room(8);
        let red_ball = Item::new(ItemKind::Ball, Color::Red);
        let blue_box = Item::new(ItemKind::Box, Color::Blue);
        let goal = Clause::PutNextTo { moved: red_ball, target: blue_box };
        s.grid.set(Pos::new(3, 3), Entity::Item(red_ball));
        s.grid.set(Pos::new(3, 4), Entity::Item(blue_box));
        assert!(check_clause(&s, &goal));
        s.grid.set(Pos::new(3, 4), Entity::Empty);
        s.grid.set(Pos::new(4, 4), Entity::Item(blue_box));
        assert!(!check_clause(&s, &goal));
    }

    #[test]
    fn forward_blocked_by_wall_and_closed_door() {
        let mut s = empty_room(8);
        s.agent_pos = Pos::new(1, 1);
        s.apply(Action::Forward);
        assert_eq!(s.agent_pos, Pos::new(1, 1));
        s.agent_dir = Dir::East;
        s.grid.set(Pos::new(2, 1), Entity::Door { color: Color::Red, state: DoorState::Closed });
        s.apply(Action::Forward);
        assert_eq!(s.agent_pos, Pos::new(1, 1));
        s.apply(Action::Toggle);
        s.apply(Action::Forward);
        assert_eq!(s.agent_pos, Pos::new(2, 1));
    }

    #[test]
    fn locked_door_needs_matching_key() {
        let mut s = empty_room(8);
        s.agent_dir = Dir::East;
        let door = Pos::new(4, 3);
        s.grid.set(door, Entity::Door { color: Color::Yellow, state: DoorState::Locked });
        s.apply(Action::Toggle);
        assert_eq!(s.grid.get(door), Entity::Door { color: Color::Yellow, state: DoorState::Locked });
        s.carried = Some(Item::new(ItemKind::Key, Color::Red));
        s.apply(Action::Toggle);
        assert_eq!(s.grid.get(door), Entity::Door { color: Color::Yellow, state: DoorState::Locked });
        s.carried = Some(Item::new(ItemKind::Key, Color::Yellow));
        s.apply(Action::Toggle);
        assert_eq!(s.grid.get(door), Entity::Door { color: Color::Yellow, state: DoorState::Open });
    }

    #[test]
    fn pickup_and_drop_conserve_entities() {
        let mut s = empty_room(8);
        let ball = Item::new(ItemKind::Ball, Color::Grey);
        s.grid.set(Pos::new(3, 2), Entity::Item(ball));
        let before = s.grid.entity_multiset();
        s.apply(Action::Pickup);
        assert_eq!(s.carried, Some(ball));
        s.apply(Action::Pickup);
        s.apply(Action::TurnRight);
        s.apply(Action::Drop);
        assert_eq!(s.carried, None);
        assert_eq!(s.grid.get(Pos::new(4, 3)), Entity::Item(ball));
        assert_eq!(s.grid.entity_multiset(), before);
    }

    #[test]
    fn sequence_needs_order() {
        // "pick up the red ball before you pick up the blue box":
        // picking the box first, then the ball, then the box again succeeds
        // only on the last step.
        let mut s = empty_room(8);
        let ball = Item::new(ItemKind::Ball, Color::Red);
        let bx = Item::new(ItemKind::Box, Color::Blue);
        s.grid.set(Pos::new(3, 2), Entity::Item(bx));
        s.grid.set(Pos::new(4, 3), Entity::Item(ball));
        let goal = Goal::Sequence(Clause::PickUp { item: ball }, Connector::Before, Clause::PickUp { item: bx });
        let mut tr = GoalTracker::new(goal, &s);
        let script = [
            (Action::Pickup, false),
            (Action::Drop, false),
            (Action::TurnRight, false),
            (Action::Pickup, false),
            (Action::TurnLeft, false),
            (Action::TurnLeft, false),
            (Action::Drop, false),
            (Action::TurnRight, false),
            (Action::Pickup, true),
        ];
        for (i, (a, expect)) in script.into_iter().enumerate() {
            s.apply(a);
            assert_eq!(tr.update(&s), expect, "step {i} {a:?}");
        }
    }

    #[test]
    fn step_after_done_is_usage_error() {
        let spec = TaskSpec::new(TaskKind::PickUp, Layout::Local).unwrap().with_horizon(2);
        let (mut env, _) = GridEnv::reset(&spec, 3).unwrap();
        env.step(Action::Done).unwrap();
        let r = env.step(Action::Done).unwrap();
        assert!(r.done && !r.success && r.reward == 0.0);
        assert!(matches!(env.step(Action::Done), Err(GridError::Usage(_))));
    }
}
