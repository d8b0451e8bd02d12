use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::entity::{Color, Dir, DoorState, Entity, Item, ItemKind, Pos};
use super::goal::{check_clause, Clause, Connector, Goal};
use super::{Grid, GridError, GridState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    PutNextTo,
    PickUp,
    Open,
    Unlock,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Local,
    Medium,
    Large,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [TaskKind::PutNextTo, TaskKind::PickUp, TaskKind::Open, TaskKind::Unlock, TaskKind::Sequence];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PutNextTo => "PutNextTo",
            TaskKind::PickUp => "PickUp",
            TaskKind::Open => "Open",
            TaskKind::Unlock => "Unlock",
            TaskKind::Sequence => "Sequence",
        }
    }
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Local, Layout::Medium, Layout::Large];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Local => "Local",
            Layout::Medium => "Medium",
            Layout::Large => "Large",
        }
    }

    /// Rooms per row and per column.
    pub fn rooms(self) -> (usize, usize) {
        match self {
            Layout::Local => (1, 1),
            Layout::Medium => (2, 1),
            Layout::Large => (3, 3),
        }
    }
}

/// Default episode horizon.
pub fn default_horizon(kind: TaskKind, layout: Layout) -> u32 {
    use Layout::*;
    use TaskKind::*;
    match (kind, layout) {
        (PutNextTo, Local) => 128,
        (PutNextTo, Medium) => 256,
        (PutNextTo, Large) => 512,
        (PickUp, Local) => 64,
        (PickUp, Medium) => 128,
        (PickUp, Large) => 512,
        (Open, _) | (Unlock, _) if layout == Medium => 128,
        (Open, _) | (Unlock, _) => 512,
        (Sequence, Local) => 256,
        (Sequence, Medium) => 512,
        (Sequence, Large) => 1024,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub layout: Layout,
    /// Maximum number of steps per episode.
    pub horizon: u32,
    /// Irrelevant objects per room.
    pub distractors: usize,
    /// Side of one room in cells, walls included.
    pub room_size: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, layout: Layout) -> Result<TaskSpec, GridError> {
        let spec = TaskSpec { kind, layout, horizon: default_horizon(kind, layout), distractors: 4, room_size: 8 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_horizon(mut self, h: u32) -> Self {
        self.horizon = h;
        self
    }

    pub fn with_room_size(mut self, n: usize) -> Self {
        self.room_size = n;
        self
    }

    pub fn with_distractors(mut self, n: usize) -> Self {
        self.distractors = n;
        self
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.kind.name(), self.layout.name())
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if matches!(self.kind, TaskKind::Open | TaskKind::Unlock) && self.layout == Layout::Local {
            return Err(GridError::Config(format!("{} needs a door; Local layouts have none", self.name())));
        }
        if self.horizon == 0 {
            return Err(GridError::Config("horizon must be at least 1".into()));
        }
        if !(5..=16).contains(&self.room_size) {
            return Err(GridError::Config(format!("room size {} outside 5..=16", self.room_size)));
        }
        let interior = (self.room_size - 2) * (self.room_size - 2);
        // Worst case for one room: all goal items, its distractors, the agent
        // and up to four reserved door-front cells.
        let needed = 4 + self.distractors + 1 + if self.layout == Layout::Local { 0 } else { 4 };
        if needed > interior {
            return Err(GridError::Config(format!(
                "room of size {} has {interior} free cells, {needed} needed for {} distractors",
                self.room_size, self.distractors
            )));
        }
        Ok(())
    }

    fn salt(&self) -> u64 {
        let tag = (self.kind as u64) << 8 | self.layout as u64;
        tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskSpec {
    type Err = GridError;

    /// Parses `Kind-Layout`, e.g. `PutNextTo-Local`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (k, l) = s.split_once('-').ok_or_else(|| GridError::Config(format!("task '{s}' is not Kind-Layout")))?;
        let kind = TaskKind::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(k))
            .ok_or_else(|| GridError::Config(format!("unknown task kind '{k}'")))?;
        let layout = Layout::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(l))
            .ok_or_else(|| GridError::Config(format!("unknown layout '{l}'")))?;
        TaskSpec::new(kind, layout)
    }
}

struct Rooms {
    cols: usize,
    rows: usize,
    size: usize,
}

impl Rooms {
    fn count(&self) -> usize {
        self.cols * self.rows
    }

    fn origin(&self, room: usize) -> (usize, usize) {
        ((room % self.cols) * (self.size - 1), (room / self.cols) * (self.size - 1))
    }

    fn interior(&self, room: usize) -> Vec<Pos> {
        let (ox, oy) = self.origin(room);
        (1..self.size - 1).flat_map(|y| (1..self.size - 1).map(move |x| Pos::new(ox + x, oy + y))).collect()
    }

    /// Wall cells between horizontally or vertically adjacent rooms, with the room pair.
    fn walls(&self) -> Vec<(usize, usize, Vec<Pos>)> {
        let mut out = Vec::new();
        for r in 0..self.count() {
            let (ox, oy) = self.origin(r);
            if r % self.cols + 1 < self.cols {
                let x = ox + self.size - 1;
                out.push((r, r + 1, (1..self.size - 1).map(|y| Pos::new(x, oy + y)).collect()));
            }
            if r / self.cols + 1 < self.rows {
                let y = oy + self.size - 1;
                out.push((r, r + self.cols, (1..self.size - 1).map(|x| Pos::new(ox + x, y)).collect()));
            }
        }
        out
    }
}

struct Draft {
    grid: Grid,
    reserved: HashSet<Pos>,
}

impl Draft {
    fn free_cells(&self, cells: &[Pos]) -> Vec<Pos> {
        cells.iter().copied().filter(|p| self.grid.get(*p) == Entity::Empty && !self.reserved.contains(p)).collect()
    }
}

const MAX_ATTEMPTS: usize = 200;

/// Builds the initial state and goal for `spec` and `seed`.
pub fn generate_layout(spec: &TaskSpec, seed: u64) -> Result<(GridState, Goal), GridError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.salt());
    for _ in 0..MAX_ATTEMPTS {
        if let Some(out) = try_generate(spec, seed, &mut rng) {
            return Ok(out);
        }
    }
    Err(GridError::Config(format!("could not place the entities of {spec} in {MAX_ATTEMPTS} attempts")))
}

fn random_item(rng: &mut ChaCha8Rng) -> Item {
    Item::new(*ItemKind::ALL.choose(rng).unwrap(), *Color::ALL.choose(rng).unwrap())
}

fn distinct_items(rng: &mut ChaCha8Rng, n: usize, taken: &mut Vec<Item>) -> Vec<Item> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let it = random_item(rng);
        if !taken.contains(&it) {
            taken.push(it);
            out.push(it);
        }
    }
    out
}

fn try_generate(spec: &TaskSpec, seed: u64, rng: &mut ChaCha8Rng) -> Option<(GridState, Goal)> {
    let (cols, rows) = spec.layout.rooms();
    let rooms = Rooms { cols, rows, size: spec.room_size };
    let width = cols * (spec.room_size - 1) + 1;
    let height = rows * (spec.room_size - 1) + 1;
    let mut grid = Grid::new(width, height);
    for r in 0..rooms.count() {
        let (ox, oy) = rooms.origin(r);
        for i in 0..spec.room_size {
            grid.set(Pos::new(ox + i, oy), Entity::Wall);
            grid.set(Pos::new(ox + i, oy + spec.room_size - 1), Entity::Wall);
            grid.set(Pos::new(ox, oy + i), Entity::Wall);
            grid.set(Pos::new(ox + spec.room_size - 1, oy + i), Entity::Wall);
        }
    }
    let mut draft = Draft { grid, reserved: HashSet::new() };

    // Doors, one per internal wall.
    let mut doors: Vec<(Pos, usize, usize)> = Vec::new();
    for (a, b, cells) in rooms.walls() {
        let p = *cells.choose(rng).unwrap();
        doors.push((p, a, b));
        for q in draft.grid.neighbours(p).collect::<Vec<_>>() {
            if draft.grid.get(q) != Entity::Wall {
                draft.reserved.insert(q);
            }
        }
    }

    let agent_room = rng.gen_range(0..rooms.count());
    // Doors touching the agent room, for Unlock.
    let agent_doors: Vec<usize> =
        (0..doors.len()).filter(|&i| doors[i].1 == agent_room || doors[i].2 == agent_room).collect();

    let mut taken: Vec<Item> = Vec::new();
    let mut door_colors: Vec<Option<Color>> = vec![None; doors.len()];
    let mut door_states = vec![DoorState::Closed; doors.len()];
    let mut key_item: Option<Item> = None;

    // Target doors get a colour no other door shares.
    let pick_door = |rng: &mut ChaCha8Rng, candidates: &[usize], colors: &mut Vec<Option<Color>>| {
        let free: Vec<usize> = candidates.iter().copied().filter(|&i| colors[i].is_none()).collect();
        let d = *free.choose(rng)?;
        let palette: Vec<Color> = Color::ALL.into_iter().filter(|c| !colors.contains(&Some(*c))).collect();
        colors[d] = Some(*palette.choose(rng)?);
        Some(d)
    };

    let all_doors: Vec<usize> = (0..doors.len()).collect();
    let mut make_clause = |kind: TaskKind, rng: &mut ChaCha8Rng, taken: &mut Vec<Item>| -> Option<Clause> {
        Some(match kind {
            TaskKind::PutNextTo => {
                let v = distinct_items(rng, 2, taken);
                Clause::PutNextTo { moved: v[0], target: v[1] }
            }
            TaskKind::PickUp => Clause::PickUp { item: distinct_items(rng, 1, taken)[0] },
            TaskKind::Open => {
                let d = pick_door(rng, &all_doors, &mut door_colors)?;
                Clause::Open { color: door_colors[d]? }
            }
            TaskKind::Unlock => {
                let d = pick_door(rng, &agent_doors, &mut door_colors)?;
                let color = door_colors[d]?;
                door_states[d] = DoorState::Locked;
                let key = Item::new(ItemKind::Key, color);
                taken.push(key);
                key_item = Some(key);
                Clause::Open { color }
            }
            TaskKind::Sequence => unreachable!("sequences nest elementary clauses only"),
        })
    };

    let goal = match spec.kind {
        TaskKind::Sequence => {
            let mut kinds = vec![TaskKind::PutNextTo, TaskKind::PickUp];
            if !doors.is_empty() {
                kinds.push(TaskKind::Open);
            }
            let k1 = *kinds.choose(rng).unwrap();
            if k1 == TaskKind::Open && doors.len() < 2 {
                kinds.retain(|&k| k != TaskKind::Open);
            }
            let k2 = *kinds.choose(rng).unwrap();
            let c1 = make_clause(k1, rng, &mut taken)?;
            let c2 = make_clause(k2, rng, &mut taken)?;
            let conn = if rng.gen_bool(0.5) { Connector::Before } else { Connector::After };
            Goal::Sequence(c1, conn, c2)
        }
        k => Goal::Single(make_clause(k, rng, &mut taken)?),
    };

    let target_colors: Vec<Color> = door_colors.iter().flatten().copied().collect();
    let palette: Vec<Color> = Color::ALL.into_iter().filter(|c| !target_colors.contains(c)).collect();
    let door_colors: Vec<Color> =
        door_colors.into_iter().map(|c| c.unwrap_or_else(|| *palette.choose(rng).unwrap())).collect();
    for (i, &(p, _, _)) in doors.iter().enumerate() {
        draft.grid.set(p, Entity::Door { color: door_colors[i], state: door_states[i] });
    }

    let agent_cells = rooms.interior(agent_room);
    let any_room = |rng: &mut ChaCha8Rng| if spec.layout == Layout::Local { 0 } else { rng.gen_range(0..rooms.count()) };

    let place = |draft: &mut Draft, rng: &mut ChaCha8Rng, room_cells: &[Pos], it: Item| -> Option<Pos> {
        let free = draft.free_cells(room_cells);
        let p = *free.choose(rng)?;
        draft.grid.set(p, Entity::Item(it));
        Some(p)
    };

    // Goal items.
    for clause in goal.clauses() {
        for it in clause.items() {
            let room = any_room(rng);
            place(&mut draft, rng, &rooms.interior(room), it)?;
        }
    }
    if let Some(key) = key_item {
        place(&mut draft, rng, &agent_cells, key)?;
    }

    // Distractors never share a description with a goal item.
    for r in 0..rooms.count() {
        let cells = rooms.interior(r);
        for _ in 0..spec.distractors {
            let it = loop {
                let it = random_item(rng);
                if !taken.contains(&it) {
                    break it;
                }
            };
            place(&mut draft, rng, &cells, it)?;
        }
    }

    let agent_pos = *draft.free_cells(&agent_cells).choose(rng)?;
    let agent_dir = *Dir::ALL.choose(rng).unwrap();
    let state = GridState { grid: draft.grid, agent_pos, agent_dir, carried: None, step_count: 0, seed };

    if !layout_is_sound(&state, &goal) {
        return None;
    }
    Some((state, goal))
}

/// Every free cell is connected to the agent (doors count as passable),
/// every item touches a reachable free cell, goal clauses do not hold yet,
/// and objects to be put next to each other do not start adjacent.
fn layout_is_sound(state: &GridState, goal: &Goal) -> bool {
    let grid = &state.grid;
    let walkable = |e: Entity| matches!(e, Entity::Empty | Entity::Door { .. });
    let mut seen = vec![false; grid.width() * grid.height()];
    let idx = |p: Pos| p.y * grid.width() + p.x;
    let mut queue = VecDeque::from([state.agent_pos]);
    seen[idx(state.agent_pos)] = true;
    while let Some(p) = queue.pop_front() {
        for q in grid.neighbours(p) {
            if !seen[idx(q)] && walkable(grid.get(q)) {
                seen[idx(q)] = true;
                queue.push_back(q);
            }
        }
    }
    for p in grid.positions() {
        match grid.get(p) {
            Entity::Empty if !seen[idx(p)] => return false,
            Entity::Item(_) if !grid.neighbours(p).any(|q| seen[idx(q)] && grid.get(q) == Entity::Empty) => {
                return false
            }
            _ => {}
        }
    }
    let clauses = goal.clauses();
    if clauses.iter().any(|c| check_clause(state, c)) {
        return false;
    }
    !clauses.iter().any(|c| matches!(c, Clause::PutNextTo { .. }) && super::role_achieved(state, c, super::Role::Target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::find_door;

    #[test]
    fn same_seed_same_layout() {
        let spec = TaskSpec::new(TaskKind::PutNextTo, Layout::Local).unwrap();
        assert_eq!(generate_layout(&spec, 7).unwrap(), generate_layout(&spec, 7).unwrap());
        assert_ne!(generate_layout(&spec, 7).unwrap().0, generate_layout(&spec, 8).unwrap().0);
    }

    #[test]
    fn unlock_has_locked_door_and_matching_key() {
        let spec = TaskSpec::new(TaskKind::Unlock, Layout::Medium).unwrap();
        for seed in 0..50 {
            let (s, g) = generate_layout(&spec, seed).unwrap();
            let Goal::Single(Clause::Open { color }) = g else { panic!("{g:?}") };
            let (_, state) = find_door(&s, color).unwrap();
            assert_eq!(state, DoorState::Locked);
            assert!(s.grid.find(|e| e == Entity::Item(Item::new(ItemKind::Key, color))).is_some());
        }
    }

    #[test]
    fn doorless_layouts_reject_door_tasks() {
        assert!(TaskSpec::new(TaskKind::Open, Layout::Local).is_err());
        assert!(TaskSpec::new(TaskKind::Unlock, Layout::Local).is_err());
    }

    #[test]
    fn overfull_room_is_a_config_error() {
        let spec = TaskSpec::new(TaskKind::PutNextTo, Layout::Local).unwrap().with_room_size(5).with_distractors(6);
        assert!(matches!(generate_layout(&spec, 0), Err(GridError::Config(_))));
    }

    #[test]
    fn every_task_generates() {
        for kind in TaskKind::ALL {
            for layout in Layout::ALL {
                let Ok(spec) = TaskSpec::new(kind, layout) else { continue };
                for seed in 0..30 {
                    generate_layout(&spec, seed).unwrap_or_else(|e| panic!("{spec} seed {seed}: {e}"));
                }
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        let s: TaskSpec = "Sequence-Medium".parse().unwrap();
        assert_eq!(s.name(), "Sequence-Medium");
        assert_eq!(s.horizon, 512);
        assert!("Nope-Local".parse::<TaskSpec>().is_err());
    }
}
