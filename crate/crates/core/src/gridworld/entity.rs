use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Purple, Color::Yellow, Color::Grey];

    /// Observation id; green is 1 so a closed green door encodes as (4, 1, 1).
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Grey => "grey",
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Objects the agent can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Key,
    Ball,
    Box,
}

impl ItemKind {
    pub const ALL: [ItemKind; 3] = [ItemKind::Key, ItemKind::Ball, ItemKind::Box];

    pub fn name(self) -> &'static str {
        match self {
            ItemKind::Key => "key",
            ItemKind::Ball => "ball",
            ItemKind::Box => "box",
        }
    }

    pub fn from_name(s: &str) -> Option<ItemKind> {
        ItemKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Item {
    pub kind: ItemKind,
    pub color: Color,
}

impl Item {
    pub fn new(kind: ItemKind, color: Color) -> Self {
        Item { kind, color }
    }
}

impl std::fmt::Display for Item {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.color.name(), self.kind.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoorState {
    Open,
    Closed,
    Locked,
}

impl DoorState {
    pub fn id(self) -> u8 {
        match self {
            DoorState::Open => 0,
            DoorState::Closed => 1,
            DoorState::Locked => 2,
        }
    }
}

/// Content of one grid cell. Colour exists only for items and doors and a
/// door state only for doors, which the variants enforce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Entity {
    #[default]
    Empty,
    Wall,
    Item(Item),
    Door { color: Color, state: DoorState },
}

/// Shape ids of the observation encoding.
pub mod shape_id {
    pub const UNSEEN: u8 = 0;
    pub const EMPTY: u8 = 1;
    pub const WALL: u8 = 2;
    pub const DOOR: u8 = 4;
    pub const KEY: u8 = 5;
    pub const BALL: u8 = 6;
    pub const BOX: u8 = 7;
    /// Size of the shape id range (3 is reserved and never emitted).
    pub const COUNT: usize = 8;
}

/// Sizes of the colour and state id ranges.
pub const COLOR_COUNT: usize = 6;
pub const STATE_COUNT: usize = 3;

impl Entity {
    /// `(shape, color, state)` triple; colour and state are 0 where undefined.
    pub fn encode(self) -> [u8; 3] {
        match self {
            Entity::Empty => [shape_id::EMPTY, 0, 0],
            Entity::Wall => [shape_id::WALL, 0, 0],
            Entity::Item(it) => {
                let shape = match it.kind {
                    ItemKind::Key => shape_id::KEY,
                    ItemKind::Ball => shape_id::BALL,
                    ItemKind::Box => shape_id::BOX,
                };
                [shape, it.color.id(), 0]
            }
            Entity::Door { color, state } => [shape_id::DOOR, color.id(), state.id()],
        }
    }

    /// Whether the agent can stand on this cell.
    pub fn is_passable(self) -> bool {
        matches!(self, Entity::Empty | Entity::Door { state: DoorState::Open, .. })
    }

    /// Whether this cell blocks sight.
    pub fn is_opaque(self) -> bool {
        matches!(self, Entity::Wall | Entity::Door { state: DoorState::Closed | DoorState::Locked, .. })
    }

    pub fn item(self) -> Option<Item> {
        match self {
            Entity::Item(it) => Some(it),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Dir::North => (0, -1),
            Dir::East => (1, 0),
            Dir::South => (0, 1),
            Dir::West => (-1, 0),
        }
    }

    pub fn right(self) -> Dir {
        Dir::ALL[(self as usize + 1) % 4]
    }

    pub fn left(self) -> Dir {
        Dir::ALL[(self as usize + 3) % 4]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }

    pub fn offset(self, d: Dir) -> Option<Pos> {
        let (dx, dy) = d.delta();
        Some(Pos { x: self.x.checked_add_signed(dx)?, y: self.y.checked_add_signed(dy)? })
    }

    pub fn is_adjacent(self, other: Pos) -> bool {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y) == 1
    }
}

/// Agent actions with their fixed integer ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::Forward,
        Action::Pickup,
        Action::Drop,
        Action::Toggle,
        Action::Done,
    ];
    pub const COUNT: usize = 7;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Action::ALL.get(id).copied()
    }
}
