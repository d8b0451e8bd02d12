//! Egocentric partial view with line-of-sight occlusion.
//!
//! The view is `VIEW × VIEW` cells. The agent sits at column `VIEW / 2` of the
//! bottom row and looks towards row 0. A cell is visible when the segment
//! joining the centres of the agent cell and that cell passes through the
//! open interior of no opaque cell. Touching a corner does not block.

use std::sync::OnceLock;

use super::entity::{shape_id, Dir, Entity, Pos};
use super::GridState;

pub const VIEW: usize = 8;
pub const AGENT_VIEW_X: usize = VIEW / 2;
pub const AGENT_VIEW_Y: usize = VIEW - 1;
pub const OBS_LEN: usize = VIEW * VIEW * 3;

/// `VIEW × VIEW × 3` ids, row-major over (view_y, view_x, channel).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation(pub [u8; OBS_LEN]);

impl Observation {
    pub fn cell(&self, vx: usize, vy: usize) -> [u8; 3] {
        let i = (vy * VIEW + vx) * 3;
        [self.0[i], self.0[i + 1], self.0[i + 2]]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(b: &[u8]) -> Option<Observation> {
        Some(Observation(b.try_into().ok()?))
    }
}

impl std::fmt::Debug for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Observation[")?;
        for vy in 0..VIEW {
            for vx in 0..VIEW {
                let c = self.cell(vx, vy);
                write!(f, " {}{}{}", c[0], c[1], c[2])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// World position of a view cell for an agent at `pos` facing `dir`.
pub fn view_to_world(pos: Pos, dir: Dir, vx: usize, vy: usize) -> Option<Pos> {
    let fwd = (AGENT_VIEW_Y - vy) as isize;
    let right = vx as isize - AGENT_VIEW_X as isize;
    let (fx, fy) = dir.delta();
    let (rx, ry) = dir.right().delta();
    let x = pos.x as isize + fwd * fx + right * rx;
    let y = pos.y as isize + fwd * fy + right * ry;
    (x >= 0 && y >= 0).then(|| Pos::new(x as usize, y as usize))
}

const EPS: f64 = 1e-9;

/// Whether the segment `p0 → p1` enters the open square `(cx, cx+1) × (cy, cy+1)`.
pub fn segment_crosses_cell(p0: (f64, f64), p1: (f64, f64), cx: usize, cy: usize) -> bool {
    let (lo_x, hi_x) = (cx as f64 + EPS, cx as f64 + 1.0 - EPS);
    let (lo_y, hi_y) = (cy as f64 + EPS, cy as f64 + 1.0 - EPS);
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, p0.0 - lo_x), (dx, hi_x - p0.0), (-dy, p0.1 - lo_y), (dy, hi_y - p0.1)] {
        if p == 0.0 {
            if q <= 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t0 < t1
}

/// For each view cell, the intermediate view cells its sight line crosses.
fn blockers() -> &'static Vec<Vec<(usize, usize)>> {
    static TABLE: OnceLock<Vec<Vec<(usize, usize)>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let eye = (AGENT_VIEW_X as f64 + 0.5, AGENT_VIEW_Y as f64 + 0.5);
        let mut table = Vec::with_capacity(VIEW * VIEW);
        for vy in 0..VIEW {
            for vx in 0..VIEW {
                let target = (vx as f64 + 0.5, vy as f64 + 0.5);
                let mut list = Vec::new();
                for by in 0..VIEW {
                    for bx in 0..VIEW {
                        let endpoint = (bx, by) == (vx, vy) || (bx, by) == (AGENT_VIEW_X, AGENT_VIEW_Y);
                        if !endpoint && segment_crosses_cell(eye, target, bx, by) {
                            list.push((bx, by));
                        }
                    }
                }
                table.push(list);
            }
        }
        table
    })
}

/// Intermediate view cells between the agent and `(vx, vy)`.
pub fn sight_line(vx: usize, vy: usize) -> &'static [(usize, usize)] {
    &blockers()[vy * VIEW + vx]
}

pub fn encode_observation(state: &GridState) -> Observation {
    let mut world = [[None::<Entity>; VIEW]; VIEW];
    for (vy, row) in world.iter_mut().enumerate() {
        for (vx, cell) in row.iter_mut().enumerate() {
            *cell = view_to_world(state.agent_pos, state.agent_dir, vx, vy).and_then(|p| state.grid.try_get(p));
        }
    }
    let mut out = [0u8; OBS_LEN];
    for vy in 0..VIEW {
        for vx in 0..VIEW {
            let i = (vy * VIEW + vx) * 3;
            let code = if (vx, vy) == (AGENT_VIEW_X, AGENT_VIEW_Y) {
                state.carried.map(Entity::Item).unwrap_or(Entity::Empty).encode()
            } else {
                match world[vy][vx] {
                    None => [shape_id::UNSEEN, 0, 0],
                    Some(e) => {
                        let blocked = sight_line(vx, vy)
                            .iter()
                            .any(|&(bx, by)| world[by][bx].map_or(true, Entity::is_opaque));
                        if blocked {
                            [shape_id::UNSEEN, 0, 0]
                        } else {
                            e.encode()
                        }
                    }
                }
            };
            out[i..i + 3].copy_from_slice(&code);
        }
    }
    Observation(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense sampling along the segment; independent of the clipping code.
    fn sampled_crossings(vx: usize, vy: usize) -> Vec<(usize, usize)> {
        let eye = (AGENT_VIEW_X as f64 + 0.5, AGENT_VIEW_Y as f64 + 0.5);
        let target = (vx as f64 + 0.5, vy as f64 + 0.5);
        let mut hit = [[false; VIEW]; VIEW];
        let n = 200_000;
        for s in 0..=n {
            let t = s as f64 / n as f64;
            let x = eye.0 + t * (target.0 - eye.0);
            let y = eye.1 + t * (target.1 - eye.1);
            let (fx, fy) = (x - x.floor(), y - y.floor());
            if fx > 1e-7 && fx < 1.0 - 1e-7 && fy > 1e-7 && fy < 1.0 - 1e-7 {
                hit[y.floor() as usize][x.floor() as usize] = true;
            }
        }
        let mut out = Vec::new();
        for by in 0..VIEW {
            for bx in 0..VIEW {
                let endpoint = (bx, by) == (vx, vy) || (bx, by) == (AGENT_VIEW_X, AGENT_VIEW_Y);
                if hit[by][bx] && !endpoint {
                    out.push((bx, by));
                }
            }
        }
        out
    }

    #[test]
    fn sight_lines_match_sampling() {
        for vy in 0..VIEW {
            for vx in 0..VIEW {
                assert_eq!(sight_line(vx, vy), sampled_crossings(vx, vy).as_slice(), "cell ({vx},{vy})");
            }
        }
    }

    #[test]
    fn straight_ahead_line() {
        let line = sight_line(AGENT_VIEW_X, 0);
        let expect: Vec<_> = (1..AGENT_VIEW_Y).rev().map(|y| (AGENT_VIEW_X, y)).collect();
        let mut sorted = line.to_vec();
        sorted.sort_by_key(|&(_, y)| std::cmp::Reverse(y));
        assert_eq!(sorted, expect);
    }

    #[test]
    fn view_mapping_rotates_with_heading() {
        let p = Pos::new(10, 10);
        assert_eq!(view_to_world(p, Dir::North, AGENT_VIEW_X, AGENT_VIEW_Y - 1), Some(Pos::new(10, 9)));
        assert_eq!(view_to_world(p, Dir::East, AGENT_VIEW_X, AGENT_VIEW_Y - 1), Some(Pos::new(11, 10)));
        assert_eq!(view_to_world(p, Dir::East, AGENT_VIEW_X + 1, AGENT_VIEW_Y), Some(Pos::new(10, 11)));
        assert_eq!(view_to_world(p, Dir::South, AGENT_VIEW_X + 1, AGENT_VIEW_Y), Some(Pos::new(9, 10)));
    }
}
