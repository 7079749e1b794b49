use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Move, Observation, AGENT, WALL};
use crate::error::{invalid, Result};

/// Cells per side of a maze grid, border included.
pub const MAZE_GRID: usize = 8;
/// Pixels per cell side.
pub const MAZE_CELL_PX: usize = 6;
pub const MAZE_PX: usize = MAZE_GRID * MAZE_CELL_PX;

/// `(row, col)` in grid coordinates.
pub type Cell = (usize, usize);

/// 8×8 wall layout with an agent start and an optional key cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MazeSpec {
    pub walls: [[bool; MAZE_GRID]; MAZE_GRID],
    pub agent_cell: Cell,
    pub key_cell: Option<Cell>,
    pub seed: u64,
}

impl MazeSpec {
    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[cell.0][cell.1]
    }

    pub fn is_border(cell: Cell) -> bool {
        cell.0 == 0 || cell.1 == 0 || cell.0 == MAZE_GRID - 1 || cell.1 == MAZE_GRID - 1
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..MAZE_GRID {
            for c in 0..MAZE_GRID {
                if !self.walls[r][c] {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn wall_count(&self) -> usize {
        self.walls.iter().flatten().filter(|w| **w).count()
    }

    /// Checks border walls, free endpoints and start-to-key connectivity.
    pub fn validate(&self) -> Result<()> {
        for r in 0..MAZE_GRID {
            for c in 0..MAZE_GRID {
                if Self::is_border((r, c)) && !self.walls[r][c] {
                    return Err(invalid(alloc::format!("border cell ({}, {}) is free", r, c)));
                }
            }
        }
        if self.is_wall(self.agent_cell) {
            return Err(invalid("agent cell is a wall"));
        }
        if let Some(key) = self.key_cell {
            if self.is_wall(key) {
                return Err(invalid("key cell is a wall"));
            }
            if !bfs_reachable(self, self.agent_cell).contains(&key) {
                return Err(invalid("key unreachable from agent cell"));
            }
        }
        Ok(())
    }

    /// Cell reached by `mv` from `cell`; blocked moves leave the cell unchanged.
    pub fn moved(&self, cell: Cell, mv: Move) -> Cell {
        let (dr, dc) = mv.delta();
        let r = cell.0 as isize + dr;
        let c = cell.1 as isize + dc;
        if r < 0 || c < 0 || r >= MAZE_GRID as isize || c >= MAZE_GRID as isize {
            return cell;
        }
        let next = (r as usize, c as usize);
        if self.is_wall(next) {
            cell
        } else {
            next
        }
    }

    /// Renders walls and the agent at `agent` as a 48×48 observation.
    pub fn render(&self, agent: Cell) -> Observation {
        let mut obs = Observation::blank(MAZE_PX, MAZE_PX);
        for r in 0..MAZE_GRID {
            for c in 0..MAZE_GRID {
                if self.walls[r][c] {
                    obs.fill_block(r * MAZE_CELL_PX, c * MAZE_CELL_PX, MAZE_CELL_PX, MAZE_CELL_PX, WALL);
                }
            }
        }
        obs.fill_block(agent.0 * MAZE_CELL_PX, agent.1 * MAZE_CELL_PX, MAZE_CELL_PX, MAZE_CELL_PX, AGENT);
        obs
    }

    /// One observation per free cell, row-major.
    pub fn enumerate_states(&self) -> Vec<(Cell, Observation)> {
        self.free_cells().into_iter().map(|c| (c, self.render(c))).collect()
    }

    /// Eight lines of eight characters from `#`, `.`, `A`, `K`.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(MAZE_GRID * (MAZE_GRID + 1));
        for r in 0..MAZE_GRID {
            for c in 0..MAZE_GRID {
                let ch = if self.walls[r][c] {
                    '#'
                } else if self.agent_cell == (r, c) {
                    'A'
                } else if self.key_cell == Some((r, c)) {
                    'K'
                } else {
                    '.'
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`MazeSpec::to_text`] output. The seed is not part of the text.
    pub fn from_text(text: &str, seed: u64) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.is_empty()).collect();
        if lines.len() != MAZE_GRID {
            return Err(invalid(alloc::format!("expected {} lines, got {}", MAZE_GRID, lines.len())));
        }
        let mut walls = [[false; MAZE_GRID]; MAZE_GRID];
        let mut agent = None;
        let mut key = None;
        for (r, line) in lines.iter().enumerate() {
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != MAZE_GRID {
                return Err(invalid(alloc::format!("line {} has {} chars", r, chars.len())));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                match ch {
                    '#' => walls[r][c] = true,
                    '.' => {}
                    'A' if agent.is_none() => agent = Some((r, c)),
                    'K' if key.is_none() => key = Some((r, c)),
                    other => return Err(invalid(alloc::format!("unexpected '{}' at ({}, {})", other, r, c))),
                }
            }
        }
        let agent_cell = agent.ok_or_else(|| invalid("no agent cell"))?;
        let spec = MazeSpec { walls, agent_cell, key_cell: key, seed };
        spec.validate()?;
        Ok(spec)
    }
}

/// Cells reachable from `start` through free cells (4-neighbourhood).
pub fn bfs_reachable(spec: &MazeSpec, start: Cell) -> Vec<Cell> {
    let mut seen = [[false; MAZE_GRID]; MAZE_GRID];
    let mut out = Vec::new();
    if spec.is_wall(start) {
        return out;
    }
    let mut queue = VecDeque::new();
    seen[start.0][start.1] = true;
    queue.push_back(start);
    while let Some(cell) = queue.pop_front() {
        out.push(cell);
        for mv in [Move::Up, Move::Down, Move::Left, Move::Right] {
            let next = spec.moved(cell, mv);
            if !seen[next.0][next.1] {
                seen[next.0][next.1] = true;
                queue.push_back(next);
            }
        }
    }
    out
}
