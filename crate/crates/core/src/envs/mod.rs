//! Deterministic pixel MDPs: the quadruple maze, catcher and random mazes.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{invalid, Result};

mod catcher;
mod maze;
mod quadmaze;
mod randmaze;

pub use catcher::{CatcherEnv, CatcherState, CATCHER_COLS, CATCHER_FALL_ROWS, CATCHER_PADDLE_ROW, CATCHER_PX};
pub use maze::{bfs_reachable, Cell, MazeSpec, MAZE_CELL_PX, MAZE_GRID, MAZE_PX};
pub use quadmaze::{quad_maze, QuadMazeEnv, QUAD_MAZE_COUNT};
pub use randmaze::{randmaze_generate, RandomMazeEnv, RANDOM_MAZE_HORIZON, WALL_PROBABILITY};

pub const BACKGROUND: f32 = 0.0;
pub const AGENT: f32 = 0.5;
pub const WALL: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EnvKind {
    QuadMaze,
    Catcher,
    #[cfg_attr(feature = "serde", serde(rename = "randmaze"))]
    RandomMaze,
}

impl EnvKind {
    pub fn id(self) -> u8 {
        match self {
            EnvKind::QuadMaze => 0,
            EnvKind::Catcher => 1,
            EnvKind::RandomMaze => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(EnvKind::QuadMaze),
            1 => Ok(EnvKind::Catcher),
            2 => Ok(EnvKind::RandomMaze),
            other => Err(invalid(alloc::format!("unknown env id {}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::QuadMaze => "quadmaze",
            EnvKind::Catcher => "catcher",
            EnvKind::RandomMaze => "randmaze",
        }
    }

    pub fn n_actions(self) -> usize {
        match self {
            EnvKind::Catcher => 2,
            _ => 4,
        }
    }

    /// Observation side length in pixels.
    pub fn pixels(self) -> usize {
        match self {
            EnvKind::Catcher => CATCHER_PX,
            _ => MAZE_PX,
        }
    }
}

/// Grayscale pixel observation, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Observation {
    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![BACKGROUND; height * width] }
    }

    pub(crate) fn fill_block(&mut self, row: usize, col: usize, size_h: usize, size_w: usize, value: f32) {
        for r in row..(row + size_h).min(self.height) {
            let start = r * self.width + col;
            let end = r * self.width + (col + size_w).min(self.width);
            self.pixels[start..end].fill(value);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f32,
    pub terminal: bool,
}

/// Maze moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Move {
    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(Move::Up),
            1 => Ok(Move::Down),
            2 => Ok(Move::Left),
            3 => Ok(Move::Right),
            other => Err(invalid(alloc::format!("invalid maze action {}", other))),
        }
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (-1, 0),
            Move::Down => (1, 0),
            Move::Left => (0, -1),
            Move::Right => (0, 1),
        }
    }
}

/// Common interface used by data collection and the RL loop.
pub trait Environment {
    fn kind(&self) -> EnvKind;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn observation(&self) -> Observation;
    fn is_terminal(&self) -> bool;

    fn n_actions(&self) -> usize {
        self.kind().n_actions()
    }
}
