use rand::RngCore;

use super::maze::{Cell, MazeSpec, MAZE_GRID};
use super::{EnvKind, Environment, Move, Observation, StepResult};
use crate::error::{invalid, Result};

pub const QUAD_MAZE_COUNT: usize = 4;

// Four fixed wall architectures; free cells 30 + 30 + 30 + 29 = 119.
const LAYOUTS: [&str; QUAD_MAZE_COUNT] = [
    "########\n\
     #......#\n\
     #..#.#.#\n\
     #..#...#\n\
     #..#.#.#\n\
     #....#.#\n\
     #......#\n\
     ########",
    "########\n\
     #......#\n\
     #.####.#\n\
     #......#\n\
     #......#\n\
     #.##...#\n\
     #......#\n\
     ########",
    "########\n\
     #......#\n\
     #......#\n\
     #..##..#\n\
     #..##..#\n\
     #......#\n\
     #.#..#.#\n\
     ########",
    "########\n\
     #....#.#\n\
     #....#.#\n\
     #.##...#\n\
     #..#...#\n\
     #......#\n\
     #...##.#\n\
     ########",
];

/// Wall architecture `maze_id` with the agent on its first free cell.
pub fn quad_maze(maze_id: usize) -> Result<MazeSpec> {
    let layout = LAYOUTS
        .get(maze_id)
        .ok_or_else(|| invalid(alloc::format!("quad maze id {} not in 0..{}", maze_id, QUAD_MAZE_COUNT)))?;
    let mut walls = [[false; MAZE_GRID]; MAZE_GRID];
    for (r, line) in layout.lines().map(str::trim).enumerate() {
        for (c, ch) in line.chars().enumerate() {
            walls[r][c] = ch == '#';
        }
    }
    let mut spec = MazeSpec { walls, agent_cell: (0, 0), key_cell: None, seed: maze_id as u64 };
    spec.agent_cell = spec.free_cells()[0];
    Ok(spec)
}

/// One of the four fixed architectures; no reward, never terminal.
#[derive(Debug, Clone)]
pub struct QuadMazeEnv {
    pub maze_id: usize,
    pub spec: MazeSpec,
    pub agent: Cell,
}

impl QuadMazeEnv {
    pub fn new(maze_id: usize) -> Result<Self> {
        let spec = quad_maze(maze_id)?;
        let agent = spec.agent_cell;
        Ok(Self { maze_id, spec, agent })
    }
}

impl Environment for QuadMazeEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::QuadMaze
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        let free = self.spec.free_cells();
        let pick = (rng.next_u64() % free.len() as u64) as usize;
        self.agent = free[pick];
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let mv = Move::from_id(action)?;
        self.agent = self.spec.moved(self.agent, mv);
        Ok(StepResult { observation: self.observation(), reward: 0.0, terminal: false })
    }

    fn observation(&self) -> Observation {
        self.spec.render(self.agent)
    }

    fn is_terminal(&self) -> bool {
        false
    }
}
