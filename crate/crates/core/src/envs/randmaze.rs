use rand::{Rng, RngCore};

use super::maze::{bfs_reachable, Cell, MazeSpec, MAZE_GRID};
use super::{EnvKind, Environment, Move, Observation, StepResult};
use crate::error::{Error, Result};
use crate::rng::from_seed;

/// Probability that an interior cell is a wall.
pub const WALL_PROBABILITY: f64 = 0.3;
/// Steps before an episode is cut off.
pub const RANDOM_MAZE_HORIZON: usize = 50;
const RETRY_CAP: usize = 10_000;
const START: Cell = (MAZE_GRID - 2, 1);
const KEY: Cell = (1, MAZE_GRID - 2);
const STEP_REWARD: f32 = -0.1;
const KEY_REWARD: f32 = 1.0;

/// Samples interior walls i.i.d. and rejects layouts whose bottom-left start
/// or top-right key is blocked or disconnected.
pub fn randmaze_generate(seed: u64) -> Result<MazeSpec> {
    let mut rng = from_seed(seed);
    for _ in 0..RETRY_CAP {
        let mut walls = [[true; MAZE_GRID]; MAZE_GRID];
        for row in walls.iter_mut().take(MAZE_GRID - 1).skip(1) {
            for w in row.iter_mut().take(MAZE_GRID - 1).skip(1) {
                *w = rng.gen::<f64>() < WALL_PROBABILITY;
            }
        }
        let spec = MazeSpec { walls, agent_cell: START, key_cell: Some(KEY), seed };
        if spec.is_wall(START) || spec.is_wall(KEY) {
            continue;
        }
        if bfs_reachable(&spec, START).contains(&KEY) {
            return Ok(spec);
        }
    }
    Err(Error::RetryCapExhausted(RETRY_CAP))
}

/// A fresh maze per episode; -0.1 per step, +1 on the key, 50-step horizon.
#[derive(Debug, Clone)]
pub struct RandomMazeEnv {
    pub spec: MazeSpec,
    pub agent: Cell,
    pub steps: usize,
    pub terminal: bool,
    fixed: bool,
}

impl RandomMazeEnv {
    pub fn new() -> Result<Self> {
        let spec = randmaze_generate(0)?;
        Ok(Self { agent: spec.agent_cell, spec, steps: 0, terminal: false, fixed: false })
    }

    /// Replays one layout every episode instead of generating new ones.
    pub fn fixed(spec: MazeSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { agent: spec.agent_cell, spec, steps: 0, terminal: false, fixed: true })
    }
}

impl Environment for RandomMazeEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::RandomMaze
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        if !self.fixed {
            let seed = rng.next_u64();
            // retry-cap exhaustion has probability far below 1e-100 at p = 0.3
            self.spec = randmaze_generate(seed).expect("maze generation within retry cap");
        }
        self.agent = self.spec.agent_cell;
        self.steps = 0;
        self.terminal = false;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.terminal {
            return Err(Error::TerminalState);
        }
        let mv = Move::from_id(action)?;
        self.agent = self.spec.moved(self.agent, mv);
        self.steps += 1;
        let found = Some(self.agent) == self.spec.key_cell;
        let reward = if found { KEY_REWARD } else { STEP_REWARD };
        self.terminal = found || self.steps >= RANDOM_MAZE_HORIZON;
        Ok(StepResult { observation: self.observation(), reward, terminal: self.terminal })
    }

    fn observation(&self) -> Observation {
        self.spec.render(self.agent)
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn generated_mazes_are_valid() {
        for seed in 0..2_000 {
            let m = randmaze_generate(seed).unwrap();
            m.validate().unwrap();
            assert_eq!(m.agent_cell, START);
            assert_eq!(m.key_cell, Some(KEY));
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(randmaze_generate(77).unwrap(), randmaze_generate(77).unwrap());
        assert_ne!(randmaze_generate(77).unwrap().walls, randmaze_generate(78).unwrap().walls);
    }

    #[test]
    fn distinct_seeds_rarely_collide() {
        // Expected duplicate pairs among 10k draws is about one (see the
        // collision bound below); four or fewer holds with probability > 0.99.
        let grids: BTreeSet<_> = (0..10_000u64).map(|s| randmaze_generate(s).unwrap().walls).collect();
        assert!(grids.len() >= 10_000 - 4, "{} distinct", grids.len());
    }

    #[test]
    fn pair_collision_probability_below_four_in_1e8() {
        // P(two draws equal) = sum over accepted grids of (q(g) / P_acc)^2, with
        // q the i.i.d. wall likelihood. Dropping the connectivity restriction
        // in the numerator gives an upper bound: both endpoints free (0.7^4)
        // times (0.7^2 + 0.3^2)^34 for the remaining interior cells.
        let numerator = libm::pow(0.7, 4.0) * libm::pow(0.49 + 0.09, 34.0);
        let mut rng = from_seed(123);
        let draws = 200_000;
        let mut accepted = 0;
        for _ in 0..draws {
            let mut walls = [[true; MAZE_GRID]; MAZE_GRID];
            for row in walls.iter_mut().take(MAZE_GRID - 1).skip(1) {
                for w in row.iter_mut().take(MAZE_GRID - 1).skip(1) {
                    *w = rng.gen::<f64>() < WALL_PROBABILITY;
                }
            }
            let spec = MazeSpec { walls, agent_cell: START, key_cell: Some(KEY), seed: 0 };
            if !spec.is_wall(START) && !spec.is_wall(KEY) && bfs_reachable(&spec, START).contains(&KEY) {
                accepted += 1;
            }
        }
        // one-sided 5-sigma lower bound on the acceptance rate
        let p = accepted as f64 / draws as f64;
        let p_low = p - 5.0 * libm::sqrt(p * (1.0 - p) / draws as f64);
        let bound = numerator / (p_low * p_low);
        assert!(bound < 4e-8, "collision bound {}", bound);
    }

    fn open_spec() -> MazeSpec {
        let mut walls = [[false; MAZE_GRID]; MAZE_GRID];
        for (r, row) in walls.iter_mut().enumerate() {
            for (c, w) in row.iter_mut().enumerate() {
                *w = MazeSpec::is_border((r, c));
            }
        }
        MazeSpec { walls, agent_cell: START, key_cell: Some(KEY), seed: 0 }
    }

    #[test]
    fn key_gives_reward_and_ends_episode() {
        let mut env = RandomMazeEnv::fixed(open_spec()).unwrap();
        env.reset(&mut from_seed(0));
        let mut ret = 0.0f32;
        let mut k = 0;
        // five ups then five rights reaches (1, 6)
        for a in [0, 0, 0, 0, 0, 3, 3, 3, 3, 3] {
            let r = env.step(a).unwrap();
            ret += r.reward;
            k += 1;
            if r.terminal {
                assert_eq!(r.reward, 1.0);
                break;
            }
        }
        assert_eq!(k, 10);
        assert!((ret - (1.0 - 0.1 * (k as f32 - 1.0))).abs() < 1e-6);
        assert!(matches!(env.step(0), Err(Error::TerminalState)));
    }

    #[test]
    fn horizon_ends_episode() {
        let mut env = RandomMazeEnv::fixed(open_spec()).unwrap();
        env.reset(&mut from_seed(0));
        for i in 0..RANDOM_MAZE_HORIZON {
            let r = env.step(1).unwrap();
            assert_eq!(r.reward, -0.1);
            assert_eq!(r.terminal, i + 1 == RANDOM_MAZE_HORIZON);
        }
    }

    #[test]
    fn up_then_down_is_identity_where_free() {
        for seed in 0..200 {
            let m = randmaze_generate(seed).unwrap();
            for cell in m.free_cells() {
                let up = m.moved(cell, Move::Up);
                if up != cell {
                    assert_eq!(m.moved(up, Move::Down), cell);
                }
            }
        }
    }
}
