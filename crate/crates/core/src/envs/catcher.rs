use rand::RngCore;

use super::{EnvKind, Environment, Observation, StepResult, WALL};
use crate::error::{invalid, Error, Result};

/// Observation side in pixels.
pub const CATCHER_PX: usize = 51;
/// Columns (and rows) of 3-pixel units.
pub const CATCHER_COLS: usize = 17;
const UNIT: usize = 3;
/// Unit row occupied by the paddle.
pub const CATCHER_PADDLE_ROW: usize = CATCHER_COLS - 1;
/// Unit rows the ball falls per step.
pub const CATCHER_FALL_ROWS: usize = 1;
const PADDLE_HALF_WIDTH: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatcherState {
    /// Paddle centre column.
    pub paddle_col: usize,
    pub ball_col: usize,
    pub ball_row: usize,
    pub terminal: bool,
}

impl CatcherState {
    pub fn render(&self) -> Observation {
        let mut obs = Observation::blank(CATCHER_PX, CATCHER_PX);
        let left = self.paddle_col.saturating_sub(PADDLE_HALF_WIDTH);
        let right = (self.paddle_col + PADDLE_HALF_WIDTH).min(CATCHER_COLS - 1);
        obs.fill_block(CATCHER_PADDLE_ROW * UNIT, left * UNIT, UNIT, (right - left + 1) * UNIT, WALL);
        obs.fill_block(self.ball_row * UNIT, self.ball_col * UNIT, UNIT, UNIT, WALL);
        obs
    }
}

/// Ball falls one unit per step regardless of the action; the paddle moves
/// one unit left (action 0) or right (action 1).
#[derive(Debug, Clone)]
pub struct CatcherEnv {
    pub state: CatcherState,
}

impl Default for CatcherEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl CatcherEnv {
    pub fn new() -> Self {
        Self {
            state: CatcherState { paddle_col: CATCHER_COLS / 2, ball_col: 0, ball_row: 0, terminal: false },
        }
    }

    /// Steps per episode for any policy.
    pub fn episode_len() -> usize {
        CATCHER_PADDLE_ROW.div_ceil(CATCHER_FALL_ROWS)
    }
}

impl Environment for CatcherEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Catcher
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        self.state = CatcherState {
            paddle_col: CATCHER_COLS / 2,
            ball_col: (rng.next_u64() % CATCHER_COLS as u64) as usize,
            ball_row: 0,
            terminal: false,
        };
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.state.terminal {
            return Err(Error::TerminalState);
        }
        let s = &mut self.state;
        match action {
            0 => s.paddle_col = s.paddle_col.saturating_sub(1),
            1 => s.paddle_col = (s.paddle_col + 1).min(CATCHER_COLS - 1),
            other => return Err(invalid(alloc::format!("invalid catcher action {}", other))),
        }
        s.ball_row = (s.ball_row + CATCHER_FALL_ROWS).min(CATCHER_PADDLE_ROW);
        s.terminal = s.ball_row >= CATCHER_PADDLE_ROW;
        Ok(StepResult { observation: self.observation(), reward: 0.0, terminal: self.state.terminal })
    }

    fn observation(&self) -> Observation {
        self.state.render()
    }

    fn is_terminal(&self) -> bool {
        self.state.terminal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn observation_is_51px() {
        let mut env = CatcherEnv::new();
        let obs = env.reset(&mut from_seed(0));
        assert_eq!((obs.height, obs.width), (51, 51));
        assert!(obs.pixels.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn resets_cover_every_column() {
        let mut env = CatcherEnv::new();
        let mut rng = from_seed(9);
        let mut seen = [false; CATCHER_COLS];
        for _ in 0..10_000 {
            env.reset(&mut rng);
            assert_eq!(env.state.ball_row, 0);
            assert_eq!(env.state.paddle_col, CATCHER_COLS / 2);
            seen[env.state.ball_col] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn same_seed_same_ball() {
        let (mut a, mut b) = (CatcherEnv::new(), CatcherEnv::new());
        a.reset(&mut from_seed(4));
        b.reset(&mut from_seed(4));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn paddle_clamps_at_edges() {
        let mut env = CatcherEnv::new();
        env.reset(&mut from_seed(1));
        env.state.paddle_col = 0;
        env.step(0).unwrap();
        assert_eq!(env.state.paddle_col, 0);
        env.state.paddle_col = CATCHER_COLS - 1;
        env.step(1).unwrap();
        assert_eq!(env.state.paddle_col, CATCHER_COLS - 1);
    }

    #[test]
    fn ball_falls_irrespective_of_action() {
        let mut left = CatcherEnv::new();
        let mut right = CatcherEnv::new();
        left.reset(&mut from_seed(2));
        right.reset(&mut from_seed(2));
        left.step(0).unwrap();
        right.step(1).unwrap();
        assert_eq!(left.state.ball_row, CATCHER_FALL_ROWS);
        assert_eq!(right.state.ball_row, CATCHER_FALL_ROWS);
    }

    #[test]
    fn episode_length_is_policy_independent() {
        assert_eq!(CatcherEnv::episode_len(), 16);
        let mut rng = from_seed(5);
        for policy in 0..3u64 {
            let mut env = CatcherEnv::new();
            env.reset(&mut rng);
            let mut steps = 0;
            loop {
                let a = match policy {
                    0 => 0,
                    1 => 1,
                    _ => (rng.next_u64() % 2) as usize,
                };
                steps += 1;
                if env.step(a).unwrap().terminal {
                    break;
                }
            }
            assert_eq!(steps, CatcherEnv::episode_len());
            assert!(matches!(env.step(0), Err(Error::TerminalState)));
        }
    }
}
