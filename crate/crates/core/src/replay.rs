//! Random-policy collection, transition storage, batch sampling and the
//! index machinery behind the contrastive negatives.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, RngCore};

use crate::envs::{EnvKind, Environment, Observation, QuadMazeEnv, QUAD_MAZE_COUNT};
use crate::error::{invalid, Result};
use crate::rng::Rng as ChaRng;
use crate::tensor::Tensor;

/// Entries of a map-form z^u kept per training step.
pub const ZU_SUBSET: usize = 15;
pub const ZU_MAP_LEN: usize = 36;

/// Exact byte code for the three-value palette {0, 0.5, 1}.
pub fn encode_pixel(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

pub fn decode_pixel(b: u8) -> f32 {
    if b == 128 {
        0.5
    } else {
        b as f32 / 255.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f32,
    pub next_obs: Observation,
    pub terminal: bool,
    pub episode_id: u32,
}

/// Byte-coded transition as stored in a [`Buffer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub obs: Vec<u8>,
    pub action: u8,
    pub reward_bits: u32,
    pub next_obs: Vec<u8>,
    pub terminal: bool,
    pub episode_id: u32,
}

impl Record {
    pub fn reward(&self) -> f32 {
        f32::from_bits(self.reward_bits)
    }
}

/// Append-only transition store.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub env: EnvKind,
    pub height: usize,
    pub width: usize,
    pub capacity: usize,
    records: Vec<Record>,
}

impl Buffer {
    pub fn new(env: EnvKind, capacity: usize) -> Self {
        let px = env.pixels();
        Self { env, height: px, width: px, capacity, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let code = |o: &Observation| o.pixels.iter().map(|v| encode_pixel(*v)).collect::<Vec<u8>>();
        self.push_record(Record {
            obs: code(&t.obs),
            action: t.action as u8,
            reward_bits: t.reward.to_bits(),
            next_obs: code(&t.next_obs),
            terminal: t.terminal,
            episode_id: t.episode_id,
        })
    }

    pub fn push_record(&mut self, r: Record) -> Result<()> {
        if self.records.len() >= self.capacity {
            return Err(invalid("buffer at capacity"));
        }
        let px = self.height * self.width;
        if r.obs.len() != px || r.next_obs.len() != px {
            return Err(invalid("observation size does not match buffer"));
        }
        if r.action as usize >= self.env.n_actions() {
            return Err(invalid(alloc::format!("action {} out of range", r.action)));
        }
        if let Some(last) = self.records.last() {
            if r.episode_id < last.episode_id {
                return Err(invalid("episode ids must be non-decreasing"));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn transition(&self, i: usize) -> Transition {
        let r = &self.records[i];
        let decode = |px: &[u8]| Observation {
            height: self.height,
            width: self.width,
            pixels: px.iter().map(|b| decode_pixel(*b)).collect(),
        };
        Transition {
            obs: decode(&r.obs),
            action: r.action as usize,
            reward: r.reward(),
            next_obs: decode(&r.next_obs),
            terminal: r.terminal,
            episode_id: r.episode_id,
        }
    }

    /// Materializes the records at `indices` as network-ready tensors.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let px = self.height * self.width;
        let mut obs = Vec::with_capacity(indices.len() * px);
        let mut next = Vec::with_capacity(indices.len() * px);
        let mut batch = Batch::default();
        for &i in indices {
            let r = &self.records[i];
            obs.extend(r.obs.iter().map(|b| decode_pixel(*b)));
            next.extend(r.next_obs.iter().map(|b| decode_pixel(*b)));
            batch.actions.push(r.action as usize);
            batch.rewards.push(r.reward());
            batch.terminals.push(r.terminal);
            batch.episode_ids.push(r.episode_id);
        }
        let shape = vec![indices.len(), 1, self.height, self.width];
        batch.obs = Tensor::new(shape.clone(), obs).expect("sized above");
        batch.next_obs = Tensor::new(shape, next).expect("sized above");
        batch
    }
}

/// A sampled mini-batch; observations are `[B, 1, H, W]`.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub obs: Tensor<f32>,
    pub next_obs: Tensor<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub terminals: Vec<bool>,
    pub episode_ids: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Stacks observations into `[B, 1, H, W]`.
pub fn stack_observations(obs: &[&Observation]) -> Tensor<f32> {
    let (h, w) = obs.first().map_or((0, 0), |o| (o.height, o.width));
    let mut data = Vec::with_capacity(obs.len() * h * w);
    for o in obs {
        data.extend_from_slice(&o.pixels);
    }
    Tensor::new(vec![obs.len(), 1, h, w], data).expect("uniform observation sizes")
}

/// Uniform-random policy rollouts, resetting on terminal states.
pub fn collect_random(env: &mut dyn Environment, n_transitions: usize, seed: u64) -> Result<Buffer> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Collect);
    let mut buffer = Buffer::new(env.kind(), n_transitions);
    collect_into(env, &mut buffer, n_transitions, 0, &mut rng)?;
    Ok(buffer)
}

fn collect_into(
    env: &mut dyn Environment,
    buffer: &mut Buffer,
    n_transitions: usize,
    first_episode: u32,
    rng: &mut ChaRng,
) -> Result<u32> {
    if n_transitions == 0 {
        return Err(invalid("n_transitions must be positive"));
    }
    let n_actions = env.n_actions();
    let mut episode = first_episode;
    let mut obs = env.reset(rng);
    for _ in 0..n_transitions {
        let action = rng.gen_range(0..n_actions);
        let step = env.step(action)?;
        buffer.push(&Transition {
            obs,
            action,
            reward: step.reward,
            next_obs: step.observation.clone(),
            terminal: step.terminal,
            episode_id: episode,
        })?;
        obs = if step.terminal {
            episode += 1;
            env.reset(rng)
        } else {
            step.observation
        };
    }
    Ok(episode)
}

/// `per_architecture` transitions from each quad-maze layout; the episode id
/// of a transition is its architecture id.
pub fn collect_quadmaze(per_architecture: usize, seed: u64) -> Result<Buffer> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Collect);
    let mut buffer = Buffer::new(EnvKind::QuadMaze, per_architecture * QUAD_MAZE_COUNT);
    for id in 0..QUAD_MAZE_COUNT {
        let mut env = QuadMazeEnv::new(id)?;
        collect_into(&mut env, &mut buffer, per_architecture, id as u32, &mut rng)?;
    }
    Ok(buffer)
}

/// `batch_size` indices drawn uniformly with replacement.
pub fn sample_indices(len: usize, batch_size: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(invalid("cannot sample from an empty buffer"));
    }
    Ok((0..batch_size).map(|_| (rng.next_u64() % len as u64) as usize).collect())
}

pub fn sample_batch(buffer: &Buffer, batch_size: usize, rng: &mut dyn RngCore) -> Result<Batch> {
    let idx = sample_indices(buffer.len(), batch_size, rng)?;
    Ok(buffer.batch(&idx))
}

/// Negative partner of row `i` is row `(i + k_i) mod B` with `k_i` uniform in `1..B`.
pub fn shift_negatives(batch: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(invalid("negative shifting needs a batch of at least 2"));
    }
    Ok((0..batch)
        .map(|i| {
            let k = 1 + (rng.next_u64() % (batch as u64 - 1)) as usize;
            (i + k) % batch
        })
        .collect())
}

/// Partners drawn uniformly among rows from a different episode; rows with
/// no such partner fall back to a shifted negative.
pub fn cross_episode_negatives(episode_ids: &[u32], rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    let fallback = shift_negatives(episode_ids.len(), rng)?;
    Ok(episode_ids
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let others: Vec<usize> = (0..episode_ids.len()).filter(|&j| episode_ids[j] != *ep).collect();
            if others.is_empty() {
                fallback[i]
            } else {
                others[(rng.next_u64() % others.len() as u64) as usize]
            }
        })
        .collect())
}

/// Distinct flat indices into a 6×6 z^u map, shared by a whole training step.
pub fn subsample_zu(map_len: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if map_len != ZU_MAP_LEN {
        return Err(invalid(alloc::format!("z^u map has {} entries, expected {}", map_len, ZU_MAP_LEN)));
    }
    let mut r = RngAdapter(rng);
    Ok(index::sample(&mut r, ZU_MAP_LEN, ZU_SUBSET).into_vec())
}

struct RngAdapter<'a>(&'a mut dyn RngCore);

impl RngCore for RngAdapter<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> core::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{CatcherEnv, RandomMazeEnv};
    use crate::rng::from_seed;
    use proptest::prelude::*;

    #[test]
    fn palette_codes_round_trip_exactly() {
        for v in [0.0f32, 0.5, 1.0] {
            assert_eq!(decode_pixel(encode_pixel(v)).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn quadmaze_collection_counts() {
        let b = collect_quadmaze(200, 1).unwrap();
        assert_eq!(b.len(), 800);
        for id in 0..4u32 {
            assert_eq!(b.records().iter().filter(|r| r.episode_id == id).count(), 200);
        }
    }

    #[test]
    fn catcher_collection_resets_on_terminal() {
        let mut env = CatcherEnv::new();
        let b = collect_random(&mut env, 100, 3).unwrap();
        assert_eq!(b.len(), 100);
        let terminals = b.records().iter().filter(|r| r.terminal).count();
        assert_eq!(terminals, 100 / CatcherEnv::episode_len());
        for w in b.records().windows(2) {
            if w[0].terminal {
                assert_eq!(w[1].episode_id, w[0].episode_id + 1);
            } else {
                assert_eq!(w[1].episode_id, w[0].episode_id);
            }
        }
    }

    #[test]
    fn collection_is_seeded() {
        let mut a = RandomMazeEnv::new().unwrap();
        let mut b = RandomMazeEnv::new().unwrap();
        assert_eq!(collect_random(&mut a, 300, 8).unwrap(), collect_random(&mut b, 300, 8).unwrap());
    }

    #[test]
    fn random_maze_episodes_span_fifty_steps() {
        let mut env = RandomMazeEnv::new().unwrap();
        let b = collect_random(&mut env, 1_000, 2).unwrap();
        let episodes = b.records().last().unwrap().episode_id + 1;
        assert!(episodes >= 20, "{} episodes", episodes);
    }

    #[test]
    fn single_element_buffer_batches_copies() {
        let mut env = CatcherEnv::new();
        let b = collect_random(&mut env, 1, 0).unwrap();
        let batch = sample_batch(&b, 32, &mut from_seed(0)).unwrap();
        assert_eq!(batch.len(), 32);
        assert_eq!(batch.obs.shape(), &[32, 1, 51, 51]);
        let empty = Buffer::new(EnvKind::Catcher, 4);
        assert!(sample_batch(&empty, 32, &mut from_seed(0)).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_indices(1000, 32, &mut from_seed(5)).unwrap();
        let b = sample_indices(1000, 32, &mut from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_row_negatives_swap() {
        assert_eq!(shift_negatives(2, &mut from_seed(0)).unwrap(), vec![1, 0]);
        assert!(shift_negatives(1, &mut from_seed(0)).is_err());
    }

    #[test]
    fn zu_subset_is_distinct_and_bounded() {
        let idx = subsample_zu(36, &mut from_seed(1)).unwrap();
        assert_eq!(idx.len(), ZU_SUBSET);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ZU_SUBSET);
        assert!(idx.iter().all(|&i| i < 36));
        assert!(subsample_zu(35, &mut from_seed(1)).is_err());
    }

    #[test]
    fn cross_episode_partners_differ_in_episode() {
        let eps = [0u32, 0, 1, 1, 2, 2, 2, 3];
        let neg = cross_episode_negatives(&eps, &mut from_seed(4)).unwrap();
        for (i, j) in neg.iter().enumerate() {
            assert_ne!(eps[i], eps[*j]);
        }
    }

    proptest! {
        #[test]
        fn shifted_negatives_have_no_fixed_points(batch in 2usize..64, seed in any::<u64>()) {
            let neg = shift_negatives(batch, &mut from_seed(seed)).unwrap();
            prop_assert_eq!(neg.len(), batch);
            for (i, j) in neg.iter().enumerate() {
                prop_assert!(*j < batch);
                prop_assert_ne!(i, *j);
            }
        }
    }
}
