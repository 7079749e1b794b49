//! Encoder pretraining, frozen-encoder dynamics refinement and the DDQN phase.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::envs::{EnvKind, Environment, Observation};
use crate::error::{invalid, Error, Result};
use crate::graph::{Frozen, Graph};
use crate::losses::{
    build_pretrain, ddqn_targets, loss_c, loss_discount, loss_q, loss_reward, Contrastive, ForwardObjective,
    GradientRouting, LossBundle, LossFlags, StepDraws,
};
use crate::nets::{
    encode, eval_encoder, eval_head, init_head, init_params, EncoderConfig, HeadKind, Latent, Model, ZuKind, ENCODER,
};
use crate::optim::{ema_update, Adam};
use crate::params::ParamSet;
use crate::planner::{argmax, Planner};
use crate::replay::{
    cross_episode_negatives, decode_pixel, encode_pixel, sample_indices, shift_negatives, subsample_zu, Buffer,
    ZU_MAP_LEN,
};
use crate::rng::{stream, Rng, RngState, Stream};
use crate::tensor::Tensor;

/// Per-network Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LearningRates {
    pub enc: f32,
    pub tc: f32,
    pub tu: f32,
    pub tadv: f32,
    pub inv: f32,
    pub q: f32,
    pub reward: f32,
    pub discount: f32,
}

impl LearningRates {
    pub fn for_network(&self, network: &str) -> Result<f32> {
        Ok(match network {
            "enc" => self.enc,
            "tc" => self.tc,
            "tu" => self.tu,
            "tadv" => self.tadv,
            "inv" => self.inv,
            "q" => self.q,
            "rew" => self.reward,
            "disc" => self.discount,
            other => return Err(invalid(format!("no learning rate for network {}", other))),
        })
    }
}

/// Linear decay from `start` to `end` over `steps` iterations, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, iteration: u64) -> f64 {
        if self.steps == 0 || iteration >= self.steps {
            return self.end;
        }
        self.start + (self.end - self.start) * iteration as f64 / self.steps as f64
    }
}

/// Everything a run needs besides its data.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub env: EnvKind,
    pub n_c: usize,
    pub lr: LearningRates,
    pub batch_size: usize,
    /// Transitions collected by the random policy (all quad mazes together).
    pub collect_transitions: usize,
    pub pretrain_iterations: u64,
    pub refine_iterations: u64,
    pub rl_iterations: u64,
    pub gamma: f64,
    pub tau: f32,
    pub epsilon: EpsilonSchedule,
    pub rl_buffer: usize,
    pub rl_warmup: u64,
    /// Iterations between `returns.csv` rows.
    pub returns_every: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub routing: GradientRouting,
    pub loss: LossFlags,
    pub seed: u64,
}

impl TrainConfig {
    /// Published defaults for `env`.
    pub fn preset(env: EnvKind) -> Self {
        let (enc, tc, tu, c_d) = match env {
            EnvKind::QuadMaze => (5e-5, 1e-3, 5e-5, 15.0),
            EnvKind::Catcher => (2e-5, 4e-5, 1e-5, 5.0),
            EnvKind::RandomMaze => (2e-5, 4e-5, 1e-5, 13.0),
        };
        let lr = LearningRates { enc, tc, tu, tadv: 1e-3, inv: tc, q: 1e-4, reward: 5e-5, discount: 5e-5 };
        let (collect, pretrain, refine, rl) = match env {
            EnvKind::QuadMaze => (20_000, 50_000, 0, 0),
            EnvKind::Catcher => (25_000, 200_000, 0, 0),
            EnvKind::RandomMaze => (50_000, 50_000, 250_000, 500_000),
        };
        let loss = LossFlags {
            forward: ForwardObjective::Controllable,
            contrastive: if env == EnvKind::RandomMaze { Contrastive::Mixed } else { Contrastive::H1 },
            adversarial: env == EnvKind::Catcher,
            c_d,
        };
        Self {
            env,
            n_c: 2,
            lr,
            batch_size: 32,
            collect_transitions: collect,
            pretrain_iterations: pretrain,
            refine_iterations: refine,
            rl_iterations: rl,
            gamma: 0.95,
            tau: 0.02,
            epsilon: EpsilonSchedule { start: 1.0, end: 0.05, steps: 50_000 },
            rl_buffer: 50_000,
            rl_warmup: 1_000,
            returns_every: 1_000,
            checkpoint_every: 10_000,
            routing: GradientRouting::default(),
            loss,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        if self.n_c == 0 {
            return Err(invalid("n_c must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid("tau must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        if self.loss.c_d.is_nan() || self.loss.c_d <= 0.0 {
            return Err(invalid("c_d must be positive"));
        }
        let lrs = self.lr;
        for v in [lrs.enc, lrs.tc, lrs.tu, lrs.tadv, lrs.inv, lrs.q, lrs.reward, lrs.discount] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid("learning rates must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        EncoderConfig::for_env(self.env, self.n_c)
    }

    /// Heads trained during pretraining.
    pub fn pretrain_heads(&self) -> Vec<HeadKind> {
        let mut heads = match self.loss.forward {
            ForwardObjective::Controllable => vec![HeadKind::Tc, HeadKind::Tu],
            ForwardObjective::Inverse => vec![HeadKind::Inverse, HeadKind::Tu],
        };
        if self.loss.adversarial {
            heads.push(HeadKind::Tadv);
        }
        heads
    }

    pub fn pretrain_model(&self) -> Result<Model> {
        Ok(Model::new(self.encoder()?, &self.pretrain_heads()))
    }
}

/// Receives per-iteration losses and periodic return summaries.
pub trait MetricsSink {
    fn record_losses(&mut self, iteration: u64, losses: &LossBundle) -> Result<()>;

    fn record_return(&mut self, _iteration: u64, _mean_return: f64) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record_losses(&mut self, _: u64, _: &LossBundle) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub losses: Vec<(u64, LossBundle)>,
    pub returns: Vec<(u64, f64)>,
}

impl MetricsSink for MemorySink {
    fn record_losses(&mut self, iteration: u64, losses: &LossBundle) -> Result<()> {
        self.losses.push((iteration, *losses));
        Ok(())
    }

    fn record_return(&mut self, iteration: u64, mean_return: f64) -> Result<()> {
        self.returns.push((iteration, mean_return));
        Ok(())
    }
}

/// Training phase; each draws its random streams from a distinct seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Phase {
    Pretrain,
    Refine,
    Rl,
}

impl Phase {
    fn seed(self, seed: u64) -> u64 {
        let salt = match self {
            Phase::Pretrain => 0,
            Phase::Refine => 1,
            Phase::Rl => 2,
        };
        seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(salt))
    }
}

/// Independent random streams of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub data: Rng,
    pub negatives: Rng,
    pub subsample: Rng,
    pub epsilon: Rng,
    pub env: Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StreamStates {
    pub data: RngState,
    pub negatives: RngState,
    pub subsample: RngState,
    pub epsilon: RngState,
    pub env: RngState,
}

impl Streams {
    pub fn new(seed: u64, phase: Phase) -> Self {
        let s = phase.seed(seed);
        Self {
            data: stream(s, Stream::Data),
            negatives: stream(s, Stream::Negatives),
            subsample: stream(s, Stream::Subsample),
            epsilon: stream(s, Stream::Epsilon),
            env: stream(s, Stream::Env),
        }
    }

    pub fn states(&self) -> StreamStates {
        StreamStates {
            data: RngState::capture(&self.data),
            negatives: RngState::capture(&self.negatives),
            subsample: RngState::capture(&self.subsample),
            epsilon: RngState::capture(&self.epsilon),
            env: RngState::capture(&self.env),
        }
    }

    pub fn from_states(s: &StreamStates) -> Self {
        Self {
            data: s.data.restore(),
            negatives: s.negatives.restore(),
            subsample: s.subsample.restore(),
            epsilon: s.epsilon.restore(),
            env: s.env.restore(),
        }
    }
}

/// Mutable state of a training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub phase: Phase,
    pub iteration: u64,
    pub params: ParamSet<f32>,
    pub optims: BTreeMap<String, Adam>,
    pub streams: Streams,
}

/// Prefix of optimizer moment tensors inside a checkpoint.
pub const OPTIM_PREFIX: &str = "opt";

impl RunState {
    fn new(phase: Phase, seed: u64, params: ParamSet<f32>, networks: &[(&str, f32)]) -> Self {
        let optims = networks
            .iter()
            .map(|(net, lr)| (net.to_string(), Adam::new(&params.network(net), *lr)))
            .collect();
        Self { phase, iteration: 0, params, optims, streams: Streams::new(seed, phase) }
    }

    /// Adam moments of every optimizer as `opt.<network>.{m,v}.<param>`.
    pub fn optimizer_tensors(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (net, adam) in &self.optims {
            out.merge(adam.export(&format!("{}.{}", OPTIM_PREFIX, net)));
        }
        out
    }

    pub fn optimizer_steps(&self) -> BTreeMap<String, u64> {
        self.optims.iter().map(|(k, v)| (k.clone(), v.step_count())).collect()
    }

    pub fn restore_optimizers(&mut self, tensors: &ParamSet<f32>, steps: &BTreeMap<String, u64>) -> Result<()> {
        for (net, adam) in self.optims.iter_mut() {
            let step = *steps.get(net).ok_or_else(|| invalid(format!("no step count for optimizer {}", net)))?;
            adam.restore(&format!("{}.{}", OPTIM_PREFIX, net), tensors, step)?;
        }
        Ok(())
    }

    fn step_optimizers(&mut self, grads: &ParamSet<f32>) -> Result<()> {
        for adam in self.optims.values_mut() {
            adam.step(&mut self.params, grads)?;
        }
        Ok(())
    }
}

fn finite(bundle: &LossBundle) -> Result<()> {
    let all = [bundle.l_c, bundle.l_u, bundle.l_h1, bundle.l_h2, bundle.l_adv, bundle.l_inv, bundle.l_q, bundle.l_enc_total];
    if all.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "loss" })
    }
}

/// Algorithm-1 pretraining over a fixed transition buffer.
pub struct Pretrainer<'b> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: RunState,
    buffer: &'b Buffer,
}

impl<'b> Pretrainer<'b> {
    pub fn new(cfg: &TrainConfig, buffer: &'b Buffer) -> Result<Self> {
        let model = cfg.pretrain_model()?;
        let params = init_params(&model, cfg.seed);
        Self::with_params(cfg, buffer, params)
    }

    /// Starts from given parameters (fresh optimizers, iteration 0).
    pub fn with_params(cfg: &TrainConfig, buffer: &'b Buffer, params: ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        if buffer.env != cfg.env {
            return Err(invalid(format!("buffer holds {} data, config is {}", buffer.env.name(), cfg.env.name())));
        }
        if buffer.len() < cfg.batch_size {
            return Err(invalid("buffer smaller than one batch"));
        }
        let model = cfg.pretrain_model()?;
        let nets: Vec<(&str, f32)> = model
            .networks()
            .into_iter()
            .map(|n| cfg.lr.for_network(n).map(|lr| (n, lr)))
            .collect::<Result<_>>()?;
        let state = RunState::new(Phase::Pretrain, cfg.seed, params, &nets);
        Ok(Self { cfg: cfg.clone(), model, state, buffer })
    }

    /// Continues from a restored state.
    pub fn resume(cfg: &TrainConfig, buffer: &'b Buffer, state: RunState) -> Result<Self> {
        let mut p = Self::with_params(cfg, buffer, state.params.clone())?;
        if state.phase != Phase::Pretrain || state.optims.keys().ne(p.state.optims.keys()) {
            return Err(invalid("run state does not belong to this pretraining configuration"));
        }
        p.state = state;
        Ok(p)
    }

    fn draws(&mut self, episode_ids: &[u32]) -> Result<StepDraws> {
        let st = &mut self.state.streams;
        let b = episode_ids.len();
        let negatives = shift_negatives(b, &mut st.negatives)?;
        let cross_negatives = if self.cfg.loss.contrastive.uses_h2() {
            Some(cross_episode_negatives(episode_ids, &mut st.negatives)?)
        } else {
            None
        };
        let zu_subset = if self.model.encoder.zu == ZuKind::Map && self.cfg.loss.contrastive.uses_h1() {
            Some(subsample_zu(ZU_MAP_LEN, &mut st.subsample)?)
        } else {
            None
        };
        Ok(StepDraws { negatives, cross_negatives, zu_subset })
    }

    /// One batch, one backward pass, one Adam step per network.
    pub fn step(&mut self) -> Result<LossBundle> {
        let idx = sample_indices(self.buffer.len(), self.cfg.batch_size, &mut self.state.streams.data)?;
        let batch = self.buffer.batch(&idx);
        let draws = self.draws(&batch.episode_ids)?;
        let (bundle, grads) = {
            let mut g = Graph::new(&self.state.params, Frozen::none());
            let losses = build_pretrain(
                &mut g,
                &self.model,
                &self.cfg.loss,
                &self.cfg.routing,
                batch.obs,
                batch.next_obs,
                &batch.actions,
                &draws,
            )?;
            let bundle = losses.bundle(&g, &self.cfg.loss)?;
            finite(&bundle)?;
            (bundle, g.backward(losses.objective)?.params)
        };
        self.state.step_optimizers(&grads)?;
        self.state.iteration += 1;
        Ok(bundle)
    }

    /// Runs until `iteration == until`, streaming losses to `sink`.
    pub fn run_until(&mut self, until: u64, sink: &mut dyn MetricsSink) -> Result<()> {
        while self.state.iteration < until {
            let b = self.step()?;
            sink.record_losses(self.state.iteration, &b)?;
        }
        Ok(())
    }
}

/// Encoded buffer: `[N, n_c]` / `[N, n_u]` for both ends of every transition.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferLatents {
    pub zc: Tensor<f32>,
    pub zu: Tensor<f32>,
    pub next_zc: Tensor<f32>,
    pub next_zu: Tensor<f32>,
    pub actions: Vec<usize>,
}

const ENCODE_CHUNK: usize = 64;

fn append(dst: &mut Vec<f32>, t: &Tensor<f32>) {
    dst.extend_from_slice(t.data());
}

pub fn encode_buffer(params: &ParamSet<f32>, cfg: &EncoderConfig, buffer: &Buffer) -> Result<BufferLatents> {
    let n = buffer.len();
    let (mut zc, mut zu, mut nzc, mut nzu) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut actions = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(ENCODE_CHUNK) {
        let b = buffer.batch(chunk);
        let (c, u) = eval_encoder(params, cfg, b.obs)?;
        let (nc, nu) = eval_encoder(params, cfg, b.next_obs)?;
        append(&mut zc, &c);
        append(&mut zu, &u);
        append(&mut nzc, &nc);
        append(&mut nzu, &nu);
        actions.extend_from_slice(&b.actions);
    }
    let (n_c, n_u) = (cfg.n_c, cfg.zu_dim());
    Ok(BufferLatents {
        zc: Tensor::new(vec![n, n_c], zc)?,
        zu: Tensor::new(vec![n, n_u], zu)?,
        next_zc: Tensor::new(vec![n, n_c], nzc)?,
        next_zu: Tensor::new(vec![n, n_u], nzu)?,
        actions,
    })
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let w = t.shape()[1];
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), w], data).expect("sized above")
}

/// Trains only T_c on latents of a frozen encoder.
pub struct Refiner {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: RunState,
    latents: BufferLatents,
}

impl Refiner {
    /// Encodes `buffer` once with the frozen encoder of `params`.
    pub fn new(cfg: &TrainConfig, buffer: &Buffer, params: ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.encoder()?, &[HeadKind::Tc]);
        if !params.contains("tc.l0.w") || !params.contains("enc.conv1.w") {
            return Err(invalid("refinement needs a checkpoint with encoder and T_c"));
        }
        let latents = encode_buffer(&params, &model.encoder, buffer)?;
        let state = RunState::new(Phase::Refine, cfg.seed, params, &[("tc", cfg.lr.tc)]);
        Ok(Self { cfg: cfg.clone(), model, state, latents })
    }

    pub fn resume(cfg: &TrainConfig, buffer: &Buffer, state: RunState) -> Result<Self> {
        let mut r = Self::new(cfg, buffer, state.params.clone())?;
        if state.phase != Phase::Refine || state.optims.keys().ne(r.state.optims.keys()) {
            return Err(invalid("run state does not belong to a refinement run"));
        }
        r.state = state;
        Ok(r)
    }

    pub fn step(&mut self) -> Result<LossBundle> {
        let l = &self.latents;
        let idx = sample_indices(l.actions.len(), self.cfg.batch_size, &mut self.state.streams.data)?;
        let actions: Vec<usize> = idx.iter().map(|&i| l.actions[i]).collect();
        let (value, grads) = {
            let mut g = Graph::new(&self.state.params, Frozen::all_except(&["tc"]));
            let z_t = Latent { zc: g.input(gather(&l.zc, &idx))?, zu: g.input(gather(&l.zu, &idx))? };
            let z_tp1 = Latent { zc: g.input(gather(&l.next_zc, &idx))?, zu: g.input(gather(&l.next_zu, &idx))? };
            let loss = loss_c(&mut g, &self.model, &self.cfg.routing, z_t, z_tp1, &actions)?;
            (g.value(loss).item() as f64, g.backward(loss)?.params)
        };
        let bundle = LossBundle { l_c: Some(value), ..LossBundle::default() };
        finite(&bundle)?;
        self.state.step_optimizers(&grads)?;
        self.state.iteration += 1;
        Ok(bundle)
    }

    pub fn run_until(&mut self, until: u64, sink: &mut dyn MetricsSink) -> Result<()> {
        while self.state.iteration < until {
            let b = self.step()?;
            sink.record_losses(self.state.iteration, &b)?;
        }
        Ok(())
    }
}

/// How the RL agent obtains its state representation and actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlMode {
    /// Encoder from controllable/uncontrollable pretraining, frozen; ε-greedy Q.
    FrozenPretrained,
    /// Encoder from the inverse-prediction baseline, frozen; ε-greedy Q.
    FrozenInverse,
    /// Fresh encoder trained only by the Q loss.
    EndToEnd,
    /// Frozen pretrained encoder; ε-greedy over depth-`D` latent planning.
    Planner { depth: usize },
}

impl RlMode {
    pub fn name(self) -> &'static str {
        match self {
            RlMode::FrozenPretrained => "frozen-pretrained",
            RlMode::FrozenInverse => "frozen-inverse-pretrained",
            RlMode::EndToEnd => "end-to-end",
            RlMode::Planner { .. } => "frozen+planner",
        }
    }

    pub fn parse(name: &str, depth: usize) -> Result<Self> {
        Ok(match name {
            "frozen-pretrained" => RlMode::FrozenPretrained,
            "frozen-inverse-pretrained" => RlMode::FrozenInverse,
            "end-to-end" => RlMode::EndToEnd,
            "frozen+planner" | "planner" => RlMode::Planner { depth },
            other => return Err(invalid(format!("unknown rl mode {}", other))),
        })
    }

    pub fn frozen(self) -> bool {
        self != RlMode::EndToEnd
    }

    /// Heads the RL model carries.
    pub fn heads(self) -> Vec<HeadKind> {
        match self {
            RlMode::Planner { .. } => vec![HeadKind::Tc, HeadKind::Q, HeadKind::Reward, HeadKind::Discount],
            _ => vec![HeadKind::Q],
        }
    }

    /// Networks updated by the RL optimizer.
    pub fn trained(self) -> Vec<&'static str> {
        match self {
            RlMode::EndToEnd => vec![ENCODER, "q"],
            RlMode::Planner { .. } => vec!["q", "rew", "disc"],
            _ => vec!["q"],
        }
    }

    /// Networks mirrored by the EMA target.
    pub fn target_networks(self) -> Vec<&'static str> {
        match self {
            RlMode::EndToEnd => vec![ENCODER, "q"],
            _ => vec!["q"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    /// `[z^c, z^u]` of both ends, from the frozen encoder.
    Latent { z: Vec<f32>, next_z: Vec<f32> },
    Pixels { obs: Vec<u8>, next_obs: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
struct RlItem {
    payload: Payload,
    action: usize,
    reward: f32,
    terminal: bool,
}

/// Fixed-capacity FIFO replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> Ring<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be positive"));
        }
        Ok(Self { capacity, items: Vec::new(), next: 0 })
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }
}

/// Episodes whose returns enter the trailing mean.
pub const RETURN_WINDOW: usize = 100;

/// Online DDQN with an EMA target network.
pub struct RlTrainer {
    pub cfg: TrainConfig,
    pub mode: RlMode,
    pub model: Model,
    pub state: RunState,
    pub target: ParamSet<f32>,
    env: Box<dyn Environment>,
    obs: Observation,
    obs_z: Option<Vec<f32>>,
    episode_return: f64,
    recent: VecDeque<f64>,
    pub episodes: u64,
    replay: Ring<RlItem>,
}

/// Outcome of one environment step (plus update).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RlStep {
    pub losses: LossBundle,
    pub finished_episode: Option<f64>,
}

fn observation_tensor(obs: &[&Observation]) -> Tensor<f32> {
    crate::replay::stack_observations(obs)
}

impl RlTrainer {
    /// `pretrained` supplies the frozen encoder (and T_c for planning); new
    /// heads are initialized from the run seed.
    pub fn new(
        cfg: &TrainConfig,
        mode: RlMode,
        pretrained: Option<ParamSet<f32>>,
        mut env: Box<dyn Environment>,
    ) -> Result<Self> {
        cfg.validate()?;
        if env.kind() != cfg.env {
            return Err(invalid("environment does not match config"));
        }
        let model = Model::new(cfg.encoder()?, &mode.heads());
        let mut params = match (mode.frozen(), pretrained) {
            (true, Some(p)) => p,
            (true, None) => return Err(invalid(format!("mode {} needs a pretrained checkpoint", mode.name()))),
            (false, _) => crate::nets::init_encoder(&model.encoder, cfg.seed),
        };
        if !params.contains("enc.conv1.w") {
            return Err(invalid("checkpoint has no encoder"));
        }
        if matches!(mode, RlMode::Planner { .. }) && !params.contains("tc.l0.w") {
            return Err(invalid("planner mode needs a checkpoint with T_c"));
        }
        for spec in model.heads.values() {
            if spec.kind != HeadKind::Tc {
                params.remove_network(spec.kind.network());
                params.merge(init_head(spec, cfg.seed));
            }
        }
        let nets: Vec<(&str, f32)> = mode
            .trained()
            .into_iter()
            .map(|n| {
                // the end-to-end encoder shares the DDQN learning rate
                let lr = if n == ENCODER { Ok(cfg.lr.q) } else { cfg.lr.for_network(n) };
                lr.map(|lr| (n, lr))
            })
            .collect::<Result<_>>()?;
        let mut target = ParamSet::new();
        for net in mode.target_networks() {
            target.merge(params.network(net));
        }
        let mut state = RunState::new(Phase::Rl, cfg.seed, params, &nets);
        let obs = env.reset(&mut state.streams.env);
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            model,
            state,
            target,
            env,
            obs,
            obs_z: None,
            episode_return: 0.0,
            recent: VecDeque::with_capacity(RETURN_WINDOW),
            episodes: 0,
            replay: Ring::new(cfg.rl_buffer)?,
        })
    }

    /// `[z^c, z^u]` of one observation under the online encoder.
    fn latent(&self, obs: &Observation) -> Result<Vec<f32>> {
        let (zc, zu) = eval_encoder(&self.state.params, &self.model.encoder, observation_tensor(&[obs]))?;
        let mut z = zc.into_data();
        z.extend_from_slice(zu.data());
        Ok(z)
    }

    /// Greedy action (ε = 0) for a latent.
    pub fn greedy(&self, z: &[f32]) -> Result<usize> {
        greedy_action(&self.model, &self.state.params, self.mode, z)
    }

    /// Mean return over the trailing window; `None` before the first episode ends.
    pub fn trailing_return(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().sum::<f64>() / self.recent.len() as f64)
        }
    }

    pub fn step(&mut self) -> Result<RlStep> {
        let it = self.state.iteration;
        let z = match self.obs_z.take() {
            Some(z) => z,
            None => self.latent(&self.obs)?,
        };
        let eps = self.cfg.epsilon.value(it);
        let n_a = self.model.n_actions;
        let action = if self.state.streams.epsilon.gen::<f64>() < eps {
            self.state.streams.epsilon.gen_range(0..n_a)
        } else {
            self.greedy(&z)?
        };
        let result = self.env.step(action)?;
        self.episode_return += result.reward as f64;
        let payload = if self.mode.frozen() {
            let next_z = self.latent(&result.observation)?;
            if !result.terminal {
                self.obs_z = Some(next_z.clone());
            }
            Payload::Latent { z, next_z }
        } else {
            let code = |o: &Observation| o.pixels.iter().map(|v| encode_pixel(*v)).collect::<Vec<u8>>();
            Payload::Pixels { obs: code(&self.obs), next_obs: code(&result.observation) }
        };
        self.replay.push(RlItem { payload, action, reward: result.reward, terminal: result.terminal });

        let mut out = RlStep::default();
        if result.terminal {
            out.finished_episode = Some(self.episode_return);
            if self.recent.len() == RETURN_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(self.episode_return);
            self.episodes += 1;
            self.episode_return = 0.0;
            self.obs = self.env.reset(&mut self.state.streams.env);
            self.obs_z = None;
        } else {
            self.obs = result.observation;
        }

        if it >= self.cfg.rl_warmup && self.replay.len() >= self.cfg.batch_size {
            out.losses = self.update()?;
        }
        ema_update(&mut self.target, &self.state.params, self.cfg.tau)?;
        self.state.iteration += 1;
        Ok(out)
    }

    fn update(&mut self) -> Result<LossBundle> {
        let idx = sample_indices(self.replay.len(), self.cfg.batch_size, &mut self.state.streams.data)?;
        let items: Vec<&RlItem> = idx.iter().map(|&i| self.replay.get(i)).collect();
        let actions: Vec<usize> = items.iter().map(|i| i.action).collect();
        let rewards: Vec<f32> = items.iter().map(|i| i.reward).collect();
        let terminals: Vec<bool> = items.iter().map(|i| i.terminal).collect();
        let q_spec = self.model.head(HeadKind::Q)?;
        let b = items.len();
        let dim = self.model.encoder.latent_dim();

        let (value, grads) = if self.mode.frozen() {
            let mut zt = Vec::with_capacity(b * dim);
            let mut zn = Vec::with_capacity(b * dim);
            for it in &items {
                if let Payload::Latent { z, next_z } = &it.payload {
                    zt.extend_from_slice(z);
                    zn.extend_from_slice(next_z);
                }
            }
            let zt = Tensor::new(vec![b, dim], zt)?;
            let zn = Tensor::new(vec![b, dim], zn)?;
            let q_online = eval_head(&self.state.params, q_spec, zn.clone())?;
            let q_target = eval_head(&self.target, q_spec, zn)?;
            let y = ddqn_targets(&rewards, &terminals, &q_online, &q_target, self.cfg.gamma);
            let mut g = Graph::new(&self.state.params, Frozen::all_except(&self.mode.trained()));
            let z = g.input(zt)?;
            let lq = loss_q(&mut g, &self.model, z, &actions, &y)?;
            let mut objective = lq;
            if matches!(self.mode, RlMode::Planner { .. }) {
                let lr = loss_reward(&mut g, &self.model, z, &actions, &rewards)?;
                let ld = loss_discount(&mut g, &self.model, z, &actions, &terminals, self.cfg.gamma)?;
                let s = g.add(lq, lr)?;
                objective = g.add(s, ld)?;
            }
            (g.value(lq).item() as f64, g.backward(objective)?.params)
        } else {
            let px = self.model.encoder.pixels();
            let decode = |f: &dyn Fn(&RlItem) -> &Vec<u8>| {
                let data = items.iter().flat_map(|it| f(it).iter().map(|b| decode_pixel(*b))).collect();
                Tensor::new(vec![b, 1, px, px], data)
            };
            let obs = decode(&|it: &RlItem| match &it.payload {
                Payload::Pixels { obs, .. } => obs,
                Payload::Latent { .. } => unreachable!("end-to-end replay stores pixels"),
            })?;
            let next = decode(&|it: &RlItem| match &it.payload {
                Payload::Pixels { next_obs, .. } => next_obs,
                Payload::Latent { .. } => unreachable!("end-to-end replay stores pixels"),
            })?;
            let cat = |(c, u): (Tensor<f32>, Tensor<f32>)| crate::nets::concat_rows(&[&c, &u]);
            let zn_online = cat(eval_encoder(&self.state.params, &self.model.encoder, next.clone())?);
            let zn_target = cat(eval_encoder(&self.target, &self.model.encoder, next)?);
            let q_online = eval_head(&self.state.params, q_spec, zn_online)?;
            let q_target = eval_head(&self.target, q_spec, zn_target)?;
            let y = ddqn_targets(&rewards, &terminals, &q_online, &q_target, self.cfg.gamma);
            let mut g = Graph::new(&self.state.params, Frozen::all_except(&self.mode.trained()));
            let x = g.input(obs)?;
            let lat = encode(&mut g, &self.model.encoder, x)?;
            let z = g.concat(&[lat.zc, lat.zu])?;
            let lq = loss_q(&mut g, &self.model, z, &actions, &y)?;
            (g.value(lq).item() as f64, g.backward(lq)?.params)
        };
        let bundle = LossBundle { l_q: Some(value), ..LossBundle::default() };
        finite(&bundle)?;
        self.state.step_optimizers(&grads)?;
        Ok(bundle)
    }

    /// Runs until `iteration == until`; losses go to `sink` every update and
    /// the trailing mean return every `returns_every` iterations.
    pub fn run_until(&mut self, until: u64, sink: &mut dyn MetricsSink) -> Result<()> {
        while self.state.iteration < until {
            let s = self.step()?;
            let it = self.state.iteration;
            if s.losses.l_q.is_some() {
                sink.record_losses(it, &s.losses)?;
            }
            let every = self.cfg.returns_every.max(1);
            if it.is_multiple_of(every) || it == until {
                if let Some(r) = self.trailing_return() {
                    sink.record_return(it, r)?;
                }
            }
        }
        Ok(())
    }
}

/// Greedy action under `mode`'s policy; planner modes plan at their depth.
pub fn greedy_action(model: &Model, params: &ParamSet<f32>, mode: RlMode, z: &[f32]) -> Result<usize> {
    let n_c = model.encoder.n_c;
    match mode {
        RlMode::Planner { depth } => Planner::new(model, params)?.plan_action(&z[..n_c], &z[n_c..], depth),
        _ => {
            let q = eval_head(params, model.head(HeadKind::Q)?, Tensor::new(vec![1, z.len()], z.to_vec())?)?;
            Ok(argmax(q.data()))
        }
    }
}

/// Mean undiscounted return of the ε = 0 policy over `episodes` episodes.
pub fn evaluate_policy(
    model: &Model,
    params: &ParamSet<f32>,
    mode: RlMode,
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(invalid("need at least one evaluation episode"));
    }
    let mut rng = stream(seed, Stream::Env);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(&mut rng);
        loop {
            let (zc, zu) = eval_encoder(params, &model.encoder, observation_tensor(&[&obs]))?;
            let mut z = zc.into_data();
            z.extend_from_slice(zu.data());
            let step = env.step(greedy_action(model, params, mode, &z)?)?;
            total += step.reward as f64;
            if step.terminal {
                break;
            }
            obs = step.observation;
        }
    }
    Ok(total / episodes as f64)
}
