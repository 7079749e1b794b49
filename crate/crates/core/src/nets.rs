//! Split-head convolutional encoder and the MLP heads built on top of it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::envs::EnvKind;
use crate::error::{invalid, shape_err, Result};
use crate::graph::{conv_out_len, Frozen, Graph, NodeId};
use crate::params::ParamSet;
use crate::real::Real;
use crate::replay::ZU_MAP_LEN;
use crate::rng::Rng as ChaRng;
use crate::tensor::Tensor;

pub const TRUNK_CHANNELS: usize = 32;
pub const ZC_HIDDEN: usize = 200;
pub const ZU_MAP_SIDE: usize = 6;
pub const DEFAULT_WIDTHS: [usize; 4] = [32, 128, 128, 32];
pub const WIDE_WIDTHS: [usize; 4] = [128, 512, 512, 128];

pub const ENCODER: &str = "enc";

/// Form of the uncontrollable partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZuKind {
    /// Flat tanh-bounded vector of the given length.
    Vector(usize),
    /// 6×6 map pooled from a 32-channel feature map.
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub env: EnvKind,
    pub n_c: usize,
    pub zu: ZuKind,
}

impl EncoderConfig {
    /// Standard encoder for `env`: the quadruple maze uses a vector z^u of
    /// length 1, the other environments a 6×6 map.
    pub fn for_env(env: EnvKind, n_c: usize) -> Result<Self> {
        if n_c == 0 {
            return Err(invalid("n_c must be at least 1"));
        }
        let zu = match env {
            EnvKind::QuadMaze => ZuKind::Vector(1),
            _ => ZuKind::Map,
        };
        Ok(Self { env, n_c, zu })
    }

    pub fn zu_dim(&self) -> usize {
        match self.zu {
            ZuKind::Vector(n) => n,
            ZuKind::Map => ZU_MAP_LEN,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.n_c + self.zu_dim()
    }

    pub fn pixels(&self) -> usize {
        self.env.pixels()
    }

    /// Side of the trunk output (after both base convolutions).
    pub fn trunk_side(&self) -> usize {
        conv_out_len(conv_out_len(self.pixels(), 3, 2), 3, 1)
    }

    pub fn trunk_flat(&self) -> usize {
        TRUNK_CHANNELS * self.trunk_side() * self.trunk_side()
    }

    /// Side of the z^u feature map before pooling.
    pub fn zu_conv_side(&self) -> usize {
        conv_out_len(self.trunk_side(), 4, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeadKind {
    /// Action-conditioned residual predictor of z^c.
    Tc,
    /// State-only residual predictor of z^u.
    Tu,
    /// Adversarial predictor of z^u from z^c.
    Tadv,
    /// Inverse model producing action logits.
    Inverse,
    Q,
    Reward,
    Discount,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::Tc,
        HeadKind::Tu,
        HeadKind::Tadv,
        HeadKind::Inverse,
        HeadKind::Q,
        HeadKind::Reward,
        HeadKind::Discount,
    ];

    /// Parameter-name prefix (and optimizer id) of the head.
    pub fn network(self) -> &'static str {
        match self {
            HeadKind::Tc => "tc",
            HeadKind::Tu => "tu",
            HeadKind::Tadv => "tadv",
            HeadKind::Inverse => "inv",
            HeadKind::Q => "q",
            HeadKind::Reward => "rew",
            HeadKind::Discount => "disc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub input: usize,
    pub widths: Vec<usize>,
    pub output: usize,
}

impl HeadSpec {
    /// Layer sizes including input and output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input];
        s.extend_from_slice(&self.widths);
        s.push(self.output);
        s
    }
}

/// Encoder configuration plus every head the run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub n_actions: usize,
    pub heads: BTreeMap<HeadKind, HeadSpec>,
}

impl Model {
    pub fn new(encoder: EncoderConfig, heads: &[HeadKind]) -> Self {
        let n_actions = encoder.env.n_actions();
        let mut model = Self { encoder, n_actions, heads: BTreeMap::new() };
        for &kind in heads {
            let spec = model.default_spec(kind);
            model.heads.insert(kind, spec);
        }
        model
    }

    /// Input/width/output layout of `kind` for this encoder.
    pub fn default_spec(&self, kind: HeadKind) -> HeadSpec {
        let (n_c, n_u, n_a) = (self.encoder.n_c, self.encoder.zu_dim(), self.n_actions);
        let wide = self.encoder.env == EnvKind::RandomMaze && matches!(kind, HeadKind::Tc | HeadKind::Q);
        let widths = if wide { WIDE_WIDTHS.to_vec() } else { DEFAULT_WIDTHS.to_vec() };
        let (input, output) = match kind {
            HeadKind::Tc => (n_c + n_u + n_a, n_c),
            HeadKind::Tu => (n_u, n_u),
            HeadKind::Tadv => (n_c, n_u),
            HeadKind::Inverse => (2 * (n_c + n_u), n_a),
            HeadKind::Q => (n_c + n_u, n_a),
            HeadKind::Reward | HeadKind::Discount => (n_c + n_u + n_a, 1),
        };
        HeadSpec { kind, input, widths, output }
    }

    pub fn head(&self, kind: HeadKind) -> Result<&HeadSpec> {
        self.heads.get(&kind).ok_or_else(|| invalid(format!("model has no {:?} head", kind)))
    }

    pub fn has(&self, kind: HeadKind) -> bool {
        self.heads.contains_key(&kind)
    }

    /// Names of every network the model owns, encoder first.
    pub fn networks(&self) -> Vec<&'static str> {
        let mut out = vec![ENCODER];
        out.extend(self.heads.keys().map(|k| k.network()));
        out
    }
}

fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64) as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized above")
}

fn name_seed(seed: u64, network: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in network.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

fn network_rng(seed: u64, network: &str) -> ChaRng {
    let mut rng = ChaRng::seed_from_u64(name_seed(seed, network));
    rng.set_stream(crate::rng::Stream::Init as u64);
    rng
}

fn push_linear(ps: &mut ParamSet<f32>, rng: &mut ChaRng, name: &str, fan_in: usize, fan_out: usize, zero: bool) {
    let w = if zero {
        Tensor::zeros(&[fan_out, fan_in])
    } else {
        glorot(rng, &[fan_out, fan_in], fan_in, fan_out)
    };
    ps.insert(format!("{}.w", name), w);
    ps.insert(format!("{}.b", name), Tensor::zeros(&[fan_out]));
}

fn push_conv(ps: &mut ParamSet<f32>, rng: &mut ChaRng, name: &str, in_ch: usize, out_ch: usize, k: usize) {
    let w = glorot(rng, &[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k);
    ps.insert(format!("{}.w", name), w);
    ps.insert(format!("{}.b", name), Tensor::zeros(&[out_ch]));
}

/// Encoder parameters, deterministic in `seed`.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> ParamSet<f32> {
    let mut rng = network_rng(seed, ENCODER);
    let mut ps = ParamSet::new();
    push_conv(&mut ps, &mut rng, "enc.conv1", 1, TRUNK_CHANNELS, 3);
    push_conv(&mut ps, &mut rng, "enc.conv2", TRUNK_CHANNELS, TRUNK_CHANNELS, 3);
    match cfg.zu {
        ZuKind::Vector(n_u) => {
            push_linear(&mut ps, &mut rng, "enc.fc", cfg.trunk_flat(), cfg.n_c + n_u, false);
        }
        ZuKind::Map => {
            push_conv(&mut ps, &mut rng, "enc.zu_conv", TRUNK_CHANNELS, TRUNK_CHANNELS, 4);
            push_linear(&mut ps, &mut rng, "enc.zc_fc1", cfg.trunk_flat(), ZC_HIDDEN, false);
            push_linear(&mut ps, &mut rng, "enc.zc_fc2", ZC_HIDDEN, cfg.n_c, false);
        }
    }
    ps
}

/// Head parameters; the output layers of the residual predictors start at zero.
pub fn init_head(spec: &HeadSpec, seed: u64) -> ParamSet<f32> {
    let net = spec.kind.network();
    let mut rng = network_rng(seed, net);
    let mut ps = ParamSet::new();
    let sizes = spec.sizes();
    let last = sizes.len() - 2;
    for l in 0..sizes.len() - 1 {
        let zero = l == last && matches!(spec.kind, HeadKind::Tc | HeadKind::Tu);
        push_linear(&mut ps, &mut rng, &format!("{}.l{}", net, l), sizes[l], sizes[l + 1], zero);
    }
    ps
}

pub fn init_params(model: &Model, seed: u64) -> ParamSet<f32> {
    let mut ps = init_encoder(&model.encoder, seed);
    for spec in model.heads.values() {
        ps.merge(init_head(spec, seed));
    }
    ps
}

/// Latent partitions of a batch: `zc` is `[B, n_c]`, `zu` is `[B, n_u]`
/// (a 6×6 map flattened row-major to 36 columns).
#[derive(Debug, Clone, Copy)]
pub struct Latent {
    pub zc: NodeId,
    pub zu: NodeId,
}

fn linear_layer<S: Real>(g: &mut Graph<'_, S>, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(&format!("{}.w", name))?;
    let b = g.param(&format!("{}.b", name))?;
    g.linear(x, w, b)
}

fn conv_layer<S: Real>(g: &mut Graph<'_, S>, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
    let w = g.param(&format!("{}.w", name))?;
    let b = g.param(&format!("{}.b", name))?;
    g.conv2d(x, w, b, stride)
}

/// Encodes `obs` (`[B, 1, H, W]`) into its controllable and uncontrollable parts.
pub fn encode<S: Real>(g: &mut Graph<'_, S>, cfg: &EncoderConfig, obs: NodeId) -> Result<Latent> {
    let px = cfg.pixels();
    let s = g.shape(obs);
    if s.len() != 4 || s[1] != 1 || s[2] != px || s[3] != px {
        return Err(shape_err("encode", format!("observation batch {:?} for {}px env", s, px)));
    }
    let h1 = conv_layer(g, "enc.conv1", obs, 2)?;
    let h1 = g.relu(h1)?;
    let h2 = conv_layer(g, "enc.conv2", h1, 1)?;
    let trunk = g.relu(h2)?;
    let flat = g.flatten(trunk)?;
    match cfg.zu {
        ZuKind::Vector(n_u) => {
            let z = linear_layer(g, "enc.fc", flat)?;
            let z = g.tanh(z)?;
            let zc_cols: Vec<usize> = (0..cfg.n_c).collect();
            let zu_cols: Vec<usize> = (cfg.n_c..cfg.n_c + n_u).collect();
            let zc = g.select_cols(z, &zc_cols)?;
            let zu = g.select_cols(z, &zu_cols)?;
            Ok(Latent { zc, zu })
        }
        ZuKind::Map => {
            let m = conv_layer(g, "enc.zu_conv", trunk, 1)?;
            let m = g.relu(m)?;
            let pooled = g.adaptive_avg_pool(m, ZU_MAP_SIDE, ZU_MAP_SIDE)?;
            let zu = g.channel_mean(pooled)?;
            let h = linear_layer(g, "enc.zc_fc1", flat)?;
            let h = g.tanh(h)?;
            let zc = linear_layer(g, "enc.zc_fc2", h)?;
            let zc = g.tanh(zc)?;
            Ok(Latent { zc, zu })
        }
    }
}

/// MLP forward: tanh on hidden layers, linear output (sigmoid for the
/// discount head).
pub fn head_forward<S: Real>(g: &mut Graph<'_, S>, spec: &HeadSpec, input: NodeId) -> Result<NodeId> {
    let s = g.shape(input);
    if s.len() != 2 || s[1] != spec.input {
        return Err(shape_err(
            "head_forward",
            format!("{:?} head expects {} inputs, got {:?}", spec.kind, spec.input, s),
        ));
    }
    let net = spec.kind.network();
    let layers = spec.widths.len() + 1;
    let mut x = input;
    for l in 0..layers {
        x = linear_layer(g, &format!("{}.l{}", net, l), x)?;
        if l + 1 < layers {
            x = g.tanh(x)?;
        }
    }
    if spec.kind == HeadKind::Discount {
        x = g.sigmoid(x)?;
    }
    Ok(x)
}

pub fn one_hot<S: Real>(actions: &[usize], n_actions: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::ZERO; actions.len() * n_actions];
    for (r, &a) in actions.iter().enumerate() {
        if a >= n_actions {
            return Err(invalid(format!("action {} out of range {}", a, n_actions)));
        }
        data[r * n_actions + a] = S::ONE;
    }
    Tensor::new(vec![actions.len(), n_actions], data)
}

/// Forward-only evaluation of one head on a `[B, input]` tensor.
pub fn eval_head(params: &ParamSet<f32>, spec: &HeadSpec, input: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new(params, Frozen::all());
    let x = g.input(input)?;
    let y = head_forward(&mut g, spec, x)?;
    Ok(g.value(y).clone())
}

/// Forward-only encoding; returns `(z^c [B,n_c], z^u [B,n_u])`.
pub fn eval_encoder(
    params: &ParamSet<f32>,
    cfg: &EncoderConfig,
    obs: Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::new(params, Frozen::all());
    let x = g.input(obs)?;
    let z = encode(&mut g, cfg, x)?;
    Ok((g.value(z.zc).clone(), g.value(z.zu).clone()))
}

/// Row-wise concatenation of plain 2-D tensors.
pub fn concat_rows(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let batch = parts[0].shape()[0];
    let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(batch * width);
    for r in 0..batch {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![batch, width], data).expect("sized above")
}

/// Names of the parameter tensors a head owns.
pub fn head_param_names(spec: &HeadSpec) -> Vec<String> {
    let net = spec.kind.network();
    (0..=spec.widths.len())
        .flat_map(|l| [format!("{}.l{}.w", net, l), format!("{}.l{}.b", net, l)])
        .collect()
}
