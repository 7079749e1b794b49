//! Training objectives and their gradient routing.
//!
//! Every builder appends to a caller-owned [`Graph`] and returns the scalar
//! loss node; batch reduction is always the mean.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::graph::{Graph, NodeId};
use crate::nets::{encode, head_forward, one_hot, HeadKind, Latent, Model, ZuKind};
use crate::planner::argmax;
use crate::real::Real;
use crate::tensor::Tensor;

/// Where gradients are cut inside the forward-prediction losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GradientRouting {
    /// Stop-gradient on the z^u input of T_c.
    pub detach_zu_in_tc: bool,
    /// Stop-gradient on every time-t z^c occurrence in L_c (residual base and T_c input).
    pub detach_zc_in_lc: bool,
    /// Predict `z_t + T(·)` instead of `T(·)`.
    pub residual: bool,
    /// Stop-gradient on the t+1 targets of L_c and L_u (ablation; off by default).
    pub detach_targets: bool,
}

impl Default for GradientRouting {
    fn default() -> Self {
        Self { detach_zu_in_tc: true, detach_zc_in_lc: true, residual: true, detach_targets: false }
    }
}

/// Which action-aware objective shapes z^c.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ForwardObjective {
    /// Action-conditioned forward prediction (L_c).
    Controllable,
    /// Inverse-dynamics cross-entropy (L_inv) in place of L_c.
    Inverse,
}

/// Composition of the contrastive term L_H.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Contrastive {
    /// L_H = L_H1
    H1,
    /// L_H = L_H2
    H2,
    /// L_H = 0.5 L_H1 + 0.5 L_H2
    Mixed,
}

impl Contrastive {
    pub fn uses_h1(self) -> bool {
        matches!(self, Contrastive::H1 | Contrastive::Mixed)
    }

    pub fn uses_h2(self) -> bool {
        matches!(self, Contrastive::H2 | Contrastive::Mixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LossFlags {
    pub forward: ForwardObjective,
    pub contrastive: Contrastive,
    pub adversarial: bool,
    /// Contrastive scale C_d.
    pub c_d: f64,
}

/// Per-step index draws shared by every loss of one update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepDraws {
    /// Shifted-batch partners for L_H1.
    pub negatives: Vec<usize>,
    /// Cross-episode partners for L_H2.
    pub cross_negatives: Option<Vec<usize>>,
    /// Subset of z^u map entries entering L_H1.
    pub zu_subset: Option<Vec<usize>>,
}

/// Scalar values of every loss computed in one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub l_c: Option<f64>,
    pub l_u: Option<f64>,
    pub l_h1: Option<f64>,
    pub l_h2: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_inv: Option<f64>,
    pub l_q: Option<f64>,
    pub l_enc_total: Option<f64>,
}

fn maybe_detach<S: Real>(g: &mut Graph<'_, S>, x: NodeId, cut: bool) -> Result<NodeId> {
    if cut {
        g.detach(x)
    } else {
        Ok(x)
    }
}

/// `|T_c(z_t, a) (+ z^c_t) - z^c_{t+1}|^2`
pub fn loss_c<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    routing: &GradientRouting,
    z_t: Latent,
    z_tp1: Latent,
    actions: &[usize],
) -> Result<NodeId> {
    let spec = model.head(HeadKind::Tc)?;
    let zc_t = maybe_detach(g, z_t.zc, routing.detach_zc_in_lc)?;
    let zu_t = maybe_detach(g, z_t.zu, routing.detach_zu_in_tc)?;
    let act = g.input(one_hot(actions, model.n_actions)?)?;
    let input = g.concat(&[zc_t, zu_t, act])?;
    let delta = head_forward(g, spec, input)?;
    let pred = if routing.residual { g.add(zc_t, delta)? } else { delta };
    let target = maybe_detach(g, z_tp1.zc, routing.detach_targets)?;
    g.mse(pred, target)
}

/// `|T_u(z^u_t) (+ z^u_t) - z^u_{t+1}|^2`; no action input.
pub fn loss_u<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    routing: &GradientRouting,
    z_t: Latent,
    z_tp1: Latent,
) -> Result<NodeId> {
    let spec = model.head(HeadKind::Tu)?;
    let delta = head_forward(g, spec, z_t.zu)?;
    let pred = if routing.residual { g.add(z_t.zu, delta)? } else { delta };
    let target = maybe_detach(g, z_tp1.zu, routing.detach_targets)?;
    g.mse(pred, target)
}

/// Latent vector entering L_H1: z^c concatenated with z^u, or with the
/// drawn subset of a z^u map.
pub fn contrastive_latent<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    z: Latent,
    zu_subset: Option<&[usize]>,
) -> Result<NodeId> {
    let zu = match (model.encoder.zu, zu_subset) {
        (ZuKind::Map, Some(cols)) => g.select_cols(z.zu, cols)?,
        (ZuKind::Map, None) => return Err(invalid("map-form z^u needs a subsample index set")),
        (ZuKind::Vector(_), _) => z.zu,
    };
    g.concat(&[z.zc, zu])
}

/// `mean_i exp(-C_d * |z_i - z_{neg(i)}|_2)`; gradients reach both rows.
pub fn loss_h<S: Real>(g: &mut Graph<'_, S>, z: NodeId, negatives: &[usize], c_d: f64) -> Result<NodeId> {
    if negatives.len() != g.shape(z)[0] {
        return Err(invalid(format!("{} negatives for batch {}", negatives.len(), g.shape(z)[0])));
    }
    let neg = g.gather_rows(z, negatives)?;
    let diff = g.sub(z, neg)?;
    let dist = g.row_norm(diff)?;
    let scaled = g.scale(dist, -c_d)?;
    let e = g.exp(scaled)?;
    g.mean(e)
}

/// Discriminator loss `|T_adv(z^c_t) - z^u_t|^2`. The z^c input passes a
/// gradient-reversal node, so the encoder receives the negated gradient
/// while T_adv minimizes; the z^u target is detached.
pub fn loss_adv<S: Real>(g: &mut Graph<'_, S>, model: &Model, z_t: Latent) -> Result<NodeId> {
    let spec = model.head(HeadKind::Tadv)?;
    let zc = g.reverse_gradient(z_t.zc)?;
    let pred = head_forward(g, spec, zc)?;
    let target = g.detach(z_t.zu)?;
    g.mse(pred, target)
}

/// Cross-entropy of `I(z^c_t, z^c_{t+1}, z^u_t, z^u_{t+1})` against the taken action.
pub fn loss_inv<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    z_t: Latent,
    z_tp1: Latent,
    actions: &[usize],
) -> Result<NodeId> {
    let spec = model.head(HeadKind::Inverse)?;
    let input = g.concat(&[z_t.zc, z_tp1.zc, z_t.zu, z_tp1.zu])?;
    let logits = head_forward(g, spec, input)?;
    g.softmax_xent(logits, actions)
}

/// `|Y - Q(z, a)|^2` for constant targets `Y`.
pub fn loss_q<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    z: NodeId,
    actions: &[usize],
    targets: &[f64],
) -> Result<NodeId> {
    let spec = model.head(HeadKind::Q)?;
    let q = head_forward(g, spec, z)?;
    let taken = g.pick_per_row(q, actions)?;
    let y = g.input(Tensor::new(vec![targets.len()], targets.iter().map(|v| S::from_f64(*v)).collect())?)?;
    g.mse(taken, y)
}

/// Double-DQN targets `r + γ Q⁻(z', argmax_a Q(z', a))`, bootstrapping
/// masked on terminal transitions. `q_online_next` and `q_target_next` are
/// `[B, |A|]` row-major.
pub fn ddqn_targets(
    rewards: &[f32],
    terminals: &[bool],
    q_online_next: &Tensor<f32>,
    q_target_next: &Tensor<f32>,
    gamma: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .zip(terminals)
        .enumerate()
        .map(|(i, (r, term))| {
            if *term {
                return *r as f64;
            }
            let a_star = argmax(q_online_next.row(i));
            *r as f64 + gamma * q_target_next.row(i)[a_star] as f64
        })
        .collect()
}

/// Reward-head regression on observed rewards.
pub fn loss_reward<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    z: NodeId,
    actions: &[usize],
    rewards: &[f32],
) -> Result<NodeId> {
    scalar_head_loss(g, model, HeadKind::Reward, z, actions, rewards.iter().map(|r| *r as f64).collect())
}

/// Discount-head regression on `γ` (0 on terminal transitions).
pub fn loss_discount<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    z: NodeId,
    actions: &[usize],
    terminals: &[bool],
    gamma: f64,
) -> Result<NodeId> {
    let targets = terminals.iter().map(|t| if *t { 0.0 } else { gamma }).collect();
    scalar_head_loss(g, model, HeadKind::Discount, z, actions, targets)
}

fn scalar_head_loss<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    kind: HeadKind,
    z: NodeId,
    actions: &[usize],
    targets: Vec<f64>,
) -> Result<NodeId> {
    let spec = model.head(kind)?;
    let act = g.input(one_hot(actions, model.n_actions)?)?;
    let input = g.concat(&[z, act])?;
    let out = head_forward(g, spec, input)?;
    let n = targets.len();
    let y = g.input(Tensor::new(vec![n, 1], targets.into_iter().map(S::from_f64).collect())?)?;
    g.mse(out, y)
}

/// Nodes of one pretraining step.
#[derive(Debug, Clone, Copy)]
pub struct PretrainLosses {
    pub z_t: Latent,
    pub z_tp1: Latent,
    pub l_c: Option<NodeId>,
    pub l_u: NodeId,
    pub l_h1: Option<NodeId>,
    pub l_h2: Option<NodeId>,
    pub l_adv: Option<NodeId>,
    pub l_inv: Option<NodeId>,
    /// Sum that is differentiated: forward terms + L_u + L_H + L_adv, where
    /// the reversal node turns the last term into `-L_adv` for the encoder.
    pub objective: NodeId,
}

/// Encodes both observation batches and builds every enabled loss.
#[allow(clippy::too_many_arguments)]
pub fn build_pretrain<S: Real>(
    g: &mut Graph<'_, S>,
    model: &Model,
    flags: &LossFlags,
    routing: &GradientRouting,
    obs: Tensor<S>,
    next_obs: Tensor<S>,
    actions: &[usize],
    draws: &StepDraws,
) -> Result<PretrainLosses> {
    let x_t = g.input(obs)?;
    let x_tp1 = g.input(next_obs)?;
    let z_t = encode(g, &model.encoder, x_t)?;
    let z_tp1 = encode(g, &model.encoder, x_tp1)?;

    let mut terms = Vec::new();
    let (l_c, l_inv) = match flags.forward {
        ForwardObjective::Controllable => {
            let l = loss_c(g, model, routing, z_t, z_tp1, actions)?;
            terms.push(l);
            (Some(l), None)
        }
        ForwardObjective::Inverse => {
            let l = loss_inv(g, model, z_t, z_tp1, actions)?;
            terms.push(l);
            (None, Some(l))
        }
    };
    let l_u = loss_u(g, model, routing, z_t, z_tp1)?;
    terms.push(l_u);

    let l_h1 = if flags.contrastive.uses_h1() {
        let z = contrastive_latent(g, model, z_t, draws.zu_subset.as_deref())?;
        Some(loss_h(g, z, &draws.negatives, flags.c_d)?)
    } else {
        None
    };
    let l_h2 = if flags.contrastive.uses_h2() {
        let neg = draws
            .cross_negatives
            .as_deref()
            .ok_or_else(|| invalid("L_H2 needs cross-episode negatives"))?;
        Some(loss_h(g, z_t.zc, neg, flags.c_d)?)
    } else {
        None
    };
    match (l_h1, l_h2) {
        (Some(a), Some(b)) => {
            let s = g.add(a, b)?;
            terms.push(g.scale(s, 0.5)?);
        }
        (Some(a), None) | (None, Some(a)) => terms.push(a),
        (None, None) => {}
    }

    let l_adv = if flags.adversarial {
        let l = loss_adv(g, model, z_t)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };

    let mut objective = terms[0];
    for t in &terms[1..] {
        objective = g.add(objective, *t)?;
    }
    Ok(PretrainLosses { z_t, z_tp1, l_c, l_u, l_h1, l_h2, l_adv, l_inv, objective })
}

impl PretrainLosses {
    /// Reads the scalar values and composes the encoder total.
    pub fn bundle<S: Real>(&self, g: &Graph<'_, S>, flags: &LossFlags) -> Result<LossBundle> {
        let val = |n: Option<NodeId>| n.map(|id| g.value(id).item().to_f64());
        let mut b = LossBundle {
            l_c: val(self.l_c),
            l_u: val(Some(self.l_u)),
            l_h1: val(self.l_h1),
            l_h2: val(self.l_h2),
            l_adv: val(self.l_adv),
            l_inv: val(self.l_inv),
            l_q: None,
            l_enc_total: None,
        };
        b.l_enc_total = Some(compose_encoder_loss(&b, flags)?);
        Ok(b)
    }
}

/// `L_c (or L_inv) + L_u + L_H - L_adv`, unweighted, per the enabled flags.
pub fn compose_encoder_loss(bundle: &LossBundle, flags: &LossFlags) -> Result<f64> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| invalid(format!("missing {} for enabled flag", name)));
    let forward = match flags.forward {
        ForwardObjective::Controllable => need(bundle.l_c, "l_c")?,
        ForwardObjective::Inverse => need(bundle.l_inv, "l_inv")?,
    };
    let l_h = match flags.contrastive {
        Contrastive::H1 => need(bundle.l_h1, "l_h1")?,
        Contrastive::H2 => need(bundle.l_h2, "l_h2")?,
        Contrastive::Mixed => 0.5 * need(bundle.l_h1, "l_h1")? + 0.5 * need(bundle.l_h2, "l_h2")?,
    };
    let adv = if flags.adversarial { need(bundle.l_adv, "l_adv")? } else { 0.0 };
    Ok(forward + need(bundle.l_u, "l_u")? + l_h - adv)
}
