//! Depth-limited latent planning.
//!
//! The tree is expanded in z^c only: every T_c, P, Γ and Q call inside one
//! plan receives the root z^u unchanged. Each depth level is evaluated as a
//! single batch of `|A|^d` rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::graph::{Frozen, Graph};
use crate::nets::{head_forward, one_hot, HeadKind, Model};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Heads that planning needs.
pub const PLANNER_HEADS: [HeadKind; 4] = [HeadKind::Tc, HeadKind::Q, HeadKind::Reward, HeadKind::Discount];

/// Borrowed view of a model's planning heads.
#[derive(Debug, Clone, Copy)]
pub struct Planner<'a, S: Real = f32> {
    pub model: &'a Model,
    pub params: &'a ParamSet<S>,
}

fn rows<S: Real>(zc: &[Vec<S>], zu: &[S]) -> Tensor<S> {
    let width = zc[0].len() + zu.len();
    let mut data = Vec::with_capacity(zc.len() * width);
    for row in zc {
        data.extend_from_slice(row);
        data.extend_from_slice(zu);
    }
    Tensor::new(vec![zc.len(), width], data).expect("sized above")
}

impl<'a, S: Real> Planner<'a, S> {
    pub fn new(model: &'a Model, params: &'a ParamSet<S>) -> Result<Self> {
        for kind in PLANNER_HEADS {
            model.head(kind)?;
        }
        Ok(Self { model, params })
    }

    fn n_actions(&self) -> usize {
        self.model.n_actions
    }

    fn head(&self, kind: HeadKind, input: Tensor<S>) -> Result<Tensor<S>> {
        let spec = self.model.head(kind)?;
        let mut g = Graph::new(self.params, Frozen::all());
        let x = g.input(input)?;
        let y = head_forward(&mut g, spec, x)?;
        Ok(g.value(y).clone())
    }

    /// `[N, |A|]` Q values for latents `(zc_i, zu)`.
    pub fn q_values(&self, zc: &[Vec<S>], zu: &[S]) -> Result<Tensor<S>> {
        self.head(HeadKind::Q, rows(zc, zu))
    }

    /// One expansion: for every row and action (row-major, action fastest)
    /// returns `(P, Γ, ẑ^c')` with `ẑ^c' = z^c + T_c(z, a)`.
    #[allow(clippy::type_complexity)]
    pub fn expand(&self, zc: &[Vec<S>], zu: &[S]) -> Result<(Vec<S>, Vec<S>, Vec<Vec<S>>)> {
        let n_a = self.n_actions();
        let mut expanded = Vec::with_capacity(zc.len() * n_a);
        let mut actions = Vec::with_capacity(zc.len() * n_a);
        for row in zc {
            for a in 0..n_a {
                expanded.push(row.clone());
                actions.push(a);
            }
        }
        let z = rows(&expanded, zu);
        let act: Tensor<S> = one_hot(&actions, n_a)?;
        let input = concat2(&z, &act);
        let reward = self.head(HeadKind::Reward, input.clone())?.into_data();
        let discount = self.head(HeadKind::Discount, input.clone())?.into_data();
        let delta = self.head(HeadKind::Tc, input)?;
        let next = expanded
            .iter()
            .enumerate()
            .map(|(i, base)| base.iter().zip(delta.row(i)).map(|(z, d)| *z + *d).collect())
            .collect();
        Ok((reward, discount, next))
    }

    /// `q_hat(z, a, d)` for every row of `zc` and every action, `[N, |A|]` row-major.
    pub fn q_hat(&self, zc: &[Vec<S>], zu: &[S], depth: usize) -> Result<Vec<S>> {
        if zc.is_empty() {
            return Err(invalid("q_hat needs at least one latent"));
        }
        if depth == 0 {
            return Ok(self.q_values(zc, zu)?.into_data());
        }
        let n_a = self.n_actions();
        let (reward, discount, next) = self.expand(zc, zu)?;
        let child = self.q_hat(&next, zu, depth - 1)?;
        Ok((0..next.len())
            .map(|i| {
                let best = child[i * n_a..(i + 1) * n_a].iter().copied().fold(child[i * n_a], S::max);
                reward[i] + discount[i] * best
            })
            .collect())
    }

    /// `Σ_{d=0..D} q_hat(z, a, d)` per action.
    pub fn plan_values(&self, zc: &[S], zu: &[S], depth: usize) -> Result<Vec<S>> {
        let root = [zc.to_vec()];
        let mut total = vec![S::ZERO; self.n_actions()];
        for d in 0..=depth {
            for (t, v) in total.iter_mut().zip(self.q_hat(&root, zu, d)?) {
                *t += v;
            }
        }
        Ok(total)
    }

    /// Argmax of [`Planner::plan_values`]; ties go to the lowest action id.
    pub fn plan_action(&self, zc: &[S], zu: &[S], depth: usize) -> Result<usize> {
        Ok(argmax(&self.plan_values(zc, zu, depth)?))
    }

    /// Imagined z^c path: the root, then the greedy branch of the depth-`D`
    /// recursion down to the chosen leaf. Returns `(actions, points)`.
    #[allow(clippy::type_complexity)]
    pub fn rollout(&self, zc: &[S], zu: &[S], depth: usize) -> Result<(Vec<usize>, Vec<Vec<S>>)> {
        let mut points = vec![zc.to_vec()];
        let mut actions = Vec::new();
        if depth == 0 {
            actions.push(self.plan_action(zc, zu, 0)?);
            return Ok((actions, points));
        }
        let mut a = self.plan_action(zc, zu, depth)?;
        for remaining in (0..depth).rev() {
            actions.push(a);
            let current = points.last().expect("root pushed").clone();
            let (_, _, next) = self.expand(&[current], zu)?;
            let z_next = next[a].clone();
            let child = self.q_hat(core::slice::from_ref(&z_next), zu, remaining)?;
            a = argmax(&child);
            points.push(z_next);
        }
        actions.push(a);
        Ok((actions, points))
    }
}

fn concat2<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let n = a.shape()[0];
    let w = a.shape()[1] + b.shape()[1];
    let mut data = Vec::with_capacity(n * w);
    for r in 0..n {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::new(vec![n, w], data).expect("sized above")
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<S: Real>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.to_f64() > values[best].to_f64() {
            best = i;
        }
    }
    best
}
