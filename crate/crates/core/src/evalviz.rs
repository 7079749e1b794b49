//! Latent dumps over enumerated states and the numeric disentanglement probes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::envs::{CatcherState, EnvKind, MazeSpec, Move, Observation, CATCHER_COLS, CATCHER_PADDLE_ROW};
use crate::error::{invalid, Error, Result};
use crate::graph::{Frozen, Graph};
use crate::nets::{eval_encoder, eval_head, head_forward, init_head, one_hot, HeadKind, HeadSpec, Model, DEFAULT_WIDTHS};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::replay::stack_observations;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// One enumerated state with its encoding and per-action predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    /// Maze id or seed; 0 for catcher.
    pub group: u64,
    /// `[row, col]` for mazes, `[paddle_col, ball_col, ball_row]` for catcher.
    pub state: Vec<usize>,
    pub zc: Vec<f32>,
    pub zu: Vec<f32>,
    /// `z^c + T_c(z, a)` per action; empty without a T_c head.
    pub predicted: Vec<Vec<f32>>,
    /// Encoded z^c of the true successor per action.
    pub next_zc: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub env: EnvKind,
    pub state_names: Vec<&'static str>,
    pub rows: Vec<LatentRow>,
}

impl LatentDump {
    pub fn zc(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.zc.iter().map(|v| *v as f64).collect()).collect()
    }

    pub fn zu(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.zu.iter().map(|v| *v as f64).collect()).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.group as usize).collect()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.state.iter().map(|v| *v as f64).collect()).collect()
    }
}

struct Enumerated {
    group: u64,
    state: Vec<usize>,
    obs: Observation,
    next: Vec<Observation>,
}

const DUMP_BATCH: usize = 64;

fn build_dump(
    params: &ParamSet<f32>,
    model: &Model,
    state_names: Vec<&'static str>,
    items: Vec<Enumerated>,
) -> Result<LatentDump> {
    let n_a = model.n_actions;
    let mut rows = Vec::with_capacity(items.len());
    for chunk in items.chunks(DUMP_BATCH) {
        let obs: Vec<&Observation> = chunk.iter().map(|e| &e.obs).collect();
        let (zc, zu) = eval_encoder(params, &model.encoder, stack_observations(&obs))?;
        let next: Vec<&Observation> = chunk.iter().flat_map(|e| e.next.iter()).collect();
        let (next_zc, _) = eval_encoder(params, &model.encoder, stack_observations(&next))?;
        let predicted = if model.has(HeadKind::Tc) {
            let mut input = Vec::new();
            let mut actions = Vec::new();
            for i in 0..chunk.len() {
                for a in 0..n_a {
                    input.extend_from_slice(zc.row(i));
                    input.extend_from_slice(zu.row(i));
                    actions.push(a);
                }
            }
            let width = zc.shape()[1] + zu.shape()[1];
            let z = Tensor::new(vec![actions.len(), width], input)?;
            let act: Tensor<f32> = one_hot(&actions, n_a)?;
            let x = crate::nets::concat_rows(&[&z, &act]);
            Some(eval_head(params, model.head(HeadKind::Tc)?, x)?)
        } else {
            None
        };
        for (i, e) in chunk.iter().enumerate() {
            let base = zc.row(i);
            let pred = match &predicted {
                Some(delta) => (0..n_a)
                    .map(|a| base.iter().zip(delta.row(i * n_a + a)).map(|(z, d)| z + d).collect())
                    .collect(),
                None => Vec::new(),
            };
            rows.push(LatentRow {
                group: e.group,
                state: e.state.clone(),
                zc: base.to_vec(),
                zu: zu.row(i).to_vec(),
                predicted: pred,
                next_zc: (0..n_a).map(|a| next_zc.row(i * n_a + a).to_vec()).collect(),
            });
        }
    }
    Ok(LatentDump { env: model.encoder.env, state_names, rows })
}

/// Every free cell of every maze, in the given maze order then row-major.
pub fn dump_mazes(params: &ParamSet<f32>, model: &Model, mazes: &[(u64, MazeSpec)]) -> Result<LatentDump> {
    if !matches!(model.encoder.env, EnvKind::QuadMaze | EnvKind::RandomMaze) {
        return Err(invalid("maze dump needs a maze encoder"));
    }
    let mut items = Vec::new();
    for (group, spec) in mazes {
        for (cell, obs) in spec.enumerate_states() {
            let next = (0..model.n_actions)
                .map(|a| Move::from_id(a).map(|mv| spec.render(spec.moved(cell, mv))))
                .collect::<Result<Vec<_>>>()?;
            items.push(Enumerated { group: *group, state: vec![cell.0, cell.1], obs, next });
        }
    }
    build_dump(params, model, vec!["row", "col"], items)
}

/// Every non-terminal catcher state.
pub fn dump_catcher(params: &ParamSet<f32>, model: &Model) -> Result<LatentDump> {
    if model.encoder.env != EnvKind::Catcher {
        return Err(invalid("catcher dump needs a catcher encoder"));
    }
    let mut items = Vec::new();
    for ball_row in 0..CATCHER_PADDLE_ROW {
        for ball_col in 0..CATCHER_COLS {
            for paddle_col in 0..CATCHER_COLS {
                let s = CatcherState { paddle_col, ball_col, ball_row, terminal: false };
                let next = [paddle_col.saturating_sub(1), (paddle_col + 1).min(CATCHER_COLS - 1)]
                    .into_iter()
                    .map(|p| CatcherState { paddle_col: p, ball_row: ball_row + 1, ..s }.render())
                    .collect();
                items.push(Enumerated { group: 0, state: vec![paddle_col, ball_col, ball_row], obs: s.render(), next });
            }
        }
    }
    build_dump(params, model, vec!["paddle_col", "ball_col", "ball_row"], items)
}

/// One row of `probes.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub metric: String,
    pub value: f64,
    pub baseline: f64,
    pub split: String,
    pub seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means, best of `restarts` by inertia. Returns cluster ids.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || points.len() < k {
        return Err(invalid(format!("k-means needs k >= 2 and at least k points (k={}, n={})", k, points.len())));
    }
    let mut rng = stream(seed, Stream::Probe);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let init = rand::seq::index::sample(&mut rng, points.len(), k).into_vec();
        let mut centers: Vec<Vec<f64>> = init.iter().map(|&i| points[i].clone()).collect();
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..300 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut c_best = 0;
                let mut d_best = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(p, center);
                    if d < d_best {
                        d_best = d;
                        c_best = c;
                    }
                }
                if assign[i] != c_best {
                    assign[i] = c_best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, a)| sq_dist(p, &centers[*a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Share of points whose label is the majority label of their cluster.
pub fn purity(clusters: &[usize], labels: &[usize]) -> f64 {
    let n_c = clusters.iter().max().map_or(0, |m| m + 1);
    let n_l = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_c * n_l];
    for (c, l) in clusters.iter().zip(labels) {
        counts[c * n_l + l] += 1;
    }
    let hits: usize = (0..n_c).map(|c| counts[c * n_l..(c + 1) * n_l].iter().copied().max().unwrap_or(0)).sum();
    hits as f64 / clusters.len() as f64
}

/// k-means (50 restarts) followed by majority-label purity.
pub fn cluster_purity(points: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(invalid("one label per point required"));
    }
    let clusters = kmeans(points, k, 50, seed)?;
    Ok(purity(&clusters, labels))
}

/// Seeded 80/20 split of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Probe));
    let n_train = (n * 4).div_ceil(5);
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Solves `A x = b` for symmetric positive (semi)definite `A` by Gaussian
/// elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("non-empty");
        if a[pivot][col].abs() <= 1e-12 * scale {
            return Err(Error::RankDeficient);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            let (upper, lower) = a.split_at_mut(r);
            for (x, y) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * y;
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for r in (0..n).rev() {
        for c in 0..m {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k][c]).sum();
            x[r][c] = (b[r][c] - s) / a[r][r];
        }
    }
    Ok(x)
}

/// Least-squares affine fit on a seeded 80% split; held-out R² per output column.
pub fn linear_probe_r2(x: &[Vec<f64>], y: &[Vec<f64>], seed: u64) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() < 10 {
        return Err(invalid(format!("linear probe needs >= 10 paired rows, got {}/{}", x.len(), y.len())));
    }
    let (train, test) = split_indices(x.len(), seed);
    let d = x[0].len() + 1;
    let m = y[0].len();
    let row = |i: usize| -> Vec<f64> {
        let mut r = x[i].clone();
        r.push(1.0);
        r
    };
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; m]; d];
    for &i in &train {
        let r = row(i);
        for a in 0..d {
            for b in 0..d {
                xtx[a][b] += r[a] * r[b];
            }
            for c in 0..m {
                xty[a][c] += r[a] * y[i][c];
            }
        }
    }
    let w = solve(xtx, xty)?;
    (0..m)
        .map(|c| {
            let mean = test.iter().map(|&i| y[i][c]).sum::<f64>() / test.len() as f64;
            let mut sse = 0.0;
            let mut sst = 0.0;
            for &i in &test {
                let r = row(i);
                let pred: f64 = (0..d).map(|a| r[a] * w[a][c]).sum();
                sse += (y[i][c] - pred) * (y[i][c] - pred);
                sst += (y[i][c] - mean) * (y[i][c] - mean);
            }
            if sst == 0.0 {
                return Err(invalid(format!("target column {} is constant on the test split", c)));
            }
            Ok(1.0 - sse / sst)
        })
        .collect()
}

/// Held-out regression error of a fresh MLP from z^c to z^u relative to
/// predicting the training mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leakage {
    pub ratio: f64,
    pub test_mse: f64,
    pub baseline_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub eval_every: usize,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        Self { iterations: 5_000, batch_size: 32, lr: 1e-3, eval_every: 100 }
    }
}

fn to_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Tensor<f32> {
    let w = rows[0].len();
    let data = idx.iter().flat_map(|&i| rows[i].iter().map(|v| *v as f32)).collect();
    Tensor::new(vec![idx.len(), w], data).expect("sized above")
}

fn mse(pred: &Tensor<f32>, target: &Tensor<f32>) -> f64 {
    let n = pred.len() as f64;
    pred.data().iter().zip(target.data()).map(|(p, t)| {
        let d = *p as f64 - *t as f64;
        d * d
    }).sum::<f64>() / n
}

/// The head starts as the mean predictor (zero output weights, bias = train
/// mean) and keeps the parameters with the best validation error, so a
/// signal-free input stays at ratio ≈ 1 instead of overfitting noise.
pub fn leakage_probe(zc: &[Vec<f64>], zu: &[Vec<f64>], seed: u64, cfg: &LeakageConfig) -> Result<Leakage> {
    if zc.len() != zu.len() || zc.len() < 20 {
        return Err(invalid(format!("leakage probe needs >= 20 paired rows, got {}/{}", zc.len(), zu.len())));
    }
    let (train_all, test) = split_indices(zc.len(), seed);
    let n_val = (train_all.len() / 5).max(1);
    let (val, train) = train_all.split_at(n_val);
    let (n_c, n_u) = (zc[0].len(), zu[0].len());
    let spec = HeadSpec { kind: HeadKind::Tadv, input: n_c, widths: DEFAULT_WIDTHS.to_vec(), output: n_u };

    let mut mean = vec![0.0f64; n_u];
    for &i in train_all.iter() {
        for (m, v) in mean.iter_mut().zip(&zu[i]) {
            *m += v;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / train_all.len() as f64) as f32).collect();

    let mut params = init_head(&spec, seed);
    let last = format!("{}.l{}", spec.kind.network(), spec.widths.len());
    params.get_mut(&format!("{}.w", last))?.data_mut().fill(0.0);
    params.get_mut(&format!("{}.b", last))?.data_mut().copy_from_slice(&mean);
    let mut adam = Adam::new(&params, cfg.lr);

    let (x_val, y_val) = (to_tensor(zc, val), to_tensor(zu, val));
    let mut best = (mse(&eval_head(&params, &spec, x_val.clone())?, &y_val), params.clone());
    let mut rng = stream(seed, Stream::Data);
    for it in 1..=cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| train[rng.gen_range(0..train.len())]).collect();
        let grads = {
            let mut g = Graph::new(&params, Frozen::none());
            let x = g.input(to_tensor(zc, &idx))?;
            let y = g.input(to_tensor(zu, &idx))?;
            let p = head_forward(&mut g, &spec, x)?;
            let l = g.mse(p, y)?;
            g.backward(l)?.params
        };
        adam.step(&mut params, &grads)?;
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let v = mse(&eval_head(&params, &spec, x_val.clone())?, &y_val);
            if v < best.0 {
                best = (v, params.clone());
            }
        }
    }

    let (x_test, y_test) = (to_tensor(zc, &test), to_tensor(zu, &test));
    let test_mse = mse(&eval_head(&best.1, &spec, x_test)?, &y_test);
    let baseline = Tensor::new(vec![test.len(), n_u], (0..test.len()).flat_map(|_| mean.iter().copied()).collect())?;
    let baseline_mse = mse(&baseline, &y_test);
    if baseline_mse == 0.0 {
        return Err(invalid("z^u is constant on the test split"));
    }
    Ok(Leakage { ratio: test_mse / baseline_mse, test_mse, baseline_mse })
}

fn nn_distances(points: &[&Vec<f64>]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| libm::sqrt(sq_dist(p, q)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Median over states of the distance to the nearest other state.
pub fn median_nn_distance(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(invalid("need at least 2 states"));
    }
    Ok(median(nn_distances(&points.iter().collect::<Vec<_>>())))
}

/// Like [`median_nn_distance`], but neighbours are searched only within each
/// state's own group, so identical cells of different mazes (which a good
/// encoder maps to the same z^c) do not shrink the scale to zero.
pub fn grouped_median_nn_distance(points: &[Vec<f64>], groups: &[usize]) -> Result<f64> {
    if points.len() != groups.len() {
        return Err(invalid("one group per point required"));
    }
    let mut ids = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut all = Vec::new();
    for g in ids {
        let members: Vec<&Vec<f64>> = points.iter().zip(groups).filter(|(_, h)| **h == g).map(|(p, _)| p).collect();
        if members.len() >= 2 {
            all.extend(nn_distances(&members));
        }
    }
    if all.is_empty() {
        return Err(invalid("need a group with at least 2 states"));
    }
    Ok(median(all))
}

/// Fraction of `(predicted, actual)` pairs whose distance, in units of the
/// median nearest-neighbour distance among `reference`, is at most `threshold`.
pub fn transition_consistency(
    predicted: &[Vec<f64>],
    actual: &[Vec<f64>],
    reference: &[Vec<f64>],
    threshold: f64,
) -> Result<f64> {
    consistency_at_scale(predicted, actual, median_nn_distance(reference)?, threshold)
}

fn consistency_at_scale(predicted: &[Vec<f64>], actual: &[Vec<f64>], scale: f64, threshold: f64) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(invalid("need matching, non-empty prediction and target sets"));
    }
    let ok = predicted
        .iter()
        .zip(actual)
        .filter(|(p, a)| {
            let err = libm::sqrt(sq_dist(p, a));
            err == 0.0 || (scale > 0.0 && err / scale <= threshold)
        })
        .count();
    Ok(ok as f64 / predicted.len() as f64)
}

/// Transition consistency over every (state, action) pair of a dump, scaled
/// by the within-group median nearest-neighbour distance.
pub fn dump_transition_consistency(dump: &LatentDump, threshold: f64) -> Result<f64> {
    let mut pred = Vec::new();
    let mut actual = Vec::new();
    for r in &dump.rows {
        if r.predicted.is_empty() {
            return Err(invalid("dump has no T_c predictions"));
        }
        for (p, a) in r.predicted.iter().zip(&r.next_zc) {
            pred.push(p.iter().map(|v| *v as f64).collect());
            actual.push(a.iter().map(|v| *v as f64).collect());
        }
    }
    let scale = grouped_median_nn_distance(&dump.zc(), &dump.groups())?;
    consistency_at_scale(&pred, &actual, scale, threshold)
}

/// Population standard deviation of every column.
pub fn column_std(rows: &[Vec<f64>]) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|c| {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            libm::sqrt(rows.iter().map(|r| (r[c] - mean) * (r[c] - mean)).sum::<f64>() / n)
        })
        .collect()
}
