//! Planner against explicit tree enumeration with a hand-written MLP.

use ctrlsplit_core::envs::EnvKind;
use ctrlsplit_core::nets::{init_params, EncoderConfig, HeadKind, HeadSpec, Model, ZuKind};
use ctrlsplit_core::planner::{argmax, Planner};
use ctrlsplit_core::rng::{stream, Rng, Stream};
use ctrlsplit_core::ParamSet;
use rand::Rng as _;

pub const TOLERANCE: f64 = 1e-6;
const N_C: usize = 2;
const N_U: usize = 3;

/// Planning heads with random weights everywhere (live T_c output layer).
pub fn toy(seed: u64, n_actions: usize) -> (Model, ParamSet<f64>) {
    let cfg = EncoderConfig::for_env(EnvKind::RandomMaze, N_C).unwrap();
    let mut model = Model::new(EncoderConfig { zu: ZuKind::Vector(N_U), ..cfg }, &[]);
    model.n_actions = n_actions;
    let z = N_C + N_U;
    for (kind, input, output) in [
        (HeadKind::Tc, z + n_actions, N_C),
        (HeadKind::Q, z, n_actions),
        (HeadKind::Reward, z + n_actions, 1),
        (HeadKind::Discount, z + n_actions, 1),
    ] {
        model.heads.insert(kind, HeadSpec { kind, input, widths: vec![6, 5], output });
    }
    let mut ps = init_params(&model, seed).cast::<f64>();
    ps.remove_network("enc");
    let mut rng = stream(seed, Stream::Probe);
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        for v in ps.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    (model, ps)
}

/// `tanh` hidden layers, linear output, sigmoid for the discount head.
fn mlp(ps: &ParamSet<f64>, spec: &HeadSpec, x: &[f64]) -> Vec<f64> {
    let net = spec.kind.network();
    let layers = spec.widths.len() + 1;
    let mut h = x.to_vec();
    for l in 0..layers {
        let w = ps.get(&format!("{}.l{}.w", net, l)).unwrap();
        let b = ps.get(&format!("{}.l{}.b", net, l)).unwrap();
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        h = (0..out)
            .map(|o| {
                let s: f64 = (0..inp).map(|i| w.data()[o * inp + i] * h[i]).sum::<f64>() + b.data()[o];
                if l + 1 < layers {
                    s.tanh()
                } else {
                    s
                }
            })
            .collect();
    }
    if spec.kind == HeadKind::Discount {
        h = h.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    }
    h
}

fn with_action(zc: &[f64], zu: &[f64], a: Option<(usize, usize)>) -> Vec<f64> {
    let mut x = [zc, zu].concat();
    if let Some((a, n)) = a {
        x.extend((0..n).map(|i| if i == a { 1.0 } else { 0.0 }));
    }
    x
}

/// `q_hat(z, a, D)` for every root action by materializing all `|A|^D`
/// action sequences below each root action and backing values up level by level.
pub fn enumerate(model: &Model, ps: &ParamSet<f64>, zc: &[f64], zu: &[f64], depth: usize) -> Vec<f64> {
    let n = model.n_actions;
    let head = |k| model.head(k).unwrap();
    if depth == 0 {
        return mlp(ps, head(HeadKind::Q), &with_action(zc, zu, None));
    }
    // levels[d][i]: z^c after the action sequence whose base-n digits are i (d actions)
    let mut levels: Vec<Vec<Vec<f64>>> = vec![vec![zc.to_vec()]];
    let mut edges: Vec<Vec<(f64, f64)>> = Vec::new();
    for _ in 0..depth {
        let parents = levels.last().unwrap();
        let mut children = Vec::with_capacity(parents.len() * n);
        let mut pg = Vec::with_capacity(parents.len() * n);
        for z in parents {
            for a in 0..n {
                let x = with_action(z, zu, Some((a, n)));
                let delta = mlp(ps, head(HeadKind::Tc), &x);
                children.push(z.iter().zip(&delta).map(|(p, d)| p + d).collect());
                pg.push((mlp(ps, head(HeadKind::Reward), &x)[0], mlp(ps, head(HeadKind::Discount), &x)[0]));
            }
        }
        levels.push(children);
        edges.push(pg);
    }
    // leaves take max_a Q; each edge adds P + Γ·max(child)
    let mut value: Vec<f64> = levels[depth]
        .iter()
        .map(|z| mlp(ps, head(HeadKind::Q), &with_action(z, zu, None)).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    for d in (0..depth).rev() {
        let edge_values: Vec<f64> = edges[d].iter().zip(&value).map(|((p, g), v)| p + g * v).collect();
        if d == 0 {
            return edge_values;
        }
        value = edge_values.chunks(n).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    }
    unreachable!("depth >= 1 returns inside the loop")
}

fn latent(rng: &mut Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Worst |q_hat − enumeration| over seeds, action counts and depths 1..=3.
pub fn tree_error(seed: u64, latents: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, n_actions) in [2usize, 4].into_iter().enumerate() {
        let (model, ps) = toy(seed + i as u64, n_actions);
        let pl = Planner::new(&model, &ps).unwrap();
        let mut rng = stream(seed + 10 + i as u64, Stream::Probe);
        for _ in 0..latents {
            let (zc, zu) = (latent(&mut rng, N_C), latent(&mut rng, N_U));
            for d in 1..=3 {
                let fast = pl.q_hat(std::slice::from_ref(&zc), &zu, d).unwrap();
                for (a, b) in fast.iter().zip(enumerate(&model, &ps, &zc, &zu, d)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    worst
}

/// Number of `cases` random latents where `plan_action(D=0)` differs from
/// the greedy action of the Q head, in f64 and in the f32 runtime precision.
pub fn depth_zero_mismatches(seed: u64, cases: usize) -> usize {
    let (model, ps) = toy(seed, 4);
    let ps32 = ps.cast::<f32>();
    let pl = Planner::new(&model, &ps).unwrap();
    let pl32 = Planner::new(&model, &ps32).unwrap();
    let mut rng = stream(seed + 99, Stream::Probe);
    let mut bad = 0;
    for _ in 0..cases {
        let (zc, zu) = (latent(&mut rng, N_C), latent(&mut rng, N_U));
        let greedy = argmax(pl.q_values(std::slice::from_ref(&zc), &zu).unwrap().data());
        let zc32: Vec<f32> = zc.iter().map(|v| *v as f32).collect();
        let zu32: Vec<f32> = zu.iter().map(|v| *v as f32).collect();
        let greedy32 = argmax(pl32.q_values(std::slice::from_ref(&zc32), &zu32).unwrap().data());
        let independent = argmax(&enumerate(&model, &ps, &zc, &zu, 0));
        if pl.plan_action(&zc, &zu, 0).unwrap() != greedy
            || pl32.plan_action(&zc32, &zu32, 0).unwrap() != greedy32
            || independent != greedy
        {
            bad += 1;
        }
    }
    bad
}
