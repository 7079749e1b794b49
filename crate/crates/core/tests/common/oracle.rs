//! Central-difference gradient oracle and gradient-routing audit, shared by
//! the integration tests and the acceptance harness.

use ctrlsplit_core::envs::EnvKind;
use ctrlsplit_core::losses::{
    contrastive_latent, loss_adv, loss_c, loss_h, loss_inv, loss_q, loss_u, GradientRouting,
};
use ctrlsplit_core::nets::{encode, head_forward, init_params, EncoderConfig, HeadKind, Latent, Model};
use ctrlsplit_core::replay::{cross_episode_negatives, shift_negatives, subsample_zu, ZU_MAP_LEN};
use ctrlsplit_core::rng::{stream, Rng, Stream};
use ctrlsplit_core::{Frozen, Graph, NodeId, ParamSet, Result, Tensor};
use rand::Rng as _;
use std::rc::Rc;

pub const TOLERANCE: f64 = 1e-4;
const STEPS: [f64; 2] = [1e-6, 1e-5];
/// Relative error denominators never drop below this, so gradients at
/// round-off scale are compared absolutely.
const FLOOR: f64 = 1e-6;

pub type Build<'a> = dyn Fn(&mut Graph<'_, f64>) -> Result<NodeId> + 'a;
type Shared = Rc<Build<'static>>;
type MakeCase<'a> = dyn Fn(&mut Rng) -> (ParamSet<f64>, Shared, Shared) + 'a;
type MakePlain = Box<dyn Fn(&mut Rng) -> (ParamSet<f64>, Shared)>;
type CheckedCase = (ParamSet<f64>, Shared, Shared, Vec<(&'static str, f64)>);

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    pub worst: f64,
    pub seconds: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

fn loss_at(params: &ParamSet<f64>, build: &Build) -> f64 {
    let mut g = Graph::new(params, Frozen::none());
    let l = build(&mut g).expect("forward");
    g.value(l).item()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// A coordinate to check and the sign relating its routed gradient to the
/// finite difference of the oracle loss.
#[derive(Debug, Clone)]
pub struct Coord {
    pub name: String,
    pub index: usize,
    pub sign: f64,
}

/// Worst relative error between the analytic gradient of `analytic` and the
/// signed central difference of `oracle` (`analytic` itself when routing is
/// an identity). A coordinate passes at the first step size that agrees,
/// so an isolated ReLU kink inside `±h` cannot fail a correct gradient.
pub fn check(params: &ParamSet<f64>, analytic: &Build, oracle: &Build, coords: &[Coord]) -> f64 {
    let grads = {
        let mut g = Graph::new(params, Frozen::none());
        let l = analytic(&mut g).expect("forward");
        g.backward(l).expect("backward").params
    };
    let mut worst: f64 = 0.0;
    for c in coords {
        let a = grads.get(&c.name).ok().map(|t| t.data()[c.index]).unwrap_or(0.0);
        let mut best = f64::INFINITY;
        for h in STEPS {
            let mut p = params.clone();
            p.get_mut(&c.name).unwrap().data_mut()[c.index] += h;
            let up = loss_at(&p, oracle);
            p.get_mut(&c.name).unwrap().data_mut()[c.index] -= 2.0 * h;
            let down = loss_at(&p, oracle);
            let fd = c.sign * (up - down) / (2.0 * h);
            best = best.min(rel(a, fd));
            if best <= TOLERANCE {
                break;
            }
        }
        worst = worst.max(best);
    }
    worst
}

fn tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (kinks of relu / |·|).
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn all_coords(params: &ParamSet<f64>) -> Vec<Coord> {
    params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| Coord { name: n.clone(), index: i, sign: 1.0 }))
        .collect()
}

fn sample_coords(rng: &mut Rng, params: &ParamSet<f64>, network: &str, k: usize, sign: f64) -> Vec<Coord> {
    let tensors: Vec<(&String, usize)> =
        params.iter().filter(|(n, _)| n.split('.').next() == Some(network)).map(|(n, t)| (n, t.len())).collect();
    let total: usize = tensors.iter().map(|(_, len)| len).sum();
    (0..k)
        .map(|_| {
            // uniform over every coordinate of the network
            let mut index = rng.gen_range(0..total);
            let mut pick = 0;
            while index >= tensors[pick].1 {
                index -= tensors[pick].1;
                pick += 1;
            }
            Coord { name: tensors[pick].0.clone(), index, sign }
        })
        .collect()
}

fn p(g: &mut Graph<'_, f64>, name: &str) -> Result<NodeId> {
    g.param(name)
}

type PrimitiveCase = fn(&mut Rng) -> (ParamSet<f64>, Shared, Shared);

fn unary(make: fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>, kinked: bool) -> impl Fn(&mut Rng) -> (ParamSet<f64>, Shared) {
    move |rng: &mut Rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
        let mut ps = ParamSet::new();
        ps.insert("p.x", if kinked { away_from_zero(rng, &shape) } else { tensor(rng, &shape, -2.0, 2.0) });
        // shape-reducing ops use a prefix of the target
        let target = tensor(rng, &shape, -1.0, 1.0).into_data();
        let build: Shared = Rc::new(move |g| {
            let x = p(g, "p.x")?;
            let y = make(g, x)?;
            let out = g.shape(y).to_vec();
            let n = out.iter().product();
            let t = g.input(Tensor::new(out, target[..n].to_vec())?)?;
            g.mse(y, t)
        });
        (ps, build)
    }
}

fn run_primitive(name: &str, cases: usize, seed: u64, make: &MakeCase, sign: f64) -> Outcome {
    let start = std::time::Instant::now();
    let mut rng = stream(seed, Stream::Probe);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..cases {
        let (ps, analytic, oracle) = make(&mut rng);
        let mut cs = all_coords(&ps);
        for c in &mut cs {
            c.sign = sign;
        }
        coords += cs.len();
        worst = worst.max(check(&ps, &*analytic, &*oracle, &cs));
    }
    Outcome { name: name.to_string(), cases, coordinates: coords, worst, seconds: start.elapsed().as_secs_f64() }
}

/// Every graph primitive, `cases` randomized instances each.
pub fn primitive_suite(cases: usize, seed: u64) -> Vec<Outcome> {
    let mut out = Vec::new();
    let plain: Vec<(&str, MakePlain)> = vec![
        ("relu", Box::new(unary(|g, x| g.relu(x), true))),
        ("tanh", Box::new(unary(|g, x| g.tanh(x), false))),
        ("sigmoid", Box::new(unary(|g, x| g.sigmoid(x), false))),
        ("exp", Box::new(unary(|g, x| g.exp(x), false))),
        ("scale", Box::new(unary(|g, x| g.scale(x, -1.75), false))),
        ("row_norm", Box::new(unary(|g, x| {
            let n = g.row_norm(x)?;
            let len = g.shape(n)[0];
            g.reshape(n, &[1, len])
        }, true))),
        ("mean", Box::new(unary(|g, x| {
            let e = g.exp(x)?;
            let m = g.mean(e)?;
            g.reshape(m, &[1, 1])
        }, false))),
        ("linear", Box::new(|rng: &mut Rng| {
            let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, i], -1.0, 1.0));
            ps.insert("p.w", tensor(rng, &[o, i], -1.0, 1.0));
            ps.insert("p.b", tensor(rng, &[o], -1.0, 1.0));
            let t = tensor(rng, &[b, o], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let (x, w, bb) = (p(g, "p.x")?, p(g, "p.w")?, p(g, "p.b")?);
                let y = g.linear(x, w, bb)?;
                let t = g.input(t.clone())?;
                g.mse(y, t)
            });
            (ps, build)
        })),
        ("conv2d", Box::new(|rng: &mut Rng| {
            let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4));
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let (h, w) = (rng.gen_range(k..k + 5), rng.gen_range(k..k + 5));
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, c, h, w], -1.0, 1.0));
            ps.insert("p.w", tensor(rng, &[o, c, k, k], -1.0, 1.0));
            ps.insert("p.b", tensor(rng, &[o], -1.0, 1.0));
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let t = tensor(rng, &[b, o, oh, ow], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let (x, wt, bb) = (p(g, "p.x")?, p(g, "p.w")?, p(g, "p.b")?);
                let y = g.conv2d(x, wt, bb, stride)?;
                let t = g.input(t.clone())?;
                g.mse(y, t)
            });
            (ps, build)
        })),
        ("adaptive_avg_pool", Box::new(|rng: &mut Rng| {
            let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
            let (oh, ow) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, c, h, w], -1.0, 1.0));
            let t = tensor(rng, &[b, c, oh, ow], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let x = p(g, "p.x")?;
                let y = g.adaptive_avg_pool(x, oh, ow)?;
                let t = g.input(t.clone())?;
                g.mse(y, t)
            });
            (ps, build)
        })),
        ("channel_mean+flatten", Box::new(|rng: &mut Rng| {
            let (b, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, c, h, w], -1.0, 1.0));
            let t = tensor(rng, &[b, h * w], -1.0, 1.0);
            let t2 = tensor(rng, &[b, c * h * w], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let x = p(g, "p.x")?;
                let m = g.channel_mean(x)?;
                let t = g.input(t.clone())?;
                let a = g.mse(m, t)?;
                let f = g.flatten(x)?;
                let t2 = g.input(t2.clone())?;
                let bb = g.mse(f, t2)?;
                g.add(a, bb)
            });
            (ps, build)
        })),
        ("concat+sub+add", Box::new(|rng: &mut Rng| {
            let (b, i, j) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, i], -1.0, 1.0));
            ps.insert("p.y", tensor(rng, &[b, j], -1.0, 1.0));
            ps.insert("p.z", tensor(rng, &[b, i + j], -1.0, 1.0));
            let t = tensor(rng, &[b, i + j], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let (x, y, z) = (p(g, "p.x")?, p(g, "p.y")?, p(g, "p.z")?);
                let c = g.concat(&[x, y])?;
                let d = g.sub(c, z)?;
                let e = g.add(d, c)?;
                let t = g.input(t.clone())?;
                g.mse(e, t)
            });
            (ps, build)
        })),
        ("select_cols+gather_rows", Box::new(|rng: &mut Rng| {
            let (b, w) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let cols: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..w)).collect();
            let rows: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..b)).collect();
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, w], -1.0, 1.0));
            let t = tensor(rng, &[rows.len(), cols.len()], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let x = p(g, "p.x")?;
                let s = g.select_cols(x, &cols)?;
                let r = g.gather_rows(s, &rows)?;
                let t = g.input(t.clone())?;
                g.mse(r, t)
            });
            (ps, build)
        })),
        ("pick_per_row", Box::new(|rng: &mut Rng| {
            let (b, w) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..w)).collect();
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, w], -1.0, 1.0));
            let t = tensor(rng, &[b], -1.0, 1.0);
            let build: Shared = Rc::new(move |g| {
                let x = p(g, "p.x")?;
                let s = g.pick_per_row(x, &idx)?;
                let t = g.input(t.clone())?;
                g.mse(s, t)
            });
            (ps, build)
        })),
        ("mse", Box::new(|rng: &mut Rng| {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &shape, -1.0, 1.0));
            ps.insert("p.y", tensor(rng, &shape, -1.0, 1.0));
            let build: Shared = Rc::new(|g| {
                let (x, y) = (p(g, "p.x")?, p(g, "p.y")?);
                g.mse(x, y)
            });
            (ps, build)
        })),
        ("softmax_xent", Box::new(|rng: &mut Rng| {
            let (b, a) = (rng.gen_range(1..5), rng.gen_range(2..6));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..a)).collect();
            let mut ps = ParamSet::new();
            ps.insert("p.x", tensor(rng, &[b, a], -3.0, 3.0));
            let build: Shared = Rc::new(move |g| {
                let x = p(g, "p.x")?;
                g.softmax_xent(x, &labels)
            });
            (ps, build)
        })),
    ];
    for (i, (name, make)) in plain.iter().enumerate() {
        let both = |r: &mut Rng| {
            let (ps, b) = make(r);
            (ps, b.clone(), b)
        };
        out.push(run_primitive(name, cases, seed + i as u64, &both, 1.0));
    }

    // detach: the oracle treats the detached operand as a constant
    let detach: PrimitiveCase = |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let mut ps = ParamSet::new();
        let x0 = tensor(rng, &shape, -1.0, 1.0);
        ps.insert("p.x", x0.clone());
        let (t1, t2) = (tensor(rng, &shape, -1.0, 1.0), tensor(rng, &shape, -1.0, 1.0));
        let (t1b, t2b) = (t1.clone(), t2.clone());
        let analytic: Shared = Rc::new(move |g| {
            let x = p(g, "p.x")?;
            let d = g.detach(x)?;
            let e = g.exp(d)?;
            let y = g.add(e, x)?;
            let t = g.input(t1.clone())?;
            let a = g.mse(y, t)?;
            let t = g.input(t2.clone())?;
            let b = g.mse(d, t)?;
            g.add(a, b)
        });
        let oracle: Shared = Rc::new(move |g| {
            let x = p(g, "p.x")?;
            let c = g.input(x0.clone())?;
            let e = g.exp(c)?;
            let y = g.add(e, x)?;
            let t = g.input(t1b.clone())?;
            let a = g.mse(y, t)?;
            let t = g.input(t2b.clone())?;
            let b = g.mse(c, t)?;
            g.add(a, b)
        });
        (ps, analytic, oracle)
    };
    out.push(run_primitive("detach", cases, seed + 100, &detach, 1.0));

    // gradient reversal: the analytic gradient is the negated difference
    let reverse: PrimitiveCase = |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let mut ps = ParamSet::new();
        ps.insert("p.x", tensor(rng, &shape, -1.0, 1.0));
        let t = tensor(rng, &shape, -1.0, 1.0);
        let tb = t.clone();
        let analytic: Shared = Rc::new(move |g| {
            let x = p(g, "p.x")?;
            let r = g.reverse_gradient(x)?;
            let y = g.tanh(r)?;
            let t = g.input(t.clone())?;
            g.mse(y, t)
        });
        let oracle: Shared = Rc::new(move |g| {
            let x = p(g, "p.x")?;
            let y = g.tanh(x)?;
            let t = g.input(tb.clone())?;
            g.mse(y, t)
        });
        (ps, analytic, oracle)
    };
    out.push(run_primitive("reverse_gradient", cases, seed + 101, &reverse, -1.0));
    out
}

/// Randomized model parameters (no zero-initialized layers) in f64.
fn model_params(model: &Model, rng: &mut Rng) -> ParamSet<f64> {
    let mut ps = init_params(model, rng.gen()).cast::<f64>();
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        for v in ps.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    ps
}

fn observations(rng: &mut Rng, b: usize, px: usize) -> Tensor<f64> {
    tensor(rng, &[b, 1, px, px], 0.0, 1.0)
}

/// Latent values `(z^c, z^u)` of `obs` under `params`.
fn latent_values(params: &ParamSet<f64>, cfg: &EncoderConfig, obs: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut h = Graph::new(params, Frozen::none());
    let x = h.input(obs.clone()).expect("input");
    let z = encode(&mut h, cfg, x).expect("encode");
    (h.value(z.zc).clone(), h.value(z.zu).clone())
}

fn constant_latent(g: &mut Graph<'_, f64>, values: &(Tensor<f64>, Tensor<f64>)) -> Result<Latent> {
    Ok(Latent { zc: g.input(values.0.clone())?, zu: g.input(values.1.clone())? })
}

const BATCH: usize = 2;
const COORDS_PER_NETWORK: usize = 2;

struct LossCase {
    model: Model,
    params: ParamSet<f64>,
    obs: Tensor<f64>,
    next: Tensor<f64>,
    actions: Vec<usize>,
}

fn loss_case(rng: &mut Rng, env: EnvKind, heads: &[HeadKind]) -> LossCase {
    let cfg = EncoderConfig::for_env(env, 2).unwrap();
    let model = Model::new(cfg, heads);
    let params = model_params(&model, rng);
    let px = cfg.pixels();
    let obs = observations(rng, BATCH, px);
    let next = observations(rng, BATCH, px);
    let actions = (0..BATCH).map(|_| rng.gen_range(0..model.n_actions)).collect();
    LossCase { model, params, obs, next, actions }
}

fn run_loss(
    name: &str,
    cases: usize,
    seed: u64,
    per_case: &dyn Fn(&mut Rng) -> CheckedCase,
) -> Outcome {
    let start = std::time::Instant::now();
    let mut rng = stream(seed, Stream::Probe);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..cases {
        let (ps, analytic, oracle, nets) = per_case(&mut rng);
        let cs: Vec<Coord> = nets.iter().flat_map(|(net, sign)| sample_coords(&mut rng, &ps, net, COORDS_PER_NETWORK, *sign)).collect();
        coords += cs.len();
        worst = worst.max(check(&ps, &*analytic, &*oracle, &cs));
    }
    Outcome { name: name.to_string(), cases, coordinates: coords, worst, seconds: start.elapsed().as_secs_f64() }
}

/// L_c, L_u, L_H1, L_H2, L_adv (through the reversal), L_inv and L_Q through
/// the full encoder, `cases` randomized instances each.
pub fn loss_suite(cases: usize, seed: u64) -> Vec<Outcome> {
    let mut out = Vec::new();

    // L_c under default routing: the oracle holds every time-t latent fixed.
    out.push(run_loss("L_c (default routing)", cases, seed, &|rng| {
        let c = loss_case(rng, EnvKind::QuadMaze, &[HeadKind::Tc]);
        let routing = GradientRouting::default();
        let (m1, o1, n1, a1) = (c.model.clone(), c.obs.clone(), c.next.clone(), c.actions.clone());
        let analytic: Shared = Rc::new(move |g| {
            let xt = g.input(o1.clone())?;
            let xn = g.input(n1.clone())?;
            let zt = encode(g, &m1.encoder, xt)?;
            let zn = encode(g, &m1.encoder, xn)?;
            loss_c(g, &m1, &routing, zt, zn, &a1)
        });
        let fixed = latent_values(&c.params, &c.model.encoder, &c.obs);
        let (m2, n2, a2) = (c.model, c.next, c.actions);
        let oracle: Shared = Rc::new(move |g| {
            let zt = constant_latent(g, &fixed)?;
            let xn = g.input(n2.clone())?;
            let zn = encode(g, &m2.encoder, xn)?;
            loss_c(g, &m2, &routing, zt, zn, &a2)
        });
        (c.params, analytic, oracle, vec![("enc", 1.0), ("tc", 1.0)])
    }));

    // L_c with every detach disabled: the plain derivative.
    out.push(run_loss("L_c (no detach)", cases, seed + 1, &|rng| {
        let c = loss_case(rng, EnvKind::QuadMaze, &[HeadKind::Tc]);
        let routing = GradientRouting { detach_zu_in_tc: false, detach_zc_in_lc: false, residual: true, detach_targets: false };
        let (m, o, n, a) = (c.model, c.obs, c.next, c.actions);
        let build = move |g: &mut Graph<'_, f64>| {
            let xt = g.input(o.clone())?;
            let xn = g.input(n.clone())?;
            let zt = encode(g, &m.encoder, xt)?;
            let zn = encode(g, &m.encoder, xn)?;
            loss_c(g, &m, &routing, zt, zn, &a)
        };
        let b2 = build.clone();
        (c.params, Rc::new(build), Rc::new(b2), vec![("enc", 1.0), ("tc", 1.0)])
    }));

    out.push(run_loss("L_u", cases, seed + 2, &|rng| {
        let c = loss_case(rng, EnvKind::RandomMaze, &[HeadKind::Tu]);
        let routing = GradientRouting::default();
        let (m, o, n) = (c.model, c.obs, c.next);
        let build = move |g: &mut Graph<'_, f64>| {
            let xt = g.input(o.clone())?;
            let xn = g.input(n.clone())?;
            let zt = encode(g, &m.encoder, xt)?;
            let zn = encode(g, &m.encoder, xn)?;
            loss_u(g, &m, &routing, zt, zn)
        };
        let b2 = build.clone();
        (c.params, Rc::new(build), Rc::new(b2), vec![("enc", 1.0), ("tu", 1.0)])
    }));

    out.push(run_loss("L_H1", cases, seed + 3, &|rng| {
        let c = loss_case(rng, EnvKind::RandomMaze, &[]);
        let negatives = shift_negatives(BATCH, rng).unwrap();
        let subset = subsample_zu(ZU_MAP_LEN, rng).unwrap();
        let c_d = rng.gen_range(1.0..15.0);
        let (m, o) = (c.model, c.obs);
        let build = move |g: &mut Graph<'_, f64>| {
            let xt = g.input(o.clone())?;
            let zt = encode(g, &m.encoder, xt)?;
            let z = contrastive_latent(g, &m, zt, Some(&subset))?;
            loss_h(g, z, &negatives, c_d)
        };
        let b2 = build.clone();
        (c.params, Rc::new(build), Rc::new(b2), vec![("enc", 1.0)])
    }));

    out.push(run_loss("L_H2", cases, seed + 4, &|rng| {
        let c = loss_case(rng, EnvKind::RandomMaze, &[]);
        let episodes: Vec<u32> = (0..BATCH as u32).collect();
        let negatives = cross_episode_negatives(&episodes, rng).unwrap();
        let c_d = rng.gen_range(1.0..15.0);
        let (m, o) = (c.model, c.obs);
        let build = move |g: &mut Graph<'_, f64>| {
            let xt = g.input(o.clone())?;
            let zt = encode(g, &m.encoder, xt)?;
            loss_h(g, zt.zc, &negatives, c_d)
        };
        let b2 = build.clone();
        (c.params, Rc::new(build), Rc::new(b2), vec![("enc", 1.0)])
    }));

    // L_adv: T_adv descends the loss, the encoder receives its negation.
    out.push(run_loss("L_adv (reversed)", cases, seed + 5, &|rng| {
        let c = loss_case(rng, EnvKind::Catcher, &[HeadKind::Tadv]);
        let (m1, o1) = (c.model.clone(), c.obs.clone());
        let analytic: Shared = Rc::new(move |g| {
            let xt = g.input(o1.clone())?;
            let zt = encode(g, &m1.encoder, xt)?;
            loss_adv(g, &m1, zt)
        });
        let fixed = latent_values(&c.params, &c.model.encoder, &c.obs);
        let (m2, o2) = (c.model, c.obs);
        let oracle: Shared = Rc::new(move |g| {
            let target = g.input(fixed.1.clone())?;
            let xt = g.input(o2.clone())?;
            let zt = encode(g, &m2.encoder, xt)?;
            let pred = head_forward(g, m2.head(HeadKind::Tadv)?, zt.zc)?;
            g.mse(pred, target)
        });
        (c.params, analytic, oracle, vec![("enc", -1.0), ("tadv", 1.0)])
    }));

    out.push(run_loss("L_inv", cases, seed + 6, &|rng| {
        let c = loss_case(rng, EnvKind::QuadMaze, &[HeadKind::Inverse]);
        let (m, o, n, a) = (c.model, c.obs, c.next, c.actions);
        let build = move |g: &mut Graph<'_, f64>| {
            let xt = g.input(o.clone())?;
            let xn = g.input(n.clone())?;
            let zt = encode(g, &m.encoder, xt)?;
            let zn = encode(g, &m.encoder, xn)?;
            loss_inv(g, &m, zt, zn, &a)
        };
        let b2 = build.clone();
        (c.params, Rc::new(build), Rc::new(b2), vec![("enc", 1.0), ("inv", 1.0)])
    }));

    out.push(run_loss("L_Q", cases, seed + 7, &|rng| {
        let c = loss_case(rng, EnvKind::QuadMaze, &[HeadKind::Q]);
        let targets: Vec<f64> = (0..BATCH).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, o, a) = (c.model, c.obs, c.actions);
        let build = move |g: &mut Graph<'_, f64>| {
            let xt = g.input(o.clone())?;
            let zt = encode(g, &m.encoder, xt)?;
            let z = g.concat(&[zt.zc, zt.zu])?;
            loss_q(g, &m, z, &a, &targets)
        };
        let b2 = build.clone();
        (c.params, Rc::new(build), Rc::new(b2), vec![("enc", 1.0), ("q", 1.0)])
    }));
    out
}

fn all_zero(v: Option<&[f64]>) -> bool {
    v.is_none_or(|g| g.iter().all(|x| *x == 0.0))
}

/// Exact routing checks; each returns a description of the first violation.
pub fn routing_audit(seed: u64) -> core::result::Result<usize, String> {
    let mut rng = stream(seed, Stream::Probe);
    let mut checks = 0;
    for env in [EnvKind::QuadMaze, EnvKind::RandomMaze, EnvKind::Catcher] {
        let c = loss_case(&mut rng, env, &[HeadKind::Tc, HeadKind::Tadv]);
        let routing = GradientRouting::default();

        // every time-t latent and every z^u of L_c receive exactly zero gradient
        let mut g = Graph::new(&c.params, Frozen::none());
        let xt = g.input(c.obs.clone()).unwrap();
        let xn = g.input(c.next.clone()).unwrap();
        let zt = encode(&mut g, &c.model.encoder, xt).unwrap();
        let zn = encode(&mut g, &c.model.encoder, xn).unwrap();
        let l = loss_c(&mut g, &c.model, &routing, zt, zn, &c.actions).unwrap();
        let grads = g.backward(l).unwrap();
        for (what, node) in [("z^c_t", zt.zc), ("z^u_t", zt.zu), ("z^u_t+1", zn.zu)] {
            if !all_zero(grads.node(node)) {
                return Err(format!("{}: L_c sends gradient into {}", env.name(), what));
            }
            checks += 1;
        }
        // the encoder gradient is exactly the one through z^c_{t+1} alone
        let mut h = Graph::new(&c.params, Frozen::none());
        let fixed = constant_latent(&mut h, &latent_values(&c.params, &c.model.encoder, &c.obs)).unwrap();
        let xn2 = h.input(c.next.clone()).unwrap();
        let zn2 = encode(&mut h, &c.model.encoder, xn2).unwrap();
        let l2 = loss_c(&mut h, &c.model, &routing, fixed, zn2, &c.actions).unwrap();
        let only_next = h.backward(l2).unwrap().params;
        for (name, t) in grads.params.iter().filter(|(n, _)| n.starts_with("enc.")) {
            if t.data() != only_next.get(name).unwrap().data() {
                return Err(format!("{}: {} gradient differs from the z^c_t+1-only path", env.name(), name));
            }
            checks += 1;
        }
        // the audit is not vacuous: without detaches time-t gradient flows
        let open = GradientRouting { detach_zu_in_tc: false, detach_zc_in_lc: false, ..routing };
        let mut g = Graph::new(&c.params, Frozen::none());
        let xt = g.input(c.obs.clone()).unwrap();
        let xn = g.input(c.next.clone()).unwrap();
        let zt = encode(&mut g, &c.model.encoder, xt).unwrap();
        let zn = encode(&mut g, &c.model.encoder, xn).unwrap();
        let l = loss_c(&mut g, &c.model, &open, zt, zn, &c.actions).unwrap();
        if all_zero(g.backward(l).unwrap().node(zt.zc)) {
            return Err(format!("{}: ablation routing should reach z^c_t", env.name()));
        }
        checks += 1;

        // adversarial: encoder gradient is exactly negated (±0 compare equal), T_adv's is unchanged
        let adv = |reverse: bool| {
            let mut g = Graph::new(&c.params, Frozen::none());
            let xt = g.input(c.obs.clone()).unwrap();
            let zt = encode(&mut g, &c.model.encoder, xt).unwrap();
            let l = if reverse {
                loss_adv(&mut g, &c.model, zt).unwrap()
            } else {
                let pred = head_forward(&mut g, c.model.head(HeadKind::Tadv).unwrap(), zt.zc).unwrap();
                let target = g.detach(zt.zu).unwrap();
                g.mse(pred, target).unwrap()
            };
            g.backward(l).unwrap().params
        };
        let (rev, plain) = (adv(true), adv(false));
        for (name, t) in rev.iter() {
            let other = plain.get(name).unwrap().data();
            let ok = if name.starts_with("enc.") {
                t.data().iter().zip(other).all(|(a, b)| *a == -*b)
            } else {
                t.data().iter().zip(other).all(|(a, b)| a == b)
            };
            if !ok {
                return Err(format!("{}: adversarial gradient of {} is not the exact (negated) one", env.name(), name));
            }
            checks += 1;
        }
        if rev.iter().filter(|(n, _)| n.starts_with("enc.")).all(|(_, t)| t.data().iter().all(|v| *v == 0.0)) {
            return Err(format!("{}: adversarial loss sent no gradient to the encoder", env.name()));
        }
    }
    Ok(checks)
}
