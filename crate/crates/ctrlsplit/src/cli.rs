//! Command-line front end; every command also runs in-process for presets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use ctrlsplit_core::envs::{randmaze_generate, CatcherEnv, EnvKind, Environment, RandomMazeEnv};
use ctrlsplit_core::evalviz::LeakageConfig;
use ctrlsplit_core::nets::eval_encoder;
use ctrlsplit_core::planner::Planner;
use ctrlsplit_core::replay::{collect_quadmaze, collect_random, stack_observations};
use ctrlsplit_core::trainer::{evaluate_policy, Pretrainer, Refiner, RlMode, RlTrainer, TrainConfig};
use ctrlsplit_core::envs::QUAD_MAZE_COUNT;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_for, params_path, restore_state, save_params_only, save_state, STATE_FILE};
use crate::config::{parse_env, resolve, resolve_file, ConfigError, Resolved};
use crate::export::{append_probe, latents_csv, latents_svg, rollout_csv, write_text};
use crate::formats::{load_buffer, load_params, save_buffer};
use crate::manifest::{load_manifest, RunManifest, MANIFEST_FILE};
use crate::metrics::CsvSink;
use crate::presets::{default_seeds, plan, PRESETS};
use crate::probes::{self, maze_set, Selection};

#[derive(Debug, Parser)]
#[command(name = "ctrlsplit", version, about = "Controllable/uncontrollable latent learning from pixels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every run command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config; keys override the environment preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// quadmaze, catcher or randmaze.
    #[arg(long)]
    pub env: Option<String>,
    /// Controllable latent width.
    #[arg(long = "n-c")]
    pub n_c: Option<usize>,
    /// Config override, e.g. `--set loss.adversarial=false`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random-policy transitions into `buffer.ducf`.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Encoder and forward-model pretraining on a collected buffer.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Transitions from `collect`.
        #[arg(long)]
        buffer: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Further T_c training on latents of a frozen pretrained encoder.
    RefineDynamics {
        #[command(flatten)]
        common: Common,
        /// Pretrained run directory or `params.ducf`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Transitions from `collect`.
        #[arg(long)]
        buffer: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Online DDQN.
    TrainRl {
        #[command(flatten)]
        common: Common,
        /// frozen-pretrained, frozen-inverse-pretrained, end-to-end or frozen+planner.
        #[arg(long)]
        mode: String,
        /// Planning depth for frozen+planner.
        #[arg(long, default_value_t = 3)]
        plan_depth: usize,
        /// Pretrained encoder (all modes except end-to-end).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean return of the greedy policy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// RL run directory or `params.ducf`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the mode the policy was trained with.
        #[arg(long)]
        mode: Option<String>,
        /// Defaults to the depth the policy was trained with.
        #[arg(long)]
        plan_depth: Option<usize>,
        /// Greedy episodes to average.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// `latents.csv` and `latents.svg` over enumerated states.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        /// Run directory or `params.ducf` to encode with.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Random mazes to enumerate.
        #[arg(long, default_value_t = 1)]
        mazes: usize,
        /// Seed of the first random maze.
        #[arg(long, default_value_t = 0)]
        maze_seed: u64,
        /// Also plan from the first maze's start and write `rollout.csv`.
        #[arg(long)]
        rollout: bool,
        /// Depth of the exported rollout.
        #[arg(long, default_value_t = 3)]
        plan_depth: usize,
    },
    /// Appends disentanglement probe rows to `probes.csv`.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Run directory or `params.ducf` under test (never modified).
        #[arg(long)]
        checkpoint: PathBuf,
        /// purity, linear-r2, consistency, leakage or zc-std; comma-separated.
        #[arg(long)]
        metric: String,
        /// Random mazes to enumerate.
        #[arg(long, default_value_t = 20)]
        mazes: usize,
        /// Seed of the first random maze.
        #[arg(long, default_value_t = 0)]
        maze_seed: u64,
        /// Training budget of the leakage regressor.
        #[arg(long, default_value_t = 5000)]
        leakage_iterations: usize,
    },
    /// Prints a random maze as text.
    GenMaze {
        #[arg(long)]
        seed: u64,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a figure pipeline (fig1, fig3a, fig3b, fig4, fig5, fig6).
    Preset {
        name: String,
        /// Root; each step writes to `<out>/<name>/<seed>/<stage>/`.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; 5 for fig5, 1 otherwise.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Forwarded to every step.
        #[arg(long = "set", value_name = "KEY=JSON")]
        sets: Vec<String>,
        /// Print the plan without running it.
        #[arg(long)]
        dry_run: bool,
    },
}

/// Process exit code for an error: 2 config, 3 non-finite loss, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(ctrlsplit_core::Error::NonFinite { .. }) = cause.downcast_ref::<ctrlsplit_core::Error>() {
            return 3;
        }
    }
    1
}

impl Common {
    fn sets(&self) -> Vec<String> {
        let mut s = self.sets.clone();
        if let Some(n) = self.n_c {
            s.push(format!("n_c={}", n));
        }
        s
    }

    fn env_kind(&self) -> Result<Option<EnvKind>, ConfigError> {
        self.env.as_deref().map(parse_env).transpose()
    }

    fn resolve(&self) -> Result<Resolved> {
        Ok(resolve_file(self.config.as_deref(), self.env_kind()?, &self.sets(), self.seed)?)
    }

    /// Without `--config`/`--env`, the configuration of the run that wrote
    /// `checkpoint` (its manifest) is used.
    fn resolve_for(&self, checkpoint: &Path) -> Result<Resolved> {
        if self.config.is_some() || self.env.is_some() {
            return self.resolve();
        }
        let dir = params_path(checkpoint).parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(ConfigError(format!("missing env kind (no --env/--config and no {})", manifest.display())).into());
        }
        let text = serde_json::to_string(&load_manifest(&manifest)?.config)?;
        Ok(resolve(Some(&text), None, &self.sets(), self.seed)?)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn rl_env(env: EnvKind) -> Result<Box<dyn Environment>> {
    Ok(match env {
        EnvKind::Catcher => Box::new(CatcherEnv::new()),
        EnvKind::RandomMaze => Box::new(RandomMazeEnv::new()?),
        EnvKind::QuadMaze => bail!("the quad maze has no reward; RL needs catcher or randmaze"),
    })
}

/// Training chunks ending at every checkpoint boundary and at `total`.
fn boundaries(from: u64, total: u64, every: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if let Some(k) = from.checked_div(every) {
        let mut b = (k + 1) * every;
        while b < total {
            out.push(b);
            b += every;
        }
    }
    if from < total || out.is_empty() {
        out.push(total.max(from));
    }
    out
}

/// Sidecar describing an RL policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyInfo {
    pub mode: String,
    pub plan_depth: usize,
    pub iteration: u64,
    pub episodes: u64,
    pub trailing_return: Option<f64>,
}

pub const POLICY_FILE: &str = "policy.json";

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Collect { common } => {
            let r = common.resolve()?;
            let cfg = &r.config;
            let out = common.out_dir()?;
            RunManifest::new("collect", argv, cfg, &r.overrides).artifacts(&["buffer.ducf"]).write_once(out)?;
            let buffer = match cfg.env {
                EnvKind::QuadMaze => collect_quadmaze(cfg.collect_transitions / QUAD_MAZE_COUNT, cfg.seed)?,
                env => collect_random(rl_env(env)?.as_mut(), cfg.collect_transitions, cfg.seed)?,
            };
            save_buffer(&out.join("buffer.ducf"), &buffer)?;
            println!("collected {} {} transitions into {}", buffer.len(), cfg.env.name(), out.display());
        }
        Command::Pretrain { common, buffer, resume } => {
            let r = common.resolve()?;
            let cfg = &r.config;
            let out = common.out_dir()?;
            let data = load_buffer(&buffer)?;
            RunManifest::new("pretrain", argv, cfg, &r.overrides)
                .input("buffer", &buffer)
                .artifacts(&["metrics.csv", "params.ducf", "optim.ducf", STATE_FILE])
                .write_once(out)?;
            let mut p = Pretrainer::new(cfg, &data)?;
            let resumed = resume && out.join(STATE_FILE).exists();
            if resumed {
                restore_state(out, &mut p.state)?;
            }
            let mut sink = CsvSink::create(out, resumed.then_some(p.state.iteration))?;
            for until in boundaries(p.state.iteration, cfg.pretrain_iterations, cfg.checkpoint_every) {
                p.run_until(until, &mut sink)?;
                sink.flush()?;
                save_state(out, &p.state)?;
            }
            println!("pretrained {} iterations into {}", p.state.iteration, out.display());
        }
        Command::RefineDynamics { common, checkpoint, buffer, resume } => {
            let r = common.resolve_for(&checkpoint)?;
            let cfg = &r.config;
            let out = common.out_dir()?;
            let data = load_buffer(&buffer)?;
            RunManifest::new("refine-dynamics", argv, cfg, &r.overrides)
                .input("checkpoint", &params_path(&checkpoint))
                .input("buffer", &buffer)
                .artifacts(&["metrics.csv", "params.ducf", "optim.ducf", STATE_FILE])
                .write_once(out)?;
            let resumed = resume && out.join(STATE_FILE).exists();
            let start = if resumed { out.join("params.ducf") } else { params_path(&checkpoint) };
            let mut ref_ = Refiner::new(cfg, &data, load_params(&start)?)?;
            if resumed {
                restore_state(out, &mut ref_.state)?;
            }
            let mut sink = CsvSink::create(out, resumed.then_some(ref_.state.iteration))?;
            for until in boundaries(ref_.state.iteration, cfg.refine_iterations, cfg.checkpoint_every) {
                ref_.run_until(until, &mut sink)?;
                sink.flush()?;
                save_state(out, &ref_.state)?;
            }
            println!("refined T_c for {} iterations into {}", ref_.state.iteration, out.display());
        }
        Command::TrainRl { common, mode, plan_depth, checkpoint } => {
            let r = match &checkpoint {
                Some(c) => common.resolve_for(c)?,
                None => common.resolve()?,
            };
            let cfg = &r.config;
            let mode = RlMode::parse(&mode, plan_depth).map_err(|e| ConfigError(e.to_string()))?;
            let out = common.out_dir()?;
            let mut manifest = RunManifest::new("train-rl", argv, cfg, &r.overrides)
                .artifacts(&["metrics.csv", "returns.csv", "params.ducf", POLICY_FILE]);
            let pretrained = match &checkpoint {
                Some(c) => {
                    manifest = manifest.input("checkpoint", &params_path(c));
                    Some(load_params(&params_path(c))?)
                }
                None => None,
            };
            manifest.write_once(out)?;
            let mut t = RlTrainer::new(cfg, mode, pretrained, rl_env(cfg.env)?)?;
            let mut sink = CsvSink::create(out, None)?;
            for until in boundaries(0, cfg.rl_iterations, cfg.checkpoint_every) {
                t.run_until(until, &mut sink)?;
                sink.flush()?;
                save_params_only(out, &t.state.params)?;
                let info = PolicyInfo {
                    mode: mode.name().to_string(),
                    plan_depth,
                    iteration: t.state.iteration,
                    episodes: t.episodes,
                    trailing_return: t.trailing_return(),
                };
                write_text(&out.join(POLICY_FILE), &(serde_json::to_string_pretty(&info)? + "\n"))?;
            }
            match t.trailing_return() {
                Some(ret) => println!("{} after {} iterations: trailing mean return {}", mode.name(), t.state.iteration, ret),
                None => println!("{} after {} iterations: no finished episode", mode.name(), t.state.iteration),
            }
        }
        Command::Eval { common, checkpoint, mode, plan_depth, episodes } => {
            let r = common.resolve_for(&checkpoint)?;
            let cfg = &r.config;
            let params_file = params_path(&checkpoint);
            let info: Option<PolicyInfo> = params_file
                .parent()
                .map(|d| d.join(POLICY_FILE))
                .filter(|p| p.exists())
                .map(|p| -> Result<PolicyInfo> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) })
                .transpose()?;
            let mode_name = mode.or_else(|| info.as_ref().map(|i| i.mode.clone())).ok_or_else(|| {
                ConfigError("--mode is required for a checkpoint without policy.json".into())
            })?;
            let depth = plan_depth.or(info.as_ref().map(|i| i.plan_depth)).unwrap_or(3);
            let mode = RlMode::parse(&mode_name, depth).map_err(|e| ConfigError(e.to_string()))?;
            let params = load_params(&params_file)?;
            let model = model_for(cfg, &params)?;
            let mut env = rl_env(cfg.env)?;
            let mean = evaluate_policy(&model, &params, mode, env.as_mut(), episodes, cfg.seed)?;
            let out = common.out_dir()?;
            let path = out.join("eval.csv");
            let fresh = !path.exists();
            let mut text = if fresh { "checkpoint,mode,plan_depth,episodes,seed,mean_return\n".to_string() } else { fs::read_to_string(&path)? };
            text.push_str(&format!("{},{},{},{},{},{}\n", params_file.display(), mode.name(), depth, episodes, cfg.seed, mean));
            write_text(&path, &text)?;
            println!("{} (depth {}): mean return {} over {} episodes", mode.name(), depth, mean, episodes);
        }
        Command::ExportLatents { common, checkpoint, mazes, maze_seed, rollout, plan_depth } => {
            let r = common.resolve_for(&checkpoint)?;
            let cfg = &r.config;
            let params = load_params(&params_path(&checkpoint))?;
            let model = model_for(cfg, &params)?;
            let out = common.out_dir()?;
            let sel = Selection { mazes, maze_seed };
            let dump = probes::dump(&params, &model, sel)?;
            write_text(&out.join("latents.csv"), &latents_csv(&dump))?;
            let title = format!("{} z^c (left) and z^u (right), {}", cfg.env.name(), params_path(&checkpoint).display());
            let path = if rollout {
                let obs = match cfg.env {
                    EnvKind::Catcher => CatcherEnv::new().observation(),
                    env => {
                        let (_, spec) = maze_set(env, sel)?.into_iter().next().expect("at least one maze");
                        spec.render(spec.agent_cell)
                    }
                };
                let (zc, zu) = eval_encoder(&params, &model.encoder, stack_observations(&[&obs]))?;
                let (actions, points) = Planner::new(&model, &params)?.rollout(zc.data(), zu.data(), plan_depth)?;
                write_text(&out.join("rollout.csv"), &rollout_csv(&actions, &points))?;
                Some(points)
            } else {
                None
            };
            write_text(&out.join("latents.svg"), &latents_svg(&dump, &title, path.as_deref()))?;
            println!("exported {} states to {}", dump.rows.len(), out.display());
        }
        Command::Probe { common, checkpoint, metric, mazes, maze_seed, leakage_iterations } => {
            let r = common.resolve_for(&checkpoint)?;
            let cfg = &r.config;
            let params_file = params_path(&checkpoint);
            let params = load_params(&params_file)?;
            let model = model_for(cfg, &params)?;
            let dump = probes::dump(&params, &model, Selection { mazes, maze_seed })?;
            let leakage = LeakageConfig { iterations: leakage_iterations, ..LeakageConfig::default() };
            let out = common.out_dir()?;
            for m in metric.split(',').map(str::trim).filter(|m| !m.is_empty()) {
                ensure!(probes::METRICS.contains(&m), ConfigError(format!("unknown metric '{}'", m)));
                let report = probes::run(m, &dump, cfg.seed, &leakage)?;
                append_probe(&out.join("probes.csv"), &params_file.display().to_string(), &report)?;
                println!("{}: {} (baseline {}; {})", report.metric, report.value, report.baseline, report.split);
            }
        }
        Command::GenMaze { seed, out } => {
            let text = randmaze_generate(seed)?.to_text();
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{}", text),
            }
        }
        Command::Preset { name, out, seeds, sets, dry_run } => {
            let seeds = if seeds.is_empty() { default_seeds(&name) } else { seeds };
            let steps = plan(&name, &out, &seeds, &sets).map_err(|e| {
                if PRESETS.contains(&name.as_str()) { e } else { ConfigError(e.to_string()).into() }
            })?;
            if dry_run {
                for s in &steps {
                    println!("ctrlsplit {}", s.argv.join(" "));
                }
                return Ok(());
            }
            for (i, s) in steps.iter().enumerate() {
                eprintln!("[{}/{}] ctrlsplit {}", i + 1, steps.len(), s.argv.join(" "));
                let argv: Vec<String> = std::iter::once("ctrlsplit".to_string()).chain(s.argv.iter().cloned()).collect();
                let cli = Cli::try_parse_from(&argv).context("preset produced an invalid command")?;
                run(cli, &argv).with_context(|| format!("preset step {}: {}", i + 1, s.argv.join(" ")))?;
            }
        }
    }
    Ok(())
}

/// Exposed for tests: the configuration a command would run with.
pub fn resolved_config(common: &Common) -> Result<TrainConfig> {
    Ok(common.resolve()?.config)
}
