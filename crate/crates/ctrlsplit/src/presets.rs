//! Figure pipelines as ordered command plans under `<root>/<preset>/<seed>/`.

use std::path::Path;

use anyhow::{bail, Result};

pub const PRESETS: [&str; 6] = ["fig1", "fig3a", "fig3b", "fig4", "fig5", "fig6"];

/// One CLI invocation of a plan (argv without the program name).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStep {
    pub argv: Vec<String>,
}

impl PlanStep {
    pub fn command(&self) -> &str {
        &self.argv[0]
    }

    /// Value following `flag`, if present.
    pub fn flag(&self, flag: &str) -> Option<&str> {
        self.argv.iter().position(|a| a == flag).and_then(|i| self.argv.get(i + 1)).map(String::as_str)
    }
}

pub fn default_seeds(name: &str) -> Vec<u64> {
    if name == "fig5" {
        (0..5).collect()
    } else {
        vec![0]
    }
}

struct Builder<'a> {
    env: &'a str,
    seed: u64,
    dir: String,
    sets: &'a [String],
    steps: Vec<PlanStep>,
}

impl<'a> Builder<'a> {
    fn path(&self, rel: &str) -> String {
        format!("{}/{}", self.dir, rel)
    }

    /// Adds `command args.. --env E --seed S --out <dir>/<out> [--set ..]`.
    fn step(&mut self, command: &str, out: &str, args: &[&str], extra_sets: &[&str]) {
        let mut argv: Vec<String> = vec![command.to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        argv.extend(["--env".to_string(), self.env.to_string(), "--seed".to_string(), self.seed.to_string()]);
        argv.extend(["--out".to_string(), self.path(out)]);
        for s in self.sets.iter().map(String::as_str).chain(extra_sets.iter().copied()) {
            argv.extend(["--set".to_string(), s.to_string()]);
        }
        self.steps.push(PlanStep { argv });
    }

    fn collect(&mut self) -> String {
        self.step("collect", "collect", &[], &[]);
        self.path("collect/buffer.ducf")
    }

    fn pretrain(&mut self, out: &str, buffer: &str, extra_sets: &[&str]) -> String {
        self.step("pretrain", out, &["--buffer", buffer], extra_sets);
        self.path(&format!("{}/params.ducf", out))
    }

    fn refine(&mut self, checkpoint: &str, buffer: &str) -> String {
        self.step("refine-dynamics", "refine", &["--checkpoint", checkpoint, "--buffer", buffer], &[]);
        self.path("refine/params.ducf")
    }

    fn rl(&mut self, out: &str, mode: &str, checkpoint: Option<&str>, depth: Option<&str>) -> String {
        let mut args = vec!["--mode", mode];
        if let Some(c) = checkpoint {
            args.extend(["--checkpoint", c]);
        }
        if let Some(d) = depth {
            args.extend(["--plan-depth", d]);
        }
        self.step("train-rl", out, &args, &[]);
        self.path(&format!("{}/params.ducf", out))
    }
}

/// Ordered commands reproducing figure `name` for every seed. `sets` are
/// config overrides forwarded to every step (and so recorded in every
/// manifest).
pub fn plan(name: &str, root: &Path, seeds: &[u64], sets: &[String]) -> Result<Vec<PlanStep>> {
    let env = match name {
        "fig1" => "quadmaze",
        "fig3a" | "fig3b" => "catcher",
        "fig4" | "fig5" | "fig6" => "randmaze",
        other => bail!("unknown preset '{}' (expected one of {})", other, PRESETS.join(", ")),
    };
    if seeds.is_empty() {
        bail!("a preset needs at least one seed");
    }
    let mut steps = Vec::new();
    for &seed in seeds {
        let mut b = Builder { env, seed, dir: format!("{}/{}/{}", root.display(), name, seed), sets, steps: Vec::new() };
        let buffer = b.collect();
        match name {
            "fig1" => {
                let ck = b.pretrain("pretrain", &buffer, &[]);
                for metric in ["purity", "linear-r2", "consistency"] {
                    b.step("probe", "probes", &["--checkpoint", &ck, "--metric", metric], &[]);
                }
                b.step("export-latents", "latents", &["--checkpoint", &ck], &[]);
            }
            "fig3a" | "fig3b" => {
                let adv = if name == "fig3b" { "loss.adversarial=true" } else { "loss.adversarial=false" };
                let ck = b.pretrain("pretrain", &buffer, &[adv]);
                b.step("probe", "probes", &["--checkpoint", &ck, "--metric", "leakage"], &[adv]);
                b.step("export-latents", "latents", &["--checkpoint", &ck], &[adv]);
            }
            "fig4" => {
                let forward = b.pretrain("pretrain", &buffer, &[]);
                let inverse = b.pretrain("pretrain-inverse", &buffer, &["loss.forward=\"inverse\""]);
                let e2e = b.rl("rl-end-to-end", "end-to-end", None, None);
                for (out, ck) in [("latents-forward", &forward), ("latents-inverse", &inverse), ("latents-end-to-end", &e2e)] {
                    b.step("export-latents", out, &["--checkpoint", ck, "--mazes", "1"], &[]);
                }
            }
            "fig5" => {
                let ck = b.pretrain("pretrain", &buffer, &[]);
                let refined = b.refine(&ck, &buffer);
                b.rl("interpretable", "frozen-pretrained", Some(&refined), None);
                b.rl("interpretable-planning", "frozen+planner", Some(&refined), Some("3"));
                b.rl("ddqn", "end-to-end", None, None);
                let inverse = b.pretrain("pretrain-inverse", &buffer, &["loss.forward=\"inverse\""]);
                b.rl("inverse-prediction", "frozen-inverse-pretrained", Some(&inverse), None);
            }
            "fig6" => {
                let ck = b.pretrain("pretrain", &buffer, &[]);
                let refined = b.refine(&ck, &buffer);
                let policy = b.rl("rl-planner", "frozen+planner", Some(&refined), Some("3"));
                for depth in ["3", "9"] {
                    let out = format!("rollout-depth{}", depth);
                    b.step(
                        "export-latents",
                        &out,
                        &["--checkpoint", &policy, "--mazes", "1", "--rollout", "--plan-depth", depth],
                        &[],
                    );
                }
            }
            _ => unreachable!("checked above"),
        }
        steps.extend(b.steps);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str) -> Vec<PlanStep> {
        plan(name, Path::new("runs"), &default_seeds(name), &[]).unwrap()
    }

    #[test]
    fn fig5_has_four_arms_over_five_seeds() {
        let steps = p("fig5");
        let rl: Vec<&PlanStep> = steps.iter().filter(|s| s.command() == "train-rl").collect();
        assert_eq!(rl.len(), 20);
        let mut modes: Vec<&str> = rl.iter().map(|s| s.flag("--mode").unwrap()).collect();
        modes.sort_unstable();
        modes.dedup();
        assert_eq!(modes, ["end-to-end", "frozen+planner", "frozen-inverse-pretrained", "frozen-pretrained"]);
        let mut seeds: Vec<&str> = rl.iter().map(|s| s.flag("--seed").unwrap()).collect();
        seeds.dedup();
        assert_eq!(seeds, ["0", "1", "2", "3", "4"]);
        assert!(rl.iter().all(|s| s.flag("--out").unwrap().starts_with(&format!("runs/fig5/{}/", s.flag("--seed").unwrap()))));
    }

    #[test]
    fn fig1_ends_with_export_over_all_mazes() {
        let steps = p("fig1");
        let last = steps.last().unwrap();
        assert_eq!(last.command(), "export-latents");
        assert_eq!(last.flag("--env"), Some("quadmaze"));
        assert_eq!(last.flag("--checkpoint"), Some("runs/fig1/0/pretrain/params.ducf"));
        assert_eq!(steps[0].command(), "collect");
    }

    #[test]
    fn fig6_exports_rollouts_at_depths_3_and_9() {
        let steps = p("fig6");
        let depths: Vec<&str> = steps
            .iter()
            .filter(|s| s.command() == "export-latents" && s.argv.iter().any(|a| a == "--rollout"))
            .map(|s| s.flag("--plan-depth").unwrap())
            .collect();
        assert_eq!(depths, ["3", "9"]);
    }

    #[test]
    fn fig3_pair_differs_only_in_adversarial_flag() {
        let a = p("fig3a");
        let b = p("fig3b");
        assert_eq!(a.len(), b.len());
        assert!(a.iter().any(|s| s.argv.contains(&"loss.adversarial=false".to_string())));
        assert!(b.iter().any(|s| s.argv.contains(&"loss.adversarial=true".to_string())));
    }

    #[test]
    fn unknown_preset_and_forwarded_overrides() {
        assert!(plan("fig2", Path::new("r"), &[0], &[]).is_err());
        let steps = plan("fig1", Path::new("r"), &[7], &["pretrain_iterations=10".into()]).unwrap();
        assert!(steps.iter().all(|s| s.flag("--set") == Some("pretrain_iterations=10")));
    }
}
