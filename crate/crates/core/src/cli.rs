//! Command-line front end.
//!
//! Settings are resolved in three layers: the preset (if any), then the TOML
//! config file, then command-line flags. The resolved settings are written to
//! `effective_config.toml` in the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::design::{compute_plan_with_rule, verify_plan, InterventionPlan, PlanReport, PlanRule};
use crate::detector::{
    method_index, parse_method, run_episode, trace_to_csv, Environment, Policy, Variant, METHODS,
};
use crate::error::{Error, Result};
use crate::experiment::{
    default_horizon, generate_scenario, preset, sweep, write_results_csv, ChangePlacement,
    McSettings, ModelSource, Scenario, ScenarioSpec,
};
use crate::rng::{data_rng, policy_rng, Purpose};
use crate::sem::{CausalModel, ChangeSpec};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "CAUSAL_QCD_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "causal-qcd",
    version,
    about = "Quickest change detection in linear causal models with adaptive interventions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a model, its change list and an intervention plan.
    Gen(CommandArgs),
    /// Compute intervention values for a model.
    Plan(CommandArgs),
    /// Run detector episodes and write per-step traces.
    Trace(CommandArgs),
    /// Estimate ARL/EDD curves over a threshold grid.
    Sweep(CommandArgs),
    /// Check the KL-gap guarantees of a plan.
    Verify(CommandArgs),
}

#[derive(Debug, Args)]
pub struct CommandArgs {
    /// TOML file with any of the settings below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: RunConfig,
}

/// Every tunable setting. Unset fields fall back to the config file, then to
/// the preset, then to built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Study preset (e.g. sim-p4, multi-change-1).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $CAUSAL_QCD_OUT or ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of nodes of a random model.
    #[arg(long)]
    pub p: Option<usize>,
    /// Maximum in/out degree of a random model.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub edge_prob: Option<f64>,
    /// Change magnitude.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta_max: Option<f64>,
    /// Required KL gap of the intervention plan.
    #[arg(long, allow_hyphen_values = true)]
    pub gap: Option<f64>,
    /// Window length.
    #[arg(long)]
    pub w: Option<usize>,
    /// Exploration budget per window.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Model JSON file replacing the preset/random model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON list of changes replacing the random edge change.
    #[arg(long)]
    pub changes: Option<PathBuf>,
    /// Plan JSON file (verify, trace, sweep).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// exact or ancestors-only.
    #[arg(long)]
    pub rule: Option<String>,
    /// Change magnitudes checked by `plan --verify` and `verify`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta_grid: Option<Vec<f64>>,
    /// Run verification after computing a plan.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub verify: Option<bool>,
    /// Detector variant for `trace`: max or multi.
    #[arg(long)]
    pub variant: Option<String>,
    /// Policy for `trace`: adaptive, no-intervention or random-intervention.
    #[arg(long)]
    pub policy: Option<String>,
    /// Alarm threshold for `trace`.
    #[arg(long, allow_hyphen_values = true)]
    pub b: Option<f64>,
    /// Run cap; defaults to max(50 w, 20 e^b).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Trace the pre-change regime instead of the changed system.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pre_change: Option<bool>,
    /// Methods for `sweep`: `all` or a comma list such as MAX-AI,MULTI-NI.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Replications per method and threshold.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub b_grid: Option<Vec<f64>>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Fields set in `other` replace those in `self`.
    pub fn merge(mut self, other: &RunConfig) -> RunConfig {
        overlay!(self, other;
            preset, seed, out, p, d, edge_prob, delta, delta_min, delta_max, gap, w, q, eta,
            model, changes, plan, rule, delta_grid, verify, variant, policy, b, horizon,
            episodes, pre_change, methods, runs, b_grid, workers);
        self
    }

    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"))
        })
    }

    fn plan_rule(&self) -> Result<PlanRule> {
        self.rule.as_deref().map_or(Ok(PlanRule::Exact), str::parse)
    }

    /// Scenario specification after applying the overrides to the preset.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let mut spec = match &self.preset {
            Some(name) => preset(name)?,
            None => ScenarioSpec::default(),
        };
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.p {
            spec.p = v;
            if matches!(spec.model, ModelSource::Fixed { .. }) && self.model.is_none() {
                spec.model = ModelSource::Random;
                spec.placement = ChangePlacement::RandomEdge;
            }
        }
        if let Some(v) = self.d {
            spec.max_degree = v;
        }
        if let Some(v) = self.edge_prob {
            spec.edge_prob = v;
        }
        if let Some(v) = self.delta {
            spec.delta = v;
        }
        if let Some(v) = self.delta_min {
            spec.delta_min = v;
        }
        if let Some(v) = self.delta_max {
            spec.delta_max = v;
        }
        if let Some(v) = self.gap {
            spec.gap = v;
        }
        if let Some(v) = self.w {
            spec.w = v;
        }
        if let Some(v) = self.q {
            spec.q = v;
        }
        if let Some(v) = self.eta {
            spec.eta = v;
        }
        if let Some(path) = &self.model {
            let model = read_model(path)?;
            spec.p = model.p();
            spec.model = ModelSource::Fixed { model };
        }
        if let Some(path) = &self.changes {
            let changes: Vec<ChangeSpec> = serde_json::from_str(&read_text(path)?)?;
            spec.placement = ChangePlacement::Explicit { changes };
        }
        if let Some(name) = &self.preset {
            if self.p.is_some() || self.model.is_some() {
                spec.id = format!("{name}-custom");
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn scenario(&self) -> Result<Scenario> {
        let spec = self.scenario_spec()?;
        let mut sc = generate_scenario(&spec)?;
        if self.rule.is_some() {
            sc.plan = compute_plan_with_rule(&sc.model, spec.delta_min, spec.gap, self.plan_rule()?)?;
        }
        if let Some(path) = &self.plan {
            let plan: InterventionPlan = serde_json::from_str(&read_text(path)?)?;
            if plan.values.len() != sc.model.p() {
                return Err(Error::DimensionMismatch {
                    expected: sc.model.p(),
                    got: plan.values.len(),
                });
            }
            sc.plan = plan;
        }
        Ok(sc)
    }

    fn methods(&self) -> Result<Vec<(Variant, Policy)>> {
        match &self.methods {
            None => Ok(METHODS.to_vec()),
            Some(list) if list.iter().any(|m| m.eq_ignore_ascii_case("all")) => {
                Ok(METHODS.to_vec())
            }
            Some(list) => list.iter().map(|m| parse_method(m.trim())).collect(),
        }
    }

    fn variant_policy(&self) -> Result<(Variant, Policy)> {
        let variant = match self.variant.as_deref().unwrap_or("max") {
            "max" => Variant::Max,
            "multi" => Variant::Multi,
            other => return Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        };
        let policy = match self.policy.as_deref().unwrap_or("adaptive") {
            "adaptive" | "ai" => Policy::Adaptive,
            "no-intervention" | "ni" => Policy::NoIntervention,
            "random-intervention" | "ri" => Policy::RandomIntervention,
            other => return Err(Error::InvalidConfig(format!("unknown policy `{other}`"))),
        };
        Ok((variant, policy))
    }

    fn delta_grid(&self, spec: &ScenarioSpec) -> Vec<f64> {
        self.delta_grid.clone().unwrap_or_else(|| {
            vec![
                spec.delta_min,
                0.5 * (spec.delta_min + spec.delta_max),
                spec.delta_max,
            ]
        })
    }

    /// Fills every field that has a default so the echoed config is complete.
    fn resolved(&self, spec: &ScenarioSpec) -> RunConfig {
        let mut r = self.clone();
        r.seed = Some(spec.seed);
        r.out = Some(self.out_dir());
        r.p = Some(spec.p);
        r.d = Some(spec.max_degree);
        r.edge_prob = Some(spec.edge_prob);
        r.delta = Some(spec.delta);
        r.delta_min = Some(spec.delta_min);
        r.delta_max = Some(spec.delta_max);
        r.gap = Some(spec.gap);
        r.w = Some(spec.w);
        r.q = Some(spec.q);
        r.eta = Some(spec.eta);
        r.rule.get_or_insert_with(|| "exact".into());
        r
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<CausalModel> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("effective_config.toml"), text)?;
    Ok(())
}

fn prepare(args: &CommandArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    Ok(file.merge(&args.settings))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&prepare(&a)?),
        Command::Plan(a) => cmd_plan(&prepare(&a)?),
        Command::Trace(a) => cmd_trace(&prepare(&a)?),
        Command::Sweep(a) => cmd_sweep(&prepare(&a)?),
        Command::Verify(a) => cmd_verify(&prepare(&a)?),
    }
}

/// Writes `model.json`, `change.json` and `plan.json`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let sc = cfg.scenario()?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("model.json"), &sc.model)?;
    write_json(&dir.join("change.json"), &sc.changes)?;
    write_json(&dir.join("plan.json"), &sc.plan)?;
    echo_config(&dir, &cfg.resolved(&spec))?;
    println!(
        "scenario {}: p = {}, {} edges, {} change(s) -> {}",
        sc.id,
        sc.model.p(),
        sc.model.edges().len(),
        sc.changes.len(),
        dir.display()
    );
    Ok(())
}

fn print_report(model: &CausalModel, report: &PlanReport) {
    for (k, j, gap) in report.min_gap_per_edge() {
        println!(
            "edge {} -> {}: min realized gap {:.6}",
            model.label(j),
            model.label(k),
            gap
        );
    }
    let failed = report.checks.iter().filter(|c| !c.pass).count();
    println!(
        "verification: {} of {} checks passed",
        report.checks.len() - failed,
        report.checks.len()
    );
}

/// Computes the plan for the configured model and prints the audit.
pub fn cmd_plan(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let model = match &spec.model {
        ModelSource::Fixed { model } => model.clone(),
        ModelSource::Random => generate_scenario(&spec)?.model,
    };
    let plan = compute_plan_with_rule(&model, spec.delta_min, spec.gap, cfg.plan_rule()?)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("plan.json"), &plan)?;
    echo_config(&dir, &cfg.resolved(&spec))?;
    for (a, c) in plan.audit.iter().zip(&plan.values) {
        let cands: Vec<String> = a
            .candidates
            .iter()
            .map(|(i, v)| format!("{i}:{v:.4}"))
            .collect();
        println!(
            "c_{} ({}) = {:.4}  [Smax {:.4}{}; candidates {}]",
            a.node,
            model.label(a.node),
            c,
            a.sigma_max,
            if a.sigma_max_fallback { " (all nodes)" } else { "" },
            cands.join(" ")
        );
    }
    if cfg.verify.unwrap_or(false) {
        let report = verify_plan(&model, &plan, &cfg.delta_grid(&spec))?;
        print_report(&model, &report);
    }
    Ok(())
}

/// Verifies a plan file (or a freshly computed plan) on the configured model.
pub fn cmd_verify(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let sc = cfg.scenario()?;
    let report = verify_plan(&sc.model, &sc.plan, &cfg.delta_grid(&spec))?;
    print_report(&sc.model, &report);
    if report.pass() {
        Ok(())
    } else {
        Err(Error::VerificationFailed(
            "plan does not meet the KL gap on every edge".into(),
        ))
    }
}

/// Runs episodes and writes `trace.csv` (or `trace_<n>.csv` for several).
pub fn cmd_trace(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let sc = cfg.scenario()?;
    let (variant, policy) = cfg.variant_policy()?;
    let p = sc.model.p() as f64;
    let b = cfg.b.unwrap_or(match variant {
        Variant::Multi => 100f64.ln(),
        Variant::Max => 100f64.ln() + p.ln(),
    });
    let horizon = cfg.horizon.unwrap_or_else(|| default_horizon(sc.w, b));
    let episodes = cfg.episodes.unwrap_or(1);
    let pre = cfg.pre_change.unwrap_or(false);
    let changes: &[ChangeSpec] = if pre { &[] } else { &sc.changes };
    let env = Environment::new(&sc.model, changes, &sc.plan)?;
    let config = sc.detector_config(b, variant, policy);
    let m = method_index(variant, policy);
    let dir = out_dir(cfg)?;
    for e in 0..episodes {
        let mut drng = data_rng(spec.seed, Purpose::Trace, e as u64);
        let mut prng = policy_rng(spec.seed, Purpose::Trace, e as u64, m);
        let r = run_episode(&env, &config, horizon, &mut drng, &mut prng)?;
        let name = if episodes == 1 {
            "trace.csv".to_string()
        } else {
            format!("trace_{e}.csv")
        };
        trace_to_csv(&r.trace, fs::File::create(dir.join(&name))?)?;
        match r.stop {
            Some(t) => println!("episode {e}: alarm at t = {t} ({name})"),
            None => println!("episode {e}: no alarm within {horizon} steps ({name})"),
        }
    }
    let mut resolved = cfg.resolved(&spec);
    resolved.b = Some(b);
    resolved.horizon = Some(horizon);
    resolved.episodes = Some(episodes);
    echo_config(&dir, &resolved)?;
    Ok(())
}

/// Default threshold grid of `sweep`.
pub fn default_b_grid() -> Vec<f64> {
    (0..=10).map(|i| 1.0 + 0.5 * i as f64).collect()
}

/// Writes `results.csv` for the configured scenario and methods.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let sc = cfg.scenario()?;
    let methods = cfg.methods()?;
    let grid = cfg.b_grid.clone().unwrap_or_else(default_b_grid);
    let mc = McSettings {
        n_runs: cfg.runs.unwrap_or(200),
        seed: spec.seed,
        workers: cfg.workers.unwrap_or(0),
    };
    if mc.n_runs == 0 {
        return Err(Error::InvalidConfig("runs must be at least 1".into()));
    }
    let points = sweep(&sc, &methods, &grid, cfg.horizon, mc)?;
    let dir = out_dir(cfg)?;
    write_results_csv(&points, fs::File::create(dir.join("results.csv"))?)?;
    let mut resolved = cfg.resolved(&spec);
    resolved.b_grid = Some(grid);
    resolved.runs = Some(mc.n_runs);
    resolved.methods = Some(
        methods
            .iter()
            .map(|&(v, p)| crate::detector::method_label(v, p).to_string())
            .collect(),
    );
    // worker count does not affect results; keep it out of the echo
    resolved.workers = None;
    echo_config(&dir, &resolved)?;
    let flagged = points.iter().filter(|p| p.censored()).count();
    println!(
        "{} rows -> {}{}",
        points.len(),
        dir.join("results.csv").display(),
        if flagged > 0 {
            format!(" ({flagged} rows with censored runs)")
        } else {
            String::new()
        }
    );
    Ok(())
}
