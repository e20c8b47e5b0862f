//! Scenario generation, study presets and Monte-Carlo estimation of ARL/EDD.

use std::io::Write;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{compute_plan, InterventionPlan};
use crate::detector::{
    first_passage, method_index, method_label, DetectorConfig, Environment, Policy, Variant,
};
use crate::error::{Error, Result};
use crate::rng::{data_rng, policy_rng, Purpose};
use crate::sem::{CausalModel, ChangeSpec};

/// Where the pre-change model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ModelSource {
    /// Random degree-capped DAG.
    Random,
    /// A fixed model (explicit matrices or a labelled skeleton).
    Fixed { model: CausalModel },
}

/// Where the change is placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "placement", rename_all = "kebab-case")]
pub enum ChangePlacement {
    /// One existing edge chosen uniformly, shifted by `delta`.
    RandomEdge,
    /// The listed changes, applied in order.
    Explicit { changes: Vec<ChangeSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub p: usize,
    pub max_degree: usize,
    pub edge_prob: f64,
    pub weight_range: (f64, f64),
    pub mu_range: (f64, f64),
    pub sigma2_range: (f64, f64),
    pub delta: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub gap: f64,
    pub w: usize,
    pub q: usize,
    pub eta: f64,
    /// Change magnitudes studied with this preset.
    pub delta_grid: Vec<f64>,
    pub model: ModelSource,
    pub placement: ChangePlacement,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            id: "custom".into(),
            p: 4,
            max_degree: 2,
            edge_prob: 0.5,
            weight_range: (1.0, 2.0),
            mu_range: (-1.0, 1.0),
            sigma2_range: (0.5, 2.0),
            delta: 0.1,
            delta_min: 0.1,
            delta_max: 2.0,
            gap: 1.0,
            w: 20,
            q: 10,
            eta: 1.0,
            delta_grid: vec![0.1],
            model: ModelSource::Random,
            placement: ChangePlacement::RandomEdge,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge probability {} outside [0, 1]", self.edge_prob));
        }
        for (name, (lo, hi)) in [
            ("weight", self.weight_range),
            ("mu", self.mu_range),
            ("sigma2", self.sigma2_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if !(self.sigma2_range.0 > 0.0) {
            return bad("sigma2 range must be positive".into());
        }
        if !(self.delta_min > 0.0) {
            return Err(Error::NonPositiveInput("delta_min must be positive".into()));
        }
        if !(self.gap > 0.0) {
            return Err(Error::NonPositiveInput("gap must be positive".into()));
        }
        if self.delta_max < self.delta_min {
            return bad("delta_max is below delta_min".into());
        }
        if self.placement == ChangePlacement::RandomEdge
            && !(self.delta_min..=self.delta_max).contains(&self.delta.abs())
        {
            return bad(format!(
                "|delta| = {} outside [{}, {}]",
                self.delta.abs(),
                self.delta_min,
                self.delta_max
            ));
        }
        if self.q == 0 || self.q >= self.w {
            return Err(Error::BadBudget {
                q: self.q,
                w: self.w,
            });
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if let ModelSource::Fixed { model } = &self.model {
            if model.p() != self.p {
                return bad(format!("model has {} nodes but p = {}", model.p(), self.p));
            }
        }
        Ok(())
    }
}

/// A concrete study instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub model: CausalModel,
    pub changes: Vec<ChangeSpec>,
    pub plan: InterventionPlan,
    pub w: usize,
    pub q: usize,
    pub eta: f64,
}

impl Scenario {
    pub fn detector_config(&self, b: f64, variant: Variant, policy: Policy) -> DetectorConfig {
        let mut c = DetectorConfig::new(self.w, self.q, b, variant, policy);
        c.eta = self.eta;
        c
    }
}

/// Random DAG in topological order: each pair `j < k` becomes an edge
/// `j -> k` with probability `edge_prob` unless that would push the
/// out-degree of `j` or the in-degree of `k` past `max_degree`.
pub fn random_model<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<CausalModel> {
    let p = spec.p;
    let mut rows = vec![vec![0.0; p]; p];
    let mut indeg = vec![0usize; p];
    let mut outdeg = vec![0usize; p];
    for j in 0..p {
        for k in (j + 1)..p {
            let u: f64 = rng.random();
            if u < spec.edge_prob && outdeg[j] < spec.max_degree && indeg[k] < spec.max_degree {
                rows[k][j] = uniform(rng, spec.weight_range);
                outdeg[j] += 1;
                indeg[k] += 1;
            }
        }
    }
    let mu: Vec<f64> = (0..p).map(|_| uniform(rng, spec.mu_range)).collect();
    let sigma2: Vec<f64> = (0..p).map(|_| uniform(rng, spec.sigma2_range)).collect();
    CausalModel::from_rows(&rows, &mu, &sigma2)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Builds the model, change and plan described by `spec`, deterministically
/// from `spec.seed`.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = data_rng(spec.seed, Purpose::Scenario, 0);
    let model = match &spec.model {
        ModelSource::Random => random_model(spec, &mut rng)?,
        ModelSource::Fixed { model } => model.clone(),
    };
    let changes = match &spec.placement {
        ChangePlacement::Explicit { changes } => {
            model.apply_changes(changes)?;
            changes.clone()
        }
        ChangePlacement::RandomEdge => {
            let edges = model.edges();
            if edges.is_empty() {
                warn!("scenario `{}` has no edges; no change is injected", spec.id);
                Vec::new()
            } else {
                let (k, j) = edges[rng.random_range(0..edges.len())];
                vec![ChangeSpec::edge(k, j, spec.delta)]
            }
        }
    };
    let plan = compute_plan(&model, spec.delta_min, spec.gap)?;
    Ok(Scenario {
        id: spec.id.clone(),
        model,
        changes,
        plan,
        w: spec.w,
        q: spec.q,
        eta: spec.eta,
    })
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 13] = [
    "sim-p4",
    "sim-p4-long",
    "sim-p6",
    "sim-p6-short",
    "sim-p6-long",
    "sim-p12",
    "sim-p12-long",
    "multi-change-1",
    "multi-change-2",
    "ecology11",
    "ecology11-long",
    "psych5",
    "psych5-long",
];

fn chain_like(p: usize, edges: &[(usize, usize, f64)], mu: f64) -> CausalModel {
    let mut rows = vec![vec![0.0; p]; p];
    for &(k, j, w) in edges {
        rows[k - 1][j - 1] = w;
    }
    CausalModel::from_rows(&rows, &vec![mu; p], &vec![1.0; p]).expect("preset model is valid")
}

fn labelled(p: usize, edges: &[(usize, usize)], labels: &[&str]) -> CausalModel {
    let e: Vec<(usize, usize, f64)> = edges.iter().map(|&(k, j)| (k, j, 1.0)).collect();
    chain_like(p, &e, 0.0)
        .with_labels(labels.iter().map(|s| s.to_string()).collect())
        .expect("label count matches")
}

/// Study configurations. The `-long`/`-short` suffixes select the alternative
/// window of the same study.
pub fn preset(name: &str) -> Result<ScenarioSpec> {
    let base = ScenarioSpec {
        id: name.to_string(),
        ..ScenarioSpec::default()
    };
    let spec = match name {
        "sim-p4" => base,
        "sim-p4-long" => ScenarioSpec { w: 40, q: 20, ..base },
        "sim-p6" | "sim-p6-short" => ScenarioSpec {
            p: 6,
            w: 30,
            q: 15,
            delta_grid: vec![0.1, 0.2, 0.5],
            ..base
        },
        "sim-p6-long" => ScenarioSpec {
            p: 6,
            w: 80,
            q: 40,
            delta_grid: vec![0.1, 0.2, 0.5],
            ..base
        },
        "sim-p12" => ScenarioSpec {
            p: 12,
            max_degree: 3,
            w: 60,
            q: 30,
            ..base
        },
        "sim-p12-long" => ScenarioSpec {
            p: 12,
            max_degree: 3,
            w: 300,
            q: 150,
            ..base
        },
        "multi-change-1" => ScenarioSpec {
            p: 4,
            w: 40,
            q: 20,
            delta: 0.2,
            delta_grid: vec![0.2],
            model: ModelSource::Fixed {
                model: chain_like(4, &[(2, 1, 1.0), (3, 2, 1.0), (4, 3, 1.0)], 1.0),
            },
            placement: ChangePlacement::Explicit {
                changes: vec![
                    ChangeSpec::edge(2, 1, 0.2),
                    ChangeSpec::edge(3, 2, 0.14),
                    ChangeSpec::edge(4, 3, 0.1),
                ],
            },
            ..base
        },
        "multi-change-2" => ScenarioSpec {
            p: 5,
            w: 60,
            q: 30,
            delta: 0.15,
            delta_grid: vec![0.15],
            model: ModelSource::Fixed {
                model: chain_like(
                    5,
                    &[(2, 1, 1.0), (3, 2, 1.0), (4, 1, 1.0), (5, 4, 1.0)],
                    1.0,
                ),
            },
            placement: ChangePlacement::Explicit {
                changes: vec![
                    ChangeSpec::edge(2, 1, 0.15),
                    ChangeSpec::edge(3, 2, 0.1),
                    ChangeSpec::edge(4, 1, 0.15),
                    ChangeSpec::edge(5, 4, 0.1),
                ],
            },
            ..base
        },
        "ecology11" | "ecology11-long" => {
            let labels = [
                "Chla", "Sal", "TA", "DIC", "PCO2", "Tem", "Light", "Nut", "pH_SW", "Omega_A",
                "NEC",
            ];
            let (w, q) = if name == "ecology11" { (60, 30) } else { (300, 150) };
            ScenarioSpec {
                p: 11,
                w,
                q,
                delta_grid: vec![0.1, 0.2, 0.5],
                model: ModelSource::Fixed {
                    model: labelled(11, &[(11, 6), (11, 9)], &labels),
                },
                ..base
            }
        }
        "psych5" | "psych5-long" => {
            let labels = ["NonRea", "Act", "Des", "Obs", "Nonjud"];
            let (w, q) = if name == "psych5" { (25, 12) } else { (60, 30) };
            ScenarioSpec {
                p: 5,
                w,
                q,
                delta_grid: vec![0.1, 0.2, 0.3],
                model: ModelSource::Fixed {
                    model: labelled(5, &[(5, 2), (4, 1)], &labels),
                },
                ..base
            }
        }
        other => {
            return Err(Error::UnknownPreset {
                name: other.to_string(),
                valid: PRESETS.join(", "),
            })
        }
    };
    Ok(spec)
}

/// Default run cap for threshold `b`: `max(50 w, 20 e^b)`.
pub fn default_horizon(w: usize, b: f64) -> usize {
    let grow = (20.0 * b.exp()).ceil();
    let grow = if grow.is_finite() { grow.min(1e9) as usize } else { 1_000_000_000 };
    (50 * w).max(grow)
}

/// Mean, standard error and censoring of a batch of stopping times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunStats {
    pub mean: f64,
    pub se: f64,
    pub censor_rate: f64,
    pub n: usize,
}

impl RunStats {
    /// Censored runs (`None`) count as `horizon`.
    pub fn from_times(times: &[Option<usize>], horizon: usize) -> Self {
        let n = times.len();
        let vals: Vec<f64> = times
            .iter()
            .map(|t| t.unwrap_or(horizon) as f64)
            .collect();
        let censored = times.iter().filter(|t| t.is_none()).count();
        let (mean, se) = mean_se(&vals);
        RunStats {
            mean,
            se,
            censor_rate: if n == 0 { 0.0 } else { censored as f64 / n as f64 },
            n,
        }
    }
}

/// Sample mean and standard error (`sd / sqrt(n)`, unbiased `sd`).
pub fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte-Carlo settings shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub n_runs: usize,
    pub seed: u64,
    /// Worker threads; `0` uses the available parallelism.
    pub workers: usize,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::ThreadPool(e.to_string()))
}

/// Stopping times for every replication and threshold.
///
/// Replication `r` of method `m` uses the data stream of `(seed, purpose, r)`
/// (shared by all methods) and the policy stream `m` of the same key. The
/// result is ordered by replication whatever the worker count.
pub fn passage_times(
    env: &Environment,
    config: &DetectorConfig,
    thresholds: &[f64],
    horizons: &[usize],
    purpose: Purpose,
    mc: McSettings,
) -> Result<Vec<Vec<Option<usize>>>> {
    let m = method_index(config.variant, config.policy);
    let run = |r: usize| -> Result<Vec<Option<usize>>> {
        let mut drng = data_rng(mc.seed, purpose, r as u64);
        let mut prng = policy_rng(mc.seed, purpose, r as u64, m);
        Ok(first_passage(env, config, thresholds, horizons, &mut drng, &mut prng)?.times)
    };
    pool(mc.workers)?.install(|| (0..mc.n_runs).into_par_iter().map(run).collect())
}

/// Pre-change run length at one threshold.
pub fn estimate_arl(
    model: &CausalModel,
    plan: &InterventionPlan,
    config: &DetectorConfig,
    horizon: usize,
    mc: McSettings,
) -> Result<RunStats> {
    let env = Environment::new(model, &[], plan)?;
    let times = passage_times(&env, config, &[config.b], &[horizon], Purpose::Arl, mc)?;
    let col: Vec<Option<usize>> = times.into_iter().map(|t| t[0]).collect();
    Ok(RunStats::from_times(&col, horizon))
}

/// Detection delay with the change active from the first step.
pub fn estimate_edd(
    model: &CausalModel,
    changes: &[ChangeSpec],
    plan: &InterventionPlan,
    config: &DetectorConfig,
    horizon: usize,
    mc: McSettings,
) -> Result<RunStats> {
    let env = Environment::new(model, changes, plan)?;
    let times = passage_times(&env, config, &[config.b], &[horizon], Purpose::Edd, mc)?;
    let col: Vec<Option<usize>> = times.into_iter().map(|t| t[0]).collect();
    Ok(RunStats::from_times(&col, horizon))
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub scenario_id: String,
    pub method: String,
    pub b: f64,
    pub n_runs: usize,
    pub arl_mean: f64,
    pub arl_se: f64,
    pub edd_mean: f64,
    pub edd_se: f64,
    /// Fraction of censored runs over the ARL and EDD batches together.
    pub censor_rate: f64,
}

impl CurvePoint {
    pub fn censored(&self) -> bool {
        self.censor_rate > 0.0
    }
}

/// ARL and EDD curves over `b_grid` for each method. Runs are capped at
/// `horizon` when given, otherwise at [`default_horizon`] for each `b`.
pub fn sweep(
    scenario: &Scenario,
    methods: &[(Variant, Policy)],
    b_grid: &[f64],
    horizon: Option<usize>,
    mc: McSettings,
) -> Result<Vec<CurvePoint>> {
    let grid = b_grid.to_vec();
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig(
            "b grid must be non-empty and strictly ascending".into(),
        ));
    }
    if let Some(h) = horizon {
        if h <= scenario.w {
            return Err(Error::InvalidConfig(format!(
                "horizon {h} must exceed the window length {}",
                scenario.w
            )));
        }
    }
    let horizons: Vec<usize> = grid
        .iter()
        .map(|&b| horizon.unwrap_or_else(|| default_horizon(scenario.w, b)))
        .collect();
    let pre = Environment::new(&scenario.model, &[], &scenario.plan)?;
    let post = Environment::new(&scenario.model, &scenario.changes, &scenario.plan)?;
    let mut out = Vec::new();
    for &(variant, policy) in methods {
        let config = scenario.detector_config(grid[0], variant, policy);
        let arl = passage_times(&pre, &config, &grid, &horizons, Purpose::Arl, mc)?;
        let edd = passage_times(&post, &config, &grid, &horizons, Purpose::Edd, mc)?;
        for (m, &b) in grid.iter().enumerate() {
            let a: Vec<Option<usize>> = arl.iter().map(|t| t[m]).collect();
            let e: Vec<Option<usize>> = edd.iter().map(|t| t[m]).collect();
            let sa = RunStats::from_times(&a, horizons[m]);
            let se = RunStats::from_times(&e, horizons[m]);
            out.push(CurvePoint {
                scenario_id: scenario.id.clone(),
                method: method_label(variant, policy).to_string(),
                b,
                n_runs: mc.n_runs,
                arl_mean: sa.mean,
                arl_se: sa.se,
                edd_mean: se.mean,
                edd_se: se.se,
                censor_rate: 0.5 * (sa.censor_rate + se.censor_rate),
            });
        }
    }
    Ok(out)
}

/// EDD interpolated at a target ARL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPoint {
    pub b: f64,
    pub arl: f64,
    pub edd: f64,
    pub edd_se: f64,
}

/// Interpolates one method's curve at `target_arl`, linearly in `ln ARL`
/// between the first pair of consecutive uncensored points that brackets it.
/// `points` must belong to one method and be ordered by `b`.
pub fn matched_at(points: &[CurvePoint], target_arl: f64) -> Option<MatchedPoint> {
    for pair in points.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        if lo.censored() || hi.censored() {
            continue;
        }
        if lo.arl_mean <= target_arl && target_arl <= hi.arl_mean {
            let span = hi.arl_mean.ln() - lo.arl_mean.ln();
            let f = if span > 0.0 {
                (target_arl.ln() - lo.arl_mean.ln()) / span
            } else {
                0.0
            };
            return Some(MatchedPoint {
                b: lo.b + f * (hi.b - lo.b),
                arl: target_arl,
                edd: lo.edd_mean + f * (hi.edd_mean - lo.edd_mean),
                edd_se: lo.edd_se + f * (hi.edd_se - lo.edd_se),
            });
        }
    }
    None
}

/// Writes sweep rows with the fixed column order
/// `scenario_id, method, b, n_runs, arl_mean, arl_se, edd_mean, edd_se, censor_rate`.
pub fn write_results_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for p in points {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}
