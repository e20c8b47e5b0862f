use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{make_schedule, Detector, DetectorConfig, ExplorationSchedule};
use crate::centralization::Centralizer;
use crate::design::InterventionPlan;
use crate::error::{Error, Result};
use crate::sem::{CausalModel, ChangeSpec};

/// The system a detector interacts with: the pre-change reference used for
/// centering, the model actually generating data, and the arm values.
#[derive(Debug, Clone)]
pub struct Environment {
    base: CausalModel,
    plan: InterventionPlan,
    arm_models: Vec<CausalModel>,
    centralizers: Vec<Centralizer>,
}

impl Environment {
    /// `changes` empty means the pre-change regime; otherwise the changed
    /// system is active from the first step.
    pub fn new(base: &CausalModel, changes: &[ChangeSpec], plan: &InterventionPlan) -> Result<Self> {
        let truth = base.apply_changes(changes)?;
        Self::with_truth(base, &truth, plan)
    }

    pub fn with_truth(base: &CausalModel, truth: &CausalModel, plan: &InterventionPlan) -> Result<Self> {
        let p = base.p();
        if plan.values.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: plan.values.len(),
            });
        }
        if truth.p() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: truth.p(),
            });
        }
        let mut arm_models = Vec::with_capacity(p + 1);
        let mut centralizers = Vec::with_capacity(p + 1);
        for arm in 0..=p {
            let iv = plan.intervention(arm);
            arm_models.push(truth.apply_do(iv)?);
            centralizers.push(Centralizer::new(base, iv)?);
        }
        Ok(Environment {
            base: base.clone(),
            plan: plan.clone(),
            arm_models,
            centralizers,
        })
    }

    pub fn p(&self) -> usize {
        self.base.p()
    }

    pub fn base(&self) -> &CausalModel {
        &self.base
    }

    pub fn plan(&self) -> &InterventionPlan {
        &self.plan
    }

    /// Draws `p` standard normals from `rng` (always, whatever the arm) and
    /// returns the centered observation under `arm`, restricted to its nodes.
    pub fn observe<R: Rng + ?Sized>(&self, arm: usize, rng: &mut R, z: &mut [f64], out: &mut Vec<f64>) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = self.arm_models[arm].sample_with_noise(z);
        let cz = &self.centralizers[arm];
        out.resize(cz.dim(), 0.0);
        cz.restricted_into(x.as_slice(), out);
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub arm: usize,
    pub explored: bool,
    pub statistic: f64,
    pub alarmed: bool,
    pub lambda: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Alarm time, or `None` when censored at `horizon`.
    pub stop: Option<usize>,
    pub horizon: usize,
    pub schedule: ExplorationSchedule,
    pub arms: Vec<usize>,
    pub trace: Vec<StepRecord>,
}

/// Runs one episode until the alarm or `horizon`, recording every step.
pub fn run_episode<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    env: &Environment,
    config: &DetectorConfig,
    horizon: usize,
    data_rng: &mut R1,
    policy_rng: &mut R2,
) -> Result<RunResult> {
    if horizon <= config.w {
        return Err(Error::InvalidConfig(format!(
            "horizon {horizon} must exceed the window length {}",
            config.w
        )));
    }
    let p = env.p();
    let mut det = Detector::new(p, *config)?;
    let schedule = make_schedule(config.w, config.q, config.eta, policy_rng)?;
    let mut z = vec![0.0; p];
    let mut y = Vec::with_capacity(p);
    let mut arms = Vec::new();
    let mut trace = Vec::new();
    while det.t() < horizon && !det.alarmed() {
        let (arm, explored) = det.choose_arm(&schedule, policy_rng);
        env.observe(arm, data_rng, &mut z, &mut y);
        let out = det.step(arm, &y)?;
        arms.push(arm);
        trace.push(StepRecord {
            t: out.t,
            arm,
            explored,
            statistic: out.statistic,
            alarmed: out.alarmed,
            lambda: out.lambda,
            w: out.w,
        });
    }
    Ok(RunResult {
        stop: det.stopping_time(),
        horizon,
        schedule,
        arms,
        trace,
    })
}

/// First-passage times of one sample path for several thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageResult {
    /// `times[m]`: first `t > w` with statistic above `thresholds[m]`, or
    /// `None` when that did not happen within `horizons[m]`.
    pub times: Vec<Option<usize>>,
    pub steps: usize,
}

/// Runs one path and records when it first exceeds each threshold.
///
/// The arm choices and the statistic do not depend on the threshold, so a
/// single path yields the stopping time for every threshold at once.
/// `thresholds` must be ascending; `horizons[m]` caps the search for
/// `thresholds[m]`.
pub fn first_passage<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    env: &Environment,
    config: &DetectorConfig,
    thresholds: &[f64],
    horizons: &[usize],
    data_rng: &mut R1,
    policy_rng: &mut R2,
) -> Result<PassageResult> {
    if thresholds.len() != horizons.len() {
        return Err(Error::DimensionMismatch {
            expected: thresholds.len(),
            got: horizons.len(),
        });
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidConfig("thresholds must be ascending".into()));
    }
    let p = env.p();
    let mut cfg = *config;
    cfg.b = f64::INFINITY;
    let mut det = Detector::new(p, cfg)?;
    let schedule = make_schedule(cfg.w, cfg.q, cfg.eta, policy_rng)?;
    let n = thresholds.len();
    let mut times = vec![None; n];
    let mut next = 0;
    let mut z = vec![0.0; p];
    let mut y = Vec::with_capacity(p);
    // longest horizon among thresholds not yet crossed
    let limit = |from: usize| horizons[from..].iter().copied().max().unwrap_or(0);
    while next < n && det.t() < limit(next) {
        let (arm, _) = det.choose_arm(&schedule, policy_rng);
        env.observe(arm, data_rng, &mut z, &mut y);
        let out = det.step(arm, &y)?;
        if out.t > cfg.w {
            while next < n && out.statistic > thresholds[next] {
                times[next] = Some(out.t);
                next += 1;
            }
        }
    }
    for (slot, &h) in times.iter_mut().zip(horizons) {
        if slot.is_some_and(|t| t > h) {
            *slot = None;
        }
    }
    Ok(PassageResult {
        times,
        steps: det.t(),
    })
}

/// Writes a trace as CSV: `t, arm, explored, statistic, alarmed, lambda_*, w_*`.
pub fn trace_to_csv<W: Write>(trace: &[StepRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let width = trace.first().map_or(1, |r| r.lambda.len());
    let mut header: Vec<String> = ["t", "arm", "explored", "statistic", "alarmed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=width).map(|i| format!("lambda_{i}")));
    header.extend((1..=width).map(|i| format!("w_{i}")));
    wtr.write_record(&header)?;
    for r in trace {
        let mut row = vec![
            r.t.to_string(),
            r.arm.to_string(),
            (r.explored as u8).to_string(),
            r.statistic.to_string(),
            (r.alarmed as u8).to_string(),
        ];
        row.extend(r.lambda.iter().map(|v| v.to_string()));
        row.extend(r.w.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::compute_plan;
    use crate::detector::{Policy, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain4() -> CausalModel {
        CausalModel::from_rows(
            &[
                vec![0.0, 0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            &[1.0; 4],
            &[1.0; 4],
        )
        .unwrap()
    }

    fn env(changes: &[ChangeSpec]) -> Environment {
        let m = chain4();
        let plan = compute_plan(&m, 0.1, 1.0).unwrap();
        Environment::new(&m, changes, &plan).unwrap()
    }

    #[test]
    fn infinite_threshold_is_censored() {
        let e = env(&[]);
        let c = DetectorConfig::new(10, 5, f64::INFINITY, Variant::Multi, Policy::Adaptive);
        let r = run_episode(
            &e,
            &c,
            200,
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(r.stop, None);
        assert_eq!(r.trace.len(), 200);
    }

    #[test]
    fn very_low_threshold_alarms_right_after_warmup() {
        let e = env(&[]);
        for variant in [Variant::Max, Variant::Multi] {
            let c = DetectorConfig::new(10, 5, -1e9, variant, Policy::Adaptive);
            let r = run_episode(
                &e,
                &c,
                200,
                &mut ChaCha8Rng::seed_from_u64(1),
                &mut ChaCha8Rng::seed_from_u64(2),
            )
            .unwrap();
            assert_eq!(r.stop, Some(11));
        }
    }

    #[test]
    fn passage_matches_single_threshold_runs() {
        let e = env(&[ChangeSpec::edge(3, 2, 0.5)]);
        let bs = [0.5, 2.0, 4.0, 6.0];
        for variant in [Variant::Max, Variant::Multi] {
            let c = DetectorConfig::new(20, 10, 0.0, variant, Policy::Adaptive);
            let pass = first_passage(
                &e,
                &c,
                &bs,
                &[5000; 4],
                &mut ChaCha8Rng::seed_from_u64(7),
                &mut ChaCha8Rng::seed_from_u64(8),
            )
            .unwrap();
            for (m, &b) in bs.iter().enumerate() {
                let mut cb = c;
                cb.b = b;
                let r = run_episode(
                    &e,
                    &cb,
                    5000,
                    &mut ChaCha8Rng::seed_from_u64(7),
                    &mut ChaCha8Rng::seed_from_u64(8),
                )
                .unwrap();
                assert_eq!(pass.times[m], r.stop, "{variant:?} b={b}");
            }
            let t: Vec<usize> = pass.times.iter().map(|t| t.unwrap()).collect();
            assert!(t.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let e = env(&[ChangeSpec::edge(2, 1, 0.3)]);
        let c = DetectorConfig::new(20, 10, 5.0, Variant::Max, Policy::Adaptive);
        let run = || {
            run_episode(
                &e,
                &c,
                2000,
                &mut ChaCha8Rng::seed_from_u64(3),
                &mut ChaCha8Rng::seed_from_u64(4),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trace_csv_header() {
        let e = env(&[]);
        let c = DetectorConfig::new(5, 2, 1.0, Variant::Max, Policy::Adaptive);
        let r = run_episode(
            &e,
            &c,
            30,
            &mut ChaCha8Rng::seed_from_u64(3),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let mut buf = Vec::new();
        trace_to_csv(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "t,arm,explored,statistic,alarmed,lambda_1,lambda_2,lambda_3,lambda_4,w_1,w_2,w_3,w_4\n"
        ));
    }
}
