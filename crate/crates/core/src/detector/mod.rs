//! Window-limited CUSUM detectors with adaptive do-interventions.
//!
//! Each step the detector picks an arm (`0` = observe, `i` = `do(X_i = c_i)`),
//! receives the centered observation, scores it against the pre-change
//! standard normal using moments estimated from the previous `w` steps, and
//! updates the CUSUM recursion `W_t = max(W_{t-1}, 0) + L_t`.
//!
//! - [`Variant::Multi`] scores the joint vector with the windowed Gaussian MLE.
//! - [`Variant::Max`] runs one CUSUM per node on marginal estimates and alarms
//!   on the largest of them.

mod episode;
mod schedule;

pub use episode::{
    first_passage, run_episode, trace_to_csv, Environment, PassageResult, RunResult, StepRecord,
};
pub use schedule::{make_schedule, ExplorationSchedule};

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::centralization::{retained_nodes, GaussianMoments};
use crate::divergence::{argmax, kl_from_spectrum, kl_univariate};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Max,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Adaptive,
    NoIntervention,
    RandomIntervention,
}

/// The six detector/policy combinations, in the fixed order used for seeding.
pub const METHODS: [(Variant, Policy); 6] = [
    (Variant::Max, Policy::Adaptive),
    (Variant::Max, Policy::RandomIntervention),
    (Variant::Max, Policy::NoIntervention),
    (Variant::Multi, Policy::Adaptive),
    (Variant::Multi, Policy::RandomIntervention),
    (Variant::Multi, Policy::NoIntervention),
];

pub fn method_label(variant: Variant, policy: Policy) -> &'static str {
    match (variant, policy) {
        (Variant::Max, Policy::Adaptive) => "MAX-AI",
        (Variant::Max, Policy::RandomIntervention) => "MAX-RI",
        (Variant::Max, Policy::NoIntervention) => "MAX-NI",
        (Variant::Multi, Policy::Adaptive) => "MULTI-AI",
        (Variant::Multi, Policy::RandomIntervention) => "MULTI-RI",
        (Variant::Multi, Policy::NoIntervention) => "MULTI-NI",
    }
}

pub fn method_index(variant: Variant, policy: Policy) -> usize {
    METHODS
        .iter()
        .position(|&m| m == (variant, policy))
        .expect("every combination is listed")
}

pub fn parse_method(label: &str) -> Result<(Variant, Policy)> {
    METHODS
        .iter()
        .copied()
        .find(|&(v, p)| method_label(v, p).eq_ignore_ascii_case(label))
        .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{label}`")))
}

/// Bounds applied to windowed estimates: `ridge` is added to variances, then
/// eigenvalues are clipped to `[1/bound, bound]` and mean norms to `sqrt(bound)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub ridge: f64,
    pub bound: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization {
            ridge: 1e-6,
            bound: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub w: usize,
    pub q: usize,
    pub eta: f64,
    pub b: f64,
    pub variant: Variant,
    pub policy: Policy,
    pub regularization: Regularization,
    /// Minimum observations per arm before the MAX per-node estimates are used.
    pub max_floor: usize,
}

impl DetectorConfig {
    pub fn new(w: usize, q: usize, b: f64, variant: Variant, policy: Policy) -> Self {
        DetectorConfig {
            w,
            q,
            eta: 1.0,
            b,
            variant,
            policy,
            regularization: Regularization::default(),
            max_floor: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q >= self.w {
            return Err(Error::BadBudget {
                q: self.q,
                w: self.w,
            });
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if self.b.is_nan() {
            return Err(Error::InvalidConfig("threshold b is NaN".into()));
        }
        let r = self.regularization;
        if !(r.ridge >= 0.0) || !(r.bound > 1.0) || !r.bound.is_finite() {
            return Err(Error::InvalidConfig(
                "regularization needs ridge >= 0 and a finite bound > 1".into(),
            ));
        }
        if self.max_floor == 0 {
            return Err(Error::InvalidConfig("max_floor must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        method_label(self.variant, self.policy)
    }
}

/// Regularized joint estimate in spectral form.
#[derive(Debug, Clone)]
struct JointFit {
    usable: bool,
    mean: DVector<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    /// `sum ln(eigenvalues)`.
    log_det: f64,
    kl: f64,
}

impl JointFit {
    fn reference(d: usize) -> Self {
        JointFit {
            usable: false,
            mean: DVector::zeros(d),
            eigenvalues: vec![1.0; d],
            eigenvectors: DMatrix::identity(d, d),
            log_det: 0.0,
            kl: 0.0,
        }
    }

    fn from_moments(mut mean: DVector<f64>, cov: DMatrix<f64>, reg: Regularization) -> Self {
        let d = mean.len();
        if d == 0 {
            return JointFit::reference(0);
        }
        let mut cov = cov;
        for a in 0..d {
            cov[(a, a)] += reg.ridge;
        }
        let eig = SymmetricEigen::new(cov);
        let lo = 1.0 / reg.bound;
        let eigenvalues: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| if l.is_finite() { l.clamp(lo, reg.bound) } else { reg.bound })
            .collect();
        let norm = mean.norm();
        let cap = reg.bound.sqrt();
        if norm > cap {
            mean *= cap / norm;
        }
        let log_det = eigenvalues.iter().map(|l| l.ln()).sum();
        let kl = kl_from_spectrum(&eigenvalues, &mean);
        JointFit {
            usable: true,
            mean,
            eigenvalues,
            eigenvectors: eig.eigenvectors,
            log_det,
            kl,
        }
    }

    fn log_ratio(&self, y: &[f64]) -> f64 {
        if !self.usable {
            return 0.0;
        }
        let d = y.len();
        let mut quad = 0.0;
        for a in 0..d {
            let mut proj = 0.0;
            for r in 0..d {
                proj += self.eigenvectors[(r, a)] * (y[r] - self.mean[r]);
            }
            quad += proj * proj / self.eigenvalues[a];
        }
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * self.log_det - 0.5 * quad + 0.5 * norm2
    }

    fn moments(&self, index_map: Vec<usize>) -> GaussianMoments {
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        let mut cov = &self.eigenvectors * lam * self.eigenvectors.transpose();
        crate::sem::symmetrize(&mut cov);
        GaussianMoments {
            mean: self.mean.clone(),
            cov,
            index_map,
        }
    }
}

/// Regularized per-coordinate estimates.
#[derive(Debug, Clone)]
struct MarginalFit {
    usable: bool,
    mean: Vec<f64>,
    var: Vec<f64>,
    kl: f64,
}

impl MarginalFit {
    fn reference(d: usize) -> Self {
        MarginalFit {
            usable: false,
            mean: vec![0.0; d],
            var: vec![1.0; d],
            kl: 0.0,
        }
    }

    fn from_moments(mean: Vec<f64>, var: Vec<f64>, reg: Regularization) -> Self {
        let cap = reg.bound.sqrt();
        let mean: Vec<f64> = mean.into_iter().map(|m| m.clamp(-cap, cap)).collect();
        let var: Vec<f64> = var
            .into_iter()
            .map(|v| (v + reg.ridge).clamp(1.0 / reg.bound, reg.bound))
            .collect();
        let kl = mean
            .iter()
            .zip(&var)
            .map(|(&m, &v)| kl_univariate(m, v).unwrap_or(0.0))
            .fold(0.0, f64::max);
        MarginalFit {
            usable: true,
            mean,
            var,
            kl,
        }
    }

    fn log_ratio(&self, r: usize, y: f64) -> f64 {
        if !self.usable {
            return 0.0;
        }
        let (m, v) = (self.mean[r], self.var[r]);
        -0.5 * v.ln() - 0.5 * (y - m) * (y - m) / v + 0.5 * y * y
    }
}

#[derive(Debug, Clone)]
enum Fit {
    Joint(JointFit),
    Marginal(MarginalFit),
}

impl Fit {
    fn kl(&self) -> f64 {
        match self {
            Fit::Joint(f) => f.kl,
            Fit::Marginal(f) => f.kl,
        }
    }
}

/// Window estimate for one arm, after regularization or fallback.
#[derive(Debug, Clone, PartialEq)]
pub enum WindowEstimate {
    Joint {
        moments: GaussianMoments,
        usable: bool,
    },
    PerNode {
        /// `(node, mean, var)` for every retained node.
        nodes: Vec<(usize, f64, f64)>,
        usable: bool,
    },
}

/// Result of one detector update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub t: usize,
    /// One entry for MULTI, `p` entries (by node) for MAX.
    pub lambda: Vec<f64>,
    pub w: Vec<f64>,
    pub statistic: f64,
    pub alarmed: bool,
}

/// Mutable detector state for one episode.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    p: usize,
    index_maps: Vec<Vec<usize>>,
    buffer: VecDeque<(usize, Vec<f64>)>,
    counts: Vec<usize>,
    fits: Vec<Option<Fit>>,
    pinned: Vec<bool>,
    w_stat: Vec<f64>,
    t: usize,
    stop: Option<usize>,
}

impl Detector {
    pub fn new(p: usize, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        if p == 0 {
            return Err(Error::BadDimension("detector needs p >= 1".into()));
        }
        let index_maps = (0..=p)
            .map(|arm| retained_nodes(p, crate::sem::Intervention::on(arm, 0.0)))
            .collect();
        let stat_len = match config.variant {
            Variant::Multi => 1,
            Variant::Max => p,
        };
        Ok(Detector {
            config,
            p,
            index_maps,
            buffer: VecDeque::with_capacity(config.w + 1),
            counts: vec![0; p + 1],
            fits: vec![None; p + 1],
            pinned: vec![false; p + 1],
            w_stat: vec![0.0; stat_len],
            t: 0,
            stop: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of completed steps.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn stopping_time(&self) -> Option<usize> {
        self.stop
    }

    pub fn alarmed(&self) -> bool {
        self.stop.is_some()
    }

    /// Current statistic: `W_t` for MULTI, `max_l W_t^l` for MAX.
    pub fn statistic(&self) -> f64 {
        self.w_stat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn statistics(&self) -> &[f64] {
        &self.w_stat
    }

    pub fn window_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn arm_count(&self, arm: usize) -> usize {
        self.counts[arm]
    }

    fn floor(&self, arm: usize) -> usize {
        match self.config.variant {
            Variant::Multi => self.index_maps[arm].len() + 2,
            Variant::Max => self.config.max_floor,
        }
    }

    fn fit(&mut self, arm: usize) -> &Fit {
        if self.fits[arm].is_none() {
            let f = self.compute_fit(arm);
            self.fits[arm] = Some(f);
        }
        self.fits[arm].as_ref().expect("just filled")
    }

    fn compute_fit(&self, arm: usize) -> Fit {
        let d = self.index_maps[arm].len();
        let n = self.counts[arm];
        let usable = n >= self.floor(arm) && d > 0;
        match self.config.variant {
            Variant::Multi if !usable => Fit::Joint(JointFit::reference(d)),
            Variant::Max if !usable => Fit::Marginal(MarginalFit::reference(d)),
            variant => {
                let nf = n as f64;
                let mut mean = vec![0.0; d];
                for (_, y) in self.buffer.iter().filter(|(a, _)| *a == arm) {
                    for (m, v) in mean.iter_mut().zip(y) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                match variant {
                    Variant::Multi => {
                        let mut cov = DMatrix::<f64>::zeros(d, d);
                        for (_, y) in self.buffer.iter().filter(|(a, _)| *a == arm) {
                            for r in 0..d {
                                let er = y[r] - mean[r];
                                for c in 0..=r {
                                    cov[(r, c)] += er * (y[c] - mean[c]);
                                }
                            }
                        }
                        for r in 0..d {
                            for c in 0..=r {
                                let v = cov[(r, c)] / nf;
                                cov[(r, c)] = v;
                                cov[(c, r)] = v;
                            }
                        }
                        Fit::Joint(JointFit::from_moments(
                            DVector::from_vec(mean),
                            cov,
                            self.config.regularization,
                        ))
                    }
                    Variant::Max => {
                        let mut var = vec![0.0; d];
                        for (_, y) in self.buffer.iter().filter(|(a, _)| *a == arm) {
                            for r in 0..d {
                                let e = y[r] - mean[r];
                                var[r] += e * e;
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= nf);
                        Fit::Marginal(MarginalFit::from_moments(
                            mean,
                            var,
                            self.config.regularization,
                        ))
                    }
                }
            }
        }
    }

    /// Replaces the window estimate of every arm with the given moments and
    /// keeps them fixed regardless of later observations. `moments[arm]` must
    /// be restricted to the arm's retained nodes.
    pub fn pin_estimates(&mut self, moments: &[GaussianMoments]) -> Result<()> {
        if moments.len() != self.p + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.p + 1,
                got: moments.len(),
            });
        }
        let reg = self.config.regularization;
        for (arm, m) in moments.iter().enumerate() {
            if m.index_map != self.index_maps[arm] {
                return Err(Error::DimensionMismatch {
                    expected: self.index_maps[arm].len(),
                    got: m.index_map.len(),
                });
            }
            let fit = match self.config.variant {
                Variant::Multi => Fit::Joint(JointFit::from_moments(
                    m.mean.clone(),
                    m.cov.clone(),
                    Regularization { ridge: 0.0, ..reg },
                )),
                Variant::Max => Fit::Marginal(MarginalFit::from_moments(
                    m.mean.iter().copied().collect(),
                    m.cov.diagonal().iter().copied().collect(),
                    Regularization { ridge: 0.0, ..reg },
                )),
            };
            self.fits[arm] = Some(fit);
            self.pinned[arm] = true;
        }
        Ok(())
    }

    /// Regularized estimate for `arm` from the current window, or the
    /// pre-change reference when the arm is below its usability floor.
    pub fn window_estimates(&mut self, arm: usize) -> WindowEstimate {
        let index_map = self.index_maps[arm].clone();
        match self.fit(arm).clone() {
            Fit::Joint(f) => WindowEstimate::Joint {
                usable: f.usable,
                moments: f.moments(index_map),
            },
            Fit::Marginal(f) => WindowEstimate::PerNode {
                usable: f.usable,
                nodes: index_map
                    .iter()
                    .enumerate()
                    .map(|(r, &n)| (n, f.mean[r], f.var[r]))
                    .collect(),
            },
        }
    }

    /// Estimated divergence of every arm: full KL for MULTI, largest marginal
    /// KL over retained nodes for MAX.
    pub fn estimated_kls(&mut self) -> Vec<f64> {
        (0..=self.p).map(|arm| self.fit(arm).kl()).collect()
    }

    /// The exploitation arm: largest estimated KL, lowest index on ties.
    pub fn exploit_arm(&mut self) -> usize {
        argmax(&self.estimated_kls())
    }

    /// Picks the arm for the next step. Returns the arm and whether the step
    /// belongs to the warm-up or the exploration schedule.
    pub fn choose_arm<R: Rng + ?Sized>(
        &mut self,
        schedule: &ExplorationSchedule,
        rng: &mut R,
    ) -> (usize, bool) {
        let t = self.t + 1;
        let explore = t <= self.config.w || schedule.contains(t);
        let arm = match self.config.policy {
            Policy::NoIntervention => 0,
            Policy::RandomIntervention => rng.random_range(0..=self.p),
            Policy::Adaptive if explore => rng.random_range(0..=self.p),
            Policy::Adaptive => self.exploit_arm(),
        };
        (arm, explore)
    }

    /// Scores the centered observation `y` (restricted to the arm's retained
    /// nodes) with the estimates from the previous `w` steps, updates the
    /// CUSUM statistics, then adds `y` to the window.
    pub fn step(&mut self, arm: usize, y: &[f64]) -> Result<StepOutcome> {
        if arm > self.p {
            return Err(Error::NodeOutOfRange {
                node: arm,
                p: self.p,
            });
        }
        let d = self.index_maps[arm].len();
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: y.len(),
            });
        }
        self.t += 1;
        let t = self.t;
        let w = self.config.w;
        let lambda = if t <= w {
            vec![0.0; self.w_stat.len()]
        } else {
            let p = self.p;
            let index_map = self.index_maps[arm].clone();
            match self.fit(arm) {
                Fit::Joint(f) => vec![f.log_ratio(y)],
                Fit::Marginal(f) => {
                    let mut l = vec![0.0; p];
                    for (r, &node) in index_map.iter().enumerate() {
                        l[node - 1] = f.log_ratio(r, y[r]);
                    }
                    l
                }
            }
        };
        if t > w {
            for (ws, &l) in self.w_stat.iter_mut().zip(&lambda) {
                *ws = ws.max(0.0) + l;
            }
        }
        let statistic = self.statistic();
        if t > w && self.stop.is_none() && statistic > self.config.b {
            self.stop = Some(t);
        }
        self.push(arm, y.to_vec());
        Ok(StepOutcome {
            t,
            lambda,
            w: self.w_stat.clone(),
            statistic,
            alarmed: self.stop.is_some(),
        })
    }

    fn push(&mut self, arm: usize, y: Vec<f64>) {
        self.buffer.push_back((arm, y));
        self.counts[arm] += 1;
        self.invalidate(arm);
        if self.buffer.len() > self.config.w {
            let (old, _) = self.buffer.pop_front().expect("non-empty");
            self.counts[old] -= 1;
            self.invalidate(old);
        }
    }

    fn invalidate(&mut self, arm: usize) {
        if !self.pinned[arm] {
            self.fits[arm] = None;
        }
    }
}
