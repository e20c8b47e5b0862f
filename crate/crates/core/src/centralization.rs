//! Centering of raw observations against the intervened pre-change model, and
//! the analytic law of the centered vector after a change.
//!
//! Under `do(X_i = c)` the centered vector is
//! `Y_R = D^{-1/2} (I - A_RR) (x_R - mu_x,R)` on `R = [p] \ {i}` with
//! `Y_i = 0`. Before the change `Y_R ~ N(0, I)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sem::{symmetrize, CausalModel, ChangeSpec, Intervention};

/// A centered observation on all `p` coordinates; the intervened one is `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredObservation {
    pub y: DVector<f64>,
    pub iv: Intervention,
}

/// Mean and covariance of a centered vector restricted to `index_map`
/// (1-indexed original nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub index_map: Vec<usize>,
}

impl GaussianMoments {
    /// The pre-change law `N(0, I)` on the given coordinates.
    pub fn standard(index_map: Vec<usize>) -> Self {
        let d = index_map.len();
        GaussianMoments {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
            index_map,
        }
    }

    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    /// Position of a 1-indexed node inside the restriction, if present.
    pub fn position(&self, node: usize) -> Option<usize> {
        self.index_map.iter().position(|&n| n == node)
    }
}

/// Coordinates kept after intervening on `iv`, 1-indexed.
pub fn retained_nodes(p: usize, iv: Intervention) -> Vec<usize> {
    (1..=p).filter(|&n| n != iv.node).collect()
}

/// Precomputed affine map `x -> Y_R` for one arm.
#[derive(Debug, Clone)]
pub struct Centralizer {
    iv: Intervention,
    p: usize,
    index_map: Vec<usize>,
    /// `d x p` linear part; the intervened column is zero.
    l: DMatrix<f64>,
    /// Intervened pre-change mean, so that `Y_R = l (x - mu_x)`.
    mu_x: DVector<f64>,
}

impl Centralizer {
    pub fn new(base: &CausalModel, iv: Intervention) -> Result<Self> {
        base.require_nondegenerate()?;
        let model = base.apply_do(iv)?;
        let p = base.p();
        let (mu_x, _) = model.joint_moments();
        let index_map = retained_nodes(p, iv);
        let d = index_map.len();
        let mut l = DMatrix::<f64>::zeros(d, p);
        for (r, &node) in index_map.iter().enumerate() {
            let row = node - 1;
            let scale = 1.0 / model.sigma2()[row].sqrt();
            l[(r, row)] = scale;
            for &other in &index_map {
                let col = other - 1;
                let w = model.a()[(row, col)];
                if w != 0.0 {
                    l[(r, col)] -= scale * w;
                }
            }
        }
        Ok(Centralizer {
            iv,
            p,
            index_map,
            l,
            mu_x,
        })
    }

    pub fn intervention(&self) -> Intervention {
        self.iv
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    pub fn linear_part(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    /// Writes `Y_R` into `out` (length `d`).
    pub fn restricted_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.p);
        for (r, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, &xc) in x.iter().enumerate() {
                let w = self.l[(r, c)];
                if w != 0.0 {
                    acc += w * (xc - self.mu_x[c]);
                }
            }
            *slot = acc;
        }
    }

    pub fn restricted(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        self.restricted_into(x, &mut out);
        Ok(DVector::from_vec(out))
    }

    pub fn centralize(&self, x: &[f64]) -> Result<CenteredObservation> {
        let yr = self.restricted(x)?;
        let mut y = DVector::zeros(self.p);
        for (r, &node) in self.index_map.iter().enumerate() {
            y[node - 1] = yr[r];
        }
        Ok(CenteredObservation { y, iv: self.iv })
    }
}

/// Centers a raw observation `x` taken under `iv` against the pre-change `base`.
pub fn centralize(base: &CausalModel, iv: Intervention, x: &[f64]) -> Result<CenteredObservation> {
    Centralizer::new(base, iv)?.centralize(x)
}

/// Closed-form law of the centered observation under `iv` after the change `ch`.
pub fn post_change_moments(
    base: &CausalModel,
    ch: &ChangeSpec,
    iv: Intervention,
) -> Result<GaussianMoments> {
    base.require_nondegenerate()?;
    // validates the change itself
    base.apply_change(ch)?;
    let p = base.p();
    let index_map = retained_nodes(p, iv);
    let mut out = GaussianMoments::standard(index_map);
    let k = ch.target();
    if iv.node == k {
        return Ok(out);
    }
    let pos = out
        .position(k)
        .expect("target is retained when not intervened");
    let sigma2_k = base.sigma2()[k - 1];
    match *ch {
        ChangeSpec::EdgeWeight { origin, delta, .. } => {
            let model = base.apply_do(iv)?;
            let b = model.b_matrix();
            let s = delta / sigma2_k.sqrt();
            let jr = origin - 1;
            let mut mean_j = 0.0;
            let mut var_j = 0.0;
            for l in 0..p {
                mean_j += b[(jr, l)] * model.mu()[l];
                var_j += b[(jr, l)] * b[(jr, l)] * model.sigma2()[l];
            }
            out.mean[pos] = s * mean_j;
            for (r, &node) in out.index_map.iter().enumerate() {
                let l = node - 1;
                let u = s * b[(jr, l)] * model.sigma2()[l].sqrt();
                out.cov[(r, pos)] += u;
                out.cov[(pos, r)] += u;
            }
            out.cov[(pos, pos)] += s * s * var_j;
            symmetrize(&mut out.cov);
        }
        ChangeSpec::ExogenousMean { delta, .. } => {
            out.mean[pos] = delta / sigma2_k.sqrt();
        }
        ChangeSpec::ExogenousVariance { delta, .. } => {
            out.cov[(pos, pos)] += delta / sigma2_k;
        }
    }
    Ok(out)
}

/// Law of the centered observation when the system actually follows `truth`
/// (any model on the same nodes), by pushing `truth`'s intervened moments
/// through the centering map of `base`.
pub fn moments_from_models(
    base: &CausalModel,
    truth: &CausalModel,
    iv: Intervention,
) -> Result<GaussianMoments> {
    if truth.p() != base.p() {
        return Err(Error::DimensionMismatch {
            expected: base.p(),
            got: truth.p(),
        });
    }
    let cz = Centralizer::new(base, iv)?;
    let (m, s) = truth.apply_do(iv)?.joint_moments();
    let mean = &cz.l * (m - &cz.mu_x);
    let mut cov = &cz.l * s * cz.l.transpose();
    symmetrize(&mut cov);
    Ok(GaussianMoments {
        mean,
        cov,
        index_map: cz.index_map,
    })
}

/// Outcome of comparing sampled centered moments against their analytic values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCheck {
    pub max_mean_err: f64,
    pub max_cov_err: f64,
    /// Largest |error| / standard error over mean entries.
    pub max_mean_z: f64,
    /// Largest |error| / standard error over covariance entries.
    pub max_cov_z: f64,
}

impl MomentCheck {
    pub fn max_z(&self) -> f64 {
        self.max_mean_z.max(self.max_cov_z)
    }
}

/// Draws `n` observations from the changed system under `iv`, centers them
/// with the pre-change `base`, and compares with [`post_change_moments`].
///
/// Standard errors use the analytic covariance `C`: `sqrt(C_aa / n)` for mean
/// entries and `sqrt((C_aa C_bb + C_ab^2) / n)` for covariance entries.
pub fn empirical_moment_check<R: Rng + ?Sized>(
    base: &CausalModel,
    ch: &ChangeSpec,
    iv: Intervention,
    n: usize,
    rng: &mut R,
) -> Result<MomentCheck> {
    let target = post_change_moments(base, ch, iv)?;
    let truth = base.apply_change(ch)?.apply_do(iv)?;
    let cz = Centralizer::new(base, iv)?;
    let (mean, cov) = sample_moments(&truth, &cz, n, rng);
    Ok(compare_moments(&target, &mean, &cov, n))
}

/// Empirical mean and (biased) covariance of `n` centered draws from `truth`.
pub fn sample_moments<R: Rng + ?Sized>(
    truth: &CausalModel,
    cz: &Centralizer,
    n: usize,
    rng: &mut R,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = truth.p();
    let d = cz.dim();
    let mut z = vec![0.0; p];
    let mut y = vec![0.0; d];
    let mut sum = vec![0.0; d];
    let mut sum2 = vec![0.0; d * d];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = truth.sample_with_noise(&z);
        cz.restricted_into(x.as_slice(), &mut y);
        for a in 0..d {
            sum[a] += y[a];
            for b in 0..=a {
                sum2[a * d + b] += y[a] * y[b];
            }
        }
    }
    let nf = n as f64;
    let mean = DVector::from_fn(d, |a, _| sum[a] / nf);
    let cov = DMatrix::from_fn(d, d, |a, b| {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        sum2[hi * d + lo] / nf - mean[a] * mean[b]
    });
    (mean, cov)
}

pub(crate) fn compare_moments(
    target: &GaussianMoments,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
) -> MomentCheck {
    let nf = n as f64;
    let c = &target.cov;
    let d = target.dim();
    let ratio = |err: f64, se: f64| {
        if se > 0.0 {
            err / se
        } else if err <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let mut out = MomentCheck {
        max_mean_err: 0.0,
        max_cov_err: 0.0,
        max_mean_z: 0.0,
        max_cov_z: 0.0,
    };
    for a in 0..d {
        let err = (mean[a] - target.mean[a]).abs();
        out.max_mean_err = out.max_mean_err.max(err);
        out.max_mean_z = out.max_mean_z.max(ratio(err, (c[(a, a)] / nf).sqrt()));
        for b in 0..=a {
            let err = (cov[(a, b)] - c[(a, b)]).abs();
            let se = ((c[(a, a)] * c[(b, b)] + c[(a, b)] * c[(a, b)]) / nf).sqrt();
            out.max_cov_err = out.max_cov_err.max(err);
            out.max_cov_z = out.max_cov_z.max(ratio(err, se));
        }
    }
    out
}
