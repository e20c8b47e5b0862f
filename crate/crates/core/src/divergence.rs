//! KL divergences of centered post-change laws from the standard normal.
//!
//! All divergences are `D(N(m, S) || N(0, I_d)) = 1/2 (tr S - d + m'm - ln|S|)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::centralization::{post_change_moments, GaussianMoments};
use crate::error::{Error, Result};
use crate::sem::{CausalModel, ChangeSpec, Intervention};

/// Eigenvalues are projected onto `[EIG_FLOOR, EIG_CEIL]` before use.
pub const EIG_FLOOR: f64 = 1e-12;
pub const EIG_CEIL: f64 = 1e12;

/// Eigenvalues of a symmetric matrix, rejecting clearly indefinite input.
pub(crate) fn checked_eigen(cov: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    let eig = SymmetricEigen::new(cov.clone());
    let scale = cov.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::SingularCovariance);
    }
    Ok(eig)
}

/// KL from eigenvalues of the covariance and the mean.
pub(crate) fn kl_from_spectrum(eigenvalues: &[f64], mean: &DVector<f64>) -> f64 {
    let mut acc = mean.norm_squared();
    for &l in eigenvalues {
        let l = l.clamp(EIG_FLOOR, EIG_CEIL);
        acc += l - 1.0 - l.ln();
    }
    (0.5 * acc).max(0.0)
}

/// `D(N(mean, cov) || N(0, I))`.
pub fn gaussian_kl(m: &GaussianMoments) -> Result<f64> {
    let d = m.dim();
    if m.mean.len() != d || m.cov.nrows() != d || m.cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m.cov.nrows(),
        });
    }
    if d == 0 {
        return Ok(0.0);
    }
    if m.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean"));
    }
    let eig = checked_eigen(&m.cov)?;
    Ok(kl_from_spectrum(eig.eigenvalues.as_slice(), &m.mean))
}

/// One-dimensional `D(N(m, v) || N(0, 1)) = 1/2 (m^2 + v - 1 - ln v)`.
pub fn kl_univariate(mean: f64, var: f64) -> Result<f64> {
    if !mean.is_finite() || !var.is_finite() || var <= 0.0 {
        return Err(Error::SingularCovariance);
    }
    let v = var.clamp(EIG_FLOOR, EIG_CEIL);
    Ok((0.5 * (mean * mean + v - 1.0 - v.ln())).max(0.0))
}

/// Full-vector KL of the centered post-change law under `iv`.
pub fn kl_full(base: &CausalModel, ch: &ChangeSpec, iv: Intervention) -> Result<f64> {
    gaussian_kl(&post_change_moments(base, ch, iv)?)
}

/// KL of the marginal of coordinate `l` (1-indexed); zero for the pinned node.
pub fn kl_marginal(base: &CausalModel, ch: &ChangeSpec, iv: Intervention, l: usize) -> Result<f64> {
    if l == 0 || l > base.p() {
        return Err(Error::NodeOutOfRange { node: l, p: base.p() });
    }
    if l == iv.node {
        return Ok(0.0);
    }
    let m = post_change_moments(base, ch, iv)?;
    marginal_of(&m, l)
}

fn marginal_of(m: &GaussianMoments, l: usize) -> Result<f64> {
    let r = m.position(l).expect("retained coordinate");
    kl_univariate(m.mean[r], m.cov[(r, r)])
}

/// KL divergences for every arm `0..=p`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTable {
    /// `full[i]`: full-vector KL under arm `i`.
    pub full: Vec<f64>,
    /// `marginal[i][l - 1]`: marginal KL of node `l` under arm `i`.
    pub marginal: Vec<Vec<f64>>,
}

impl KlTable {
    /// Arm with the largest full KL; ties go to the lowest index.
    pub fn argmax_full(&self) -> usize {
        argmax(&self.full)
    }

    /// Arm with the largest per-node marginal KL; ties go to the lowest index.
    pub fn argmax_marginal(&self) -> usize {
        let best: Vec<f64> = self
            .marginal
            .iter()
            .map(|row| row.iter().copied().fold(0.0, f64::max))
            .collect();
        argmax(&best)
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Analytic KL table for the change `ch` with intervention values `c`
/// (`c[j - 1]` is used for arm `j`).
pub fn kl_table(base: &CausalModel, ch: &ChangeSpec, c: &[f64]) -> Result<KlTable> {
    let p = base.p();
    if c.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: c.len(),
        });
    }
    let mut full = Vec::with_capacity(p + 1);
    let mut marginal = Vec::with_capacity(p + 1);
    for arm in 0..=p {
        let iv = if arm == 0 {
            Intervention::none()
        } else {
            Intervention::on(arm, c[arm - 1])
        };
        let m = post_change_moments(base, ch, iv)?;
        full.push(gaussian_kl(&m)?);
        let mut row = vec![0.0; p];
        for l in 1..=p {
            if l != arm {
                row[l - 1] = marginal_of(&m, l)?;
            }
        }
        marginal.push(row);
    }
    Ok(KlTable { full, marginal })
}

/// KL of window-estimated moments against the pre-change reference.
pub fn estimated_kl(est: &GaussianMoments) -> Result<f64> {
    gaussian_kl(est)
}

/// Marginal version of [`estimated_kl`] for one coordinate.
pub fn estimated_kl_marginal(mean: f64, var: f64) -> Result<f64> {
    kl_univariate(mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centralization::retained_nodes;
    use proptest::prelude::*;

    fn moments(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianMoments {
        let d = mean.len();
        GaussianMoments {
            mean: DVector::from_vec(mean),
            cov,
            index_map: (1..=d).collect(),
        }
    }

    fn mixed() -> CausalModel {
        CausalModel::from_rows(
            &[
                vec![0.0, 0.0, 0.0, 0.0],
                vec![1.3, 0.0, 0.0, 0.0],
                vec![-0.4, 0.0, 0.0, 0.0],
                vec![0.0, 1.7, 0.9, 0.0],
            ],
            &[0.3, -0.8, 0.5, 0.1],
            &[0.7, 1.4, 0.6, 1.9],
        )
        .unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let m = GaussianMoments::standard(vec![1, 2, 3]);
        assert_eq!(gaussian_kl(&m).unwrap(), 0.0);
        assert_eq!(gaussian_kl(&GaussianMoments::standard(vec![])).unwrap(), 0.0);
    }

    #[test]
    fn pure_mean_shift() {
        let m = moments(vec![0.5, -1.5], DMatrix::identity(2, 2));
        assert!((gaussian_kl(&m).unwrap() - 0.5 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn indefinite_rejected() {
        let m = moments(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(gaussian_kl(&m), Err(Error::SingularCovariance)));
    }

    #[test]
    fn do_origin_closed_form() {
        let m = mixed();
        let (k, j, delta, c) = (4, 2, 0.3, 5.0);
        let ch = ChangeSpec::edge(k, j, delta);
        let got = kl_full(&m, &ch, Intervention::on(j, c)).unwrap();
        let expect = 0.5 * delta * delta * c * c / 1.9;
        assert!((got - expect).abs() < 1e-14);
        let marg = kl_marginal(&m, &ch, Intervention::on(j, c), k).unwrap();
        assert!((marg - got).abs() < 1e-14);
        assert_eq!(kl_full(&m, &ch, Intervention::on(k, c)).unwrap(), 0.0);
    }

    #[test]
    fn off_target_marginals_vanish() {
        let m = mixed();
        let ch = ChangeSpec::edge(4, 1, 0.7);
        let t = kl_table(&m, &ch, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for (arm, row) in t.marginal.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                if l + 1 != 4 {
                    assert!(v.abs() < 1e-12, "arm {arm} node {}", l + 1);
                }
            }
            if arm > 0 {
                assert_eq!(row[arm - 1], 0.0);
            }
        }
    }

    #[test]
    fn zero_change_table_is_zero() {
        let m = mixed();
        let t = kl_table(&m, &ChangeSpec::edge(4, 2, 0.0), &[3.0; 4]).unwrap();
        assert!(t.full.iter().all(|&v| v == 0.0));
        assert!(t.marginal.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn marginal_quadrature_oracle() {
        // iv = none, l = k: compare against a trapezoid integral of f ln(f/f0)
        let m = mixed();
        let ch = ChangeSpec::edge(4, 2, 0.6);
        let mo = crate::centralization::post_change_moments(&m, &ch, Intervention::none()).unwrap();
        let r = mo.position(4).unwrap();
        let (mu, var) = (mo.mean[r], mo.cov[(r, r)]);
        let sd = var.sqrt();
        let n = 200_000;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = lo + h * i as f64;
            let lf = -0.5 * ((x - mu) / sd).powi(2) - sd.ln();
            let l0 = -0.5 * x * x;
            let f = lf.exp() / (2.0 * std::f64::consts::PI).sqrt();
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += wgt * f * (lf - l0);
        }
        acc *= h;
        let got = kl_marginal(&m, &ch, Intervention::none(), 4).unwrap();
        assert!((got - acc).abs() < 1e-8, "{got} vs {acc}");
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn estimated_matches_analytic() {
        let m = mixed();
        let ch = ChangeSpec::edge(4, 2, 0.4);
        let iv = Intervention::on(1, 2.0);
        let mo = crate::centralization::post_change_moments(&m, &ch, iv).unwrap();
        assert_eq!(estimated_kl(&mo).unwrap(), kl_full(&m, &ch, iv).unwrap());
        assert_eq!(
            estimated_kl(&GaussianMoments::standard(retained_nodes(4, iv))).unwrap(),
            0.0
        );
    }

    fn spd(d: usize) -> impl Strategy<Value = (Vec<f64>, DMatrix<f64>)> {
        (
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec(-1.0f64..1.0, d * d),
            prop::collection::vec(0.2f64..3.0, d),
        )
            .prop_map(move |(mean, g, diag)| {
                let g = DMatrix::from_vec(d, d, g);
                let cov = &g * g.transpose() + DMatrix::from_diagonal(&DVector::from_vec(diag));
                (mean, cov)
            })
    }

    proptest! {
        #[test]
        fn kl_nonnegative((mean, cov) in (1usize..6).prop_flat_map(spd)) {
            let v = gaussian_kl(&moments(mean, cov)).unwrap();
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn marginal_never_exceeds_joint(
            k in 2usize..=4, delta in -2.0f64..2.0, arm in 0usize..=4, c in 0.1f64..20.0
        ) {
            let m = mixed();
            let parents = m.parents(k);
            prop_assume!(!parents.is_empty());
            let j = parents[0];
            let ch = ChangeSpec::edge(k, j, delta);
            let iv = Intervention::on(arm, c);
            let full = kl_full(&m, &ch, iv).unwrap();
            for l in 1..=4 {
                prop_assert!(kl_marginal(&m, &ch, iv, l).unwrap() <= full + 1e-10);
            }
        }

        #[test]
        fn argmax_scale_invariant(vals in prop::collection::vec(0.0f64..10.0, 1..8), s in 0.01f64..100.0) {
            let scaled: Vec<f64> = vals.iter().map(|v| v * s).collect();
            prop_assert_eq!(argmax(&vals), argmax(&scaled));
        }
    }
}
