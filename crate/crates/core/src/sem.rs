//! Linear structural equation models `X = A X + U`, `U ~ N(mu, diag(sigma2))`.
//!
//! Nodes are numbered `1..=p` on the public surface and are assumed to be in
//! topological order, so `A` is strictly lower triangular. Internally the
//! matrices are 0-indexed; `node - 1` converts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A do-intervention. Node `0` is the "no intervention" arm and carries no value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub node: usize,
    #[serde(default)]
    pub value: f64,
}

impl Intervention {
    pub const fn none() -> Self {
        Intervention {
            node: 0,
            value: 0.0,
        }
    }

    pub const fn on(node: usize, value: f64) -> Self {
        Intervention { node, value }
    }

    pub fn is_none(&self) -> bool {
        self.node == 0
    }
}

/// A single-element change of the model triplet.
///
/// For `EdgeWeight`, `origin` is the parent `j` and `target` the child `k`
/// of the edge `j -> k` whose weight `A[k][j]` moves by `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ChangeSpec {
    EdgeWeight {
        target: usize,
        origin: usize,
        delta: f64,
    },
    ExogenousMean {
        node: usize,
        delta: f64,
    },
    ExogenousVariance {
        node: usize,
        delta: f64,
    },
}

impl ChangeSpec {
    pub fn edge(target: usize, origin: usize, delta: f64) -> Self {
        ChangeSpec::EdgeWeight {
            target,
            origin,
            delta,
        }
    }

    pub fn delta(&self) -> f64 {
        match *self {
            ChangeSpec::EdgeWeight { delta, .. }
            | ChangeSpec::ExogenousMean { delta, .. }
            | ChangeSpec::ExogenousVariance { delta, .. } => delta,
        }
    }

    /// The node whose structural equation the change touches.
    pub fn target(&self) -> usize {
        match *self {
            ChangeSpec::EdgeWeight { target, .. } => target,
            ChangeSpec::ExogenousMean { node, .. } | ChangeSpec::ExogenousVariance { node, .. } => {
                node
            }
        }
    }

    pub fn with_delta(self, delta: f64) -> Self {
        match self {
            ChangeSpec::EdgeWeight { target, origin, .. } => ChangeSpec::EdgeWeight {
                target,
                origin,
                delta,
            },
            ChangeSpec::ExogenousMean { node, .. } => ChangeSpec::ExogenousMean { node, delta },
            ChangeSpec::ExogenousVariance { node, .. } => {
                ChangeSpec::ExogenousVariance { node, delta }
            }
        }
    }
}

/// The triplet `(A, mu, Sigma)` with diagonal `Sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct CausalModel {
    a: DMatrix<f64>,
    mu: DVector<f64>,
    sigma2: DVector<f64>,
    labels: Option<Vec<String>>,
}

impl CausalModel {
    pub fn new(a: DMatrix<f64>, mu: DVector<f64>, sigma2: DVector<f64>) -> Result<Self> {
        let model = CausalModel {
            a,
            mu,
            sigma2,
            labels: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds a model from row-major slices.
    pub fn from_rows(a: &[Vec<f64>], mu: &[f64], sigma2: &[f64]) -> Result<Self> {
        let p = mu.len();
        if a.len() != p || a.iter().any(|row| row.len() != p) {
            return Err(Error::BadDimension(format!(
                "A must be {p}x{p} to match mu of length {p}"
            )));
        }
        let a = DMatrix::from_fn(p, p, |i, j| a[i][j]);
        CausalModel::new(a, DVector::from_column_slice(mu), DVector::from_column_slice(sigma2))
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.p() {
            return Err(Error::BadDimension(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.p()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Checks the structural invariants: square `p x p` weights, strictly lower
    /// triangular `A`, finite entries and non-negative variances.
    pub fn validate(&self) -> Result<()> {
        let p = self.mu.len();
        if p == 0 {
            return Err(Error::BadDimension("model needs at least one node".into()));
        }
        if self.a.nrows() != p || self.a.ncols() != p || self.sigma2.len() != p {
            return Err(Error::BadDimension(format!(
                "A is {}x{}, mu has {} entries, sigma2 has {}",
                self.a.nrows(),
                self.a.ncols(),
                p,
                self.sigma2.len()
            )));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("A"));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mu"));
        }
        if self.sigma2.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sigma2"));
        }
        for i in 0..p {
            for j in i..p {
                let value = self.a[(i, j)];
                if value != 0.0 {
                    return Err(Error::NotLowerTriangular {
                        row: i + 1,
                        col: j + 1,
                        value,
                    });
                }
            }
        }
        for (i, &s) in self.sigma2.iter().enumerate() {
            if s < 0.0 {
                return Err(Error::NegativeVariance {
                    node: i + 1,
                    value: s,
                });
            }
        }
        Ok(())
    }

    /// Rejects point-mass coordinates. Only `apply_do` may produce them, so a
    /// pre-change reference model must have every variance strictly positive.
    pub fn require_nondegenerate(&self) -> Result<()> {
        match self.sigma2.iter().position(|&s| s <= 0.0) {
            Some(i) => Err(Error::DegenerateVariance { node: i + 1 }),
            None => Ok(()),
        }
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma2(&self) -> &DVector<f64> {
        &self.sigma2
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label for a 1-indexed node, falling back to `X<node>`.
    pub fn label(&self, node: usize) -> String {
        match &self.labels {
            Some(labels) if node >= 1 && node <= labels.len() => labels[node - 1].clone(),
            _ => format!("X{node}"),
        }
    }

    /// `A[target][origin]` with 1-indexed nodes.
    pub fn weight(&self, target: usize, origin: usize) -> f64 {
        self.a[(target - 1, origin - 1)]
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node == 0 || node > self.p() {
            return Err(Error::NodeOutOfRange { node, p: self.p() });
        }
        Ok(())
    }

    /// Parents of a 1-indexed node, ascending.
    pub fn parents(&self, node: usize) -> Vec<usize> {
        (1..node).filter(|&m| self.a[(node - 1, m - 1)] != 0.0).collect()
    }

    /// Structural ancestors of a 1-indexed node, ascending.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut is_anc = vec![false; self.p() + 1];
        let mut stack = self.parents(node);
        while let Some(m) = stack.pop() {
            if !is_anc[m] {
                is_anc[m] = true;
                stack.extend(self.parents(m));
            }
        }
        (1..=self.p()).filter(|&m| is_anc[m]).collect()
    }

    /// All edges as `(target, origin)` pairs, ordered by target then origin.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.p();
        let mut out = Vec::new();
        for k in 1..=p {
            for j in 1..k {
                if self.a[(k - 1, j - 1)] != 0.0 {
                    out.push((k, j));
                }
            }
        }
        out
    }

    /// In- and out-degree of every node (index `node - 1`).
    pub fn degrees(&self) -> (Vec<usize>, Vec<usize>) {
        let p = self.p();
        let mut indeg = vec![0; p];
        let mut outdeg = vec![0; p];
        for (k, j) in self.edges() {
            indeg[k - 1] += 1;
            outdeg[j - 1] += 1;
        }
        (indeg, outdeg)
    }

    /// The intervened triplet: row `node` of `A` cleared, `mu[node] = value`,
    /// `sigma2[node] = 0`. Arm 0 returns the model unchanged.
    pub fn apply_do(&self, iv: Intervention) -> Result<CausalModel> {
        if iv.node == 0 {
            return Ok(self.clone());
        }
        self.check_node(iv.node)?;
        if !iv.value.is_finite() {
            return Err(Error::NonFinite("intervention value"));
        }
        let i = iv.node - 1;
        let mut out = self.clone();
        out.a.row_mut(i).fill(0.0);
        out.mu[i] = iv.value;
        out.sigma2[i] = 0.0;
        Ok(out)
    }

    /// `B = (I - A)^{-1}`, built row by row from `B = I + A B`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut b = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            b[(i, i)] = 1.0;
            for m in 0..i {
                let w = self.a[(i, m)];
                if w != 0.0 {
                    for c in 0..=m {
                        b[(i, c)] += w * b[(m, c)];
                    }
                }
            }
        }
        b
    }

    /// Mean and covariance of `X`: `(B mu, B diag(sigma2) B^T)`.
    pub fn joint_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let b = self.b_matrix();
        let mean = &b * &self.mu;
        let scaled = DMatrix::from_fn(self.p(), self.p(), |r, c| b[(r, c)] * self.sigma2[c]);
        let mut cov = scaled * b.transpose();
        symmetrize(&mut cov);
        (mean, cov)
    }

    /// Forward substitution of `X = A X + mu + sqrt(sigma2) * z` for a given
    /// standard-normal draw `z`. Point-mass coordinates come out exactly `mu[i]`.
    pub fn sample_with_noise(&self, z: &[f64]) -> DVector<f64> {
        let p = self.p();
        assert_eq!(z.len(), p, "noise vector has wrong length");
        let mut x = DVector::<f64>::zeros(p);
        for i in 0..p {
            let s = self.sigma2[i];
            let mut v = self.mu[i];
            if s > 0.0 {
                v += s.sqrt() * z[i];
            }
            for m in 0..i {
                let w = self.a[(i, m)];
                if w != 0.0 {
                    v += w * x[m];
                }
            }
            x[i] = v;
        }
        x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z: Vec<f64> = (0..self.p()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&z)
    }

    /// The post-change triplet with exactly one element moved by `delta`.
    pub fn apply_change(&self, ch: &ChangeSpec) -> Result<CausalModel> {
        if !ch.delta().is_finite() {
            return Err(Error::NonFinite("change magnitude"));
        }
        let mut out = self.clone();
        match *ch {
            ChangeSpec::EdgeWeight {
                target,
                origin,
                delta,
            } => {
                self.check_node(target)?;
                self.check_node(origin)?;
                if origin >= target {
                    return Err(Error::WouldCreateCycle { target, origin });
                }
                out.a[(target - 1, origin - 1)] += delta;
            }
            ChangeSpec::ExogenousMean { node, delta } => {
                self.check_node(node)?;
                out.mu[node - 1] += delta;
            }
            ChangeSpec::ExogenousVariance { node, delta } => {
                self.check_node(node)?;
                let v = out.sigma2[node - 1] + delta;
                if v < 0.0 {
                    return Err(Error::NegativeVariance { node, value: v });
                }
                out.sigma2[node - 1] = v;
            }
        }
        Ok(out)
    }

    /// Applies a list of changes in order.
    pub fn apply_changes(&self, changes: &[ChangeSpec]) -> Result<CausalModel> {
        changes
            .iter()
            .try_fold(self.clone(), |m, ch| m.apply_change(ch))
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Topological order of an arbitrary weight matrix (`a[i][j] != 0` means the
/// edge `j -> i`), 1-indexed. Ties go to the lowest original index.
pub fn topological_order(a: &DMatrix<f64>) -> Result<Vec<usize>> {
    let p = a.nrows();
    if a.ncols() != p {
        return Err(Error::BadDimension("weight matrix must be square".into()));
    }
    let mut indeg: Vec<usize> = (0..p)
        .map(|i| (0..p).filter(|&j| a[(i, j)] != 0.0).count())
        .collect();
    let mut done = vec![false; p];
    let mut order = Vec::with_capacity(p);
    for _ in 0..p {
        let next = (0..p).find(|&i| !done[i] && indeg[i] == 0).ok_or(Error::Cyclic)?;
        done[next] = true;
        order.push(next + 1);
        for i in 0..p {
            if a[(i, next)] != 0.0 {
                indeg[i] -= 1;
            }
        }
    }
    Ok(order)
}

/// Re-indexes a model given in arbitrary node order so that `A` becomes
/// strictly lower triangular. Returns the model and the original (1-indexed)
/// node now sitting at each position.
pub fn reorder_topologically(
    a: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma2: &DVector<f64>,
    labels: Option<Vec<String>>,
) -> Result<(CausalModel, Vec<usize>)> {
    let p = a.nrows();
    if mu.len() != p || sigma2.len() != p {
        return Err(Error::BadDimension("mu/sigma2 length must match A".into()));
    }
    let order = topological_order(a)?;
    let new_a = DMatrix::from_fn(p, p, |r, c| a[(order[r] - 1, order[c] - 1)]);
    let new_mu = DVector::from_fn(p, |r, _| mu[order[r] - 1]);
    let new_s = DVector::from_fn(p, |r, _| sigma2[order[r] - 1]);
    let mut model = CausalModel::new(new_a, new_mu, new_s)?;
    if let Some(labels) = labels {
        let relabeled = order.iter().map(|&o| labels[o - 1].clone()).collect();
        model = model.with_labels(relabeled)?;
    }
    Ok((model, order))
}

/// On-disk representation of a [`CausalModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub p: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl TryFrom<ModelFile> for CausalModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.mu.len() != f.p {
            return Err(Error::BadDimension(format!(
                "p = {} but mu has {} entries",
                f.p,
                f.mu.len()
            )));
        }
        let model = CausalModel::from_rows(&f.a, &f.mu, &f.sigma2)?;
        match f.labels {
            Some(labels) => model.with_labels(labels),
            None => Ok(model),
        }
    }
}

impl From<CausalModel> for ModelFile {
    fn from(m: CausalModel) -> Self {
        let p = m.p();
        ModelFile {
            p,
            a: (0..p)
                .map(|r| (0..p).map(|c| m.a[(r, c)]).collect())
                .collect(),
            mu: m.mu.iter().copied().collect(),
            sigma2: m.sigma2.iter().copied().collect(),
            labels: m.labels,
        }
    }
}
