//! Curvature operators `H` and inverse-Hessian-vector products `H⁻¹v`.
//!
//! Three kinds are available, all including the `δI` regularizer term:
//! the exact Hessian (dense), the damped empirical Fisher `JᵀJ + δI` (dense)
//! and an eigenvalue-corrected Kronecker factorization (EK-FAC) whose memory
//! is linear in the layer widths.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CcbmError, Result};
use crate::model::Objective;
use crate::par;

/// Largest parameter count for which dense curvature is formed.
pub const DENSE_LIMIT: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureKind {
    ExactHessian,
    DampedFisher,
    Ekfac,
}

impl CurvatureKind {
    pub const ALL: [CurvatureKind; 3] = [
        CurvatureKind::ExactHessian,
        CurvatureKind::DampedFisher,
        CurvatureKind::Ekfac,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CurvatureKind::ExactHessian => "exact-hessian",
            CurvatureKind::DampedFisher => "damped-fisher",
            CurvatureKind::Ekfac => "ekfac",
        }
    }
}

impl std::fmt::Display for CurvatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CurvatureKind {
    type Err = CcbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-hessian" | "exact" => Ok(CurvatureKind::ExactHessian),
            "damped-fisher" | "fisher" => Ok(CurvatureKind::DampedFisher),
            "ekfac" | "ek-fac" => Ok(CurvatureKind::Ekfac),
            other => Err(CcbmError::InvalidConfig(format!(
                "unknown curvature kind '{other}'"
            ))),
        }
    }
}

/// Which predictor an operator belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureTarget {
    ConceptPredictor,
    LabelPredictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvatureOptions {
    pub kind: CurvatureKind,
    /// Per-layer EK-FAC damping; defaults to δ for every layer.
    pub layer_damping: Option<Vec<f64>>,
    pub dense_limit: usize,
    /// Finite-difference step for Hessians without a closed form.
    pub fd_step: f64,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        CurvatureOptions {
            kind: CurvatureKind::ExactHessian,
            layer_damping: None,
            dense_limit: DENSE_LIMIT,
            fd_step: 1e-5,
        }
    }
}

impl CurvatureOptions {
    pub fn new(kind: CurvatureKind) -> Self {
        CurvatureOptions {
            kind,
            ..Default::default()
        }
    }
}

/// Symmetric dense matrix with a cached factorization.
#[derive(Clone, Debug)]
pub struct DenseCurvature {
    pub matrix: DMatrix<f64>,
    solver: DenseSolver,
}

#[derive(Clone, Debug)]
enum DenseSolver {
    Cholesky(Cholesky<f64, Dyn>),
    /// Fallback for indefinite matrices (possible for non-convex `g`).
    Eigen {
        vectors: DMatrix<f64>,
        values: DVector<f64>,
    },
}

impl DenseCurvature {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(CcbmError::NonFinite("curvature matrix".into()));
        }
        let solver = match Cholesky::new(matrix.clone()) {
            Some(c) => DenseSolver::Cholesky(c),
            None => {
                let eig = SymmetricEigen::try_new(matrix.clone(), 1e-14, 10_000)
                    .ok_or_else(|| CcbmError::Eigen("dense curvature did not converge".into()))?;
                let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
                let smallest = eig
                    .eigenvalues
                    .iter()
                    .fold(f64::INFINITY, |m, v| m.min(v.abs()));
                if smallest <= 1e-13 * scale {
                    return Err(CcbmError::Singular(format!(
                        "smallest |eigenvalue| {smallest:.3e} relative to {scale:.3e}"
                    )));
                }
                log::debug!("curvature is indefinite; solving through its eigendecomposition");
                DenseSolver::Eigen {
                    vectors: eig.eigenvectors,
                    values: eig.eigenvalues,
                }
            }
        };
        Ok(DenseCurvature { matrix, solver })
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.solver {
            DenseSolver::Cholesky(c) => c.solve(v),
            DenseSolver::Eigen { vectors, values } => {
                let mut p = vectors.tr_mul(v);
                p.component_div_assign(values);
                vectors * p
            }
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        matches!(self.solver, DenseSolver::Cholesky(_))
    }
}

/// EK-FAC factors of one dense layer with `n_out` outputs and `n_in`
/// (homogeneous coordinate included) inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfacLayer {
    pub n_out: usize,
    pub n_in: usize,
    pub n_samples: usize,
    /// Input covariance `Ω = (1/n) Σ h̃ h̃ᵀ` and its eigenbasis.
    pub omega: DMatrix<f64>,
    pub q_omega: DMatrix<f64>,
    pub omega_eigenvalues: DVector<f64>,
    /// Pre-activation gradient covariance `Γ = (1/n) Σ e eᵀ` and its eigenbasis.
    pub gamma: DMatrix<f64>,
    pub q_gamma: DMatrix<f64>,
    pub gamma_eigenvalues: DVector<f64>,
    /// Corrected eigenvalues `Λ*_{uv} = (1/n) Σ (Q_Γᵀe)_u² (Q_Ωᵀh̃)_v²`, `n_out × n_in`.
    pub lambda_star: DMatrix<f64>,
    pub damping: f64,
}

fn symmetric_eigen(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(CcbmError::NonFinite(format!("{what} factor")));
    }
    let eig = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| CcbmError::Eigen(format!("{what} factor did not converge")))?;
    Ok((eig.eigenvectors, eig.eigenvalues))
}

impl EkfacLayer {
    /// Fits the factors from stacked statistics: `inputs` is `n × n_in`
    /// (rows `h̃_i`), `grads` is `n × n_out` (rows `e_i`).
    pub fn fit(inputs: &DMatrix<f64>, grads: &DMatrix<f64>, damping: f64) -> Result<EkfacLayer> {
        let n = inputs.nrows();
        if grads.nrows() != n {
            return Err(CcbmError::Shape(format!(
                "{} layer inputs but {} layer gradients",
                n,
                grads.nrows()
            )));
        }
        let scale = if n == 0 { 1.0 } else { 1.0 / n as f64 };
        let omega = par::gram_rows(inputs) * scale;
        let gamma = par::gram_rows(grads) * scale;
        let (q_omega, omega_eigenvalues) = symmetric_eigen(&omega, "input covariance")?;
        let (q_gamma, gamma_eigenvalues) = symmetric_eigen(&gamma, "gradient covariance")?;
        let a = (grads * &q_gamma).map(|v| v * v);
        let b = (inputs * &q_omega).map(|v| v * v);
        let lambda_star = a.tr_mul(&b) * scale;
        Ok(EkfacLayer {
            n_out: grads.ncols(),
            n_in: inputs.ncols(),
            n_samples: n,
            omega,
            q_omega,
            omega_eigenvalues,
            gamma,
            q_gamma,
            gamma_eigenvalues,
            lambda_star,
            damping,
        })
    }

    /// Reference per-sample loop for `Λ*`, used to check the batched form.
    pub fn lambda_star_naive(&self, inputs: &DMatrix<f64>, grads: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_out, self.n_in);
        for i in 0..inputs.nrows() {
            let e = self.q_gamma.tr_mul(&grads.row(i).transpose());
            let h = self.q_omega.tr_mul(&inputs.row(i).transpose());
            for u in 0..self.n_out {
                for v in 0..self.n_in {
                    out[(u, v)] += e[u] * e[u] * h[v] * h[v];
                }
            }
        }
        if inputs.nrows() > 0 {
            out /= inputs.nrows() as f64;
        }
        out
    }

    /// Eigenvalues of the damped layer block: `n Λ* + λ`.
    pub fn eigenvalues(&self) -> DMatrix<f64> {
        self.lambda_star
            .map(|v| v * self.n_samples as f64 + self.damping)
    }

    fn matrix_of(&self, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_out, self.n_in, v)
    }

    fn write_rows(m: &DMatrix<f64>, out: &mut [f64]) {
        let n_in = m.ncols();
        for r in 0..m.nrows() {
            for c in 0..n_in {
                out[r * n_in + c] = m[(r, c)];
            }
        }
    }

    fn transform(&self, v: &[f64], out: &mut [f64], invert: bool) -> Result<()> {
        let vm = self.matrix_of(v);
        let mut p = self.q_gamma.tr_mul(&vm) * &self.q_omega;
        let ev = self.eigenvalues();
        if invert {
            if let Some(bad) = ev.iter().find(|x| x.abs() < 1e-300) {
                return Err(CcbmError::Singular(format!("EK-FAC eigenvalue {bad:.3e}")));
            }
            p.component_div_assign(&ev);
        } else {
            p.component_mul_assign(&ev);
        }
        let back = &self.q_gamma * p * self.q_omega.transpose();
        Self::write_rows(&back, out);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.n_out * self.n_in
    }
}

#[derive(Clone, Debug)]
enum Payload {
    Dense(DenseCurvature),
    Ekfac(Vec<EkfacLayer>),
}

/// A fitted curvature operator for one predictor.
#[derive(Clone, Debug)]
pub struct CurvatureOperator {
    pub kind: CurvatureKind,
    pub target: CurvatureTarget,
    pub delta: f64,
    pub dim: usize,
    payload: Payload,
}

/// Dense Hessian of `obj` plus `δI`. Uses the closed form when the objective
/// provides one and central differences of the gradient otherwise.
pub fn exact_hessian_matrix<O: Objective>(obj: &O, delta: f64, fd_step: f64) -> DMatrix<f64> {
    let dim = obj.dim();
    let mut h = match obj.analytic_hessian() {
        Some(h) => h,
        None => {
            let theta = obj.theta();
            let cols = par::map_indices(dim, |k| {
                let step = fd_step * theta[k].abs().max(1.0);
                let mut tp = theta.clone();
                tp[k] += step;
                let mut tm = theta.clone();
                tm[k] -= step;
                // Serial inner sums: the outer map already fans out.
                let gp = sum_grads_serial(&obj.at(&tp));
                let gm = sum_grads_serial(&obj.at(&tm));
                (gp - gm) / (2.0 * step)
            });
            let mut h = DMatrix::zeros(dim, dim);
            for (k, c) in cols.iter().enumerate() {
                h.set_column(k, c);
            }
            (&h + h.transpose()) * 0.5
        }
    };
    for i in 0..dim {
        h[(i, i)] += delta;
    }
    h
}

fn sum_grads_serial<O: Objective>(obj: &O) -> DVector<f64> {
    let mut g = DVector::zeros(obj.dim());
    for i in 0..obj.n_samples() {
        g += obj.sample_grad(i);
    }
    g
}

/// Damped empirical Fisher `Σ ∇ℓ_i ∇ℓ_iᵀ + δI`.
pub fn damped_fisher_matrix<O: Objective>(obj: &O, delta: f64) -> DMatrix<f64> {
    let mut f = par::gram_rows(&obj.grad_matrix());
    for i in 0..obj.dim() {
        f[(i, i)] += delta;
    }
    f
}

/// Fits EK-FAC factors for every layer of `obj`.
pub fn ekfac_layers<O: Objective>(obj: &O, damping: &[f64]) -> Result<Vec<EkfacLayer>> {
    let shapes = obj.layer_shapes();
    if damping.len() != shapes.len() {
        return Err(CcbmError::InvalidConfig(format!(
            "{} damping values for {} layers",
            damping.len(),
            shapes.len()
        )));
    }
    let n = obj.n_samples();
    let per_sample = par::map_indices(n, |i| obj.layer_samples(i));
    shapes
        .iter()
        .enumerate()
        .map(|(l, &(n_out, n_in))| {
            let mut inputs = DMatrix::zeros(n, n_in);
            let mut grads = DMatrix::zeros(n, n_out);
            for (i, s) in per_sample.iter().enumerate() {
                inputs.row_mut(i).copy_from_slice(&s[l].input);
                grads.row_mut(i).copy_from_slice(&s[l].grad);
            }
            EkfacLayer::fit(&inputs, &grads, damping[l])
        })
        .collect()
}

impl CurvatureOperator {
    /// Builds the operator of `obj` at its current parameters.
    pub fn build<O: Objective>(
        obj: &O,
        target: CurvatureTarget,
        delta: f64,
        opts: &CurvatureOptions,
    ) -> Result<CurvatureOperator> {
        let dim = obj.dim();
        if !obj.theta().iter().all(|v| v.is_finite()) {
            return Err(CcbmError::NonFinite(
                "parameters passed to the curvature builder".into(),
            ));
        }
        let payload = match opts.kind {
            CurvatureKind::ExactHessian | CurvatureKind::DampedFisher => {
                if dim > opts.dense_limit {
                    return Err(CcbmError::DenseLimit {
                        dim,
                        limit: opts.dense_limit,
                    });
                }
                let m = if opts.kind == CurvatureKind::ExactHessian {
                    exact_hessian_matrix(obj, delta, opts.fd_step)
                } else {
                    damped_fisher_matrix(obj, delta)
                };
                Payload::Dense(DenseCurvature::new(m)?)
            }
            CurvatureKind::Ekfac => {
                let n_layers = obj.layer_shapes().len();
                let damping = match &opts.layer_damping {
                    Some(d) => d.clone(),
                    None => vec![delta; n_layers],
                };
                Payload::Ekfac(ekfac_layers(obj, &damping)?)
            }
        };
        Ok(CurvatureOperator {
            kind: opts.kind,
            target,
            delta,
            dim,
            payload,
        })
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(CcbmError::Shape(format!(
                "vector has length {}, operator acts on {}",
                v.len(),
                self.dim
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(CcbmError::NonFinite(
                "vector passed to the curvature operator".into(),
            ));
        }
        Ok(())
    }

    fn ekfac_map(
        &self,
        layers: &[EkfacLayer],
        v: &DVector<f64>,
        invert: bool,
    ) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        let mut off = 0;
        for layer in layers {
            let len = layer.n_params();
            layer.transform(
                &v.as_slice()[off..off + len],
                &mut out.as_mut_slice()[off..off + len],
                invert,
            )?;
            off += len;
        }
        Ok(out)
    }

    /// `H⁻¹ v`.
    pub fn ihvp(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v)?;
        let out = match &self.payload {
            Payload::Dense(d) => d.solve(v),
            Payload::Ekfac(layers) => self.ekfac_map(layers, v, true)?,
        };
        if !out.iter().all(|x| x.is_finite()) {
            return Err(CcbmError::NonFinite(
                "inverse-Hessian-vector product".into(),
            ));
        }
        Ok(out)
    }

    /// `H v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v)?;
        match &self.payload {
            Payload::Dense(d) => Ok(&d.matrix * v),
            Payload::Ekfac(layers) => self.ekfac_map(layers, v, false),
        }
    }

    pub fn dense(&self) -> Option<&DenseCurvature> {
        match &self.payload {
            Payload::Dense(d) => Some(d),
            Payload::Ekfac(_) => None,
        }
    }

    pub fn ekfac(&self) -> Option<&[EkfacLayer]> {
        match &self.payload {
            Payload::Dense(_) => None,
            Payload::Ekfac(l) => Some(l),
        }
    }

    /// Materializes the operator (dense kinds directly, EK-FAC column by column).
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        match &self.payload {
            Payload::Dense(d) => Ok(d.matrix.clone()),
            Payload::Ekfac(_) => {
                let mut m = DMatrix::zeros(self.dim, self.dim);
                for k in 0..self.dim {
                    let mut e = DVector::zeros(self.dim);
                    e[k] = 1.0;
                    m.set_column(k, &self.apply(&e)?);
                }
                Ok(m)
            }
        }
    }

    pub fn to_record(&self) -> CurvatureRecord {
        match &self.payload {
            Payload::Dense(d) => CurvatureRecord {
                kind: self.kind,
                target: self.target,
                delta: self.delta,
                dim: self.dim,
                dense: Some(d.matrix.transpose().as_slice().to_vec()),
                layers: None,
            },
            Payload::Ekfac(layers) => CurvatureRecord {
                kind: self.kind,
                target: self.target,
                delta: self.delta,
                dim: self.dim,
                dense: None,
                layers: Some(
                    layers
                        .iter()
                        .map(|l| EkfacRecord {
                            n_out: l.n_out,
                            n_in: l.n_in,
                            n_samples: l.n_samples,
                            omega: row_major(&l.omega),
                            gamma: row_major(&l.gamma),
                            q_omega: row_major(&l.q_omega),
                            q_gamma: row_major(&l.q_gamma),
                            omega_eigenvalues: l.omega_eigenvalues.as_slice().to_vec(),
                            gamma_eigenvalues: l.gamma_eigenvalues.as_slice().to_vec(),
                            lambda_star: row_major(&l.lambda_star),
                            damping: l.damping,
                        })
                        .collect(),
                ),
            },
        }
    }

    pub fn from_record(r: &CurvatureRecord) -> Result<CurvatureOperator> {
        let payload = match (&r.dense, &r.layers) {
            (Some(m), None) => {
                if m.len() != r.dim * r.dim {
                    return Err(CcbmError::Shape(
                        "dense curvature record has the wrong size".into(),
                    ));
                }
                Payload::Dense(DenseCurvature::new(DMatrix::from_row_slice(
                    r.dim, r.dim, m,
                ))?)
            }
            (None, Some(layers)) => {
                let mut out = Vec::with_capacity(layers.len());
                for l in layers {
                    let sq = |v: &Vec<f64>, n: usize| -> Result<DMatrix<f64>> {
                        if v.len() != n * n {
                            return Err(CcbmError::Shape(
                                "EK-FAC record factor has the wrong size".into(),
                            ));
                        }
                        Ok(DMatrix::from_row_slice(n, n, v))
                    };
                    if l.lambda_star.len() != l.n_out * l.n_in
                        || l.omega_eigenvalues.len() != l.n_in
                        || l.gamma_eigenvalues.len() != l.n_out
                    {
                        return Err(CcbmError::Shape(
                            "EK-FAC record eigenvalues have the wrong size".into(),
                        ));
                    }
                    out.push(EkfacLayer {
                        n_out: l.n_out,
                        n_in: l.n_in,
                        n_samples: l.n_samples,
                        omega: sq(&l.omega, l.n_in)?,
                        q_omega: sq(&l.q_omega, l.n_in)?,
                        omega_eigenvalues: DVector::from_vec(l.omega_eigenvalues.clone()),
                        gamma: sq(&l.gamma, l.n_out)?,
                        q_gamma: sq(&l.q_gamma, l.n_out)?,
                        gamma_eigenvalues: DVector::from_vec(l.gamma_eigenvalues.clone()),
                        lambda_star: DMatrix::from_row_slice(l.n_out, l.n_in, &l.lambda_star),
                        damping: l.damping,
                    });
                }
                if out.iter().map(EkfacLayer::n_params).sum::<usize>() != r.dim {
                    return Err(CcbmError::Shape(
                        "EK-FAC layers do not cover the parameter vector".into(),
                    ));
                }
                Payload::Ekfac(out)
            }
            _ => {
                return Err(CcbmError::InvalidConfig(
                    "curvature record needs exactly one of `dense` or `layers`".into(),
                ))
            }
        };
        Ok(CurvatureOperator {
            kind: r.kind,
            target: r.target,
            delta: r.delta,
            dim: r.dim,
            payload,
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Serialized EK-FAC layer; matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfacRecord {
    pub n_out: usize,
    pub n_in: usize,
    pub n_samples: usize,
    pub omega: Vec<f64>,
    pub gamma: Vec<f64>,
    pub q_omega: Vec<f64>,
    pub q_gamma: Vec<f64>,
    pub omega_eigenvalues: Vec<f64>,
    pub gamma_eigenvalues: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub damping: f64,
}

/// Serialized curvature operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRecord {
    pub kind: CurvatureKind,
    pub target: CurvatureTarget,
    pub delta: f64,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<EkfacRecord>>,
}
