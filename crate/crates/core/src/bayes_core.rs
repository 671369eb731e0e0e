//! Normal–Inverse-Gamma machinery for augmented Gaussian linear systems
//!
//! ```text
//! Y = Xθ + η,   η ~ N(0, σ² S),   σ² ~ IG(a, b)
//! ```
//!
//! where the rows of `Y` and `X` are split into labelled blocks. Data blocks
//! carry observations; prior blocks carry pseudo-observations that encode the
//! prior on `θ`. `S` is block diagonal and every block keeps its own
//! factorization, so `S` is never inverted densely.
//!
//! Two solvers are available. The *dense* route factorizes the normal
//! equations `XᵀS⁻¹X`. The *collapsed* route applies when the prior blocks
//! select disjoint slices of `θ` covering all of it: the prior is then
//! `θ ~ N(μ, σ²P)` and everything follows from the `n_obs × n_obs` marginal
//! scale `V = S_data + D P Dᵀ`. Both give identical posteriors.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::{log_det_chol, psd_factor, symmetrize, SpdMatrix, CONDITION_WARN};

/// Inverse-Gamma prior `σ² ~ IG(a, b)` (shape `a`, scale `b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IgPrior {
    pub a: f64,
    pub b: f64,
}

impl IgPrior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let p = IgPrior { a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_finite() && self.b.is_finite() && self.a > 0.0 && self.b > 0.0 {
            Ok(())
        } else {
            Err(Error::ParameterDomain(format!("inverse-gamma prior needs a, b > 0, got ({}, {})", self.a, self.b)))
        }
    }
}

impl Default for IgPrior {
    fn default() -> Self {
        IgPrior { a: 2.0, b: 1.0 }
    }
}
/// How predictive laws treat posterior uncertainty in the coefficients and
/// latent values they are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveForm {
    /// Posterior means plugged in; only the prior-conditional variance is kept.
    #[default]
    PlugIn,
    /// Adds the posterior covariance of the plugged-in quantities, giving the
    /// exact posterior predictive.
    Full,
}


/// How the residual quadratic form enters the scale update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualConvention {
    /// `b* = b + ½ (Y - Xm)ᵀ S⁻¹ (Y - Xm)`.
    #[default]
    Standard,
    /// `b* = b + (Y - Xm)ᵀ S⁻¹ (Y - Xm)`, without the ½ factor.
    Unhalved,
}

impl ResidualConvention {
    fn factor(self) -> f64 {
        match self {
            ResidualConvention::Standard => 0.5,
            ResidualConvention::Unhalved => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveRoute {
    /// Collapsed when eligible and `n_obs <= dim`, dense otherwise.
    #[default]
    Auto,
    Dense,
    Collapsed,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NigOptions {
    pub convention: ResidualConvention,
    pub route: SolveRoute,
}

/// Row design of a block.
#[derive(Debug, Clone)]
pub enum Design {
    Dense(DMatrix<f64>),
    /// `[0 I 0]`: the block observes `θ[offset .. offset + len]` directly.
    Select { offset: usize, len: usize },
    /// One list of `(column, value)` entries per row.
    Sparse(Vec<Vec<(usize, f64)>>),
}

impl Design {
    pub fn rows(&self) -> usize {
        match self {
            Design::Dense(m) => m.nrows(),
            Design::Select { len, .. } => *len,
            Design::Sparse(rows) => rows.len(),
        }
    }

    fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Design::Dense(m) => m.clone(),
            Design::Select { offset, len } => {
                let mut m = DMatrix::zeros(*len, dim);
                for i in 0..*len {
                    m[(i, offset + i)] = 1.0;
                }
                m
            }
            Design::Sparse(rows) => {
                let mut m = DMatrix::zeros(rows.len(), dim);
                for (i, row) in rows.iter().enumerate() {
                    for &(j, v) in row {
                        m[(i, j)] += v;
                    }
                }
                m
            }
        }
    }

    fn mul_vec(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Design::Dense(m) => m * theta,
            Design::Select { offset, len } => theta.rows(*offset, *len).into_owned(),
            Design::Sparse(rows) => {
                DVector::from_iterator(rows.len(), rows.iter().map(|r| r.iter().map(|&(j, v)| v * theta[j]).sum()))
            }
        }
    }
}

/// Temporal (outer) factor of a Kronecker scale block.
#[derive(Debug, Clone)]
pub enum Outer {
    Identity(usize),
    /// `L Lᵀ` with `L` the lower-triangular matrix of ones, i.e. the
    /// covariance `min(t, s)` of a random walk started at zero. Its factor is
    /// `(I - A)⁻¹` for the shift matrix `A`, so solves are differences.
    RandomWalk(usize),
    Dense(SpdMatrix),
}

impl Outer {
    pub fn dim(&self) -> usize {
        match self {
            Outer::Identity(n) | Outer::RandomWalk(n) => *n,
            Outer::Dense(m) => m.dim(),
        }
    }

    fn apply_cols(&self, m: &mut DMatrix<f64>) {
        match self {
            Outer::Identity(_) => {}
            Outer::RandomWalk(n) => {
                for mut col in m.column_iter_mut() {
                    let mut acc = 0.0;
                    for t in (0..*n).rev() {
                        acc += col[t];
                        col[t] = acc;
                    }
                    let mut acc = 0.0;
                    for t in 0..*n {
                        acc += col[t];
                        col[t] = acc;
                    }
                }
            }
            Outer::Dense(a) => *m = a.matrix() * &*m,
        }
    }

    fn solve_cols(&self, m: &mut DMatrix<f64>) {
        match self {
            Outer::Identity(_) => {}
            Outer::RandomWalk(n) => {
                for mut col in m.column_iter_mut() {
                    for t in (1..*n).rev() {
                        col[t] -= col[t - 1];
                    }
                    for t in 0..n.saturating_sub(1) {
                        col[t] -= col[t + 1];
                    }
                }
            }
            Outer::Dense(a) => *m = a.solve_mat(m),
        }
    }

    fn log_det(&self) -> f64 {
        match self {
            Outer::Identity(_) | Outer::RandomWalk(_) => 0.0,
            Outer::Dense(a) => a.log_det(),
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        match self {
            Outer::Identity(n) => DMatrix::identity(*n, *n),
            Outer::RandomWalk(n) => DMatrix::from_fn(*n, *n, |i, j| (i.min(j) + 1) as f64),
            Outer::Dense(a) => a.matrix().clone(),
        }
    }

    fn column(&self, o: usize) -> DVector<f64> {
        match self {
            Outer::Identity(n) => {
                let mut c = DVector::zeros(*n);
                c[o] = 1.0;
                c
            }
            Outer::RandomWalk(n) => DVector::from_fn(*n, |s, _| (s.min(o) + 1) as f64),
            Outer::Dense(a) => a.matrix().column(o).into_owned(),
        }
    }

    fn jitter(&self) -> f64 {
        match self {
            Outer::Dense(a) => a.jitter(),
            _ => 0.0,
        }
    }
}

/// One diagonal block of `S`.
#[derive(Debug, Clone)]
pub enum ScaleBlock {
    Identity(usize),
    Dense(SpdMatrix),
    /// `scale · (outer ⊗ inner)`, indexed `(o, i) -> o·inner_dim + i`.
    Kronecker { scale: f64, outer: Outer, inner: SpdMatrix },
}

impl ScaleBlock {
    pub fn dim(&self) -> usize {
        match self {
            ScaleBlock::Identity(n) => *n,
            ScaleBlock::Dense(m) => m.dim(),
            ScaleBlock::Kronecker { outer, inner, .. } => outer.dim() * inner.dim(),
        }
    }

    pub fn jitter(&self) -> f64 {
        match self {
            ScaleBlock::Identity(_) => 0.0,
            ScaleBlock::Dense(m) => m.jitter(),
            ScaleBlock::Kronecker { outer, inner, .. } => outer.jitter().max(inner.jitter()),
        }
    }

    /// Column `k` of `S`.
    pub fn column(&self, k: usize) -> DVector<f64> {
        match self {
            ScaleBlock::Identity(n) => {
                let mut c = DVector::zeros(*n);
                c[k] = 1.0;
                c
            }
            ScaleBlock::Dense(m) => m.matrix().column(k).into_owned(),
            ScaleBlock::Kronecker { scale, outer, inner } => {
                let ni = inner.dim();
                let (o, i) = (k / ni, k % ni);
                let oc = outer.column(o);
                let ic = inner.matrix().column(i);
                let mut c = DVector::zeros(outer.dim() * ni);
                for (a, &ov) in oc.iter().enumerate() {
                    if ov != 0.0 {
                        c.rows_mut(a * ni, ni).axpy(scale * ov, &ic, 0.0);
                    }
                }
                c
            }
        }
    }

    /// `S v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ScaleBlock::Identity(_) => v.clone(),
            ScaleBlock::Dense(m) => m.matrix() * v,
            ScaleBlock::Kronecker { scale, outer, inner } => {
                let (no, ni) = (outer.dim(), inner.dim());
                // Row-major reshape: M[o, i] = v[o·ni + i].
                let m = DMatrix::from_row_slice(no, ni, v.as_slice());
                let mut r = m * inner.matrix();
                outer.apply_cols(&mut r);
                r *= *scale;
                DVector::from_iterator(no * ni, r.transpose().iter().copied())
            }
        }
    }

    /// `S⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ScaleBlock::Identity(_) => v.clone(),
            ScaleBlock::Dense(m) => m.solve_vec(v),
            ScaleBlock::Kronecker { scale, outer, inner } => {
                let (no, ni) = (outer.dim(), inner.dim());
                let m = DMatrix::from_row_slice(no, ni, v.as_slice());
                let mut r = inner.solve_mat(&m.transpose()).transpose();
                outer.solve_cols(&mut r);
                r /= *scale;
                DVector::from_iterator(no * ni, r.transpose().iter().copied())
            }
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ScaleBlock::Identity(_) => b.clone(),
            ScaleBlock::Dense(m) => m.solve_mat(b),
            ScaleBlock::Kronecker { .. } => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for (j, col) in b.column_iter().enumerate() {
                    out.set_column(j, &self.solve(&col.into_owned()));
                }
                out
            }
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            ScaleBlock::Identity(_) => 0.0,
            ScaleBlock::Dense(m) => m.log_det(),
            ScaleBlock::Kronecker { scale, outer, inner } => {
                let (no, ni) = (outer.dim() as f64, inner.dim() as f64);
                no * ni * scale.ln() + ni * outer.log_det() + no * inner.log_det()
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            ScaleBlock::Identity(n) => DMatrix::identity(*n, *n),
            ScaleBlock::Dense(m) => m.matrix().clone(),
            ScaleBlock::Kronecker { scale, outer, inner } => outer.dense().kronecker(inner.matrix()) * *scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Genuine observations; count towards `n_obs`.
    Data,
    /// Pseudo-observations encoding the prior.
    Prior,
}

#[derive(Debug, Clone)]
pub struct RowBlock {
    pub label: String,
    pub kind: RowKind,
    pub response: DVector<f64>,
    pub design: Design,
    pub scale: Arc<ScaleBlock>,
}

/// `Y = Xθ + η`, `η ~ N(0, σ²S)`, stored as labelled row blocks.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    dim: usize,
    blocks: Vec<RowBlock>,
}

impl AugmentedSystem {
    pub fn new(dim: usize) -> Self {
        AugmentedSystem { dim, blocks: Vec::new() }
    }

    pub fn push(
        &mut self,
        label: impl Into<String>,
        kind: RowKind,
        response: DVector<f64>,
        design: Design,
        scale: ScaleBlock,
    ) -> Result<()> {
        let label = label.into();
        let rows = design.rows();
        if response.len() != rows || scale.dim() != rows {
            return Err(Error::Dimension(format!(
                "block '{label}': response {} rows, design {} rows, scale {}x{}",
                response.len(),
                rows,
                scale.dim(),
                scale.dim()
            )));
        }
        match &design {
            Design::Dense(m) if m.ncols() != self.dim => {
                return Err(Error::Dimension(format!(
                    "block '{label}': design has {} columns, system has {}",
                    m.ncols(),
                    self.dim
                )))
            }
            Design::Select { offset, len } if offset + len > self.dim => {
                return Err(Error::Dimension(format!(
                    "block '{label}': selects [{offset}, {}) beyond dimension {}",
                    offset + len,
                    self.dim
                )))
            }
            Design::Sparse(rows) if rows.iter().flatten().any(|&(j, _)| j >= self.dim) => {
                return Err(Error::Dimension(format!("block '{label}': sparse entry beyond dimension {}", self.dim)))
            }
            _ => {}
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("block '{label}': non-finite response")));
        }
        self.blocks.push(RowBlock { label, kind, response, design, scale: Arc::new(scale) });
        Ok(())
    }

    pub fn with_block(
        mut self,
        label: impl Into<String>,
        kind: RowKind,
        response: DVector<f64>,
        design: Design,
        scale: ScaleBlock,
    ) -> Result<Self> {
        self.push(label, kind, response, design, scale)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[RowBlock] {
        &self.blocks
    }

    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.design.rows()).sum()
    }

    /// Number of genuine observations (prior rows excluded).
    pub fn n_obs(&self) -> usize {
        self.blocks.iter().filter(|b| b.kind == RowKind::Data).map(|b| b.design.rows()).sum()
    }

    /// The full stacked response `Y`.
    pub fn response(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.rows());
        for b in &self.blocks {
            out.extend(b.response.iter());
        }
        DVector::from_vec(out)
    }

    /// The full design `X`, materialized densely.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.rows(), self.dim);
        let mut r = 0;
        for b in &self.blocks {
            let d = b.design.to_dense(self.dim);
            x.view_mut((r, 0), (d.nrows(), self.dim)).copy_from(&d);
            r += d.nrows();
        }
        x
    }

    /// The full scale `S`, materialized densely.
    pub fn scale_matrix(&self) -> DMatrix<f64> {
        let n = self.rows();
        let mut s = DMatrix::zeros(n, n);
        let mut r = 0;
        for b in &self.blocks {
            let d = b.scale.dense();
            s.view_mut((r, r), (d.nrows(), d.ncols())).copy_from(&d);
            r += d.nrows();
        }
        s
    }

    fn max_jitter(&self) -> f64 {
        self.blocks.iter().map(|b| b.scale.jitter()).fold(0.0, f64::max)
    }

    /// Prior blocks as `(offset, block)` when they select disjoint slices
    /// covering `θ` exactly.
    fn partitioning_prior(&self) -> Option<Vec<&RowBlock>> {
        let mut prior: Vec<&RowBlock> = self.blocks.iter().filter(|b| b.kind == RowKind::Prior).collect();
        if !prior.iter().all(|b| matches!(b.design, Design::Select { .. })) {
            return None;
        }
        prior.sort_by_key(|b| match b.design {
            Design::Select { offset, .. } => offset,
            _ => unreachable!(),
        });
        let mut next = 0;
        for b in &prior {
            if let Design::Select { offset, len } = b.design {
                if offset != next {
                    return None;
                }
                next += len;
            }
        }
        (next == self.dim).then_some(prior)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PosteriorDiagnostics {
    /// Largest diagonal jitter applied to any factorization.
    pub max_jitter: f64,
    /// Numerical warnings (ill-conditioning and the like).
    pub warnings: Vec<String>,
}

#[derive(Debug)]
struct CollapsedParts {
    /// Prior blocks in `θ` order with their offsets.
    prior: Vec<(usize, Arc<ScaleBlock>)>,
    /// `P Dᵀ`, `dim × n_obs`.
    pdt: DMatrix<f64>,
    v: SpdMatrix,
}

impl CollapsedParts {
    fn apply_prior(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (offset, block) in &self.prior {
            let n = block.dim();
            let piece = block.apply(&v.rows(*offset, n).into_owned());
            out.rows_mut(*offset, n).copy_from(&piece);
        }
        out
    }
}

#[derive(Debug)]
enum PosteriorScale {
    Dense,
    Collapsed(CollapsedParts),
}

/// `θ | σ², D ~ N(m, σ²Σ)` and `σ² | D ~ IG(a*, b*)`.
#[derive(Debug)]
pub struct NigPosterior {
    mean: DVector<f64>,
    a_star: f64,
    b_star: f64,
    prior: IgPrior,
    n_obs: usize,
    convention: ResidualConvention,
    scale: PosteriorScale,
    sigma: OnceLock<DMatrix<f64>>,
    log_evidence: Option<f64>,
    diagnostics: PosteriorDiagnostics,
}

impl NigPosterior {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn a_star(&self) -> f64 {
        self.a_star
    }

    pub fn b_star(&self) -> f64 {
        self.b_star
    }

    pub fn prior(&self) -> IgPrior {
        self.prior
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn convention(&self) -> ResidualConvention {
        self.convention
    }

    pub fn diagnostics(&self) -> &PosteriorDiagnostics {
        &self.diagnostics
    }

    /// `b*/a*`, the factor turning `Σ` into the scale of the marginal t law.
    pub fn scale_factor(&self) -> f64 {
        self.b_star / self.a_star
    }

    pub fn sigma2_law(&self) -> InverseGamma {
        InverseGamma { shape: self.a_star, scale: self.b_star }
    }

    /// Log marginal likelihood of the data rows, if the prior rows define a
    /// proper prior for `θ`.
    pub fn log_evidence(&self) -> Option<f64> {
        self.log_evidence
    }

    /// Posterior scale matrix `Σ`. Computed on first use for collapsed fits.
    pub fn sigma(&self) -> &DMatrix<f64> {
        self.sigma.get_or_init(|| match &self.scale {
            PosteriorScale::Dense => unreachable!("dense posteriors store Σ eagerly"),
            PosteriorScale::Collapsed(parts) => {
                let dim = self.mean.len();
                let mut p = DMatrix::zeros(dim, dim);
                for (offset, block) in &parts.prior {
                    let d = block.dense();
                    p.view_mut((*offset, *offset), (d.nrows(), d.ncols())).copy_from(&d);
                }
                let half = parts.v.half_solve_mat(&parts.pdt.transpose());
                let mut s = p - half.transpose() * half;
                symmetrize(&mut s);
                s
            }
        })
    }

    /// `(L m, L Σ Lᵀ)` without forming `Σ` on the collapsed route.
    pub fn project(&self, l: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if l.ncols() != self.dim() {
            return Err(Error::Dimension(format!("projection has {} columns, posterior has {}", l.ncols(), self.dim())));
        }
        let loc = l * &self.mean;
        let cov = match &self.scale {
            PosteriorScale::Dense => l * self.sigma() * l.transpose(),
            PosteriorScale::Collapsed(parts) => {
                if let Some(s) = self.sigma.get() {
                    l * s * l.transpose()
                } else {
                    let mut plt = DMatrix::zeros(self.dim(), l.nrows());
                    for (j, row) in l.row_iter().enumerate() {
                        plt.set_column(j, &parts.apply_prior(&row.transpose()));
                    }
                    let lpdt = l * &parts.pdt;
                    let half = parts.v.half_solve_mat(&lpdt.transpose());
                    l * plt - half.transpose() * half
                }
            }
        };
        let mut cov = cov;
        symmetrize(&mut cov);
        Ok((loc, cov))
    }

    /// Marginal law of `Lθ`: `t_{2a*}(Lm, (b*/a*) LΣLᵀ)`.
    pub fn linear_law(&self, l: &DMatrix<f64>) -> Result<StudentT> {
        let (loc, cov) = self.project(l)?;
        Ok(StudentT { dof: 2.0 * self.a_star, loc, scale: cov * self.scale_factor() })
    }
}

fn validate_options(prior: &IgPrior) -> Result<()> {
    prior.validate()
}

/// Posterior of `(θ, σ²)` for an augmented system under `σ² ~ IG(a, b)`.
pub fn nig_posterior(sys: &AugmentedSystem, prior: IgPrior) -> Result<NigPosterior> {
    nig_posterior_with(sys, prior, NigOptions::default())
}

pub fn nig_posterior_with(sys: &AugmentedSystem, prior: IgPrior, opts: NigOptions) -> Result<NigPosterior> {
    validate_options(&prior)?;
    if sys.dim() == 0 {
        return Err(Error::EmptyData("augmented system has no parameters".into()));
    }
    let partition = sys.partitioning_prior();
    let collapsed = match opts.route {
        SolveRoute::Dense => false,
        SolveRoute::Collapsed => {
            if partition.is_none() {
                return Err(Error::Configuration(
                    "collapsed route needs prior blocks selecting disjoint slices that cover θ".into(),
                ));
            }
            true
        }
        SolveRoute::Auto => partition.is_some() && sys.n_obs() <= sys.dim(),
    };
    if collapsed {
        solve_collapsed(sys, prior, opts.convention, partition.expect("checked above"))
    } else {
        solve_dense(sys, prior, opts.convention)
    }
}

/// Log marginal likelihood `log p(y)` of the data rows, with the prior on `θ`
/// given by the prior rows. Always uses the ½ convention, since it is a
/// probability.
pub fn log_marginal_likelihood(sys: &AugmentedSystem, prior: IgPrior) -> Result<f64> {
    let post = nig_posterior(sys, prior)?;
    post.log_evidence()
        .ok_or_else(|| Error::Identifiability("prior rows do not define a proper prior on θ".into()))
}

fn evidence(prior: IgPrior, n_obs: usize, quad: f64, log_det_v: f64) -> f64 {
    let a_star = prior.a + n_obs as f64 / 2.0;
    let b_star = prior.b + 0.5 * quad;
    ln_gamma(a_star) - ln_gamma(prior.a) + prior.a * prior.b.ln() - a_star * b_star.ln()
        - 0.5 * n_obs as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * log_det_v
}

fn solve_dense(sys: &AugmentedSystem, prior: IgPrior, convention: ResidualConvention) -> Result<NigPosterior> {
    let dim = sys.dim();
    let mut precision = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut prior_precision = DMatrix::zeros(dim, dim);
    let mut prior_rhs = DVector::zeros(dim);
    let mut prior_yy = 0.0;
    let mut data_log_det = 0.0;
    for b in sys.blocks() {
        let x = b.design.to_dense(dim);
        let sinv_x = b.scale.solve_mat(&x);
        let sinv_y = b.scale.solve(&b.response);
        let xt_sinv_x = x.transpose() * &sinv_x;
        let xt_sinv_y = x.transpose() * &sinv_y;
        precision += &xt_sinv_x;
        rhs += &xt_sinv_y;
        match b.kind {
            RowKind::Prior => {
                prior_precision += xt_sinv_x;
                prior_rhs += xt_sinv_y;
                prior_yy += b.response.dot(&sinv_y);
            }
            RowKind::Data => data_log_det += b.scale.log_det(),
        }
    }
    symmetrize(&mut precision);
    let prec = SpdMatrix::new(precision, crate::linalg::JitterPolicy::Disabled, "normal equations")
        .map_err(|_| Error::Identifiability("XᵀS⁻¹X is singular".into()))?;
    let mean = prec.solve_vec(&rhs);
    let mut sigma = prec.solve_mat(&DMatrix::identity(dim, dim));
    symmetrize(&mut sigma);

    let mut quad = 0.0;
    for b in sys.blocks() {
        let r = &b.response - b.design.mul_vec(&mean);
        quad += r.dot(&b.scale.solve(&r));
    }
    let n_obs = sys.n_obs();
    let mut diagnostics = PosteriorDiagnostics { max_jitter: sys.max_jitter(), warnings: Vec::new() };
    let cond = prec.condition_estimate();
    if cond > CONDITION_WARN {
        diagnostics.warnings.push(format!("normal equations condition estimate {cond:.3e}"));
    }

    symmetrize(&mut prior_precision);
    let log_evidence = SpdMatrix::new(prior_precision, crate::linalg::JitterPolicy::Disabled, "prior precision")
        .ok()
        .map(|p0| {
            let mu0 = p0.solve_vec(&prior_rhs);
            let r0 = (prior_yy - mu0.dot(&prior_rhs)).max(0.0);
            let log_det_v = data_log_det - p0.log_det() + prec.log_det();
            evidence(prior, n_obs, (quad - r0).max(0.0), log_det_v)
        });

    Ok(NigPosterior {
        mean,
        a_star: prior.a + n_obs as f64 / 2.0,
        b_star: prior.b + convention.factor() * quad,
        prior,
        n_obs,
        convention,
        scale: PosteriorScale::Dense,
        sigma: OnceLock::from(sigma),
        log_evidence,
        diagnostics,
    })
}

fn solve_collapsed(
    sys: &AugmentedSystem,
    prior: IgPrior,
    convention: ResidualConvention,
    prior_blocks: Vec<&RowBlock>,
) -> Result<NigPosterior> {
    let dim = sys.dim();
    let mut mu = DVector::zeros(dim);
    let mut parts_prior = Vec::with_capacity(prior_blocks.len());
    for b in &prior_blocks {
        if let Design::Select { offset, len } = b.design {
            mu.rows_mut(offset, len).copy_from(&b.response);
            parts_prior.push((offset, Arc::clone(&b.scale)));
        }
    }
    let data: Vec<&RowBlock> = sys.blocks().iter().filter(|b| b.kind == RowKind::Data).collect();
    let n_obs: usize = data.iter().map(|b| b.design.rows()).sum();

    // Data rows as sparse (column, value) lists.
    let mut d_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_obs);
    let mut y = DVector::zeros(n_obs);
    let mut v = DMatrix::zeros(n_obs, n_obs);
    let mut r = 0;
    for b in &data {
        let rows = b.design.rows();
        match &b.design {
            Design::Sparse(rs) => d_rows.extend(rs.iter().cloned()),
            Design::Select { offset, len } => d_rows.extend((0..*len).map(|i| vec![(offset + i, 1.0)])),
            Design::Dense(m) => d_rows.extend(
                m.row_iter().map(|row| row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)).collect()),
            ),
        }
        y.rows_mut(r, rows).copy_from(&b.response);
        v.view_mut((r, r), (rows, rows)).copy_from(&b.scale.dense());
        r += rows;
    }

    // owner[k] = (prior block, offset) of parameter k.
    let mut owner = vec![(0usize, 0usize); dim];
    for (bi, (offset, block)) in parts_prior.iter().enumerate() {
        for k in *offset..offset + block.dim() {
            owner[k] = (bi, *offset);
        }
    }

    let mut parts = CollapsedParts {
        prior: parts_prior,
        pdt: DMatrix::zeros(dim, n_obs),
        v: SpdMatrix::new(DMatrix::identity(1, 1), crate::linalg::JitterPolicy::Disabled, "placeholder")?,
    };
    for (j, row) in d_rows.iter().enumerate() {
        let mut col = parts.pdt.column_mut(j);
        for &(k, val) in row {
            let (bi, offset) = owner[k];
            let block = &parts.prior[bi].1;
            let pc = block.column(k - offset);
            col.rows_mut(offset, pc.len()).axpy(val, &pc, 1.0);
        }
    }
    for (i, row) in d_rows.iter().enumerate() {
        for &(k, val) in row {
            for j in 0..n_obs {
                v[(i, j)] += val * parts.pdt[(k, j)];
            }
        }
    }
    symmetrize(&mut v);
    let d_mu = DVector::from_iterator(n_obs, d_rows.iter().map(|row| row.iter().map(|&(k, val)| val * mu[k]).sum()));

    let mut diagnostics = PosteriorDiagnostics { max_jitter: sys.max_jitter(), warnings: Vec::new() };
    let (mean, quad, log_det_v) = if n_obs == 0 {
        parts.v = SpdMatrix::new(DMatrix::zeros(0, 0), crate::linalg::JitterPolicy::Disabled, "marginal scale")?;
        (mu, 0.0, 0.0)
    } else {
        let vspd = SpdMatrix::new(v, crate::linalg::JitterPolicy::Ladder, "marginal scale")?;
        diagnostics.max_jitter = diagnostics.max_jitter.max(vspd.jitter());
        let cond = vspd.condition_estimate();
        if cond > CONDITION_WARN {
            diagnostics.warnings.push(format!("marginal scale condition estimate {cond:.3e}"));
        }
        let resid = &y - &d_mu;
        let alpha = vspd.solve_vec(&resid);
        let mean = &mu + &parts.pdt * &alpha;
        let quad = resid.dot(&alpha);
        let ld = log_det_chol(vspd.chol());
        parts.v = vspd;
        (mean, quad, ld)
    };

    Ok(NigPosterior {
        mean,
        a_star: prior.a + n_obs as f64 / 2.0,
        b_star: prior.b + convention.factor() * quad,
        prior,
        n_obs,
        convention,
        scale: PosteriorScale::Collapsed(parts),
        sigma: OnceLock::new(),
        log_evidence: Some(evidence(prior, n_obs, quad, log_det_v)),
        diagnostics,
    })
}

/// Marginal posterior of `θ`: `t_{2a*}(m, (b*/a*)Σ)`.
pub fn marginal_theta(post: &NigPosterior) -> StudentT {
    StudentT { dof: 2.0 * post.a_star, loc: post.mean.clone(), scale: post.sigma() * post.scale_factor() }
}

/// Draws from the joint posterior of `(θ, σ²)`.
#[derive(Debug, Clone)]
pub struct NigDraws {
    pub theta: Vec<DVector<f64>>,
    pub sigma2: Vec<f64>,
}

/// `σ² ~ IG(a*, b*)`, then `θ | σ² ~ N(m, σ²Σ)`; reproducible for a seed.
pub fn sample_nig(post: &NigPosterior, n_draws: usize, seed: u64) -> Result<NigDraws> {
    sample_gaussian_part(post.mean.clone(), post.sigma(), post, n_draws, seed)
}

/// As [`sample_nig`] but for `Lθ`, whose conditional law is
/// `N(Lm, σ² LΣLᵀ)`; avoids forming `Σ` when only a projection is needed.
pub fn sample_nig_projected(post: &NigPosterior, l: &DMatrix<f64>, n_draws: usize, seed: u64) -> Result<NigDraws> {
    let (loc, cov) = post.project(l)?;
    sample_gaussian_part(loc, &cov, post, n_draws, seed)
}

fn sample_gaussian_part(
    loc: DVector<f64>,
    cov: &DMatrix<f64>,
    post: &NigPosterior,
    n_draws: usize,
    seed: u64,
) -> Result<NigDraws> {
    if n_draws == 0 {
        return Err(Error::Configuration("n_draws must be at least 1".into()));
    }
    let factor = psd_factor(cov, "posterior scale")?;
    let gamma = Gamma::new(post.a_star, 1.0 / post.b_star)
        .map_err(|e| Error::ParameterDomain(format!("inverse-gamma sampler: {e}")))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let k = loc.len();
    let mut theta = Vec::with_capacity(n_draws);
    let mut sigma2 = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let s2 = 1.0 / gamma.sample(&mut rng);
        let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
        theta.push(&loc + (&factor * z) * s2.sqrt());
        sigma2.push(s2);
    }
    Ok(NigDraws { theta, sigma2 })
}

/// A univariate law with a CDF, used for mixture quantiles.
pub trait UnivariateLaw {
    fn ln_pdf(&self, x: f64) -> f64;
    fn cdf(&self, x: f64) -> f64;
    /// A point with CDF at most/at least `p`, to seed bracketing.
    fn center(&self) -> f64;
    fn spread(&self) -> f64;
    fn mean(&self) -> Option<f64>;
    fn variance(&self) -> Option<f64>;

    fn quantile(&self, p: f64) -> f64 {
        bisect_quantile(|x| self.cdf(x), p, self.center(), self.spread())
    }
}

/// Solves `cdf(x) = p` by bracketing outward from `center` then bisection.
pub fn bisect_quantile(cdf: impl Fn(f64) -> f64, p: f64, center: f64, spread: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let step = if spread.is_finite() && spread > 0.0 { spread } else { 1.0 };
    let (mut lo, mut hi) = (center - step, center + step);
    let mut w = step;
    while cdf(lo) > p {
        w *= 2.0;
        lo = center - w;
        if !lo.is_finite() {
            break;
        }
    }
    let mut w = step;
    while cdf(hi) < p {
        w *= 2.0;
        hi = center + w;
        if !hi.is_finite() {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Univariate Student-t with squared scale `scale` (variance-like).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateT {
    pub dof: f64,
    pub loc: f64,
    pub scale: f64,
}

impl UnivariateLaw for UnivariateT {
    fn ln_pdf(&self, x: f64) -> f64 {
        if self.scale <= 0.0 {
            return if x == self.loc { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        let nu = self.dof;
        let z2 = (x - self.loc).powi(2) / self.scale;
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI * self.scale).ln()
            - 0.5 * (nu + 1.0) * (z2 / nu).ln_1p()
    }

    fn cdf(&self, x: f64) -> f64 {
        if self.scale <= 0.0 {
            return if x < self.loc { 0.0 } else { 1.0 };
        }
        StudentsT::new(self.loc, self.scale.sqrt(), self.dof).map(|d| d.cdf(x)).unwrap_or(f64::NAN)
    }

    fn center(&self) -> f64 {
        self.loc
    }

    fn mean(&self) -> Option<f64> {
        (self.dof > 1.0).then_some(self.loc)
    }

    fn variance(&self) -> Option<f64> {
        (self.dof > 2.0).then(|| self.scale * self.dof / (self.dof - 2.0))
    }

    fn spread(&self) -> f64 {
        self.scale.sqrt()
    }
}

/// Inverse-Gamma law with shape `shape` and scale `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl UnivariateLaw for InverseGamma {
    fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln() - self.scale / x
    }

    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            gamma_ur(self.shape, self.scale / x)
        }
    }

    fn center(&self) -> f64 {
        self.scale / (self.shape + 1.0)
    }

    fn spread(&self) -> f64 {
        self.center()
    }

    fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    fn variance(&self) -> Option<f64> {
        (self.shape > 2.0).then(|| self.scale.powi(2) / ((self.shape - 1.0).powi(2) * (self.shape - 2.0)))
    }

    fn quantile(&self, p: f64) -> f64 {
        // Bisection in log-space keeps the search inside (0, ∞).
        let lq = bisect_quantile(|lx| self.cdf(lx.exp()), p, self.center().ln(), 1.0);
        lq.exp()
    }
}

/// Multivariate Student-t `t_ν(loc, scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentT {
    pub dof: f64,
    pub loc: DVector<f64>,
    pub scale: DMatrix<f64>,
}

impl StudentT {
    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn marginal(&self, i: usize) -> UnivariateT {
        UnivariateT { dof: self.dof, loc: self.loc[i], scale: self.scale[(i, i)] }
    }

    pub fn marginals(&self) -> Vec<UnivariateT> {
        (0..self.dim()).map(|i| self.marginal(i)).collect()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        t_logdensity(x, self)
    }
}

/// Log-density of the multivariate t, via a Cholesky factor of the scale.
pub fn t_logdensity(x: &DVector<f64>, t: &StudentT) -> Result<f64> {
    let p = t.dim();
    if x.len() != p || t.scale.nrows() != p || t.scale.ncols() != p {
        return Err(Error::Dimension(format!("t density: point has {} entries, law has dimension {p}", x.len())));
    }
    if !(t.dof > 0.0 && t.dof.is_finite()) {
        return Err(Error::ParameterDomain(format!("degrees of freedom must be positive, got {}", t.dof)));
    }
    let spd = SpdMatrix::new(t.scale.clone(), crate::linalg::JitterPolicy::Disabled, "t scale")?;
    let diff = x - &t.loc;
    let q = spd.quad_form(&diff);
    let nu = t.dof;
    let pf = p as f64;
    Ok(ln_gamma(0.5 * (nu + pf)) - ln_gamma(0.5 * nu) - 0.5 * pf * (nu * std::f64::consts::PI).ln()
        - 0.5 * spd.log_det()
        - 0.5 * (nu + pf) * (q / nu).ln_1p())
}

/// `∫ exp(t_logdensity)` over the plane for a bivariate law, by polar
/// quadrature in whitened coordinates with `r = tan u` (Simpson in `u`,
/// trapezoid in angle).
pub fn bivariate_t_mass(t: &StudentT, radial: usize, angular: usize) -> Result<f64> {
    if t.dim() != 2 {
        return Err(Error::Dimension(format!("expected a bivariate law, got dimension {}", t.dim())));
    }
    let l = psd_factor(&t.scale, "t scale")?;
    let det = l[(0, 0)] * l[(1, 1)];
    let radial = radial + radial % 2;
    let hu = std::f64::consts::FRAC_PI_2 / radial as f64;
    let ht = 2.0 * std::f64::consts::PI / angular as f64;
    let mut total = 0.0;
    for i in 0..=radial {
        // The integrand has a finite limit at u = π/2 (nonzero for one
        // degree of freedom); evaluate just inside it.
        let u = if i == radial { std::f64::consts::FRAC_PI_2 - 1e-9 } else { i as f64 * hu };
        let w = if i == 0 || i == radial { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let (r, sec2) = (u.tan(), 1.0 / u.cos().powi(2));
        let mut ring = 0.0;
        for k in 0..angular {
            let th = k as f64 * ht;
            let z = DVector::from_vec(vec![r * th.cos(), r * th.sin()]);
            let x = &t.loc + &l * z;
            ring += t_logdensity(&x, t)?.exp();
        }
        total += w * ring * ht * r * sec2 * det;
    }
    Ok(total * hu / 3.0)
}
