//! Discrete-time trajectory model.
//!
//! One observation per epoch `t = 1..T` at location `γ(t)`:
//!
//! ```text
//! y_t = x_tᵀ β_t + z_t(γ(t)) + η_t
//! β_t = β_{t-1} + N(0, σ² δ_β² W_p),   z_t = z_{t-1} + N(0, σ² δ_z² K_φ(Γ̃))
//! ```
//!
//! with `z_t` carried at the `n ≤ T` distinct visited locations `Γ̃`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bayes_core::{
    PredictiveForm,
    nig_posterior, AugmentedSystem, Design, IgPrior, NigPosterior, Outer, RowKind, ScaleBlock, StudentT, UnivariateT,
};
use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::kernels::{cross_kernel, gram, KernelSpec, SpaceTimePoint};
use crate::linalg::{JitterPolicy, SpdMatrix};

/// Max-norm tolerance under which two locations count as one.
pub const DEDUP_EPS: f64 = 1e-9;

/// Distinct locations of a trajectory and the epoch-to-location map `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationIndex {
    distinct: Vec<[f64; 2]>,
    assignment: Vec<usize>,
    eps: f64,
}

impl LocationIndex {
    pub fn distinct(&self) -> &[[f64; 2]] {
        &self.distinct
    }

    /// Number of distinct locations `n`.
    pub fn n(&self) -> usize {
        self.distinct.len()
    }

    /// Number of epochs `T`.
    pub fn epochs(&self) -> usize {
        self.assignment.len()
    }

    /// Distinct-location index `j(t)` of epoch `t` (0-based).
    pub fn index(&self, t: usize) -> usize {
        self.assignment[t]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Index of the distinct location within `eps` of `s`, if any.
    pub fn lookup(&self, s: [f64; 2]) -> Option<usize> {
        self.distinct.iter().position(|d| same_location(d, &s, self.eps))
    }

    /// Dense `T × nT` selector with a one at `(t, n·t + j(t))`.
    pub fn selector(&self) -> DMatrix<f64> {
        let (t_len, n) = (self.epochs(), self.n());
        let mut b = DMatrix::zeros(t_len, n * t_len);
        for (t, &j) in self.assignment.iter().enumerate() {
            b[(t, n * t + j)] = 1.0;
        }
        b
    }
}

fn same_location(a: &[f64; 2], b: &[f64; 2], eps: f64) -> bool {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs()) <= eps
}

/// Groups `points` into distinct locations in first-occurrence order. A point
/// joins the first earlier representative within `eps` in max-norm.
pub fn dedup_locations(points: &[[f64; 2]], eps: f64) -> Result<LocationIndex> {
    if points.is_empty() {
        return Err(Error::EmptyData("no locations to index".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::ParameterDomain(format!("dedup tolerance {eps} must be non-negative")));
    }
    let mut distinct: Vec<[f64; 2]> = Vec::new();
    let mut assignment = Vec::with_capacity(points.len());
    for p in points {
        match distinct.iter().position(|d| same_location(d, p, eps)) {
            Some(j) => assignment.push(j),
            None => {
                assignment.push(distinct.len());
                distinct.push(*p);
            }
        }
    }
    Ok(LocationIndex { distinct, assignment, eps })
}

/// Fixed hyperparameters of one discrete-time candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteTrajSpec {
    pub delta_beta: f64,
    pub delta_z: f64,
    /// Spatial kernel `K_φ`; must be Matérn.
    pub kernel: KernelSpec,
    /// Correlation among coefficients; identity when `None`.
    #[serde(default)]
    pub w_p: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub prior: IgPrior,
    /// Whether the latent process `z` is part of the model.
    #[serde(default = "yes")]
    pub spatial_effect: bool,
    /// Prior variance (in units of σ²) of `β_0`; zero pins `β_0 = 0`.
    #[serde(default)]
    pub initial_beta_variance: f64,
    #[serde(default)]
    pub predictive: PredictiveForm,
}

fn yes() -> bool {
    true
}

impl DiscreteTrajSpec {
    pub fn new(delta_beta: f64, delta_z: f64, kernel: KernelSpec) -> Self {
        DiscreteTrajSpec {
            delta_beta,
            delta_z,
            kernel,
            w_p: None,
            prior: IgPrior::default(),
            spatial_effect: true,
            initial_beta_variance: 0.0,
            predictive: PredictiveForm::PlugIn,
        }
    }

    /// Non-spatial dynamic linear model baseline: random-walk coefficients
    /// with `β_0 ~ N(0, 10 σ² I)`, innovation scale `10/7` (the mean of an
    /// `IW(10, 10 I₂)` matrix), `σ² ~ IG(½, ½)` and no latent process.
    pub fn nsdlm() -> Self {
        DiscreteTrajSpec {
            delta_beta: (10.0f64 / 7.0).sqrt(),
            delta_z: 1.0,
            kernel: KernelSpec::Matern { phi: 1.0, nu: 0.5 },
            w_p: None,
            prior: IgPrior { a: 0.5, b: 0.5 },
            spatial_effect: false,
            initial_beta_variance: 10.0,
            predictive: PredictiveForm::PlugIn,
        }
    }

    pub fn with_prior(mut self, prior: IgPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_predictive(mut self, form: PredictiveForm) -> Self {
        self.predictive = form;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_beta", self.delta_beta), ("delta_z", self.delta_z)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::ParameterDomain(format!("{name} = {v} must be positive and finite")));
            }
        }
        if !(self.initial_beta_variance >= 0.0 && self.initial_beta_variance.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "initial_beta_variance = {} must be non-negative",
                self.initial_beta_variance
            )));
        }
        self.prior.validate()?;
        if self.spatial_effect {
            self.kernel.validate()?;
            if !matches!(self.kernel, KernelSpec::Matern { .. }) {
                return Err(Error::Configuration("discrete trajectory model needs a Matérn kernel".into()));
            }
        }
        Ok(())
    }

    fn coefficient_correlation(&self, p: usize) -> Result<SpdMatrix> {
        let m = match &self.w_p {
            None => DMatrix::identity(p, p),
            Some(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Dimension(format!("W_p must be {p}x{p}")));
                }
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            }
        };
        if (0..p).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
            return Err(Error::InvalidInput("W_p must be symmetric".into()));
        }
        SpdMatrix::new(m, JitterPolicy::Disabled, "coefficient correlation W_p")
    }
}

/// Layout of `θ = (β_1, …, β_T, z_1, …, z_T)` for a fitted discrete model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteLayout {
    /// Number of epochs in `θ`.
    pub epochs: usize,
    pub p: usize,
    /// Distinct locations (zero without a latent process).
    pub n: usize,
}

impl DiscreteLayout {
    pub fn dim(&self) -> usize {
        (self.p + self.n) * self.epochs
    }

    /// Position of `β_t[j]` (0-based epoch).
    pub fn beta(&self, t: usize, j: usize) -> usize {
        t * self.p + j
    }

    /// Position of `z_t(γ̃_k)` (0-based epoch).
    pub fn z(&self, t: usize, k: usize) -> usize {
        self.p * self.epochs + t * self.n + k
    }
}

/// Augmented system for the rows of `data` with a response, together with
/// its layout and location index. Epochs are row ranks; epochs after the last
/// observed row are left out of `θ`.
pub fn build_system_discrete(
    data: &TrajectoryDataset,
    spec: &DiscreteTrajSpec,
) -> Result<(AugmentedSystem, DiscreteLayout, Option<LocationIndex>)> {
    spec.validate()?;
    let observed = data.observed();
    let Some(&last) = observed.last() else {
        return Err(Error::EmptyData("discrete trajectory model needs at least one observed epoch".into()));
    };
    let epochs = last + 1;
    let p = data.p();
    let index = if spec.spatial_effect {
        let locs: Vec<[f64; 2]> = observed.iter().map(|&i| data.location(i)).collect();
        Some(dedup_locations(&locs, DEDUP_EPS)?)
    } else {
        None
    };
    let n = index.as_ref().map_or(0, |ix| ix.n());
    let layout = DiscreteLayout { epochs, p, n };
    if layout.dim() == 0 {
        return Err(Error::Configuration("model has neither covariates nor a latent process".into()));
    }

    let mut rows = Vec::with_capacity(observed.len());
    for (r, &i) in observed.iter().enumerate() {
        let mut row: Vec<(usize, f64)> = data.x(i).iter().enumerate().map(|(j, &v)| (layout.beta(i, j), v)).collect();
        if let Some(ix) = &index {
            row.push((layout.z(i, ix.index(r)), 1.0));
        }
        rows.push(row);
    }
    let y = DVector::from_vec(data.observed_values(&observed)?);
    let mut sys = AugmentedSystem::new(layout.dim());
    sys.push("data", RowKind::Data, y, Design::Sparse(rows), ScaleBlock::Identity(observed.len()))?;

    if p > 0 {
        let db2 = spec.delta_beta * spec.delta_beta;
        let outer = if spec.initial_beta_variance > 0.0 {
            let v0 = spec.initial_beta_variance / db2;
            let m = DMatrix::from_fn(epochs, epochs, |s, t| (s.min(t) + 1) as f64 + v0);
            Outer::Dense(SpdMatrix::new(m, JitterPolicy::Ladder, "coefficient random walk")?)
        } else {
            Outer::RandomWalk(epochs)
        };
        let block = ScaleBlock::Kronecker { scale: db2, outer, inner: spec.coefficient_correlation(p)? };
        sys.push(
            "beta prior",
            RowKind::Prior,
            DVector::zeros(p * epochs),
            Design::Select { offset: 0, len: p * epochs },
            block,
        )?;
    }
    if let Some(ix) = &index {
        let pts: Vec<SpaceTimePoint> = ix.distinct().iter().map(|&s| SpaceTimePoint::at(s)).collect();
        let k = gram(&pts, &spec.kernel, JitterPolicy::Ladder)?.into_spd();
        let block =
            ScaleBlock::Kronecker { scale: spec.delta_z * spec.delta_z, outer: Outer::RandomWalk(epochs), inner: k };
        sys.push(
            "z prior",
            RowKind::Prior,
            DVector::zeros(n * epochs),
            Design::Select { offset: p * epochs, len: n * epochs },
            block,
        )?;
    }
    Ok((sys, layout, index))
}

/// Posterior of a discrete-time candidate, with what is needed to predict.
#[derive(Debug)]
pub struct DiscreteFit {
    spec: DiscreteTrajSpec,
    layout: DiscreteLayout,
    index: Option<LocationIndex>,
    observed: Vec<usize>,
    post: NigPosterior,
    k: Option<SpdMatrix>,
}

/// Predictive laws at one trajectory point.
#[derive(Debug, Clone)]
pub struct DiscretePrediction {
    pub y: UnivariateT,
    pub z: UnivariateT,
    pub beta: StudentT,
    /// Epochs past the last fitted epoch (zero inside the fitted range).
    pub horizon: usize,
}

/// Fits one discrete-time candidate on the observed rows of `data`.
pub fn fit_discrete(data: &TrajectoryDataset, spec: &DiscreteTrajSpec) -> Result<DiscreteFit> {
    let (sys, layout, index) = build_system_discrete(data, spec)?;
    let post = nig_posterior(&sys, spec.prior)?;
    let k = match &index {
        Some(ix) => {
            let pts: Vec<SpaceTimePoint> = ix.distinct().iter().map(|&s| SpaceTimePoint::at(s)).collect();
            Some(gram(&pts, &spec.kernel, JitterPolicy::Ladder)?.into_spd())
        }
        None => None,
    };
    Ok(DiscreteFit { spec: spec.clone(), layout, index, observed: data.observed(), post, k })
}

impl DiscreteFit {
    pub fn posterior(&self) -> &NigPosterior {
        &self.post
    }

    pub fn layout(&self) -> DiscreteLayout {
        self.layout
    }

    pub fn index(&self) -> Option<&LocationIndex> {
        self.index.as_ref()
    }

    pub fn spec(&self) -> &DiscreteTrajSpec {
        &self.spec
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    /// Posterior means `β̂_t`, one row per epoch.
    pub fn beta_hat(&self) -> DMatrix<f64> {
        let l = self.layout;
        DMatrix::from_fn(l.epochs, l.p, |t, j| self.post.mean()[l.beta(t, j)])
    }

    /// Posterior means `ẑ_t` at the distinct locations, one row per epoch.
    pub fn z_hat(&self) -> DMatrix<f64> {
        let l = self.layout;
        DMatrix::from_fn(l.epochs, l.n, |t, k| self.post.mean()[l.z(t, k)])
    }

    fn signal_row(&self, data: &TrajectoryDataset, r: usize) -> Vec<(usize, f64)> {
        let i = self.observed[r];
        let mut row: Vec<(usize, f64)> =
            data.x(i).iter().enumerate().map(|(j, &v)| (self.layout.beta(i, j), v)).collect();
        if let Some(ix) = &self.index {
            row.push((self.layout.z(i, ix.index(r)), 1.0));
        }
        row
    }

    /// Posterior law of the noise-free signal `x_tᵀβ_t + z_t(γ(t))` at the
    /// observed rows, jointly.
    /// Matrix taking `θ` to the signal at the observed rows.
    pub fn signal_map(&self, data: &TrajectoryDataset) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.observed.len(), self.layout.dim());
        for r in 0..self.observed.len() {
            for (c, v) in self.signal_row(data, r) {
                l[(r, c)] += v;
            }
        }
        l
    }

    pub fn fitted_signal_law(&self, data: &TrajectoryDataset) -> Result<StudentT> {
        self.post.linear_law(&self.signal_map(data))
    }

    /// Posterior mean of the signal at the observed rows.
    pub fn fitted_signal(&self, data: &TrajectoryDataset) -> Vec<f64> {
        let m = self.post.mean();
        (0..self.observed.len()).map(|r| self.signal_row(data, r).iter().map(|&(c, v)| v * m[c]).sum()).collect()
    }

    /// Predictive laws at row `row` of `data` (epoch `row + 1`). Beyond the
    /// fitted range the coefficients take `h` random-walk steps from `β̂_T`
    /// and the latent effect is kriged from `ẑ_T` plus `h - 1` innovations.
    pub fn predict_row(&self, data: &TrajectoryDataset, row: usize) -> Result<DiscretePrediction> {
        if row >= data.len() {
            return Err(Error::Dimension(format!("row {row} out of range for {} rows", data.len())));
        }
        let t = row.min(self.layout.epochs - 1);
        let horizon = (row + 1).saturating_sub(self.layout.epochs);
        self.predict_at(t, horizon, data.x(row), data.location(row))
    }

    /// Predictive laws for `y_{T+1}` at location `s` with covariates `x`.
    pub fn predict_next(&self, x: &[f64], s: [f64; 2]) -> Result<DiscretePrediction> {
        self.predict_at(self.layout.epochs - 1, 1, x, s)
    }

    fn predict_at(&self, t: usize, horizon: usize, x: &[f64], s: [f64; 2]) -> Result<DiscretePrediction> {
        let l = self.layout;
        if x.len() != l.p {
            return Err(Error::Dimension(format!("{} covariates supplied, model has {}", x.len(), l.p)));
        }
        let m = self.post.mean();
        let factor = self.post.scale_factor();
        let dof = 2.0 * self.post.a_star();
        let h = horizon as f64;

        let beta_hat = DVector::from_fn(l.p, |j, _| m[l.beta(t, j)]);
        let w = self.spec.coefficient_correlation(l.p)?;
        let db2 = self.spec.delta_beta * self.spec.delta_beta;
        let xv = DVector::from_column_slice(x);
        let beta_var = h * db2 * (w.matrix() * &xv).dot(&xv);

        let (z_coef, z_var) = match (&self.index, &self.k) {
            (Some(ix), Some(k)) => {
                let dz2 = self.spec.delta_z * self.spec.delta_z;
                match ix.lookup(s) {
                    Some(j) => {
                        let mut e = DVector::zeros(l.n);
                        e[j] = 1.0;
                        (Some(e), h.max(1.0) * dz2 - dz2)
                    }
                    None => {
                        let pts: Vec<SpaceTimePoint> = ix.distinct().iter().map(|&d| SpaceTimePoint::at(d)).collect();
                        let k0 = cross_kernel(&pts, &[SpaceTimePoint::at(s)], &self.spec.kernel);
                        let wts = k.solve_mat(&k0).column(0).into_owned();
                        let krig = (1.0 - k0.column(0).dot(&wts)).max(0.0);
                        (Some(wts), dz2 * krig + (h - 1.0).max(0.0) * dz2)
                    }
                }
            }
            _ => (None, 0.0),
        };
        let z_loc = z_coef.as_ref().map_or(0.0, |c| (0..l.n).map(|j| c[j] * m[l.z(t, j)]).sum());
        let y_loc = xv.dot(&beta_hat) + z_loc;
        let mut y_scale = factor * (1.0 + beta_var + z_var);
        let mut z_scale = factor * z_var;
        let mut b_scale = w.matrix() * (factor * h * db2);
        if self.spec.predictive == PredictiveForm::Full {
            let mut lm = DMatrix::zeros(2 + l.p, l.dim());
            for j in 0..l.p {
                lm[(0, l.beta(t, j))] = x[j];
                lm[(2 + j, l.beta(t, j))] = 1.0;
            }
            if let Some(c) = &z_coef {
                for j in 0..l.n {
                    lm[(0, l.z(t, j))] = c[j];
                    lm[(1, l.z(t, j))] = c[j];
                }
            }
            let (_, extra) = self.post.project(&lm)?;
            y_scale += factor * extra[(0, 0)];
            z_scale += factor * extra[(1, 1)];
            b_scale += extra.view((2, 2), (l.p, l.p)) * factor;
        }
        Ok(DiscretePrediction {
            y: UnivariateT { dof, loc: y_loc, scale: y_scale },
            z: UnivariateT { dof, loc: z_loc, scale: z_scale },
            beta: StudentT { dof, loc: beta_hat, scale: b_scale },
            horizon,
        })
    }
}
