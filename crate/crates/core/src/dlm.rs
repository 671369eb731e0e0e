//! Forward filtering for the conjugate Bayesian dynamic linear model
//!
//! ```text
//! y_t = F_t θ_t + η_t,      η_t ~ N(0, σ² V_t)
//! θ_t = G_t θ_{t-1} + ω_t,  ω_t ~ N(0, σ² S_t)
//! σ² ~ IG(n_σ/2, n_σ s_σ/2),  θ_0 | σ² ~ N(m_0, σ² S_0)
//! ```
//!
//! plus its spatial adaptation where `θ_t = (β_t, z_t)` and the `z` block
//! evolves with a Matérn covariance over fixed locations.

use nalgebra::{DMatrix, DVector};

use crate::bayes_core::{InverseGamma, PredictiveForm, StudentT};
use crate::error::{Error, Result};
use crate::kernels::{cross_kernel, gram, KernelSpec, SpaceTimePoint};
use crate::linalg::{symmetrize, JitterPolicy, SpdMatrix};

/// Filtered posterior at epoch `t`: `σ² ~ IG(n/2, n s/2)` and
/// `θ_t | σ² ~ N(m, σ² W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DlmState {
    pub t: usize,
    pub n: f64,
    pub s: f64,
    pub m: DVector<f64>,
    pub w: DMatrix<f64>,
}

impl DlmState {
    /// Prior state at `t = 0`.
    pub fn prior(n_sigma: f64, s_sigma: f64, m0: DVector<f64>, s0: DMatrix<f64>) -> Result<Self> {
        if !(n_sigma > 0.0 && n_sigma.is_finite()) || !(s_sigma > 0.0 && s_sigma.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "prior n_sigma = {n_sigma}, s_sigma = {s_sigma}; both must be positive and finite"
            )));
        }
        if s0.nrows() != m0.len() || s0.ncols() != m0.len() {
            return Err(Error::Dimension(format!(
                "prior mean has length {}, prior scale is {}x{}",
                m0.len(),
                s0.nrows(),
                s0.ncols()
            )));
        }
        let mut w = s0;
        symmetrize(&mut w);
        Ok(DlmState { t: 0, n: n_sigma, s: s_sigma, m: m0, w })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Marginal posterior `t_n(m, s W)` of the state.
    pub fn theta_law(&self) -> StudentT {
        StudentT { dof: self.n, loc: self.m.clone(), scale: &self.w * self.s }
    }

    pub fn sigma2_law(&self) -> InverseGamma {
        InverseGamma { shape: 0.5 * self.n, scale: 0.5 * self.n * self.s }
    }
}

/// One-step predictive quantities produced while filtering.
#[derive(Debug, Clone)]
pub struct Innovation {
    /// One-step forecast mean `f_t`.
    pub f: DVector<f64>,
    /// One-step forecast scale `Q_t` (in units of σ²).
    pub q: DMatrix<f64>,
    /// `L⁻¹(y_t - f_t)` with `Q_t = L Lᵀ`, scaled by `1/√s_{t-1}`.
    pub standardized: DVector<f64>,
}

fn check_dims(state: &DlmState, y: &DVector<f64>, f: &DMatrix<f64>, g: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<()> {
    let d = state.dim();
    if g.nrows() != g.ncols() || s.nrows() != s.ncols() || g.ncols() != d || s.nrows() != g.nrows() {
        return Err(Error::Dimension(format!(
            "state has dimension {d}, G is {}x{}, S is {}x{}",
            g.nrows(),
            g.ncols(),
            s.nrows(),
            s.ncols()
        )));
    }
    if f.ncols() != g.nrows() || f.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "F is {}x{} but y has length {} and the state dimension is {}",
            f.nrows(),
            f.ncols(),
            y.len(),
            g.nrows()
        )));
    }
    Ok(())
}

/// Prior of `θ_{t+1}` given data to `t`: mean `G m`, scale `G W Gᵀ + S`.
pub fn propagate(state: &DlmState, g: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DlmState> {
    check_dims(state, &DVector::zeros(0), &DMatrix::zeros(0, g.nrows()), g, s)?;
    let mut r = g * &state.w * g.transpose() + s;
    symmetrize(&mut r);
    Ok(DlmState { t: state.t + 1, n: state.n, s: state.s, m: g * &state.m, w: r })
}

/// Advances the filter by one epoch with `V_t = I`.
pub fn filter_step(
    state: &DlmState,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<DlmState> {
    filter_update(state, y, f, g, s).map(|(next, _)| next)
}

/// [`filter_step`] that also returns the innovation.
pub fn filter_update(
    state: &DlmState,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<(DlmState, Innovation)> {
    check_dims(state, y, f, g, s)?;
    let prior = propagate(state, g, s)?;
    let r = prior.w;
    let a = &prior.m;
    let fc = f * a;
    let rf = &r * f.transpose();
    let mut q = f * &rf;
    for i in 0..q.nrows() {
        q[(i, i)] += 1.0;
    }
    symmetrize(&mut q);
    let q_spd = SpdMatrix::new(q.clone(), JitterPolicy::Ladder, "forecast scale Q_t")?;
    let e = y - &fc;
    let qe = q_spd.solve_vec(&e);
    let m = a + &rf * &qe;
    let gain_t = q_spd.solve_mat(&rf.transpose());
    let mut w = &r - &rf * gain_t;
    symmetrize(&mut w);
    let n = state.n + y.len() as f64;
    let ns = state.n * state.s + e.dot(&qe);
    let standardized = q_spd.chol().l().solve_lower_triangular(&e).unwrap_or_else(|| e.clone()) / state.s.sqrt();
    let next = DlmState { t: state.t + 1, n, s: ns / n, m, w };
    Ok((next, Innovation { f: fc, q, standardized }))
}

/// Filter step with diagonal observation scales `v` (`V_t = diag(v)`),
/// handled by pre-whitening rows.
pub fn filter_update_weighted(
    state: &DlmState,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    s: &DMatrix<f64>,
    v: &[f64],
) -> Result<(DlmState, Innovation)> {
    if v.len() != y.len() {
        return Err(Error::Dimension(format!("{} observation scales for {} observations", v.len(), y.len())));
    }
    if let Some(bad) = v.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::ParameterDomain(format!("observation scale {bad} must be positive")));
    }
    let root: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
    let yw = DVector::from_fn(y.len(), |i, _| y[i] / root[i]);
    let fw = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)] / root[i]);
    filter_update(state, &yw, &fw, g, s)
}

/// Marginal predictive law of `y_{t+h}` given data to `t`, with `F`, `G`,
/// `S` held fixed over the horizon.
pub fn forecast(state: &DlmState, f: &DMatrix<f64>, g: &DMatrix<f64>, s: &DMatrix<f64>, h: usize) -> Result<StudentT> {
    if h == 0 {
        return Err(Error::InvalidInput("forecast horizon must be at least 1".into()));
    }
    check_dims(state, &DVector::zeros(f.nrows()), f, g, s)?;
    let mut cur = state.clone();
    for _ in 1..h {
        cur = propagate(&cur, g, s)?;
    }
    let ahead = propagate(&cur, g, s)?;
    let mut q = f * &ahead.w * f.transpose();
    for i in 0..q.nrows() {
        q[(i, i)] += 1.0;
    }
    symmetrize(&mut q);
    Ok(StudentT { dof: state.n, loc: f * &ahead.m, scale: q * state.s })
}

/// One model specification over `T` epochs with time-varying matrices.
#[derive(Debug, Clone)]
pub struct DlmSpec {
    pub n_sigma: f64,
    pub s_sigma: f64,
    pub m0: DVector<f64>,
    pub s0: DMatrix<f64>,
    pub epochs: Vec<DlmEpoch>,
}

/// Data and system matrices for one epoch. `v = None` means `V_t = I`.
#[derive(Debug, Clone)]
pub struct DlmEpoch {
    pub y: DVector<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub v: Option<Vec<f64>>,
}

impl DlmSpec {
    /// Filtered states for epochs `1..=T`.
    pub fn filter(&self) -> Result<Vec<DlmState>> {
        let mut state = DlmState::prior(self.n_sigma, self.s_sigma, self.m0.clone(), self.s0.clone())?;
        let mut out = Vec::with_capacity(self.epochs.len());
        for ep in &self.epochs {
            state = match &ep.v {
                None => filter_step(&state, &ep.y, &ep.f, &ep.g, &ep.s)?,
                Some(v) => filter_update_weighted(&state, &ep.y, &ep.f, &ep.g, &ep.s, v)?.0,
            };
            out.push(state.clone());
        }
        Ok(out)
    }
}

/// Spatial DLM over fixed locations `χ`: `θ_t = (β_t, z_t)`, `F_t = [X_t I]`,
/// `G = diag(I_p, α I_n)`, `S = diag(δ_β² I_p, δ_z² K_φ(χ))`.
#[derive(Debug, Clone)]
pub struct SpatialDlm {
    p: usize,
    locations: Vec<[f64; 2]>,
    kernel: KernelSpec,
    delta_beta: f64,
    delta_z: f64,
    alpha: f64,
    k: SpdMatrix,
}

impl SpatialDlm {
    pub fn new(
        p: usize,
        locations: Vec<[f64; 2]>,
        kernel: KernelSpec,
        delta_beta: f64,
        delta_z: f64,
        alpha: f64,
    ) -> Result<Self> {
        kernel.validate()?;
        if !matches!(kernel, KernelSpec::Matern { .. }) {
            return Err(Error::Configuration("the spatial DLM needs a Matérn kernel".into()));
        }
        if locations.is_empty() {
            return Err(Error::EmptyData("spatial DLM needs at least one location".into()));
        }
        for (name, v) in [("delta_beta", delta_beta), ("delta_z", delta_z)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::ParameterDomain(format!("{name} = {v} must be positive")));
            }
        }
        if !alpha.is_finite() {
            return Err(Error::ParameterDomain(format!("alpha = {alpha} must be finite")));
        }
        let pts: Vec<SpaceTimePoint> = locations.iter().map(|&s| SpaceTimePoint::at(s)).collect();
        let k = gram(&pts, &kernel, JitterPolicy::Ladder)?.into_spd();
        Ok(SpatialDlm { p, locations, kernel, delta_beta, delta_z, alpha, k })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn dim(&self) -> usize {
        self.p + self.n()
    }

    pub fn locations(&self) -> &[[f64; 2]] {
        &self.locations
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    /// Spatial correlation matrix `K_φ(χ)` (including any jitter).
    pub fn correlation(&self) -> &DMatrix<f64> {
        self.k.matrix()
    }

    pub fn evolution(&self) -> DMatrix<f64> {
        let mut g = DMatrix::identity(self.dim(), self.dim());
        for i in self.p..self.dim() {
            g[(i, i)] = self.alpha;
        }
        g
    }

    pub fn evolution_scale(&self) -> DMatrix<f64> {
        let (p, d) = (self.p, self.dim());
        let mut s = DMatrix::zeros(d, d);
        for i in 0..p {
            s[(i, i)] = self.delta_beta * self.delta_beta;
        }
        let dz2 = self.delta_z * self.delta_z;
        s.view_mut((p, p), (d - p, d - p)).copy_from(&(self.k.matrix() * dz2));
        s
    }

    pub fn observation(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n() || x.ncols() != self.p {
            return Err(Error::Dimension(format!(
                "covariates are {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                self.n(),
                self.p
            )));
        }
        let mut f = DMatrix::zeros(self.n(), self.dim());
        f.view_mut((0, 0), (self.n(), self.p)).copy_from(x);
        for i in 0..self.n() {
            f[(i, self.p + i)] = 1.0;
        }
        Ok(f)
    }

    /// Prior state with `m_0 = 0` and `S_0 = diag(v_β I_p, K_φ(χ))`.
    pub fn prior(&self, n_sigma: f64, s_sigma: f64, beta_variance: f64) -> Result<DlmState> {
        let (p, d) = (self.p, self.dim());
        let mut s0 = DMatrix::zeros(d, d);
        for i in 0..p {
            s0[(i, i)] = beta_variance;
        }
        s0.view_mut((p, p), (d - p, d - p)).copy_from(self.k.matrix());
        DlmState::prior(n_sigma, s_sigma, DVector::zeros(d), s0)
    }

    pub fn step(&self, state: &DlmState, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DlmState> {
        filter_step(state, y, &self.observation(x)?, &self.evolution(), &self.evolution_scale())
    }

    pub fn step_detailed(&self, state: &DlmState, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<(DlmState, Innovation)> {
        filter_update(state, y, &self.observation(x)?, &self.evolution(), &self.evolution_scale())
    }

    /// Posterior predictive law of `y` at `new_locations` with covariate rows
    /// `x0`, at the epoch of `state`. `kernel` and `delta_z` must be those
    /// the model was built with.
    pub fn spatial_predict(
        &self,
        state: &DlmState,
        new_locations: &[[f64; 2]],
        x0: &DMatrix<f64>,
        kernel: KernelSpec,
        delta_z: f64,
    ) -> Result<StudentT> {
        self.spatial_predict_with(state, new_locations, x0, kernel, delta_z, PredictiveForm::PlugIn)
    }

    /// As [`SpatialDlm::spatial_predict`]; `PredictiveForm::Full` uses the
    /// whole filtered covariance `W_t` of `(β_t, z_t)` instead of its `β`
    /// block.
    pub fn spatial_predict_with(
        &self,
        state: &DlmState,
        new_locations: &[[f64; 2]],
        x0: &DMatrix<f64>,
        kernel: KernelSpec,
        delta_z: f64,
        form: PredictiveForm,
    ) -> Result<StudentT> {
        if kernel != self.kernel || delta_z != self.delta_z {
            return Err(Error::Configuration(format!(
                "prediction kernel {kernel:?} with delta_z = {delta_z} differs from the fitted {:?} with delta_z = {}",
                self.kernel, self.delta_z
            )));
        }
        if state.dim() != self.dim() {
            return Err(Error::Dimension(format!("state has dimension {}, model {}", state.dim(), self.dim())));
        }
        let n0 = new_locations.len();
        if x0.nrows() != n0 || x0.ncols() != self.p {
            return Err(Error::Dimension(format!(
                "covariates are {}x{}, expected {}x{}",
                x0.nrows(),
                x0.ncols(),
                n0,
                self.p
            )));
        }
        let (p, n) = (self.p, self.n());
        let obs: Vec<SpaceTimePoint> = self.locations.iter().map(|&s| SpaceTimePoint::at(s)).collect();
        let new: Vec<SpaceTimePoint> = new_locations.iter().map(|&s| SpaceTimePoint::at(s)).collect();
        let k0 = cross_kernel(&obs, &new, &self.kernel);
        let k00 = cross_kernel(&new, &new, &self.kernel);
        let weights = self.k.solve_mat(&k0);
        let m_beta = state.m.rows(0, p).into_owned();
        let m_z = state.m.rows(p, n).into_owned();
        let loc = x0 * m_beta + weights.transpose() * m_z;
        let dz2 = delta_z * delta_z;
        let spread = match form {
            PredictiveForm::PlugIn => x0 * state.w.view((0, 0), (p, p)) * x0.transpose(),
            PredictiveForm::Full => {
                let mut l = DMatrix::zeros(n0, p + n);
                l.view_mut((0, 0), (n0, p)).copy_from(x0);
                l.view_mut((0, p), (n0, n)).copy_from(&weights.transpose());
                &l * &state.w * l.transpose()
            }
        };
        let mut scale = spread + (k00 - k0.transpose() * &weights) * dz2;
        for i in 0..n0 {
            scale[(i, i)] += 1.0;
        }
        symmetrize(&mut scale);
        Ok(StudentT { dof: state.n, loc, scale: scale * state.s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes_core::{nig_posterior, AugmentedSystem, Design, IgPrior, RowKind, ScaleBlock};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_filter_step() {
        let st = DlmState::prior(1.0, 1.0, DVector::zeros(1), scalar(1.0)).unwrap();
        let (next, inn) =
            filter_update(&st, &DVector::from_element(1, 1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_relative_eq!(inn.q[(0, 0)], 3.0, epsilon = 1e-14);
        assert_relative_eq!(next.m[0], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(next.w[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(next.n, 2.0, epsilon = 1e-14);
        assert_relative_eq!(next.s, 2.0 / 3.0, epsilon = 1e-14);
        let fc = forecast(&next, &scalar(1.0), &scalar(1.0), &scalar(1.0), 1).unwrap();
        assert_relative_eq!(fc.dof, 2.0);
        assert_relative_eq!(fc.loc[0], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(fc.scale[(0, 0)], 16.0 / 9.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_innovation_keeps_scale_sum() {
        let st = DlmState::prior(3.0, 0.7, DVector::from_vec(vec![1.0, -1.0]), DMatrix::identity(2, 2)).unwrap();
        let f = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let g = DMatrix::identity(2, 2);
        let y = &f * &g * &st.m;
        let next = filter_step(&st, &y, &f, &g, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(next.n * next.s, st.n * st.s, epsilon = 1e-12);
    }

    #[test]
    fn annihilating_evolution_forecasts_zero() {
        let st = DlmState::prior(2.0, 1.0, DVector::from_vec(vec![3.0, 1.0]), DMatrix::identity(2, 2)).unwrap();
        let fc = forecast(&st, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 3).unwrap();
        assert_eq!(fc.loc, DVector::zeros(2));
    }

    #[test]
    fn two_step_forecast_is_propagation_then_one_step() {
        let st = DlmState::prior(4.0, 0.5, DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2) * 0.3).unwrap();
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let g = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let s = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let two = forecast(&st, &f, &g, &s, 2).unwrap();
        let mid = propagate(&st, &g, &s).unwrap();
        let one = forecast(&mid, &f, &g, &s, 1).unwrap();
        assert_relative_eq!(two.loc, one.loc, epsilon = 1e-14);
        assert_relative_eq!(two.scale, one.scale, epsilon = 1e-14);
        assert!(forecast(&st, &f, &g, &s, 0).is_err());
    }

    #[test]
    fn one_epoch_matches_batch_posterior() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut nrm = || -> f64 { StandardNormal.sample(&mut rng) };
        let (d, n) = (3, 5);
        let f = DMatrix::from_fn(n, d, |_, _| nrm());
        let g = DMatrix::from_fn(d, d, |i, j| if i == j { 0.9 } else { 0.1 * nrm() });
        let a = DMatrix::from_fn(d, d, |_, _| nrm());
        let s = &a * a.transpose() * 0.2 + DMatrix::identity(d, d) * 0.1;
        let b = DMatrix::from_fn(d, d, |_, _| nrm());
        let s0 = &b * b.transpose() * 0.5 + DMatrix::identity(d, d);
        let m0 = DVector::from_fn(d, |_, _| nrm());
        let y = DVector::from_fn(n, |_, _| nrm());
        let (n_sigma, s_sigma) = (3.0, 0.8);

        let st = DlmState::prior(n_sigma, s_sigma, m0.clone(), s0.clone()).unwrap();
        let next = filter_step(&st, &y, &f, &g, &s).unwrap();

        let r1 = &g * &s0 * g.transpose() + &s;
        let data = ScaleBlock::Identity(n);
        let prior = ScaleBlock::Dense(SpdMatrix::new(r1, JitterPolicy::Disabled, "R1").unwrap());
        let sys = AugmentedSystem::new(d)
            .with_block("data", RowKind::Data, y.clone(), Design::Dense(f.clone()), data)
            .unwrap()
            .with_block("prior", RowKind::Prior, &g * &m0, Design::Dense(DMatrix::identity(d, d)), prior)
            .unwrap();
        let post = nig_posterior(&sys, IgPrior::new(0.5 * n_sigma, 0.5 * n_sigma * s_sigma).unwrap()).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        for i in 0..d {
            assert!(rel(next.m[i], post.mean()[i]) < 1e-10);
            for j in 0..d {
                assert!((next.w[(i, j)] - post.sigma()[(i, j)]).abs() < 1e-10 * next.w[(i, i)].abs().max(1.0));
            }
        }
        assert!(rel(0.5 * next.n, post.a_star()) < 1e-12);
        assert!(rel(0.5 * next.n * next.s, post.b_star()) < 1e-10);
    }

    #[test]
    fn weighted_step_equals_whitened_rows() {
        let st = DlmState::prior(2.0, 1.0, DVector::zeros(1), scalar(1.0)).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let f = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let (a, _) = filter_update_weighted(&st, &y, &f, &scalar(1.0), &scalar(0.5), &[4.0, 1.0]).unwrap();
        let yw = DVector::from_vec(vec![0.5, 2.0]);
        let fw = DMatrix::from_column_slice(2, 1, &[0.5, 1.0]);
        let b = filter_step(&st, &yw, &fw, &scalar(1.0), &scalar(0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut nrm = || -> f64 { StandardNormal.sample(&mut rng) };
        let d = 4;
        let mut st = DlmState::prior(1.0, 1.0, DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
        let g = DMatrix::identity(d, d);
        let s = DMatrix::identity(d, d) * 0.3;
        for _ in 0..50 {
            let f = DMatrix::from_fn(3, d, |_, _| nrm());
            let y = DVector::from_fn(3, |_, _| nrm());
            st = filter_step(&st, &y, &f, &g, &s).unwrap();
            assert_eq!(st.w, st.w.transpose());
            let eig = st.w.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-12);
        }
    }

    fn toy_spatial(p: usize) -> SpatialDlm {
        let locs = vec![[0.1, 0.2], [0.7, 0.4], [0.3, 0.9]];
        SpatialDlm::new(p, locs, KernelSpec::Matern { phi: 0.5, nu: 1.5 }, 1.0, 0.8, 1.0).unwrap()
    }

    #[test]
    fn spatial_prediction_at_observed_location_interpolates() {
        let model = toy_spatial(1);
        let st = model.prior(2.0, 1.0, 1.0).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, -0.2]);
        let st = model.step(&st, &DVector::from_vec(vec![0.3, -0.4, 1.1]), &x).unwrap();
        let x0 = DMatrix::from_element(1, 1, 0.0);
        let pred = model.spatial_predict(&st, &[[0.7, 0.4]], &x0, model.kernel(), 0.8).unwrap();
        assert_relative_eq!(pred.loc[0], st.m[2], epsilon = 1e-9);
        let wrong = model.spatial_predict(&st, &[[0.7, 0.4]], &x0, KernelSpec::Matern { phi: 0.4, nu: 1.5 }, 0.8);
        assert!(matches!(wrong, Err(Error::Configuration(_))));
    }

    #[test]
    fn spatial_prediction_matches_joint_gaussian() {
        let model = toy_spatial(0);
        let st = model.prior(3.0, 1.0, 1.0).unwrap();
        let x = DMatrix::zeros(3, 0);
        let st = model.step(&st, &DVector::from_vec(vec![0.3, -0.4, 1.1]), &x).unwrap();
        let new = [[0.5, 0.5], [0.0, 0.0]];
        let pred = model.spatial_predict(&st, &new, &DMatrix::zeros(2, 0), model.kernel(), 0.8).unwrap();

        let all: Vec<SpaceTimePoint> =
            model.locations().iter().chain(new.iter()).map(|&s| SpaceTimePoint::at(s)).collect();
        let c = crate::kernels::kernel_matrix(&all, &model.kernel()) * 0.64;
        let c_oo = c.view((0, 0), (3, 3)).into_owned();
        let c_on = c.view((0, 3), (3, 2)).into_owned();
        let c_nn = c.view((3, 3), (2, 2)).into_owned();
        let wts = c_oo.clone().cholesky().unwrap().solve(&c_on);
        let mean = wts.transpose() * &st.m;
        let mut cov = &c_nn - c_on.transpose() * &wts;
        cov += DMatrix::identity(2, 2);
        assert_relative_eq!(pred.loc, mean, epsilon = 1e-9);
        assert_relative_eq!(pred.scale, cov * st.s, epsilon = 1e-9);
    }

    #[test]
    fn full_spatial_prediction_carries_state_covariance() {
        let model = toy_spatial(1);
        let st = model.prior(2.0, 1.0, 1.0).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, -0.2]);
        let st = model.step(&st, &DVector::from_vec(vec![0.3, -0.4, 1.1]), &x).unwrap();
        let new = [[0.7, 0.4], [0.2, 0.9]];
        let x0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.5]);
        let plug = model.spatial_predict(&st, &new, &x0, model.kernel(), 0.8).unwrap();
        let full = model.spatial_predict_with(&st, &new, &x0, model.kernel(), 0.8, PredictiveForm::Full).unwrap();
        assert_relative_eq!(plug.loc, full.loc, epsilon = 1e-12);
        assert_relative_eq!(full.scale[(0, 0)], (1.0 + st.w[(2, 2)]) * st.s, epsilon = 1e-9);
        assert!(full.scale[(1, 1)] > plug.scale[(1, 1)]);
    }

    #[test]
    fn standardized_innovations_are_white() {
        let (n, steps) = (25, 100);
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let locs: Vec<[f64; 2]> =
            (0..n).map(|_| [rand::Rng::random::<f64>(&mut rng), rand::Rng::random::<f64>(&mut rng)]).collect();
        let model = SpatialDlm::new(2, locs, KernelSpec::Matern { phi: 1.0 / 7.0, nu: 1.0 }, 1.0, 1.0, 1.0).unwrap();
        let sigma = 1.0;
        let root_s = crate::linalg::psd_factor(&model.evolution_scale(), "S").unwrap();
        let root_s0 = crate::linalg::psd_factor(&model.prior(1.0, 1.0, 1.0).unwrap().w, "S0").unwrap();
        let mut nrm = |k: usize| DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let d = model.dim();
        let mut theta = &root_s0 * nrm(d) * sigma;
        let mut st = model.prior(1.0, sigma * sigma, 1.0).unwrap();
        let mut all = Vec::new();
        for _ in 0..steps {
            theta = &theta + &root_s * nrm(d) * sigma;
            let x = DMatrix::from_fn(n, 2, |_, _| 0.0) + DMatrix::from_vec(n, 2, nrm(2 * n).as_slice().to_vec()) * 2.0;
            let f = model.observation(&x).unwrap();
            let y = &f * &theta + nrm(n) * sigma;
            let (next, inn) = model.step_detailed(&st, &y, &x).unwrap();
            all.extend(inn.standardized.iter().map(|v| v * st.s.sqrt() / sigma));
            st = next;
        }
        let nt = all.len() as f64;
        let mean = all.iter().sum::<f64>() / nt;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nt - 1.0);
        assert!(mean.abs() < 3.0 / nt.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.2, "variance {var}");
    }
}
