//! Continuous space-time trajectory model.
//!
//! ```text
//! y(γ(t), t) = Σ_j x_j β_j(t) + z(γ(t), t) + η(t)
//! β_j ~ GP(0, σ² δ_β² C_ξ),   z ~ GP(0, σ² δ_z² K_φ)
//! ```
//!
//! `C_ξ` is squared-exponential in time and `K_φ` the non-separable
//! space-time kernel, so revisited locations at distinct times stay
//! identifiable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bayes_core::{
    PredictiveForm,
    nig_posterior, AugmentedSystem, Design, IgPrior, NigPosterior, Outer, RowKind, ScaleBlock, StudentT,
};
use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::kernels::{cross_kernel, gram, KernelSpec, SpaceTimePoint};
use crate::linalg::{symmetrize, JitterPolicy, SpdMatrix};

/// Fixed hyperparameters of one continuous-time candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousTrajSpec {
    pub delta_beta: f64,
    pub delta_z: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub xi: f64,
    #[serde(default)]
    pub prior: IgPrior,
    #[serde(default)]
    pub predictive: PredictiveForm,
}

impl ContinuousTrajSpec {
    pub fn new(delta_beta: f64, delta_z: f64, phi1: f64, phi2: f64, xi: f64) -> Self {
        ContinuousTrajSpec { delta_beta, delta_z, phi1, phi2, xi, prior: IgPrior::default(), predictive: PredictiveForm::PlugIn }
    }

    pub fn with_prior(mut self, prior: IgPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_predictive(mut self, form: PredictiveForm) -> Self {
        self.predictive = form;
        self
    }

    pub fn space_time_kernel(&self) -> KernelSpec {
        KernelSpec::Gneiting { phi1: self.phi1, phi2: self.phi2 }
    }

    pub fn time_kernel(&self) -> KernelSpec {
        KernelSpec::SqExp { xi: self.xi }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_beta", self.delta_beta),
            ("delta_z", self.delta_z),
            ("phi1", self.phi1),
            ("phi2", self.phi2),
            ("xi", self.xi),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::ParameterDomain(format!("{name} = {v} must be positive and finite")));
            }
        }
        self.prior.validate()
    }
}

fn points(data: &TrajectoryDataset, rows: &[usize]) -> Vec<SpaceTimePoint> {
    rows.iter().map(|&i| data.point(i)).collect()
}

fn times(data: &TrajectoryDataset, rows: &[usize]) -> Vec<SpaceTimePoint> {
    rows.iter().map(|&i| SpaceTimePoint::when(data.time(i))).collect()
}

/// Augmented system over the observed rows of `data`, with
/// `θ = (β_1, …, β_p, z)` each of length `n`.
pub fn build_system_continuous(data: &TrajectoryDataset, spec: &ContinuousTrajSpec) -> Result<AugmentedSystem> {
    Ok(assemble(data, spec)?.0)
}

struct Blocks {
    c_beta: SpdMatrix,
    k_z: SpdMatrix,
}

fn assemble(data: &TrajectoryDataset, spec: &ContinuousTrajSpec) -> Result<(AugmentedSystem, Blocks)> {
    spec.validate()?;
    let observed = data.observed();
    let n = observed.len();
    if n == 0 {
        return Err(Error::EmptyData("continuous trajectory model needs at least one observation".into()));
    }
    let p = data.p();
    let c_beta = gram(&times(data, &observed), &spec.time_kernel(), JitterPolicy::Ladder)?.into_spd();
    let k_z = gram(&points(data, &observed), &spec.space_time_kernel(), JitterPolicy::Ladder)?.into_spd();

    let rows: Vec<Vec<(usize, f64)>> = observed
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let mut row: Vec<(usize, f64)> = data.x(i).iter().enumerate().map(|(j, &v)| (j * n + r, v)).collect();
            row.push((p * n + r, 1.0));
            row
        })
        .collect();
    let y = DVector::from_vec(data.observed_values(&observed)?);
    let mut sys = AugmentedSystem::new((p + 1) * n);
    sys.push("data", RowKind::Data, y, Design::Sparse(rows), ScaleBlock::Identity(n))?;
    if p > 0 {
        let block = ScaleBlock::Kronecker {
            scale: spec.delta_beta * spec.delta_beta,
            outer: Outer::Identity(p),
            inner: c_beta.clone(),
        };
        sys.push("beta prior", RowKind::Prior, DVector::zeros(p * n), Design::Select { offset: 0, len: p * n }, block)?;
    }
    let dz2 = spec.delta_z * spec.delta_z;
    let kz = SpdMatrix::new(k_z.matrix() * dz2, JitterPolicy::Ladder, "scaled space-time Gram")?;
    sys.push("z prior", RowKind::Prior, DVector::zeros(n), Design::Select { offset: p * n, len: n }, ScaleBlock::Dense(kz))?;
    Ok((sys, Blocks { c_beta, k_z }))
}

/// Posterior of a continuous-time candidate with its kernel factors.
#[derive(Debug)]
pub struct ContinuousFit {
    spec: ContinuousTrajSpec,
    observed: Vec<usize>,
    points: Vec<SpaceTimePoint>,
    p: usize,
    post: NigPosterior,
    c_beta: SpdMatrix,
    k_z: SpdMatrix,
    /// `C_β⁻¹ β̂_j` for each `j`, column-wise.
    beta_weights: DMatrix<f64>,
    /// `K_φ⁻¹ ẑ`.
    z_weights: DVector<f64>,
}

/// Joint predictive laws at new trajectory points.
#[derive(Debug, Clone)]
pub struct ContinuousPrediction {
    pub y: StudentT,
    pub z: StudentT,
    /// One law per coefficient, over the new time points.
    pub beta: Vec<StudentT>,
}

/// Fits one continuous-time candidate on the observed rows of `data`. Times
/// are strictly increasing, so no space-time point repeats.
pub fn fit_continuous(data: &TrajectoryDataset, spec: &ContinuousTrajSpec) -> Result<ContinuousFit> {
    let observed = data.observed();
    let (sys, blocks) = assemble(data, spec)?;
    let post = nig_posterior(&sys, spec.prior)?;
    let n = observed.len();
    let p = data.p();
    let m = post.mean();
    let beta_hat = DMatrix::from_fn(n, p, |r, j| m[j * n + r]);
    let beta_weights = blocks.c_beta.solve_mat(&beta_hat);
    let z_hat = m.rows(p * n, n).into_owned();
    let z_weights = blocks.k_z.solve_vec(&z_hat);
    Ok(ContinuousFit {
        spec: *spec,
        points: points(data, &observed),
        observed,
        p,
        post,
        c_beta: blocks.c_beta,
        k_z: blocks.k_z,
        beta_weights,
        z_weights,
    })
}

impl ContinuousFit {
    pub fn posterior(&self) -> &NigPosterior {
        &self.post
    }

    pub fn spec(&self) -> &ContinuousTrajSpec {
        &self.spec
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn n(&self) -> usize {
        self.observed.len()
    }

    /// Posterior means `β̂_j(t_i)`, one column per coefficient.
    pub fn beta_hat(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, self.p, |r, j| self.post.mean()[j * n + r])
    }

    pub fn z_hat(&self) -> DVector<f64> {
        self.post.mean().rows(self.p * self.n(), self.n()).into_owned()
    }

    /// Posterior mean of the noise-free signal at the observed rows.
    pub fn fitted_signal(&self, data: &TrajectoryDataset) -> Vec<f64> {
        let (n, m) = (self.n(), self.post.mean());
        self.observed
            .iter()
            .enumerate()
            .map(|(r, &i)| data.x(i).iter().enumerate().map(|(j, &v)| v * m[j * n + r]).sum::<f64>() + m[self.p * n + r])
            .collect()
    }

    /// Joint posterior law of the signal at the observed rows.
    /// Matrix taking `θ` to the signal at the observed rows.
    pub fn signal_map(&self, data: &TrajectoryDataset) -> DMatrix<f64> {
        let n = self.n();
        let mut l = DMatrix::zeros(n, (self.p + 1) * n);
        for (r, &i) in self.observed.iter().enumerate() {
            for (j, &v) in data.x(i).iter().enumerate() {
                l[(r, j * n + r)] = v;
            }
            l[(r, self.p * n + r)] = 1.0;
        }
        l
    }

    pub fn fitted_signal_law(&self, data: &TrajectoryDataset) -> Result<StudentT> {
        self.post.linear_law(&self.signal_map(data))
    }

    /// Predictive laws at rows `rows` of `data`.
    pub fn predict_rows(&self, data: &TrajectoryDataset, rows: &[usize]) -> Result<ContinuousPrediction> {
        let pts = points(data, rows);
        let x = data.design(rows);
        self.predict_points(&pts, &x)
    }

    /// Predictive laws of `y`, `z` and each `β_j` at new space-time points
    /// with covariate rows `x` (`n_0 × p`).
    pub fn predict_points(&self, new: &[SpaceTimePoint], x: &DMatrix<f64>) -> Result<ContinuousPrediction> {
        let n0 = new.len();
        if x.nrows() != n0 || x.ncols() != self.p {
            return Err(Error::Dimension(format!(
                "covariates are {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                n0,
                self.p
            )));
        }
        if let Some(bad) = new.iter().position(|q| !q.is_finite()) {
            return Err(Error::Data { row: bad, message: "non-finite prediction point".into() });
        }
        let factor = self.post.scale_factor();
        let dof = 2.0 * self.post.a_star();
        let (db2, dz2) = (self.spec.delta_beta.powi(2), self.spec.delta_z.powi(2));

        let kz0 = cross_kernel(&self.points, new, &self.spec.space_time_kernel());
        let kz00 = cross_kernel(new, new, &self.spec.space_time_kernel());
        let z_loc = kz0.transpose() * &self.z_weights;
        let mut z_cov = (kz00 - kz0.transpose() * self.k_z.solve_mat(&kz0)) * dz2;
        symmetrize(&mut z_cov);

        let obs_t: Vec<SpaceTimePoint> = self.points.iter().map(|q| SpaceTimePoint::when(q.t)).collect();
        let new_t: Vec<SpaceTimePoint> = new.iter().map(|q| SpaceTimePoint::when(q.t)).collect();
        let cb0 = cross_kernel(&obs_t, &new_t, &self.spec.time_kernel());
        let cb00 = cross_kernel(&new_t, &new_t, &self.spec.time_kernel());
        let mut b_cov = (cb00 - cb0.transpose() * self.c_beta.solve_mat(&cb0)) * db2;
        symmetrize(&mut b_cov);
        let b_loc = cb0.transpose() * &self.beta_weights;

        let mut y_loc = z_loc.clone();
        let mut y_cov = z_cov.clone();
        let mut beta = Vec::with_capacity(self.p);
        for j in 0..self.p {
            let xj = x.column(j);
            for i in 0..n0 {
                y_loc[i] += xj[i] * b_loc[(i, j)];
                for k in 0..n0 {
                    y_cov[(i, k)] += xj[i] * b_cov[(i, k)] * xj[k];
                }
            }
            beta.push(StudentT { dof, loc: b_loc.column(j).into_owned(), scale: &b_cov * factor });
        }
        if self.spec.predictive == PredictiveForm::Full {
            let n = self.n();
            let kz_w = self.k_z.solve_mat(&kz0);
            let cb_w = self.c_beta.solve_mat(&cb0);
            let mut l = DMatrix::zeros((self.p + 2) * n0, (self.p + 1) * n);
            for i in 0..n0 {
                for r in 0..n {
                    l[(i, self.p * n + r)] = kz_w[(r, i)];
                    l[(n0 + i, self.p * n + r)] = kz_w[(r, i)];
                    for j in 0..self.p {
                        l[(i, j * n + r)] = x[(i, j)] * cb_w[(r, i)];
                        l[((2 + j) * n0 + i, j * n + r)] = cb_w[(r, i)];
                    }
                }
            }
            let (_, extra) = self.post.project(&l)?;
            y_cov += extra.view((0, 0), (n0, n0));
            z_cov += extra.view((n0, n0), (n0, n0));
            for (j, b) in beta.iter_mut().enumerate() {
                let o = (2 + j) * n0;
                b.scale += extra.view((o, o), (n0, n0)) * factor;
            }
        }
        for i in 0..n0 {
            y_cov[(i, i)] += 1.0;
        }
        Ok(ContinuousPrediction {
            y: StudentT { dof, loc: y_loc, scale: y_cov * factor },
            z: StudentT { dof, loc: z_loc, scale: z_cov * factor },
            beta,
        })
    }
}
