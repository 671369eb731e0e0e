//! Predictive stacking over a grid of conjugate candidate models.
//!
//! Each candidate fixes every hyperparameter, so its posterior is exact. Fold
//! predictions are pooled into one weight problem: least squares on the
//! simplex for means, a concave log score for distributions.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes_core::{sample_nig_projected, InverseGamma, PredictiveForm, NigPosterior, StudentT, UnivariateLaw, UnivariateT};
use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::metrics::{information_criteria, Dic, Waic};
use crate::traj_continuous::{fit_continuous, ContinuousFit, ContinuousTrajSpec};
use crate::traj_discrete::{fit_discrete, DiscreteFit, DiscreteTrajSpec};

/// One candidate model with all hyperparameters fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Discrete(DiscreteTrajSpec),
    Continuous(ContinuousTrajSpec),
}

impl ModelSpec {
    pub fn predictive(&self) -> PredictiveForm {
        match self {
            ModelSpec::Discrete(s) => s.predictive,
            ModelSpec::Continuous(s) => s.predictive,
        }
    }

    pub fn label(&self) -> String {
        let base = match self {
            ModelSpec::Discrete(s) if !s.spatial_effect => format!("nsdlm(db={})", s.delta_beta),
            ModelSpec::Discrete(s) => match s.kernel {
                KernelSpec::Matern { phi, nu } => {
                    format!("discrete(phi={phi},nu={nu},db={},dz={})", s.delta_beta, s.delta_z)
                }
                k => format!("discrete({k:?},db={},dz={})", s.delta_beta, s.delta_z),
            },
            ModelSpec::Continuous(s) => format!(
                "continuous(phi1={},phi2={},xi={},db={},dz={})",
                s.phi1, s.phi2, s.xi, s.delta_beta, s.delta_z
            ),
        };
        match self.predictive() {
            PredictiveForm::PlugIn => base,
            PredictiveForm::Full => format!("{base}+full"),
        }
    }

    pub fn fit(&self, data: &TrajectoryDataset) -> Result<FittedModel> {
        match self {
            ModelSpec::Discrete(s) => fit_discrete(data, s).map(FittedModel::Discrete),
            ModelSpec::Continuous(s) => fit_continuous(data, s).map(FittedModel::Continuous),
        }
    }
}

/// Marginal predictive laws at one trajectory point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    pub y: UnivariateT,
    pub z: UnivariateT,
}

#[derive(Debug)]
pub enum FittedModel {
    Discrete(DiscreteFit),
    Continuous(ContinuousFit),
}

impl FittedModel {
    pub fn posterior(&self) -> &NigPosterior {
        match self {
            FittedModel::Discrete(f) => f.posterior(),
            FittedModel::Continuous(f) => f.posterior(),
        }
    }

    pub fn log_evidence(&self) -> Option<f64> {
        self.posterior().log_evidence()
    }

    pub fn sigma2_law(&self) -> InverseGamma {
        self.posterior().sigma2_law()
    }

    /// Marginal predictive laws at `rows` of `data`.
    pub fn predict_rows(&self, data: &TrajectoryDataset, rows: &[usize]) -> Result<Vec<PointPrediction>> {
        match self {
            FittedModel::Discrete(f) => rows
                .iter()
                .map(|&r| f.predict_row(data, r).map(|p| PointPrediction { y: p.y, z: p.z }))
                .collect(),
            FittedModel::Continuous(f) => {
                if rows.is_empty() {
                    return Ok(Vec::new());
                }
                let p = f.predict_rows(data, rows)?;
                Ok((0..rows.len()).map(|i| PointPrediction { y: p.y.marginal(i), z: p.z.marginal(i) }).collect())
            }
        }
    }

    /// Posterior mean of the noise-free signal at the observed rows.
    pub fn fitted_signal(&self, data: &TrajectoryDataset) -> Vec<f64> {
        match self {
            FittedModel::Discrete(f) => f.fitted_signal(data),
            FittedModel::Continuous(f) => f.fitted_signal(data),
        }
    }

    pub fn signal_map(&self, data: &TrajectoryDataset) -> DMatrix<f64> {
        match self {
            FittedModel::Discrete(f) => f.signal_map(data),
            FittedModel::Continuous(f) => f.signal_map(data),
        }
    }

    pub fn fitted_signal_law(&self, data: &TrajectoryDataset) -> Result<StudentT> {
        match self {
            FittedModel::Discrete(f) => f.fitted_signal_law(data),
            FittedModel::Continuous(f) => f.fitted_signal_law(data),
        }
    }

    /// DIC and WAIC of the signal at the observed rows from `n_draws`
    /// posterior draws.
    pub fn information_criteria(&self, data: &TrajectoryDataset, n_draws: usize, seed: u64) -> Result<(Dic, Waic)> {
        let draws = sample_nig_projected(self.posterior(), &self.signal_map(data), n_draws, seed)?;
        let y = data.observed_values(&data.observed())?;
        let s2 = self
            .sigma2_law()
            .mean()
            .ok_or_else(|| Error::ParameterDomain("posterior of sigma^2 has no mean".into()))?;
        information_criteria(&draws, &y, &self.fitted_signal(data), s2)
    }

    /// Posterior mean coefficients at the observed rows, `n_obs × p`.
    pub fn beta_at_observed(&self) -> DMatrix<f64> {
        match self {
            FittedModel::Discrete(f) => {
                let b = f.beta_hat();
                let obs = f.observed();
                DMatrix::from_fn(obs.len(), b.ncols(), |r, j| b[(obs[r], j)])
            }
            FittedModel::Continuous(f) => f.beta_hat(),
        }
    }
}

/// Axes of a Cartesian hyperparameter grid for the discrete model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteAxes {
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub delta_beta: Vec<f64>,
    /// Ignored when `tie_deltas` is set.
    #[serde(default)]
    pub delta_z: Vec<f64>,
    /// Use one `δ` for both `δ_β` and `δ_z`.
    #[serde(default)]
    pub tie_deltas: bool,
    #[serde(default)]
    pub predictive: PredictiveForm,
}

/// Axes of a Cartesian hyperparameter grid for the continuous model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousAxes {
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub xi: Vec<f64>,
    pub delta_beta: Vec<f64>,
    #[serde(default)]
    pub delta_z: Vec<f64>,
    #[serde(default)]
    pub tie_deltas: bool,
    #[serde(default)]
    pub predictive: PredictiveForm,
}

fn delta_pairs(db: &[f64], dz: &[f64], tie: bool) -> Vec<(f64, f64)> {
    if tie {
        db.iter().map(|&d| (d, d)).collect()
    } else {
        db.iter().flat_map(|&b| dz.iter().map(move |&z| (b, z))).collect()
    }
}

/// The `G` candidates to stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub candidates: Vec<ModelSpec>,
}

impl CandidateGrid {
    pub fn new(candidates: Vec<ModelSpec>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Configuration("candidate grid is empty".into()));
        }
        for (i, c) in candidates.iter().enumerate() {
            if candidates[..i].contains(c) {
                return Err(Error::Configuration(format!("duplicate candidate {}", c.label())));
            }
        }
        Ok(CandidateGrid { candidates })
    }

    pub fn discrete(axes: &DiscreteAxes, prior: crate::bayes_core::IgPrior) -> Result<Self> {
        let mut out = Vec::new();
        for &phi in &axes.phi {
            for &nu in &axes.nu {
                for (db, dz) in delta_pairs(&axes.delta_beta, &axes.delta_z, axes.tie_deltas) {
                    let spec = DiscreteTrajSpec::new(db, dz, KernelSpec::Matern { phi, nu })
                        .with_prior(prior)
                        .with_predictive(axes.predictive);
                    spec.validate()?;
                    out.push(ModelSpec::Discrete(spec));
                }
            }
        }
        CandidateGrid::new(out)
    }

    pub fn continuous(axes: &ContinuousAxes, prior: crate::bayes_core::IgPrior) -> Result<Self> {
        let mut out = Vec::new();
        for &phi1 in &axes.phi1 {
            for &phi2 in &axes.phi2 {
                for &xi in &axes.xi {
                    for (db, dz) in delta_pairs(&axes.delta_beta, &axes.delta_z, axes.tie_deltas) {
                        let spec = ContinuousTrajSpec::new(db, dz, phi1, phi2, xi)
                            .with_prior(prior)
                            .with_predictive(axes.predictive);
                        spec.validate()?;
                        out.push(ModelSpec::Continuous(spec));
                    }
                }
            }
        }
        CandidateGrid::new(out)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    RandomKFold,
    ExpandingWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    pub scheme: FoldScheme,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Splits `rows` (time-ordered row indices) into training/validation sets.
pub fn make_folds(rows: &[usize], plan: &FoldPlan) -> Result<Vec<Fold>> {
    let n = rows.len();
    if plan.k < 2 {
        return Err(Error::Configuration(format!("fold count {} must be at least 2", plan.k)));
    }
    if plan.k > n {
        return Err(Error::Configuration(format!("{} folds requested for {n} observations", plan.k)));
    }
    let bounds: Vec<usize> = (0..=plan.k).map(|b| b * n / plan.k).collect();
    let mut folds = Vec::with_capacity(plan.k);
    match plan.scheme {
        FoldScheme::RandomKFold => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha20Rng::seed_from_u64(plan.seed));
            for b in 0..plan.k {
                let mut valid: Vec<usize> = perm[bounds[b]..bounds[b + 1]].iter().map(|&i| rows[i]).collect();
                valid.sort_unstable();
                let train: Vec<usize> = rows.iter().copied().filter(|r| valid.binary_search(r).is_err()).collect();
                folds.push(Fold { train, valid });
            }
        }
        FoldScheme::ExpandingWindow => {
            for b in 1..plan.k {
                folds.push(Fold {
                    train: rows[..bounds[b]].to_vec(),
                    valid: rows[bounds[b]..bounds[b + 1]].to_vec(),
                });
            }
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    Means,
    Distributions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingResult {
    pub weights: Vec<f64>,
    /// Squared error (means) or log score (distributions) at the weights.
    pub objective: f64,
    /// Largest KKT violation at the returned weights.
    pub kkt_violation: f64,
}

const RIDGE: f64 = 1e-12;

/// Minimizes `½ aᵀHa + gᵀa` over the probability simplex by a primal
/// active-set method. `h` must be positive definite.
fn simplex_qp(h: &DMatrix<f64>, g: &DVector<f64>, start: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    let tol = 1e-13 * (1.0 + h.amax() + g.amax());
    let mut a = start.clone();
    let mut free: Vec<bool> = a.iter().map(|&v| v > 0.0).collect();
    for _ in 0..(50 * n + 50) {
        let idx: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
        let m = idx.len();
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                kkt[(r, c)] = h[(i, j)];
            }
            kkt[(r, m)] = 1.0;
            kkt[(m, r)] = 1.0;
            rhs[r] = -g[i];
        }
        rhs[m] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else { break };
        let mut x = DVector::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            x[i] = sol[r];
        }
        if idx.iter().all(|&i| x[i] >= 0.0) {
            a = x;
            let grad = h * &a + g;
            let nu = -sol[m];
            let (mut worst, mut which) = (-tol, None);
            for j in 0..n {
                if !free[j] {
                    let mu = grad[j] + nu;
                    if mu < worst {
                        worst = mu;
                        which = Some(j);
                    }
                }
            }
            match which {
                Some(j) => free[j] = true,
                None => return a,
            }
        } else {
            let mut step = 1.0;
            let mut block = None;
            for &i in &idx {
                if x[i] < 0.0 {
                    let s = a[i] / (a[i] - x[i]);
                    if s < step {
                        step = s;
                        block = Some(i);
                    }
                }
            }
            a = &a + (&x - &a) * step;
            if let Some(i) = block {
                free[i] = false;
                a[i] = 0.0;
            }
            for &i in &idx {
                if a[i] <= 0.0 {
                    free[i] = false;
                    a[i] = 0.0;
                }
            }
            if !free.iter().any(|&f| f) {
                let j = (0..n).max_by(|&p, &q| start[p].total_cmp(&start[q])).unwrap_or(0);
                free[j] = true;
                a[j] = 1.0;
            }
        }
    }
    let s = a.sum();
    a / s
}

/// Largest violation of the simplex KKT conditions for minimizing a function
/// with gradient `grad` at `a`: equal gradients on the support, no smaller
/// off it.
pub fn simplex_kkt_violation(a: &[f64], grad: &[f64], support_tol: f64) -> f64 {
    let support: Vec<usize> = (0..a.len()).filter(|&j| a[j] > support_tol).collect();
    let level = support.iter().map(|&j| grad[j]).sum::<f64>() / support.len().max(1) as f64;
    let mut worst: f64 = 0.0;
    for j in 0..a.len() {
        let d = grad[j] - level;
        worst = worst.max(if support.contains(&j) { d.abs() } else { (-d).max(0.0) });
    }
    worst
}

/// Weights minimizing `‖y - P a‖²` over the simplex. Ties resolve towards
/// the minimum-norm optimum.
pub fn stack_means(p: &DMatrix<f64>, y: &[f64]) -> Result<StackingResult> {
    let (n, g) = p.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} prediction rows for {} responses", y.len())));
    }
    if g == 0 || n == 0 {
        return Err(Error::EmptyData("stack_means needs at least one candidate and one row".into()));
    }
    if let Some(k) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data { row: k % n, message: "non-finite predictive mean".into() });
    }
    let yv = DVector::from_column_slice(y);
    if g == 1 {
        let r = &yv - p.column(0);
        return Ok(StackingResult { weights: vec![1.0], objective: r.norm_squared(), kkt_violation: 0.0 });
    }
    let mut h = p.transpose() * p;
    let scale = (0..g).map(|j| h[(j, j)]).fold(0.0, f64::max).max(1.0);
    for j in 0..g {
        h[(j, j)] += RIDGE * scale;
    }
    let lin = -(p.transpose() * &yv);
    let start = DVector::from_element(g, 1.0 / g as f64);
    let a = simplex_qp(&h, &lin, &start);
    let resid = &yv - p * &a;
    let grad = (p.transpose() * (p * &a - &yv)) * 2.0;
    let kkt = simplex_kkt_violation(a.as_slice(), grad.as_slice(), 1e-9) / scale.max(1.0);
    Ok(StackingResult { weights: a.iter().copied().collect(), objective: resid.norm_squared(), kkt_violation: kkt })
}

fn log_score(e: &DMatrix<f64>, shift: &[f64], a: &DVector<f64>) -> f64 {
    let mix = e * a;
    mix.iter().zip(shift).map(|(&m, &s)| if m > 0.0 { m.ln() + s } else { f64::NEG_INFINITY }).sum()
}

/// Weights maximizing `Σ_i log Σ_g a_g exp(L_ig)` over the simplex. `-∞`
/// entries are zero densities. Flat directions keep the uniform start.
pub fn stack_distributions(l: &DMatrix<f64>) -> Result<StackingResult> {
    let (n, g) = l.shape();
    if g == 0 || n == 0 {
        return Err(Error::EmptyData("stack_distributions needs at least one candidate and one row".into()));
    }
    let mut shift = Vec::with_capacity(n);
    for i in 0..n {
        let row = l.row(i);
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Data { row: i, message: "log density is NaN or +inf".into() });
        }
        let m = row.max();
        if m == f64::NEG_INFINITY {
            return Err(Error::Data { row: i, message: "every candidate assigns zero density".into() });
        }
        shift.push(m);
    }
    let e = DMatrix::from_fn(n, g, |i, j| (l[(i, j)] - shift[i]).exp());
    let mut a = DVector::from_element(g, 1.0 / g as f64);

    for _ in 0..50 {
        let mix = &e * &a;
        let mut next = DVector::zeros(g);
        for j in 0..g {
            next[j] = a[j] * (0..n).map(|i| e[(i, j)] / mix[i]).sum::<f64>() / n as f64;
        }
        a = &next / next.sum();
    }

    let mut f = log_score(&e, &shift, &a);
    for _ in 0..200 {
        let mix = &e * &a;
        let mut grad = DVector::zeros(g);
        let mut hess = DMatrix::zeros(g, g);
        for i in 0..n {
            let w = 1.0 / mix[i];
            let row = e.row(i).transpose() * w;
            grad += &row;
            hess.ger(1.0, &row, &row, 1.0);
        }
        let scale = (0..g).map(|j| hess[(j, j)]).fold(0.0, f64::max).max(1e-300);
        let mut m = hess.clone();
        for j in 0..g {
            m[(j, j)] += 1e-10 * scale;
        }
        // Maximize grad·(b - a) - ½ (b - a)ᵀ M (b - a) over b in the simplex.
        let lin = -(&m * &a) - &grad;
        let b = simplex_qp(&m, &lin, &a);
        let dir = &b - &a;
        let slope = grad.dot(&dir);
        if slope <= 1e-15 * (1.0 + f.abs()) {
            break;
        }
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-12 {
            let trial = &a + &dir * t;
            let ft = log_score(&e, &shift, &trial);
            if ft >= f + 1e-4 * t * slope {
                a = trial;
                f = ft;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let mix = &e * &a;
    let grad: Vec<f64> = (0..g).map(|j| -(0..n).map(|i| e[(i, j)] / mix[i]).sum::<f64>() / n as f64).collect();
    let kkt = simplex_kkt_violation(a.as_slice(), &grad, 1e-9);
    Ok(StackingResult { weights: a.iter().copied().collect(), objective: f, kkt_violation: kkt })
}

/// Posterior model probabilities from log evidences and prior weights
/// (uniform when `None`).
pub fn bma_weights(log_evidence: &[f64], prior: Option<&[f64]>) -> Result<Vec<f64>> {
    let g = log_evidence.len();
    if g == 0 {
        return Err(Error::EmptyData("no models to average".into()));
    }
    if let Some(i) = log_evidence.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data { row: i, message: "non-finite log evidence".into() });
    }
    let prior: Vec<f64> = match prior {
        Some(p) if p.len() != g => {
            return Err(Error::Dimension(format!("{} prior weights for {g} models", p.len())));
        }
        Some(p) => {
            if p.iter().any(|&w| !(w >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput("prior model weights must lie on the simplex".into()));
            }
            p.to_vec()
        }
        None => vec![1.0 / g as f64; g],
    };
    let logs: Vec<f64> =
        log_evidence.iter().zip(&prior).map(|(&l, &p)| if p > 0.0 { l + p.ln() } else { f64::NEG_INFINITY }).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let un: Vec<f64> = logs.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = un.iter().sum();
    Ok(un.iter().map(|v| v / s).collect())
}

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Finite mixture `Σ a_g p_g` of univariate laws.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture<L> {
    pub weights: Vec<f64>,
    pub components: Vec<L>,
}

impl<L: UnivariateLaw> Mixture<L> {
    pub fn new(weights: Vec<f64>, components: Vec<L>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::Dimension(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput("mixture weights must lie on the simplex".into()));
        }
        Ok(Mixture { weights, components })
    }

    fn active(&self) -> impl Iterator<Item = (f64, &L)> {
        self.weights.iter().copied().zip(&self.components).filter(|(w, _)| *w > 0.0)
    }

    /// Mean, failing when a weighted component has none.
    pub fn try_mean(&self) -> Result<f64> {
        self.mean().ok_or_else(|| Error::ParameterDomain("a mixture component has no mean (dof ≤ 1)".into()))
    }

    pub fn try_variance(&self) -> Result<f64> {
        self.variance().ok_or_else(|| Error::ParameterDomain("a mixture component has no variance (dof ≤ 2)".into()))
    }

    /// Equal-tailed interval with coverage `level`.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let tail = 0.5 * (1.0 - level);
        (self.quantile(tail), self.quantile(1.0 - tail))
    }
}

impl<L: UnivariateLaw> UnivariateLaw for Mixture<L> {
    fn ln_pdf(&self, x: f64) -> f64 {
        log_sum_exp(self.active().map(|(w, c)| w.ln() + c.ln_pdf(x)))
    }

    fn cdf(&self, x: f64) -> f64 {
        self.active().map(|(w, c)| w * c.cdf(x)).sum()
    }

    fn center(&self) -> f64 {
        self.active().map(|(w, c)| w * c.center()).sum()
    }

    fn spread(&self) -> f64 {
        let m = self.center();
        self.active().map(|(_, c)| c.spread() + (c.center() - m).abs()).fold(0.0, f64::max)
    }

    fn mean(&self) -> Option<f64> {
        let mut acc = 0.0;
        for (w, c) in self.active() {
            acc += w * c.mean()?;
        }
        Some(acc)
    }

    fn variance(&self) -> Option<f64> {
        let m = self.mean()?;
        let mut acc = 0.0;
        for (w, c) in self.active() {
            let cm = c.mean()?;
            acc += w * (c.variance()? + (cm - m).powi(2));
        }
        Some(acc)
    }
}

/// Mixture of multivariate t laws of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTMixture {
    pub weights: Vec<f64>,
    pub components: Vec<StudentT>,
}

/// `Σ a_g t_g` for weights on the simplex.
pub fn stacked_mixture(weights: &[f64], components: Vec<StudentT>) -> Result<StudentTMixture> {
    if weights.len() != components.len() || components.is_empty() {
        return Err(Error::Dimension(format!("{} weights for {} components", weights.len(), components.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput("mixture weights must lie on the simplex".into()));
    }
    let d = components[0].dim();
    if components.iter().any(|c| c.dim() != d) {
        return Err(Error::Dimension("mixture components differ in dimension".into()));
    }
    Ok(StudentTMixture { weights: weights.to_vec(), components })
}

impl StudentTMixture {
    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w > 0.0 {
                terms.push(w.ln() + c.log_density(x)?);
            }
        }
        Ok(log_sum_exp(terms.into_iter()))
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w > 0.0 {
                if c.dof <= 1.0 {
                    return Err(Error::ParameterDomain("a mixture component has no mean (dof ≤ 1)".into()));
                }
                acc += &c.loc * *w;
            }
        }
        Ok(acc)
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let m = self.mean()?;
        let mut acc = DMatrix::zeros(self.dim(), self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w > 0.0 {
                if c.dof <= 2.0 {
                    return Err(Error::ParameterDomain("a mixture component has no covariance (dof ≤ 2)".into()));
                }
                let d = &c.loc - &m;
                acc += (&c.scale * (c.dof / (c.dof - 2.0)) + &d * d.transpose()) * *w;
            }
        }
        Ok(acc)
    }

    /// Univariate mixture of the `i`-th coordinate.
    pub fn marginal(&self, i: usize) -> Mixture<UnivariateT> {
        Mixture { weights: self.weights.clone(), components: self.components.iter().map(|c| c.marginal(i)).collect() }
    }
}

/// Pooled validation predictions across folds.
#[derive(Debug, Clone)]
pub struct CvRecord {
    /// Data row of each validation point.
    pub rows: Vec<usize>,
    pub fold: Vec<usize>,
    pub y: Vec<f64>,
    /// `n_valid × G` predictive means.
    pub means: DMatrix<f64>,
    /// `n_valid × G` predictive log densities at the realized `y`.
    pub log_densities: DMatrix<f64>,
}

/// Everything produced by one stacking run.
#[derive(Debug)]
pub struct StackOutput {
    pub mode: StackMode,
    pub specs: Vec<ModelSpec>,
    /// Candidates dropped after a numerical failure, with the reason.
    pub dropped: Vec<(String, String)>,
    pub means: StackingResult,
    pub distributions: StackingResult,
    pub bma: Vec<f64>,
    pub record: CvRecord,
    /// Candidates refitted on every observed row.
    pub fits: Vec<FittedModel>,
    pub targets: Vec<usize>,
    /// `predictions[g][k]` at `targets[k]`.
    pub predictions: Vec<Vec<PointPrediction>>,
}

impl StackOutput {
    pub fn labels(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.label()).collect()
    }

    /// Weights of the requested mode.
    pub fn weights(&self) -> &[f64] {
        match self.mode {
            StackMode::Means => &self.means.weights,
            StackMode::Distributions => &self.distributions.weights,
        }
    }

    fn mix(&self, weights: &[f64], k: usize, pick: impl Fn(&PointPrediction) -> UnivariateT) -> Mixture<UnivariateT> {
        Mixture { weights: weights.to_vec(), components: self.predictions.iter().map(|p| pick(&p[k])).collect() }
    }

    /// Stacked predictive law of `y` at `targets[k]`.
    pub fn stacked_y(&self, k: usize) -> Mixture<UnivariateT> {
        self.mix(self.weights(), k, |p| p.y)
    }

    pub fn stacked_z(&self, k: usize) -> Mixture<UnivariateT> {
        self.mix(self.weights(), k, |p| p.z)
    }

    pub fn bma_y(&self, k: usize) -> Mixture<UnivariateT> {
        self.mix(&self.bma, k, |p| p.y)
    }

    pub fn bma_z(&self, k: usize) -> Mixture<UnivariateT> {
        self.mix(&self.bma, k, |p| p.z)
    }

    /// Weighted average of the candidates' predictive means.
    pub fn point_predictions(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.targets.len()).map(|k| weights.iter().zip(&self.predictions).map(|(w, p)| w * p[k].y.loc).sum()).collect()
    }

    pub fn point_predictions_z(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.targets.len()).map(|k| weights.iter().zip(&self.predictions).map(|(w, p)| w * p[k].z.loc).sum()).collect()
    }

    /// Stacked posterior of `σ²`.
    pub fn sigma2(&self) -> Mixture<InverseGamma> {
        Mixture { weights: self.weights().to_vec(), components: self.fits.iter().map(|f| f.sigma2_law()).collect() }
    }

    /// Stacked posterior mean of the signal at the observed rows.
    pub fn fitted_signal(&self, data: &TrajectoryDataset) -> Vec<f64> {
        let mut acc = vec![0.0; data.observed().len()];
        for (w, f) in self.weights().iter().zip(&self.fits) {
            if *w > 0.0 {
                for (a, s) in acc.iter_mut().zip(f.fitted_signal(data)) {
                    *a += w * s;
                }
            }
        }
        acc
    }
}

type FoldOutcome = Result<Vec<PointPrediction>>;

/// Fits every candidate on every fold, solves both weight problems, refits
/// on all observed rows and predicts at the rows of `data` without a
/// response. Candidates failing anywhere are dropped.
pub fn run_stacking(
    data: &TrajectoryDataset,
    grid: &CandidateGrid,
    plan: &FoldPlan,
    mode: StackMode,
) -> Result<StackOutput> {
    if grid.is_empty() {
        return Err(Error::Configuration("candidate grid is empty".into()));
    }
    let observed = data.observed();
    let targets = data.targets();
    let folds = make_folds(&observed, plan)?;
    let train_sets: Vec<TrajectoryDataset> = folds
        .iter()
        .map(|f| {
            let hide: Vec<usize> = observed.iter().copied().filter(|r| f.train.binary_search(r).is_err()).collect();
            data.mask(&hide)
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds.len()).map(move |f| (g, f))).collect();
    let outcomes: Vec<FoldOutcome> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let fit = grid.candidates[g].fit(&train_sets[f])?;
            fit.predict_rows(&train_sets[f], &folds[f].valid)
        })
        .collect();
    let finals: Vec<Result<(FittedModel, Vec<PointPrediction>)>> = grid
        .candidates
        .par_iter()
        .map(|spec| {
            let fit = spec.fit(data)?;
            let preds = fit.predict_rows(data, &targets)?;
            Ok((fit, preds))
        })
        .collect();

    let mut dropped = Vec::new();
    let mut keep = Vec::new();
    let mut finals_kept = Vec::new();
    for (g, fin) in finals.into_iter().enumerate() {
        let first_err = (0..folds.len()).find_map(|f| outcomes[g * folds.len() + f].as_ref().err().map(|e| e.to_string()));
        let label = grid.candidates[g].label();
        match (first_err, fin) {
            (None, Ok(pair)) => {
                keep.push(g);
                finals_kept.push(pair);
            }
            (Some(e), _) => dropped.push((label, e)),
            (None, Err(e)) => dropped.push((label, e.to_string())),
        }
    }
    for (label, reason) in &dropped {
        log::warn!("dropping candidate {label}: {reason}");
    }
    if keep.is_empty() {
        return Err(Error::Configuration(format!(
            "every candidate failed; first failure: {}",
            dropped.first().map_or(String::new(), |d| format!("{}: {}", d.0, d.1))
        )));
    }

    let mut rows = Vec::new();
    let mut fold_of = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        rows.extend_from_slice(&fold.valid);
        fold_of.extend(std::iter::repeat_n(f, fold.valid.len()));
    }
    let y = data.observed_values(&rows)?;
    let nv = rows.len();
    let mut means = DMatrix::zeros(nv, keep.len());
    let mut logd = DMatrix::zeros(nv, keep.len());
    for (c, &g) in keep.iter().enumerate() {
        let mut r = 0;
        for f in 0..folds.len() {
            let preds = outcomes[g * folds.len() + f].as_ref().expect("kept candidates succeeded");
            for p in preds {
                means[(r, c)] = p.y.loc;
                logd[(r, c)] = p.y.ln_pdf(y[r]);
                r += 1;
            }
        }
    }
    let means_res = stack_means(&means, &y)?;
    let dist_res = stack_distributions(&logd)?;
    let (fits, predictions): (Vec<FittedModel>, Vec<Vec<PointPrediction>>) = finals_kept.into_iter().unzip();
    let log_ev: Vec<f64> = fits.iter().map(|f| f.log_evidence().unwrap_or(f64::NEG_INFINITY)).collect();
    let bma = if log_ev.iter().all(|v| v.is_finite()) {
        bma_weights(&log_ev, None)?
    } else {
        vec![1.0 / fits.len() as f64; fits.len()]
    };
    Ok(StackOutput {
        mode,
        specs: keep.iter().map(|&g| grid.candidates[g].clone()).collect(),
        dropped,
        means: means_res,
        distributions: dist_res,
        bma,
        record: CvRecord { rows, fold: fold_of, y, means, log_densities: logd },
        fits,
        targets,
        predictions,
    })
}
