//! Synthetic data generators for the trajectory models.
//!
//! Each component draws from its own ChaCha20 stream of the configured seed,
//! so changing a size does not reshuffle the draws of another component.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix, KernelSpec, SpaceTimePoint};
use crate::linalg::{JitterPolicy, SpdMatrix};

pub mod stream {
    pub const PATH: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const STATES: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SUBSAMPLE: u64 = 5;
    pub const LOCATIONS: u64 = 6;
}

/// Generator for stream `id` of `seed`.
pub fn stream_rng(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normals(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// `γ(1..=T)` with `γ(t) = γ(t-1) + N(0, I_2)` and `γ(0) = 0`.
pub fn random_walk_trajectory(t: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = stream_rng(seed, stream::PATH);
    let mut at = [0.0, 0.0];
    (0..t)
        .map(|_| {
            at[0] += normal(&mut rng);
            at[1] += normal(&mut rng);
            at
        })
        .collect()
}

fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!("{name} = {v} must be positive")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!("{name} = {v} must be non-negative")))
    }
}

/// Ground truth aligned with the rows of the simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    /// Noisy response at every row, including held-out rows.
    pub y: Vec<f64>,
    /// `xᵀβ + z`.
    pub signal: Vec<f64>,
    pub z: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Rows whose response is hidden in the dataset.
    pub holdout: Vec<usize>,
    /// Diagonal jitter added to a process covariance before sampling.
    pub jitter: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub data: TrajectoryDataset,
    pub truth: SimTruth,
}

/// Continuous-time trajectory process on a random-walk path. `n_holdout`
/// path points are hidden first, then `n_train` more are observed, so
/// training sets are nested in `n_train` for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousDgp {
    pub path_len: usize,
    pub n_train: usize,
    #[serde(default)]
    pub n_holdout: usize,
    pub p: usize,
    pub sigma: f64,
    pub delta_beta: f64,
    pub delta_z: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub xi: f64,
    pub covariate_sd: f64,
    pub seed: u64,
}

impl ContinuousDgp {
    /// 300-point path, 100 held-out points, unit scales.
    pub fn infill(n_train: usize, seed: u64) -> Self {
        ContinuousDgp {
            path_len: 300,
            n_train,
            n_holdout: 100,
            p: 2,
            sigma: 1.0,
            delta_beta: 1.0,
            delta_z: 1.0,
            phi1: 0.5,
            phi2: 0.5,
            xi: 0.5,
            covariate_sd: 2.0,
            seed,
        }
    }

    /// Every point of an `n`-point path observed.
    pub fn full(n: usize, seed: u64) -> Self {
        ContinuousDgp { path_len: n, n_train: n, n_holdout: 0, ..ContinuousDgp::infill(n, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Configuration("n_train must be positive".into()));
        }
        if self.n_train + self.n_holdout > self.path_len {
            return Err(Error::Configuration(format!(
                "{} training and {} held-out points exceed a path of {}",
                self.n_train, self.n_holdout, self.path_len
            )));
        }
        non_negative("sigma", self.sigma)?;
        non_negative("delta_beta", self.delta_beta)?;
        non_negative("delta_z", self.delta_z)?;
        positive("covariate_sd", self.covariate_sd)?;
        KernelSpec::Gneiting { phi1: self.phi1, phi2: self.phi2 }.validate()?;
        KernelSpec::SqExp { xi: self.xi }.validate()
    }
}

fn correlated_draw(k: DMatrix<f64>, rng: &mut impl Rng, context: &str) -> Result<(DVector<f64>, f64)> {
    let n = k.nrows();
    let spd = SpdMatrix::new(k, JitterPolicy::Ladder, context)?;
    let l = spd.chol().l();
    Ok((l * normals(rng, n), spd.jitter()))
}

pub fn simulate_continuous(cfg: &ContinuousDgp) -> Result<SimOutput> {
    cfg.validate()?;
    let m = cfg.path_len;
    let path = random_walk_trajectory(m, cfg.seed);
    let points: Vec<SpaceTimePoint> =
        path.iter().enumerate().map(|(i, &s)| SpaceTimePoint::new((i + 1) as f64, s)).collect();

    let mut states = stream_rng(cfg.seed, stream::STATES);
    let kz = kernel_matrix(&points, &KernelSpec::Gneiting { phi1: cfg.phi1, phi2: cfg.phi2 });
    let (zn, jz) = correlated_draw(kz, &mut states, "simulate_continuous z")?;
    let z = zn * (cfg.sigma * cfg.delta_z);
    let kb = kernel_matrix(&points, &KernelSpec::SqExp { xi: cfg.xi });
    let spd = SpdMatrix::new(kb, JitterPolicy::Ladder, "simulate_continuous beta")?;
    let lb = spd.chol().l();
    let beta: Vec<DVector<f64>> =
        (0..cfg.p).map(|_| &lb * normals(&mut states, m) * (cfg.sigma * cfg.delta_beta)).collect();

    let mut cov = stream_rng(cfg.seed, stream::COVARIATES);
    let x: Vec<Vec<f64>> = (0..m).map(|_| (0..cfg.p).map(|_| cfg.covariate_sd * normal(&mut cov)).collect()).collect();
    let mut noise = stream_rng(cfg.seed, stream::NOISE);
    let eps: Vec<f64> = (0..m).map(|_| cfg.sigma * normal(&mut noise)).collect();

    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut stream_rng(cfg.seed, stream::SUBSAMPLE));
    let hidden = &perm[..cfg.n_holdout];
    let mut chosen: Vec<usize> = perm[..cfg.n_holdout + cfg.n_train].to_vec();
    chosen.sort_unstable();

    let mut truth = SimTruth {
        y: Vec::new(),
        signal: Vec::new(),
        z: Vec::new(),
        beta: Vec::new(),
        sigma: cfg.sigma,
        holdout: Vec::new(),
        jitter: jz.max(spd.jitter()),
    };
    let mut responses = Vec::new();
    for (row, &i) in chosen.iter().enumerate() {
        let b: Vec<f64> = beta.iter().map(|bj| bj[i]).collect();
        let signal = x[i].iter().zip(&b).map(|(a, c)| a * c).sum::<f64>() + z[i];
        let y = signal + eps[i];
        truth.y.push(y);
        truth.signal.push(signal);
        truth.z.push(z[i]);
        truth.beta.push(b);
        if hidden.contains(&i) {
            truth.holdout.push(row);
            responses.push(None);
        } else {
            responses.push(Some(y));
        }
    }
    let data = TrajectoryDataset::new(
        chosen.iter().map(|&i| points[i].t).collect(),
        chosen.iter().map(|&i| path[i]).collect(),
        responses,
        covariate_names(cfg.p),
        chosen.iter().map(|&i| x[i].clone()).collect(),
    )?;
    Ok(SimOutput { data, truth })
}

/// Discrete-time trajectory process: one observation per epoch on a
/// random-walk path, with `β_t` and the spatial field over the visited
/// locations evolving as random walks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteDgp {
    pub epochs: usize,
    pub p: usize,
    pub sigma: f64,
    pub delta_beta: f64,
    pub delta_z: f64,
    pub phi: f64,
    pub nu: f64,
    /// Autoregressive coefficient of the spatial field.
    #[serde(default = "one")]
    pub alpha: f64,
    pub initial_sd: f64,
    pub covariate_sd: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl DiscreteDgp {
    pub fn standard(epochs: usize, seed: u64) -> Self {
        DiscreteDgp {
            epochs,
            p: 2,
            sigma: 1.0,
            delta_beta: 1.0,
            delta_z: 1.0,
            phi: 1.0 / 7.0,
            nu: 1.0,
            alpha: 1.0,
            initial_sd: 2.0,
            covariate_sd: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Configuration("epochs must be positive".into()));
        }
        non_negative("sigma", self.sigma)?;
        non_negative("delta_beta", self.delta_beta)?;
        non_negative("delta_z", self.delta_z)?;
        non_negative("initial_sd", self.initial_sd)?;
        positive("covariate_sd", self.covariate_sd)?;
        if !self.alpha.is_finite() {
            return Err(Error::ParameterDomain(format!("alpha = {} must be finite", self.alpha)));
        }
        KernelSpec::Matern { phi: self.phi, nu: self.nu }.validate()
    }
}

pub fn simulate_discrete(cfg: &DiscreteDgp) -> Result<SimOutput> {
    cfg.validate()?;
    let t_max = cfg.epochs;
    let path = random_walk_trajectory(t_max, cfg.seed);
    let index = crate::traj_discrete::dedup_locations(&path, crate::traj_discrete::DEDUP_EPS)?;
    let n = index.n();
    let sites: Vec<SpaceTimePoint> = index.distinct().iter().map(|&s| SpaceTimePoint::at(s)).collect();
    let k = kernel_matrix(&sites, &KernelSpec::Matern { phi: cfg.phi, nu: cfg.nu });
    let spd = SpdMatrix::new(k, JitterPolicy::Ladder, "simulate_discrete")?;
    let l = spd.chol().l();

    let mut states = stream_rng(cfg.seed, stream::STATES);
    let mut beta = normals(&mut states, cfg.p) * cfg.initial_sd;
    let mut z = normals(&mut states, n) * cfg.initial_sd;
    let mut cov = stream_rng(cfg.seed, stream::COVARIATES);
    let mut noise = stream_rng(cfg.seed, stream::NOISE);

    let mut truth = SimTruth {
        y: Vec::new(),
        signal: Vec::new(),
        z: Vec::new(),
        beta: Vec::new(),
        sigma: cfg.sigma,
        holdout: Vec::new(),
        jitter: spd.jitter(),
    };
    let mut xs = Vec::with_capacity(t_max);
    for t in 0..t_max {
        beta += normals(&mut states, cfg.p) * (cfg.sigma * cfg.delta_beta);
        z = z * cfg.alpha + &l * normals(&mut states, n) * (cfg.sigma * cfg.delta_z);
        let x: Vec<f64> = (0..cfg.p).map(|_| cfg.covariate_sd * normal(&mut cov)).collect();
        let zt = z[index.index(t)];
        let signal = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() + zt;
        truth.y.push(signal + cfg.sigma * normal(&mut noise));
        truth.signal.push(signal);
        truth.z.push(zt);
        truth.beta.push(beta.iter().copied().collect());
        xs.push(x);
    }
    let data = TrajectoryDataset::new(
        (1..=t_max).map(|t| t as f64).collect(),
        path,
        truth.y.iter().map(|&y| Some(y)).collect(),
        covariate_names(cfg.p),
        xs,
    )?;
    Ok(SimOutput { data, truth })
}

/// Spatial DLM panel: `n_train + n_new` uniform locations on the unit
/// square, identity evolution, observed over `epochs + 1` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DlmDgp {
    pub epochs: usize,
    pub n_train: usize,
    pub n_new: usize,
    pub p: usize,
    pub sigma: f64,
    pub delta_beta: f64,
    pub delta_z: f64,
    pub phi: f64,
    pub nu: f64,
    pub initial_sd: f64,
    pub covariate_sd: f64,
    pub seed: u64,
}

impl DlmDgp {
    pub fn standard(n_train: usize, seed: u64) -> Self {
        DlmDgp {
            epochs: 20,
            n_train,
            n_new: 100,
            p: 2,
            sigma: 1.0,
            delta_beta: 1.0,
            delta_z: 1.0,
            phi: 1.0 / 7.0,
            nu: 1.0,
            initial_sd: 2.0,
            covariate_sd: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.n_train == 0 {
            return Err(Error::Configuration("epochs and n_train must be positive".into()));
        }
        non_negative("sigma", self.sigma)?;
        non_negative("delta_beta", self.delta_beta)?;
        non_negative("delta_z", self.delta_z)?;
        non_negative("initial_sd", self.initial_sd)?;
        positive("covariate_sd", self.covariate_sd)?;
        KernelSpec::Matern { phi: self.phi, nu: self.nu }.validate()
    }
}

/// Per-epoch panel; entry `t` of each series is epoch `t + 1`. The first
/// `n_train` locations are the training sites.
#[derive(Debug, Clone, PartialEq)]
pub struct DlmPanel {
    pub locations: Vec<[f64; 2]>,
    pub n_train: usize,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub beta: Vec<DVector<f64>>,
    pub jitter: f64,
}

impl DlmPanel {
    pub fn epochs(&self) -> usize {
        self.y.len()
    }

    /// Training rows of epoch `t` (0-based).
    pub fn train_x(&self, t: usize) -> DMatrix<f64> {
        self.x[t].rows(0, self.n_train).into_owned()
    }

    pub fn train_y(&self, t: usize) -> DVector<f64> {
        self.y[t].rows(0, self.n_train).into_owned()
    }
}

pub fn simulate_dlm(cfg: &DlmDgp) -> Result<DlmPanel> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_new;
    let mut loc_rng = stream_rng(cfg.seed, stream::LOCATIONS);
    let locations: Vec<[f64; 2]> = (0..total).map(|_| [loc_rng.random::<f64>(), loc_rng.random::<f64>()]).collect();
    let sites: Vec<SpaceTimePoint> = locations.iter().map(|&s| SpaceTimePoint::at(s)).collect();
    let k = kernel_matrix(&sites, &KernelSpec::Matern { phi: cfg.phi, nu: cfg.nu });
    let spd = SpdMatrix::new(k, JitterPolicy::Ladder, "simulate_dlm")?;
    let l = spd.chol().l();

    let mut states = stream_rng(cfg.seed, stream::STATES);
    let mut beta = normals(&mut states, cfg.p) * cfg.initial_sd;
    let mut z = normals(&mut states, total) * cfg.initial_sd;
    let mut cov = stream_rng(cfg.seed, stream::COVARIATES);
    let mut noise = stream_rng(cfg.seed, stream::NOISE);
    let mut panel =
        DlmPanel { locations, n_train: cfg.n_train, x: vec![], y: vec![], z: vec![], beta: vec![], jitter: spd.jitter() };
    for _ in 0..=cfg.epochs {
        beta += normals(&mut states, cfg.p) * (cfg.sigma * cfg.delta_beta);
        z += &l * normals(&mut states, total) * (cfg.sigma * cfg.delta_z);
        let x = DMatrix::from_fn(total, cfg.p, |_, _| cfg.covariate_sd * normal(&mut cov));
        let y = &x * &beta + &z + normals(&mut noise, total) * cfg.sigma;
        panel.x.push(x);
        panel.y.push(y);
        panel.z.push(z.clone());
        panel.beta.push(beta.clone());
    }
    Ok(panel)
}

/// Any of the generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SimConfig {
    ContinuousDgp(ContinuousDgp),
    DiscreteDgp(DiscreteDgp),
    DlmDgp(DlmDgp),
}

impl SimConfig {
    pub fn seed(&self) -> u64 {
        match self {
            SimConfig::ContinuousDgp(c) => c.seed,
            SimConfig::DiscreteDgp(c) => c.seed,
            SimConfig::DlmDgp(c) => c.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            SimConfig::ContinuousDgp(c) => c.seed = seed,
            SimConfig::DiscreteDgp(c) => c.seed = seed,
            SimConfig::DlmDgp(c) => c.seed = seed,
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gneiting_st_corr;
    use approx::assert_relative_eq;

    #[test]
    fn random_walk_is_reproducible_with_unit_increments() {
        assert_eq!(random_walk_trajectory(50, 3), random_walk_trajectory(50, 3));
        assert_ne!(random_walk_trajectory(50, 3), random_walk_trajectory(50, 4));
        let one = random_walk_trajectory(1, 9);
        let mut rng = stream_rng(9, stream::PATH);
        assert_eq!(one, vec![[normal(&mut rng), normal(&mut rng)]]);
        let path = random_walk_trajectory(10_000, 11);
        for c in 0..2 {
            let inc: Vec<f64> = (1..path.len()).map(|i| path[i][c] - path[i - 1][c]).collect();
            let m = inc.iter().sum::<f64>() / inc.len() as f64;
            let v = inc.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (inc.len() - 1) as f64;
            assert!((v - 1.0).abs() < 0.05, "{v}");
        }
    }

    #[test]
    fn continuous_sizes_and_nesting() {
        let small = simulate_continuous(&ContinuousDgp::infill(20, 5)).unwrap();
        let large = simulate_continuous(&ContinuousDgp::infill(200, 5)).unwrap();
        assert_eq!(small.data.len(), 120);
        assert_eq!(small.data.observed().len(), 20);
        assert_eq!(small.truth.holdout.len(), 100);
        assert_eq!(large.data.targets().len(), 100);
        let held = |o: &SimOutput| -> Vec<f64> { o.truth.holdout.iter().map(|&r| o.data.time(r)).collect() };
        assert_eq!(held(&small), held(&large));
        let train_small: Vec<f64> = small.data.observed().iter().map(|&r| small.data.time(r)).collect();
        let train_large: Vec<f64> = large.data.observed().iter().map(|&r| large.data.time(r)).collect();
        assert!(train_small.iter().all(|t| train_large.contains(t)));
        for (r, &t) in large.data.times().iter().enumerate() {
            if let Some(i) = small.data.times().iter().position(|&u| u == t) {
                assert_eq!(small.truth.y[i], large.truth.y[r]);
            }
        }
    }

    #[test]
    fn zero_noise_gives_signal() {
        let mut cfg = ContinuousDgp::full(30, 1);
        cfg.sigma = 0.0;
        let out = simulate_continuous(&cfg).unwrap();
        for (r, s) in out.truth.signal.iter().enumerate() {
            assert_eq!(out.data.response(r), Some(*s));
        }
        let mut d = DiscreteDgp::standard(20, 1);
        d.sigma = 0.0;
        let out = simulate_discrete(&d).unwrap();
        assert_eq!(out.truth.y, out.truth.signal);
    }

    #[test]
    fn continuous_z_covariance_matches_kernel() {
        let reps = 500;
        let mut pairs = Vec::with_capacity(reps);
        for seed in 0..reps as u64 {
            let out = simulate_continuous(&ContinuousDgp::full(12, 1000 + seed)).unwrap();
            pairs.push((out.truth.z[3], out.truth.z[4], out.data.point(3), out.data.point(4)));
        }
        // Paths differ across seeds, so compare the standardized products.
        let resid: Vec<f64> = pairs
            .iter()
            .map(|(a, b, p, q)| a * b - gneiting_st_corr(p, q, 0.5, 0.5).unwrap())
            .collect();
        let m = resid.iter().sum::<f64>() / reps as f64;
        let sd = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(m.abs() < 3.0 * sd / (reps as f64).sqrt(), "{m} vs {sd}");
    }

    #[test]
    fn discrete_without_innovation_keeps_initial_field() {
        let mut cfg = DiscreteDgp::standard(40, 8);
        cfg.delta_z = 0.0;
        let a = simulate_discrete(&cfg).unwrap();
        let mut states = stream_rng(8, stream::STATES);
        let _beta0 = normals(&mut states, 2);
        let z0 = normals(&mut states, 40) * 2.0;
        for t in 0..40 {
            assert_relative_eq!(a.truth.z[t], z0[t], epsilon = 1e-12);
        }
        cfg.alpha = 0.5;
        let b = simulate_discrete(&cfg).unwrap();
        assert_relative_eq!(b.truth.z[3], z0[3] * 0.5f64.powi(4), epsilon = 1e-12);
        let again = simulate_discrete(&DiscreteDgp::standard(50, 8)).unwrap();
        assert_eq!(again.data.len(), 50);
        assert_eq!(again.truth, simulate_discrete(&DiscreteDgp::standard(50, 8)).unwrap().truth);
    }

    #[test]
    fn dlm_panel_shape() {
        let panel = simulate_dlm(&DlmDgp::standard(50, 2)).unwrap();
        assert_eq!(panel.epochs(), 21);
        assert_eq!(panel.locations.len(), 150);
        assert!(panel.locations.iter().all(|s| (0.0..=1.0).contains(&s[0]) && (0.0..=1.0).contains(&s[1])));
        assert_eq!(panel.train_x(0).shape(), (50, 2));
        assert_eq!(panel.beta[0].len(), 2);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SimConfig::ContinuousDgp(ContinuousDgp::infill(60, 3));
        let text = toml::to_string(&cfg).unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.with_seed(9).seed(), 9);
    }
}
