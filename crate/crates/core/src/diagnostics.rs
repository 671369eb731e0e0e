//! Asymptotic checks for the trend-free spatial DLM
//! `y_t = z_t + η_t`, `z_t = α z_{t-1} + GP(0, σ²δ_z²K_φ)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes_core::UnivariateLaw;
use crate::dlm::SpatialDlm;
use crate::error::{Error, Result};
use crate::kernels::{cross_kernel, kernel_matrix, KernelSpec, SpaceTimePoint};
use crate::linalg::{JitterPolicy, SpdMatrix};
use crate::simgen::{stream, stream_rng};

fn sites(locations: &[[f64; 2]]) -> Vec<SpaceTimePoint> {
    locations.iter().map(|&s| SpaceTimePoint::at(s)).collect()
}

fn matern(phi: f64, nu: f64) -> Result<KernelSpec> {
    let k = KernelSpec::Matern { phi, nu };
    k.validate()?;
    Ok(k)
}

/// Inputs of the variance term `E^A_{n,t}` at one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTermInput {
    pub locations: Vec<[f64; 2]>,
    pub target: [f64; 2],
    pub alpha: f64,
    pub delta_z_prime: f64,
    pub phi_prime: f64,
    /// Decay of the kernel in `h_φ` and `g`.
    pub phi: f64,
    pub nu: f64,
    pub sigma_star: f64,
    pub epoch: usize,
}

/// Shares the factorizations of `K_φ(χ)` and `K_φ'(χ)` across targets and
/// epochs.
#[derive(Debug, Clone)]
pub struct VarianceTerm {
    kernel: KernelSpec,
    locations: Vec<[f64; 2]>,
    k: SpdMatrix,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    alpha: f64,
    delta_z_prime: f64,
}

impl VarianceTerm {
    pub fn new(locations: &[[f64; 2]], phi: f64, phi_prime: f64, nu: f64, delta_z_prime: f64, alpha: f64) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::EmptyData("variance term needs at least one location".into()));
        }
        if !(delta_z_prime > 0.0 && delta_z_prime.is_finite()) || !alpha.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "delta_z' = {delta_z_prime} must be positive and alpha = {alpha} finite"
            )));
        }
        let kernel = matern(phi, nu)?;
        let pts = sites(locations);
        let k = SpdMatrix::new(kernel_matrix(&pts, &kernel), JitterPolicy::Disabled, "variance term K_phi")?;
        let kp = if phi_prime == phi { k.matrix().clone() } else { kernel_matrix(&pts, &matern(phi_prime, nu)?) };
        let eig = kp.symmetric_eigen();
        Ok(VarianceTerm { kernel, locations: locations.to_vec(), k, eig, alpha, delta_z_prime })
    }

    /// Eigenvalues of `R_{t,n}` in the eigenbasis of `K_φ'`, from
    /// `W_0 = K_φ'`, `R = α²W + δ'²K_φ'`, `W = R(R + I)⁻¹`.
    pub fn r_spectrum(&self, epoch: usize) -> Vec<f64> {
        let (a2, d2) = (self.alpha * self.alpha, self.delta_z_prime * self.delta_z_prime);
        self.eig
            .eigenvalues
            .iter()
            .map(|&lam| {
                let lam = lam.max(0.0);
                let mut w = lam;
                let mut r = 0.0;
                for _ in 0..epoch {
                    r = a2 * w + d2 * lam;
                    w = r / (r + 1.0);
                }
                r
            })
            .collect()
    }

    /// `(h_φ, g)` at `target` and `epoch ≥ 1`.
    pub fn components(&self, target: [f64; 2], epoch: usize) -> Result<(f64, f64)> {
        if epoch == 0 {
            return Err(Error::InvalidInput("epoch must be at least 1".into()));
        }
        let k0 = cross_kernel(&sites(&self.locations), &[SpaceTimePoint::at(target)], &self.kernel).column(0).into_owned();
        let v = self.k.solve_vec(&k0);
        let h = (1.0 - k0.dot(&v)).max(0.0);
        let a = self.eig.eigenvectors.transpose() * &v;
        let g = a.iter().zip(self.r_spectrum(epoch)).map(|(ai, r)| (ai * r / (r + 1.0)).powi(2)).sum();
        Ok((h, g))
    }

    pub fn value(&self, target: [f64; 2], epoch: usize, sigma_star: f64) -> Result<f64> {
        let (h, g) = self.components(target, epoch)?;
        Ok(sigma_star * sigma_star * (self.delta_z_prime * self.delta_z_prime * h + g))
    }
}

/// `E^A_{n,t} = σ*²(δ_z'² h_φ + g)`.
pub fn variance_term_ea(input: &VarianceTermInput) -> Result<f64> {
    VarianceTerm::new(&input.locations, input.phi, input.phi_prime, input.nu, input.delta_z_prime, input.alpha)?
        .value(input.target, input.epoch, input.sigma_star)
}

/// `δ'` with `δ'²φ'^{-2ν} = δ²φ^{-2ν}`, the Matérn pairing under which the
/// two spatial laws are equivalent.
pub fn equivalent_delta(delta: f64, phi: f64, phi_prime: f64, nu: f64) -> f64 {
    delta * (phi_prime / phi).powf(nu)
}

/// Least-squares `(intercept, slope)` of `values` on `1/n`.
pub fn inverse_n_fit(ns: &[usize], values: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != values.len() || ns.len() < 2 {
        return Err(Error::InvalidInput("need at least two (n, value) pairs".into()));
    }
    let x: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
    let m = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / m, values.iter().sum::<f64>() / m);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("all n are equal".into()));
    }
    let slope = x.iter().zip(values).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    Ok((my - slope * mx, slope))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Data-generating values and working model of a concentration study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationSetup {
    pub sigma_star: f64,
    pub phi_star: f64,
    pub delta_z_star: f64,
    pub nu: f64,
    pub alpha: f64,
    pub phi_prime: f64,
    /// Defaults to the equivalent pairing with `phi_prime`.
    #[serde(default)]
    pub delta_z_prime: Option<f64>,
    pub epochs: usize,
    pub n_sigma: f64,
    pub s_sigma: f64,
}

impl Default for ConcentrationSetup {
    fn default() -> Self {
        ConcentrationSetup {
            sigma_star: 1.0,
            phi_star: 0.2,
            delta_z_star: 1.0,
            nu: 0.5,
            alpha: 0.5,
            phi_prime: 0.2,
            delta_z_prime: None,
            epochs: 3,
            n_sigma: 2.0,
            s_sigma: 1.0,
        }
    }
}

impl ConcentrationSetup {
    pub fn working_delta(&self) -> f64 {
        self.delta_z_prime
            .unwrap_or_else(|| equivalent_delta(self.delta_z_star, self.phi_star, self.phi_prime, self.nu))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub n: usize,
    pub replicates: usize,
    pub median_mean: f64,
    pub median_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
    /// Whether the median 95% width strictly shrinks with `n`; `None` with
    /// fewer than two sizes.
    pub shrinking: Option<bool>,
}

/// Posterior mean and 95% width of `σ²` after filtering one simulated panel.
pub fn concentration_replicate(setup: &ConcentrationSetup, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n == 0 || setup.epochs == 0 {
        return Err(Error::Configuration("n and epochs must be positive".into()));
    }
    let mut loc = stream_rng(seed, stream::LOCATIONS);
    let locations: Vec<[f64; 2]> = (0..n).map(|_| [loc.random::<f64>(), loc.random::<f64>()]).collect();
    let pts = sites(&locations);
    let truth = SpdMatrix::new(
        kernel_matrix(&pts, &matern(setup.phi_star, setup.nu)?),
        JitterPolicy::Ladder,
        "concentration truth",
    )?;
    let l = truth.chol().l();
    let mut states = stream_rng(seed, stream::STATES);
    let mut noise = stream_rng(seed, stream::NOISE);
    let draw = |rng: &mut rand_chacha::ChaCha20Rng| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let s = setup.sigma_star;
    let mut z = &l * draw(&mut states) * s;

    let model = SpatialDlm::new(
        0,
        locations,
        KernelSpec::Matern { phi: setup.phi_prime, nu: setup.nu },
        1.0,
        setup.working_delta(),
        setup.alpha,
    )?;
    let mut state = model.prior(setup.n_sigma, setup.s_sigma, 1.0)?;
    let x = DMatrix::zeros(n, 0);
    for _ in 0..setup.epochs {
        z = z * setup.alpha + &l * draw(&mut states) * (s * setup.delta_z_star);
        let y = &z + draw(&mut noise) * s;
        state = model.step(&state, &y, &x)?;
    }
    let law = state.sigma2_law();
    let mean = law.mean().ok_or_else(|| Error::ParameterDomain("posterior of sigma^2 has no mean".into()))?;
    Ok((mean, law.quantile(0.975) - law.quantile(0.025)))
}

/// Median posterior mean and interval width of `σ²` per `n` over
/// `replicates` simulated panels.
pub fn sigma_concentration_check(
    setup: &ConcentrationSetup,
    n_list: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if n_list.is_empty() || replicates == 0 {
        return Err(Error::Configuration("need at least one size and one replicate".into()));
    }
    let jobs: Vec<(usize, usize)> = n_list.iter().flat_map(|&n| (0..replicates).map(move |r| (n, r))).collect();
    let out: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(n, r)| concentration_replicate(setup, n, seed.wrapping_add(r as u64)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n_list.len());
    for (i, &n) in n_list.iter().enumerate() {
        let mut means = Vec::with_capacity(replicates);
        let mut widths = Vec::with_capacity(replicates);
        for &(m, w) in &out[i * replicates..(i + 1) * replicates] {
            means.push(m);
            widths.push(w);
        }
        rows.push(ConcentrationRow { n, replicates, median_mean: median(&mut means), median_width: median(&mut widths) });
    }
    let mut sizes: Vec<usize> = n_list.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let shrinking = (sizes.len() >= 2).then(|| {
        let mut sorted = rows.clone();
        sorted.sort_by_key(|r| r.n);
        sorted.windows(2).all(|w| w[1].median_width < w[0].median_width)
    });
    Ok(ConcentrationReport { rows, shrinking })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub n: usize,
    pub epoch: usize,
    pub phi: f64,
    pub nu: f64,
    pub median: f64,
}

/// Median `E^A` over `draws` uniform designs on the unit square with a
/// matched working model (`φ' = φ`, unit scales). Designs are nested in `n`
/// for a fixed draw, and the target is drawn first.
pub fn variance_decay(n_list: &[usize], epochs: &[usize], phi: f64, nu: f64, draws: usize, seed: u64) -> Result<Vec<DecayRow>> {
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    let jobs: Vec<(usize, u64)> = n_list.iter().flat_map(|&n| (0..draws as u64).map(move |d| (n, d))).collect();
    let values: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(n, d)| {
            let mut rng = stream_rng(seed.wrapping_add(d), stream::LOCATIONS);
            let target = [rng.random::<f64>(), rng.random::<f64>()];
            let all: Vec<[f64; 2]> = (0..n_max).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
            let term = VarianceTerm::new(&all[..n], phi, phi, nu, 1.0, 1.0)?;
            epochs.iter().map(|&t| term.value(target, t, 1.0)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, &n) in n_list.iter().enumerate() {
        for (e, &t) in epochs.iter().enumerate() {
            let mut v: Vec<f64> = values[i * draws..(i + 1) * draws].iter().map(|r| r[e]).collect();
            rows.push(DecayRow { n, epoch: t, phi, nu, median: median(&mut v) });
        }
    }
    Ok(rows)
}
