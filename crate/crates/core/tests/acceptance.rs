//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=5,6` restricts the run to the listed criteria. Failures are reported but only
//! change the exit code when `ACCEPTANCE_STRICT=1`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use trajstack::bayes_core::{
    bivariate_t_mass, nig_posterior, AugmentedSystem, Design, IgPrior, RowKind, ScaleBlock, StudentT, UnivariateLaw,
};
use trajstack::diagnostics::{sigma_concentration_check, variance_decay, ConcentrationSetup};
use trajstack::dlm::{filter_step, DlmState};
use trajstack::kernels::{kernel_matrix, KernelSpec, SpaceTimePoint};
use trajstack::linalg::{JitterPolicy, SpdMatrix};
use trajstack::metrics::{mse_z, mspe};
use trajstack::simgen::{simulate_continuous, simulate_discrete, ContinuousDgp, DiscreteDgp};
use trajstack::stacking::{
    run_stacking, stack_distributions, stack_means, CandidateGrid, ContinuousAxes, DiscreteAxes, FoldPlan, FoldScheme,
    StackMode,
};
use trajstack::traj_discrete::DiscreteTrajSpec;
use trajstack::data::TrajectoryDataset;

type Outcome = (bool, String);

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_spd(rng: &mut ChaCha20Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    &a * a.transpose() * 0.5 + DMatrix::identity(d, d) * floor
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// At most one step up, and that one by at most 5%.
fn non_increasing_with_slack(v: &[f64]) -> bool {
    let ups: Vec<f64> = v.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[1] - w[0]) / w[0].abs()).collect();
    ups.len() <= 1 && ups.iter().all(|&r| r <= 0.05)
}

/// Smallest `k` with `P(Binomial(m, p) > k) < alpha`.
fn binomial_bound(m: usize, p: f64, alpha: f64) -> usize {
    let mut cdf = 0.0;
    let mut pmf = (1.0 - p).powi(m as i32);
    for k in 0..=m {
        cdf += pmf;
        if 1.0 - cdf < alpha {
            return k;
        }
        pmf *= (m - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    m
}

/// Multivariate t proposal with 4 degrees of freedom.
struct TProposal {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
}

impl TProposal {
    const DOF: f64 = 4.0;

    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let chol = cov.clone().cholesky().unwrap();
        Self { mean, inv: chol.inverse(), chol: chol.l() }
    }

    fn from_weighted(draws: &[DVector<f64>], w: &[f64]) -> Self {
        let total: f64 = w.iter().sum();
        let dim = draws[0].len();
        let mean = draws.iter().zip(w).fold(DVector::zeros(dim), |acc, (x, wi)| acc + x * (*wi / total));
        let mut cov = draws.iter().zip(w).fold(DMatrix::zeros(dim, dim), |acc, (x, wi)| {
            let dx = x - &mean;
            acc + &dx * dx.transpose() * (*wi / total)
        });
        cov *= 2.0;
        for i in 0..dim {
            cov[(i, i)] += 1e-6;
        }
        Self::new(mean, cov)
    }

    /// Draws with normalized-to-max importance weights.
    fn weighted_draws(
        &self,
        rng: &mut ChaCha20Rng,
        count: usize,
        log_target: &dyn Fn(&DVector<f64>, f64) -> f64,
    ) -> (Vec<DVector<f64>>, Vec<f64>) {
        let dim = self.mean.len();
        let chi = Gamma::new(0.5 * Self::DOF, 2.0).unwrap();
        let mut draws = Vec::with_capacity(count);
        let mut logw = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(dim, |_, _| normal(rng));
            let g: f64 = chi.sample(rng);
            let dx = &self.chol * z * (Self::DOF / g).sqrt();
            let q = -0.5 * (Self::DOF + dim as f64) * (1.0 + dx.dot(&(&self.inv * &dx)) / Self::DOF).ln();
            let xv = &self.mean + dx;
            let th = xv.rows(0, dim - 1).into_owned();
            logw.push(log_target(&th, xv[dim - 1]) - q);
            draws.push(xv);
        }
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (draws, logw.iter().map(|l| (l - top).exp()).collect())
    }
}

fn c1_conjugate() -> Outcome {
    const SYSTEMS: usize = 50;
    const BATCHES: usize = 100;
    const PER_BATCH: usize = 4000;
    let mut z_scores = Vec::new();
    for k in 0..SYSTEMS {
        let mut rng = ChaCha20Rng::seed_from_u64(1000 + k as u64);
        let d = rng.random_range(1..=3);
        let n = rng.random_range(1..=5);
        let x = DMatrix::from_fn(n, d, |_, _| normal(&mut rng));
        let v = random_spd(&mut rng, n, 0.5);
        let p = random_spd(&mut rng, d, 0.5);
        let mu0 = DVector::from_fn(d, |_, _| normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| 1.5 * normal(&mut rng));
        let a = rng.random_range(4.5..6.0);
        let b = rng.random_range(1.0..3.0);

        let mut sys = AugmentedSystem::new(d);
        let vs = SpdMatrix::new(v.clone(), JitterPolicy::Disabled, "V").unwrap();
        let ps = SpdMatrix::new(p.clone(), JitterPolicy::Disabled, "P").unwrap();
        sys.push("data", RowKind::Data, y.clone(), Design::Dense(x.clone()), ScaleBlock::Dense(vs)).unwrap();
        sys.push("prior", RowKind::Prior, mu0.clone(), Design::Select { offset: 0, len: d }, ScaleBlock::Dense(ps))
            .unwrap();
        let post = nig_posterior(&sys, IgPrior::new(a, b).unwrap()).unwrap();
        let (astar, bstar) = (post.a_star(), post.b_star());
        let mut exact: Vec<f64> = (0..d).map(|j| post.mean()[j]).collect();
        exact.extend((0..d).map(|j| bstar / (astar - 1.0) * post.sigma()[(j, j)]));
        exact.push(bstar / (astar - 1.0));
        exact.push(bstar * bstar / ((astar - 1.0).powi(2) * (astar - 2.0)));

        // Importance sampling in (theta, log sigma2) with an adaptive t proposal.
        let vinv = v.clone().try_inverse().unwrap();
        let pinv = p.clone().try_inverse().unwrap();
        let log_target = |th: &DVector<f64>, u: f64| -> f64 {
            let r = &y - &x * th;
            let dm = th - &mu0;
            -(a + 0.5 * (d + n) as f64) * u - (b + 0.5 * r.dot(&(&vinv * &r)) + 0.5 * dm.dot(&(&pinv * &dm))) * (-u).exp()
        };
        let dim = d + 1;
        let mut prop = TProposal::new(
            DVector::from_fn(dim, |i, _| if i < d { mu0[i] } else { (b / a).ln() }),
            DMatrix::from_fn(dim, dim, |i, j| if i < d && j < d { 4.0 * p[(i, j)] } else if i == j { 4.0 } else { 0.0 }),
        );
        for _ in 0..3 {
            let (draws, w) = prop.weighted_draws(&mut rng, 50_000, &log_target);
            prop = TProposal::from_weighted(&draws, &w);
        }
        let mut batches: Vec<Vec<f64>> = Vec::with_capacity(BATCHES);
        for _ in 0..BATCHES {
            let (draws, w) = prop.weighted_draws(&mut rng, PER_BATCH, &log_target);
            let total: f64 = w.iter().sum();
            let avg = |f: &dyn Fn(&DVector<f64>) -> f64| -> f64 {
                draws.iter().zip(&w).map(|(t, wi)| wi * f(t)).sum::<f64>() / total
            };
            let mut est: Vec<f64> = (0..d).map(|j| avg(&|t| t[j])).collect();
            for j in 0..d {
                let m = est[j];
                est.push(avg(&|t| (t[j] - m).powi(2)));
            }
            let m2 = avg(&|t| t[d].exp());
            est.push(m2);
            est.push(avg(&|t| (t[d].exp() - m2).powi(2)));
            batches.push(est);
        }
        for (q, &ex) in exact.iter().enumerate() {
            let vals: Vec<f64> = batches.iter().map(|bt| bt[q]).collect();
            let m = vals.iter().sum::<f64>() / BATCHES as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (BATCHES - 1) as f64).sqrt();
            let zz = (m - ex) / (sd / (BATCHES as f64).sqrt());
            z_scores.push(zz);
        }
    }
    let m = z_scores.len();
    let over3 = z_scores.iter().filter(|z| z.abs() > 3.0).count();
    let max = z_scores.iter().fold(0.0f64, |acc, z| acc.max(z.abs()));
    let allowed = binomial_bound(m, 0.0027, 1e-3);
    (
        over3 <= allowed && max <= 5.0,
        format!("{m} moments over {SYSTEMS} systems; |z|>3 in {over3} (chance allows {allowed}); max |z| {max:.2}"),
    )
}

fn c2_filter_batch() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let mut rng = ChaCha20Rng::seed_from_u64(2000 + k);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let f = DMatrix::from_fn(n, d, |_, _| normal(&mut rng));
        let g = DMatrix::from_fn(d, d, |i, j| if i == j { 0.9 } else { 0.2 * normal(&mut rng) });
        let s = random_spd(&mut rng, d, 0.1) * 0.4;
        let s0 = random_spd(&mut rng, d, 1.0);
        let m0 = DVector::from_fn(d, |_, _| normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| normal(&mut rng));
        let (n_sigma, s_sigma) = (rng.random_range(1.0..5.0), rng.random_range(0.2..2.0));

        let st = DlmState::prior(n_sigma, s_sigma, m0.clone(), s0.clone()).unwrap();
        let next = filter_step(&st, &y, &f, &g, &s).unwrap();

        let r1 = SpdMatrix::new(&g * &s0 * g.transpose() + &s, JitterPolicy::Disabled, "R").unwrap();
        let sys = AugmentedSystem::new(d)
            .with_block("data", RowKind::Data, y, Design::Dense(f), ScaleBlock::Identity(n))
            .unwrap()
            .with_block("prior", RowKind::Prior, &g * &m0, Design::Dense(DMatrix::identity(d, d)), ScaleBlock::Dense(r1))
            .unwrap();
        let post = nig_posterior(&sys, IgPrior::new(0.5 * n_sigma, 0.5 * n_sigma * s_sigma).unwrap()).unwrap();
        let rel = |a: f64, b: f64, scale: f64| (a - b).abs() / scale.max(f64::MIN_POSITIVE);
        let mscale = post.mean().amax();
        let wscale = post.sigma().amax();
        for i in 0..d {
            worst = worst.max(rel(next.m[i], post.mean()[i], mscale));
            for j in 0..d {
                worst = worst.max(rel(next.w[(i, j)], post.sigma()[(i, j)], wscale));
            }
        }
        worst = worst.max(rel(0.5 * next.n, post.a_star(), post.a_star()));
        worst = worst.max(rel(0.5 * next.n * next.s, post.b_star(), post.b_star()));
    }
    (worst <= 1e-10, format!("10 random systems; worst relative gap {worst:.2e} (limit 1e-10)"))
}

fn c3_kernel_validity() -> Outcome {
    let mut worst = f64::INFINITY;
    for k in 0..20 {
        let mut rng = ChaCha20Rng::seed_from_u64(3000 + k);
        let phi1 = rng.random_range(0.1..5.0);
        let phi2 = rng.random_range(0.1..5.0);
        let mut t = 0.0;
        let mut pts: Vec<SpaceTimePoint> = Vec::with_capacity(50);
        let mut s = [0.0, 0.0];
        for i in 0..50 {
            t += rng.random_range(0.01..0.5);
            if i > 5 && rng.random::<f64>() < 0.2 {
                s = pts[rng.random_range(0..pts.len())].s;
            } else {
                s = [s[0] + 0.3 * normal(&mut rng), s[1] + 0.3 * normal(&mut rng)];
            }
            pts.push(SpaceTimePoint::new(t, s));
        }
        let kmat = kernel_matrix(&pts, &KernelSpec::Gneiting { phi1, phi2 });
        let min = SymmetricEigen::new(kmat).eigenvalues.min();
        worst = worst.min(min);
    }
    (worst >= -1e-8, format!("20 revisiting 50-point configurations; smallest eigenvalue {worst:.3e} (floor -1e-8)"))
}

fn simplex_grid(g: usize, step: usize) -> Vec<Vec<f64>> {
    let h = 1.0 / step as f64;
    match g {
        2 => (0..=step).map(|i| vec![i as f64 * h, (step - i) as f64 * h]).collect(),
        _ => (0..=step)
            .flat_map(|i| (0..=step - i).map(move |j| vec![i as f64 * h, j as f64 * h, (step - i - j) as f64 * h]))
            .collect(),
    }
}

fn c4_stacking_optimality() -> Outcome {
    let mut worst_means: f64 = f64::NEG_INFINITY;
    let mut worst_dists: f64 = f64::NEG_INFINITY;
    let mut worst_kkt: f64 = 0.0;
    for k in 0..20 {
        let mut rng = ChaCha20Rng::seed_from_u64(4000 + k);
        let g = if k % 2 == 0 { 2 } else { 3 };
        let n = 30;
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let bias: Vec<f64> = (0..g).map(|_| 0.5 * normal(&mut rng)).collect();
        let p = DMatrix::from_fn(n, g, |i, j| y[i] + bias[j] + 0.7 * normal(&mut rng));
        let scales: Vec<f64> = (0..g).map(|_| rng.random_range(0.5..2.0)).collect();
        let locs = DMatrix::from_fn(n, g, |i, j| y[i] + bias[j] + 0.5 * normal(&mut rng));
        let l = DMatrix::from_fn(n, g, |i, j| {
            -0.5 * ((2.0 * std::f64::consts::PI * scales[j]).ln() + (y[i] - locs[(i, j)]).powi(2) / scales[j])
        });

        let sm = stack_means(&p, &y).unwrap();
        let sd = stack_distributions(&l).unwrap();
        let mut best_sse = f64::INFINITY;
        let mut best_ls = f64::NEG_INFINITY;
        for w in simplex_grid(g, 1000) {
            let wv = DVector::from_vec(w);
            let r = DVector::from_column_slice(&y) - &p * &wv;
            best_sse = best_sse.min(r.norm_squared());
            let ls: f64 = (0..n)
                .map(|i| {
                    let top = l.row(i).max();
                    top + (0..g).map(|j| wv[j] * (l[(i, j)] - top).exp()).sum::<f64>().ln()
                })
                .sum();
            best_ls = best_ls.max(ls);
        }
        worst_means = worst_means.max(sm.objective - best_sse);
        worst_dists = worst_dists.max(best_ls - sd.objective);
        worst_kkt = worst_kkt.max(sm.kkt_violation).max(sd.kkt_violation);
    }
    (
        worst_means <= 1e-6 && worst_dists <= 1e-5 && worst_kkt <= 1e-6,
        format!(
            "20 problems; solver minus grid: means {worst_means:.2e} (<= 1e-6), log score {worst_dists:.2e} (<= 1e-5); max KKT violation {worst_kkt:.1e}"
        ),
    )
}

struct InfillRun {
    mspe_stack: f64,
    mspe_bma: f64,
    mse_z: f64,
    neg_mlpd: f64,
}

fn infill_run(n: usize, rep: u64, grid: &CandidateGrid) -> InfillRun {
    let sim = simulate_continuous(&ContinuousDgp::infill(n, rep)).unwrap();
    let plan = FoldPlan { scheme: FoldScheme::RandomKFold, k: 20, seed: rep };
    let res = run_stacking(&sim.data, grid, &plan, StackMode::Distributions).unwrap();
    let y: Vec<f64> = res.targets.iter().map(|&r| sim.truth.y[r]).collect();
    let z: Vec<f64> = res.targets.iter().map(|&r| sim.truth.z[r]).collect();
    let mlpd = y.iter().enumerate().map(|(k, &v)| res.stacked_y(k).ln_pdf(v)).sum::<f64>() / y.len() as f64;
    InfillRun {
        mspe_stack: mspe(&res.point_predictions(&res.means.weights), &y).unwrap(),
        mspe_bma: mspe(&res.point_predictions(&res.bma), &y).unwrap(),
        mse_z: mse_z(&res.point_predictions_z(&res.means.weights), &z).unwrap(),
        neg_mlpd: -mlpd,
    }
}

fn c5_infill() -> Outcome {
    let axes = ContinuousAxes {
        phi1: vec![1.0, 0.2],
        phi2: vec![1.0, 0.2],
        xi: vec![1.0, 0.2],
        delta_beta: vec![3.0, 1.0 / 3.0],
        delta_z: vec![3.0, 1.0 / 3.0],
        tie_deltas: false,
        predictive: Default::default(),
    };
    let grid = CandidateGrid::continuous(&axes, IgPrior::default()).unwrap();
    let reps = 20u64;
    let sizes = [20, 60, 120, 200];
    let mut med = [vec![], vec![], vec![]];
    for &n in &sizes {
        let runs: Vec<InfillRun> = (0..reps).map(|r| infill_run(n, r, &grid)).collect();
        med[0].push(median(&mut runs.iter().map(|r| r.mspe_stack).collect::<Vec<_>>()));
        med[1].push(median(&mut runs.iter().map(|r| r.mse_z).collect::<Vec<_>>()));
        med[2].push(median(&mut runs.iter().map(|r| r.neg_mlpd).collect::<Vec<_>>()));
    }
    let at100: Vec<InfillRun> = (0..reps).map(|r| infill_run(100, r, &grid)).collect();
    let wins = at100.iter().filter(|r| r.mspe_stack <= r.mspe_bma).count();
    let ok_a = med.iter().all(|m| non_increasing_with_slack(m));
    let ok_b = wins as f64 >= 0.6 * reps as f64;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    (
        ok_a && ok_b,
        format!(
            "{} candidates, n={sizes:?}; median MSPE [{}], MSE z [{}], -MLPD [{}]; stacking <= BMA at n=100 in {wins}/{reps}",
            grid.len(),
            fmt(&med[0]),
            fmt(&med[1]),
            fmt(&med[2])
        ),
    )
}

fn discrete_axes(phi: [f64; 2], nu: [f64; 2], deltas: &[f64]) -> DiscreteAxes {
    DiscreteAxes {
        phi: phi.to_vec(),
        nu: nu.to_vec(),
        delta_beta: deltas.to_vec(),
        delta_z: deltas.to_vec(),
        tie_deltas: false,
        predictive: Default::default(),
    }
}

fn continuous_axes(phi: [f64; 2], xi: [f64; 2], deltas: &[f64]) -> ContinuousAxes {
    ContinuousAxes {
        phi1: phi.to_vec(),
        phi2: phi.to_vec(),
        xi: xi.to_vec(),
        delta_beta: deltas.to_vec(),
        delta_z: deltas.to_vec(),
        tie_deltas: false,
        predictive: Default::default(),
    }
}

fn expanding(seed: u64) -> FoldPlan {
    FoldPlan { scheme: FoldScheme::ExpandingWindow, k: 20, seed }
}

fn stacked_signal_mse(data: &TrajectoryDataset, truth: &[f64], grid: &CandidateGrid, seed: u64) -> f64 {
    let res = run_stacking(data, grid, &expanding(seed), StackMode::Means).unwrap();
    mspe(&res.fitted_signal(data), truth).unwrap()
}

fn c6_table1() -> Outcome {
    let disc = CandidateGrid::discrete(&discrete_axes([1.0, 0.1], [3.0, 1.0 / 3.0], &[5.0, 0.2]), IgPrior::default()).unwrap();
    let cont =
        CandidateGrid::continuous(&continuous_axes([3.0, 0.1], [3.0, 0.1], &[3.0, 1.0 / 3.0]), IgPrior::default()).unwrap();
    let reps = 10u64;
    let mut d_mse = Vec::new();
    let (mut d_wins, mut c_wins) = (0, 0);
    let mut sums = [0.0; 3];
    for rep in 0..reps {
        let sim = simulate_discrete(&DiscreteDgp::standard(50, rep)).unwrap();
        let truth = &sim.truth.signal;
        let d = stacked_signal_mse(&sim.data, truth, &disc, rep);
        let c = stacked_signal_mse(&sim.data, truth, &cont, rep);
        let ns = trajstack::stacking::ModelSpec::Discrete(DiscreteTrajSpec::nsdlm()).fit(&sim.data).unwrap();
        let nsm = mspe(&ns.fitted_signal(&sim.data), truth).unwrap();
        d_wins += usize::from(d < nsm);
        c_wins += usize::from(c < nsm);
        d_mse.push(d);
        for (s, v) in sums.iter_mut().zip([d, c, nsm]) {
            *s += v / reps as f64;
        }
    }
    let ok = (0.8..=1.4).contains(&sums[0]) && d_wins >= 8 && c_wins >= 8;
    (
        ok,
        format!(
            "mean MSE y: discrete {:.3} (band [0.8, 1.4]), continuous {:.3}, NSDLM {:.3}; beat NSDLM: discrete {d_wins}/{reps}, continuous {c_wins}/{reps}",
            sums[0], sums[1], sums[2]
        ),
    )
}

fn stacked_sigma2(data: &TrajectoryDataset, grid: &CandidateGrid, seed: u64) -> (f64, (f64, f64)) {
    let res = run_stacking(data, grid, &expanding(seed), StackMode::Distributions).unwrap();
    let s2 = res.sigma2();
    (s2.mean().unwrap(), s2.interval(0.95))
}

fn c7_sigma_coverage() -> Outcome {
    let one = [1.0];
    let disc_on_disc = CandidateGrid::discrete(&discrete_axes([1.0, 0.1], [3.0, 1.0 / 3.0], &one), IgPrior::default()).unwrap();
    let cont_on_disc = CandidateGrid::continuous(&continuous_axes([3.0, 0.1], [3.0, 0.1], &one), IgPrior::default()).unwrap();
    let disc_on_cont = CandidateGrid::discrete(&discrete_axes([2.0, 0.5], [2.0, 0.5], &one), IgPrior::default()).unwrap();
    let cont_on_cont = CandidateGrid::continuous(&continuous_axes([1.0, 0.25], [1.0, 0.25], &one), IgPrior::default()).unwrap();
    let reps = 10u64;
    let mut cover = [0usize; 2];
    let mut direction = [0usize; 2];
    let mut means = [0.0; 4];
    for rep in 0..reps {
        let dd = simulate_discrete(&DiscreteDgp::standard(50, rep)).unwrap().data;
        let cd = simulate_continuous(&ContinuousDgp::full(50, rep)).unwrap().data;
        let runs = [
            stacked_sigma2(&dd, &disc_on_disc, rep),
            stacked_sigma2(&cd, &cont_on_cont, rep),
            stacked_sigma2(&cd, &disc_on_cont, rep),
            stacked_sigma2(&dd, &cont_on_disc, rep),
        ];
        for k in 0..2 {
            let (lo, hi) = runs[k].1;
            cover[k] += usize::from(lo <= 1.0 && 1.0 <= hi);
        }
        direction[0] += usize::from(runs[2].0 < 1.0);
        direction[1] += usize::from(runs[3].0 > 1.0);
        for (m, r) in means.iter_mut().zip(&runs) {
            *m += r.0 / reps as f64;
        }
    }
    let ok = cover.iter().all(|&c| c >= 8) && direction.iter().all(|&c| c >= 7);
    (
        ok,
        format!(
            "covers 1: discrete/discrete {}/{reps}, continuous/continuous {}/{reps}; discrete on continuous below 1 in {}/{reps}, continuous on discrete above 1 in {}/{reps}; mean E[sigma2] {:.2} {:.2} {:.2} {:.2}",
            cover[0], cover[1], direction[0], direction[1], means[0], means[1], means[2], means[3]
        ),
    )
}

fn c8_t_normalization() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(8000);
    let mut worst: f64 = 0.0;
    for dof in [1.0, 3.0, 10.0] {
        for _ in 0..3 {
            let scale = random_spd(&mut rng, 2, 0.2);
            let loc = DVector::from_fn(2, |_, _| normal(&mut rng));
            let mass = bivariate_t_mass(&StudentT { dof, loc, scale }, 2000, 64).unwrap();
            worst = worst.max((mass - 1.0).abs());
        }
    }
    (worst <= 1e-6, format!("dof 1, 3, 10 with random scales; worst |mass - 1| {worst:.2e} (limit 1e-6)"))
}

fn c9_variance_decay() -> Outcome {
    let sizes = [50, 200, 800, 1600];
    let mut ok = true;
    let mut parts = Vec::new();
    for (phi, nu) in [(0.5, 1.0), (0.2, 0.5)] {
        let rows = variance_decay(&sizes, &[2, 20], phi, nu, 10, 9).unwrap();
        for t in [2, 20] {
            let seq: Vec<f64> =
                sizes.iter().map(|&n| rows.iter().find(|r| r.n == n && r.epoch == t).unwrap().median).collect();
            ok &= seq.windows(2).all(|w| w[1] < w[0]);
            parts.push(format!(
                "(phi={phi},nu={nu},T={t}) [{}]",
                seq.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(" ")
            ));
        }
    }
    (ok, format!("median E^A over n={sizes:?}: {}", parts.join("; ")))
}

fn c10_concentration() -> Outcome {
    let report = sigma_concentration_check(&ConcentrationSetup::default(), &[50, 200, 800], 10, 10).unwrap();
    let widths: Vec<f64> = report.rows.iter().map(|r| r.median_width).collect();
    let ok = widths.windows(2).all(|w| w[1] < w[0]) && report.shrinking == Some(true);
    (
        ok,
        format!(
            "median 95% width of sigma2 at n=50,200,800: [{}]; median means [{}]",
            widths.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "),
            report.rows.iter().map(|r| format!("{:.3}", r.median_mean)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "conjugate posterior vs importance sampling", c1_conjugate),
        (2, "filter step equals batch posterior", c2_filter_batch),
        (3, "space-time Gram matrices are PSD", c3_kernel_validity),
        (4, "stacking weights are simplex optima", c4_stacking_optimality),
        (5, "in-fill improvement and stacking vs BMA", c5_infill),
        (6, "discrete DGP: MSE y against NSDLM", c6_table1),
        (7, "sigma2 coverage and cross-model bias", c7_sigma_coverage),
        (8, "bivariate t density integrates to one", c8_t_normalization),
        (9, "E^A decays with n", c9_variance_decay),
        (10, "sigma2 posterior concentrates", c10_concentration),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = run();
        let secs = start.elapsed().as_secs_f64();
        failed += usize::from(!ok);
        println!("[{}] C{id:<2} {name}: {detail} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
    }
    println!("{failed} criteria failed");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
