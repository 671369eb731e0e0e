//! Predictive stacking over a hyperparameter grid, with Bayesian model
//! averaging for comparison.

use trajstack::bayes_core::{IgPrior, UnivariateLaw};
use trajstack::metrics::mspe;
use trajstack::simgen::{simulate_continuous, ContinuousDgp};
use trajstack::stacking::{run_stacking, CandidateGrid, ContinuousAxes, FoldPlan, FoldScheme, StackMode};

fn main() -> trajstack::Result<()> {
    let sim = simulate_continuous(&ContinuousDgp::infill(100, 21))?;
    let axes = ContinuousAxes {
        phi1: vec![0.5, 2.0],
        phi2: vec![0.5, 2.0],
        xi: vec![0.5],
        delta_beta: vec![3.0, 1.0 / 3.0],
        delta_z: vec![3.0, 1.0 / 3.0],
        tie_deltas: false,
        predictive: Default::default(),
    };
    let grid = CandidateGrid::continuous(&axes, IgPrior::default())?;
    let plan = FoldPlan { scheme: FoldScheme::RandomKFold, k: 10, seed: 1 };
    let res = run_stacking(&sim.data, &grid, &plan, StackMode::Distributions)?;

    println!("{:<46} {:>7} {:>7} {:>7}", "candidate", "means", "dists", "bma");
    for (g, label) in res.labels().iter().enumerate() {
        println!("{label:<46} {:>7.3} {:>7.3} {:>7.3}", res.means.weights[g], res.distributions.weights[g], res.bma[g]);
    }

    let truth: Vec<f64> = res.targets.iter().map(|&r| sim.truth.y[r]).collect();
    let stacked: Vec<f64> = (0..truth.len()).map(|k| res.stacked_y(k).mean().unwrap()).collect();
    let bma: Vec<f64> = (0..truth.len()).map(|k| res.bma_y(k).mean().unwrap()).collect();
    println!("held-out MSPE: stacking {:.3}, BMA {:.3}", mspe(&stacked, &truth)?, mspe(&bma, &truth)?);
    let s2 = res.sigma2();
    println!("stacked sigma2 95% interval {:.3?}", s2.interval(0.95));
    Ok(())
}
