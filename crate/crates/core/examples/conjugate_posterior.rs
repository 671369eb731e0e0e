//! Bayesian linear regression written as an augmented system, with the
//! closed-form Normal-Inverse-Gamma posterior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use trajstack::bayes_core::{
    marginal_theta, nig_posterior, sample_nig, AugmentedSystem, Design, IgPrior, RowKind, ScaleBlock, UnivariateLaw,
};
use trajstack::linalg::{JitterPolicy, SpdMatrix};

fn main() -> trajstack::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let n = 60;
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / n as f64 });
    let truth = DVector::from_vec(vec![1.0, -2.0]);
    let y = &x * &truth + DVector::from_fn(n, |_, _| noise.sample(&mut rng));

    let mut sys = AugmentedSystem::new(2);
    sys.push("data", RowKind::Data, y, Design::Dense(x), ScaleBlock::Identity(n))?;
    let prior_scale = SpdMatrix::new(DMatrix::identity(2, 2) * 100.0, JitterPolicy::Disabled, "prior")?;
    sys.push("prior", RowKind::Prior, DVector::zeros(2), Design::Select { offset: 0, len: 2 }, ScaleBlock::Dense(prior_scale))?;

    let post = nig_posterior(&sys, IgPrior::new(2.0, 1.0)?)?;
    let theta = marginal_theta(&post);
    for (j, name) in ["intercept", "slope"].iter().enumerate() {
        let m = theta.marginal(j);
        println!("{name:>9}: {:+.3}  95% ({:+.3}, {:+.3})", m.loc, m.quantile(0.025), m.quantile(0.975));
    }
    let s2 = post.sigma2_law();
    println!("    sigma2: mean {:.4}  95% ({:.4}, {:.4})  truth 0.25", s2.mean().unwrap(), s2.quantile(0.025), s2.quantile(0.975));
    println!("log evidence {:.3}", post.log_evidence().unwrap());

    let draws = sample_nig(&post, 4000, 1)?;
    let mc: f64 = draws.theta.iter().map(|t| t[1]).sum::<f64>() / draws.theta.len() as f64;
    println!("Monte Carlo slope mean {mc:+.3}");
    Ok(())
}
