//! Discrete-time trajectory model against the non-spatial DLM baseline.

use trajstack::kernels::KernelSpec;
use trajstack::metrics::mspe;
use trajstack::simgen::{simulate_discrete, DiscreteDgp};
use trajstack::traj_discrete::{fit_discrete, DiscreteTrajSpec};

fn main() -> trajstack::Result<()> {
    let cfg = DiscreteDgp::standard(50, 11);
    let sim = simulate_discrete(&cfg)?;
    let truth = &sim.truth.signal;

    let spatial = DiscreteTrajSpec::new(1.0, 1.0, KernelSpec::Matern { phi: cfg.phi, nu: cfg.nu });
    for (name, spec) in [("trajectory", spatial.clone()), ("nsdlm", DiscreteTrajSpec::nsdlm())] {
        let fit = fit_discrete(&sim.data, &spec)?;
        let err = mspe(&fit.fitted_signal(&sim.data), truth)?;
        let sigma2 = fit.posterior().b_star() / (fit.posterior().a_star() - 1.0);
        println!("{name:>10}: MSE y {err:.3}  E[sigma2] {sigma2:.3}");
    }

    let fit = fit_discrete(&sim.data, &spatial)?;
    let next = fit.predict_next(&[0.5, -1.0], sim.data.location(sim.data.len() - 1))?;
    println!("next epoch at the last location: y ~ t_{:.0}({:.3}, {:.3})", next.y.dof, next.y.loc, next.y.scale);
    if let Some(ix) = fit.index() {
        println!("{} epochs over {} distinct locations", ix.epochs(), ix.n());
    }
    Ok(())
}
