//! DIC and WAIC across model families fitted to the same discrete data.

use trajstack::kernels::KernelSpec;
use trajstack::simgen::{simulate_discrete, DiscreteDgp};
use trajstack::stacking::ModelSpec;
use trajstack::traj_continuous::ContinuousTrajSpec;
use trajstack::traj_discrete::DiscreteTrajSpec;

fn main() -> trajstack::Result<()> {
    let sim = simulate_discrete(&DiscreteDgp::standard(50, 2))?;
    let models = [
        ModelSpec::Discrete(DiscreteTrajSpec::new(1.0, 1.0, KernelSpec::Matern { phi: 1.0 / 7.0, nu: 1.0 })),
        ModelSpec::Discrete(DiscreteTrajSpec::new(0.5, 0.5, KernelSpec::Matern { phi: 2.0, nu: 0.5 })),
        ModelSpec::Continuous(ContinuousTrajSpec::new(1.0, 1.0, 0.5, 0.5, 0.5)),
        ModelSpec::Discrete(DiscreteTrajSpec::nsdlm()),
    ];
    println!("{:<44} {:>9} {:>7} {:>9} {:>7}", "model", "DIC", "pD", "WAIC", "pW");
    for spec in &models {
        let fit = spec.fit(&sim.data)?;
        let (dic, waic) = fit.information_criteria(&sim.data, 2000, 9)?;
        println!("{:<44} {:>9.2} {:>7.2} {:>9.2} {:>7.2}", spec.label(), dic.dic, dic.p_d, waic.waic, waic.p_w);
    }
    Ok(())
}
