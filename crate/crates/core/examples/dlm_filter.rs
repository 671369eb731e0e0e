//! Forward filtering of a spatial dynamic linear model, then kriging onto
//! sites that were never observed. Each site starts from an independent
//! initial state, so new sites keep a share of variance no kriging recovers.

use trajstack::bayes_core::{PredictiveForm, UnivariateLaw};
use trajstack::dlm::SpatialDlm;
use trajstack::kernels::KernelSpec;
use trajstack::simgen::{simulate_dlm, DlmDgp};

fn main() -> trajstack::Result<()> {
    let cfg = DlmDgp::standard(60, 3);
    let panel = simulate_dlm(&cfg)?;
    let kernel = KernelSpec::Matern { phi: cfg.phi, nu: cfg.nu };
    let train = panel.locations[..panel.n_train].to_vec();
    let model = SpatialDlm::new(cfg.p, train, kernel, cfg.delta_beta, cfg.delta_z, 1.0)?;

    let mut state = model.prior(2.0, 1.0, 4.0)?;
    for t in 0..panel.epochs() {
        state = model.step(&state, &panel.train_y(t), &panel.train_x(t))?;
        if (t + 1) % 5 == 0 {
            println!(
                "epoch {:>2}: beta = {:+.3?} (truth {:+.3?})  E[sigma2] = {:.3}",
                t + 1,
                &state.m.as_slice()[..cfg.p],
                panel.beta[t + 1].as_slice(),
                state.sigma2_law().mean().unwrap()
            );
        }
    }

    let last = panel.epochs() - 1;
    let new = panel.locations[panel.n_train..].to_vec();
    let x0 = panel.x[last].rows(panel.n_train, new.len()).into_owned();
    let truth = &panel.y[last].as_slice()[panel.n_train..];
    for form in [PredictiveForm::PlugIn, PredictiveForm::Full] {
        let pred = model.spatial_predict_with(&state, &new, &x0, kernel, cfg.delta_z, form)?;
        let mspe = trajstack::metrics::mspe(pred.loc.as_slice(), truth)?;
        let covered = pred
            .marginals()
            .iter()
            .zip(truth)
            .filter(|(m, &y)| m.quantile(0.025) <= y && y <= m.quantile(0.975))
            .count();
        println!("{form:?}: {} new sites, MSPE {mspe:.3}, 95% coverage {covered}/{}", new.len(), new.len());
    }
    Ok(())
}
