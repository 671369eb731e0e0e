//! In-fill prediction along a continuously observed trajectory. Compares the
//! plug-in predictive with the full posterior predictive.

use trajstack::bayes_core::{PredictiveForm, UnivariateLaw};
use trajstack::metrics::mspe;
use trajstack::simgen::{simulate_continuous, ContinuousDgp};
use trajstack::traj_continuous::{fit_continuous, ContinuousTrajSpec};

fn main() -> trajstack::Result<()> {
    let sim = simulate_continuous(&ContinuousDgp::infill(120, 5))?;
    let data = &sim.data;
    let targets = data.targets();
    let y: Vec<f64> = targets.iter().map(|&r| sim.truth.y[r]).collect();

    for form in [PredictiveForm::PlugIn, PredictiveForm::Full] {
        let spec = ContinuousTrajSpec::new(1.0, 1.0, 0.5, 0.5, 0.5).with_predictive(form);
        let fit = fit_continuous(data, &spec)?;
        let pred = fit.predict_rows(data, &targets)?;
        let laws = pred.y.marginals();
        let covered = laws.iter().zip(&y).filter(|(m, &v)| m.quantile(0.025) <= v && v <= m.quantile(0.975)).count();
        println!(
            "{form:?}: MSPE {:.3}, 95% coverage {:.2}",
            mspe(pred.y.loc.as_slice(), &y)?,
            covered as f64 / y.len() as f64
        );
    }
    Ok(())
}
