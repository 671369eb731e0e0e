//! Asymptotic diagnostics: decay of the kriging variance term with sample
//! size, and concentration of the σ² posterior.

use trajstack::diagnostics::{sigma_concentration_check, variance_decay, ConcentrationSetup};

fn main() -> trajstack::Result<()> {
    let rows = variance_decay(&[25, 50, 100, 200], &[2, 10], 0.5, 1.0, 5, 4)?;
    for r in &rows {
        println!("n={:>4} T={:>2}  median E^A {:.4e}", r.n, r.epoch, r.median);
    }

    let setup = ConcentrationSetup::default();
    let report = sigma_concentration_check(&setup, &[25, 100], 5, 8)?;
    for r in &report.rows {
        println!("n={:>4}  median E[sigma2] {:.3}  median 95% width {:.3}", r.n, r.median_mean, r.median_width);
    }
    println!("shrinking: {:?}", report.shrinking);
    Ok(())
}
