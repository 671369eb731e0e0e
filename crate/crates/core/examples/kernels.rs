//! Correlation functions and Gram matrices.

use nalgebra::SymmetricEigen;
use trajstack::kernels::{gneiting_st_corr, gram, matern_corr, sqexp_corr, KernelSpec, SpaceTimePoint};
use trajstack::linalg::JitterPolicy;

fn main() -> trajstack::Result<()> {
    for nu in [0.5, 1.0, 1.5, 2.5] {
        let row: Vec<String> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&d| matern_corr(d, 2.0, nu).map(|c| format!("{c:.4}")))
            .collect::<trajstack::Result<_>>()?;
        println!("matern nu={nu:<4} {}", row.join("  "));
    }

    let p = SpaceTimePoint::new(0.0, [0.0, 0.0]);
    let q = SpaceTimePoint::new(1.0, [1.0, 0.0]);
    println!("gneiting(phi1=0.5, phi2=0.5) = {:.6}", gneiting_st_corr(&p, &q, 0.5, 0.5)?);
    println!("sqexp(|dt|=2, xi=1)          = {:.6}", sqexp_corr(0.0, 2.0, 1.0)?);

    // A trajectory that revisits its start.
    let pts: Vec<SpaceTimePoint> = (0..40)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 20.0;
            SpaceTimePoint::new(i as f64 * 0.25, [a.cos(), a.sin()])
        })
        .collect();
    let g = gram(&pts, &KernelSpec::Gneiting { phi1: 0.5, phi2: 0.5 }, JitterPolicy::Disabled)?;
    let eig = SymmetricEigen::new(g.matrix().clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("40-point Gneiting Gram: min eigenvalue {min:.3e}, jitter {}", g.jitter());
    Ok(())
}
