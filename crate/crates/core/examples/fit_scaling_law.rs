//! Fit L(x) = A·x^(-b) + C to noisy synthetic losses with the multi-start
//! Levenberg–Marquardt fitter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sambay::scaling::{fit_power_law, XKind};

fn main() -> sambay::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let points: Vec<(f64, f64)> = (0..8)
        .map(|i| {
            let flops = 1e18 * 10f64.powf(0.5 * i as f64);
            let loss = 2.0 * (flops / 1e18).powf(-0.5) + 0.58;
            (flops, loss * (1.0 + noise.sample(&mut rng)))
        })
        .collect();
    let fit = fit_power_law(&points, XKind::Flops)?;
    println!("A = {:.4e}  b = {:.4}  C = {:.4}  R² = {:.5}", fit.a, fit.b, fit.c, fit.r_squared);
    println!("A rescaled to x/1e18: {:.4}", fit.a * 1e18f64.powf(-fit.b));
    for ((x, l), r) in points.iter().zip(&fit.residuals) {
        println!("{x:>10.2e} {l:>8.4} {r:>+10.2e}");
    }
    Ok(())
}
