//! The Gated Memory Unit is linear in its memory and strictly position-wise;
//! the normalised variant is invariant to the memory's scale instead.

use sambay::gradcheck::random_tensor;
use sambay::layers::{gmu_forward, ngmu_forward, GmuParams};
use sambay::Tensor;

fn main() -> sambay::Result<()> {
    let (n, dm, dh) = (4, 8, 16);
    let x = random_tensor(&[n, dm], 1);
    let (w1, w2) = (random_tensor(&[dh, dm], 2), random_tensor(&[dh, dm], 3));
    let (m1, m2) = (random_tensor(&[n, dh], 4), random_tensor(&[n, dh], 5));
    let p = GmuParams { w1: &w1, w2: &w2, norm_weight: None };

    let sum = gmu_forward(&x, &m1.add(&m2)?, &p, 1e-6)?;
    let parts = gmu_forward(&x, &m1, &p, 1e-6)?.add(&gmu_forward(&x, &m2, &p, 1e-6)?)?;
    println!("GMU additivity residual:   {:.2e}", sum.max_abs_diff(&parts));

    let nw = Tensor::ones(vec![dh]);
    let np = GmuParams { norm_weight: Some(&nw), ..p };
    let y = ngmu_forward(&x, &m1, &np, 1e-10)?;
    println!("nGMU scale residual (×7):  {:.2e}", y.max_abs_diff(&ngmu_forward(&x, &m1.scale(7.0), &np, 1e-10)?));
    let sum = ngmu_forward(&x, &m1.add(&m2)?, &np, 1e-10)?;
    let parts = y.add(&ngmu_forward(&x, &m2, &np, 1e-10)?)?;
    println!("nGMU additivity residual:  {:.2e}", sum.max_abs_diff(&parts));
    Ok(())
}
