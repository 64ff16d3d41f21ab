//! Finite-difference check of reverse-mode gradients through a GMU.

use sambay::gradcheck::{check, random_projection, random_tensor};
use sambay::layers::GmuParams;

fn main() -> sambay::Result<()> {
    let (n, dm, dh) = (3, 4, 6);
    let inputs = [
        random_tensor(&[n, dm], 0),
        random_tensor(&[n, dh], 1),
        random_tensor(&[dh, dm], 2),
        random_tensor(&[dh, dm], 3),
    ];
    let report = check(&inputs, 1e-5, |g, v| {
        let y = GmuParams { w1: v[2], w2: v[3], norm_weight: None }.forward_graph(g, v[0], v[1], 1e-6)?;
        random_projection(g, y, 7)
    })?;
    for (name, e) in ["x", "memory", "W1", "W2"].iter().zip(&report.rel_errors) {
        println!("{name:>6}: relative error {e:.2e}");
    }
    Ok(())
}
