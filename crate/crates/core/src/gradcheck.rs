//! Central finite-difference gradient checking for graph-built functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Per-input comparison between reverse-mode and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input
    /// (0 when both vanish).
    pub rel_errors: Vec<f64>,
    pub max_abs_errors: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Scalar root `Σ out ⊙ R` for a fixed pseudo-random `R`, so that every
/// output coordinate contributes a distinct weight.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let r = g.input(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

/// Compare reverse-mode gradients of `build` against central differences with
/// step `h`. `build` receives one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            let an = a.data()[j];
            diff2 += (an - num) * (an - num);
            an2 += an * an;
            nu2 += num * num;
            max_abs = max_abs.max((an - num).abs());
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
        max_abs_errors.push(max_abs);
    }
    Ok(GradReport {
        rel_errors,
        max_abs_errors,
    })
}

/// Uniform(-1, 1) tensor from a seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}
