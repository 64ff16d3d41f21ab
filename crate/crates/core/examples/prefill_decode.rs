//! Prefill a prompt, decode token by token, and compare every step's logits
//! with the parallel forward pass over the whole sequence.

use sambay::arch::{Arch, Model, ModelConfig};
use sambay::runtime::{decode_step, prefill};

fn main() -> sambay::Result<()> {
    let seq: Vec<usize> = (0..96).map(|i| 3 + (i * 37) % 256).collect();
    for arch in Arch::ALL {
        let model = Model::<f32>::new(ModelConfig::desk(arch, 8, 128)?, 0)?;
        let full = model.forward(&seq)?;
        let (mut state, mut logits) = prefill(&model, &seq[..48])?;
        let mut worst = 0f32;
        for t in 48..seq.len() {
            let want = full.row(t - 1);
            worst = logits.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
            logits = decode_step(&model, &mut state, seq[t])?;
        }
        let f = state.footprint();
        println!("{:<14} max |Δlogit| {worst:.2e}   cache floats {}", arch.name(), f.total());
    }
    Ok(())
}
