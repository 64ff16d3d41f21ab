//! Byte-level generation with greedy and nucleus sampling.

use sambay::arch::{Arch, Model, ModelConfig};
use sambay::runtime::{generate, Sampler};
use sambay::training::FIRST_CONTENT;

fn main() -> sambay::Result<()> {
    let model = Model::<f32>::new(ModelConfig::desk(Arch::SambaY, 8, 128)?, 7)?;
    let prompt: Vec<usize> = "Once upon a time".bytes().map(|b| FIRST_CONTENT + b as usize).collect();
    for (name, sampler) in [("greedy", Sampler::Greedy), ("top-p", Sampler::default())] {
        let out = generate(&model, &prompt, 24, sampler, 0)?;
        println!("{name:>7}: {out:?}");
    }
    Ok(())
}
