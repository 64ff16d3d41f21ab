//! Save a decode state mid-generation, reload it, and continue identically.

use sambay::arch::{Arch, Model, ModelConfig};
use sambay::runtime::{decode_step, prefill, DecodeState};

fn main() -> sambay::Result<()> {
    let model = Model::<f32>::new(ModelConfig::desk(Arch::SambaY, 8, 128)?, 1)?;
    let (mut state, _) = prefill(&model, &[10, 20, 30, 40])?;
    let dir = std::env::temp_dir().join("sambay-decode-state");
    state.save(&dir)?;
    let mut restored = DecodeState::<f32>::load(&dir, &model)?;
    let a = decode_step(&model, &mut state, 50)?;
    let b = decode_step(&model, &mut restored, 50)?;
    println!("position {} restored; logits identical: {}", restored.pos, a == b);
    println!("footprint: {:?}", restored.footprint());
    Ok(())
}
