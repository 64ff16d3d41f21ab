//! Per-step memory reads during decoding: the GMU reads a constant amount,
//! shared-KV attention grows linearly with the context, and SambaY's
//! cross-decoder reads half as much as Samba+YOCO's.

use sambay::arch::{Arch, MixerKind, Model, ModelConfig};
use sambay::runtime::{decode_step, footprint_at, prefill};

fn main() -> sambay::Result<()> {
    let seq: Vec<usize> = (0..4097).map(|i| 3 + (i * 101) % 256).collect();
    println!("{:<14} {:>6} {:>8} {:>10} {:>12} {:>6}", "arch", "N", "SWA", "full", "cross-dec", "GMU");
    for arch in [Arch::SambaY, Arch::SambaYoco, Arch::TransformerPP] {
        let model = Model::<f32>::new(ModelConfig::desk(arch, 8, 128)?, 0)?;
        for n in [256, 1024, 4096] {
            let (mut st, _) = prefill(&model, &seq[..n])?;
            decode_step(&model, &mut st, seq[n])?;
            let l = &st.ledger;
            println!(
                "{:<14} {n:>6} {:>8} {:>10} {:>12} {:>6}",
                arch.name(),
                l.step_read_by_kind(MixerKind::Swa),
                l.step_read_by_kind(MixerKind::Full),
                l.cross_decoder_read(),
                l.step_read_by_kind(MixerKind::Gmu)
            );
        }
    }
    let f = footprint_at(&ModelConfig::desk(Arch::SambaY, 8, 128)?, 32768)?;
    println!("\nSambaY cache at N=32768: {f:?} (tap/global-KV {:.1e})", f.tap as f64 / f.global_kv as f64);
    Ok(())
}
