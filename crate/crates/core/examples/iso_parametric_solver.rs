//! Solve the aspect ratio α (w = α·d) that keeps each architecture's
//! parameter count equal to the Transformer++ baseline, then print the
//! counts, learning rates and token budgets of the resulting depth sweep.

use sambay::arch::Arch;
use sambay::scaling::{learning_rate, reference_nonembed, solve_aspect_ratio, solve_aspect_ratio_exact, tokens_for_depth, IsoArch, B0};

fn main() -> sambay::Result<()> {
    println!("{:<14} {:>10} {:>5}", "arch", "root", "α");
    for iso in IsoArch::REGISTERED {
        let p = iso.polynomial();
        println!("{:<14} {:>10.3} {:>5}", iso.name(), solve_aspect_ratio_exact(p)?, solve_aspect_ratio(p)?);
    }
    println!("\n{:<4} {:>10} {:>16} {:>12} {:>12}", "d", "lr", "arch", "params (M)", "tokens (B)");
    for d in [8, 12, 16, 20, 24] {
        for arch in [Arch::TransformerPP, Arch::SambaY, Arch::SambaYoco] {
            println!(
                "{d:<4} {:>10.3e} {:>16} {:>12.1} {:>12.1}",
                learning_rate(d as f64, B0),
                arch.name(),
                reference_nonembed(arch, d)? as f64 / 1e6,
                tokens_for_depth(arch, d)? / 1e9
            );
        }
    }
    Ok(())
}
