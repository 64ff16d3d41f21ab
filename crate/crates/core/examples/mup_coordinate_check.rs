//! Parameterization plans and the init-time coordinate check: the hidden
//! state RMS stays in a narrow band across widths under μP++ but drifts
//! under the standard parameterization.

use sambay::arch::{Arch, ModelConfig, Parameterization};
use sambay::scaling::{band_ratio, coordinate_check, mup_plan};

fn main() -> sambay::Result<()> {
    let mut cfg = ModelConfig::desk(Arch::SambaY, 8, 512)?;
    print!("μP++ at w=512:\n{}", mup_plan(&cfg).table());
    cfg.parameterization = Parameterization::Sp;
    print!("\nSP at w=512:\n{}", mup_plan(&cfg).table());

    let widths = [128, 256, 512];
    for p in [Parameterization::MupPlusPlus, Parameterization::Sp] {
        let check = coordinate_check(Arch::SambaY, 8, &widths, p, 32, 0)?;
        let rms: Vec<String> = check.iter().map(|(w, r)| format!("w={w}: {r:.3}")).collect();
        println!("\n{p}: {} -> band {:.2}x", rms.join(", "), band_ratio(&check));
    }
    Ok(())
}
