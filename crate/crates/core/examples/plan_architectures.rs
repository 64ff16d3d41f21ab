//! Layer plans and parameter counts for every architecture at desk scale.

use sambay::arch::{build_layer_plan, count_params, Arch, ModelConfig};

fn main() -> sambay::Result<()> {
    for arch in Arch::ALL {
        let cfg = ModelConfig::desk(arch, 8, 128)?;
        let plan = build_layer_plan(&cfg)?;
        let n = count_params(&cfg)?;
        println!("== {arch} (d=8, w=128): {} non-embedding parameters", n.exact_nonembed);
        print!("{plan}");
        println!();
    }
    Ok(())
}
