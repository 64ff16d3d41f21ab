//! The depth-dependent λ_init schedule of Differential Attention.

use sambay::layers::lambda_init;

fn main() {
    for l in [1, 2, 4, 8, 16, 32] {
        println!("layer {l:>2}: λ_init = {:.6}", lambda_init(l));
    }
}
