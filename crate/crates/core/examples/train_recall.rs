//! Train a small SambaY on associative recall and report exact-match
//! accuracy before and after.

use sambay::arch::{Arch, Model, ModelConfig};
use sambay::training::{evaluate_recall, train, TaskSpec, TrainConfig};

fn main() -> sambay::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let mut model = ModelConfig::desk(Arch::SambaY, 4, 64)?;
    model.vocab_size = 32;
    model.window = 16;
    let task = TaskSpec::associative_recall(32, 4, 16, 0);
    let mut cfg = TrainConfig::for_task(model, task.clone(), steps);
    cfg.batch_size = 16;
    cfg.lr = Some(3e-3);

    let eval = task.with_seed(1234);
    let before = evaluate_recall(&Model::<f32>::new(cfg.model.clone(), cfg.seed)?, &eval, 256)?;
    let out = train::<f32>(&cfg, |r| {
        if r.step % (steps / 10).max(1) == 0 {
            println!("step {:>5}  loss {:.4}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    let after = evaluate_recall(&out.model, &eval, 256)?;
    println!("recall before {:.3} ± {:.3}, after {:.3} ± {:.3}", before.accuracy, before.stderr, after.accuracy, after.stderr);
    Ok(())
}
