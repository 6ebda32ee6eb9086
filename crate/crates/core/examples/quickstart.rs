//! Generate a small SBM, run both training stages and score the test split.
//!
//! cargo run --release --example quickstart

use vecformer::graphio::{gen_sbm, SbmConfig};
use vecformer::trainer::{default_split, train_stage1, train_stage2, TrainConfig};
use vecformer::SeededRng;

fn main() -> vecformer::Result<()> {
    let mut rng = SeededRng::new(7);
    let ds = gen_sbm(&SbmConfig::new(vec![60, 60, 60], 0.15, 0.01).with_features(12, 1.0), &mut rng)?;
    let cfg = TrainConfig {
        hidden_dim: 32,
        m: 16,
        n: 16,
        n_f: 4,
        n_s: 4,
        stage1_epochs: 40,
        stage2_epochs: 120,
        patience: 30,
        ..TrainConfig::default()
    };

    let s1 = train_stage1(&ds, &cfg)?;
    let first = s1.records.first().unwrap();
    let last = s1.records.last().unwrap();
    println!("stage 1 loss {:.4} -> {:.4}", first.total, last.total);

    let split = default_split(&ds, &cfg)?;
    let s2 = train_stage2(&ds, &split, &s1.checkpoint, &cfg)?;
    let best = &s2.fit.records[s2.fit.best_epoch];
    println!(
        "stage 2 best epoch {} val {:.3} test {:.3} ({})",
        s2.fit.best_epoch,
        best.val_metric,
        best.test_metric,
        s2.fit.metric.as_str()
    );
    Ok(())
}
