//! Small sweep over learning rate and dropout; prints the leaderboard.

use vecformer::graphio::{gen_sbm, SbmConfig};
use vecformer::trainer::{default_split, grid_search, SearchSpace, TrainConfig};
use vecformer::SeededRng;

fn main() -> vecformer::Result<()> {
    let ds = gen_sbm(&SbmConfig::new(vec![40, 40], 0.2, 0.03).with_features(8, 0.7), &mut SeededRng::new(9))?;
    let base = TrainConfig {
        hidden_dim: 32,
        m: 8,
        n: 8,
        n_f: 4,
        n_s: 4,
        stage1_epochs: 20,
        stage2_epochs: 60,
        patience: 20,
        ..TrainConfig::default()
    };
    let space = SearchSpace {
        lr: vec![0.001, 0.005, 0.01],
        dropout: vec![0.1, 0.5],
        ..SearchSpace::default()
    };
    let split = default_split(&ds, &base)?;
    let out = grid_search(&ds, &split, &base, &space, None)?;
    for r in &out.leaderboard {
        println!(
            "#{} lr {} dropout {} best epoch {} val {:.3} test {:.3}",
            r.rank, r.lr, r.dropout, r.best_epoch, r.val_metric, r.test_metric
        );
    }
    Ok(())
}
