//! Test metric as the graph-token list grows.

use vecformer::evalbench::ablate_tokens;
use vecformer::graphio::{gen_sbm, SbmConfig};
use vecformer::trainer::{default_split, TrainConfig};
use vecformer::SeededRng;

fn main() -> vecformer::Result<()> {
    let ds = gen_sbm(
        &SbmConfig::new(vec![50, 50, 50], 0.12, 0.02).with_features(8, 0.8),
        &mut SeededRng::new(5),
    )?;
    let cfg = TrainConfig {
        hidden_dim: 32,
        m: 16,
        n: 16,
        stage1_epochs: 30,
        stage2_epochs: 80,
        patience: 30,
        ..TrainConfig::default()
    };
    let split = default_split(&ds, &cfg)?;
    let r = ablate_tokens(&ds, &split, &[4, 16, 64, 256], &cfg, &[0, 1])?;
    for (size, median) in &r.medians {
        println!("|G_T| = {size:>3}  median test {median:.3}");
    }
    Ok(())
}
