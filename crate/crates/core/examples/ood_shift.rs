//! Spurious-feature shift: graph-token model against the dense baseline on
//! the shifted environment, with attention spread on the OOD nodes.

use vecformer::evalbench::ood_comparison;
use vecformer::graphio::{gen_sbm, gen_spurious_shift, make_env_split, SbmConfig, SpuriousConfig, OOD_RATIOS};
use vecformer::trainer::TrainConfig;
use vecformer::SeededRng;

fn main() -> vecformer::Result<()> {
    let mut rng = SeededRng::new(11);
    let base = gen_sbm(&SbmConfig::new(vec![100, 100, 100], 0.1, 0.01).with_features(8, 1.0), &mut rng)?;
    let ds = gen_spurious_shift(&base, &SpuriousConfig::default(), &mut rng)?;
    let split = make_env_split(&ds, OOD_RATIOS, &mut rng)?;
    let cfg = TrainConfig {
        hidden_dim: 32,
        m: 16,
        n: 16,
        n_f: 4,
        n_s: 4,
        stage1_epochs: 50,
        stage2_epochs: 150,
        patience: 50,
        ..TrainConfig::default()
    };
    let cmp = ood_comparison(&ds, &split, &cfg, &[0, 1, 2])?;
    for r in &cmp.runs {
        println!(
            "seed {} ood acc {:.3} vs {:.3}  attn std {:.2e} vs {:.2e}",
            r.seed, r.vecformer_ood_accuracy, r.baseline_ood_accuracy, r.vecformer_mean_std, r.baseline_mean_std
        );
    }
    println!(
        "median ood acc {:.3} vs {:.3}",
        cmp.median_vecformer_accuracy, cmp.median_baseline_accuracy
    );
    Ok(())
}
