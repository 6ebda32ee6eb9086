use std::path::Path;

use serde::{Deserialize, Serialize};

use super::diagnostics::median;
use crate::error::{Error, Result};
use crate::graphio::{GraphDataset, Split};
use crate::trainer::{stage1_eval_loss, train_stage1, train_stage2, TrainConfig};

/// Token-list sizes swept by default.
pub const TOKEN_SIZES: [usize; 4] = [4, 16, 64, 256];
/// Codebook sizes swept by default.
pub const CODEBOOK_SIZES: [usize; 5] = [2, 4, 8, 16, 32];

/// `size = side²`, split as `N_f = N_s = side`.
pub fn square_factorization(size: usize) -> Result<(usize, usize)> {
    let side = (size as f64).sqrt().round() as usize;
    if size == 0 || side * side != size {
        return Err(Error::Config(format!("token-list size {size} is not a perfect square")));
    }
    Ok((side, side))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAblationRow {
    pub size: usize,
    pub n_f: usize,
    pub n_s: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_metric: f64,
    pub test_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAblation {
    pub rows: Vec<TokenAblationRow>,
    /// `(size, median test metric)` in sweep order.
    pub medians: Vec<(usize, f64)>,
}

/// Trains both stages per (size, seed) and reports the test metric at the
/// best validation epoch.
pub fn ablate_tokens(
    ds: &GraphDataset,
    split: &Split,
    sizes: &[usize],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<TokenAblation> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one size and one seed".into()));
    }
    let factors = sizes.iter().map(|&s| square_factorization(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for (&size, &(n_f, n_s)) in sizes.iter().zip(&factors) {
        let mut tests = Vec::new();
        for &seed in seeds {
            let c = TrainConfig { n_f, n_s, seed, ..cfg.clone() };
            let s1 = train_stage1(ds, &c)?;
            let s2 = train_stage2(ds, split, &s1.checkpoint, &c)?;
            let best = &s2.fit.records[s2.fit.best_epoch - 1];
            tests.push(best.test_metric);
            rows.push(TokenAblationRow {
                size,
                n_f,
                n_s,
                seed,
                best_epoch: s2.fit.best_epoch,
                val_metric: best.val_metric,
                test_metric: best.test_metric,
            });
        }
        medians.push((size, median(&tests)));
    }
    Ok(TokenAblation { rows, medians })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookAblationRow {
    pub size: usize,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookAblation {
    pub rows: Vec<CodebookAblationRow>,
    /// `(size, median final stage-1 loss)` in sweep order.
    pub medians: Vec<(usize, f64)>,
}

/// Stage-1 loss at each codebook size (`m = n = size`), evaluated in eval
/// mode before and after training.
pub fn ablate_codebook(ds: &GraphDataset, sizes: &[usize], cfg: &TrainConfig, seeds: &[u64]) -> Result<CodebookAblation> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one size and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for &size in sizes {
        let mut finals = Vec::new();
        for &seed in seeds {
            let c = TrainConfig {
                m: size,
                n: size,
                seed,
                ..cfg.clone()
            };
            let out = train_stage1(ds, &c)?;
            let initial = out.records.first().map_or(f64::NAN, |r| r.total);
            let final_loss = stage1_eval_loss(ds, &c, &out.checkpoint.params)?.total;
            finals.push(final_loss);
            rows.push(CodebookAblationRow {
                size,
                seed,
                initial_loss: initial,
                final_loss,
            });
        }
        medians.push((size, median(&finals)));
    }
    Ok(CodebookAblation { rows, medians })
}

pub fn write_rows_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::{gen_sbm, make_split, SbmConfig};
    use crate::numerics::SeededRng;

    #[test]
    fn square_sizes() {
        assert_eq!(square_factorization(4).unwrap(), (2, 2));
        for s in TOKEN_SIZES {
            let (a, b) = square_factorization(s).unwrap();
            assert_eq!(a * b, s);
        }
        for bad in [0, 2, 8, 48] {
            assert!(matches!(square_factorization(bad), Err(Error::Config(_))));
        }
    }

    fn fixture() -> (GraphDataset, Split, TrainConfig) {
        let ds = gen_sbm(
            &SbmConfig::new(vec![8, 8], 0.6, 0.05).with_features(4, 2.0),
            &mut SeededRng::new(3),
        )
        .unwrap();
        let split = make_split(ds.n(), (0.5, 0.25, 0.25), &mut SeededRng::new(4)).unwrap();
        let cfg = TrainConfig {
            hidden_dim: 8,
            m: 4,
            n: 4,
            stage1_epochs: 2,
            stage2_epochs: 3,
            ..TrainConfig::default()
        };
        (ds, split, cfg)
    }

    #[test]
    fn token_ablation_rows() {
        let (ds, split, cfg) = fixture();
        let out = ablate_tokens(&ds, &split, &[4, 16], &cfg, &[0, 1]).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.medians.iter().map(|m| m.0).collect::<Vec<_>>(), vec![4, 16]);
        assert!(ablate_tokens(&ds, &split, &[8], &cfg, &[0]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ablation_tokens.csv");
        write_rows_csv(&out.rows, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 5);
    }

    #[test]
    fn codebook_ablation_rows() {
        let (ds, _, cfg) = fixture();
        let out = ablate_codebook(&ds, &[2, 4], &cfg, &[0]).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows.iter().all(|r| r.final_loss.is_finite()));
    }
}
