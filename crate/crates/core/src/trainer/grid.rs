use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_stage1, train_stage2, TrainConfig};
use crate::error::{Error, Result};
use crate::graphio::{GraphDataset, Split};

pub const LR_GRID: [f64; 3] = [0.001, 0.005, 0.01];
pub const HIDDEN_GRID: [usize; 3] = [64, 128, 256];
pub const WEIGHT_DECAY_GRID: [f64; 3] = [1e-3, 5e-4, 1e-4];
pub const DROPOUT_GRID: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const TEMPERATURE_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const GAMMA_GRID: [f64; 3] = [1.0, 2.0, 3.0];

/// Axes of a sweep. An empty axis keeps the base config's value.
///
/// `gamma` sets both reconstruction exponents together.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub lr: Vec<f64>,
    pub hidden_dim: Vec<usize>,
    pub weight_decay: Vec<f64>,
    pub dropout: Vec<f64>,
    pub temperature: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn check_axis<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T], allowed: &[T]) -> Result<()> {
    match values.iter().find(|v| !allowed.contains(v)) {
        Some(v) => Err(Error::Config(format!("{name} value {v:?} outside the grid {allowed:?}"))),
        None => Ok(()),
    }
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SearchSpace {
    /// Every axis at its full declared grid.
    pub fn full() -> Self {
        Self {
            lr: LR_GRID.to_vec(),
            hidden_dim: HIDDEN_GRID.to_vec(),
            weight_decay: WEIGHT_DECAY_GRID.to_vec(),
            dropout: DROPOUT_GRID.to_vec(),
            temperature: TEMPERATURE_GRID.to_vec(),
            gamma: GAMMA_GRID.to_vec(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
            && self.hidden_dim.is_empty()
            && self.weight_decay.is_empty()
            && self.dropout.is_empty()
            && self.temperature.is_empty()
            && self.gamma.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("empty search space".into()));
        }
        check_axis("lr", &self.lr, &LR_GRID)?;
        check_axis("hidden_dim", &self.hidden_dim, &HIDDEN_GRID)?;
        check_axis("weight_decay", &self.weight_decay, &WEIGHT_DECAY_GRID)?;
        check_axis("dropout", &self.dropout, &DROPOUT_GRID)?;
        check_axis("temperature", &self.temperature, &TEMPERATURE_GRID)?;
        check_axis("gamma", &self.gamma, &GAMMA_GRID)
    }

    /// Cartesian product over `base`, lr varying slowest.
    pub fn configs(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        self.validate()?;
        let mut out = Vec::new();
        for &lr in &axis(&self.lr, base.lr) {
            for &hidden_dim in &axis(&self.hidden_dim, base.hidden_dim) {
                for &weight_decay in &axis(&self.weight_decay, base.weight_decay) {
                    for &dropout in &axis(&self.dropout, base.dropout) {
                        for &temperature in &axis(&self.temperature, base.temperature) {
                            for &gamma in &axis(&self.gamma, base.gamma_f) {
                                let gamma_g = if self.gamma.is_empty() { base.gamma_g } else { gamma };
                                out.push(TrainConfig {
                                    lr,
                                    hidden_dim,
                                    weight_decay,
                                    dropout,
                                    temperature,
                                    gamma_f: gamma,
                                    gamma_g,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub temperature: f64,
    pub gamma_f: f64,
    pub gamma_g: f64,
    pub best_epoch: usize,
    pub val_metric: f64,
    pub test_metric: f64,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub best: TrainConfig,
    /// Sorted by validation metric, descending; ties keep sweep order.
    pub leaderboard: Vec<LeaderboardRow>,
}

impl GridOutcome {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for row in &self.leaderboard {
            w.serialize(row).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs both stages for every point of `space` (the first `budget` points
/// if capped) and ranks them by best validation metric.
pub fn grid_search(
    ds: &GraphDataset,
    split: &Split,
    base: &TrainConfig,
    space: &SearchSpace,
    budget: Option<usize>,
) -> Result<GridOutcome> {
    let mut configs = space.configs(base)?;
    if let Some(b) = budget {
        if b == 0 {
            return Err(Error::Config("grid budget must be positive".into()));
        }
        configs.truncate(b);
    }
    let mut scored = Vec::with_capacity(configs.len());
    for cfg in configs {
        cfg.validate()?;
        let s1 = train_stage1(ds, &cfg)?;
        let s2 = train_stage2(ds, split, &s1.checkpoint, &cfg)?;
        let best = &s2.fit.records[s2.fit.best_epoch - 1];
        scored.push((cfg, s2.fit.best_epoch, best.val_metric, best.test_metric));
    }
    // NaN validation scores sort last.
    scored.sort_by(|a, b| {
        let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
        key(b.2).total_cmp(&key(a.2))
    });
    let leaderboard = scored
        .iter()
        .enumerate()
        .map(|(k, (c, epoch, val, test))| LeaderboardRow {
            rank: k + 1,
            lr: c.lr,
            hidden_dim: c.hidden_dim,
            weight_decay: c.weight_decay,
            dropout: c.dropout,
            temperature: c.temperature,
            gamma_f: c.gamma_f,
            gamma_g: c.gamma_g,
            best_epoch: *epoch,
            val_metric: *val,
            test_metric: *test,
        })
        .collect();
    Ok(GridOutcome {
        best: scored.swap_remove(0).0,
        leaderboard,
    })
}
