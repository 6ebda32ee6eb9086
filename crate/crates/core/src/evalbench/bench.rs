use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::GraphContext;
use crate::error::{Error, Result};
use crate::graphio::{gen_sbm, GraphDataset, SbmConfig};
use crate::numerics::{Mode, ParamStore, SeededRng, Tape};
use crate::tokenformer::{DenseBaseline, NodeClassifier, VecFormer, DENSE_ATTENTION_CAP};
use crate::trainer::{classification_loss, AdamW, Stage1Model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    DenseNode,
    GraphToken,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::DenseNode => "dense_node",
            Mechanism::GraphToken => "graph_token",
        }
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense_node" => Ok(Mechanism::DenseNode),
            "graph_token" => Ok(Mechanism::GraphToken),
            other => Err(Error::Config(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Training epochs timed per trial.
    pub epochs: usize,
    pub trials: usize,
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    /// Expected node degree, held fixed across `N`.
    pub avg_degree: f64,
    pub codebook_size: usize,
    pub n_f: usize,
    pub n_s: usize,
    pub dense_cap: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            trials: 3,
            feat_dim: 16,
            hidden_dim: 32,
            blocks: 4,
            avg_degree: 10.0,
            codebook_size: 64,
            n_f: 16,
            n_s: 16,
            dense_cap: DENSE_ATTENTION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub n: usize,
    pub mechanism: Mechanism,
    /// Keys per query: the token-list size, or `N` for dense attention.
    pub m: usize,
    /// Median wall time of one training epoch.
    pub seconds: f64,
    /// Peak resident set observed during the trials, 0 if unavailable.
    pub bytes: u64,
}

/// SBM graph of `n` nodes whose expected degree does not grow with `n`.
pub fn bench_graph(n: usize, cfg: &BenchConfig, rng: &mut SeededRng) -> Result<GraphDataset> {
    let b = cfg.blocks.clamp(1, n.max(1));
    let mut sizes = vec![n / b; b];
    sizes[0] += n % b;
    let block = (n / b).max(1) as f64;
    let rest = (n as f64 - block).max(1.0);
    let p_in = (0.8 * cfg.avg_degree / block).min(1.0);
    let p_out = if b > 1 { (0.2 * cfg.avg_degree / rest).min(1.0) } else { 0.0 };
    gen_sbm(&SbmConfig::new(sizes, p_in, p_out).with_features(cfg.feat_dim, 1.0), rng)
}

fn read_status_kb(key: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(key))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Resets the kernel's peak-RSS counter where supported.
fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

pub fn peak_rss_bytes() -> u64 {
    read_status_kb("VmHWM:").or_else(|| read_status_kb("VmRSS:")).unwrap_or(0) * 1024
}

fn time_training<M: NodeClassifier>(
    model: &M,
    mut store: ParamStore,
    ds: &GraphDataset,
    epochs: usize,
) -> Result<f64> {
    let ctx = GraphContext::new(&ds.adjacency);
    let rows: Vec<usize> = (0..ds.n()).collect();
    let mut opt = AdamW::new(0.01, 5e-4);
    let mut rng = SeededRng::new(0);
    let start = Instant::now();
    for _ in 0..epochs {
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &ctx, tape.constant(ds.features.clone()), Mode::Train, &mut rng)?;
        let loss = classification_loss(out.logits, &ds.labels, &rows)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut store, &grads);
    }
    Ok(start.elapsed().as_secs_f64() / epochs as f64)
}

fn build(mech: Mechanism, ds: &GraphDataset, cfg: &BenchConfig, seed: u64) -> Result<(ParamStore, Box<dyn Timed>)> {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::derive(seed, "bench.init");
    match mech {
        Mechanism::GraphToken => {
            let tc = TrainConfig {
                hidden_dim: cfg.hidden_dim,
                m: cfg.codebook_size,
                n: cfg.codebook_size,
                n_f: cfg.n_f,
                n_s: cfg.n_s,
                dropout: 0.0,
                ..TrainConfig::default()
            };
            let base = Stage1Model::init(&mut store, &tc, ds.feat_dim(), &mut rng)?;
            let model = VecFormer::init_head(
                &mut store,
                base.encoder,
                base.quantizer,
                cfg.n_f,
                cfg.n_s,
                1,
                ds.num_classes,
                Default::default(),
                &mut rng,
            )?;
            Ok((store, Box::new(model)))
        }
        Mechanism::DenseNode => {
            let mut model = DenseBaseline::init(&mut store, ds.feat_dim(), cfg.hidden_dim, 1, ds.num_classes, 0.0, &mut rng)?;
            model.cap = cfg.dense_cap;
            Ok((store, Box::new(model)))
        }
    }
}

/// Object-safe wrapper so both models share one timing loop.
trait Timed {
    fn time(&self, store: ParamStore, ds: &GraphDataset, epochs: usize) -> Result<f64>;
}

impl<M: NodeClassifier> Timed for M {
    fn time(&self, store: ParamStore, ds: &GraphDataset, epochs: usize) -> Result<f64> {
        time_training(self, store, ds, epochs)
    }
}

/// Per-epoch training time and peak memory of each mechanism across `ns`.
///
/// Trials run sequentially; the reported time is the median over trials.
pub fn bench_scaling(ns: &[usize], mechanisms: &[Mechanism], cfg: &BenchConfig, seed: u64) -> Result<Vec<ScalingRecord>> {
    if cfg.epochs == 0 || cfg.trials == 0 {
        return Err(Error::Config("bench needs at least one epoch and one trial".into()));
    }
    for &n in ns {
        if n == 0 {
            return Err(Error::Config("bench node counts must be positive".into()));
        }
        if mechanisms.contains(&Mechanism::DenseNode) && n > cfg.dense_cap {
            return Err(Error::Config(format!("dense attention on {n} nodes exceeds cap {}", cfg.dense_cap)));
        }
    }
    let mut records = Vec::new();
    for &n in ns {
        let ds = bench_graph(n, cfg, &mut SeededRng::derive(seed, &format!("bench.graph.{n}")))?;
        for &mech in mechanisms {
            let (store, model) = build(mech, &ds, cfg, seed)?;
            let mut times = Vec::with_capacity(cfg.trials);
            let mut bytes = 0;
            for _ in 0..cfg.trials {
                reset_peak_rss();
                times.push(model.time(store.clone(), &ds, cfg.epochs)?);
                bytes = bytes.max(peak_rss_bytes());
            }
            records.push(ScalingRecord {
                n,
                mechanism: mech,
                m: match mech {
                    Mechanism::GraphToken => cfg.n_f * cfg.n_s,
                    Mechanism::DenseNode => n,
                },
                seconds: super::diagnostics::median(&times),
                bytes,
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Slope of median time vs `N` for one mechanism.
pub fn mechanism_slope(records: &[ScalingRecord], mech: Mechanism) -> Result<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter(|r| r.mechanism == mech)
        .map(|r| (r.n as f64, r.seconds))
        .unzip();
    loglog_slope(&xs, &ys)
}

pub fn write_scaling_csv(records: &[ScalingRecord], path: &Path) -> Result<()> {
    let mut out = String::from("n,mechanism,m,seconds,bytes\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.n, r.mechanism.as_str(), r.m, r.seconds, r.bytes));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
