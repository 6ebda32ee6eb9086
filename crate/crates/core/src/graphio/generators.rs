//! Synthetic datasets: SBM graphs, spurious-feature shifts, correlation
//! k-NN graphs and perturbation-neighbourhood labels.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{GraphDataset, Labels, SparseAdjacency, ENV_ID, ENV_OOD};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Stochastic block model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    /// Value of the class-specific coordinate in each class mean.
    pub feat_signal: f64,
}

impl SbmConfig {
    pub fn new(block_sizes: Vec<usize>, p_in: f64, p_out: f64) -> Self {
        Self {
            block_sizes,
            p_in,
            p_out,
            feat_dim: 8,
            feat_signal: 1.0,
        }
    }

    pub fn with_features(mut self, feat_dim: usize, feat_signal: f64) -> Self {
        self.feat_dim = feat_dim;
        self.feat_signal = feat_signal;
        self
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name}={p} is not a probability")));
    }
    Ok(())
}

/// Undirected SBM. Node features are the class mean (coordinate
/// `class mod d` set to `feat_signal`) plus unit Gaussian noise; labels are
/// block indices.
pub fn gen_sbm(cfg: &SbmConfig, rng: &mut SeededRng) -> Result<GraphDataset> {
    check_prob("p_in", cfg.p_in)?;
    check_prob("p_out", cfg.p_out)?;
    if cfg.block_sizes.is_empty() || cfg.block_sizes.contains(&0) {
        return Err(Error::Config("block sizes must be positive".into()));
    }
    if cfg.feat_dim == 0 {
        return Err(Error::Config("feat_dim must be positive".into()));
    }
    let labels: Vec<usize> = cfg
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = labels.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.bernoulli(p) {
                edges.push((i, j));
            }
        }
    }
    let adjacency = SparseAdjacency::from_edges_symmetrized(n, edges)?;
    let d = cfg.feat_dim;
    let features = Tensor::from_fn(n, d, |i, j| {
        let mean = if j == labels[i] % d { cfg.feat_signal } else { 0.0 };
        mean + rng.normal()
    });
    GraphDataset::new(adjacency, features, Labels::Classes(labels), cfg.block_sizes.len())
}

/// Spurious-feature shift parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousConfig {
    pub spurious_dim: usize,
    /// Probability that an in-distribution node's spurious columns encode
    /// its own label.
    pub id_corr: f64,
    /// Same probability for shifted nodes.
    pub ood_corr: f64,
    /// Fraction of nodes assigned to the shifted environment.
    pub ood_fraction: f64,
    /// Magnitude of the label code written into spurious columns.
    pub scale: f64,
    /// Std of the Gaussian noise added to each spurious entry.
    pub noise: f64,
}

impl Default for SpuriousConfig {
    fn default() -> Self {
        Self {
            spurious_dim: 2,
            id_corr: 0.95,
            ood_corr: 0.05,
            ood_fraction: 0.5,
            scale: 1.0,
            noise: 0.1,
        }
    }
}

/// Appends spurious columns and an ID/OOD environment assignment.
///
/// Each node draws a spurious class: its true label with probability
/// `id_corr` (ID nodes) or `ood_corr` (OOD nodes), otherwise a uniformly
/// random class. Every spurious column holds
/// `scale · (spurious_class − (C−1)/2)` plus Gaussian noise. Original
/// columns, labels and topology are untouched.
pub fn gen_spurious_shift(
    base: &GraphDataset,
    cfg: &SpuriousConfig,
    rng: &mut SeededRng,
) -> Result<GraphDataset> {
    if cfg.spurious_dim == 0 {
        return Err(Error::Config("spurious_dim must be at least 1".into()));
    }
    check_prob("id_corr", cfg.id_corr)?;
    check_prob("ood_corr", cfg.ood_corr)?;
    check_prob("ood_fraction", cfg.ood_fraction)?;
    let classes = base
        .labels
        .classes()
        .ok_or_else(|| Error::Config("spurious shift needs class labels".into()))?;
    let n = base.n();
    let c = base.num_classes;

    let n_ood = (cfg.ood_fraction * n as f64).round() as usize;
    let mut env = vec![ENV_ID; n];
    for &i in &rng.permutation(n)[..n_ood] {
        env[i] = ENV_OOD;
    }

    let center = (c as f64 - 1.0) / 2.0;
    let d = base.feat_dim();
    let width = d + cfg.spurious_dim;
    let mut features = Tensor::zeros(&[n, width]);
    for i in 0..n {
        features.row_mut(i)[..d].copy_from_slice(base.features.row(i));
        let corr = if env[i] == ENV_OOD { cfg.ood_corr } else { cfg.id_corr };
        let spurious_class = if rng.bernoulli(corr) { classes[i] } else { rng.below(c) };
        let code = cfg.scale * (spurious_class as f64 - center);
        for k in 0..cfg.spurious_dim {
            features.set(i, d + k, code + cfg.noise * rng.normal());
        }
    }

    let ds = GraphDataset {
        adjacency: base.adjacency.clone(),
        features,
        labels: base.labels.clone(),
        num_classes: c,
        environment: Some(env),
        environments: vec!["id".into(), "ood".into()],
    };
    ds.validate()?;
    Ok(ds)
}

/// Pearson correlation between all row pairs; constant rows correlate 0
/// with everything, including themselves.
pub fn pearson_matrix(signals: &Tensor) -> Result<Tensor> {
    let (n, s) = signals.dims2();
    if s < 2 {
        return Err(Error::Config(format!("need at least 2 samples per row, got {s}")));
    }
    let mut centered = Tensor::zeros(&[n, s]);
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = signals.row(i);
        let mean = row.iter().sum::<f64>() / s as f64;
        let out = centered.row_mut(i);
        for (o, v) in out.iter_mut().zip(row) {
            *o = v - mean;
        }
        norms[i] = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mut corr = centered.matmul_nt(&centered)?;
    for i in 0..n {
        for j in 0..n {
            let denom = norms[i] * norms[j];
            let v = if denom > 0.0 { corr.get(i, j) / denom } else { 0.0 };
            corr.set(i, j, v);
        }
    }
    Ok(corr)
}

/// For every row, its top-`k` other rows by Pearson correlation (ties to
/// the lower index), before any symmetrization.
pub fn knn_directed(signals: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = signals.rows();
    if k >= n {
        return Err(Error::Config(format!("k={k} must be below N={n}")));
    }
    let corr = pearson_matrix(signals)?;
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| corr.get(i, b).total_cmp(&corr.get(i, a)).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect())
}

/// Symmetric k-NN graph: `(i, j)` is an edge when either endpoint is in the
/// other's top-k list. No self-edges.
pub fn build_knn_correlation_graph(signals: &Tensor, k: usize) -> Result<SparseAdjacency> {
    let lists = knn_directed(signals, k)?;
    let edges = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)));
    SparseAdjacency::from_edges_symmetrized(signals.rows(), edges)
}

/// Module-structured expression-like signals: rows in the same module share
/// a latent profile, mixed with independent noise.
pub fn gen_module_signals(
    n: usize,
    samples: usize,
    modules: usize,
    noise: f64,
    rng: &mut SeededRng,
) -> (Tensor, Vec<usize>) {
    let modules = modules.max(1);
    let profiles = rng.normal_tensor(modules, samples, 1.0);
    let membership: Vec<usize> = (0..n).map(|i| i % modules).collect();
    let signals = Tensor::from_fn(n, samples, |i, j| {
        profiles.get(membership[i], j) + noise * rng.normal()
    });
    (signals, membership)
}

/// Binary labels marking nodes within `radius` hops of `target`; `None`
/// means unbounded radius.
pub fn gen_de_labels(
    adjacency: &SparseAdjacency,
    target: usize,
    radius: Option<usize>,
) -> Result<Vec<u8>> {
    let n = adjacency.n();
    if target >= n {
        return Err(Error::Structural(format!("target {target} out of range for n={n}")));
    }
    let limit = radius.unwrap_or(usize::MAX);
    let mut dist = vec![usize::MAX; n];
    dist[target] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(u) = queue.pop_front() {
        if dist[u] >= limit {
            continue;
        }
        for &v in adjacency.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    Ok(dist.iter().map(|&d| u8::from(d <= limit)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_sbm_probabilities() {
        let ds = gen_sbm(&SbmConfig::new(vec![3, 3], 1.0, 0.0), &mut SeededRng::new(0)).unwrap();
        let labels = ds.labels.classes().unwrap();
        let cross = ds.adjacency.edges().filter(|&(i, j)| labels[i] != labels[j]).count();
        assert_eq!(cross, 0);
        // two 3-cliques: 3 undirected edges each, stored both ways
        assert_eq!(ds.adjacency.num_edges(), 12);

        let empty = gen_sbm(&SbmConfig::new(vec![4, 2], 0.0, 0.0), &mut SeededRng::new(0)).unwrap();
        assert_eq!(empty.adjacency.num_edges(), 0);
    }

    #[test]
    fn sbm_cross_edges_within_binomial_band() {
        let cfg = SbmConfig::new(vec![50, 50], 0.2, 0.02);
        let ds = gen_sbm(&cfg, &mut SeededRng::new(5)).unwrap();
        let labels = ds.labels.classes().unwrap();
        let cross = ds
            .adjacency
            .edges()
            .filter(|&(i, j)| i < j && labels[i] != labels[j])
            .count() as f64;
        let trials = 2500.0;
        let mean = trials * 0.02;
        let sigma = (trials * 0.02 * 0.98f64).sqrt();
        assert!((cross - mean).abs() <= 4.0 * sigma, "{cross}");
    }

    #[test]
    fn sbm_is_deterministic() {
        let cfg = SbmConfig::new(vec![10, 12], 0.3, 0.05);
        let a = gen_sbm(&cfg, &mut SeededRng::new(2)).unwrap();
        let b = gen_sbm(&cfg, &mut SeededRng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
        let t = Tensor::new(vec![2, xs.len()], xs.iter().chain(ys).copied().collect()).unwrap();
        pearson_matrix(&t).unwrap().get(0, 1)
    }

    fn spurious_label_corr(ds: &GraphDataset, env: usize, col: usize) -> f64 {
        let nodes = ds.nodes_in_env(env);
        let labels = ds.labels.classes().unwrap();
        let xs: Vec<f64> = nodes.iter().map(|&i| ds.features.get(i, col)).collect();
        let ys: Vec<f64> = nodes.iter().map(|&i| labels[i] as f64).collect();
        correlation(&xs, &ys)
    }

    #[test]
    fn spurious_shift_width_and_independence() {
        let base = gen_sbm(
            &SbmConfig::new(vec![300, 300], 0.01, 0.002).with_features(8, 1.0),
            &mut SeededRng::new(1),
        )
        .unwrap();
        let cfg = SpuriousConfig {
            spurious_dim: 2,
            id_corr: 1.0,
            ood_corr: 0.0,
            ..SpuriousConfig::default()
        };
        let ds = gen_spurious_shift(&base, &cfg, &mut SeededRng::new(2)).unwrap();
        assert_eq!(ds.feat_dim(), 10);
        assert_eq!(ds.features.slice_cols(0, 8), base.features);
        assert!(spurious_label_corr(&ds, ENV_OOD, 8).abs() < 0.1);
        assert!(spurious_label_corr(&ds, ENV_ID, 8) > 0.9);
    }

    #[test]
    fn equal_correlations_mean_no_shift() {
        let base = gen_sbm(
            &SbmConfig::new(vec![500, 500], 0.005, 0.001),
            &mut SeededRng::new(3),
        )
        .unwrap();
        let cfg = SpuriousConfig {
            spurious_dim: 1,
            id_corr: 0.6,
            ood_corr: 0.6,
            ..SpuriousConfig::default()
        };
        let ds = gen_spurious_shift(&base, &cfg, &mut SeededRng::new(4)).unwrap();
        let id = spurious_label_corr(&ds, ENV_ID, 8);
        let ood = spurious_label_corr(&ds, ENV_OOD, 8);
        assert!((id - ood).abs() < 0.1, "{id} vs {ood}");
    }

    #[test]
    fn knn_identical_rows_link() {
        let signals = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.5, -1.0, 2.0, 0.0],
            vec![1.0, 2.0, 3.0, 4.0],
        ]);
        let adj = build_knn_correlation_graph(&signals, 1).unwrap();
        assert!(adj.has_edge(0, 2) && adj.has_edge(2, 0));
        assert!(!adj.has_edge(0, 0));
    }

    #[test]
    fn knn_out_degree_is_k_before_union() {
        let mut rng = SeededRng::new(8);
        let signals = rng.normal_tensor(30, 12, 1.0);
        for k in [5, 10, 20] {
            let lists = knn_directed(&signals, k).unwrap();
            assert!(lists.iter().all(|l| l.len() == k));
            let adj = build_knn_correlation_graph(&signals, k).unwrap();
            assert!(adj.check_symmetric());
        }
    }

    #[test]
    fn knn_rejects_k_at_least_n() {
        let signals = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(build_knn_correlation_graph(&signals, 2), Err(Error::Config(_))));
    }

    #[test]
    fn constant_rows_correlate_zero() {
        let signals = Tensor::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0]]);
        let c = pearson_matrix(&signals).unwrap();
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(0, 0), 0.0);
    }

    #[test]
    fn de_labels_radius_cases() {
        let path = SparseAdjacency::from_edges_symmetrized(6, (0..5).map(|i| (i, i + 1))).unwrap();
        assert_eq!(gen_de_labels(&path, 2, Some(0)).unwrap(), vec![0, 0, 1, 0, 0, 0]);
        assert_eq!(gen_de_labels(&path, 2, None).unwrap(), vec![1; 6]);
        assert!(gen_de_labels(&path, 6, Some(1)).is_err());
    }
}
