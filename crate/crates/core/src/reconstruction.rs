//! Single-layer decoders and the stage-one reconstruction objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::SparseAdjacency;
use crate::numerics::{Linear, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::quantizer::TokenBundleVars;

/// Norm floor used by the cosine terms.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    /// Dense below `dense_cap`, sampled above.
    Auto,
    DenseExact,
    NegativeSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub gamma_f: f64,
    pub gamma_g: f64,
    /// Structure-decoder width; `None` means the hidden width.
    pub d_y: Option<usize>,
    pub structure_mode: StructureMode,
    pub neg_ratio: usize,
    pub dense_cap: usize,
    pub feature_weight: f64,
    pub structure_weight: f64,
    pub graph_weight: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            gamma_f: 2.0,
            gamma_g: 2.0,
            d_y: None,
            structure_mode: StructureMode::Auto,
            neg_ratio: 5,
            dense_cap: 4096,
            feature_weight: 1.0,
            structure_weight: 1.0,
            graph_weight: 1.0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_f >= 1.0 && self.gamma_g >= 1.0) {
            return Err(Error::Config(format!(
                "scaling exponents must be ≥ 1, got {} / {}",
                self.gamma_f, self.gamma_g
            )));
        }
        if self.neg_ratio == 0 {
            return Err(Error::Config("neg_ratio must be positive".into()));
        }
        if self.d_y == Some(0) {
            return Err(Error::Config("d_y must be positive".into()));
        }
        Ok(())
    }

    /// Resolved structure mode for a graph of `n` nodes.
    pub fn resolve_mode(&self, n: usize) -> Result<StructureMode> {
        match self.structure_mode {
            StructureMode::Auto if n <= self.dense_cap => Ok(StructureMode::DenseExact),
            StructureMode::Auto => Ok(StructureMode::NegativeSampling),
            StructureMode::DenseExact if n > self.dense_cap => Err(Error::Config(format!(
                "dense_exact structure loss on {n} nodes exceeds dense_cap {}",
                self.dense_cap
            ))),
            mode => Ok(mode),
        }
    }
}

/// Feature, structure and graph decoders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderSet {
    pub feature: Linear,
    pub structure: Linear,
    pub graph: Linear,
}

impl DecoderSet {
    pub fn init(store: &mut ParamStore, hidden: usize, feat_dim: usize, d_y: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            feature: Linear::init(store, "decoder.feature", hidden, feat_dim, true, rng)?,
            structure: Linear::init(store, "decoder.structure", hidden, d_y, true, rng)?,
            graph: Linear::init(store, "decoder.graph", hidden, hidden, true, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, hidden: usize, feat_dim: usize, d_y: usize) -> Result<Self> {
        Ok(Self {
            feature: Linear::bind(store, "decoder.feature", hidden, feat_dim, true)?,
            structure: Linear::bind(store, "decoder.structure", hidden, d_y, true)?,
            graph: Linear::bind(store, "decoder.graph", hidden, hidden, true)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.feature, self.structure, self.graph]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Mean over rows of `(1 − cos(target_i, recon_i))^γ`.
pub fn scaled_cosine_error<'t>(target: Var<'t>, recon: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    if target.shape() != recon.shape() {
        return Err(Error::Dimension {
            op: "scaled_cosine_error",
            lhs: target.shape(),
            rhs: recon.shape(),
        });
    }
    let denom = target.row_norm(COSINE_EPS).mul(recon.row_norm(COSINE_EPS))?;
    let cos = target.row_dot(recon)?.div(denom)?;
    // Rounding can push 1 − cos a hair below zero, which a fractional power
    // would turn into NaN.
    Ok(cos.scale(-1.0).add_scalar(1.0).relu().powf(gamma).mean())
}

/// Non-edge pairs used by the sampled structure estimator, with the factor
/// that rescales their squared errors to the dense total.
#[derive(Clone, Debug)]
pub struct NegativeSample {
    pub pairs: Vec<(usize, usize)>,
    pub scale: f64,
}

/// Draws `neg_ratio·|E|` non-edges uniformly with replacement. When that
/// many draws would reach the non-edge count, all non-edges are used once.
pub fn sample_non_edges(adj: &SparseAdjacency, neg_ratio: usize, rng: &mut SeededRng) -> NegativeSample {
    let n = adj.n();
    let total_non = n * n - adj.num_edges();
    let wanted = neg_ratio * adj.num_edges().max(1);
    if total_non == 0 {
        return NegativeSample {
            pairs: Vec::new(),
            scale: 0.0,
        };
    }
    if wanted >= total_non {
        let pairs = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !adj.has_edge(i, j))
            .collect();
        return NegativeSample { pairs, scale: 1.0 };
    }
    let mut pairs = Vec::with_capacity(wanted);
    while pairs.len() < wanted {
        let (i, j) = (rng.below(n), rng.below(n));
        if !adj.has_edge(i, j) {
            pairs.push((i, j));
        }
    }
    NegativeSample {
        pairs,
        scale: total_non as f64 / wanted as f64,
    }
}

/// `‖A − σ(ŶŶᵀ)‖²_F`, exactly or by the sampled estimator.
pub fn structure_recon_loss<'t>(
    adj: &SparseAdjacency,
    y: Var<'t>,
    mode: StructureMode,
    cfg: &ReconConfig,
    rng: &mut SeededRng,
) -> Result<Var<'t>> {
    let n = adj.n();
    if y.shape().len() != 2 || y.shape()[0] != n {
        return Err(Error::Contract(format!(
            "structure decoder output {:?} does not have {n} rows",
            y.shape()
        )));
    }
    let tape = y.tape();
    match mode {
        StructureMode::Auto => structure_recon_loss(adj, y, cfg.resolve_mode(n)?, cfg, rng),
        StructureMode::DenseExact => {
            if n > cfg.dense_cap {
                return Err(Error::Config(format!(
                    "dense_exact structure loss on {n} nodes exceeds dense_cap {}",
                    cfg.dense_cap
                )));
            }
            let a = tape.constant(adj.to_dense());
            Ok(a.sub(y.matmul_nt(y)?.sigmoid())?.square().sum())
        }
        StructureMode::NegativeSampling => {
            let positives: Vec<(usize, usize)> = adj.edges().collect();
            let neg = sample_non_edges(adj, cfg.neg_ratio, rng);
            let mut loss = tape.constant(Tensor::scalar(0.0));
            if !positives.is_empty() {
                let p = tape.pair_dot(y, Rc::new(positives))?.sigmoid();
                loss = loss.add(p.scale(-1.0).add_scalar(1.0).square().sum())?;
            }
            if !neg.pairs.is_empty() {
                let q = tape.pair_dot(y, Rc::new(neg.pairs))?.sigmoid();
                loss = loss.add(q.square().sum().scale(neg.scale))?;
            }
            Ok(loss)
        }
    }
}

/// The three weighted terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms<'t> {
    pub total: Var<'t>,
    pub feature: Var<'t>,
    pub structure: Var<'t>,
    pub graph: Var<'t>,
}

/// Plain values of [`Stage1Terms`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Values {
    pub total: f64,
    pub feature: f64,
    pub structure: f64,
    pub graph: f64,
}

impl Stage1Terms<'_> {
    pub fn values(&self) -> Stage1Values {
        Stage1Values {
            total: self.total.item(),
            feature: self.feature.item(),
            structure: self.structure.item(),
            graph: self.graph.item(),
        }
    }
}

/// Feature, structure and graph reconstruction of one forward pass.
///
/// `adj` is the topology whose entries are reconstructed (the caller passes
/// `Â`), `x` the raw features and `h` the encoder output that produced
/// `bundle`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    adj: &SparseAdjacency,
    x: Var<'t>,
    h: Var<'t>,
    bundle: &TokenBundleVars<'t>,
    decoders: &DecoderSet,
    cfg: &ReconConfig,
    rng: &mut SeededRng,
) -> Result<Stage1Terms<'t>> {
    let x_hat = decoders.feature.forward(tape, store, bundle.f)?;
    let y_hat = decoders.structure.forward(tape, store, bundle.s)?;
    let h_hat = decoders.graph.forward(tape, store, bundle.g)?;
    let feature = scaled_cosine_error(x, x_hat, cfg.gamma_f)?.scale(cfg.feature_weight);
    let mode = cfg.resolve_mode(adj.n())?;
    let structure = structure_recon_loss(adj, y_hat, mode, cfg, rng)?.scale(cfg.structure_weight);
    let graph = scaled_cosine_error(h, h_hat, cfg.gamma_g)?.scale(cfg.graph_weight);
    let total = feature.add(structure)?.add(graph)?;
    Ok(Stage1Terms {
        total,
        feature,
        structure,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn sce(t: &Tensor, r: &Tensor, gamma: f64) -> f64 {
        let tape = Tape::new();
        scaled_cosine_error(tape.constant(t.clone()), tape.constant(r.clone()), gamma)
            .unwrap()
            .item()
    }

    #[test]
    fn cosine_extremes() {
        let t = SeededRng::new(0).normal_tensor(5, 4, 1.0);
        assert!(sce(&t, &t, 2.0).abs() < 1e-15);
        assert!((sce(&t, &t.scale(-1.0), 2.0) - 4.0).abs() < 1e-12);
        assert!((sce(&t, &t.scale(-1.0), 3.0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_row_oracle() {
        let mut rng = SeededRng::new(1);
        let t = rng.normal_tensor(3, 4, 1.0);
        let r = rng.normal_tensor(3, 4, 1.0);
        let mut acc = 0.0;
        for i in 0..3 {
            let dot: f64 = t.row(i).iter().zip(r.row(i)).map(|(a, b)| a * b).sum();
            let nt: f64 = t.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            let nr: f64 = r.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            acc += (1.0 - dot / (nt * nr)).powi(2);
        }
        assert!((sce(&t, &r, 2.0) - acc / 3.0).abs() < 1e-12);
    }

    fn structure(adj: &SparseAdjacency, y: &Tensor, mode: StructureMode, cfg: &ReconConfig) -> f64 {
        let tape = Tape::new();
        structure_recon_loss(adj, tape.constant(y.clone()), mode, cfg, &mut SeededRng::new(0))
            .unwrap()
            .item()
    }

    #[test]
    fn zero_embedding_on_empty_graph() {
        for n in [1, 4, 9] {
            let adj = SparseAdjacency::empty(n);
            let loss = structure(&adj, &Tensor::zeros(&[n, 3]), StructureMode::DenseExact, &ReconConfig::default());
            assert_eq!(loss, 0.25 * (n * n) as f64);
        }
    }

    #[test]
    fn two_node_entrywise() {
        let adj = SparseAdjacency::from_edges_symmetrized(2, [(0, 1)]).unwrap();
        let y = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.3]]);
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let g = |i: usize, j: usize| y.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum::<f64>();
        let oracle = s(g(0, 0)).powi(2) + (1.0 - s(g(0, 1))).powi(2) + (1.0 - s(g(1, 0))).powi(2) + s(g(1, 1)).powi(2);
        let loss = structure(&adj, &y, StructureMode::DenseExact, &ReconConfig::default());
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_sampling_equals_dense() {
        let mut rng = SeededRng::new(2);
        let mut edges = Vec::new();
        for i in 0..50 {
            for j in i + 1..50 {
                if rng.bernoulli(0.05) {
                    edges.push((i, j));
                }
            }
        }
        let adj = SparseAdjacency::from_edges_symmetrized(50, edges).unwrap().with_self_loops();
        let y = rng.normal_tensor(50, 4, 0.5);
        let cfg = ReconConfig {
            neg_ratio: 10_000,
            ..ReconConfig::default()
        };
        let dense = structure(&adj, &y, StructureMode::DenseExact, &cfg);
        let sampled = structure(&adj, &y, StructureMode::NegativeSampling, &cfg);
        assert!((dense - sampled).abs() < 1e-10, "{dense} vs {sampled}");
    }

    #[test]
    fn sampled_estimate_is_unbiased_in_expectation() {
        let mut rng = SeededRng::new(3);
        let adj = crate::graphio::gen_sbm(
            &crate::graphio::SbmConfig::new(vec![30, 30], 0.2, 0.02),
            &mut rng,
        )
        .unwrap()
        .adjacency;
        let y = rng.normal_tensor(60, 3, 0.5);
        let cfg = ReconConfig {
            neg_ratio: 2,
            ..ReconConfig::default()
        };
        let dense = structure(&adj, &y, StructureMode::DenseExact, &cfg);
        let mut acc = 0.0;
        let trials = 200;
        for t in 0..trials {
            let tape = Tape::new();
            acc += structure_recon_loss(&adj, tape.constant(y.clone()), StructureMode::NegativeSampling, &cfg, &mut SeededRng::new(t))
                .unwrap()
                .item();
        }
        let mean = acc / trials as f64;
        assert!((mean - dense).abs() / dense < 0.02, "{mean} vs {dense}");
    }

    #[test]
    fn dense_beyond_cap_is_config_error() {
        let cfg = ReconConfig {
            dense_cap: 3,
            ..ReconConfig::default()
        };
        let adj = SparseAdjacency::empty(4);
        let tape = Tape::new();
        let y = tape.constant(Tensor::zeros(&[4, 2]));
        let err = structure_recon_loss(&adj, y, StructureMode::DenseExact, &cfg, &mut SeededRng::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
        assert_eq!(cfg.resolve_mode(4).unwrap(), StructureMode::NegativeSampling);
    }

    #[test]
    fn structure_gradient() {
        let adj = SparseAdjacency::from_edges_symmetrized(5, [(0, 1), (1, 2), (3, 4)]).unwrap();
        let y = SeededRng::new(4).uniform_tensor(5, 3, -1.0, 1.0);
        let cfg = ReconConfig::default();
        for mode in [StructureMode::DenseExact, StructureMode::NegativeSampling] {
            let err = grad_check(
                |_, y| structure_recon_loss(&adj, y, mode, &cfg, &mut SeededRng::new(1)),
                &y,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?} {err}");
        }
    }
}
