//! Message-passing encoders: GAT (default) and GCN, each with residual
//! shortcuts.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::{GraphDataset, SparseAdjacency};
use crate::numerics::{dropout, glorot_uniform, Linear, Mode, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gat,
    Gcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub residual: bool,
    pub negative_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Gat,
            layers: 2,
            hidden_dim: 64,
            heads: 1,
            dropout: 0.0,
            residual: true,
            negative_slope: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.heads == 0 {
            return Err(Error::Config("encoder layers, hidden_dim and heads must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kind == EncoderKind::Gat && !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Topology prepared once per dataset: `Â = A + I` and its symmetric
/// normalization weights.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub adj: Rc<SparseAdjacency>,
    pub norm_weights: Rc<Vec<f64>>,
}

impl GraphContext {
    pub fn new(adjacency: &SparseAdjacency) -> Self {
        let adj = adjacency.with_self_loops();
        let norm_weights = Rc::new(adj.sym_norm_weights());
        Self {
            adj: Rc::new(adj),
            norm_weights,
        }
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }
}

#[derive(Clone, Debug)]
struct GatHead {
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
}

#[derive(Clone, Debug)]
enum Propagation {
    Gat { heads: Vec<GatHead>, concat: bool },
    Gcn { w: ParamId },
}

#[derive(Clone, Debug)]
struct Layer {
    prop: Propagation,
    bias: ParamId,
    shortcut: Option<Linear>,
    identity_residual: bool,
}

/// Parameter handles for an encoder stack stored under `encoder.*`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub feat_dim: usize,
    layers: Vec<Layer>,
}

fn layer_dims(cfg: &EncoderConfig, feat_dim: usize, l: usize) -> (usize, usize) {
    let d_in = if l == 0 { feat_dim } else { cfg.hidden_dim };
    (d_in, cfg.hidden_dim)
}

impl Encoder {
    /// Glorot-uniform weights and zero biases, registered in `store`.
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, feat_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        Self::build(store, config, feat_dim, |store, name, shape| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                glorot_uniform(rng, shape[0], shape[1])
            };
            store.add(name, t)
        })
    }

    /// Binds an encoder whose parameters already live in `store`.
    pub fn bind(store: &ParamStore, config: &EncoderConfig, feat_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut store = store.clone();
        Self::build(&mut store, config, feat_dim, |store, name, shape| store.expect(name, shape))
    }

    fn build(
        store: &mut ParamStore,
        config: &EncoderConfig,
        feat_dim: usize,
        mut param: impl FnMut(&mut ParamStore, &str, &[usize]) -> Result<ParamId>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let (d_in, d_out) = layer_dims(config, feat_dim, l);
            let prefix = format!("encoder.l{l}");
            let prop = match config.kind {
                EncoderKind::Gat => {
                    let last = l + 1 == config.layers;
                    let d_head = if last { d_out } else { d_out / config.heads };
                    let heads = (0..config.heads)
                        .map(|h| {
                            Ok(GatHead {
                                w: param(store, &format!("{prefix}.h{h}.w"), &[d_in, d_head])?,
                                a_src: param(store, &format!("{prefix}.h{h}.a_src"), &[d_head, 1])?,
                                a_dst: param(store, &format!("{prefix}.h{h}.a_dst"), &[d_head, 1])?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Propagation::Gat { heads, concat: !last }
                }
                EncoderKind::Gcn => Propagation::Gcn {
                    w: param(store, &format!("{prefix}.w"), &[d_in, d_out])?,
                },
            };
            let bias = param(store, &format!("{prefix}.bias"), &[1, d_out])?;
            let (shortcut, identity_residual) = match (config.residual, d_in == d_out) {
                (false, _) => (None, false),
                (true, true) => (None, true),
                (true, false) => {
                    let w = param(store, &format!("{prefix}.shortcut.w"), &[d_in, d_out])?;
                    let lin = Linear {
                        w,
                        b: None,
                        fan_in: d_in,
                        fan_out: d_out,
                    };
                    (Some(lin), false)
                }
            };
            layers.push(Layer {
                prop,
                bias,
                shortcut,
                identity_residual,
            });
        }
        Ok(Self {
            config: config.clone(),
            feat_dim,
            layers,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Every parameter owned by the encoder.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.prop {
                Propagation::Gat { heads, .. } => {
                    for h in heads {
                        out.extend([h.w, h.a_src, h.a_dst]);
                    }
                }
                Propagation::Gcn { w } => out.push(*w),
            }
            out.push(layer.bias);
            out.extend(layer.shortcut.iter().flat_map(Linear::params));
        }
        out
    }

    /// `H` for node features `x` over `ctx`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        x: Var<'t>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != [ctx.n(), self.feat_dim] {
            return Err(Error::Contract(format!(
                "encoder expects features [{}, {}], got {shape:?}",
                ctx.n(),
                self.feat_dim
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let mixed = match &layer.prop {
                Propagation::Gat { heads, concat } => self.gat(tape, store, ctx, h, heads, *concat)?,
                Propagation::Gcn { w } => {
                    let hw = h.matmul(tape.param(store, *w))?;
                    tape.spmm_const(&ctx.adj, Rc::clone(&ctx.norm_weights), hw)?
                }
            };
            let act = mixed.add_row(tape.param(store, layer.bias))?.elu();
            let out = dropout(act, self.config.dropout, mode, rng)?;
            h = if layer.identity_residual {
                out.add(h)?
            } else if let Some(sc) = &layer.shortcut {
                out.add(sc.forward(tape, store, h)?)?
            } else {
                out
            };
        }
        Ok(h)
    }

    fn gat<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        h: Var<'t>,
        heads: &[GatHead],
        concat: bool,
    ) -> Result<Var<'t>> {
        let mut outs = Vec::with_capacity(heads.len());
        for head in heads {
            let wh = h.matmul(tape.param(store, head.w))?;
            let alpha = gat_attention(tape, store, ctx, wh, head, self.config.negative_slope)?;
            outs.push(tape.spmm(&ctx.adj, alpha, wh)?);
        }
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = if concat { acc.concat_cols(o)? } else { acc.add(o)? };
        }
        if !concat && outs.len() > 1 {
            acc = acc.scale(1.0 / outs.len() as f64);
        }
        Ok(acc)
    }

    /// Per-edge attention coefficients of one GAT head of layer `layer`,
    /// aligned with `ctx.adj`'s CSR order.
    pub fn gat_coefficients(
        &self,
        store: &ParamStore,
        ctx: &GraphContext,
        x: &Tensor,
        layer: usize,
        head: usize,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let mut h = tape.constant(x.clone());
        let mut rng = SeededRng::new(0);
        for (l, lay) in self.layers.iter().enumerate() {
            if l == layer {
                let Propagation::Gat { heads, .. } = &lay.prop else {
                    return Err(Error::Contract("gat_coefficients on a GCN encoder".into()));
                };
                let hd = heads
                    .get(head)
                    .ok_or_else(|| Error::Contract(format!("head {head} out of range")))?;
                let wh = h.matmul(tape.param(store, hd.w))?;
                let alpha = gat_attention(&tape, store, ctx, wh, hd, self.config.negative_slope)?;
                return Ok((*alpha.value()).clone());
            }
            let sub = Encoder {
                config: self.config.clone(),
                feat_dim: h.shape()[1],
                layers: vec![lay.clone()],
            };
            h = sub.forward(&tape, store, ctx, h, Mode::Eval, &mut rng)?;
        }
        Err(Error::Contract(format!("layer {layer} out of range")))
    }
}

fn gat_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ctx: &GraphContext,
    wh: Var<'t>,
    head: &GatHead,
    slope: f64,
) -> Result<Var<'t>> {
    let src = wh.matmul(tape.param(store, head.a_src))?;
    let dst = wh.matmul(tape.param(store, head.a_dst))?;
    let logits = tape.edge_gather(&ctx.adj, dst, src)?.leaky_relu(slope);
    tape.edge_softmax(&ctx.adj, logits)
}

/// Convenience wrapper: builds a context, runs the encoder on the dataset's
/// features and returns `H` as a plain tensor.
pub fn encode(
    dataset: &GraphDataset,
    encoder: &Encoder,
    store: &ParamStore,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let ctx = GraphContext::new(&dataset.adjacency);
    let tape = Tape::new();
    let x = tape.constant(dataset.features.clone());
    let h = encoder.forward(&tape, store, &ctx, x, mode, rng)?;
    Ok((*h.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::{gen_sbm, Labels, SbmConfig};
    use crate::numerics::{grad_check_params, ops};

    fn gcn_config(layers: usize, hidden: usize) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::Gcn,
            layers,
            hidden_dim: hidden,
            residual: false,
            ..EncoderConfig::default()
        }
    }

    fn fixture(n: usize, d: usize, seed: u64) -> GraphDataset {
        let mut rng = SeededRng::new(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.bernoulli(0.4) {
                    edges.push((i, j));
                }
            }
        }
        let adj = SparseAdjacency::from_edges_symmetrized(n, edges).unwrap();
        let x = rng.uniform_tensor(n, d, -1.0, 1.0);
        GraphDataset::new(adj, x, Labels::Classes(vec![0; n]), 1).unwrap()
    }

    #[test]
    fn gcn_identity_graph_is_activation() {
        let n = 4;
        let ds = GraphDataset::new(
            SparseAdjacency::empty(n),
            Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![-3.0, 0.0], vec![0.0, 0.1]]),
            Labels::Classes(vec![0; n]),
            1,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &gcn_config(1, 2), 2, &mut SeededRng::new(0)).unwrap();
        *store.get_mut(store.id("encoder.l0.w").unwrap()) = Tensor::eye(2);
        let h = encode(&ds, &enc, &store, Mode::Eval, &mut SeededRng::new(0)).unwrap();
        assert_eq!(h, ds.features.map(ops::elu));
    }

    #[test]
    fn gat_single_neighbor_gets_full_weight() {
        // Node 0 only sees itself once self-loops are added.
        let adj = SparseAdjacency::from_edges_symmetrized(3, [(1, 2)]).unwrap();
        let ds = GraphDataset::new(
            adj,
            SeededRng::new(1).normal_tensor(3, 4, 1.0),
            Labels::Classes(vec![0; 3]),
            1,
        )
        .unwrap();
        let cfg = EncoderConfig {
            layers: 1,
            hidden_dim: 4,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, 4, &mut SeededRng::new(2)).unwrap();
        let ctx = GraphContext::new(&ds.adjacency);
        let alpha = enc.gat_coefficients(&store, &ctx, &ds.features, 0, 0).unwrap();
        let r0 = ctx.adj.row_range(0);
        assert_eq!(r0.len(), 1);
        assert_eq!(alpha.data()[r0.start], 1.0);
        for i in 0..3 {
            let s: f64 = alpha.data()[ctx.adj.row_range(i)].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn dense_gcn_oracle(ds: &GraphDataset, store: &ParamStore, layers: usize) -> Tensor {
        let a = ds.adjacency.with_self_loops().to_dense();
        let n = ds.n();
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
        let norm = Tensor::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt());
        let mut h = ds.features.clone();
        for l in 0..layers {
            let w = store.by_name(&format!("encoder.l{l}.w")).unwrap();
            let b = store.by_name(&format!("encoder.l{l}.bias")).unwrap();
            let mut z = norm.matmul(&h.matmul(w).unwrap()).unwrap();
            for i in 0..n {
                for (v, bb) in z.row_mut(i).iter_mut().zip(b.data()) {
                    *v = ops::elu(*v + bb);
                }
            }
            h = z;
        }
        h
    }

    #[test]
    fn two_layer_gcn_matches_dense_oracle() {
        let ds = fixture(5, 3, 4);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &gcn_config(2, 4), 3, &mut SeededRng::new(5)).unwrap();
        let bias = store.id("encoder.l1.bias").unwrap();
        *store.get_mut(bias) = Tensor::from_rows(&[vec![0.1, -0.2, 0.3, 0.0]]);
        let h = encode(&ds, &enc, &store, Mode::Eval, &mut SeededRng::new(0)).unwrap();
        let oracle = dense_gcn_oracle(&ds, &store, 2);
        let diff = h.zip_map(&oracle, |a, b| a - b).unwrap().max_abs();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = EncoderConfig::default();
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Encoder::init(&mut a, &cfg, 6, &mut SeededRng::new(3)).unwrap();
        Encoder::init(&mut b, &cfg, 6, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        for (_, name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn glorot_variance() {
        let w = glorot_uniform(&mut SeededRng::new(9), 100, 100);
        let mean = w.sum() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 200.0;
        assert!((var / expected - 1.0).abs() < 0.2, "{var}");
    }

    fn permutation_case(kind: EncoderKind, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let n = 5 + rng.below(15);
        let ds = fixture(n, 3, seed);
        let cfg = EncoderConfig {
            kind,
            hidden_dim: 4,
            heads: 2,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, 3, &mut rng).unwrap();
        let perm = rng.permutation(n);
        let h = encode(&ds, &enc, &store, Mode::Eval, &mut rng).unwrap();
        let hp = encode(&ds.permute(&perm), &enc, &store, Mode::Eval, &mut rng).unwrap();
        for i in 0..n {
            for (a, b) in h.row(i).iter().zip(hp.row(perm[i])) {
                assert!((a - b).abs() < 1e-12, "node {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        for seed in 0..10 {
            permutation_case(EncoderKind::Gat, seed);
            permutation_case(EncoderKind::Gcn, seed);
        }
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let ds = gen_sbm(&SbmConfig::new(vec![6, 6], 0.5, 0.1), &mut SeededRng::new(1)).unwrap();
        let cfg = EncoderConfig {
            dropout: 0.5,
            hidden_dim: 8,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg, ds.feat_dim(), &mut SeededRng::new(2)).unwrap();
        let a = encode(&ds, &enc, &store, Mode::Eval, &mut SeededRng::new(3)).unwrap();
        let b = encode(&ds, &enc, &store, Mode::Eval, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bind_rejects_mismatched_shapes() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::default();
        Encoder::init(&mut store, &cfg, 6, &mut SeededRng::new(0)).unwrap();
        assert!(Encoder::bind(&store, &cfg, 6).is_ok());
        assert!(matches!(Encoder::bind(&store, &cfg, 7), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_through_gat_and_gcn() {
        for kind in [EncoderKind::Gat, EncoderKind::Gcn] {
            let ds = fixture(6, 3, 11);
            let ctx = GraphContext::new(&ds.adjacency);
            let cfg = EncoderConfig {
                kind,
                hidden_dim: 4,
                heads: 2,
                ..EncoderConfig::default()
            };
            let mut store = ParamStore::new();
            let enc = Encoder::init(&mut store, &cfg, 3, &mut SeededRng::new(12)).unwrap();
            let report = grad_check_params(
                &store,
                |tape, store| {
                    let x = tape.constant(ds.features.clone());
                    let h = enc.forward(tape, store, &ctx, x, Mode::Eval, &mut SeededRng::new(0))?;
                    Ok(h.square().mean())
                },
                1e-4,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind:?}: {report:?}");
        }
    }
}
