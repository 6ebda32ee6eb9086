//! Graph token list, node-to-token cross-attention, the classifier head and
//! the dense node-attention baseline.

use std::rc::Rc;

use crate::encoder::{Encoder, GraphContext};
use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, ops, Linear, Mode, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::quantizer::{Fusion, Quantizer};

/// Projections `W_F: [m×N_f]` and `W_S: [n×N_s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenListParams {
    pub w_f: ParamId,
    pub w_s: ParamId,
    pub m: usize,
    pub n: usize,
    pub n_f: usize,
    pub n_s: usize,
}

impl TokenListParams {
    pub fn init(store: &mut ParamStore, m: usize, n: usize, n_f: usize, n_s: usize, rng: &mut SeededRng) -> Result<Self> {
        if n_f == 0 || n_s == 0 {
            return Err(Error::Config("token list extents must be positive".into()));
        }
        Ok(Self {
            w_f: store.add("tokens.w_f", glorot_uniform(rng, m, n_f))?,
            w_s: store.add("tokens.w_s", glorot_uniform(rng, n, n_s))?,
            m,
            n,
            n_f,
            n_s,
        })
    }

    pub fn bind(store: &ParamStore, m: usize, n: usize, n_f: usize, n_s: usize) -> Result<Self> {
        Ok(Self {
            w_f: store.expect("tokens.w_f", &[m, n_f])?,
            w_s: store.expect("tokens.w_s", &[n, n_s])?,
            m,
            n,
            n_f,
            n_s,
        })
    }

    pub fn len(&self) -> usize {
        self.n_f * self.n_s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w_f, self.w_s]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GraphTokenListVars<'t> {
    pub f_t: Var<'t>,
    pub s_t: Var<'t>,
    pub g_t: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphTokenList {
    pub f_t: Tensor,
    pub s_t: Tensor,
    pub g_t: Tensor,
}

/// Row `i·N_s + j` of `G_T` fuses `F_T[i]` with `S_T[j]`.
pub fn pair_indices(n_f: usize, n_s: usize) -> (Vec<usize>, Vec<usize>) {
    let f = (0..n_f).flat_map(|i| std::iter::repeat_n(i, n_s)).collect();
    let s = (0..n_f).flat_map(|_| 0..n_s).collect();
    (f, s)
}

/// `F_T = W_Fᵀ·F_C`, `S_T = W_Sᵀ·S_C`, and their pairwise fusion.
pub fn build_token_list_var<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    f_c: Var<'t>,
    s_c: Var<'t>,
    tl: &TokenListParams,
    fusion: &Fusion,
) -> Result<GraphTokenListVars<'t>> {
    let (fs, ss) = (f_c.shape(), s_c.shape());
    if fs.len() != 2 || ss.len() != 2 || fs[1] != ss[1] || fs[0] != tl.m || ss[0] != tl.n {
        return Err(Error::Contract(format!(
            "codebooks {fs:?} / {ss:?} do not match token-list params ({}, {})",
            tl.m, tl.n
        )));
    }
    let f_t = tape.param(store, tl.w_f).transpose().matmul(f_c)?;
    let s_t = tape.param(store, tl.w_s).transpose().matmul(s_c)?;
    let (fi, si) = pair_indices(tl.n_f, tl.n_s);
    let fp = f_t.gather_rows(Rc::new(fi))?;
    let sp = s_t.gather_rows(Rc::new(si))?;
    let g_t = fusion.fuse(tape, store, fp, sp)?;
    Ok(GraphTokenListVars { f_t, s_t, g_t })
}

pub fn build_token_list(store: &ParamStore, quantizer: &Quantizer, tl: &TokenListParams) -> Result<GraphTokenList> {
    let tape = Tape::new();
    let v = build_token_list_var(
        &tape,
        store,
        tape.param(store, quantizer.feature),
        tape.param(store, quantizer.structure),
        tl,
        &quantizer.fusion,
    )?;
    Ok(GraphTokenList {
        f_t: (*v.f_t.value()).clone(),
        s_t: (*v.s_t.value()).clone(),
        g_t: (*v.g_t.value()).clone(),
    })
}

/// `W_Q`, `W_K`, `W_V` (no biases) and the head count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            w_q: store.add(format!("{prefix}.w_q"), glorot_uniform(rng, dim, dim))?,
            w_k: store.add(format!("{prefix}.w_k"), glorot_uniform(rng, dim, dim))?,
            w_v: store.add(format!("{prefix}.w_v"), glorot_uniform(rng, dim, dim))?,
            dim,
            heads,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            w_q: store.expect(&format!("{prefix}.w_q"), &[dim, dim])?,
            w_k: store.expect(&format!("{prefix}.w_k"), &[dim, dim])?,
            w_v: store.expect(&format!("{prefix}.w_v"), &[dim, dim])?,
            dim,
            heads,
        })
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w_q, self.w_k, self.w_v]
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Softmax scale `1/√(d′/heads)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
    }
    Ok(())
}

/// Pre-softmax inputs of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub out: Var<'t>,
}

/// `softmax(Q·Kᵀ/√d)·V + residual` with `Q = queries·W_Q`,
/// `K = keys·W_K`, `V = keys·W_V`, split into heads along the width.
pub fn attention_var<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    queries: Var<'t>,
    keys: Var<'t>,
    params: &AttentionParams,
) -> Result<AttentionVars<'t>> {
    let (qs, ks) = (queries.shape(), keys.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != params.dim || ks[1] != params.dim {
        return Err(Error::Contract(format!(
            "attention inputs {qs:?} / {ks:?} do not have width {}",
            params.dim
        )));
    }
    let q = queries.matmul(tape.param(store, params.w_q))?;
    let k = keys.matmul(tape.param(store, params.w_k))?;
    let v = keys.matmul(tape.param(store, params.w_v))?;
    let dh = params.head_dim();
    let mut out: Option<Var<'t>> = None;
    for h in 0..params.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let head = if params.heads == 1 {
            q.attention(k, v, params.scale())?
        } else {
            q.slice_cols(a, b)?
                .attention(k.slice_cols(a, b)?, v.slice_cols(a, b)?, params.scale())?
        };
        out = Some(match out {
            None => head,
            Some(acc) => acc.concat_cols(head)?,
        });
    }
    let out = out.expect("at least one head").add(queries)?;
    Ok(AttentionVars { q, k, out })
}

/// Post-softmax weights, averaged over heads.
pub fn attention_weights(q: &Tensor, k: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let dh = params.head_dim();
    let mut acc = Tensor::zeros(&[q.rows(), k.rows()]);
    for h in 0..params.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let w = ops::attention_weights(&q.slice_cols(a, b), &k.slice_cols(a, b), params.scale())?;
        acc.add_assign(&w);
    }
    Ok(acc.scale(1.0 / params.heads as f64))
}

/// Cross-attention on plain tensors: returns `(Z, weights)`.
pub fn cross_attention(
    store: &ParamStore,
    g: &Tensor,
    g_t: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let a = attention_var(&tape, store, tape.constant(g.clone()), tape.constant(g_t.clone()), params)?;
    let weights = attention_weights(&a.q.value(), &a.k.value(), params)?;
    Ok(((*a.out.value()).clone(), weights))
}

/// Largest node count accepted by dense node attention. The fused kernel
/// keeps memory linear, so the cap only bounds quadratic run time.
pub const DENSE_ATTENTION_CAP: usize = 16_384;

/// Self-attention over all node pairs, with residual.
pub fn dense_node_attention(store: &ParamStore, h: &Tensor, params: &AttentionParams, cap: usize) -> Result<(Tensor, Tensor)> {
    if h.rows() > cap {
        return Err(Error::Config(format!("dense attention on {} nodes exceeds cap {cap}", h.rows())));
    }
    cross_attention(store, h, h, params)
}

/// What a node-classification model hands to training and diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput<'t> {
    pub logits: Var<'t>,
    pub attention: AttentionVars<'t>,
}

/// Common surface of the graph-token model and the dense baseline.
pub trait NodeClassifier {
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        x: Var<'t>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<ClassifierOutput<'t>>;

    fn attention_params(&self) -> &AttentionParams;

    /// Parameters held fixed during finetuning.
    fn frozen(&self) -> Vec<ParamId> {
        Vec::new()
    }

    fn name(&self) -> &'static str;
}

/// Which stage-1 groups stay fixed during finetuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub codebooks: bool,
    pub fusion: bool,
}

/// Encoder → SoftVQ + fusion → cross-attention over the graph token list
/// → classifier.
#[derive(Clone, Debug)]
pub struct VecFormer {
    pub encoder: Encoder,
    pub quantizer: Quantizer,
    pub tokens: TokenListParams,
    pub attention: AttentionParams,
    pub classifier: Linear,
    pub freeze: FreezeFlags,
}

impl VecFormer {
    /// Adds the stage-two parameters on top of a stage-one store.
    #[allow(clippy::too_many_arguments)]
    pub fn init_head(
        store: &mut ParamStore,
        encoder: Encoder,
        quantizer: Quantizer,
        n_f: usize,
        n_s: usize,
        heads: usize,
        num_classes: usize,
        freeze: FreezeFlags,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let m = store.get(quantizer.feature).rows();
        let n = store.get(quantizer.structure).rows();
        let dim = encoder.out_dim();
        Ok(Self {
            tokens: TokenListParams::init(store, m, n, n_f, n_s, rng)?,
            attention: AttentionParams::init(store, "attn", dim, heads, rng)?,
            classifier: Linear::init(store, "classifier", dim, num_classes, true, rng)?,
            encoder,
            quantizer,
            freeze,
        })
    }

    pub fn graph_tokens(&self, store: &ParamStore) -> Result<GraphTokenList> {
        build_token_list(store, &self.quantizer, &self.tokens)
    }
}

impl NodeClassifier for VecFormer {
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        x: Var<'t>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<ClassifierOutput<'t>> {
        let h = self.encoder.forward(tape, store, ctx, x, mode, rng)?;
        let bundle = self.quantizer.quantize(tape, store, h)?;
        let list = build_token_list_var(
            tape,
            store,
            tape.param(store, self.quantizer.feature),
            tape.param(store, self.quantizer.structure),
            &self.tokens,
            &self.quantizer.fusion,
        )?;
        let attention = attention_var(tape, store, bundle.g, list.g_t, &self.attention)?;
        let logits = self.classifier.forward(tape, store, attention.out)?;
        Ok(ClassifierOutput { logits, attention })
    }

    fn attention_params(&self) -> &AttentionParams {
        &self.attention
    }

    fn frozen(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if self.freeze.encoder {
            out.extend(self.encoder.params());
        }
        if self.freeze.codebooks {
            out.extend([self.quantizer.feature, self.quantizer.structure]);
        }
        if self.freeze.fusion {
            out.extend(self.quantizer.fusion.params());
        }
        out
    }

    fn name(&self) -> &'static str {
        "graph_token"
    }
}

/// Plain transformer over nodes: linear input projection, dense
/// self-attention with residual, classifier. It sees no edges.
#[derive(Clone, Debug)]
pub struct DenseBaseline {
    pub input: Linear,
    pub attention: AttentionParams,
    pub classifier: Linear,
    pub dropout: f64,
    pub cap: usize,
}

impl DenseBaseline {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        feat_dim: usize,
        hidden: usize,
        heads: usize,
        num_classes: usize,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            input: Linear::init(store, "baseline.input", feat_dim, hidden, true, rng)?,
            attention: AttentionParams::init(store, "baseline.attn", hidden, heads, rng)?,
            classifier: Linear::init(store, "baseline.classifier", hidden, num_classes, true, rng)?,
            dropout,
            cap: DENSE_ATTENTION_CAP,
        })
    }
}

impl NodeClassifier for DenseBaseline {
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        _ctx: &GraphContext,
        x: Var<'t>,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<ClassifierOutput<'t>> {
        let n = x.shape()[0];
        if n > self.cap {
            return Err(Error::Config(format!("dense attention on {n} nodes exceeds cap {}", self.cap)));
        }
        let h = self.input.forward(tape, store, x)?.elu();
        let h = crate::numerics::dropout(h, self.dropout, mode, rng)?;
        let attention = attention_var(tape, store, h, h, &self.attention)?;
        let logits = self.classifier.forward(tape, store, attention.out)?;
        Ok(ClassifierOutput { logits, attention })
    }

    fn attention_params(&self) -> &AttentionParams {
        &self.attention
    }

    fn name(&self) -> &'static str {
        "dense_node"
    }
}

/// Logits on plain tensors.
pub fn classify(store: &ParamStore, z: &Tensor, classifier: &Linear) -> Result<Tensor> {
    let tape = Tape::new();
    let logits = classifier.forward(&tape, store, tape.constant(z.clone()))?;
    Ok((*logits.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::{grad_check_params, row_softmax};
    use crate::quantizer::SoftVqConfig;

    fn quantizer_store(m: usize, n: usize, dim: usize, seed: u64) -> (ParamStore, Quantizer) {
        let mut store = ParamStore::new();
        let q = Quantizer::init(&mut store, m, n, dim, SoftVqConfig::default(), false, &mut SeededRng::new(seed)).unwrap();
        (store, q)
    }

    #[test]
    fn identity_projection_returns_codebook() {
        let (mut store, q) = quantizer_store(6, 5, 4, 0);
        let tl = TokenListParams::init(&mut store, 6, 5, 6, 5, &mut SeededRng::new(1)).unwrap();
        *store.get_mut(tl.w_f) = Tensor::eye(6);
        *store.get_mut(tl.w_s) = Tensor::eye(5);
        let list = build_token_list(&store, &q, &tl).unwrap();
        assert_eq!(&list.f_t, store.get(q.feature));
        assert_eq!(&list.s_t, store.get(q.structure));
    }

    #[test]
    fn token_list_sizes() {
        for (n_f, n_s) in [(2, 2), (4, 4), (8, 8), (16, 16), (64, 64)] {
            let (mut store, q) = quantizer_store(64, 64, 8, 2);
            let tl = TokenListParams::init(&mut store, 64, 64, n_f, n_s, &mut SeededRng::new(3)).unwrap();
            let list = build_token_list(&store, &q, &tl).unwrap();
            assert_eq!(list.g_t.rows(), n_f * n_s);
        }
    }

    #[test]
    fn token_list_order_is_feature_major() {
        let (mut store, q) = quantizer_store(4, 3, 3, 4);
        let tl = TokenListParams::init(&mut store, 4, 3, 2, 3, &mut SeededRng::new(5)).unwrap();
        let list = build_token_list(&store, &q, &tl).unwrap();
        let tape = Tape::new();
        for i in 0..2 {
            for j in 0..3 {
                let f = tape.constant(Tensor::from_rows(&[list.f_t.row(i).to_vec()]));
                let s = tape.constant(Tensor::from_rows(&[list.s_t.row(j).to_vec()]));
                let g = q.fusion.fuse(&tape, &store, f, s).unwrap();
                assert_eq!(g.value().row(0), list.g_t.row(i * 3 + j));
            }
        }
    }

    fn attn_store(dim: usize, heads: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let a = AttentionParams::init(&mut store, "attn", dim, heads, &mut SeededRng::new(seed)).unwrap();
        (store, a)
    }

    #[test]
    fn singleton_key_broadcasts_value() {
        let (store, a) = attn_store(3, 1, 6);
        let mut rng = SeededRng::new(7);
        let g = rng.normal_tensor(4, 3, 1.0);
        let gt = rng.normal_tensor(1, 3, 1.0);
        let (z, w) = cross_attention(&store, &g, &gt, &a).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let v = gt.matmul(store.get(a.w_v)).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((z.get(i, c) - v.get(0, c) - g.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_values_pass_residual_through() {
        let (mut store, a) = attn_store(3, 1, 8);
        *store.get_mut(a.w_v) = Tensor::zeros(&[3, 3]);
        let mut rng = SeededRng::new(9);
        let g = rng.normal_tensor(5, 3, 1.0);
        let (z, _) = cross_attention(&store, &g, &rng.normal_tensor(4, 3, 1.0), &a).unwrap();
        assert_eq!(z, g);
    }

    fn loop_oracle(store: &ParamStore, a: &AttentionParams, g: &Tensor, gt: &Tensor) -> Tensor {
        let q = g.matmul(store.get(a.w_q)).unwrap();
        let k = gt.matmul(store.get(a.w_k)).unwrap();
        let v = gt.matmul(store.get(a.w_v)).unwrap();
        let d = a.dim as f64;
        let mut out = g.clone();
        for i in 0..g.rows() {
            let scores: Vec<f64> = (0..gt.rows())
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(x, y)| x * y).sum::<f64>() / d.sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..a.dim {
                let acc: f64 = (0..gt.rows()).map(|j| e[j] / z * v.get(j, c)).sum();
                out.set(i, c, out.get(i, c) + acc);
            }
        }
        out
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        let (store, a) = attn_store(4, 1, 10);
        let mut rng = SeededRng::new(11);
        let g = rng.normal_tensor(3, 4, 1.0);
        let gt = rng.normal_tensor(4, 4, 1.0);
        let (z, w) = cross_attention(&store, &g, &gt, &a).unwrap();
        let diff = z.zip_map(&loop_oracle(&store, &a, &g, &gt), |x, y| x - y).unwrap().max_abs();
        assert!(diff < 1e-10);
        for i in 0..3 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn dense_attention_cases() {
        let (store, a) = attn_store(3, 1, 12);
        let h1 = Tensor::from_rows(&[vec![0.3, -0.2, 1.0]]);
        let (z, w) = dense_node_attention(&store, &h1, &a, DENSE_ATTENTION_CAP).unwrap();
        assert_eq!(w.data(), &[1.0]);
        let v = h1.matmul(store.get(a.w_v)).unwrap();
        for c in 0..3 {
            assert!((z.get(0, c) - v.get(0, c) - h1.get(0, c)).abs() < 1e-12);
        }

        let same = Tensor::from_fn(4, 3, |_, c| c as f64 * 0.5);
        let (_, w) = dense_node_attention(&store, &same, &a, DENSE_ATTENTION_CAP).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let h5 = SeededRng::new(13).normal_tensor(5, 3, 1.0);
        let (z, _) = dense_node_attention(&store, &h5, &a, DENSE_ATTENTION_CAP).unwrap();
        let diff = z.zip_map(&loop_oracle(&store, &a, &h5, &h5), |x, y| x - y).unwrap().max_abs();
        assert!(diff < 1e-10);

        assert!(matches!(dense_node_attention(&store, &h5, &a, 4), Err(Error::Config(_))));
    }

    #[test]
    fn classifier_cases() {
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "classifier", 3, 4, true, &mut SeededRng::new(0)).unwrap();
        *store.get_mut(lin.w) = Tensor::zeros(&[3, 4]);
        let logits = classify(&store, &SeededRng::new(1).normal_tensor(2, 3, 1.0), &lin).unwrap();
        let p = row_softmax(&logits, 1.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let logits = Tensor::from_rows(&[
            vec![2.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![-1.0, 1.0],
        ]);
        let targets = [0usize, 1, 1, 0];
        let tape = Tape::new();
        let ce = tape
            .constant(logits.clone())
            .cross_entropy(Rc::new(vec![0, 1, 2, 3]), Rc::new(targets.to_vec()))
            .unwrap()
            .item();
        let oracle = (0..4)
            .map(|i| {
                let r = logits.row(i);
                (r[0].exp() + r[1].exp()).ln() - r[targets[i]]
            })
            .sum::<f64>()
            / 4.0;
        assert!((ce - oracle).abs() < 1e-12);
        assert_eq!(logits.row_argmax(0), 0);
        assert_eq!(logits.row_argmax(3), 1);
    }

    #[test]
    fn multi_head_rows_are_stochastic() {
        let (store, a) = attn_store(6, 3, 14);
        let mut rng = SeededRng::new(15);
        let (_, w) = cross_attention(&store, &rng.normal_tensor(4, 6, 1.0), &rng.normal_tensor(5, 6, 1.0), &a).unwrap();
        for i in 0..4 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_through_token_list_attention_and_classifier() {
        let mut rng = SeededRng::new(16);
        let (mut store, q) = quantizer_store(4, 3, 4, 17);
        let tl = TokenListParams::init(&mut store, 4, 3, 2, 2, &mut rng).unwrap();
        let a = AttentionParams::init(&mut store, "attn", 4, 2, &mut rng).unwrap();
        let cls = Linear::init(&mut store, "classifier", 4, 3, true, &mut rng).unwrap();
        let g = rng.uniform_tensor(5, 4, -1.0, 1.0);
        let report = grad_check_params(
            &store,
            |tape, store| {
                let list = build_token_list_var(
                    tape,
                    store,
                    tape.param(store, q.feature),
                    tape.param(store, q.structure),
                    &tl,
                    &q.fusion,
                )?;
                let z = attention_var(tape, store, tape.constant(g.clone()), list.g_t, &a)?.out;
                cls.forward(tape, store, z)?
                    .cross_entropy(Rc::new(vec![0, 1, 2, 3, 4]), Rc::new(vec![0, 1, 2, 0, 1]))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn full_model_has_one_attention_layer() {
        let mut rng = SeededRng::new(18);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &EncoderConfig { hidden_dim: 4, ..EncoderConfig::default() }, 3, &mut rng).unwrap();
        let q = Quantizer::init(&mut store, 4, 4, 4, SoftVqConfig::default(), false, &mut rng).unwrap();
        VecFormer::init_head(&mut store, enc, q, 2, 2, 1, 2, FreezeFlags::default(), &mut rng).unwrap();
        let layers = store.iter().filter(|(_, name, _)| name.ends_with(".w_q")).count();
        assert_eq!(layers, 1);
    }
}
