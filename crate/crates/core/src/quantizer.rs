//! Codebooks, SoftVQ, the vanilla VQ baseline and token fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookRole {
    Feature,
    Structure,
}

impl CodebookRole {
    pub fn param_name(self) -> &'static str {
        match self {
            CodebookRole::Feature => "codebook.feature",
            CodebookRole::Structure => "codebook.structure",
        }
    }
}

/// Code vectors, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codes: Tensor,
    pub role: CodebookRole,
}

impl Codebook {
    pub fn new(codes: Tensor, role: CodebookRole) -> Result<Self> {
        if codes.shape().len() != 2 || codes.rows() == 0 {
            return Err(Error::Contract(format!("codebook needs ≥1 row, got {:?}", codes.shape())));
        }
        if let Some(index) = codes.first_non_finite() {
            return Err(Error::Numeric {
                index,
                detail: "non-finite code".into(),
            });
        }
        Ok(Self { codes, role })
    }

    /// Unit-Gaussian codes scaled by `1/√dim`.
    pub fn init(size: usize, dim: usize, role: CodebookRole, rng: &mut SeededRng) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook size and width must be positive".into()));
        }
        Self::new(rng.normal_tensor(size, dim, 1.0 / (dim as f64).sqrt()), role)
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftVqConfig {
    pub temperature: f64,
}

impl Default for SoftVqConfig {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

fn check_width(op: &'static str, h: &[usize], codes: &[usize]) -> Result<()> {
    if h.len() != 2 || codes.len() != 2 || h[1] != codes[1] {
        return Err(Error::Contract(format!("{op}: input {h:?} and codes {codes:?} differ in width")));
    }
    Ok(())
}

/// Tape version of SoftVQ: returns `(tokens, weights)` with
/// `weights = softmax(h·Eᵀ / T)` and `tokens = weights·E`.
pub fn softvq_var<'t>(h: Var<'t>, codes: Var<'t>, temperature: f64) -> Result<(Var<'t>, Var<'t>)> {
    check_width("softvq", &h.shape(), &codes.shape())?;
    let weights = h.matmul_nt(codes)?.row_softmax(temperature)?;
    let tokens = weights.matmul(codes)?;
    Ok((tokens, weights))
}

/// SoftVQ on plain tensors.
pub fn softvq(h: &Tensor, codebook: &Codebook, cfg: &SoftVqConfig) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (t, w) = softvq_var(
        tape.constant(h.clone()),
        tape.constant(codebook.codes.clone()),
        cfg.temperature,
    )?;
    Ok(((*t.value()).clone(), (*w.value()).clone()))
}

/// Nearest code by Euclidean distance, ties to the lowest index.
pub fn nearest_codes(h: &Tensor, codes: &Tensor) -> Result<Vec<usize>> {
    check_width("vanilla_vq", h.shape(), codes.shape())?;
    Ok((0..h.rows())
        .map(|i| {
            let dists: Vec<f64> = (0..codes.rows())
                .map(|j| {
                    h.row(i)
                        .iter()
                        .zip(codes.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            argmax(&dists.iter().map(|d| -d).collect::<Vec<_>>())
        })
        .collect())
}

/// Vanilla VQ: hard nearest-code selection.
pub fn vanilla_vq(h: &Tensor, codebook: &Codebook) -> Result<(Tensor, Vec<usize>)> {
    let idx = nearest_codes(h, &codebook.codes)?;
    Ok((codebook.codes.select_rows(&idx), idx))
}

/// Tape version of vanilla VQ. The forward value is the selected code; the
/// gradient reaches `h` unchanged (straight-through). Returns
/// `(tokens, selected codes, indices)`, the selected codes being what the
/// codebook term of [`vq_loss`] differentiates.
pub fn vanilla_vq_var<'t>(h: Var<'t>, codes: Var<'t>) -> Result<(Var<'t>, Var<'t>, Vec<usize>)> {
    let idx = nearest_codes(&h.value(), &codes.value())?;
    let selected = codes.gather_rows(std::rc::Rc::new(idx.clone()))?;
    let tokens = h.add(selected.sub(h)?.detach())?;
    Ok((tokens, selected, idx))
}

/// `‖x − decoded‖² + ‖sg(encoded) − code‖² + η‖sg(code) − encoded‖²`.
pub fn vq_loss<'t>(x: Var<'t>, decoded: Var<'t>, encoded: Var<'t>, code: Var<'t>, eta: f64) -> Result<Var<'t>> {
    if eta < 0.0 {
        return Err(Error::Config(format!("commitment weight {eta} must be nonnegative")));
    }
    let recon = x.sub(decoded)?.square().sum();
    let codebook = encoded.detach().sub(code)?.square().sum();
    let commit = code.detach().sub(encoded)?.square().sum().scale(eta);
    recon.add(codebook)?.add(commit)
}

/// Linear map `ℝ^{2d′} → ℝ²` producing the per-node fusion coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fusion {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
    /// Pass `(α₁, α₂)` through a two-way softmax.
    pub normalized: bool,
}

pub const FUSION_W: &str = "fusion.w";
pub const FUSION_B: &str = "fusion.b";

impl Fusion {
    /// Small random weights and bias `(0.5, 0.5)`, so fusion starts near the
    /// token average.
    pub fn init(store: &mut ParamStore, dim: usize, normalized: bool, rng: &mut SeededRng) -> Result<Self> {
        let w = store.add(FUSION_W, rng.normal_tensor(2 * dim, 2, 0.01))?;
        let b = store.add(FUSION_B, Tensor::from_rows(&[vec![0.5, 0.5]]))?;
        Ok(Self { w, b, dim, normalized })
    }

    pub fn bind(store: &ParamStore, dim: usize, normalized: bool) -> Result<Self> {
        Ok(Self {
            w: store.expect(FUSION_W, &[2 * dim, 2])?,
            b: store.expect(FUSION_B, &[1, 2])?,
            dim,
            normalized,
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Per-row `(α₁, α₂)` as an `[r×2]` value.
    pub fn alphas<'t>(&self, tape: &'t Tape, store: &ParamStore, f: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        let raw = f
            .concat_cols(s)?
            .matmul(tape.param(store, self.w))?
            .add_row(tape.param(store, self.b))?;
        if self.normalized {
            raw.row_softmax(1.0)
        } else {
            Ok(raw)
        }
    }

    /// `g = α₁·f + α₂·s` row by row.
    pub fn fuse<'t>(&self, tape: &'t Tape, store: &ParamStore, f: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        if f.shape() != s.shape() {
            return Err(Error::Contract(format!(
                "fusion inputs differ: {:?} vs {:?}",
                f.shape(),
                s.shape()
            )));
        }
        let a = self.alphas(tape, store, f, s)?;
        f.mul_col(a.slice_cols(0, 1)?)?.add(s.mul_col(a.slice_cols(1, 2)?)?)
    }
}

/// Per-node quantization output.
#[derive(Clone, Copy, Debug)]
pub struct TokenBundleVars<'t> {
    pub f: Var<'t>,
    pub s: Var<'t>,
    pub g: Var<'t>,
    pub feature_weights: Var<'t>,
    pub structure_weights: Var<'t>,
}

/// Plain-tensor copy of [`TokenBundleVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBundle {
    pub f: Tensor,
    pub s: Tensor,
    pub g: Tensor,
    pub feature_weights: Tensor,
    pub structure_weights: Tensor,
}

impl TokenBundleVars<'_> {
    pub fn to_tensors(&self) -> TokenBundle {
        TokenBundle {
            f: (*self.f.value()).clone(),
            s: (*self.s.value()).clone(),
            g: (*self.g.value()).clone(),
            feature_weights: (*self.feature_weights.value()).clone(),
            structure_weights: (*self.structure_weights.value()).clone(),
        }
    }
}

/// Both codebooks and the fusion map, as stored parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    pub feature: ParamId,
    pub structure: ParamId,
    pub fusion: Fusion,
    pub config: SoftVqConfig,
}

impl Quantizer {
    pub fn init(
        store: &mut ParamStore,
        m: usize,
        n: usize,
        dim: usize,
        config: SoftVqConfig,
        normalized_fusion: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        check_temperature(config.temperature)?;
        let fc = Codebook::init(m, dim, CodebookRole::Feature, rng)?;
        let sc = Codebook::init(n, dim, CodebookRole::Structure, rng)?;
        let feature = store.add(CodebookRole::Feature.param_name(), fc.codes)?;
        let structure = store.add(CodebookRole::Structure.param_name(), sc.codes)?;
        let fusion = Fusion::init(store, dim, normalized_fusion, rng)?;
        Ok(Self {
            feature,
            structure,
            fusion,
            config,
        })
    }

    pub fn bind(
        store: &ParamStore,
        m: usize,
        n: usize,
        dim: usize,
        config: SoftVqConfig,
        normalized_fusion: bool,
    ) -> Result<Self> {
        check_temperature(config.temperature)?;
        Ok(Self {
            feature: store.expect(CodebookRole::Feature.param_name(), &[m, dim])?,
            structure: store.expect(CodebookRole::Structure.param_name(), &[n, dim])?,
            fusion: Fusion::bind(store, dim, normalized_fusion)?,
            config,
        })
    }

    pub fn codebook(&self, store: &ParamStore, role: CodebookRole) -> Codebook {
        let id = match role {
            CodebookRole::Feature => self.feature,
            CodebookRole::Structure => self.structure,
        };
        Codebook {
            codes: store.get(id).clone(),
            role,
        }
    }

    /// `f`, `s` by SoftVQ against each codebook, fused into `g`.
    pub fn quantize<'t>(&self, tape: &'t Tape, store: &ParamStore, h: Var<'t>) -> Result<TokenBundleVars<'t>> {
        let t = self.config.temperature;
        let (f, feature_weights) = softvq_var(h, tape.param(store, self.feature), t)?;
        let (s, structure_weights) = softvq_var(h, tape.param(store, self.structure), t)?;
        let g = self.fusion.fuse(tape, store, f, s)?;
        Ok(TokenBundleVars {
            f,
            s,
            g,
            feature_weights,
            structure_weights,
        })
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("temperature {t} must be positive")));
    }
    Ok(())
}

/// Per-node quantization on plain tensors: SoftVQ against both codebooks
/// followed by fusion with the parameters in `store`.
pub fn quantize_node(h: &Tensor, quantizer: &Quantizer, store: &ParamStore) -> Result<TokenBundle> {
    let tape = Tape::new();
    let bundle = quantizer.quantize(&tape, store, tape.constant(h.clone()))?;
    Ok(bundle.to_tensors())
}

/// Entropy of the mean code-usage distribution (column means of the
/// weights), in nats.
pub fn usage_entropy(weights: &Tensor) -> f64 {
    let (n, m) = weights.dims2();
    (0..m)
        .map(|j| (0..n).map(|i| weights.get(i, j)).sum::<f64>() / n as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_params};
    use proptest::prelude::*;

    fn book(codes: Tensor) -> Codebook {
        Codebook::new(codes, CodebookRole::Feature).unwrap()
    }

    #[test]
    fn singleton_codebook() {
        let cb = book(Tensor::from_rows(&[vec![0.3, -1.0]]));
        let h = SeededRng::new(0).normal_tensor(4, 2, 1.0);
        let (t, w) = softvq(&h, &cb, &SoftVqConfig::default()).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        for i in 0..4 {
            assert_eq!(t.row(i), cb.codes.row(0));
        }
    }

    #[test]
    fn orthogonal_input_gives_uniform_weights() {
        let cb = book(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]));
        let h = Tensor::from_rows(&[vec![0.0, 0.0, 5.0]]);
        let (_, w) = softvq(&h, &cb, &SoftVqConfig::default()).unwrap();
        assert_eq!(w.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let cb = book(Tensor::ones(&[2, 3]));
        let h = Tensor::ones(&[1, 2]);
        assert!(matches!(softvq(&h, &cb, &SoftVqConfig::default()), Err(Error::Contract(_))));
        assert!(matches!(vanilla_vq(&h, &cb), Err(Error::Contract(_))));
    }

    #[test]
    fn low_temperature_selects_dot_product_argmax() {
        let mut rng = SeededRng::new(3);
        let cb = book(rng.normal_tensor(8, 5, 1.0));
        let h = rng.normal_tensor(20, 5, 1.0);
        let (t, _) = softvq(&h, &cb, &SoftVqConfig { temperature: 1e-4 }).unwrap();
        let scores = h.matmul_nt(&cb.codes).unwrap();
        for i in 0..20 {
            let k = scores.row_argmax(i);
            for (a, b) in t.row(i).iter().zip(cb.codes.row(k)) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn vanilla_vq_cases() {
        let cb = book(Tensor::from_rows(&[vec![0.9, 0.1], vec![-1.0, 0.0]]));
        let (_, idx) = vanilla_vq(&Tensor::from_rows(&[vec![1.0, 0.0]]), &cb).unwrap();
        assert_eq!(idx, vec![0]);
        let (t, idx) = vanilla_vq(&Tensor::from_rows(&[vec![-1.0, 0.0]]), &cb).unwrap();
        assert_eq!((idx[0], t.row(0)), (1, cb.codes.row(1)));
        let tie = book(Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]));
        let (_, idx) = vanilla_vq(&Tensor::from_rows(&[vec![0.0, 1.0]]), &tie).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let tape = Tape::new();
        let h = tape.input(Tensor::from_rows(&[vec![0.2, 0.1]]));
        let codes = tape.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let (tokens, _, idx) = vanilla_vq_var(h, codes).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(tokens.value().row(0), &[1.0, 0.0]);
        let g = tape.backward(tokens.scale(3.0).sum()).unwrap();
        assert_eq!(g.wrt(h).unwrap().data(), &[3.0, 3.0]);
        assert!(g.wrt(codes).is_none_or(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn vq_loss_terms() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor(1, 3, 1.0);
        let dec = rng.normal_tensor(1, 3, 1.0);
        let enc = rng.normal_tensor(1, 3, 1.0);
        let code = rng.normal_tensor(1, 3, 1.0);
        let eta = 0.25;
        let tape = Tape::new();
        let [xv, dv, ev, cv] = [&x, &dec, &enc, &code].map(|t| tape.input(t.clone()));
        let loss = vq_loss(xv, dv, ev, cv, eta).unwrap().item();
        let sq = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        let oracle = sq(&x, &dec) + sq(&enc, &code) + eta * sq(&code, &enc);
        assert!((loss - oracle).abs() < 1e-12);

        let tape = Tape::new();
        let [xv, ev] = [&x, &enc].map(|t| tape.input(t.clone()));
        let zero = vq_loss(xv, xv, ev, ev, 0.0).unwrap();
        assert_eq!(zero.item(), 0.0);

        // With η = 0 the encoded value only receives gradient from nowhere.
        let tape = Tape::new();
        let [xv, dv, ev, cv] = [&x, &dec, &enc, &code].map(|t| tape.input(t.clone()));
        let g = tape.backward(vq_loss(xv, dv, ev, cv, 0.0).unwrap()).unwrap();
        assert!(g.wrt(ev).is_none_or(|t| t.max_abs() == 0.0));
    }

    fn fusion_store(dim: usize, bias: [f64; 2]) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let fusion = Fusion::init(&mut store, dim, false, &mut SeededRng::new(0)).unwrap();
        *store.get_mut(fusion.w) = Tensor::zeros(&[2 * dim, 2]);
        *store.get_mut(fusion.b) = Tensor::from_rows(&[bias.to_vec()]);
        (store, fusion)
    }

    #[test]
    fn fusion_projection_cases() {
        let mut rng = SeededRng::new(5);
        let f = rng.normal_tensor(4, 3, 1.0);
        let s = rng.normal_tensor(4, 3, 1.0);
        let (store, fusion) = fusion_store(3, [1.0, 0.0]);
        let tape = Tape::new();
        let g = fusion.fuse(&tape, &store, tape.constant(f.clone()), tape.constant(s.clone())).unwrap();
        assert_eq!(*g.value(), f);

        let (store, fusion) = fusion_store(3, [0.5, 0.5]);
        let tape = Tape::new();
        let g = fusion.fuse(&tape, &store, tape.constant(f.clone()), tape.constant(f.clone())).unwrap();
        assert_eq!(*g.value(), f);
    }

    #[test]
    fn fusion_matches_recomposition() {
        let mut rng = SeededRng::new(6);
        let mut store = ParamStore::new();
        let q = Quantizer::init(&mut store, 5, 4, 3, SoftVqConfig::default(), false, &mut rng).unwrap();
        *store.get_mut(q.fusion.w) = rng.normal_tensor(6, 2, 1.0);
        let h = rng.normal_tensor(7, 3, 1.0);
        let b = quantize_node(&h, &q, &store).unwrap();
        let w = store.get(q.fusion.w);
        let bias = store.get(q.fusion.b);
        for i in 0..7 {
            let cat: Vec<f64> = b.f.row(i).iter().chain(b.s.row(i)).copied().collect();
            let a: Vec<f64> = (0..2)
                .map(|k| bias.get(0, k) + cat.iter().enumerate().map(|(r, v)| v * w.get(r, k)).sum::<f64>())
                .collect();
            for c in 0..3 {
                let expect = a[0] * b.f.get(i, c) + a[1] * b.s.get(i, c);
                assert!((b.g.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn codebook_init_is_seeded() {
        let a = Codebook::init(64, 16, CodebookRole::Feature, &mut SeededRng::new(1)).unwrap();
        let b = Codebook::init(64, 16, CodebookRole::Feature, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size(), 64);
    }

    #[test]
    fn softvq_usage_entropy_is_high() {
        let mut rng = SeededRng::new(7);
        for size in [8, 32, 64] {
            let cb = Codebook::init(size, 16, CodebookRole::Feature, &mut rng).unwrap();
            let h = rng.normal_tensor(200, 16, 1.0);
            let (_, w) = softvq(&h, &cb, &SoftVqConfig::default()).unwrap();
            assert!(usage_entropy(&w) > (size as f64).ln() / 2.0);
        }
    }

    #[test]
    fn gradients_through_softvq_and_fusion() {
        let mut rng = SeededRng::new(8);
        let mut store = ParamStore::new();
        let q = Quantizer::init(&mut store, 4, 3, 3, SoftVqConfig { temperature: 0.7 }, false, &mut rng).unwrap();
        let h = rng.uniform_tensor(5, 3, -1.0, 1.0);
        let report = grad_check_params(
            &store,
            |tape, store| {
                let b = q.quantize(tape, store, tape.constant(h.clone()))?;
                Ok(b.g.square().sum())
            },
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let err = grad_check(
            |tape, h| Ok(q.quantize(tape, &store, h)?.g.square().sum()),
            &h,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    proptest! {
        #[test]
        fn softvq_rows_are_convex_combinations(
            seed in any::<u64>(),
            size in 1usize..20,
            t in 0.05f64..5.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let cb = Codebook::init(size, 4, CodebookRole::Structure, &mut rng).unwrap();
            let h = rng.normal_tensor(6, 4, 3.0);
            let (tokens, w) = softvq(&h, &cb, &SoftVqConfig { temperature: t }).unwrap();
            for i in 0..6 {
                let row = w.row(i);
                prop_assert!(row.iter().all(|&v| v > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    let comb: f64 = (0..size).map(|j| row[j] * cb.codes.get(j, c)).sum();
                    prop_assert!((comb - tokens.get(i, c)).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn vanilla_vq_matches_exhaustive_search(seed in any::<u64>(), size in 1usize..=64) {
            let mut rng = SeededRng::new(seed);
            let cb = Codebook::init(size, 3, CodebookRole::Feature, &mut rng).unwrap();
            let h = rng.normal_tensor(5, 3, 1.0);
            let (_, idx) = vanilla_vq(&h, &cb).unwrap();
            for i in 0..5 {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..size {
                    let d: f64 = (0..3).map(|c| (h.get(i, c) - cb.codes.get(j, c)).powi(2)).sum();
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                prop_assert_eq!(idx[i], best);
            }
        }
    }
}
