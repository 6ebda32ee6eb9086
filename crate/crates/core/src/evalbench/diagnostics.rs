use serde::{Deserialize, Serialize};

use crate::encoder::GraphContext;
use crate::error::{Error, Result};
use crate::evalbench::metrics::{accuracy, SplitTag};
use crate::graphio::{GraphDataset, Split};
use crate::numerics::{ParamStore, Tensor};
use crate::tokenformer::{attention_weights, NodeClassifier, VecFormer};
use crate::trainer::{inspect, predict, train_baseline, train_stage1, train_stage2, TrainConfig};

/// Row-sum tolerance for accepting attention weights.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnDiagnostics {
    /// Population standard deviation of each weight row.
    pub row_std: Vec<f64>,
    pub mean_std: f64,
    /// Smallest unscaled `q·k` over all query/key pairs.
    pub min_qk: f64,
    /// Mean `KL(w_i ‖ uniform)`.
    pub mean_kl: f64,
}

/// Statistics of a row-stochastic weight matrix and the raw scores behind it.
pub fn attn_diagnostics(weights: &Tensor, q: &Tensor, k: &Tensor) -> Result<AttnDiagnostics> {
    let (n, m) = weights.dims2();
    if n == 0 || m == 0 {
        return Err(Error::Contract("empty attention matrix".into()));
    }
    if q.rows() != n || k.rows() != m || q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attn_diagnostics",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let log_m = (m as f64).ln();
    let mut row_std = Vec::with_capacity(n);
    let mut kl_sum = 0.0;
    for i in 0..n {
        let row = weights.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Contract(format!("attention row {i} is not stochastic (sum {sum})")));
        }
        let mean = sum / m as f64;
        let var = row.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / m as f64;
        row_std.push(var.sqrt());
        kl_sum += row.iter().filter(|&&w| w > 0.0).map(|w| w * (w.ln() + log_m)).sum::<f64>().max(0.0);
    }
    let mut min_qk = f64::INFINITY;
    for i in 0..n {
        for j in 0..m {
            let s: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            min_qk = min_qk.min(s);
        }
    }
    Ok(AttnDiagnostics {
        mean_std: row_std.iter().sum::<f64>() / n as f64,
        row_std,
        min_qk,
        mean_kl: kl_sum / n as f64,
    })
}

/// Diagnostics of a trained model's attention, restricted to `rows`.
pub fn model_diagnostics<M: NodeClassifier>(
    model: &M,
    store: &ParamStore,
    ds: &GraphDataset,
    rows: &[usize],
) -> Result<AttnDiagnostics> {
    if rows.is_empty() {
        return Err(Error::Contract("diagnostics need at least one node".into()));
    }
    let ctx = GraphContext::new(&ds.adjacency);
    let params = *model.attention_params();
    inspect(model, store, &ctx, ds, |out| {
        let q = out.attention.q.value().select_rows(rows);
        let k = out.attention.k.value();
        let w = attention_weights(&q, &k, &params)?;
        attn_diagnostics(&w, &q, &k)
    })
}

/// Rewrites a graph-token store so every pre-softmax score is a sum of
/// nonnegative terms:
///
/// - feature and structure codes are jointly Gram-Schmidt orthonormalized
///   (needs `m + n ≤ d′`),
/// - `W_F`, `W_S` take absolute values,
/// - fusion coefficients pass through the two-way softmax,
/// - `W_Q = W_K = I`.
///
/// Then `q·k = α₁β₁ Σ_a p_a W_F[a,i] + α₂β₂ Σ_b r_b W_S[b,j]` with SoftVQ
/// weights `p`, `r > 0`, which is strictly positive.
pub fn positivity_mode(store: &mut ParamStore, model: &VecFormer) -> Result<VecFormer> {
    let f = store.get(model.quantizer.feature).clone();
    let s = store.get(model.quantizer.structure).clone();
    let (m, d) = f.dims2();
    let n = s.rows();
    if m + n > d {
        return Err(Error::Config(format!(
            "joint orthogonalization needs m + n ≤ width, got {m} + {n} > {d}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + n);
    for row in (0..m).map(|i| f.row(i)).chain((0..n).map(|i| s.row(i))) {
        let mut v = row.to_vec();
        // Two passes keep the basis orthogonal to rounding level.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Numeric {
                index: basis.len(),
                detail: "codes are linearly dependent".into(),
            });
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    *store.get_mut(model.quantizer.feature) = Tensor::from_rows(&basis[..m]);
    *store.get_mut(model.quantizer.structure) = Tensor::from_rows(&basis[m..]);
    for id in model.tokens.params() {
        *store.get_mut(id) = store.get(id).map(f64::abs);
    }
    let dim = model.attention.dim;
    *store.get_mut(model.attention.w_q) = Tensor::eye(dim);
    *store.get_mut(model.attention.w_k) = Tensor::eye(dim);
    let mut out = model.clone();
    out.quantizer.fusion.normalized = true;
    Ok(out)
}

/// One seed of the graph-token vs dense-attention comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRun {
    pub seed: u64,
    pub vecformer_ood_accuracy: f64,
    pub baseline_ood_accuracy: f64,
    pub vecformer_mean_std: f64,
    pub baseline_mean_std: f64,
    pub vecformer_mean_kl: f64,
    pub baseline_mean_kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodComparison {
    pub runs: Vec<OodRun>,
    pub median_vecformer_accuracy: f64,
    pub median_baseline_accuracy: f64,
    pub median_vecformer_std: f64,
    pub median_baseline_std: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Trains both models on the same data and split per seed, then compares
/// OOD accuracy and attention spread on the OOD nodes.
pub fn ood_comparison(ds: &GraphDataset, split: &Split, cfg: &TrainConfig, seeds: &[u64]) -> Result<OodComparison> {
    let ood = split
        .ood_test
        .as_ref()
        .filter(|o| !o.is_empty())
        .ok_or_else(|| Error::Contract("split has no OOD test nodes".into()))?;
    let labels = ds
        .labels
        .classes()
        .ok_or_else(|| Error::Contract("OOD comparison needs class labels".into()))?;
    let ctx = GraphContext::new(&ds.adjacency);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        let s1 = train_stage1(ds, &c)?;
        let vf = train_stage2(ds, split, &s1.checkpoint, &c)?;
        let (base, base_fit) = train_baseline(ds, split, &c)?;
        let vf_logits = predict(&vf.model, &vf.fit.store, &ctx, ds)?;
        let base_logits = predict(&base, &base_fit.store, &ctx, ds)?;
        let vf_diag = model_diagnostics(&vf.model, &vf.fit.store, ds, ood)?;
        let base_diag = model_diagnostics(&base, &base_fit.store, ds, ood)?;
        runs.push(OodRun {
            seed,
            vecformer_ood_accuracy: accuracy(&vf_logits, labels, ood, SplitTag::OodTest)?.value,
            baseline_ood_accuracy: accuracy(&base_logits, labels, ood, SplitTag::OodTest)?.value,
            vecformer_mean_std: vf_diag.mean_std,
            baseline_mean_std: base_diag.mean_std,
            vecformer_mean_kl: vf_diag.mean_kl,
            baseline_mean_kl: base_diag.mean_kl,
        });
    }
    let col = |f: fn(&OodRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(OodComparison {
        median_vecformer_accuracy: col(|r| r.vecformer_ood_accuracy),
        median_baseline_accuracy: col(|r| r.baseline_ood_accuracy),
        median_vecformer_std: col(|r| r.vecformer_mean_std),
        median_baseline_std: col(|r| r.baseline_mean_std),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::numerics::{Mode, SeededRng, Tape};
    use crate::quantizer::{Quantizer, SoftVqConfig};
    use crate::tokenformer::FreezeFlags;

    #[test]
    fn uniform_rows_have_zero_spread() {
        let w = Tensor::full(&[3, 5], 0.2);
        let q = Tensor::ones(&[3, 2]);
        let k = Tensor::ones(&[5, 2]);
        let d = attn_diagnostics(&w, &q, &k).unwrap();
        assert!(d.row_std.iter().all(|&s| s.abs() < 1e-15));
        assert!(d.mean_kl.abs() < 1e-12);
        assert_eq!(d.min_qk, 2.0);
    }

    #[test]
    fn one_hot_rows_closed_form() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]);
        let q = Tensor::from_rows(&[vec![1.0], vec![-1.0]]);
        let k = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let d = attn_diagnostics(&w, &q, &k).unwrap();
        for s in &d.row_std {
            assert!((s - 3f64.sqrt() / 4.0).abs() < 1e-15);
        }
        assert!((d.mean_kl - 4f64.ln()).abs() < 1e-15);
        assert_eq!(d.min_qk, -4.0);
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let w = Tensor::from_rows(&[vec![0.5, 0.4]]);
        let r = attn_diagnostics(&w, &Tensor::ones(&[1, 1]), &Tensor::ones(&[2, 1]));
        assert!(matches!(r, Err(Error::Contract(_))));
        let w = Tensor::from_rows(&[vec![1.5, -0.5]]);
        let r = attn_diagnostics(&w, &Tensor::ones(&[1, 1]), &Tensor::ones(&[2, 1]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn positivity_mode_makes_scores_positive() {
        let mut rng = SeededRng::new(0);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &EncoderConfig { hidden_dim: 12, ..EncoderConfig::default() }, 4, &mut rng).unwrap();
        let q = Quantizer::init(&mut store, 5, 4, 12, SoftVqConfig::default(), false, &mut rng).unwrap();
        let model = VecFormer::init_head(&mut store, enc, q, 2, 3, 1, 2, FreezeFlags::default(), &mut rng).unwrap();
        let model = positivity_mode(&mut store, &model).unwrap();
        let f = store.get(model.quantizer.feature);
        let s = store.get(model.quantizer.structure);
        let rows: Vec<Vec<f64>> = (0..5).map(|i| f.row(i).to_vec()).chain((0..4).map(|i| s.row(i).to_vec())).collect();
        let all = Tensor::from_rows(&rows);
        let gram = all.matmul_nt(&all).unwrap();
        let diff = gram.zip_map(&Tensor::eye(9), |a, b| a - b).unwrap().max_abs();
        assert!(diff < 1e-12);

        let ds = crate::graphio::gen_sbm(
            &crate::graphio::SbmConfig::new(vec![5, 5], 0.5, 0.1).with_features(4, 1.0),
            &mut rng,
        )
        .unwrap();
        let ctx = GraphContext::new(&ds.adjacency);
        let tape = Tape::new();
        let out = model
            .forward(&tape, &store, &ctx, tape.constant(ds.features.clone()), Mode::Eval, &mut rng)
            .unwrap();
        let qk = out.attention.q.value().matmul_nt(&out.attention.k.value()).unwrap();
        assert!(qk.data().iter().all(|&v| v > 0.0));

        let mut small = ParamStore::new();
        let enc = Encoder::init(&mut small, &EncoderConfig { hidden_dim: 4, ..EncoderConfig::default() }, 4, &mut rng).unwrap();
        let q = Quantizer::init(&mut small, 3, 3, 4, SoftVqConfig::default(), false, &mut rng).unwrap();
        let model = VecFormer::init_head(&mut small, enc, q, 2, 2, 1, 2, FreezeFlags::default(), &mut rng).unwrap();
        assert!(matches!(positivity_mode(&mut small, &model), Err(Error::Config(_))));
    }
}
