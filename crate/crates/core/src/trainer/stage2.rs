use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{AdamW, Checkpoint, Stage, Stage1Model, TrainConfig};
use crate::encoder::GraphContext;
use crate::error::{Error, Result};
use crate::evalbench::metrics::{accuracy, evaluate, MetricName, SplitTag};
use crate::graphio::{GraphDataset, Labels, Split};
use crate::numerics::{Mode, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::tokenformer::{ClassifierOutput, DenseBaseline, NodeClassifier, VecFormer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub epoch: usize,
    pub loss: f64,
    /// Train accuracy for class labels, `NaN` for multilabel.
    pub train_accuracy: f64,
    pub train_metric: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    /// `NaN` when the split has no OOD set.
    pub ood_metric: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters at the best validation epoch.
    pub store: ParamStore,
    pub records: Vec<Stage2Record>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub metric: MetricName,
}

/// Training loss of `logits` on the rows in `mask`.
pub fn classification_loss<'t>(logits: Var<'t>, labels: &Labels, mask: &[usize]) -> Result<Var<'t>> {
    let rows = Rc::new(mask.to_vec());
    match labels {
        Labels::Classes(y) => logits.cross_entropy(rows, Rc::new(mask.iter().map(|&i| y[i]).collect())),
        Labels::Multilabel(t) => logits.bce_with_logits(rows, Rc::new(t.select_rows(mask))),
    }
}

/// Eval-mode logits.
pub fn predict<M: NodeClassifier>(model: &M, store: &ParamStore, ctx: &GraphContext, ds: &GraphDataset) -> Result<Tensor> {
    let tape = Tape::new();
    let out = model.forward(&tape, store, ctx, tape.constant(ds.features.clone()), Mode::Eval, &mut SeededRng::new(0))?;
    Ok((*out.logits.value()).clone())
}

/// Eval-mode forward pass, handing the recorded outputs to `f`.
pub fn inspect<M: NodeClassifier, T>(
    model: &M,
    store: &ParamStore,
    ctx: &GraphContext,
    ds: &GraphDataset,
    f: impl for<'t> FnOnce(ClassifierOutput<'t>) -> Result<T>,
) -> Result<T> {
    let tape = Tape::new();
    let out = model.forward(&tape, store, ctx, tape.constant(ds.features.clone()), Mode::Eval, &mut SeededRng::new(0))?;
    f(out)
}

fn metric_or_nan(logits: &Tensor, ds: &GraphDataset, kind: MetricName, mask: &[usize], tag: SplitTag) -> Result<f64> {
    if mask.is_empty() {
        return Ok(f64::NAN);
    }
    match evaluate(logits, &ds.labels, kind, mask, tag) {
        Ok(r) => Ok(r.value),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Supervised training with early stopping on the validation metric.
///
/// Training stops once the number of consecutive non-improving epochs
/// exceeds `patience`. The returned store is the best-validation snapshot.
pub fn fit_classifier<M: NodeClassifier>(
    model: &M,
    mut store: ParamStore,
    ds: &GraphDataset,
    split: &Split,
    cfg: &TrainConfig,
    label: &str,
) -> Result<FitOutcome> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Contract("finetuning needs nonempty train and val sets".into()));
    }
    split.validate(ds.n())?;
    let ctx = GraphContext::new(&ds.adjacency);
    let metric = MetricName::for_labels(&ds.labels, ds.num_classes);
    let frozen = model.frozen();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = SeededRng::derive(cfg.seed, &format!("{label}.dropout"));
    let mut best = (f64::NEG_INFINITY, 0, store.clone());
    let mut stale = 0;
    let mut records = Vec::new();
    for epoch in 1..=cfg.stage2_epochs {
        let tape = Tape::with_frozen(frozen.iter().copied());
        let x = tape.constant(ds.features.clone());
        let out = model.forward(&tape, &store, &ctx, x, Mode::Train, &mut rng)?;
        let loss = classification_loss(out.logits, &ds.labels, &split.train)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("classification loss {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut store, &grads);

        let logits = predict(model, &store, &ctx, ds)?;
        let train_accuracy = match &ds.labels {
            Labels::Classes(y) => accuracy(&logits, y, &split.train, SplitTag::Train)?.value,
            Labels::Multilabel(_) => f64::NAN,
        };
        let val = metric_or_nan(&logits, ds, metric, &split.val, SplitTag::Val)?;
        records.push(Stage2Record {
            epoch,
            loss: loss_value,
            train_accuracy,
            train_metric: metric_or_nan(&logits, ds, metric, &split.train, SplitTag::Train)?,
            val_metric: val,
            test_metric: metric_or_nan(&logits, ds, metric, &split.test, SplitTag::Test)?,
            ood_metric: match &split.ood_test {
                Some(ood) => metric_or_nan(&logits, ds, metric, ood, SplitTag::OodTest)?,
                None => f64::NAN,
            },
        });
        if val > best.0 {
            best = (val, epoch, store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (best_val, best_epoch, store) = best;
    Ok(FitOutcome {
        store,
        records,
        best_epoch,
        best_val,
        metric,
    })
}

/// Environment-aware split for a run: ID nodes split by `cfg.split_ratios`
/// with OOD nodes held out when the dataset declares environments, a plain
/// random split otherwise.
pub fn default_split(ds: &GraphDataset, cfg: &TrainConfig) -> Result<Split> {
    let mut rng = SeededRng::derive(cfg.seed, "split");
    if ds.environment.is_some() {
        crate::graphio::make_env_split(ds, cfg.split_ratios, &mut rng)
    } else {
        crate::graphio::make_split(ds.n(), cfg.split_ratios, &mut rng)
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub checkpoint: Checkpoint,
    pub model: VecFormer,
    pub fit: FitOutcome,
}

/// Builds the stage-two model on top of a stage-one store.
pub fn build_vecformer(
    stage1: &Checkpoint,
    cfg: &TrainConfig,
    num_classes: usize,
) -> Result<(ParamStore, VecFormer)> {
    if stage1.stage != Stage::Stage1 {
        return Err(Error::Contract(format!("expected a stage-1 checkpoint, got {:?}", stage1.stage)));
    }
    let base = Stage1Model::bind(&stage1.params, cfg, stage1.feat_dim)?;
    let mut store = stage1.params.clone();
    let mut rng = SeededRng::derive(cfg.seed, "stage2.init");
    let model = VecFormer::init_head(
        &mut store,
        base.encoder,
        base.quantizer,
        cfg.n_f,
        cfg.n_s,
        cfg.attn_heads,
        num_classes,
        cfg.freeze(),
        &mut rng,
    )?;
    Ok((store, model))
}

/// Rebinds a stage-two checkpoint to a model.
pub fn bind_vecformer(ck: &Checkpoint) -> Result<VecFormer> {
    let cfg = &ck.config;
    let num_classes = ck
        .num_classes
        .ok_or_else(|| Error::Contract("stage-2 checkpoint lacks num_classes".into()))?;
    let base = Stage1Model::bind(&ck.params, cfg, ck.feat_dim)?;
    let dim = cfg.hidden_dim;
    Ok(VecFormer {
        tokens: crate::tokenformer::TokenListParams::bind(&ck.params, cfg.m, cfg.n, cfg.n_f, cfg.n_s)?,
        attention: crate::tokenformer::AttentionParams::bind(&ck.params, "attn", dim, cfg.attn_heads)?,
        classifier: crate::numerics::Linear::bind(&ck.params, "classifier", dim, num_classes, true)?,
        encoder: base.encoder,
        quantizer: base.quantizer,
        freeze: cfg.freeze(),
    })
}

/// Finetunes a fresh graph-token head (plus, unless frozen, the stage-one
/// parameters) on the classification loss.
pub fn train_stage2(ds: &GraphDataset, split: &Split, stage1: &Checkpoint, cfg: &TrainConfig) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if stage1.feat_dim != ds.feat_dim() {
        return Err(Error::Contract(format!(
            "stage-1 checkpoint expects {} features, dataset has {}",
            stage1.feat_dim,
            ds.feat_dim()
        )));
    }
    let (store, model) = build_vecformer(stage1, cfg, ds.num_classes)?;
    let fit = fit_classifier(&model, store, ds, split, cfg, "stage2")?;
    let checkpoint = Checkpoint {
        stage: Stage::Stage2,
        config: cfg.clone(),
        rng: SeededRng::derive(cfg.seed, "stage2.dropout").state(),
        feat_dim: ds.feat_dim(),
        num_classes: Some(ds.num_classes),
        params: fit.store.clone(),
    };
    Ok(Stage2Outcome { checkpoint, model, fit })
}

/// Trains the dense node-attention baseline under the same protocol.
pub fn train_baseline(ds: &GraphDataset, split: &Split, cfg: &TrainConfig) -> Result<(DenseBaseline, FitOutcome)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = SeededRng::derive(cfg.seed, "baseline.init");
    let model = DenseBaseline::init(
        &mut store,
        ds.feat_dim(),
        cfg.hidden_dim,
        cfg.attn_heads,
        ds.num_classes,
        cfg.dropout,
        &mut rng,
    )?;
    let fit = fit_classifier(&model, store, ds, split, cfg, "baseline")?;
    Ok((model, fit))
}
