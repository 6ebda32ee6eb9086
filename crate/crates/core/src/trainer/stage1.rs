use serde::{Deserialize, Serialize};

use super::{AdamW, Checkpoint, Stage, TrainConfig};
use crate::encoder::{Encoder, GraphContext};
use crate::error::{Error, Result};
use crate::graphio::GraphDataset;
use crate::numerics::{Mode, ParamStore, SeededRng, Tape};
use crate::quantizer::Quantizer;
use crate::reconstruction::{stage1_loss, DecoderSet, Stage1Terms, Stage1Values};

/// Encoder, codebooks, fusion and decoders.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub encoder: Encoder,
    pub quantizer: Quantizer,
    pub decoders: DecoderSet,
}

impl Stage1Model {
    pub fn init(store: &mut ParamStore, cfg: &TrainConfig, feat_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::init(store, &cfg.encoder_config(), feat_dim, rng)?;
        let quantizer = Quantizer::init(store, cfg.m, cfg.n, cfg.hidden_dim, cfg.softvq(), cfg.normalized_fusion, rng)?;
        let decoders = DecoderSet::init(store, cfg.hidden_dim, feat_dim, cfg.d_y(), rng)?;
        Ok(Self {
            encoder,
            quantizer,
            decoders,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &TrainConfig, feat_dim: usize) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::bind(store, &cfg.encoder_config(), feat_dim)?,
            quantizer: Quantizer::bind(store, cfg.m, cfg.n, cfg.hidden_dim, cfg.softvq(), cfg.normalized_fusion)?,
            decoders: DecoderSet::bind(store, cfg.hidden_dim, feat_dim, cfg.d_y())?,
        })
    }

    /// One forward pass of the reconstruction objective.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        ds: &GraphDataset,
        cfg: &TrainConfig,
        mode: Mode,
        dropout_rng: &mut SeededRng,
        sample_rng: &mut SeededRng,
    ) -> Result<Stage1Terms<'t>> {
        let x = tape.constant(ds.features.clone());
        let h = self.encoder.forward(tape, store, ctx, x, mode, dropout_rng)?;
        let bundle = self.quantizer.quantize(tape, store, h)?;
        stage1_loss(
            tape,
            store,
            &ctx.adj,
            x,
            h,
            &bundle,
            &self.decoders,
            &cfg.recon_config(),
            sample_rng,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub epoch: usize,
    pub feature_term: f64,
    pub structure_term: f64,
    pub graph_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<Stage1Record>,
}

/// Fresh stage-one parameters for `ds` under `cfg`.
pub fn init_stage1(ds: &GraphDataset, cfg: &TrainConfig) -> Result<(ParamStore, Stage1Model)> {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::derive(cfg.seed, "stage1.init");
    let model = Stage1Model::init(&mut store, cfg, ds.feat_dim(), &mut rng)?;
    Ok((store, model))
}

/// Deterministic (eval-mode) loss of `store` on `ds`. Sampled structure
/// terms use a fixed stream so repeated calls agree.
pub fn stage1_eval_loss(ds: &GraphDataset, cfg: &TrainConfig, store: &ParamStore) -> Result<Stage1Values> {
    let model = Stage1Model::bind(store, cfg, ds.feat_dim())?;
    let ctx = GraphContext::new(&ds.adjacency);
    let tape = Tape::new();
    let mut unused = SeededRng::new(0);
    let mut sample = SeededRng::derive(cfg.seed, "stage1.eval_sampling");
    let terms = model.loss(&tape, store, &ctx, ds, cfg, Mode::Eval, &mut unused, &mut sample)?;
    Ok(terms.values())
}

/// Full-batch Adam on the reconstruction objective for
/// `cfg.stage1_epochs` epochs.
pub fn train_stage1(ds: &GraphDataset, cfg: &TrainConfig) -> Result<Stage1Outcome> {
    let (mut store, model) = init_stage1(ds, cfg)?;
    let ctx = GraphContext::new(&ds.adjacency);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut dropout_rng = SeededRng::derive(cfg.seed, "stage1.dropout");
    let mut sample_rng = SeededRng::derive(cfg.seed, "stage1.sampling");
    let mut records = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 1..=cfg.stage1_epochs {
        let tape = Tape::new();
        let terms = model.loss(&tape, &store, &ctx, ds, cfg, Mode::Train, &mut dropout_rng, &mut sample_rng)?;
        let v = terms.values();
        if !v.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("stage-1 loss {v:?}"),
            });
        }
        let grads = tape.backward(terms.total)?;
        opt.step(&mut store, &grads);
        records.push(Stage1Record {
            epoch,
            feature_term: v.feature,
            structure_term: v.structure,
            graph_term: v.graph,
            total: v.total,
        });
    }
    Ok(Stage1Outcome {
        checkpoint: Checkpoint {
            stage: Stage::Stage1,
            config: cfg.clone(),
            rng: dropout_rng.state(),
            feat_dim: ds.feat_dim(),
            num_classes: None,
            params: store,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::{gen_sbm, SbmConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden_dim: 8,
            m: 4,
            n: 4,
            n_f: 2,
            n_s: 2,
            stage1_epochs: 5,
            ..TrainConfig::default()
        }
    }

    fn sbm() -> GraphDataset {
        gen_sbm(&SbmConfig::new(vec![10, 10], 0.5, 0.05), &mut SeededRng::new(0)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = sbm();
        let cfg = TrainConfig {
            stage1_epochs: 0,
            ..small_cfg()
        };
        let out = train_stage1(&ds, &cfg).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.checkpoint.params, init_stage1(&ds, &cfg).unwrap().0);
    }

    #[test]
    fn same_seed_same_curve() {
        let ds = sbm();
        let a = train_stage1(&ds, &small_cfg()).unwrap();
        let b = train_stage1(&ds, &small_cfg()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn terms_sum_to_total() {
        let out = train_stage1(&sbm(), &small_cfg()).unwrap();
        for r in &out.records {
            let sum = r.feature_term + r.structure_term + r.graph_term;
            assert!((sum - r.total).abs() <= 1e-12 * r.total.abs().max(1.0));
            assert!(r.feature_term >= 0.0 && r.structure_term >= 0.0 && r.graph_term >= 0.0);
        }
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let cfg = TrainConfig {
            lr: 1e300,
            weight_decay: 0.0,
            ..small_cfg()
        };
        match train_stage1(&sbm(), &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 2),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.records)),
        }
    }
}
