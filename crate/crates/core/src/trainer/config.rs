use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::quantizer::SoftVqConfig;
use crate::reconstruction::{ReconConfig, StructureMode};
use crate::tokenformer::FreezeFlags;

/// Everything that determines a two-stage run. Loaded from JSON; unknown
/// keys are rejected and missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub hidden_dim: usize,
    pub encoder_kind: EncoderKind,
    pub encoder_layers: usize,
    pub gat_heads: usize,
    pub attn_heads: usize,
    /// Feature codebook size.
    pub m: usize,
    /// Structure codebook size.
    pub n: usize,
    pub n_f: usize,
    pub n_s: usize,
    pub temperature: f64,
    pub gamma_f: f64,
    pub gamma_g: f64,
    pub d_y: Option<usize>,
    pub structure_mode: StructureMode,
    pub neg_ratio: usize,
    pub dense_cap: usize,
    pub feature_weight: f64,
    pub structure_weight: f64,
    pub graph_weight: f64,
    pub normalized_fusion: bool,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub freeze_codebooks: bool,
    pub freeze_fusion: bool,
    pub split_ratios: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 5e-4,
            dropout: 0.1,
            hidden_dim: 64,
            encoder_kind: EncoderKind::Gat,
            encoder_layers: 2,
            gat_heads: 1,
            attn_heads: 1,
            m: 64,
            n: 64,
            n_f: 16,
            n_s: 16,
            temperature: 1.0,
            gamma_f: 2.0,
            gamma_g: 2.0,
            d_y: None,
            structure_mode: StructureMode::Auto,
            neg_ratio: 5,
            dense_cap: 4096,
            feature_weight: 1.0,
            structure_weight: 1.0,
            graph_weight: 1.0,
            normalized_fusion: false,
            stage1_epochs: 100,
            stage2_epochs: 300,
            patience: 50,
            seed: 0,
            freeze_encoder: false,
            freeze_codebooks: false,
            freeze_fusion: false,
            split_ratios: crate::graphio::STANDARD_RATIOS,
        }
    }
}

/// Per-dataset codebook sizes and token-list extents `(m, n, N_f, N_s)`.
pub const PRESETS: &[(&str, usize, usize, usize, usize)] = &[
    ("pubmed", 256, 256, 64, 64),
    ("corafull", 256, 256, 64, 64),
    ("computer", 256, 256, 64, 64),
    ("photo", 256, 256, 64, 64),
    ("cs", 256, 256, 64, 64),
    ("physics", 256, 256, 64, 64),
    ("chameleon", 256, 256, 32, 32),
    ("squirrel", 128, 128, 32, 32),
    ("cora_ood", 64, 64, 16, 16),
    ("citeseer_ood", 64, 64, 16, 16),
    ("twitch", 512, 512, 64, 64),
    ("ogbn_proteins", 64, 64, 16, 16),
    ("amazon2m", 256, 256, 64, 64),
    ("pokec", 256, 256, 64, 64),
];

impl TrainConfig {
    /// Defaults with the named dataset's codebook and token-list sizes.
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase().replace(['-', ' '], "_");
        let &(_, m, n, n_f, n_s) = PRESETS
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        let mut cfg = Self {
            m,
            n,
            n_f,
            n_s,
            ..Self::default()
        };
        if key.ends_with("_ood") || key == "twitch" {
            cfg.split_ratios = crate::graphio::OOD_RATIOS;
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        let counts = [
            ("hidden_dim", self.hidden_dim),
            ("m", self.m),
            ("n", self.n),
            ("n_f", self.n_f),
            ("n_s", self.n_s),
            ("attn_heads", self.attn_heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} attention heads",
                self.hidden_dim, self.attn_heads
            )));
        }
        self.encoder_config().validate()?;
        self.recon_config().validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder_kind,
            layers: self.encoder_layers,
            hidden_dim: self.hidden_dim,
            heads: self.gat_heads,
            dropout: self.dropout,
            residual: true,
            negative_slope: 0.2,
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            gamma_f: self.gamma_f,
            gamma_g: self.gamma_g,
            d_y: self.d_y,
            structure_mode: self.structure_mode,
            neg_ratio: self.neg_ratio,
            dense_cap: self.dense_cap,
            feature_weight: self.feature_weight,
            structure_weight: self.structure_weight,
            graph_weight: self.graph_weight,
        }
    }

    pub fn softvq(&self) -> SoftVqConfig {
        SoftVqConfig {
            temperature: self.temperature,
        }
    }

    pub fn freeze(&self) -> FreezeFlags {
        FreezeFlags {
            encoder: self.freeze_encoder,
            codebooks: self.freeze_codebooks,
            fusion: self.freeze_fusion,
        }
    }

    pub fn d_y(&self) -> usize {
        self.d_y.unwrap_or(self.hidden_dim)
    }
}
