//! Metrics, attention diagnostics, ablations and the scaling benchmark.

pub mod ablation;
pub mod bench;
pub mod diagnostics;
pub mod metrics;

pub use ablation::{ablate_codebook, ablate_tokens, square_factorization, write_rows_csv, CodebookAblation, TokenAblation};
pub use bench::{bench_scaling, loglog_slope, mechanism_slope, BenchConfig, Mechanism, ScalingRecord};
pub use diagnostics::{attn_diagnostics, median, model_diagnostics, ood_comparison, positivity_mode, AttnDiagnostics};
pub use metrics::{accuracy, des_score, evaluate, roc_auc, MetricName, MetricReport, SplitTag, DES_THRESHOLD};
