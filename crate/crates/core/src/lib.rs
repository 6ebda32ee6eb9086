//! Two-stage graph transformer built on soft vector quantization.
//!
//! Stage one learns a feature codebook and a structure codebook by
//! reconstructing node features, adjacency and encoder output from
//! SoftVQ tokens. Stage two projects both codebooks into a fixed-size
//! graph token list and lets every node cross-attend to it, which keeps
//! attention cost linear in the node count.
//!
//! Module map:
//!
//! - [`numerics`]: dense tensors, the reverse-mode tape, seeded RNG and a
//!   finite-difference gradient checker.
//! - [`graphio`]: sparse adjacency, datasets, the on-disk container, splits
//!   and synthetic generators.
//! - [`encoder`]: GAT / GCN message passing.
//! - [`quantizer`]: codebooks, SoftVQ, vanilla VQ and token fusion.
//! - [`reconstruction`]: decoders and the stage-one objective.
//! - [`tokenformer`]: graph token list, cross-attention, classifier and the
//!   dense node-attention baseline.
//! - [`trainer`]: optimizer, config, checkpoints and both training stages.
//! - [`evalbench`]: metrics, attention diagnostics, ablations, scaling bench.
//! - [`cli`]: the `vecformer` command line.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod graphio;
pub mod numerics;
pub mod quantizer;
pub mod reconstruction;
pub mod tokenformer;
pub mod trainer;

pub use error::{Error, Result};
pub use graphio::{GraphDataset, Labels, SparseAdjacency, Split};
pub use numerics::{ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
