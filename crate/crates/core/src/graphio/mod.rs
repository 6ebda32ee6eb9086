//! Graph data: sparse adjacency, datasets, the on-disk container, node
//! splits and synthetic generators.

mod adjacency;
mod container;
mod dataset;
pub mod generators;
mod split;

pub use adjacency::{add_self_loops, SparseAdjacency};
pub use container::{load_graph, matrix_csv, save_graph, GraphHeader, LabelMode, GRAPH_FORMAT, GRAPH_VERSION};
pub use dataset::{GraphDataset, Labels, ENV_ID, ENV_OOD};
pub use generators::{
    build_knn_correlation_graph, gen_de_labels, gen_module_signals, gen_sbm, gen_spurious_shift, knn_directed,
    pearson_matrix, SbmConfig, SpuriousConfig,
};
pub use split::{make_env_split, make_split, split_indices, Split, OOD_RATIOS, STANDARD_RATIOS};
