//! Layer-similarity and gradient-statistics instrumentation.

mod gradstats;
mod similarity;

pub use gradstats::{
    record_grad_stats, GradRecord, GradTrace, DEFAULT_HIST_BINS, DEFAULT_HIST_RANGE,
};
pub use similarity::{
    compare_similarity, cosine_matrix, layer_similarity, pool_layer_outputs, table5_rows, Pooling,
    ProbeInfo, SimilarityComparison, SimilarityReport, Table5Row,
};
