//! Graph matcher: shared ingredient embeddings, a graph-convolution stack,
//! weighted average pooling and inner-product logits against the atlas,
//! with an exact backward pass, the trainer and evidence decomposition.

mod backward;
mod explain;
mod forward;
mod model;
mod params;
mod train;

pub use backward::{
    argmax, load_trainable_vector, loss_and_grads, trainable_vector, BatchOutput, Gradients, LayerGrads,
    LossBreakdown, GRAD_CHUNK,
};
pub use explain::{explain, explain_embedded, explain_prepared, expansion_terms, CrossTerm, EvidenceReport, SharedEvidence};
pub use forward::{bovw_mode_logits, embed_graph, forward, graph_conv, ForwardTrace, GraphEmbedding, PreparedAtlas};
pub use model::{Model, ATLAS_FILE, CHECKPOINT_FILE, HISTORY_FILE, VOCAB_FILE};
pub use params::{Checkpoint, GraphConvLayer, MatcherParams, SNMP_MAGIC, SNMP_VERSION};
pub use train::{
    class_count_of, initialize, instance_graphs, train, train_extension, train_from_components, EpochStats,
    TrainConfig, TrainOutput,
};
