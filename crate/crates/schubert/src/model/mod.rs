//! The generalized encoder: independent per-layer design dimensions,
//! embedding-tied decoding, and the MLM + NSP pre-training heads.

mod checkpoint;
mod config;
mod forward;
mod loss;
mod weights;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use config::ArchConfig;
pub use forward::{encoder_layer_forward, encoder_multiply_count, model_forward, ATTENTION_MASK_NEG};
pub use loss::{mlm_nsp_loss, mlm_nsp_loss_with_grads, model_logits, nsp_label, LossValues};
pub use weights::{init_model, tensor_shapes, truncated_normal, LayerWeights, ModelWeights};

pub(crate) use forward::{model_graph_with_pooler, LayerRefs, ModelRefs};
pub(crate) use loss::mlm_nsp_graph;
