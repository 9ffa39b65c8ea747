//! Reverse-mode tensor core and the transformer blocks shared by the masked
//! LM and the encoder-decoder.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{gelu, AttentionSpec, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
pub use transformer::{
    add_decoder_layers, add_encoder, decoder_forward, encoder_forward, output_logits, AttentionIds,
    DecoderLayerIds, EmbeddingIds, EncoderLayerIds, LayerNormIds, LinearIds, PaddedBatch, TransformerConfig,
    TransformerLayout,
};
