//! Encoder-decoder transformer.
//!
//! The encoder always uses full self-attention. Decoder self-attention
//! follows [`ModelConfig::mask`] (causal or n-gram) and decoder
//! cross-attention always sees every source position. Sublayers are
//! post-norm: `LayerNorm(x + Sublayer(x))`.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod params;
mod tokens;

pub use backward::{example_gradients, model_backward, ExampleGradients};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use config::ModelConfig;
pub use forward::{
    decode_embedded, decode_full, decode_traced, embed_tokens, encode, encode_traced,
    model_forward_loss, sequence_nll, sinusoidal_positions, DecoderTrace, EncoderTrace,
};
pub use params::{DecoderLayer, EncoderLayer, FeedForward, LayerNormParams, ModelParams};
pub use tokens::{Role, TokenSequence, BOS, EOS, FIRST_CONTENT_TOKEN, PAD};
