//! Vision transformer (`vit_base_patch16_224` layout) with a two-class head.

mod config;
mod io;
mod model;
mod params;

pub use config::{ConfigError, VitConfig};
pub use io::{
    decode_weights, encode_weights, load_weights, read_manifest, save_weights, Manifest,
    TensorEntry, WeightsError, FORMAT_NAME, FORMAT_VERSION,
};
pub use model::{
    block_forward, extract_patches, forward_batch, forward_logits, patch_embed, VitModel,
};
pub use params::{
    is_head_param, param_kind, BlockParams, BlockWeights, ParamKind, VitParams, VitWeights,
};
