//! Text and vision towers plus the adaptor heads trained on top of them.

pub mod adaptor;
pub mod layers;
pub mod text;
pub mod tower;
pub mod vision;

pub use adaptor::{Adaptor, AdaptorConfig, AdaptorKind};
pub use layers::{AttentionMode, Dropout, LayerNorm, Linear, Pooling};
pub use text::{lora_delta, LoraConfig, LoraTarget, TextEncoder, TextEncoderConfig, TextOutput};
pub use tower::TextTower;
pub use vision::{VisionEncoder, VisionEncoderConfig};
