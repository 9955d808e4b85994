//! Teacher–student self-supervised pretraining.

pub mod config;
pub mod ema;
pub mod encoder;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod network;
pub mod optim;
pub mod pretrain;

pub use config::{EncoderConfig, EncoderKind, MlpConfig, SslHyperparams};
pub use ema::ema_update;
pub use encoder::Encoder;
pub use loss::{cross_model_loss, cross_view_loss};
pub use mlp::Mlp;
pub use network::{Predictor, Student, Teacher};
pub use optim::Sgd;
pub use pretrain::{SslModel, SslStepReport};
