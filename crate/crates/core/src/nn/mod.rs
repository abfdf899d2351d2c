//! Small learnable machinery: matrices, reverse-mode autodiff, the noise
//! predictor, Adam, EMA and a reduce-on-plateau learning rate.

pub mod autograd;
pub mod ema;
pub mod mlp;
pub mod optim;
pub mod plateau;
pub mod tensor;

pub use ema::{EmaConfig, EmaState};
pub use mlp::{time_embed, Activation, Architecture, Gradients, NoisePredictor, TrainBatch};
pub use optim::{Adam, AdamConfig};
pub use plateau::{PlateauConfig, PlateauLr};
pub use tensor::Matrix;
