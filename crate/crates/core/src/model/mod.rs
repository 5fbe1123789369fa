//! Tensors, reverse-mode differentiation, the denoising network and its
//! optimizer.

pub mod autograd;
pub mod config;
pub mod net;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use config::ModelConfig;
pub use net::{fourier_encode, sinusoid, CondVars, Conditioning, Embedding, EmbeddingKind, PoseNet, ViewInput};
pub use params::{grad_check, optimizer_step, AdamConfig, AdamState, GradCheckReport, Parameters};
pub use tensor::{AnyTensor, Real, Tensor};
