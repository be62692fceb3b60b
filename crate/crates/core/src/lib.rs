//! Mixture-of-LoRA-experts token policy trained as a conservative,
//! autoregressive discrete Q-function on mixed-quality offline data.

pub mod autodiff;
pub mod codec;
pub mod env;
pub mod experiment;
pub mod model;
pub mod seed;
pub mod store;
pub mod train;
