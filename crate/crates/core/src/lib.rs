pub mod audio;
pub mod metadata;
pub mod reward;
pub mod rote;
pub mod grpo;
pub mod provider;
pub mod pipeline;
