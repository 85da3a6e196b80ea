mod bundle;
mod denoiser;
mod vocab;

pub use bundle::{styled_prompt, BaseModel, DIFFUSION_FILE, STATS_FILE};
pub use denoiser::{sinusoid, Bound, Denoiser, DenoiserConfig, CHECKPOINT_FILE, CONFIG_FILE, LN_EPS, VOCAB_FILE};
pub use vocab::{Vocab, NULL, PAD};
