pub mod cdca;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod fmixup;
pub mod harness;
pub mod nn;
pub mod rng;
