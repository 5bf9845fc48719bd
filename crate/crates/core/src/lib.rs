pub mod numerics;
pub mod tokenizer;
pub mod backbone;
pub mod diffusion;
pub mod scheduler_guidance;
pub mod compute_model;
pub mod flexify_training;
pub mod analysis;
pub mod data;
pub mod cli_io;
