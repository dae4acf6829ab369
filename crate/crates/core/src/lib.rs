pub mod cue_pipeline;
pub mod data_model;
pub mod encoders;
pub mod evaluation;
pub mod fusion_decoder;
pub mod harness;
pub mod matching_loss;
pub mod numerics;
