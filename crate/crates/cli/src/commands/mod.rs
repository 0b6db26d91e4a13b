pub mod eval;
pub mod finetune;
pub mod preprocess;
pub mod pretrain;
pub mod report;
pub mod retrieve;
pub mod synth;
