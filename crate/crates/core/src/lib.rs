pub mod exec;
pub mod harness;
pub mod lambo;
pub mod model;
pub mod noise;
pub mod rng;
pub mod sample;
pub mod seqcore;
pub mod tensor;
pub mod train;
