pub mod actions;
pub mod anchoring;
pub mod comparer;
pub mod conversation;
pub mod detection;
pub mod geometry;
pub mod ids;
pub mod mllm;
pub mod scene;
pub mod session;
pub mod synth;
