pub mod geo;
pub mod ingest;
pub mod matching;
pub mod network;
pub mod routing;
pub mod speeds;
pub mod eval;
pub mod calibrate;
pub mod synth;
pub mod pipeline;
pub mod cli;
