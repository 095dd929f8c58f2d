pub mod dsp;
pub mod boost;
pub mod cae;
pub mod dataio;
pub mod ica;
pub mod pipeline;
pub mod realtime;
