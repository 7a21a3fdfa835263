pub mod dsp;
pub mod io;
pub mod manifold;
pub mod nn;
pub mod synthesis;
pub mod critic;
pub mod objectives;
pub mod phantom;
pub mod train;
pub mod morphometry;
pub mod analysis;
pub mod experiment;
