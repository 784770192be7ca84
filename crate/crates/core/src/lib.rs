pub mod analysis;
pub mod decomp;
pub mod gapflow;
pub mod interventions;
pub mod linalg;
pub mod model;
pub mod nncore;
pub mod pipeline;
pub mod probes;
pub mod rundir;
pub mod spectra;
pub mod spectral;
pub mod tasks;
pub mod trainer;
