pub mod numerics;
pub mod oracle;
pub mod channels;
pub mod cli;
pub mod diffusion;
pub mod em;
pub mod eval;
pub mod rng;
