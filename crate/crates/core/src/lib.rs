pub mod bpsk;
pub mod decoupled;
pub mod gamp;
pub mod harness;
pub mod penalty;
pub mod quadrature;
pub mod replica;
pub mod signal;
pub mod special;
pub mod spectral;
pub mod tuner;
