//! Multi-objective architecture search for microcontroller-sized CNNs, with
//! variational pruning and posterior inheritance inside the search loop.

pub mod harness;
pub mod memmodel;
pub mod microgradnet;
pub mod mobo;
pub mod morph;
pub mod pruner;
pub mod searchspace;
