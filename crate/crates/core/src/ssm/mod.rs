//! Selective state-space sequence modelling: the scan kernels, the gated
//! block built around them, and sinusoidal position embeddings.

mod block;
mod pe;
mod scan;

pub use block::{MambaBlock, MambaConfig};
pub use pe::sinusoidal_pe;
pub use scan::{
    selective_scan, selective_scan_parallel, selective_scan_with_states, ScanInputs, SelectiveScanOp,
};
