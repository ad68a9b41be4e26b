//! Outage analysis for an IRS-aided multicast link under random passive
//! beamforming.
//!
//! The crate is split along the processing chain:
//!
//! * [`sysmodel`]: system constants, path-loss geometry and channel sampling.
//! * [`random_reflect`]: random reflection patterns, per-slot effective gains
//!   and the per-interval achievable rate.
//! * [`closed_form`]: the high-SNR outage approximation built on the CDF of a
//!   product of i.i.d. exponentials, and the optimal slot-count search.
//! * [`monte_carlo`]: exact outage estimation, rate histograms and slot
//!   correlation, all deterministic under a counter-based seed discipline.
//! * [`csi_baseline`]: the CSI-based max-min benchmark with training overhead
//!   and a phase-aligned genie lower bound.
//! * [`expcli`]: configuration loading, experiment presets and CSV/JSON output
//!   used by the `irs-rpb` binary.

pub mod closed_form;
pub mod csi_baseline;
mod error;
pub mod expcli;
pub mod monte_carlo;
pub mod random_reflect;
pub mod special;
pub mod sysmodel;

pub use error::{Error, Result};
