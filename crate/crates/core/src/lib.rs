//! Software tapped-delay-line channel emulation.
//!
//! The crate covers the whole pipeline of a desk-scale RF digital twin:
//!
//! * [`scenario`] and [`format`]: the per-millisecond TDL scenario model and
//!   its installed binary form.
//! * [`extract`]: turning ray-tracer output into sparse tap lines.
//! * [`engine`]: streaming sparse convolution of complex baseband IQ.
//! * [`sounder`]: m-sequence channel sounding and tap validation.
//! * [`replay`]: the scenario server feeding tap updates to the engine.
//! * [`broker`]: point-to-point pub/sub between a real system and its twin.
//! * [`waveform`]: a toy QPSK link and jammer generators.

pub mod bench;
pub mod broker;
pub mod engine;
pub mod extract;
pub mod format;
pub mod iqfile;
pub mod pipeline;
pub mod replay;
pub mod scenario;
pub mod sounder;
pub mod waveform;

pub use num_complex::{Complex32, Complex64};

pub use engine::{IqChunk, LinkFilterState};
pub use scenario::{GridSpec, LinkId, Scenario, Tap, TapLine};
