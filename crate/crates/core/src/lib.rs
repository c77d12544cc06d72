//! Cooperative small/large model decoding where the small model decides,
//! through `<bigmodel>` control tags written into its own output, which
//! reasoning spans are handed to a larger model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tags`] and [`protocol`]: pure tag scanning, the handoff state machine,
//!   trace validation and span extraction.
//! - [`backend`]: the model session abstraction, a deterministic scripted
//!   backend and (with the `http` feature) an OpenAI-compatible client.
//! - [`orchestrator`]: drives one cooperative generation end to end.
//! - [`reward`]: the scalar reward used when fine-tuning the small model.
//! - [`annotate`]: builds tagged training traces from annotator snippets.
//! - [`perfsim`]: analytical latency model for single-model, non-pipelined
//!   and pipelined execution.

pub mod annotate;
pub mod backend;
pub mod orchestrator;
pub mod perfsim;
pub mod protocol;
pub mod reward;
pub mod tags;
pub mod text;

pub use protocol::{GenerationTrace, OffloadSpan, SpanOrigin, TraceValidation};
pub use tags::ControlTags;
