//! Control-tag scanning, the handoff state machine, and trace validation.

mod machine;
mod scanner;
mod trace;

pub use machine::{
    Action, ClosedSpan, Phase, ProtocolError, ProtocolEvent, ProtocolState, TakebackReason,
    Transition,
};
pub use scanner::{scan_chunk, scan_text, ScannerState, TagEvent, TagKind};
pub use trace::{
    extract_spans, extract_spans_as, lenient_regions, spans_well_formed, validate_trace,
    word_fraction, wrap_spans, CoverageCounting, GenerationTrace, IllegalReason, OffloadSpan,
    SpanOrigin, TraceError, TraceValidation,
};
