use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, DecodeRequest};
use crate::tags::ControlTags;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlDecision {
    /// Keep the large model decoding. `widen` is set when the probe was a
    /// proper prefix of the close tag and a longer probe would settle it.
    ContinueLarge { widen: bool },
    TakeBackControl,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleOutcome {
    pub decision: ControlDecision,
    /// Text the small model already committed while checking, to be placed
    /// at the start of its takeback output.
    pub seed: Option<String>,
    pub decoded_tokens: u64,
    pub discarded_tokens: u64,
    pub warning: Option<String>,
}

impl CycleOutcome {
    fn decided(decision: ControlDecision) -> Self {
        Self {
            decision,
            seed: None,
            decoded_tokens: 0,
            discarded_tokens: 0,
            warning: None,
        }
    }
}

pub const DEGRADED_CHECK_WARNING: &str =
    "greedy probe unsupported; controlling checks use one committed decode token";

/// Prefills `chunk` of large-model output into the small session at `at`,
/// then asks the small model whether it would close the offload region now.
pub fn controlling_prefill_cycle(
    small: &mut dyn Backend,
    at: usize,
    chunk: &str,
    tags: &ControlTags,
    probe_tokens: u32,
) -> Result<CycleOutcome, BackendError> {
    let frontier = small.prefill(at, chunk)?;
    let close = tags.close_tag.as_str();
    match small.greedy_probe(probe_tokens) {
        Ok(probe) => {
            let decision = if probe.starts_with(close) {
                ControlDecision::TakeBackControl
            } else {
                ControlDecision::ContinueLarge {
                    widen: !probe.is_empty() && close.starts_with(probe.as_str()),
                }
            };
            Ok(CycleOutcome::decided(decision))
        }
        Err(BackendError::Unsupported(_)) => {
            let c = small.decode_stream(&DecodeRequest::greedy(1))?;
            let t = c.text();
            let tokens = c.tokens();
            let mut out = CycleOutcome::decided(ControlDecision::ContinueLarge { widen: false });
            out.decoded_tokens = tokens;
            out.warning = Some(DEGRADED_CHECK_WARNING.to_string());
            if !t.is_empty() && (close.starts_with(t.as_str()) || t.starts_with(close)) {
                out.decision = ControlDecision::TakeBackControl;
                out.seed = Some(t);
            } else {
                if text::char_len(&t) > 0 {
                    small.rewind(frontier)?;
                }
                out.discarded_tokens = tokens;
            }
            Ok(out)
        }
        Err(e) => Err(e),
    }
}
