use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SmallDecoding,
    LargeDecoding,
    Finished,
}

/// Inputs to the handoff state machine. Offsets are characters of the
/// tag-stripped trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "event")]
pub enum ProtocolEvent {
    OpenTagSeen { offset: usize },
    CloseTagSeen { offset: usize },
    BudgetExhausted { offset: usize },
    EndOfStream { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TakebackReason {
    Normal,
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    SwitchToLarge,
    SwitchToSmall(TakebackReason),
    Finish,
    None,
}

/// Half-open stripped-text interval of an offload region that the machine
/// just closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClosedSpan {
    pub start: usize,
    pub end: usize,
    pub forced: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("event {event:?} is not legal in phase {phase:?}")]
    IllegalEvent { phase: Phase, event: ProtocolEvent },
    #[error("offset {offset} precedes the open offload region starting at {start}")]
    OffsetBeforeStart { start: usize, offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolState {
    phase: Phase,
    current_span_start: Option<usize>,
    offload_budget_remaining: u64,
    span_budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: ProtocolState,
    pub action: Action,
    pub closed: Option<ClosedSpan>,
}

impl ProtocolState {
    /// Fresh machine in `SmallDecoding`; `span_budget` is the maximum number
    /// of large-model tokens allowed per offload region.
    pub fn new(span_budget: u64) -> Self {
        Self {
            phase: Phase::SmallDecoding,
            current_span_start: None,
            offload_budget_remaining: span_budget,
            span_budget,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn current_span_start(&self) -> Option<usize> {
        self.current_span_start
    }

    pub fn offload_budget_remaining(&self) -> u64 {
        self.offload_budget_remaining
    }

    /// Charges large-model tokens against the open region's budget.
    pub fn charge(mut self, tokens: u64) -> Self {
        if self.phase == Phase::LargeDecoding {
            self.offload_budget_remaining = self.offload_budget_remaining.saturating_sub(tokens);
        }
        self
    }

    pub fn budget_exhausted(&self) -> bool {
        self.phase == Phase::LargeDecoding && self.offload_budget_remaining == 0
    }

    pub fn step(self, event: ProtocolEvent) -> Result<Transition, ProtocolError> {
        let illegal = || ProtocolError::IllegalEvent {
            phase: self.phase,
            event,
        };
        match (self.phase, event) {
            (Phase::SmallDecoding, ProtocolEvent::OpenTagSeen { offset }) => Ok(Transition {
                state: Self {
                    phase: Phase::LargeDecoding,
                    current_span_start: Some(offset),
                    offload_budget_remaining: self.span_budget,
                    ..self
                },
                action: Action::SwitchToLarge,
                closed: None,
            }),
            (Phase::LargeDecoding, ProtocolEvent::CloseTagSeen { offset }) => {
                self.close(offset, TakebackReason::Normal, Phase::SmallDecoding)
            }
            (Phase::LargeDecoding, ProtocolEvent::BudgetExhausted { offset }) => {
                self.close(offset, TakebackReason::Forced, Phase::SmallDecoding)
            }
            (Phase::LargeDecoding, ProtocolEvent::EndOfStream { offset }) => {
                let mut t = self.close(offset, TakebackReason::Forced, Phase::Finished)?;
                t.action = Action::Finish;
                Ok(t)
            }
            (Phase::SmallDecoding, ProtocolEvent::EndOfStream { .. }) => Ok(Transition {
                state: Self {
                    phase: Phase::Finished,
                    ..self
                },
                action: Action::Finish,
                closed: None,
            }),
            (Phase::Finished, ProtocolEvent::EndOfStream { .. }) => Ok(Transition {
                state: self,
                action: Action::None,
                closed: None,
            }),
            _ => Err(illegal()),
        }
    }

    fn close(
        self,
        offset: usize,
        reason: TakebackReason,
        next: Phase,
    ) -> Result<Transition, ProtocolError> {
        let start = self
            .current_span_start
            .expect("LargeDecoding always records a span start");
        if offset < start {
            return Err(ProtocolError::OffsetBeforeStart { start, offset });
        }
        Ok(Transition {
            state: Self {
                phase: next,
                current_span_start: None,
                offload_budget_remaining: self.span_budget,
                ..self
            },
            action: Action::SwitchToSmall(reason),
            closed: Some(ClosedSpan {
                start,
                end: offset,
                forced: reason == TakebackReason::Forced,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn open_then_close() {
        let s = ProtocolState::new(1024);
        let t = s.step(ProtocolEvent::OpenTagSeen { offset: 100 }).unwrap();
        assert_eq!(t.action, Action::SwitchToLarge);
        assert_eq!(t.state.phase(), Phase::LargeDecoding);
        assert_eq!(t.state.current_span_start(), Some(100));

        let t = t
            .state
            .step(ProtocolEvent::CloseTagSeen { offset: 350 })
            .unwrap();
        assert_eq!(t.action, Action::SwitchToSmall(TakebackReason::Normal));
        assert_eq!(
            t.closed,
            Some(ClosedSpan {
                start: 100,
                end: 350,
                forced: false
            })
        );
        assert_eq!(t.state.phase(), Phase::SmallDecoding);
        assert_eq!(t.state.current_span_start(), None);
    }

    #[test]
    fn budget_forces_takeback() {
        let s = ProtocolState::new(10)
            .step(ProtocolEvent::OpenTagSeen { offset: 5 })
            .unwrap()
            .state
            .charge(7);
        assert!(!s.budget_exhausted());
        let s = s.charge(7);
        assert!(s.budget_exhausted());
        assert_eq!(s.offload_budget_remaining(), 0);
        let t = s.step(ProtocolEvent::BudgetExhausted { offset: 19 }).unwrap();
        assert_eq!(t.action, Action::SwitchToSmall(TakebackReason::Forced));
        assert!(t.closed.unwrap().forced);
        assert_eq!(t.state.offload_budget_remaining(), 10);
    }

    #[test]
    fn end_of_stream_inside_region_closes_it() {
        let t = ProtocolState::new(10)
            .step(ProtocolEvent::OpenTagSeen { offset: 2 })
            .unwrap()
            .state
            .step(ProtocolEvent::EndOfStream { offset: 9 })
            .unwrap();
        assert_eq!(t.action, Action::Finish);
        assert_eq!(t.state.phase(), Phase::Finished);
        assert_eq!(t.closed.unwrap().end, 9);
    }

    #[test]
    fn illegal_events_name_phase() {
        let s = ProtocolState::new(10);
        let err = s
            .step(ProtocolEvent::CloseTagSeen { offset: 1 })
            .unwrap_err();
        assert_eq!(
            err,
            ProtocolError::IllegalEvent {
                phase: Phase::SmallDecoding,
                event: ProtocolEvent::CloseTagSeen { offset: 1 }
            }
        );
        assert!(s.step(ProtocolEvent::BudgetExhausted { offset: 1 }).is_err());
        let large = s.step(ProtocolEvent::OpenTagSeen { offset: 1 }).unwrap().state;
        assert!(large.step(ProtocolEvent::OpenTagSeen { offset: 2 }).is_err());
    }

    fn arb_event() -> impl Strategy<Value = (u8, usize)> {
        (0u8..4, 0usize..50)
    }

    proptest! {
        // Feeding arbitrary event sequences (skipping illegal ones) never
        // yields overlapping regions or a budget above the span budget.
        #[test]
        fn reachable_states_are_safe(events in proptest::collection::vec(arb_event(), 0..60),
                                     charges in proptest::collection::vec(0u64..8, 0..60)) {
            let mut state = ProtocolState::new(16);
            let mut cursor = 0usize;
            let mut closed = Vec::new();
            for (i, (kind, delta)) in events.into_iter().enumerate() {
                cursor += delta;
                state = state.charge(charges.get(i).copied().unwrap_or(0));
                let ev = match kind {
                    0 => ProtocolEvent::OpenTagSeen { offset: cursor },
                    1 => ProtocolEvent::CloseTagSeen { offset: cursor },
                    2 => ProtocolEvent::BudgetExhausted { offset: cursor },
                    _ => ProtocolEvent::EndOfStream { offset: cursor },
                };
                if let Ok(t) = state.step(ev) {
                    if let Some(c) = t.closed { closed.push(c); }
                    state = t.state;
                }
                prop_assert!(state.offload_budget_remaining() <= 16);
                prop_assert_eq!(state.current_span_start().is_some(),
                                state.phase() == Phase::LargeDecoding);
            }
            for w in closed.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
        }
    }
}
