//! Requests and their lifecycle state machine.

use crate::time::SimTime;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Priority {
    Normal,
    High,
}

impl Priority {
    /// Sort key: High requests order before Normal within an epoch.
    pub fn rank(self) -> u8 {
        match self {
            Priority::High => 0,
            Priority::Normal => 1,
        }
    }
}

/// Requested (or assigned) execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecMode {
    Dp,
    /// Tensor parallel across `n` engines.
    Tp(usize),
}

impl ExecMode {
    pub fn degree(self) -> usize {
        match self {
            ExecMode::Dp => 1,
            ExecMode::Tp(n) => n,
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecMode::Dp => write!(f, "dp"),
            ExecMode::Tp(n) => write!(f, "tp{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestState {
    Queued,
    Running,
    Paused,
    SpeculativeDp,
    Finished,
}

impl RequestState {
    /// The full transition graph: Queued -> Running -> Finished, with
    /// Running <-> Paused (hard preempt) and Queued -> SpeculativeDp ->
    /// Running (soft preempt) as the only detours.
    pub fn can_transition(from: RequestState, to: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (from, to),
            (Queued, Running)
                | (Queued, SpeculativeDp)
                | (SpeculativeDp, Running)
                | (Running, Paused)
                | (Paused, Running)
                | (Running, Finished)
        )
    }

    pub const ALL: [RequestState; 5] = [
        RequestState::Queued,
        RequestState::Running,
        RequestState::Paused,
        RequestState::SpeculativeDp,
        RequestState::Finished,
    ];
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("illegal request state transition {from:?} -> {to:?} for request {id}")]
pub struct IllegalTransition {
    pub id: RequestId,
    pub from: RequestState,
    pub to: RequestState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: SimTime,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub priority: Priority,
    pub mode: ExecMode,
    pub state: RequestState,
}

impl Request {
    pub fn new(
        id: RequestId,
        arrival_time: SimTime,
        prompt_tokens: usize,
        output_tokens: usize,
        priority: Priority,
        mode: ExecMode,
    ) -> Self {
        debug_assert!(prompt_tokens >= 1 && output_tokens >= 1);
        Request {
            id,
            arrival_time,
            prompt_tokens,
            output_tokens,
            priority,
            mode,
            state: RequestState::Queued,
        }
    }

    pub fn transition(&mut self, to: RequestState) -> Result<(), IllegalTransition> {
        if RequestState::can_transition(self.state, to) {
            self.state = to;
            Ok(())
        } else {
            Err(IllegalTransition {
                id: self.id,
                from: self.state,
                to,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive transition-table check: exactly the listed edges are
    /// admitted, every other (from, to) pair is rejected.
    #[test]
    fn transition_table_is_exact() {
        use RequestState::*;
        let legal = [
            (Queued, Running),
            (Queued, SpeculativeDp),
            (SpeculativeDp, Running),
            (Running, Paused),
            (Paused, Running),
            (Running, Finished),
        ];
        for from in RequestState::ALL {
            for to in RequestState::ALL {
                let expected = legal.contains(&(from, to));
                assert_eq!(
                    RequestState::can_transition(from, to),
                    expected,
                    "transition {from:?} -> {to:?}"
                );
            }
        }
    }

    #[test]
    fn transition_mutates_or_errors() {
        let mut req = Request::new(
            RequestId(1),
            SimTime::ZERO,
            10,
            5,
            Priority::Normal,
            ExecMode::Dp,
        );
        req.transition(RequestState::Running).unwrap();
        req.transition(RequestState::Paused).unwrap();
        req.transition(RequestState::Running).unwrap();
        req.transition(RequestState::Finished).unwrap();
        let err = req.transition(RequestState::Running).unwrap_err();
        assert_eq!(err.from, RequestState::Finished);
    }
}
