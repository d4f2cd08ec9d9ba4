//! Scheduling protocol state, the mode-assignment policy, and the three
//! switching strategies.
//!
//! Strategies are pure planners here: given the group's occupancy they
//! produce a transition plan (switch point, idle gaps, speculative slots,
//! pause set). The event loop in [`crate::sim`] executes and re-evaluates
//! the plans as completions actually land.

use crate::deploy::DeploymentConfig;
use crate::kvcache::{max_context, BlockId};
use crate::model::ModelSpec;
use crate::request::{ExecMode, Priority, Request, RequestId};
use crate::time::{SimDuration, SimTime};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Sequential,
    SoftPreempt,
    HardPreempt,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "sequential" => Some(Strategy::Sequential),
            "soft_preempt" | "soft" => Some(Strategy::SoftPreempt),
            "hard_preempt" | "hard" => Some(Strategy::HardPreempt),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Sequential => write!(f, "sequential"),
            Strategy::SoftPreempt => write!(f, "soft_preempt"),
            Strategy::HardPreempt => write!(f, "hard_preempt"),
        }
    }
}

/// Load-adaptive thresholds. Between `low_rps` and `high_rps` the previous
/// regime is kept (hysteresis) so the system does not oscillate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadAdaptiveParams {
    pub low_rps: f64,
    pub high_rps: f64,
    pub window: SimDuration,
    /// TP degree formed during low load; 0 means the largest supported.
    pub tp_degree: usize,
}

impl Default for LoadAdaptiveParams {
    fn default() -> Self {
        LoadAdaptiveParams {
            low_rps: 8.0,
            high_rps: 10.0,
            window: SimDuration::from_ms(10_000),
            tp_degree: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// `req.mode` is taken as given (user-supplied hint).
    ModeFromRequest,
    /// Mode inferred from priority, context size, and windowed arrival rate.
    LoadAdaptive(LoadAdaptiveParams),
}

/// Serving regime the load-adaptive policy is currently in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Dp,
    Tp,
}

/// Windowed arrival-rate estimator feeding the load-adaptive policy.
#[derive(Debug, Clone)]
pub struct LoadTracker {
    window: SimDuration,
    arrivals: VecDeque<SimTime>,
}

impl LoadTracker {
    pub fn new(window: SimDuration) -> Self {
        LoadTracker {
            window,
            arrivals: VecDeque::new(),
        }
    }

    pub fn record(&mut self, t: SimTime) {
        self.arrivals.push_back(t);
    }

    pub fn rate_rps(&mut self, now: SimTime) -> f64 {
        let cutoff = now.as_micros().saturating_sub(self.window.as_micros());
        while let Some(front) = self.arrivals.front() {
            if front.as_micros() < cutoff {
                self.arrivals.pop_front();
            } else {
                break;
            }
        }
        let window_s = self.window.as_micros() as f64 / 1_000_000.0;
        self.arrivals.len() as f64 / window_s
    }
}

/// Inputs `assign_mode` needs from the running system.
#[derive(Debug, Clone, Copy)]
pub struct LoadEstimate {
    pub rate_rps: f64,
    pub regime: Regime,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error(
        "request {id} needs {tokens} tokens of context, beyond the {max_degree}-way TP capacity {capacity}"
    )]
    NoFeasibleDegree {
        id: RequestId,
        tokens: u64,
        max_degree: usize,
        capacity: u64,
    },
}

/// Picks the execution mode for one request. ModeFromRequest passes the
/// request's own hint through; LoadAdaptive routes by priority, then context
/// size, then the windowed arrival rate with hysteresis.
pub fn assign_mode(
    req: &Request,
    load: LoadEstimate,
    policy: &Policy,
    spec: &ModelSpec,
    cfg: &DeploymentConfig,
) -> Result<ExecMode, PolicyError> {
    let params = match policy {
        Policy::ModeFromRequest => return Ok(req.mode),
        Policy::LoadAdaptive(p) => p,
    };
    let configured = if params.tp_degree == 0 {
        cfg.max_tp_degree()
    } else {
        params.tp_degree
    };
    if req.priority == Priority::High {
        return Ok(ExecMode::Tp(cfg.max_tp_degree()));
    }
    let tokens = (req.prompt_tokens + req.output_tokens) as u64;
    let fits = |p: usize| -> bool {
        match max_context(spec, cfg, p, true) {
            Ok(cap) => cap >= tokens,
            Err(_) => false,
        }
    };
    if !fits(1) {
        // Smallest supported degree whose pooled capacity holds the context.
        for &p in &cfg.supported_tp_degrees {
            if fits(p) {
                return Ok(ExecMode::Tp(p));
            }
        }
        let max_degree = cfg.max_tp_degree();
        let capacity = max_context(spec, cfg, max_degree, true).unwrap_or(0);
        return Err(PolicyError::NoFeasibleDegree {
            id: req.id,
            tokens,
            max_degree,
            capacity,
        });
    }
    if load.rate_rps < params.low_rps {
        Ok(ExecMode::Tp(configured))
    } else if load.rate_rps >= params.high_rps {
        Ok(ExecMode::Dp)
    } else {
        // hysteresis band: keep the previous regime
        match load.regime {
            Regime::Tp => Ok(ExecMode::Tp(configured)),
            Regime::Dp => Ok(ExecMode::Dp),
        }
    }
}

/// Mode-dependent KV parameters (B_req, H_req) for a request scheduled on
/// `n_eng` engines. B_req * H_req == B_base * H_base exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvParams {
    pub b_req: usize,
    pub h_req: usize,
}

pub fn kv_params(b_base: usize, h_base: usize, n_eng: usize) -> KvParams {
    debug_assert!(n_eng >= 1 && h_base % n_eng == 0);
    KvParams {
        b_req: b_base * n_eng,
        h_req: h_base / n_eng,
    }
}

/// Alg-1 per-iteration scheduler state.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub q_in: VecDeque<RequestId>,
    pub q_wait: Vec<RequestId>,
    pub q_work: Vec<(RequestId, Vec<BlockId>)>,
    pub n_eng: usize,
    pub n_tp: usize,
    pub flag_set_tp: bool,
    pub flag_reset_tp: bool,
    pub strategy: Strategy,
    pub policy: Policy,
}

impl SchedulerState {
    pub fn new(strategy: Strategy, policy: Policy) -> Self {
        SchedulerState {
            q_in: VecDeque::new(),
            q_wait: Vec::new(),
            q_work: Vec::new(),
            n_eng: 1,
            n_tp: 1,
            flag_set_tp: false,
            flag_reset_tp: false,
            strategy,
            policy,
        }
    }

    /// Step-3 reset at the top of each iteration.
    pub fn reset_iteration_flags(&mut self) {
        self.q_work.clear();
        self.flag_set_tp = false;
        self.flag_reset_tp = false;
        self.n_tp = 1;
    }
}

/// Mode broadcast chosen by one iteration (at most one; the last request
/// processed wins, matching the protocol's sequential flag writes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModeFlag {
    SetTp { degree: usize, group: Vec<usize> },
    ResetTp,
}

/// What one strategy invocation decided. `switch_at` is the planning-time
/// estimate; the event loop re-evaluates it as completions land (a straggler
/// finishing early moves the switch earlier).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPlan {
    pub group: Vec<usize>,
    pub switch_at: SimTime,
    /// Idle span each member spends waiting for the switch point under this
    /// plan (engine id, gap).
    pub idle_gaps: Vec<(usize, SimDuration)>,
    pub speculations: Vec<SpeculationPlan>,
    /// Requests to pause (hard preempt only).
    pub pauses: Vec<RequestId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeculationPlan {
    pub engine: usize,
    pub request: RequestId,
    /// Speculative tokens the idle window is expected to yield; each becomes
    /// a KV recompute obligation at the switch.
    pub est_tokens: u64,
}

/// Sequential switching: everyone waits for the straggler.
pub fn switch_sequential(now: SimTime, busy_until: &[(usize, SimTime)]) -> TransitionPlan {
    let switch_at = busy_until
        .iter()
        .map(|&(_, t)| t)
        .max()
        .unwrap_or(now)
        .max(now);
    let idle_gaps = busy_until
        .iter()
        .map(|&(e, t)| (e, switch_at.saturating_sub(t.max(now))))
        .collect();
    TransitionPlan {
        group: busy_until.iter().map(|&(e, _)| e).collect(),
        switch_at,
        idle_gaps,
        speculations: Vec::new(),
        pauses: Vec::new(),
    }
}

/// A TP request that could be speculatively executed in DP mode, with the
/// cost inputs the planner needs.
#[derive(Debug, Clone, Copy)]
pub struct SpeculationCandidate {
    pub request: RequestId,
    pub prefill_ms_dp: f64,
    pub max_tokens: u64,
}

/// Soft preempt: same switch point as sequential, but members that go idle
/// before the straggler speculatively run pending TP requests in DP mode.
/// No idle window is left unused while speculatable work exists.
pub fn switch_soft_preempt(
    now: SimTime,
    busy_until: &[(usize, SimTime)],
    pending: &[SpeculationCandidate],
    decode_ms_per_token_dp: f64,
) -> TransitionPlan {
    let mut plan = switch_sequential(now, busy_until);
    let mut candidates = pending.iter();
    for &(engine, gap) in &plan.idle_gaps {
        if gap.is_zero() {
            continue;
        }
        let Some(cand) = candidates.next() else { break };
        let decode_window = (gap.as_ms_f64() - cand.prefill_ms_dp).max(0.0);
        let est_tokens =
            ((decode_window / decode_ms_per_token_dp).floor() as u64).min(cand.max_tokens);
        plan.speculations.push(SpeculationPlan {
            engine,
            request: cand.request,
            est_tokens,
        });
    }
    plan
}

/// Hard preempt: members stop at their next step boundary, every running DP
/// request is paused in place, and the TP request starts immediately after
/// the switch latency.
pub fn switch_hard_preempt(
    now: SimTime,
    step_boundaries: &[(usize, SimTime)],
    running: &[RequestId],
) -> TransitionPlan {
    let mut plan = switch_sequential(now, step_boundaries);
    plan.pauses = running.to_vec();
    plan
}

/// Decision-log event kinds: `time_ms,iteration,event,req_id,group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionKind {
    SetTp,
    ResetTp,
    Pause,
    Resume,
    Speculate,
    Recompute,
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecisionKind::SetTp => "SetTP",
            DecisionKind::ResetTp => "ResetTP",
            DecisionKind::Pause => "Pause",
            DecisionKind::Resume => "Resume",
            DecisionKind::Speculate => "Speculate",
            DecisionKind::Recompute => "Recompute",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct DecisionEvent {
    pub time: SimTime,
    pub iteration: u64,
    pub event: DecisionKind,
    pub req: Option<RequestId>,
    pub group: Vec<usize>,
}

impl DecisionEvent {
    pub fn csv_line(&self) -> String {
        let req = self.req.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.time,
            self.iteration,
            self.event,
            req,
            crate::comms::format_group(&self.group)
        )
    }
}
