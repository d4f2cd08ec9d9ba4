//! Serving metrics: TTFT, TPOT, ILT, queue time, and peak generation
//! throughput, aggregated per phase and per priority class.

use crate::request::{Priority, RequestId};
use crate::time::{SimDuration, SimTime};
use crate::workload::{PhaseKind, Trace};
use std::fmt::Write as _;

/// Final per-request accounting, assembled by the simulator.
#[derive(Debug, Clone)]
pub struct RequestRecord {
    pub id: RequestId,
    pub priority: Priority,
    pub arrival: SimTime,
    /// First scheduling time; queue time = admitted - arrival.
    pub admitted: Option<SimTime>,
    pub first_emit: Option<SimTime>,
    pub finished: Option<SimTime>,
    pub emitted: u64,
    /// Sum and count of inter-emit intervals after the first token.
    pub intervals_sum: SimDuration,
    pub intervals_count: u64,
    pub rejected: bool,
}

impl RequestRecord {
    pub fn ttft(&self) -> Option<SimDuration> {
        self.first_emit.map(|t| t.saturating_sub(self.arrival))
    }

    pub fn queue_time(&self) -> Option<SimDuration> {
        self.admitted.map(|t| t.saturating_sub(self.arrival))
    }

    /// Mean inter-emit interval after the first token.
    pub fn tpot_ms(&self) -> Option<f64> {
        if self.intervals_count == 0 {
            None
        } else {
            Some(self.intervals_sum.as_ms_f64() / self.intervals_count as f64)
        }
    }
}

/// One token emission; the raw material every summary number can be
/// recomputed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitRecord {
    pub time: SimTime,
    pub req: RequestId,
    pub token_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub label: String,
    pub count: usize,
    pub mean_ttft_ms: f64,
    pub p90_ttft_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrioritySplit {
    pub mean_ttft_high_ms: f64,
    pub mean_ttft_normal_ms: f64,
    pub mean_tpot_high_ms: f64,
    pub mean_tpot_normal_ms: f64,
    pub high_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    /// TTFT aggregates per phase kind plus an "all" row.
    pub phases: Vec<PhaseSummary>,
    pub median_tpot_ms: f64,
    pub mean_ilt_ms: f64,
    /// Max output tokens in any sliding 1 s window.
    pub peak_throughput_tps: f64,
    pub mean_queue_ms: f64,
    pub rejected: usize,
    pub priority: Option<PrioritySplit>,
}

impl MetricsSummary {
    pub fn phase(&self, label: &str) -> Option<&PhaseSummary> {
        self.phases.iter().find(|p| p.label == label)
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Nearest-rank percentile over an unsorted sample (q in [0, 1]).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Max emits in any sliding [t, t+1s) window; `emits` must be time-ordered.
pub fn peak_throughput_tps(emits: &[EmitRecord]) -> f64 {
    let mut best = 0usize;
    let mut lo = 0usize;
    for hi in 0..emits.len() {
        let window_start = emits[hi].time.as_micros().saturating_sub(999_999);
        while emits[lo].time.as_micros() < window_start {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best as f64
}

/// Builds the summary from per-request records and the raw emit stream.
pub fn compute_summary(
    records: &[RequestRecord],
    trace: &Trace,
    emits: &[EmitRecord],
) -> MetricsSummary {
    let finished: Vec<&RequestRecord> = records.iter().filter(|r| !r.rejected).collect();

    let mut phases = Vec::new();
    for kind in [PhaseKind::Low, PhaseKind::High] {
        let ttfts: Vec<f64> = finished
            .iter()
            .filter(|r| trace.phase_of(r.arrival) == Some(kind))
            .filter_map(|r| r.ttft().map(|d| d.as_ms_f64()))
            .collect();
        if !ttfts.is_empty() {
            phases.push(PhaseSummary {
                label: kind.label().to_string(),
                count: ttfts.len(),
                mean_ttft_ms: mean(&ttfts),
                p90_ttft_ms: percentile(&ttfts, 0.9),
            });
        }
    }
    let all_ttfts: Vec<f64> = finished
        .iter()
        .filter_map(|r| r.ttft().map(|d| d.as_ms_f64()))
        .collect();
    phases.push(PhaseSummary {
        label: "all".to_string(),
        count: all_ttfts.len(),
        mean_ttft_ms: mean(&all_ttfts),
        p90_ttft_ms: percentile(&all_ttfts, 0.9),
    });

    let tpots: Vec<f64> = finished.iter().filter_map(|r| r.tpot_ms()).collect();
    let median_tpot_ms = percentile(&tpots, 0.5);

    let (interval_sum, interval_count) = finished.iter().fold((0u64, 0u64), |(s, c), r| {
        (s + r.intervals_sum.as_micros(), c + r.intervals_count)
    });
    let mean_ilt_ms = if interval_count == 0 {
        0.0
    } else {
        interval_sum as f64 / interval_count as f64 / 1_000.0
    };

    let queues: Vec<f64> = finished
        .iter()
        .filter_map(|r| r.queue_time().map(|d| d.as_ms_f64()))
        .collect();

    let high: Vec<&&RequestRecord> = finished
        .iter()
        .filter(|r| r.priority == Priority::High)
        .collect();
    let priority = if high.is_empty() {
        None
    } else {
        let normal: Vec<&&RequestRecord> = finished
            .iter()
            .filter(|r| r.priority == Priority::Normal)
            .collect();
        let ttft_of = |rs: &[&&RequestRecord]| {
            mean(
                &rs.iter()
                    .filter_map(|r| r.ttft().map(|d| d.as_ms_f64()))
                    .collect::<Vec<_>>(),
            )
        };
        let tpot_of = |rs: &[&&RequestRecord]| {
            mean(&rs.iter().filter_map(|r| r.tpot_ms()).collect::<Vec<_>>())
        };
        Some(PrioritySplit {
            mean_ttft_high_ms: ttft_of(&high),
            mean_ttft_normal_ms: ttft_of(&normal),
            mean_tpot_high_ms: tpot_of(&high),
            mean_tpot_normal_ms: tpot_of(&normal),
            high_count: high.len(),
        })
    };

    MetricsSummary {
        phases,
        median_tpot_ms,
        mean_ilt_ms,
        peak_throughput_tps: peak_throughput_tps(emits),
        mean_queue_ms: mean(&queues),
        rejected: records.iter().filter(|r| r.rejected).count(),
        priority,
    }
}

/// Summary rows in the metrics CSV schema `time_ms,metric,label,value`.
pub fn summary_csv_rows(summary: &MetricsSummary, at: SimTime, run_label: &str) -> String {
    let mut out = String::new();
    let mut row = |metric: &str, label: &str, value: f64| {
        let _ = writeln!(out, "{at},{metric},{run_label}:{label},{value:.6}");
    };
    for p in &summary.phases {
        row("mean_ttft_ms", &p.label, p.mean_ttft_ms);
        row("p90_ttft_ms", &p.label, p.p90_ttft_ms);
    }
    row("median_tpot_ms", "all", summary.median_tpot_ms);
    row("mean_ilt_ms", "all", summary.mean_ilt_ms);
    row("peak_throughput_tps", "all", summary.peak_throughput_tps);
    row("mean_queue_ms", "all", summary.mean_queue_ms);
    row("rejected", "all", summary.rejected as f64);
    if let Some(p) = &summary.priority {
        row("mean_ttft_ms", "priority", p.mean_ttft_high_ms);
        row("mean_ttft_ms", "normal", p.mean_ttft_normal_ms);
        row("mean_tpot_ms", "priority", p.mean_tpot_high_ms);
        row("mean_tpot_ms", "normal", p.mean_tpot_normal_ms);
    }
    out
}
