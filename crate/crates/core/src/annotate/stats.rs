//! Corpus statistics over annotation records.

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, RecordStatus};
use crate::text;

pub const DEFAULT_BINS: usize = 20;

/// Fixed-width histogram over [0, 1]. Values equal to 1 fall in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        Self {
            counts: vec![0; bins.max(1)],
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let n = self.bins();
        ((x.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n - 1)
    }

    pub fn add(&mut self, x: f64) {
        let b = self.bin_of(x);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized masses; all zero when empty.
    pub fn masses(&self) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }

    pub fn edges(&self) -> Vec<(f64, f64)> {
        let n = self.bins() as f64;
        (0..self.bins())
            .map(|i| (i as f64 / n, (i + 1) as f64 / n))
            .collect()
    }

    /// (bin_start, bin_end, mass) rows.
    pub fn rows(&self) -> Vec<(f64, f64, f64)> {
        self.edges()
            .into_iter()
            .zip(self.masses())
            .map(|((a, b), m)| (a, b, m))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusCounts {
    pub ok: u64,
    pub partial: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    /// Span midpoints over normalized trace position.
    pub position_histogram: Histogram,
    /// One value per usable record.
    pub offload_fraction_histogram: Histogram,
    pub status_counts: StatusCounts,
    pub records: u64,
    pub empty: bool,
}

/// Histograms over ok and partial records. Independent of record order.
pub fn dataset_stats<'a, I>(records: I, bins: usize) -> StatsSummary
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    let mut position = Histogram::new(bins);
    let mut fraction = Histogram::new(bins);
    let mut counts = StatusCounts::default();
    let mut n = 0u64;
    for r in records {
        n += 1;
        match r.status {
            RecordStatus::Ok => counts.ok += 1,
            RecordStatus::Partial { .. } => counts.partial += 1,
            RecordStatus::Rejected { .. } => {
                counts.rejected += 1;
                continue;
            }
        }
        fraction.add(r.offload_fraction);
        let len = text::char_len(&r.trace);
        if len == 0 {
            continue;
        }
        for s in &r.matched_spans {
            position.add((s.start + s.end) as f64 / 2.0 / len as f64);
        }
    }
    StatsSummary {
        position_histogram: position,
        offload_fraction_histogram: fraction,
        status_counts: counts,
        records: n,
        empty: n == 0,
    }
}
