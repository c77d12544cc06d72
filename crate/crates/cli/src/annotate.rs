use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use splitreason::annotate::{
    annotate_record, dataset_stats, request_snippets, AnnotationRecord, Histogram, StatsSummary,
};
use splitreason::backend::Role;

use crate::config::LoadedConfig;
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub question: String,
    pub trace: String,
    /// Pre-supplied snippets skip the annotator call.
    #[serde(default)]
    pub snippets: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub bin_start: f64,
    pub bin_end: f64,
    pub mass: f64,
}

pub fn histogram_rows(h: &Histogram) -> Vec<HistogramRow> {
    h.rows()
        .into_iter()
        .map(|(bin_start, bin_end, mass)| HistogramRow {
            bin_start,
            bin_end,
            mass,
        })
        .collect()
}

#[derive(Debug)]
pub struct AnnotateOutput {
    pub records: Vec<AnnotationRecord>,
    pub stats: StatsSummary,
    pub warnings: Vec<String>,
    /// Records that needed the annotator.
    pub annotator_calls: usize,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    io::read_lines(path)?
        .into_iter()
        .map(|(n, line)| match serde_json::from_str(&line) {
            Ok(r) => Ok(r),
            Err(e) => bail!("{}:{n}: {e}", path.display()),
        })
        .collect()
}

fn snippets_for(loaded: &LoadedConfig, rec: &CorpusRecord) -> Result<Vec<String>, String> {
    let name = loaded
        .tool
        .annotate
        .annotator
        .as_deref()
        .ok_or("record has no snippets and no annotator is configured")?;
    let template = loaded
        .template()
        .ok_or("annotator configured without a template")?;
    let attempts = loaded.tool.annotate.retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        let mut backend = loaded
            .backend(name, Role::Annotator)
            .map_err(|e| format!("{e:#}"))?;
        match request_snippets(&rec.trace, backend.as_mut(), template) {
            Ok(s) => return Ok(s),
            Err(e) if e.is_retriable() && attempt < attempts => {
                log::warn!("annotator attempt {attempt} failed: {e}");
                last = e.to_string();
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Err(last)
}

pub fn cmd_annotate(
    loaded: &LoadedConfig,
    corpus: &[CorpusRecord],
    workers: usize,
) -> Result<AnnotateOutput> {
    let cfg = &loaded.tool;
    let tags = &cfg.run.config.tags;
    let results = io::parallel_map(corpus, workers, |i, rec| {
        let (snippets, warning, called) = match &rec.snippets {
            Some(s) => (s.clone(), None, false),
            None => match snippets_for(loaded, rec) {
                Ok(s) => (s, None, true),
                Err(e) => (
                    Vec::new(),
                    Some(format!("record {}: {e}; marked partial", i + 1)),
                    true,
                ),
            },
        };
        let record = annotate_record(&rec.question, &rec.trace, &snippets, &cfg.matching, tags);
        (record, warning, called)
    })?;
    let mut warnings = Vec::new();
    if corpus.is_empty() {
        warnings.push("corpus is empty".to_string());
    }
    let mut records = Vec::with_capacity(results.len());
    let mut annotator_calls = 0;
    for (r, w, called) in results {
        records.push(r);
        warnings.extend(w);
        annotator_calls += usize::from(called);
    }
    let stats = dataset_stats(&records, cfg.annotate.bins);
    Ok(AnnotateOutput {
        records,
        stats,
        warnings,
        annotator_calls,
    })
}

pub fn write_outputs(out_dir: &Path, output: &AnnotateOutput) -> Result<()> {
    io::write_jsonl(&out_dir.join("annotations.jsonl"), &output.records)?;
    io::write_csv(
        &out_dir.join("position_histogram.csv"),
        &histogram_rows(&output.stats.position_histogram),
    )?;
    io::write_csv(
        &out_dir.join("offload_histogram.csv"),
        &histogram_rows(&output.stats.offload_fraction_histogram),
    )?;
    io::write_json(&out_dir.join("stats.json"), &output.stats)
}

pub fn summary_line(stats: &StatsSummary) -> String {
    let c = stats.status_counts;
    format!(
        "annotated {} records: ok {}, partial {}, rejected {}",
        stats.records, c.ok, c.partial, c.rejected
    )
}
