//! AP@k / mAP@k computation and benchmark report rendering.
//!
//! AP uses the retrieval convention: precision is accumulated at the rank of
//! each relevant hit within the top-k prefix and divided by the number of
//! relevant items retrieved there; a query with no relevant item in the
//! prefix scores 0 and stays in the mean.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::{RetrievalDatabase, RetrievalResult};
use crate::types::{similarity, LabelSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query set is empty")]
    NoQueries,
    #[error("relevance length {0} != ranked length {1}")]
    RaggedRelevance(usize, usize),
    #[error("mAP value {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("report is empty")]
    EmptyReport,
    #[error("ranked entry id {0} not present in database")]
    UnknownId(u64),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One query's ranked results with binary relevance per rank.
#[derive(Debug, Clone)]
pub struct QueryRelevance {
    pub ranked: Vec<(u64, u32)>,
    pub relevance: Vec<bool>,
}

impl QueryRelevance {
    pub fn new(ranked: Vec<(u64, u32)>, relevance: Vec<bool>) -> Result<Self, EvalError> {
        if ranked.len() != relevance.len() {
            return Err(EvalError::RaggedRelevance(relevance.len(), ranked.len()));
        }
        Ok(QueryRelevance { ranked, relevance })
    }

    /// Labels a ranked result against a database: a hit is relevant iff its
    /// label set intersects the query's.
    pub fn from_result(
        result: &RetrievalResult,
        query_labels: &LabelSet,
        db: &RetrievalDatabase,
    ) -> Result<Self, EvalError> {
        let by_id: HashMap<u64, &LabelSet> =
            db.ids().iter().copied().zip(db.labels().iter()).collect();
        let mut relevance = Vec::with_capacity(result.entries.len());
        for &(id, _) in &result.entries {
            let labels = by_id.get(&id).ok_or(EvalError::UnknownId(id))?;
            relevance.push(similarity(query_labels, labels).unwrap_or(0) == 1);
        }
        Ok(QueryRelevance {
            ranked: result.entries.clone(),
            relevance,
        })
    }
}

/// Average precision over the first `min(k, n)` ranks.
///
/// `AP = sum_i Prec(i) * rel(i) / max(1, sum_i rel(i))`, zero when nothing
/// relevant is retrieved.
pub fn average_precision_at_k(rel: &QueryRelevance, k: usize) -> f64 {
    let cut = k.min(rel.relevance.len());
    let mut hits = 0u64;
    let mut sum = 0.0;
    for i in 0..cut {
        if rel.relevance[i] {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Arithmetic mean of AP_k over a non-empty query set, in fixed query order.
pub fn mean_average_precision(queries: &[QueryRelevance], k: usize) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let sum: f64 = queries.iter().map(|q| average_precision_at_k(q, k)).sum();
    Ok(sum / queries.len() as f64)
}

/// mAP plus the count of queries that had no relevant item anywhere in the
/// database (they score 0 but stay in the mean).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOutcome {
    pub map: f64,
    pub num_queries: usize,
    pub zero_relevant_queries: usize,
}

/// Evaluates a full query pool against a database: search, label, average.
pub fn evaluate_queries(
    db: &RetrievalDatabase,
    queries: &[(u64, crate::types::HashCode, LabelSet)],
    map_k: usize,
) -> Result<MapOutcome, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut rels = Vec::with_capacity(queries.len());
    let mut zero_relevant = 0usize;
    for (_, code, labels) in queries {
        let result = db.search(code, map_k)?;
        let rel = QueryRelevance::from_result(&result, labels, db)?;
        if !db
            .labels()
            .iter()
            .any(|l| similarity(labels, l).unwrap_or(0) == 1)
        {
            zero_relevant += 1;
        }
        rels.push(rel);
    }
    Ok(MapOutcome {
        map: mean_average_precision(&rels, map_k)?,
        num_queries: queries.len(),
        zero_relevant_queries: zero_relevant,
    })
}

/// One benchmark measurement; the machine-readable record row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportEntry {
    pub dataset: String,
    pub loss: String,
    pub backbone_width: usize,
    pub bits: usize,
    pub run_seed: u64,
    pub map: f64,
    pub num_queries: usize,
    pub k: usize,
}

/// Per-(dataset, loss, backbone, bits) measurements over one or more runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkReport {
    pub entries: Vec<ReportEntry>,
    /// content digest of the experiment config that produced the entries
    pub config_hash: Option<String>,
}

impl BenchmarkReport {
    pub fn push(&mut self, entry: ReportEntry) -> Result<(), EvalError> {
        if !(0.0..=1.0).contains(&entry.map) {
            return Err(EvalError::OutOfRange(entry.map));
        }
        self.entries.push(entry);
        Ok(())
    }
}

fn fmt_percent(map: f64) -> String {
    format!("{:.1}", map * 100.0)
}

/// Renders the aligned text table: one row per (loss, backbone), one column
/// per (dataset, bits), cell = mean mAP over runs in percent to one decimal.
pub fn render_table(report: &BenchmarkReport) -> Result<String, EvalError> {
    if report.entries.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut datasets: Vec<String> = Vec::new();
    let mut bits: Vec<usize> = Vec::new();
    let mut rows: Vec<(String, usize)> = Vec::new();
    for e in &report.entries {
        if !datasets.contains(&e.dataset) {
            datasets.push(e.dataset.clone());
        }
        if !bits.contains(&e.bits) {
            bits.push(e.bits);
        }
        let row = (e.loss.clone(), e.backbone_width);
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    bits.sort_unstable();

    // mean over runs per cell
    let mut cells: HashMap<(String, usize, String, usize), (f64, usize)> = HashMap::new();
    for e in &report.entries {
        let key = (e.loss.clone(), e.backbone_width, e.dataset.clone(), e.bits);
        let slot = cells.entry(key).or_insert((0.0, 0));
        slot.0 += e.map;
        slot.1 += 1;
    }

    let row_header_width = rows
        .iter()
        .map(|(l, w)| format!("{l} (W{w})").len())
        .max()
        .unwrap()
        .max("bits".len());
    let cell_w = 6usize;

    let mut out = String::new();
    out.push_str(&format!("{:<row_header_width$}", ""));
    for d in &datasets {
        out.push_str(&format!(
            " | {:^width$}",
            d,
            width = cell_w * bits.len() + bits.len() - 1
        ));
    }
    out.push('\n');
    out.push_str(&format!("{:<row_header_width$}", "bits"));
    for _ in &datasets {
        out.push_str(" |");
        for b in &bits {
            out.push_str(&format!("{:>cell_w$}", b));
            out.push(' ');
        }
        out.pop();
    }
    out.push('\n');
    let total_width = row_header_width + datasets.len() * (3 + cell_w * bits.len() + bits.len() - 1);
    out.push_str(&"-".repeat(total_width));
    out.push('\n');
    for (loss, width) in &rows {
        out.push_str(&format!("{:<row_header_width$}", format!("{loss} (W{width})")));
        for d in &datasets {
            out.push_str(" |");
            for b in &bits {
                let cell = cells
                    .get(&(loss.clone(), *width, d.clone(), *b))
                    .map(|(sum, n)| fmt_percent(sum / *n as f64))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!("{:>cell_w$}", cell));
                out.push(' ');
            }
            out.pop();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes the line-delimited record file, one JSON object per entry.
pub fn write_records<W: Write>(report: &BenchmarkReport, w: &mut W) -> Result<(), EvalError> {
    if report.entries.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    for e in &report.entries {
        serde_json::to_writer(&mut *w, e).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(pattern: &[u8]) -> QueryRelevance {
        QueryRelevance {
            ranked: pattern
                .iter()
                .enumerate()
                .map(|(i, _)| (i as u64, i as u32))
                .collect(),
            relevance: pattern.iter().map(|&b| b == 1).collect(),
        }
    }

    /// Independent brute-force AP used as oracle: literal prefix-precision sums.
    fn ap_oracle(relevance: &[bool], k: usize) -> f64 {
        let cut = k.min(relevance.len());
        let mut terms = Vec::new();
        for i in 1..=cut {
            if relevance[i - 1] {
                let rel_in_prefix = relevance[..i].iter().filter(|&&r| r).count();
                terms.push(rel_in_prefix as f64 / i as f64);
            }
        }
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        }
    }

    #[test]
    fn ap_all_relevant_is_one() {
        assert_eq!(average_precision_at_k(&rel(&[1, 1, 1]), 3), 1.0);
    }

    #[test]
    fn ap_none_relevant_is_zero() {
        assert_eq!(average_precision_at_k(&rel(&[0, 0, 0]), 3), 0.0);
    }

    #[test]
    fn ap_hand_computed_pattern() {
        // [1,0,1] with k=3: (1/1 + 2/3)/2 = 5/6
        let got = average_precision_at_k(&rel(&[1, 0, 1]), 3);
        assert!((got - 5.0 / 6.0).abs() < 1e-15);
        assert!((got - ap_oracle(&[true, false, true], 3)).abs() < 1e-15);
    }

    #[test]
    fn ap_k_larger_than_ranking() {
        let got = average_precision_at_k(&rel(&[0, 1]), 10);
        assert!((got - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ap_promoting_relevant_within_window_never_decreases() {
        // Swapping a relevant item one rank earlier past an irrelevant
        // neighbor cannot lower AP when both ranks sit inside the top-k
        // window. (Crossing the window boundary can lower it: pulling a
        // relevant item into the prefix also grows the denominator, e.g.
        // [1,0,0,1]@3 = 1.0 but [1,0,1,0]@3 = 5/6.)
        for pattern in [[0u8, 1, 0, 1], [1, 0, 0, 1], [0, 0, 1, 1]] {
            for k in 1..=4 {
                let before = average_precision_at_k(&rel(&pattern), k);
                for i in 1..k.min(4) {
                    if pattern[i] == 1 && pattern[i - 1] == 0 {
                        let mut swapped = pattern;
                        swapped.swap(i - 1, i);
                        let after = average_precision_at_k(&rel(&swapped), k);
                        assert!(after >= before - 1e-15, "{pattern:?}@{k}: {before} -> {after}");
                    }
                }
            }
        }
        let boundary_before = average_precision_at_k(&rel(&[1, 0, 0, 1]), 3);
        let boundary_after = average_precision_at_k(&rel(&[1, 0, 1, 0]), 3);
        assert_eq!(boundary_before, 1.0);
        assert!((boundary_after - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn map_is_mean_of_aps() {
        let qs = vec![rel(&[1, 1]), rel(&[0, 0])];
        assert_eq!(mean_average_precision(&qs, 2).unwrap(), 0.5);
        assert_eq!(mean_average_precision(&qs[..1], 2).unwrap(), 1.0);
        assert!(mean_average_precision(&[], 2).is_err());
    }

    #[test]
    fn ap_matches_oracle_on_random_patterns() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..500 {
            let n = (next() % 50 + 1) as usize;
            let pattern: Vec<bool> = (0..n).map(|_| next() % 2 == 0).collect();
            let k = (next() % 20 + 1) as usize;
            let qr = QueryRelevance {
                ranked: (0..n as u64).map(|i| (i, i as u32)).collect(),
                relevance: pattern.clone(),
            };
            let a = average_precision_at_k(&qr, k);
            let b = ap_oracle(&pattern, k);
            assert!((a - b).abs() < 1e-12, "ap={a} oracle={b}");
        }
    }

    #[test]
    fn table_formats_percent_to_one_decimal() {
        assert_eq!(fmt_percent(0.915), "91.5");
        let mut report = BenchmarkReport::default();
        report
            .push(ReportEntry {
                dataset: "imagenet".into(),
                loss: "dch".into(),
                backbone_width: 64,
                bits: 32,
                run_seed: 0,
                map: 0.915,
                num_queries: 100,
                k: 5000,
            })
            .unwrap();
        let table = render_table(&report).unwrap();
        assert!(table.contains("91.5"), "{table}");
        assert!(table.contains("dch (W64)"));
    }

    #[test]
    fn empty_report_rejected() {
        assert!(render_table(&BenchmarkReport::default()).is_err());
        let mut sink = Vec::new();
        assert!(write_records(&BenchmarkReport::default(), &mut sink).is_err());
    }

    #[test]
    fn out_of_range_map_rejected() {
        let mut report = BenchmarkReport::default();
        let bad = ReportEntry {
            dataset: "d".into(),
            loss: "cel".into(),
            backbone_width: 18,
            bits: 16,
            run_seed: 0,
            map: 1.2,
            num_queries: 1,
            k: 10,
        };
        assert!(report.push(bad).is_err());
    }
}
