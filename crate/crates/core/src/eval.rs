//! Like-vs-dislike popularity index over subjective votes.
//!
//! Per image and algorithm, `pop_ij = ln((likes + c) / (dislikes + c))`; per
//! algorithm, the same ratio over the summed counts. Logs are natural, e.g.
//! 249 likes and 1147 dislikes with `c = 1` score `ln(250 / 1148) = -1.524`.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub image_id: String,
    pub algorithm_id: String,
    pub n_like: u64,
    pub n_dislike: u64,
}

/// One voter's verdict on one image: the best and worst of the algorithms shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    #[serde(deserialize_with = "id")]
    pub voter_id: String,
    #[serde(deserialize_with = "id")]
    pub image_id: String,
    #[serde(deserialize_with = "id")]
    pub best: String,
    #[serde(deserialize_with = "id")]
    pub worst: String,
}

/// Accepts identifiers written as JSON strings or integers.
fn id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Str(String),
        Int(i64),
    }
    Ok(match Id::deserialize(d)? {
        Id::Str(s) => s,
        Id::Int(i) => i.to_string(),
    })
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Param(format!("smoothing constant must be > 0, got {c}")));
    }
    Ok(())
}

fn smoothed_log_ratio(likes: u64, dislikes: u64, c: f64) -> f64 {
    ((likes as f64 + c) / (dislikes as f64 + c)).ln()
}

pub fn pop_image(tally: &VoteTally, c: f64) -> Result<f64> {
    check_c(c)?;
    Ok(smoothed_log_ratio(tally.n_like, tally.n_dislike, c))
}

/// Popularity of one algorithm from all of its per-image tallies.
pub fn pop_algorithm(tallies: &[VoteTally], c: f64) -> Result<f64> {
    check_c(c)?;
    let first = tallies.first().ok_or_else(|| Error::Param("no tallies given".into()))?;
    if let Some(other) = tallies.iter().find(|t| t.algorithm_id != first.algorithm_id) {
        return Err(Error::Param(format!(
            "mixed algorithm ids {:?} and {:?}",
            first.algorithm_id, other.algorithm_id
        )));
    }
    let likes = tallies.iter().map(|t| t.n_like).sum();
    let dislikes = tallies.iter().map(|t| t.n_dislike).sum();
    Ok(smoothed_log_ratio(likes, dislikes, c))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1 (zero for a single image).
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm_id: String,
    pub n_like: u64,
    pub n_dislike: u64,
    pub pop: f64,
    pub mean_pop_image: f64,
    pub variance_pop_image: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopReport {
    pub c: f64,
    pub variance: VarianceKind,
    pub algorithms: Vec<AlgorithmSummary>,
}

/// Per-algorithm popularity, with mean and variance of the per-image scores.
/// Algorithms are reported in id order.
pub fn summarize(tallies: &[VoteTally], c: f64, variance: VarianceKind) -> Result<PopReport> {
    check_c(c)?;
    let mut groups: BTreeMap<&str, Vec<VoteTally>> = BTreeMap::new();
    for t in tallies {
        groups.entry(t.algorithm_id.as_str()).or_default().push(t.clone());
    }
    let mut algorithms = Vec::with_capacity(groups.len());
    for (alg, group) in groups {
        let pops: Vec<f64> = group.iter().map(|t| smoothed_log_ratio(t.n_like, t.n_dislike, c)).collect();
        let n = pops.len() as f64;
        let mean = pops.iter().sum::<f64>() / n;
        let ss: f64 = pops.iter().map(|p| (p - mean) * (p - mean)).sum();
        let var = match variance {
            VarianceKind::Population => ss / n,
            VarianceKind::Sample if pops.len() > 1 => ss / (n - 1.0),
            VarianceKind::Sample => 0.0,
        };
        algorithms.push(AlgorithmSummary {
            algorithm_id: alg.to_string(),
            n_like: group.iter().map(|t| t.n_like).sum(),
            n_dislike: group.iter().map(|t| t.n_dislike).sum(),
            pop: pop_algorithm(&group, c)?,
            mean_pop_image: mean,
            variance_pop_image: var,
            images: group.len(),
        });
    }
    Ok(PopReport { c, variance, algorithms })
}

impl PopReport {
    /// Text table with one column per algorithm.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, Vec<String>)> = vec![
            ("method".into(), self.algorithms.iter().map(|a| a.algorithm_id.clone()).collect()),
            ("n_like".into(), self.algorithms.iter().map(|a| a.n_like.to_string()).collect()),
            ("n_dislike".into(), self.algorithms.iter().map(|a| a.n_dislike.to_string()).collect()),
            ("pop_j".into(), self.algorithms.iter().map(|a| format!("{:.3}", a.pop)).collect()),
            (
                "variance(pop_ij)".into(),
                self.algorithms.iter().map(|a| format!("{:.3}", a.variance_pop_image)).collect(),
            ),
            ("mean(pop_ij)".into(), self.algorithms.iter().map(|a| format!("{:.3}", a.mean_pop_image)).collect()),
        ];
        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let col_w: Vec<usize> = (0..self.algorithms.len())
            .map(|i| rows.iter().map(|r| r.1[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (label, cells) in rows.drain(..) {
            out.push_str(&format!("{label:<label_w$}"));
            for (cell, w) in cells.iter().zip(&col_w) {
                out.push_str(&format!(" | {cell:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Accumulated tallies plus the number of rejected records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TallyBook {
    counts: BTreeMap<(String, String), (u64, u64)>,
    pub rejected: usize,
}

impl TallyBook {
    pub fn record(&mut self, r: &VoteRecord) -> bool {
        if r.best == r.worst {
            self.rejected += 1;
            return false;
        }
        self.counts.entry((r.image_id.clone(), r.best.clone())).or_default().0 += 1;
        self.counts.entry((r.image_id.clone(), r.worst.clone())).or_default().1 += 1;
        true
    }

    /// Order-independent merge of two partial books.
    pub fn merge(&mut self, other: &TallyBook) {
        for (k, (l, d)) in &other.counts {
            let e = self.counts.entry(k.clone()).or_default();
            e.0 += l;
            e.1 += d;
        }
        self.rejected += other.rejected;
    }

    pub fn tallies(&self) -> Vec<VoteTally> {
        self.counts
            .iter()
            .map(|((image, alg), &(l, d))| VoteTally {
                image_id: image.clone(),
                algorithm_id: alg.clone(),
                n_like: l,
                n_dislike: d,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn ingest_votes<'a>(records: impl IntoIterator<Item = &'a VoteRecord>) -> TallyBook {
    let mut book = TallyBook::default();
    for r in records {
        book.record(r);
    }
    book
}

/// Reads line-delimited JSON vote records, skipping blank lines.
pub fn read_vote_records(reader: impl BufRead) -> Result<Vec<VoteRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Param(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Param(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
