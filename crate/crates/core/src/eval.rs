//! Ranking metrics, alignment export and plot data.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::SeedAlignmentSet;
use crate::par;

/// Cosine similarities between source rows and candidate target columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// Source entity index of each row.
    pub rows: Vec<usize>,
    /// Target entity index of each column.
    pub cols: Vec<usize>,
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn transpose(&self) -> SimilarityMatrix {
        SimilarityMatrix { rows: self.cols.clone(), cols: self.rows.clone(), values: self.values.t().to_owned() }
    }
}

/// Dot products of unit-norm rows: `src · tgtᵀ`.
pub fn similarity_matrix(src: &Array2<f64>, tgt: &Array2<f64>) -> Result<Array2<f64>> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::Validation(format!(
            "embedding widths differ: {} vs {}",
            src.ncols(),
            tgt.ncols()
        )));
    }
    Ok(src.dot(&tgt.t()))
}

/// Similarities between the chosen source and target entities.
pub fn similarity_for(src: &Array2<f64>, tgt: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Result<SimilarityMatrix> {
    let a = src.select(ndarray::Axis(0), rows);
    let b = tgt.select(ndarray::Axis(0), cols);
    Ok(SimilarityMatrix { rows: rows.to_vec(), cols: cols.to_vec(), values: similarity_matrix(&a, &b)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
    Mean,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// (k, fraction of queries with rank ≤ k), in increasing k.
    pub hits: Vec<(usize, f64)>,
    pub mrr: f64,
    pub n_queries: usize,
    pub direction: Direction,
}

impl EvalReport {
    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.hits {
            m.insert(format!("hits@{k}"), (*v).into());
        }
        m.insert("mrr".into(), self.mrr.into());
        m.insert("n_queries".into(), self.n_queries.into());
        m.insert("direction".into(), serde_json::to_value(self.direction).expect("enum serializes"));
        serde_json::Value::Object(m)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.hits {
            writeln!(f, "{:<10} {v:.4}", format!("hits@{k}"))?;
        }
        writeln!(f, "{:<10} {:.4}", "mrr", self.mrr)?;
        write!(f, "{:<10} {}", "queries", self.n_queries)
    }
}

/// 1 + number of entries above the gold score + number of other entries
/// equal to it.
pub fn pessimistic_rank(row: ArrayView1<f64>, gold: usize) -> usize {
    let g = row[gold];
    1 + row.iter().enumerate().filter(|(j, v)| *j != gold && **v >= g).count()
}

/// Hits@k and MRR of the gold targets, source to target.
pub fn rank_metrics(sim: &SimilarityMatrix, gold: &SeedAlignmentSet, ks: &[usize]) -> Result<EvalReport> {
    rank_pairs(sim, gold.pairs().iter().map(|p| (p.source, p.target)).collect(), ks, Direction::SourceToTarget)
}

fn rank_pairs(sim: &SimilarityMatrix, gold: Vec<(usize, usize)>, ks: &[usize], direction: Direction) -> Result<EvalReport> {
    let row_of: std::collections::HashMap<usize, usize> = sim.rows.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let col_of: std::collections::HashMap<usize, usize> = sim.cols.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let mut queries = Vec::with_capacity(gold.len());
    for (s, t) in gold {
        let r = *row_of.get(&s).ok_or_else(|| Error::Validation(format!("gold source {s} is not a matrix row")))?;
        let c = *col_of
            .get(&t)
            .ok_or_else(|| Error::Validation(format!("gold target {t} is not among the candidates")))?;
        queries.push((r, c));
    }
    let ranks = par::map_slice(&queries, |&(r, c)| pessimistic_rank(sim.values.row(r), c));
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let n = ranks.len();
    let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let hits = ks.iter().map(|&k| (k, frac(ranks.iter().filter(|&&r| r <= k).count()))).collect();
    let mrr = if n == 0 { 0.0 } else { ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64 };
    Ok(EvalReport { hits, mrr, n_queries: n, direction })
}

/// Rank test pairs in the requested direction. In `Mean` mode both
/// directions are computed and their metrics averaged.
pub fn evaluate(sim: &SimilarityMatrix, gold: &SeedAlignmentSet, ks: &[usize], direction: Direction) -> Result<EvalReport> {
    let fwd: Vec<_> = gold.pairs().iter().map(|p| (p.source, p.target)).collect();
    let back: Vec<_> = gold.pairs().iter().map(|p| (p.target, p.source)).collect();
    match direction {
        Direction::SourceToTarget => rank_pairs(sim, fwd, ks, direction),
        Direction::TargetToSource => rank_pairs(&sim.transpose(), back, ks, direction),
        Direction::Mean => {
            let a = rank_pairs(sim, fwd, ks, direction)?;
            let b = rank_pairs(&sim.transpose(), back, ks, direction)?;
            Ok(EvalReport {
                hits: a.hits.iter().zip(&b.hits).map(|((k, x), (_, y))| (*k, (x + y) / 2.0)).collect(),
                mrr: (a.mrr + b.mrr) / 2.0,
                n_queries: a.n_queries,
                direction,
            })
        }
    }
}

/// Best candidate of each row; ties go to the earlier column.
pub fn top1(sim: &SimilarityMatrix) -> Vec<(usize, usize, f64)> {
    sim.rows
        .iter()
        .enumerate()
        .filter(|_| !sim.cols.is_empty())
        .map(|(i, &s)| {
            let row = sim.values.row(i);
            let best = (1..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            (s, sim.cols[best], row[best])
        })
        .collect()
}

/// Write `source<TAB>target<TAB>score` for each row's top-1 prediction,
/// ordered by source index, optionally keeping only scores ≥ `threshold`.
pub fn export_alignments(sim: &SimilarityMatrix, names: (&[String], &[String]), threshold: Option<f64>, path: &Path) -> Result<usize> {
    let mut preds = top1(sim);
    preds.sort_by_key(|p| p.0);
    let mut buf = String::new();
    let mut n = 0;
    for (s, t, score) in preds {
        if threshold.is_some_and(|th| score < th) {
            continue;
        }
        buf.push_str(&format!("{}\t{}\t{score:.6}\n", names.0[s], names.1[t]));
        n += 1;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(buf.as_bytes())).map_err(|e| Error::io(path, e))?;
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotQuantity {
    Hits1VsEpoch,
    MrrVsEpoch,
    LossVsEpoch,
}

impl PlotQuantity {
    pub const ALL: [PlotQuantity; 3] = [PlotQuantity::Hits1VsEpoch, PlotQuantity::MrrVsEpoch, PlotQuantity::LossVsEpoch];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hits1_vs_epoch" => Ok(PlotQuantity::Hits1VsEpoch),
            "mrr_vs_epoch" => Ok(PlotQuantity::MrrVsEpoch),
            "loss_vs_epoch" => Ok(PlotQuantity::LossVsEpoch),
            other => Err(Error::Argument(format!(
                "unknown quantity '{other}' (expected hits1_vs_epoch, mrr_vs_epoch or loss_vs_epoch)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlotQuantity::Hits1VsEpoch => "hits1_vs_epoch",
            PlotQuantity::MrrVsEpoch => "mrr_vs_epoch",
            PlotQuantity::LossVsEpoch => "loss_vs_epoch",
        }
    }

    fn column(self) -> &'static str {
        match self {
            PlotQuantity::Hits1VsEpoch => "hits1",
            PlotQuantity::MrrVsEpoch => "mrr",
            PlotQuantity::LossVsEpoch => "loss",
        }
    }

    fn extract(self, record: &serde_json::Value) -> Option<f64> {
        match self {
            PlotQuantity::Hits1VsEpoch => record["eval"]["hits@1"].as_f64(),
            PlotQuantity::MrrVsEpoch => record["eval"]["mrr"].as_f64(),
            PlotQuantity::LossVsEpoch => record["total"].as_f64(),
        }
    }
}

/// Two-column `epoch,value` CSV from a JSON-lines history file. Epochs
/// without the quantity (for example, no evaluation that epoch) are skipped.
pub fn emit_plot_data(history: &Path, quantity: PlotQuantity, out: &Path) -> Result<usize> {
    let text = fs::read_to_string(history).map_err(|e| Error::io(history, e))?;
    let mut buf = format!("epoch,{}\n", quantity.column());
    let mut n = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::parse(history, i + 1, e.to_string()))?;
        let epoch = v["epoch"].as_u64().ok_or_else(|| Error::parse(history, i + 1, "missing epoch"))?;
        if let Some(x) = quantity.extract(&v) {
            buf.push_str(&format!("{epoch},{x:?}\n"));
            n += 1;
        }
    }
    fs::File::create(out).and_then(|mut f| f.write_all(buf.as_bytes())).map_err(|e| Error::io(out, e))?;
    Ok(n)
}
