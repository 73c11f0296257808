//! Training objectives: contrastive, alignment (KL) and mutual-information
//! terms, the momentum parameter update and the loss combiner.
//!
//! Each objective has a tape form used for training and a plain form over
//! arrays for evaluation and testing.

mod mine;

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{Modality, ParameterStore};
use crate::error::{Error, Result};
use crate::kg::AlignedPair;

pub use mine::{dv_bound, mi_loss, mine_objective, MineEma, MineNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub kappa: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.1, kappa: 0.999 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("kappa must lie in [0, 1), got {}", self.kappa)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("temperature must be positive, got {tau}")))
    }
}

/// Aligned pairs trained together. For anchor i the same-side negatives are
/// the other source entities of the batch and the cross-side negatives the
/// other target entities.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBatch {
    pairs: Vec<AlignedPair>,
}

impl CandidateBatch {
    pub fn new(pairs: Vec<AlignedPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Argument("candidate batch is empty".into()));
        }
        let mut s: Vec<_> = pairs.iter().map(|p| p.source).collect();
        let mut t: Vec<_> = pairs.iter().map(|p| p.target).collect();
        s.sort_unstable();
        t.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) || t.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("candidate batch repeats an entity".into()));
        }
        Ok(CandidateBatch { pairs })
    }

    pub fn pairs(&self) -> &[AlignedPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.source).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.target).collect()
    }

    /// Batch positions of the same-side negatives of anchor `i`.
    pub fn same_side_negatives(&self, i: usize) -> impl Iterator<Item = usize> {
        (0..self.len()).filter(move |&j| j != i)
    }

    /// Batch positions of the cross-side negatives of anchor `i`.
    pub fn cross_side_negatives(&self, i: usize) -> impl Iterator<Item = usize> {
        (0..self.len()).filter(move |&j| j != i)
    }
}

/// Softmax of `anchor · candidate_k / tau` over the candidate rows.
pub fn alignment_distribution(anchor: ArrayView1<f64>, candidates: ArrayView2<f64>, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if candidates.nrows() == 0 {
        return Err(Error::Argument("need at least one candidate".into()));
    }
    let logits = candidates.dot(&anchor) / tau;
    let m = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - m).exp());
    let z = e.sum();
    Ok(e.iter().map(|v| v / z).collect())
}

/// Probability the anchor assigns to its positive against the given
/// negatives, with similarities exp(uᵀv / tau).
pub fn contrastive_q(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    same_side: ArrayView2<f64>,
    cross_side: ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let pos = anchor.dot(&positive) / tau;
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(same_side.dot(&anchor).iter().map(|v| v / tau))
        .chain(cross_side.dot(&anchor).iter().map(|v| v / tau))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    Ok((pos - m).exp() / z)
}

/// Mask over `[cross | same]` candidate logits: every cross-side entry plus
/// the off-diagonal same-side entries.
fn candidate_mask(b: usize) -> Arc<Array2<bool>> {
    Arc::new(Array2::from_shape_fn((b, 2 * b), |(i, j)| j < b || j - b != i))
}

/// Row i holds log-probabilities of anchor i over its candidates laid out
/// as `[cross-side (positive at column i) | same-side]`.
fn candidate_log_probs(g: &mut Graph, anchors: Var, same: Var, cross: Var, tau: f64) -> Var {
    let b = g.shape(anchors).0;
    let c = g.matmul_nt(anchors, cross);
    let s = g.matmul_nt(anchors, same);
    let logits = g.concat_cols(&[c, s]);
    let logits = g.scale(logits, 1.0 / tau);
    g.masked_log_softmax(logits, candidate_mask(b))
}

/// Bidirectional contrastive loss on the tape.
///
/// `x1`, `x2` are online embeddings of the batch's source and target
/// entities; `y1`, `y2` the momentum-path embeddings of the same rows.
pub fn contrastive_loss_graph(g: &mut Graph, x1: Var, x2: Var, y1: Var, y2: Var, tau: f64) -> Var {
    let b = g.shape(x1).0;
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let l12 = candidate_log_probs(g, x1, y1, y2, tau);
    let l12 = g.pick(l12, &diag);
    let l21 = candidate_log_probs(g, x2, y2, y1, tau);
    let l21 = g.pick(l21, &diag);
    let both = g.log_add_exp(l12, l21);
    let m = g.mean(both);
    let shifted = g.scale(m, -1.0);
    let ln2 = g.constant(Array2::from_elem((1, 1), std::f64::consts::LN_2));
    g.add(shifted, ln2)
}

/// Bidirectional KL from the joint-space candidate distribution (held
/// fixed) to the modality-space distribution, averaged over anchors.
pub fn align_loss_graph(g: &mut Graph, j1: Var, j2: Var, m1: Var, m2: Var, tau: f64) -> Var {
    let b = g.shape(j1).0;
    let mut terms = Vec::with_capacity(2);
    for (ja, jb, ma, mb) in [(j1, j2, m1, m2), (j2, j1, m2, m1)] {
        let (ja, jb) = (g.detach(ja), g.detach(jb));
        let logp = candidate_log_probs(g, ja, ja, jb, tau);
        let mask = candidate_mask(b);
        let lp = g.value(logp).clone();
        let p = Array2::from_shape_fn(lp.dim(), |ix| if mask[ix] { lp[ix].exp() } else { 0.0 });
        let entropy_part = (&p * &lp).sum();
        let logq = candidate_log_probs(g, ma, ma, mb, tau);
        let pv = g.constant(p);
        let cross = g.mul(pv, logq);
        let cross = g.sum(cross);
        let neg = g.scale(cross, -1.0);
        let c = g.constant(Array2::from_elem((1, 1), entropy_part));
        terms.push(g.add(c, neg));
    }
    let sum = g.add(terms[0], terms[1]);
    g.scale(sum, 1.0 / b as f64)
}

fn check_batch(rows: &[&Array2<f64>]) -> Result<()> {
    let b = rows[0].nrows();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if rows.iter().any(|r| r.nrows() != b) {
        return Err(Error::Argument("batch embeddings have different row counts".into()));
    }
    Ok(())
}

/// Contrastive loss over plain arrays. Row i of each input belongs to pair i.
pub fn contrastive_loss(
    online_src: &Array2<f64>,
    online_tgt: &Array2<f64>,
    momentum_src: &Array2<f64>,
    momentum_tgt: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_batch(&[online_src, online_tgt, momentum_src, momentum_tgt])?;
    let mut g = Graph::new();
    let [x1, x2, y1, y2] = [online_src, online_tgt, momentum_src, momentum_tgt].map(|a| g.constant(a.clone()));
    let l = contrastive_loss_graph(&mut g, x1, x2, y1, y2, tau);
    Ok(g.scalar(l))
}

/// Alignment loss over plain arrays. Row i of each input belongs to pair i.
pub fn align_loss(
    joint_src: &Array2<f64>,
    joint_tgt: &Array2<f64>,
    modal_src: &Array2<f64>,
    modal_tgt: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_batch(&[joint_src, joint_tgt, modal_src, modal_tgt])?;
    let mut g = Graph::new();
    let [j1, j2, m1, m2] = [joint_src, joint_tgt, modal_src, modal_tgt].map(|a| g.constant(a.clone()));
    let l = align_loss_graph(&mut g, j1, j2, m1, m2, tau);
    Ok(g.scalar(l))
}

/// θ_target ← κ·θ_target + (1−κ)·θ_online for every parameter.
pub fn momentum_update(target: &mut ParameterStore, online: &ParameterStore, kappa: f64) {
    assert!(target.same_schema(online), "momentum update between stores with different schemas");
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        ndarray::Zip::from(t).and(o).for_each(|t, &o| *t = kappa * *t + (1.0 - kappa) * o);
    }
}

/// Labels of the contrastive terms: the six modalities then the joint embedding.
pub const CL_TERMS: [&str; 7] = ["structure", "rel_bow", "rel_plm", "attr_bow", "attr_plm", "visual", "joint"];

/// Per-term loss values of one batch or epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_al: [f64; 6],
    pub l_mi: f64,
    pub l_cl: [f64; 7],
    pub total: f64,
}

/// Sum six alignment terms, the MI term and seven contrastive terms.
pub fn total_loss(l_al: [f64; 6], l_mi: f64, l_cl: [f64; 7]) -> LossBreakdown {
    let total = l_al.iter().sum::<f64>() + l_mi + l_cl.iter().sum::<f64>();
    LossBreakdown { l_al, l_mi, l_cl, total }
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        if parts.is_empty() {
            return out;
        }
        let k = parts.len() as f64;
        for p in parts {
            for m in 0..6 {
                out.l_al[m] += p.l_al[m] / k;
            }
            for m in 0..7 {
                out.l_cl[m] += p.l_cl[m] / k;
            }
            out.l_mi += p.l_mi / k;
            out.total += p.total / k;
        }
        out
    }

    /// Named-field JSON object for history logging.
    pub fn to_json(&self, epoch: usize) -> serde_json::Value {
        let al: serde_json::Map<_, _> =
            Modality::ALL.iter().map(|m| (m.name().to_string(), self.l_al[m.index()].into())).collect();
        let cl: serde_json::Map<_, _> = CL_TERMS.iter().zip(self.l_cl).map(|(n, v)| (n.to_string(), v.into())).collect();
        serde_json::json!({
            "epoch": epoch,
            "l_al": al,
            "l_mi": self.l_mi,
            "l_cl": cl,
            "total": self.total,
        })
    }

    /// Parse the object written by [`LossBreakdown::to_json`].
    pub fn from_json(v: &serde_json::Value) -> Result<(usize, LossBreakdown)> {
        let bad = || Error::Format(format!("malformed loss record: {v}"));
        let num = |x: &serde_json::Value| x.as_f64().ok_or_else(bad);
        let epoch = v["epoch"].as_u64().ok_or_else(bad)? as usize;
        let mut out = LossBreakdown { l_mi: num(&v["l_mi"])?, total: num(&v["total"])?, ..Default::default() };
        for m in Modality::ALL {
            out.l_al[m.index()] = num(&v["l_al"][m.name()])?;
        }
        for (k, n) in CL_TERMS.iter().enumerate() {
            out.l_cl[k] = num(&v["l_cl"][*n])?;
        }
        Ok((epoch, out))
    }
}

#[cfg(test)]
mod tests;
