use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::kg::{AlignedPair, SeedAlignmentSet};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub target: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub target: usize,
    pub epoch: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotedPair {
    pub source: usize,
    pub target: usize,
    pub epoch: usize,
}

/// Latest prediction per unlabeled source, plus the pairs promoted to
/// training positives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    pub dictionary: BTreeMap<usize, DictionaryEntry>,
    pub promoted: Vec<PromotedPair>,
}

impl PseudoLabelStore {
    pub fn promoted_pairs(&self) -> Vec<AlignedPair> {
        self.promoted.iter().map(|p| AlignedPair::new(p.source, p.target)).collect()
    }

    /// Sources and targets not yet covered by `seeds` or promoted pairs.
    pub fn unlabeled(&self, n_source: usize, n_target: usize, seeds: &SeedAlignmentSet) -> (Vec<usize>, Vec<usize>) {
        let used_s: HashSet<usize> =
            seeds.pairs().iter().map(|p| p.source).chain(self.promoted.iter().map(|p| p.source)).collect();
        let used_t: HashSet<usize> =
            seeds.pairs().iter().map(|p| p.target).chain(self.promoted.iter().map(|p| p.target)).collect();
        (
            (0..n_source).filter(|s| !used_s.contains(s)).collect(),
            (0..n_target).filter(|t| !used_t.contains(t)).collect(),
        )
    }
}

/// Index (into `candidates`) of the highest-scoring entry; ties go to the
/// earliest.
fn argmax(scores: &Array1<f64>) -> usize {
    (1..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b })
}

/// Best candidate target of each unlabeled source by cosine similarity of
/// unit-norm rows. Ties go to the lower target index.
pub fn predict_unlabeled(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    unlabeled_src: &[usize],
    candidate_tgt: &[usize],
) -> BTreeMap<usize, Prediction> {
    if candidate_tgt.is_empty() {
        return BTreeMap::new();
    }
    let mut cands = candidate_tgt.to_vec();
    cands.sort_unstable();
    let cand_rows = tgt.select(ndarray::Axis(0), &cands);
    let preds = par::map_slice(unlabeled_src, |&s| {
        let scores = cand_rows.dot(&src.row(s));
        let k = argmax(&scores);
        (s, Prediction { target: cands[k], score: scores[k] })
    });
    preds.into_iter().collect()
}

/// Compare new predictions with the dictionary and promote stable ones.
///
/// A source is promoted when its stored target equals the new prediction.
/// Sources competing for one target are resolved by highest score, then
/// lower source index; the rest, and every unstable source, have their
/// dictionary entry overwritten with the new prediction. Sources outside
/// `eligible` (when given) are never promoted. Entities already used by
/// `seeds` or earlier promotions are never promoted again.
pub fn calibrate_pseudo_labels(
    store: &mut PseudoLabelStore,
    new_preds: &BTreeMap<usize, Prediction>,
    epoch: usize,
    seeds: &SeedAlignmentSet,
    eligible: Option<&BTreeSet<usize>>,
) -> Vec<AlignedPair> {
    let used_s: HashSet<usize> =
        seeds.pairs().iter().map(|p| p.source).chain(store.promoted.iter().map(|p| p.source)).collect();
    let used_t: HashSet<usize> =
        seeds.pairs().iter().map(|p| p.target).chain(store.promoted.iter().map(|p| p.target)).collect();
    let mut claims: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (&s, p) in new_preds {
        let stable = store.dictionary.get(&s).is_some_and(|d| d.target == p.target);
        let allowed = eligible.is_none_or(|e| e.contains(&s)) && !used_s.contains(&s) && !used_t.contains(&p.target);
        if !(stable && allowed) {
            continue;
        }
        // Sources iterate in ascending order, so a strict comparison keeps the lower index on ties.
        match claims.get(&p.target) {
            Some(&(_, best)) if best >= p.score => {}
            _ => {
                claims.insert(p.target, (s, p.score));
            }
        }
    }
    let winners: BTreeSet<usize> = claims.values().map(|(s, _)| *s).collect();
    let mut promoted = Vec::with_capacity(winners.len());
    for (&s, p) in new_preds {
        if winners.contains(&s) {
            store.dictionary.remove(&s);
            store.promoted.push(PromotedPair { source: s, target: p.target, epoch });
            promoted.push(AlignedPair::new(s, p.target));
        } else {
            store.dictionary.insert(s, DictionaryEntry { target: p.target, epoch, score: p.score });
        }
    }
    promoted
}

/// Group labeled pairs into mini-batches of mutually similar pairs.
///
/// Each pair is represented by the normalized mean of its two joint
/// embeddings. Batches are built greedily: the lowest unassigned pair (in
/// sorted order) anchors a batch that is filled with the unassigned pairs
/// most cosine-similar to it, ties in sorted order.
pub fn reorder_labeled(
    pairs: &[AlignedPair],
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    batch_size: usize,
) -> Vec<Vec<AlignedPair>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    let reps: Vec<Array1<f64>> = sorted
        .iter()
        .map(|p| {
            let v = (&src.row(p.source) + &tgt.row(p.target)) * 0.5;
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                v / n
            } else {
                v
            }
        })
        .collect();
    let mut remaining: Vec<usize> = (0..sorted.len()).collect();
    let mut batches = Vec::new();
    while !remaining.is_empty() {
        let anchor = remaining[0];
        let mut rest: Vec<(usize, f64)> = remaining[1..].iter().map(|&k| (k, reps[anchor].dot(&reps[k]))).collect();
        rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let take: Vec<usize> = std::iter::once(anchor).chain(rest.iter().take(batch_size - 1).map(|(k, _)| *k)).collect();
        let taken: HashSet<usize> = take.iter().copied().collect();
        remaining.retain(|k| !taken.contains(k));
        batches.push(take.iter().map(|&k| sorted[k]).collect());
    }
    batches
}
