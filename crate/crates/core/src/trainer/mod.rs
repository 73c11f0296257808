//! Semi-supervised training loop with a two-stage online/momentum schedule
//! and pseudo-label calibration.

mod checkpoint;
mod config;
pub mod pseudo;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{TrainConfig, CONFIG_VERSION};
pub use pseudo::{
    calibrate_pseudo_labels, predict_unlabeled, reorder_labeled, DictionaryEntry, Prediction, PromotedPair,
    PseudoLabelStore,
};

use crate::autograd::{Graph, Var};
use crate::dataset::Dataset;
use crate::encoders::{
    check_inputs, encode_all, encode_graph, init_model, EmbeddingSet, ModelShape, Modality, ParameterStore, StoreRole,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, similarity_for, Direction, EvalReport, DEFAULT_KS};
use crate::kg::AlignedPair;
use crate::losses::{
    align_loss_graph, contrastive_loss_graph, mi_loss, momentum_update, total_loss, CandidateBatch, LossBreakdown,
    MineEma, MineNetwork,
};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    OnlineOnly,
    Momentum,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub n_promoted: usize,
    pub n_dictionary: usize,
    pub eval: Option<EvalReport>,
}

impl HistoryRecord {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.loss.to_json(self.epoch);
        v["n_promoted"] = self.n_promoted.into();
        v["n_dictionary"] = self.n_dictionary.into();
        if let Some(e) = &self.eval {
            v["eval"] = e.to_json();
        }
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bad = || Error::Format(format!("malformed history record: {v}"));
        let (epoch, loss) = LossBreakdown::from_json(v)?;
        let count = |k: &str| v[k].as_u64().map(|x| x as usize).ok_or_else(bad);
        let eval = match v.get("eval") {
            None => None,
            Some(e) => {
                let obj = e.as_object().ok_or_else(bad)?;
                let mut hits = Vec::new();
                for (k, x) in obj {
                    if let Some(k) = k.strip_prefix("hits@") {
                        hits.push((k.parse::<usize>().map_err(|_| bad())?, x.as_f64().ok_or_else(bad)?));
                    }
                }
                hits.sort_by_key(|h| h.0);
                Some(EvalReport {
                    hits,
                    mrr: e["mrr"].as_f64().ok_or_else(bad)?,
                    n_queries: e["n_queries"].as_u64().ok_or_else(bad)? as usize,
                    direction: serde_json::from_value(e["direction"].clone()).map_err(|_| bad())?,
                })
            }
        };
        Ok(HistoryRecord { epoch, loss, n_promoted: count("n_promoted")?, n_dictionary: count("n_dictionary")?, eval })
    }
}

/// Everything a run mutates. `epoch` counts completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub stage: Stage,
    pub online: ParameterStore,
    pub target: ParameterStore,
    /// Statistics networks of the mutual-information term.
    pub mine: ParameterStore,
    pub adam: Adam,
    pub pseudo: PseudoLabelStore,
    pub history: Vec<HistoryRecord>,
    pub mine_ema: Option<[MineEma; 4]>,
    pub shape: ModelShape,
}

/// The statistics networks pairing the joint embedding with each modality
/// in [`Modality::MI_SUBSET`].
pub fn mine_networks(cfg: &TrainConfig) -> [MineNetwork; 4] {
    let enc = cfg.encoder();
    Modality::MI_SUBSET.map(|m| MineNetwork::for_modality(m, enc.joint_dim(), enc.dim, cfg.mine_hidden))
}

const MINE_SEED_SALT: u64 = 0x6d69_6e65;

/// Fresh state for `data`. The target store starts as a copy of the online
/// store and is left untouched until the momentum stage.
pub fn init_state(cfg: &TrainConfig, data: &Dataset) -> Result<TrainState> {
    cfg.validate()?;
    check_inputs(&data.shape, &data.source)?;
    check_inputs(&data.shape, &data.target)?;
    let online = init_model(&cfg.encoder(), &data.shape, cfg.rng_seed)?;
    let target = online.copy_as(StoreRole::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ MINE_SEED_SALT);
    let mut mine = ParameterStore::new(StoreRole::Online);
    for net in &mine_networks(cfg) {
        net.init(&mut mine, &mut rng);
    }
    Ok(TrainState {
        epoch: 0,
        stage: Stage::OnlineOnly,
        online,
        target,
        mine,
        adam: Adam::new(cfg.adam()),
        pseudo: PseudoLabelStore::default(),
        history: Vec::new(),
        mine_ema: cfg.mine_bias_correction.then(|| [MineEma::new(cfg.mine_ema_rate); 4]),
        shape: data.shape,
    })
}

/// Online-store embeddings of both graphs.
pub fn embeddings(state: &TrainState, cfg: &TrainConfig, data: &Dataset) -> Result<(EmbeddingSet, EmbeddingSet)> {
    embeddings_of(&state.online, cfg, data)
}

fn embeddings_of(store: &ParameterStore, cfg: &TrainConfig, data: &Dataset) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let enc = cfg.encoder();
    Ok((encode_all(store, &enc, &data.shape, &data.source)?, encode_all(store, &enc, &data.shape, &data.target)?))
}

/// Rank the test seeds with the online joint embeddings. Candidates are the
/// test targets, or every target when `eval_all_targets` is set.
pub fn evaluate_state(state: &TrainState, cfg: &TrainConfig, data: &Dataset, direction: Direction) -> Result<EvalReport> {
    let (src, tgt) = embeddings(state, cfg, data)?;
    evaluate_embeddings(&src, &tgt, cfg, data, direction)
}

pub fn evaluate_embeddings(
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    cfg: &TrainConfig,
    data: &Dataset,
    direction: Direction,
) -> Result<EvalReport> {
    let test = &data.pair.test_seeds;
    let test_src = || test.pairs().iter().map(|p| p.source).collect::<Vec<_>>();
    let test_tgt = || test.pairs().iter().map(|p| p.target).collect::<Vec<_>>();
    let test_rows_only = direction == Direction::SourceToTarget || !cfg.eval_all_targets;
    let rows = if test_rows_only { test_src() } else { (0..data.shape.n_source).collect() };
    let cols = if cfg.eval_all_targets { (0..data.shape.n_target).collect() } else { test_tgt() };
    let sim = similarity_for(&src.joint, &tgt.joint, &rows, &cols)?;
    evaluate(&sim, test, &DEFAULT_KS, direction)
}

fn gather_const(g: &mut Graph, a: &Array2<f64>, rows: &[usize]) -> Var {
    g.constant(a.select(ndarray::Axis(0), rows))
}

struct BatchContext<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    nets: &'a [MineNetwork; 4],
    momentum: Option<&'a (EmbeddingSet, EmbeddingSet)>,
    seeds: &'a HashSet<AlignedPair>,
    epoch: usize,
}

/// Forward, backward and one optimizer step on one batch.
fn train_batch(
    state: &mut TrainState,
    ctx: &BatchContext,
    batch: &[AlignedPair],
    batch_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let cfg = ctx.cfg;
    let enc = cfg.encoder();
    let cb = CandidateBatch::new(batch.to_vec())?;
    let (si, ti) = (cb.sources(), cb.targets());
    let mut g = Graph::new();
    let p = state.online.bind(&mut g, true);
    let pm = state.mine.bind(&mut g, cfg.use_mutual_information);
    let src = encode_graph(&mut g, &p, &enc, &ctx.data.source);
    let tgt = encode_graph(&mut g, &p, &enc, &ctx.data.target);
    let all_s: [Var; 7] = std::array::from_fn(|k| if k < 6 { src.modal[k] } else { src.joint });
    let all_t: [Var; 7] = std::array::from_fn(|k| if k < 6 { tgt.modal[k] } else { tgt.joint });
    let xs = all_s.map(|v| g.gather_rows(v, &si));
    let xt = all_t.map(|v| g.gather_rows(v, &ti));

    let mut terms = Vec::new();
    let (mut l_al, mut l_mi, mut l_cl) = ([0.0; 6], 0.0, [0.0; 7]);
    if cfg.use_contrastive {
        for k in 0..7 {
            let (y1, y2) = match ctx.momentum {
                Some((ms, mt)) => {
                    let (a, b) = if k < 6 { (&ms.modal[k], &mt.modal[k]) } else { (&ms.joint, &mt.joint) };
                    (gather_const(&mut g, a, &si), gather_const(&mut g, b, &ti))
                }
                None => (xs[k], xt[k]),
            };
            let l = contrastive_loss_graph(&mut g, xs[k], xt[k], y1, y2, cfg.tau);
            l_cl[k] = g.scalar(l);
            terms.push(l);
        }
    }
    let aux: Vec<usize> = if cfg.pseudo_labels_all_losses {
        (0..cb.len()).collect()
    } else {
        (0..cb.len()).filter(|&i| ctx.seeds.contains(&batch[i])).collect()
    };
    let aux_rows = |g: &mut Graph, v: Var| if aux.len() == cb.len() { v } else { g.gather_rows(v, &aux) };
    if cfg.use_alignment && !aux.is_empty() {
        let (j1, j2) = (aux_rows(&mut g, xs[6]), aux_rows(&mut g, xt[6]));
        for m in 0..6 {
            let (m1, m2) = (aux_rows(&mut g, xs[m]), aux_rows(&mut g, xt[m]));
            let l = align_loss_graph(&mut g, j1, j2, m1, m2, cfg.tau);
            l_al[m] = g.scalar(l);
            terms.push(l);
        }
    }
    if cfg.use_mutual_information && aux.len() >= 2 {
        let j = [xs[6], xt[6]].map(|v| aux_rows(&mut g, v));
        let joint = g.concat_rows(&j);
        let modal = Modality::MI_SUBSET.map(|m| {
            let parts = [xs[m.index()], xt[m.index()]].map(|v| aux_rows(&mut g, v));
            g.concat_rows(&parts)
        });
        let n = 2 * aux.len();
        let perms: [Vec<usize>; 4] = std::array::from_fn(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        });
        let (l, _) = mi_loss(&mut g, ctx.nets, &pm, joint, modal, &perms, state.mine_ema.as_mut());
        l_mi = g.scalar(l);
        terms.push(l);
    }
    let breakdown = total_loss(l_al, l_mi, l_cl);
    if !breakdown.total.is_finite() || terms.iter().any(|&t| !g.scalar(t).is_finite()) {
        let dump = serde_json::json!({ "pairs": batch, "loss": breakdown.to_json(ctx.epoch) });
        return Err(Error::NonFinite { epoch: ctx.epoch, batch: batch_index, dump: dump.to_string() });
    }
    let Some(&first) = terms.first() else {
        return Ok(breakdown);
    };
    let root = terms[1..].iter().fold(first, |acc, &t| g.add(acc, t));
    let mut grads = g.backward(root);
    state.adam.begin_step();
    for (store, bound) in [(&mut state.online, &p), (&mut state.mine, &pm)] {
        for (name, var) in bound.iter() {
            if let Some(grad) = grads.take(var) {
                state.adam.update(name, store.get_mut(name), &grad);
            }
        }
    }
    Ok(breakdown)
}

/// Train one epoch, append its history record and return it.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<HistoryRecord> {
    let e = state.epoch;
    if state.shape != data.shape {
        return Err(Error::Incompatible("state was built for a different dataset shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(e as u64);

    let seeds = &data.pair.train_seeds;
    let seed_set: HashSet<AlignedPair> = seeds.pairs().iter().copied().collect();
    let mut positives = seeds.pairs().to_vec();
    if cfg.use_pseudo_labels {
        positives.extend(state.pseudo.promoted_pairs());
    }
    positives.sort_unstable();

    let batches = if (cfg.reorder_start..cfg.reorder_stop).contains(&e) {
        let (src, tgt) = embeddings(state, cfg, data)?;
        reorder_labeled(&positives, &src.joint, &tgt.joint, cfg.batch_size)
    } else {
        positives.shuffle(&mut rng);
        positives.chunks(cfg.batch_size).map(<[AlignedPair]>::to_vec).collect()
    };

    let momentum = match state.stage {
        Stage::Momentum => Some(embeddings_of(&state.target, cfg, data)?),
        Stage::OnlineOnly => None,
    };
    let nets = mine_networks(cfg);
    let ctx = BatchContext { cfg, data, nets: &nets, momentum: momentum.as_ref(), seeds: &seed_set, epoch: e };
    let mut parts = Vec::with_capacity(batches.len());
    for (bi, batch) in batches.iter().enumerate() {
        parts.push(train_batch(state, &ctx, batch, bi, &mut rng)?);
    }
    let loss = LossBreakdown::mean(&parts);

    if state.stage == Stage::Momentum && e.is_multiple_of(cfg.rho) {
        momentum_update(&mut state.target, &state.online, cfg.kappa);
    }

    let needs_calibration = cfg.use_pseudo_labels && e.is_multiple_of(cfg.omega);
    let needs_eval = cfg.eval_every > 0 && (e + 1).is_multiple_of(cfg.eval_every);
    let mut eval = None;
    if needs_calibration || needs_eval {
        let (src, tgt) = embeddings(state, cfg, data)?;
        if needs_calibration {
            calibrate(state, &src, &tgt, data, cfg, e);
        }
        if needs_eval {
            eval = Some(evaluate_embeddings(&src, &tgt, cfg, data, Direction::SourceToTarget)?);
        }
    }

    state.epoch += 1;
    if state.epoch == cfg.ts {
        state.target = state.online.copy_as(StoreRole::Target);
        state.stage = Stage::Momentum;
    }
    let record = HistoryRecord {
        epoch: e,
        loss,
        n_promoted: state.pseudo.promoted.len(),
        n_dictionary: state.pseudo.dictionary.len(),
        eval,
    };
    log::info!("epoch {e}: loss {:.6}, {} pseudo-labels", record.loss.total, record.n_promoted);
    state.history.push(record.clone());
    Ok(record)
}

/// Sources whose joint prediction agrees with at least four of the six
/// single-modality predictions.
fn ensemble_agreeing(
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    joint: &std::collections::BTreeMap<usize, Prediction>,
    unlabeled: &[usize],
    candidates: &[usize],
) -> BTreeSet<usize> {
    let per_modal: Vec<_> =
        Modality::ALL.iter().map(|&m| predict_unlabeled(src.get(m), tgt.get(m), unlabeled, candidates)).collect();
    joint
        .iter()
        .filter(|(s, p)| per_modal.iter().filter(|pm| pm.get(s).is_some_and(|q| q.target == p.target)).count() >= 4)
        .map(|(s, _)| *s)
        .collect()
}

fn calibrate(state: &mut TrainState, src: &EmbeddingSet, tgt: &EmbeddingSet, data: &Dataset, cfg: &TrainConfig, e: usize) {
    let seeds = &data.pair.train_seeds;
    let (unlabeled, candidates) = state.pseudo.unlabeled(data.shape.n_source, data.shape.n_target, seeds);
    let preds = predict_unlabeled(&src.joint, &tgt.joint, &unlabeled, &candidates);
    let eligible = cfg.ensemble_agreement.then(|| ensemble_agreeing(src, tgt, &preds, &unlabeled, &candidates));
    calibrate_pseudo_labels(&mut state.pseudo, &preds, e, seeds, eligible.as_ref());
}

/// Output files of [`run_training`].
pub fn history_path(out_dir: &Path) -> PathBuf {
    out_dir.join("history.jsonl")
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.ckpt")
}

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_epoch{epoch}.ckpt"))
}

/// Train until `cfg.epochs` epochs are complete, writing the history,
/// periodic checkpoints and a final checkpoint to `out_dir`. With `resume`
/// the run continues from that checkpoint, whose config must hash equal to
/// `cfg`.
pub fn run_training(data: &Dataset, cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match resume {
        Some(path) => {
            let (state, saved) = load_checkpoint(path)?;
            if saved.hash() != cfg.hash() {
                return Err(Error::Incompatible(format!("{} was written with a different config", path.display())));
            }
            if state.shape != data.shape {
                return Err(Error::Incompatible(format!("{} was written for a different dataset", path.display())));
            }
            state
        }
        None => init_state(cfg, data)?,
    };
    let hist_path = history_path(out_dir);
    let mut text = String::new();
    for r in &state.history {
        text.push_str(&r.to_json().to_string());
        text.push('\n');
    }
    let mut hist = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    hist.write_all(text.as_bytes()).map_err(|e| Error::io(&hist_path, e))?;
    while state.epoch < cfg.epochs {
        let record = train_epoch(&mut state, data, cfg)?;
        writeln!(hist, "{}", record.to_json()).map_err(|e| Error::io(&hist_path, e))?;
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(&state, cfg, &epoch_checkpoint_path(out_dir, state.epoch))?;
        }
    }
    hist.flush().map_err(|e| Error::io(&hist_path, e))?;
    save_checkpoint(&state, cfg, &final_checkpoint_path(out_dir))?;
    Ok(state)
}
