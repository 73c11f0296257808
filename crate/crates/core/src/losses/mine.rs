use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{Bound, InitSpec, Modality, ParameterStore, StoreRole};
use crate::error::{Error, Result};

/// Statistics network Φ(x) = w2ᵀ ELU(W1 x + b1) + b2, stored under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct MineNetwork {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl MineNetwork {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        MineNetwork { prefix: prefix.to_string(), input_dim, hidden }
    }

    /// The network pairing the joint embedding with modality `m`.
    pub fn for_modality(m: Modality, joint_dim: usize, modal_dim: usize, hidden: usize) -> Self {
        MineNetwork::new(&format!("mine.{}", m.name()), joint_dim + modal_dim, hidden)
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        store.add(&self.name("w1"), (self.input_dim, self.hidden), InitSpec::Glorot, rng);
        store.add(&self.name("b1"), (1, self.hidden), InitSpec::Zeros, rng);
        store.add(&self.name("w2"), (self.hidden, 1), InitSpec::Glorot, rng);
        store.add(&self.name("b2"), (1, 1), InitSpec::Zeros, rng);
    }

    /// A store holding only this network.
    pub fn new_store(&self, rng: &mut impl Rng) -> ParameterStore {
        let mut s = ParameterStore::new(StoreRole::Online);
        self.init(&mut s, rng);
        s
    }

    /// Φ on every row of `x`, as an n×1 column.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.matmul(x, p.var(&self.name("w1")));
        let h = g.add_row(h, p.var(&self.name("b1")));
        let h = g.elu(h);
        let o = g.matmul(h, p.var(&self.name("w2")));
        g.add_row(o, p.var(&self.name("b2")))
    }

    /// Donsker–Varadhan estimate from paired rows and shuffled rows.
    pub fn estimate(&self, store: &ParameterStore, paired: &Array2<f64>, shuffled: &Array2<f64>) -> Result<f64> {
        if paired.nrows() < 2 || shuffled.nrows() < 2 {
            return Err(Error::Argument("mutual-information estimate needs at least 2 samples".into()));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let a = g.constant(paired.clone());
        let b = g.constant(shuffled.clone());
        let t = self.forward(&mut g, &p, a);
        let ts = self.forward(&mut g, &p, b);
        let v = dv_bound(&mut g, t, ts);
        Ok(g.scalar(v))
    }
}

/// mean(t) − log(mean(exp(ts))) for n×1 statistic columns.
pub fn dv_bound(g: &mut Graph, t: Var, ts: Var) -> Var {
    let n = g.shape(ts).0 as f64;
    let m = g.mean(t);
    let lse = g.log_sum_exp(ts);
    let d = g.sub(m, lse);
    let ln_n = g.constant(Array2::from_elem((1, 1), n.ln()));
    g.add(d, ln_n)
}

/// Moving average of mean(exp(Φ)) over shuffled samples, kept in log space.
/// When present it replaces the batch denominator in the gradient of the
/// log term, reducing the estimator's gradient bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineEma {
    pub rate: f64,
    pub log_mean: Option<f64>,
}

impl MineEma {
    pub fn new(rate: f64) -> Self {
        MineEma { rate, log_mean: None }
    }
}

fn log_mean_exp(x: &Array2<f64>) -> f64 {
    let m = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    m + (x.iter().map(|v| (v - m).exp()).sum::<f64>() / x.len() as f64).ln()
}

/// Tape term whose gradient ascends the estimate for one network, plus the
/// estimate itself. `x_paired` and `x_shuffled` are the concatenated inputs.
pub fn mine_objective(
    g: &mut Graph,
    net: &MineNetwork,
    p: &Bound,
    x_paired: Var,
    x_shuffled: Var,
    ema: Option<&mut MineEma>,
) -> (Var, f64) {
    let t = net.forward(g, p, x_paired);
    let ts = net.forward(g, p, x_shuffled);
    let Some(ema) = ema else {
        let v = dv_bound(g, t, ts);
        return (v, g.scalar(v));
    };
    let batch = log_mean_exp(g.value(ts));
    let estimate = g.value(t).mean().unwrap_or(0.0) - batch;
    let log_avg = match ema.log_mean {
        None => batch,
        Some(prev) => {
            let m = prev.max(batch);
            m + ((1.0 - ema.rate) * (prev - m).exp() + ema.rate * (batch - m).exp()).ln()
        }
    };
    ema.log_mean = Some(log_avg);
    // d/dθ of mean(exp(ts)) / avg equals the corrected gradient of the log term.
    let c = g.value(ts).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shift = g.constant(Array2::from_elem(g.shape(ts), -c));
    let z = g.add(ts, shift);
    let e = g.exp(z);
    let e = g.mean(e);
    let e = g.scale(e, (c - log_avg).exp());
    let m = g.mean(t);
    (g.sub(m, e), estimate)
}

/// Negative sum of the estimates between the joint embedding and each
/// modality in [`Modality::MI_SUBSET`].
///
/// `joint` and `modal[k]` hold one row per sample; `perms[k]` shuffles the
/// modality rows to form the product-of-marginals samples.
#[allow(clippy::too_many_arguments)]
pub fn mi_loss(
    g: &mut Graph,
    nets: &[MineNetwork; 4],
    p: &Bound,
    joint: Var,
    modal: [Var; 4],
    perms: &[Vec<usize>; 4],
    mut emas: Option<&mut [MineEma; 4]>,
) -> (Var, [f64; 4]) {
    let mut estimates = [0.0; 4];
    let mut total: Option<Var> = None;
    for k in 0..4 {
        let paired = g.concat_cols(&[joint, modal[k]]);
        let shuffled_modal = g.gather_rows(modal[k], &perms[k]);
        let shuffled = g.concat_cols(&[joint, shuffled_modal]);
        let ema = emas.as_deref_mut().map(|e| &mut e[k]);
        let (obj, est) = mine_objective(g, &nets[k], p, paired, shuffled, ema);
        estimates[k] = est;
        total = Some(match total {
            None => obj,
            Some(t) => g.add(t, obj),
        });
    }
    let total = total.expect("four terms");
    (g.scale(total, -1.0), estimates)
}
