//! Fused attention kernels with hand-written backward passes.

use std::sync::Arc;

use ndarray::Array2;

use crate::kg::Adjacency;
use crate::par;

/// Softmax weights per (row, neighbor) saved for the GAT backward pass.
pub struct GatSaved {
    adj: Arc<Adjacency>,
    slope: f64,
    alpha: Vec<Vec<f64>>,
}

fn leaky(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

pub(super) fn gat_forward(
    h: &Array2<f64>,
    src: &Array2<f64>,
    dst: &Array2<f64>,
    adj: Arc<Adjacency>,
    slope: f64,
) -> (Array2<f64>, GatSaved) {
    let (n, d) = h.dim();
    assert_eq!(adj.len(), n, "adjacency size must match node count");
    let rows = par::map_range(n, |i| {
        let nbrs = adj.neighbors(i);
        assert!(!nbrs.is_empty(), "node {i} has no neighbors (missing self-loop)");
        let logits: Vec<f64> = nbrs.iter().map(|&j| leaky(src[[i, 0]] + dst[[j, 0]], slope)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= z);
        let mut out = vec![0.0; d];
        for (&j, &a) in nbrs.iter().zip(&alpha) {
            for (o, x) in out.iter_mut().zip(h.row(j)) {
                *o += a * x;
            }
        }
        (out, alpha)
    });
    let mut out = Array2::zeros((n, d));
    let mut alpha = Vec::with_capacity(n);
    for (i, (row, a)) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        alpha.push(a);
    }
    (out, GatSaved { adj, slope, alpha })
}

pub(super) fn gat_backward(
    g: &Array2<f64>,
    h: &Array2<f64>,
    src: &Array2<f64>,
    dst: &Array2<f64>,
    saved: &GatSaved,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = h.nrows();
    let mut dh = Array2::zeros(h.dim());
    let mut ds = Array2::zeros((n, 1));
    let mut dd = Array2::zeros((n, 1));
    for i in 0..n {
        let nbrs = saved.adj.neighbors(i);
        let alpha = &saved.alpha[i];
        let gi = g.row(i);
        let dalpha: Vec<f64> = nbrs.iter().map(|&j| gi.dot(&h.row(j))).collect();
        let inner: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        for (k, &j) in nbrs.iter().enumerate() {
            let mut row = dh.row_mut(j);
            row.scaled_add(alpha[k], &gi);
            let de = alpha[k] * (dalpha[k] - inner);
            let z = src[[i, 0]] + dst[[j, 0]];
            let dz = if z > 0.0 { de } else { saved.slope * de };
            ds[[i, 0]] += dz;
            dd[[j, 0]] += dz;
        }
    }
    (dh, ds, dd)
}

/// Attention probabilities saved for the grouped-attention backward pass,
/// laid out as [group][head][query][key].
pub struct GroupAttnSaved {
    q_len: usize,
    kv_len: usize,
    heads: usize,
    probs: Vec<f64>,
}

fn check_shapes(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, q_len: usize, kv_len: usize, heads: usize) -> usize {
    assert!(q_len > 0 && kv_len > 0 && heads > 0, "group attention sizes must be positive");
    assert_eq!(q.nrows() % q_len, 0, "query rows must be a multiple of q_len");
    let groups = q.nrows() / q_len;
    assert_eq!(k.nrows(), groups * kv_len, "key rows must match the group count");
    assert_eq!(k.dim(), v.dim(), "keys and values must have the same shape");
    assert_eq!(q.ncols(), k.ncols(), "query and key widths must match");
    assert_eq!(q.ncols() % heads, 0, "width must divide evenly into heads");
    groups
}

pub(super) fn group_attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    q_len: usize,
    kv_len: usize,
    heads: usize,
) -> (Array2<f64>, GroupAttnSaved) {
    let groups = check_shapes(q, k, v, q_len, kv_len, heads);
    let width = q.ncols();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let per_group = par::map_range(groups, |gi| {
        let mut out = vec![0.0; q_len * width];
        let mut probs = vec![0.0; heads * q_len * kv_len];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for a in 0..q_len {
                let qa = q.row(gi * q_len + a);
                let p = &mut probs[(h * q_len + a) * kv_len..(h * q_len + a + 1) * kv_len];
                for (b, pb) in p.iter_mut().enumerate() {
                    let kb = k.row(gi * kv_len + b);
                    *pb = cols.clone().map(|c| qa[c] * kb[c]).sum::<f64>() * scale;
                }
                let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                p.iter_mut().for_each(|x| *x = (*x - m).exp());
                let z: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= z);
                for (b, pb) in p.iter().enumerate() {
                    let vb = v.row(gi * kv_len + b);
                    for c in cols.clone() {
                        out[a * width + c] += pb * vb[c];
                    }
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(groups * q_len * width);
    let mut probs = Vec::with_capacity(groups * heads * q_len * kv_len);
    for (o, p) in per_group {
        out.extend(o);
        probs.extend(p);
    }
    (
        Array2::from_shape_vec((groups * q_len, width), out).expect("attention output shape"),
        GroupAttnSaved { q_len, kv_len, heads, probs },
    )
}

pub(super) fn group_attention_backward(
    g: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    saved: &GroupAttnSaved,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (q_len, kv_len, heads) = (saved.q_len, saved.kv_len, saved.heads);
    let groups = q.nrows() / q_len;
    let width = q.ncols();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let per_group = par::map_range(groups, |gi| {
        let mut dq = vec![0.0; q_len * width];
        let mut dk = vec![0.0; kv_len * width];
        let mut dv = vec![0.0; kv_len * width];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for a in 0..q_len {
                let base = ((gi * heads + h) * q_len + a) * kv_len;
                let p = &saved.probs[base..base + kv_len];
                let ga = g.row(gi * q_len + a);
                let dp: Vec<f64> = (0..kv_len)
                    .map(|b| {
                        let vb = v.row(gi * kv_len + b);
                        cols.clone().map(|c| ga[c] * vb[c]).sum()
                    })
                    .collect();
                let inner: f64 = p.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qa = q.row(gi * q_len + a);
                for b in 0..kv_len {
                    let ds = p[b] * (dp[b] - inner) * scale;
                    let kb = k.row(gi * kv_len + b);
                    for c in cols.clone() {
                        dv[b * width + c] += p[b] * ga[c];
                        dq[a * width + c] += ds * kb[c];
                        dk[b * width + c] += ds * qa[c];
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(k.len());
    let mut dv = Vec::with_capacity(v.len());
    for (a, b, c) in per_group {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (
        Array2::from_shape_vec(q.dim(), dq).unwrap(),
        Array2::from_shape_vec(k.dim(), dk).unwrap(),
        Array2::from_shape_vec(v.dim(), dv).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::super::check::{max_rel_error, numeric_grad};
    use super::super::Graph;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Dense softmax attention written directly from the definition.
    fn dense_gat(h: &Array2<f64>, s: &Array2<f64>, t: &Array2<f64>, adj: &Adjacency, slope: f64) -> Array2<f64> {
        let n = h.nrows();
        let mut out = Array2::zeros(h.dim());
        for i in 0..n {
            let mut w = vec![0.0; n];
            let mut z = 0.0;
            for j in 0..n {
                if adj.neighbors(i).contains(&j) {
                    let e = s[[i, 0]] + t[[j, 0]];
                    let e = if e > 0.0 { e } else { slope * e };
                    w[j] = e.exp();
                    z += w[j];
                }
            }
            for j in 0..n {
                let a = w[j] / z;
                for c in 0..h.ncols() {
                    out[[i, c]] += a * h[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn gat_matches_dense_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adj = Arc::new(Adjacency::from_edges(4, [(0, 1), (1, 2), (2, 3)]));
        let h = randn(&mut rng, 4, 3);
        let s = randn(&mut rng, 4, 1);
        let t = randn(&mut rng, 4, 1);
        let (out, _) = gat_forward(&h, &s, &t, adj.clone(), 0.2);
        let dense = dense_gat(&h, &s, &t, &adj, 0.2);
        assert!((&out - &dense).iter().all(|d| d.abs() < 1e-12));

        let w = randn(&mut rng, 4, 3);
        let f = |h: &Array2<f64>, s: &Array2<f64>, t: &Array2<f64>| (dense_gat(h, s, t, &adj, 0.2) * &w).sum();
        let mut g = Graph::new();
        let (hv, sv, tv) = (g.param(h.clone()), g.param(s.clone()), g.param(t.clone()));
        let o = g.gat_aggregate(hv, sv, tv, adj.clone(), 0.2);
        let wv = g.constant(w.clone());
        let p = g.mul(o, wv);
        let l = g.sum(p);
        let gr = g.backward(l);
        let nh = numeric_grad(&h, 1e-5, |x| f(x, &s, &t));
        let ns = numeric_grad(&s, 1e-5, |x| f(&h, x, &t));
        let nt = numeric_grad(&t, 1e-5, |x| f(&h, &s, x));
        assert!(max_rel_error(gr.get(hv).unwrap(), &nh) < 1e-5);
        assert!(max_rel_error(gr.get(sv).unwrap(), &ns) < 1e-5);
        assert!(max_rel_error(gr.get(tv).unwrap(), &nt) < 1e-5);
    }

    #[test]
    fn singleton_neighborhood_copies_row() {
        let adj = Arc::new(Adjacency::from_edges(1, []));
        let h = ndarray::array![[0.3, -2.0]];
        let (out, saved) = gat_forward(&h, &ndarray::array![[5.0]], &ndarray::array![[-1.0]], adj, 0.2);
        assert_eq!(out, h);
        assert_eq!(saved.alpha[0], vec![1.0]);
    }

    fn dense_group_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, ql: usize, kl: usize, heads: usize) -> Array2<f64> {
        let groups = q.nrows() / ql;
        let hd = q.ncols() / heads;
        let mut out = Array2::zeros(q.dim());
        for gi in 0..groups {
            for h in 0..heads {
                let qs = q.slice(ndarray::s![gi * ql..(gi + 1) * ql, h * hd..(h + 1) * hd]);
                let ks = k.slice(ndarray::s![gi * kl..(gi + 1) * kl, h * hd..(h + 1) * hd]);
                let vs = v.slice(ndarray::s![gi * kl..(gi + 1) * kl, h * hd..(h + 1) * hd]);
                let mut sc = qs.dot(&ks.t()) / (hd as f64).sqrt();
                for mut r in sc.rows_mut() {
                    let m = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    r.mapv_inplace(|x| (x - m).exp());
                    let z = r.sum();
                    r /= z;
                }
                out.slice_mut(ndarray::s![gi * ql..(gi + 1) * ql, h * hd..(h + 1) * hd]).assign(&sc.dot(&vs));
            }
        }
        out
    }

    #[test]
    fn group_attention_matches_dense_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (groups, ql, kl, heads, width) = (3, 2, 3, 2, 4);
        let q = randn(&mut rng, groups * ql, width);
        let k = randn(&mut rng, groups * kl, width);
        let v = randn(&mut rng, groups * kl, width);
        let (out, _) = group_attention_forward(&q, &k, &v, ql, kl, heads);
        let dense = dense_group_attention(&q, &k, &v, ql, kl, heads);
        assert!((&out - &dense).iter().all(|d| d.abs() < 1e-12));

        let w = randn(&mut rng, groups * ql, width);
        let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| (dense_group_attention(q, k, v, ql, kl, heads) * &w).sum();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
        let o = g.group_attention(qv, kv, vv, ql, kl, heads);
        let wv = g.constant(w.clone());
        let p = g.mul(o, wv);
        let l = g.sum(p);
        let gr = g.backward(l);
        assert!(max_rel_error(gr.get(qv).unwrap(), &numeric_grad(&q, 1e-5, |x| f(x, &k, &v))) < 1e-5);
        assert!(max_rel_error(gr.get(kv).unwrap(), &numeric_grad(&k, 1e-5, |x| f(&q, x, &v))) < 1e-5);
        assert!(max_rel_error(gr.get(vv).unwrap(), &numeric_grad(&v, 1e-5, |x| f(&q, &k, x))) < 1e-5);
    }
}
