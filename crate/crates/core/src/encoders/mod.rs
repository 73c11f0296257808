//! Per-modality encoders and the fused joint embedding.
//!
//! Everything here builds on an autograd [`Graph`]: parameters are bound
//! from a [`ParameterStore`] and each block appends its operations to the
//! tape. [`encode_all`] is the gradient-free convenience wrapper.

mod store;

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::ModalFeatureBundle;
use crate::kg::{Adjacency, Side};

pub use store::{Bound, InitSpec, ParameterStore, StoreRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Structure,
    RelBow,
    RelPlm,
    AttrBow,
    AttrPlm,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Structure,
        Modality::RelBow,
        Modality::RelPlm,
        Modality::AttrBow,
        Modality::AttrPlm,
        Modality::Visual,
    ];

    /// Modalities paired with the joint embedding in the mutual-information term.
    pub const MI_SUBSET: [Modality; 4] = [Modality::Structure, Modality::RelPlm, Modality::AttrPlm, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Structure => "structure",
            Modality::RelBow => "rel_bow",
            Modality::RelPlm => "rel_plm",
            Modality::AttrBow => "attr_bow",
            Modality::AttrPlm => "attr_plm",
            Modality::Visual => "visual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output width of every modality embedding.
    pub dim: usize,
    /// Tokens per vector inside the attention blocks.
    pub segments: usize,
    pub heads: usize,
    /// Per-head width in the attention blocks; 0 means `dim / segments`.
    pub head_dim: usize,
    pub bottleneck: usize,
    pub adaptor_scale: f64,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub embed_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 100,
            segments: 4,
            heads: 2,
            head_dim: 0,
            bottleneck: 32,
            adaptor_scale: 0.1,
            gat_heads: 1,
            leaky_slope: 0.2,
            embed_init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.segments == 0 || self.heads == 0 || self.gat_heads == 0 {
            return bad("dim, segments, heads and gat_heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.segments) {
            return bad(format!("dim {} is not divisible by segments {}", self.dim, self.segments));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.dim {
            return bad(format!("bottleneck {} must lie in 1..{}", self.bottleneck, self.dim));
        }
        if !self.adaptor_scale.is_finite() || !self.leaky_slope.is_finite() || !(self.embed_init_std > 0.0) {
            return bad("adaptor_scale, leaky_slope and embed_init_std must be finite (std positive)".into());
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.dim / self.segments
    }

    pub fn head_width(&self) -> usize {
        if self.head_dim == 0 {
            self.token_dim()
        } else {
            self.head_dim
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.dim * Modality::ALL.len()
    }
}

/// Entity counts and raw input widths the parameters are sized for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_source: usize,
    pub n_target: usize,
    pub rel_bow: usize,
    pub attr_bow: usize,
    pub rel_text: usize,
    pub attr_text: usize,
    pub visual: usize,
}

impl ModelShape {
    pub fn from_features(source: &ModalFeatureBundle, target: &ModalFeatureBundle) -> Result<Self> {
        let widths = |b: &ModalFeatureBundle| {
            [b.bow_rel.ncols(), b.bow_attr.ncols(), b.text_rel.ncols(), b.text_attr.ncols(), b.visual.ncols()]
        };
        if widths(source) != widths(target) {
            return Err(Error::Config(format!(
                "feature widths differ between graphs: {:?} vs {:?}",
                widths(source),
                widths(target)
            )));
        }
        let [rel_bow, attr_bow, rel_text, attr_text, visual] = widths(source);
        Ok(ModelShape {
            n_source: source.num_entities(),
            n_target: target.num_entities(),
            rel_bow,
            attr_bow,
            rel_text,
            attr_text,
            visual,
        })
    }

    pub fn entities(&self, side: Side) -> usize {
        match side {
            Side::Source => self.n_source,
            Side::Target => self.n_target,
        }
    }

    fn raw_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Structure => 0,
            Modality::RelBow => self.rel_bow,
            Modality::RelPlm => self.rel_text,
            Modality::AttrBow => self.attr_bow,
            Modality::AttrPlm => self.attr_text,
            Modality::Visual => self.visual,
        }
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Source => "source",
        Side::Target => "target",
    }
}

fn gat_name(layer: usize, head: usize, part: &str) -> String {
    format!("gat.l{layer}.h{head}.{part}")
}

pub const GAT_LAYERS: usize = 2;

/// Build a freshly initialized online store.
pub fn init_model(cfg: &EncoderConfig, shape: &ModelShape, rng_seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut s = ParameterStore::new(StoreRole::Online);
    let d = cfg.dim;
    let embed = InitSpec::Normal { std: cfg.embed_init_std };
    for side in [Side::Source, Side::Target] {
        s.add(&format!("gat.embed.{}", side_name(side)), (shape.entities(side), d), embed, &mut rng);
    }
    for l in 0..GAT_LAYERS {
        for h in 0..cfg.gat_heads {
            s.add(&gat_name(l, h, "w"), (d, d), InitSpec::Glorot, &mut rng);
            s.add(&gat_name(l, h, "a_src"), (d, 1), InitSpec::Glorot, &mut rng);
            s.add(&gat_name(l, h, "a_dst"), (d, 1), InitSpec::Glorot, &mut rng);
        }
    }
    s.add("structure.w", (d, d), InitSpec::Glorot, &mut rng);
    s.add("structure.b", (1, d), InitSpec::Zeros, &mut rng);
    let (dt, width) = (cfg.token_dim(), cfg.heads * cfg.head_width());
    for prefix in ["asm", "cam.rel", "cam.attr"] {
        for p in ["wq", "wk", "wv"] {
            s.add(&format!("{prefix}.{p}"), (dt, width), InitSpec::Glorot, &mut rng);
        }
        s.add(&format!("{prefix}.wo"), (width, dt), InitSpec::Glorot, &mut rng);
    }
    s.add("asm.down.w", (d, cfg.bottleneck), InitSpec::Glorot, &mut rng);
    s.add("asm.down.b", (1, cfg.bottleneck), InitSpec::Zeros, &mut rng);
    s.add("asm.up.w", (cfg.bottleneck, d), InitSpec::Glorot, &mut rng);
    s.add("asm.up.b", (1, d), InitSpec::Zeros, &mut rng);
    for m in &Modality::ALL[1..] {
        s.add(&format!("{}.w", m.name()), (shape.raw_dim(*m), d), InitSpec::Glorot, &mut rng);
        s.add(&format!("{}.b", m.name()), (1, d), InitSpec::Zeros, &mut rng);
    }
    s.add("fusion.alpha", (1, Modality::ALL.len()), InitSpec::Zeros, &mut rng);
    Ok(s)
}

/// Two-layer graph attention over `adj` followed by the structure affine map.
///
/// `x` holds one input row per entity. Heads within a layer are averaged.
pub fn gat_forward(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, adj: &Arc<Adjacency>, x: Var) -> Var {
    let mut h = x;
    for l in 0..GAT_LAYERS {
        let mut acc: Option<Var> = None;
        for head in 0..cfg.gat_heads {
            let z = g.matmul(h, p.var(&gat_name(l, head, "w")));
            let s = g.matmul(z, p.var(&gat_name(l, head, "a_src")));
            let t = g.matmul(z, p.var(&gat_name(l, head, "a_dst")));
            let agg = g.gat_aggregate(z, s, t, adj.clone(), cfg.leaky_slope);
            acc = Some(match acc {
                None => agg,
                Some(a) => g.add(a, agg),
            });
        }
        let mut sum = acc.expect("at least one head");
        if cfg.gat_heads > 1 {
            sum = g.scale(sum, 1.0 / cfg.gat_heads as f64);
        }
        h = g.elu(sum);
    }
    let w = g.matmul(h, p.var("structure.w"));
    g.add_row(w, p.var("structure.b"))
}

/// Multi-head attention where each entity's vector is cut into
/// `cfg.segments` tokens. Queries come from `query`, keys and values from
/// `context`; the result is flattened back to one row per entity.
fn token_attention(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, prefix: &str, query: Var, context: Var) -> Var {
    let (n, d) = g.shape(query);
    let (s, dt) = (cfg.segments, cfg.token_dim());
    let qt = g.reshape(query, n * s, dt);
    let ct = if context == query { qt } else { g.reshape(context, n * s, dt) };
    let q = g.matmul(qt, p.var(&format!("{prefix}.wq")));
    let k = g.matmul(ct, p.var(&format!("{prefix}.wk")));
    let v = g.matmul(ct, p.var(&format!("{prefix}.wv")));
    let att = g.group_attention(q, k, v, s, s, cfg.heads);
    let o = g.matmul(att, p.var(&format!("{prefix}.wo")));
    g.reshape(o, n, d)
}

/// Self-attention over segment tokens plus a residual bottleneck adaptor,
/// L2-normalized.
pub fn asm_forward(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, x: Var) -> Var {
    let a = token_attention(g, p, cfg, "asm", x, x);
    let down = g.matmul(a, p.var("asm.down.w"));
    let down = g.add_row(down, p.var("asm.down.b"));
    let act = g.elu(down);
    let up = g.matmul(act, p.var("asm.up.w"));
    let up = g.add_row(up, p.var("asm.up.b"));
    let up = g.scale(up, cfg.adaptor_scale);
    let h = g.add(a, up);
    g.row_normalize(h)
}

/// Cross-attention with text-embedding queries over bag-of-words keys and
/// values, added back onto the bag-of-words embedding and L2-normalized.
/// `prefix` is `cam.rel` or `cam.attr`.
pub fn cam_forward(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, prefix: &str, h_bow: Var, h_plm: Var) -> Var {
    assert_eq!(g.shape(h_bow), g.shape(h_plm), "cross-attention inputs must have equal shapes");
    let a = token_attention(g, p, cfg, prefix, h_plm, h_bow);
    let h = g.add(h_bow, a);
    g.row_normalize(h)
}

/// Affine map into the modality space followed by L2 normalization.
pub fn project_modality(g: &mut Graph, p: &Bound, which: Modality, x: Var) -> Var {
    assert_ne!(which, Modality::Structure, "structure has no input projection");
    let w = g.matmul(x, p.var(&format!("{}.w", which.name())));
    let h = g.add_row(w, p.var(&format!("{}.b", which.name())));
    g.row_normalize(h)
}

/// Softmax(α)-weighted concatenation of the six modality embeddings,
/// L2-normalized.
pub fn fuse_joint(g: &mut Graph, alpha: Var, modal: &[Var; 6]) -> Var {
    let w = g.softmax_rows(alpha);
    let parts: Vec<Var> = modal
        .iter()
        .enumerate()
        .map(|(m, &h)| {
            let wm = g.slice_cols(w, m, m + 1);
            g.mul_scalar(h, wm)
        })
        .collect();
    let cat = g.concat_cols(&parts);
    g.row_normalize(cat)
}

/// Raw inputs for one graph.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub side: Side,
    pub adjacency: Arc<Adjacency>,
    pub features: ModalFeatureBundle,
}

/// Tape handles of one graph's encoded embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub modal: [Var; 6],
    pub joint: Var,
}

impl EncodedVars {
    pub fn get(&self, m: Modality) -> Var {
        self.modal[m.index()]
    }
}

/// Encode every entity of one graph.
pub fn encode_graph(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, inputs: &GraphInputs) -> EncodedVars {
    let f = &inputs.features;
    let embed = p.var(&format!("gat.embed.{}", side_name(inputs.side)));
    let inter = gat_forward(g, p, cfg, &inputs.adjacency, embed);
    let structure = asm_forward(g, p, cfg, inter);
    let mut project = |m: Modality, x: &Array2<f64>| {
        let c = g.constant(x.clone());
        project_modality(g, p, m, c)
    };
    let rel_bow = project(Modality::RelBow, &f.bow_rel);
    let rel_plm = project(Modality::RelPlm, &f.text_rel);
    let attr_bow = project(Modality::AttrBow, &f.bow_attr);
    let attr_plm = project(Modality::AttrPlm, &f.text_attr);
    let visual = project(Modality::Visual, &f.visual);
    let rel_bow = cam_forward(g, p, cfg, "cam.rel", rel_bow, rel_plm);
    let attr_bow = cam_forward(g, p, cfg, "cam.attr", attr_bow, attr_plm);
    let modal = [structure, rel_bow, rel_plm, attr_bow, attr_plm, visual];
    let joint = fuse_joint(g, p.var("fusion.alpha"), &modal);
    EncodedVars { modal, joint }
}

/// Per-entity embeddings of one graph, every row unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub modal: [Array2<f64>; 6],
    pub joint: Array2<f64>,
}

impl EmbeddingSet {
    pub fn get(&self, m: Modality) -> &Array2<f64> {
        &self.modal[m.index()]
    }

    pub fn num_entities(&self) -> usize {
        self.joint.nrows()
    }

    pub fn from_vars(g: &Graph, v: &EncodedVars) -> Self {
        EmbeddingSet { modal: v.modal.map(|m| g.value(m).clone()), joint: g.value(v.joint).clone() }
    }
}

/// Check that `inputs` fit a store built for `shape`.
pub fn check_inputs(shape: &ModelShape, inputs: &GraphInputs) -> Result<()> {
    let n = shape.entities(inputs.side);
    inputs.features.validate(n)?;
    if inputs.adjacency.len() != n {
        return Err(Error::Config(format!("adjacency has {} nodes for {n} entities", inputs.adjacency.len())));
    }
    let f = &inputs.features;
    let got = [f.bow_rel.ncols(), f.bow_attr.ncols(), f.text_rel.ncols(), f.text_attr.ncols(), f.visual.ncols()];
    let want = [shape.rel_bow, shape.attr_bow, shape.rel_text, shape.attr_text, shape.visual];
    if got != want {
        return Err(Error::Config(format!("feature widths {got:?} do not match the model's {want:?}")));
    }
    Ok(())
}

/// Encode one graph without recording gradients.
pub fn encode_all(store: &ParameterStore, cfg: &EncoderConfig, shape: &ModelShape, inputs: &GraphInputs) -> Result<EmbeddingSet> {
    check_inputs(shape, inputs)?;
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let v = encode_graph(&mut g, &p, cfg, inputs);
    Ok(EmbeddingSet::from_vars(&g, &v))
}
