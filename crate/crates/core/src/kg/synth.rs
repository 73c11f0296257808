//! Synthetic aligned graph pairs with a known ground-truth permutation.
//!
//! The source graph has community structure: entities belong to latent
//! clusters that bias which neighbors, relations, attributes and visual
//! vectors they get. The target graph is the source under a random entity
//! permutation, with a `structure_noise` fraction of its relation and
//! attribute triples rewired and its feature vectors perturbed.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AlignedPair, AttributeTriple, KnowledgeGraph, RelationTriple, SeedAlignmentSet, SeedRole};
use crate::error::{Error, Result};
use crate::features::{bow_features, build_bow_vocab, stub_text_features, FeatureKind, ModalFeatureBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_attributes: usize,
    /// Width of the text and visual feature vectors.
    pub feature_dim: usize,
    pub structure_noise: f64,
    pub rng_seed: u64,
    pub avg_degree: f64,
    pub max_attributes_per_entity: usize,
    /// Entities per latent cluster, on average.
    pub cluster_size: usize,
    /// Probability that a relation tail stays inside the head's cluster.
    pub intra_cluster_prob: f64,
    pub image_fraction: f64,
    /// Spread of an entity's visual vector around its cluster centroid.
    pub visual_entity_scale: f64,
    /// Per-coordinate noise std on target features at `structure_noise = 1`.
    pub feature_noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 200,
            n_relations: 12,
            n_attributes: 16,
            feature_dim: 16,
            structure_noise: 0.0,
            rng_seed: 0,
            avg_degree: 4.0,
            max_attributes_per_entity: 3,
            cluster_size: 10,
            intra_cluster_prob: 0.6,
            image_fraction: 0.9,
            visual_entity_scale: 0.1,
            feature_noise_scale: 1.0,
        }
    }
}

/// A generated benchmark: both graphs, their features, and the full
/// ground-truth alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub source: KnowledgeGraph,
    pub target: KnowledgeGraph,
    /// Every source entity paired with its target counterpart.
    pub seeds: SeedAlignmentSet,
    pub source_features: ModalFeatureBundle,
    pub target_features: ModalFeatureBundle,
}

fn zipf_pick(rng: &mut ChaCha8Rng, weights: &[f64], total: f64) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

struct GraphBuilder {
    kg: KnowledgeGraph,
    rel_idx: HashMap<String, usize>,
    attr_idx: HashMap<String, usize>,
}

impl GraphBuilder {
    fn new(entities: Vec<String>) -> Self {
        let n = entities.len();
        GraphBuilder {
            kg: KnowledgeGraph {
                entities,
                image_keys: vec![None; n],
                ..Default::default()
            },
            rel_idx: HashMap::new(),
            attr_idx: HashMap::new(),
        }
    }

    fn relation(&mut self, h: usize, name: &str, t: usize) {
        let r = *self.rel_idx.entry(name.to_owned()).or_insert_with(|| {
            self.kg.relations.push(name.to_owned());
            self.kg.relations.len() - 1
        });
        self.kg.relation_triples.push(RelationTriple { head: h, relation: r, tail: t });
    }

    fn attribute(&mut self, e: usize, name: &str, value: &str) {
        let a = *self.attr_idx.entry(name.to_owned()).or_insert_with(|| {
            self.kg.attributes.push(name.to_owned());
            self.kg.attributes.len() - 1
        });
        self.kg.attribute_triples.push(AttributeTriple {
            entity: e,
            attribute: a,
            value: value.to_owned(),
        });
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generate a source/target pair with ground-truth alignment.
pub fn generate_synthetic_pair(cfg: &SynthConfig) -> Result<SyntheticBenchmark> {
    let n = cfg.n_entities;
    if n < 4 {
        return Err(Error::Argument(format!("need at least 4 entities, got {n}")));
    }
    if cfg.n_relations == 0 || cfg.n_attributes == 0 || cfg.feature_dim == 0 {
        return Err(Error::Argument("relation, attribute and feature counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.structure_noise) {
        return Err(Error::Argument(format!(
            "structure noise must lie in [0, 1], got {}",
            cfg.structure_noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n_clusters = (n / cfg.cluster_size.max(1)).max(2);
    let cluster: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_clusters)).collect();
    let mut members = vec![Vec::new(); n_clusters];
    for (e, &c) in cluster.iter().enumerate() {
        members[c].push(e);
    }

    let rel_w: Vec<f64> = (0..cfg.n_relations).map(|r| 1.0 / (r + 1) as f64).collect();
    let rel_total: f64 = rel_w.iter().sum();
    let attr_w: Vec<f64> = (0..cfg.n_attributes).map(|a| 1.0 / (a + 1) as f64).collect();
    let attr_total: f64 = attr_w.iter().sum();
    let rel_name = |r: usize| format!("rel_{r}");
    let attr_name = |a: usize| format!("attr_{a}");

    // Relation triples, (head, relation, tail) without duplicates or self-loops.
    let n_triples = ((n as f64) * cfg.avg_degree / 2.0).round() as usize;
    let mut triples: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    let mut guard = 0;
    while triples.len() < n_triples && guard < n_triples * 50 {
        guard += 1;
        let h = rng.random_range(0..n);
        let same = &members[cluster[h]];
        let t = if rng.random::<f64>() < cfg.intra_cluster_prob && same.len() > 1 {
            same[rng.random_range(0..same.len())]
        } else {
            rng.random_range(0..n)
        };
        if t == h {
            continue;
        }
        let r = if rng.random::<f64>() < 0.5 {
            cluster[h] % cfg.n_relations
        } else {
            zipf_pick(&mut rng, &rel_w, rel_total)
        };
        triples.insert((h, r, t));
    }

    // Attribute triples.
    let mut attrs: Vec<(usize, usize, String)> = Vec::new();
    for e in 0..n {
        let k = rng.random_range(1..=cfg.max_attributes_per_entity.max(1));
        let mut chosen = BTreeSet::new();
        chosen.insert(cluster[e] % cfg.n_attributes);
        while chosen.len() < k.min(cfg.n_attributes) {
            chosen.insert(zipf_pick(&mut rng, &attr_w, attr_total));
        }
        for a in chosen {
            attrs.push((e, a, format!("{:.3}", rng.random::<f64>())));
        }
    }

    // Visual vectors around cluster centroids.
    let d = cfg.feature_dim;
    let centroids: Vec<Vec<f64>> = (0..n_clusters).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect();
    let src_visual: Vec<Vec<f64>> = (0..n)
        .map(|e| {
            centroids[cluster[e]]
                .iter()
                .map(|c| c + cfg.visual_entity_scale * gaussian(&mut rng))
                .collect()
        })
        .collect();

    // Ground-truth permutation: source i ↔ target perm[i].
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut tgt_triples: Vec<(usize, usize, usize)> =
        triples.iter().map(|&(h, r, t)| (perm[h], r, perm[t])).collect();
    let n_rewire = (cfg.structure_noise * tgt_triples.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..tgt_triples.len()).collect();
    order.shuffle(&mut rng);
    let mut present: HashSet<(usize, usize, usize)> = tgt_triples.iter().copied().collect();
    for &k in order.iter().take(n_rewire) {
        let (h, r, t_old) = tgt_triples[k];
        for _ in 0..32 {
            let t = rng.random_range(0..n);
            if t != h && t != t_old && !present.contains(&(h, r, t)) {
                present.remove(&(h, r, t_old));
                present.insert((h, r, t));
                tgt_triples[k] = (h, r, t);
                break;
            }
        }
    }
    tgt_triples.sort_unstable();

    let mut tgt_attrs: Vec<(usize, usize, String)> =
        attrs.iter().map(|(e, a, v)| (perm[*e], *a, v.clone())).collect();
    let n_attr_rewire = (cfg.structure_noise * tgt_attrs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..tgt_attrs.len()).collect();
    order.shuffle(&mut rng);
    for &k in order.iter().take(n_attr_rewire) {
        if cfg.n_attributes > 1 {
            let old = tgt_attrs[k].1;
            let mut a = rng.random_range(0..cfg.n_attributes - 1);
            if a >= old {
                a += 1;
            }
            tgt_attrs[k].1 = a;
        }
    }
    tgt_attrs.sort();

    let mut src = GraphBuilder::new((0..n).map(|i| format!("s{i}")).collect());
    for &(h, r, t) in &triples {
        src.relation(h, &rel_name(r), t);
    }
    for (e, a, v) in &attrs {
        src.attribute(*e, &attr_name(*a), v);
    }
    let mut tgt = GraphBuilder::new((0..n).map(|i| format!("t{i}")).collect());
    for &(h, r, t) in &tgt_triples {
        tgt.relation(h, &rel_name(r), t);
    }
    for (e, a, v) in &tgt_attrs {
        tgt.attribute(*e, &attr_name(*a), v);
    }

    // Image presence is drawn independently per graph.
    let src_has: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.image_fraction).collect();
    let tgt_has: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.image_fraction).collect();
    let noise_std = cfg.structure_noise * cfg.feature_noise_scale;
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let tgt_visual: Vec<Vec<f64>> = (0..n)
        .map(|j| src_visual[inv[j]].iter().map(|v| v + noise_std * gaussian(&mut rng)).collect())
        .collect();

    let (mut source, mut target) = (src.kg, tgt.kg);
    for e in 0..n {
        source.image_keys[e] = src_has[e].then_some(e);
        target.image_keys[e] = tgt_has[e].then_some(e);
    }

    let text_seed = cfg.rng_seed ^ 0x7e57_5eed;
    let rel_vocab = build_bow_vocab(&[&source, &target], FeatureKind::Relation, cfg.n_relations)?;
    let attr_vocab = build_bow_vocab(&[&source, &target], FeatureKind::Attribute, cfg.n_attributes)?;

    let bundle = |kg: &KnowledgeGraph, visual: &[Vec<f64>], has: &[bool], rng: &mut ChaCha8Rng, noisy: bool| {
        let mut text_rel = stub_text_features(kg, FeatureKind::Relation, d, text_seed);
        let mut text_attr = stub_text_features(kg, FeatureKind::Attribute, d, text_seed);
        if noisy {
            text_rel.mapv_inplace(|v| v + noise_std * gaussian(rng));
            text_attr.mapv_inplace(|v| v + noise_std * gaussian(rng));
        }
        let map = visual
            .iter()
            .enumerate()
            .filter(|(e, _)| has[*e])
            .map(|(e, v)| (e, v.clone()))
            .collect();
        let (visual, visual_present) = crate::features::impute_missing_visual(&map, kg.num_entities(), d);
        ModalFeatureBundle {
            bow_rel: bow_features(kg, &rel_vocab),
            bow_attr: bow_features(kg, &attr_vocab),
            text_rel,
            text_attr,
            visual,
            visual_present,
        }
    };
    let source_features = bundle(&source, &src_visual, &src_has, &mut rng, false);
    let target_features = bundle(&target, &tgt_visual, &tgt_has, &mut rng, true);

    let seeds = SeedAlignmentSet::new(
        perm.iter().enumerate().map(|(i, &j)| AlignedPair::new(i, j)).collect(),
        SeedRole::Train,
    )?;

    Ok(SyntheticBenchmark {
        source,
        target,
        seeds,
        source_features,
        target_features,
    })
}

/// Dense visual rows of a bundle as an index → vector map, keeping only
/// entities that have an image.
pub fn visual_rows(bundle: &ModalFeatureBundle) -> Vec<(usize, Vec<f64>)> {
    bundle
        .visual_present
        .iter()
        .enumerate()
        .filter(|(_, p)| **p)
        .map(|(e, _)| (e, bundle.visual.row(e).to_vec()))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;

    fn name_triples(kg: &KnowledgeGraph) -> HashSet<(String, String, String)> {
        kg.relation_triples
            .iter()
            .map(|t| {
                (
                    kg.entities[t.head].clone(),
                    kg.relations[t.relation].clone(),
                    kg.entities[t.tail].clone(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_noise_is_isomorphic() {
        let b = generate_synthetic_pair(&SynthConfig { n_entities: 60, rng_seed: 3, ..Default::default() }).unwrap();
        let map: HashMap<&str, &str> = b
            .seeds
            .pairs()
            .iter()
            .map(|p| (b.source.entities[p.source].as_str(), b.target.entities[p.target].as_str()))
            .collect();
        let mapped: HashSet<_> = name_triples(&b.source)
            .into_iter()
            .map(|(h, r, t)| (map[h.as_str()].to_owned(), r, map[t.as_str()].to_owned()))
            .collect();
        assert_eq!(mapped, name_triples(&b.target));
        for p in b.seeds.pairs() {
            assert_eq!(b.source_features.text_rel.row(p.source), b.target_features.text_rel.row(p.target));
            assert_eq!(b.source_features.bow_attr.row(p.source), b.target_features.bow_attr.row(p.target));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { n_entities: 200, structure_noise: 0.1, rng_seed: 11, ..Default::default() };
        assert_eq!(generate_synthetic_pair(&cfg).unwrap(), generate_synthetic_pair(&cfg).unwrap());
    }

    #[test]
    fn seeds_are_a_bijection() {
        let b = generate_synthetic_pair(&SynthConfig { n_entities: 50, structure_noise: 0.3, ..Default::default() }).unwrap();
        assert_eq!(b.seeds.len(), 50);
        let mut s: Vec<_> = b.seeds.pairs().iter().map(|p| p.source).collect();
        let mut t: Vec<_> = b.seeds.pairs().iter().map(|p| p.target).collect();
        s.sort();
        t.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(t, (0..50).collect::<Vec<_>>());
        b.source.validate().unwrap();
        b.target.validate().unwrap();
        b.source_features.validate(50).unwrap();
        b.target_features.validate(50).unwrap();
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_synthetic_pair(&SynthConfig { n_entities: 3, ..Default::default() }).is_err());
        assert!(generate_synthetic_pair(&SynthConfig { n_relations: 0, ..Default::default() }).is_err());
    }
}
