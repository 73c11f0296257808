//! Per-entity raw modality features: bag-of-words counts, text-feature
//! ingestion with a deterministic stub encoder, and visual-feature ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Relation,
    Attribute,
}

/// The top-N relation (or attribute) names across both graphs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowVocabulary {
    pub kind: FeatureKind,
    /// Sorted by descending frequency, ties broken lexicographically.
    pub names: Vec<String>,
    pub capacity: usize,
}

impl BowVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn entity_names(kg: &KnowledgeGraph, kind: FeatureKind) -> Vec<Vec<&str>> {
    let mut out = vec![Vec::new(); kg.num_entities()];
    match kind {
        FeatureKind::Relation => {
            for t in &kg.relation_triples {
                let name = kg.relations[t.relation].as_str();
                out[t.head].push(name);
                out[t.tail].push(name);
            }
        }
        FeatureKind::Attribute => {
            for t in &kg.attribute_triples {
                out[t.entity].push(kg.attributes[t.attribute].as_str());
            }
        }
    }
    out
}

/// Count names by triple frequency over all given graphs and keep the top `n`.
pub fn build_bow_vocab(graphs: &[&KnowledgeGraph], kind: FeatureKind, n: usize) -> Result<BowVocabulary> {
    if n == 0 {
        return Err(Error::Argument("vocabulary size must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for kg in graphs {
        match kind {
            FeatureKind::Relation => {
                for t in &kg.relation_triples {
                    *counts.entry(kg.relations[t.relation].as_str()).or_default() += 1;
                }
            }
            FeatureKind::Attribute => {
                for t in &kg.attribute_triples {
                    *counts.entry(kg.attributes[t.attribute].as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(n);
    Ok(BowVocabulary {
        kind,
        names: ranked.into_iter().map(|(s, _)| s.to_owned()).collect(),
        capacity: n,
    })
}

/// Count matrix (entities × vocabulary). Relations count on both endpoints,
/// attributes on their subject; names outside the vocabulary are ignored.
pub fn bow_features(kg: &KnowledgeGraph, vocab: &BowVocabulary) -> Array2<f64> {
    let col: HashMap<&str, usize> = vocab.names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = Array2::zeros((kg.num_entities(), vocab.len()));
    for (e, names) in entity_names(kg, vocab.kind).into_iter().enumerate() {
        for name in names {
            if let Some(&k) = col.get(name) {
                out[[e, k]] += 1.0;
            }
        }
    }
    out
}

/// The entity's relation (or attribute) names, deduplicated, sorted and
/// space-joined.
pub fn serialize_triples(kg: &KnowledgeGraph, entity: usize, kind: FeatureKind) -> String {
    let names: BTreeSet<&str> = match kind {
        FeatureKind::Relation => kg
            .relation_triples
            .iter()
            .filter(|t| t.head == entity || t.tail == entity)
            .map(|t| kg.relations[t.relation].as_str())
            .collect(),
        FeatureKind::Attribute => kg
            .attribute_triples
            .iter()
            .filter(|t| t.entity == entity)
            .map(|t| kg.attributes[t.attribute].as_str())
            .collect(),
    };
    names.into_iter().collect::<Vec<_>>().join(" ")
}

/// Serialize every entity at once (linear in the number of triples).
pub fn serialize_all(kg: &KnowledgeGraph, kind: FeatureKind) -> Vec<String> {
    entity_names(kg, kind)
        .into_iter()
        .map(|names| {
            let set: BTreeSet<&str> = names.into_iter().collect();
            set.into_iter().collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn hashed_gaussian(token: &str, dim: usize, rng_seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic stand-in for a pre-trained text encoder.
///
/// Each whitespace token maps to a hashed Gaussian vector; the output is the
/// normalized sum, so texts sharing words land close together. Text with no
/// tokens hashes as a whole.
pub fn stub_text_encoder(text: &str, dim: usize, rng_seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "stub encoder dimension must be positive");
    let mut acc = vec![0.0; dim];
    let mut any = false;
    for tok in text.split_whitespace() {
        any = true;
        for (a, v) in acc.iter_mut().zip(hashed_gaussian(tok, dim, rng_seed)) {
            *a += v;
        }
    }
    if !any {
        acc = hashed_gaussian(&format!("\u{0}{text}"), dim, rng_seed);
    }
    let mut norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Tokens cancelled exactly; fall back to the whole-text hash.
        acc = hashed_gaussian(&format!("\u{1}{text}"), dim, rng_seed);
        norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    acc.iter().map(|v| v / norm).collect()
}

/// Encode every entity's serialized names with the stub encoder.
pub fn stub_text_features(kg: &KnowledgeGraph, kind: FeatureKind, dim: usize, rng_seed: u64) -> Array2<f64> {
    let texts = serialize_all(kg, kind);
    let rows = crate::par::map_slice(&texts, |t| stub_text_encoder(t, dim, rng_seed));
    let mut out = Array2::zeros((kg.num_entities(), dim));
    for (mut row, v) in out.axis_iter_mut(Axis(0)).zip(rows) {
        row.assign(&ndarray::ArrayView1::from(&v[..]));
    }
    out
}

/// Read a `count dim` headed feature file into an index → vector map.
pub fn load_feature_file(path: &Path, expected_dim: usize) -> Result<BTreeMap<usize, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut it = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = it
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing header", path.display())))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{}: bad header '{header}'", path.display())))
    };
    if head.len() != 2 {
        return Err(Error::Format(format!("{}: bad header '{header}'", path.display())));
    }
    let (count, dim) = (parse_usize(head[0])?, parse_usize(head[1])?);
    if dim != expected_dim {
        return Err(Error::Format(format!(
            "{}: dimension {dim} does not match expected {expected_dim}",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for (i, line) in it {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(path, line_no, "expected entity index"))?;
        let values = fields
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{}:{line_no}: expected {dim} values, found {}",
                path.display(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: non-finite feature value",
                path.display()
            )));
        }
        if out.insert(id, values).is_some() {
            return Err(Error::Validation(format!(
                "{}:{line_no}: entity {id} listed twice",
                path.display()
            )));
        }
    }
    if out.len() != count {
        return Err(Error::Format(format!(
            "{}: header promises {count} rows, found {}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

/// Write rows in the format read by [`load_feature_file`]. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_feature_file<'a>(
    path: &Path,
    dim: usize,
    rows: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let rows: Vec<_> = rows.into_iter().collect();
    let mut buf = String::new();
    let _ = writeln!(buf, "{} {dim}", rows.len());
    for (id, v) in rows {
        assert_eq!(v.len(), dim, "row width must equal the header dimension");
        let _ = write!(buf, "{id}");
        for x in v {
            let _ = write!(buf, " {x:?}");
        }
        buf.push('\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(buf.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Fill rows for entities without a visual vector with the mean of those
/// present (zeros if none are present).
pub fn impute_missing_visual(
    features: &BTreeMap<usize, Vec<f64>>,
    n_entities: usize,
    dim: usize,
) -> (Array2<f64>, Vec<bool>) {
    let mut out = Array2::zeros((n_entities, dim));
    let mut present = vec![false; n_entities];
    let mut mean = vec![0.0; dim];
    let mut n_present = 0usize;
    for (&id, v) in features.iter().filter(|(&id, _)| id < n_entities) {
        present[id] = true;
        n_present += 1;
        for (k, x) in v.iter().enumerate() {
            out[[id, k]] = *x;
            mean[k] += x;
        }
    }
    if n_present > 0 {
        mean.iter_mut().for_each(|m| *m /= n_present as f64);
        for (e, _) in present.iter().enumerate().filter(|(_, p)| !**p) {
            for k in 0..dim {
                out[[e, k]] = mean[k];
            }
        }
    }
    (out, present)
}

/// Raw per-entity inputs for every modality of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalFeatureBundle {
    pub bow_rel: Array2<f64>,
    pub bow_attr: Array2<f64>,
    pub text_rel: Array2<f64>,
    pub text_attr: Array2<f64>,
    pub visual: Array2<f64>,
    pub visual_present: Vec<bool>,
}

impl ModalFeatureBundle {
    pub fn num_entities(&self) -> usize {
        self.bow_rel.nrows()
    }

    pub fn validate(&self, n_entities: usize) -> Result<()> {
        let arrays = [
            ("bow_rel", &self.bow_rel),
            ("bow_attr", &self.bow_attr),
            ("text_rel", &self.text_rel),
            ("text_attr", &self.text_attr),
            ("visual", &self.visual),
        ];
        for (name, a) in arrays {
            if a.nrows() != n_entities {
                return Err(Error::Validation(format!(
                    "{name} has {} rows for {n_entities} entities",
                    a.nrows()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} contains non-finite values")));
            }
        }
        if self.visual_present.len() != n_entities {
            return Err(Error::Validation("visual presence flags have the wrong length".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{AttributeTriple, RelationTriple};
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn kg_with(rels: &[(usize, &str, usize)], attrs: &[(usize, &str)], n: usize) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph {
            entities: (0..n).map(|i| format!("e{i}")).collect(),
            image_keys: vec![None; n],
            ..Default::default()
        };
        for &(h, r, t) in rels {
            let ri = kg.relations.iter().position(|x| x == r).unwrap_or_else(|| {
                kg.relations.push(r.to_owned());
                kg.relations.len() - 1
            });
            kg.relation_triples.push(RelationTriple { head: h, relation: ri, tail: t });
        }
        for &(e, a) in attrs {
            let ai = kg.attributes.iter().position(|x| x == a).unwrap_or_else(|| {
                kg.attributes.push(a.to_owned());
                kg.attributes.len() - 1
            });
            kg.attribute_triples.push(AttributeTriple { entity: e, attribute: ai, value: "v".into() });
        }
        kg
    }

    #[test]
    fn vocab_keeps_most_frequent() {
        let kg = kg_with(&[(0, "a", 1), (1, "a", 2), (2, "a", 0), (0, "b", 1)], &[], 3);
        let v = build_bow_vocab(&[&kg], FeatureKind::Relation, 1).unwrap();
        assert_eq!(v.names, vec!["a"]);
        let all = build_bow_vocab(&[&kg], FeatureKind::Relation, 10).unwrap();
        assert_eq!(all.names, vec!["a", "b"]);
    }

    #[test]
    fn vocab_tie_prefers_lexicographically_smaller() {
        let kg = kg_with(&[(0, "zeta", 1), (0, "alpha", 1)], &[], 2);
        let v = build_bow_vocab(&[&kg, &kg], FeatureKind::Relation, 1).unwrap();
        assert_eq!(v.names, vec!["alpha"]);
        assert!(build_bow_vocab(&[&kg], FeatureKind::Relation, 0).is_err());
    }

    #[test]
    fn bow_counts() {
        let kg = kg_with(&[(0, "r1", 1), (0, "r1", 2), (1, "oov", 2)], &[], 4);
        let vocab = BowVocabulary { kind: FeatureKind::Relation, names: vec!["r1".into()], capacity: 1 };
        let m = bow_features(&kg, &vocab);
        assert_eq!(m[[0, 0]], 2.0);
        assert_eq!(m[[3, 0]], 0.0);
        // entity 2 only touches "oov" besides one r1 tail
        assert_eq!(m[[2, 0]], 1.0);
        let only_oov = kg_with(&[(0, "oov", 1)], &[], 2);
        assert!(bow_features(&only_oov, &vocab).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn serialization_sorted_and_deduped() {
        let kg = kg_with(&[(0, "timeZone", 1), (0, "populationTotal", 1), (0, "timeZone", 1)], &[(1, "name")], 3);
        assert_eq!(serialize_triples(&kg, 0, FeatureKind::Relation), "populationTotal timeZone");
        assert_eq!(serialize_triples(&kg, 2, FeatureKind::Relation), "");
        assert_eq!(serialize_triples(&kg, 1, FeatureKind::Attribute), "name");
        assert_eq!(serialize_all(&kg, FeatureKind::Relation)[0], "populationTotal timeZone");
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let d = TempDir::new().unwrap();
        let p = d.path().join("f");
        fs::write(&p, "0 64\n").unwrap();
        assert!(load_feature_file(&p, 64).unwrap().is_empty());
        fs::write(&p, "0 32\n").unwrap();
        assert!(matches!(load_feature_file(&p, 64), Err(Error::Format(_))));

        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..16).map(|k| (i * 16 + k) as f64 / 7.0 - 3.0).collect()).collect();
        write_feature_file(&p, 16, rows.iter().enumerate().map(|(i, r)| (i, &r[..]))).unwrap();
        let back = load_feature_file(&p, 16).unwrap();
        assert_eq!(back.len(), 5);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(&back[&i], r);
        }

        fs::write(&p, "1 2\n0 1.0 NaN\n").unwrap();
        assert!(matches!(load_feature_file(&p, 2), Err(Error::Validation(_))));
        fs::write(&p, "1 2\n0 1.0\n").unwrap();
        assert!(matches!(load_feature_file(&p, 2), Err(Error::Format(_))));
    }

    #[test]
    fn stub_encoder_contract() {
        let a = stub_text_encoder("birthplace", 32, 7);
        assert_eq!(a, stub_text_encoder("birthplace", 32, 7));
        let corpus = ["", "birthplace", "people_born_here", "timeZone", "populationTotal timeZone", "a b c"];
        for (i, x) in corpus.iter().enumerate() {
            let u = stub_text_encoder(x, 32, 7);
            assert!((u.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            for y in &corpus[i + 1..] {
                let v = stub_text_encoder(y, 32, 7);
                let cos: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
                assert!(cos < 1.0 - 1e-9, "{x:?} vs {y:?}");
            }
        }
    }

    #[test]
    fn imputation() {
        let mut m = BTreeMap::new();
        m.insert(0, vec![1.0, 2.0]);
        m.insert(2, vec![3.0, 6.0]);
        let (x, p) = impute_missing_visual(&m, 3, 2);
        assert_eq!(p, vec![true, false, true]);
        assert_eq!(x.row(1).to_vec(), vec![2.0, 4.0]);

        let (z, p) = impute_missing_visual(&BTreeMap::new(), 2, 3);
        assert!(z.iter().all(|&v| v == 0.0) && p.iter().all(|&f| !f));

        m.insert(1, vec![0.5, 0.5]);
        let (all, p) = impute_missing_visual(&m, 3, 2);
        assert!(p.iter().all(|&f| f));
        assert_eq!(all.row(1).to_vec(), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn stub_norm_is_one(text in ".{0,40}", dim in 1usize..40, seed in any::<u64>()) {
            let v = stub_text_encoder(&text, dim, seed);
            prop_assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn bow_additive_and_serialization_order_free(
            a in proptest::collection::vec((0usize..5, 0usize..3, 0usize..5), 0..20),
            b in proptest::collection::vec((0usize..5, 0usize..3, 0usize..5), 0..20),
        ) {
            let names = ["r0", "r1", "r2"];
            let to = |v: &[(usize, usize, usize)]| v.iter().map(|&(h, r, t)| (h, names[r], t)).collect::<Vec<_>>();
            let (ta, tb) = (to(&a), to(&b));
            let joined: Vec<_> = ta.iter().chain(&tb).copied().collect();
            let vocab = BowVocabulary { kind: FeatureKind::Relation, names: names.iter().map(|s| s.to_string()).collect(), capacity: 3 };
            let sum = bow_features(&kg_with(&ta, &[], 5), &vocab) + bow_features(&kg_with(&tb, &[], 5), &vocab);
            prop_assert_eq!(bow_features(&kg_with(&joined, &[], 5), &vocab), sum);

            let mut rev = joined.clone();
            rev.reverse();
            let (k1, k2) = (kg_with(&joined, &[], 5), kg_with(&rev, &[], 5));
            for e in 0..5 {
                prop_assert_eq!(serialize_triples(&k1, e, FeatureKind::Relation), serialize_triples(&k2, e, FeatureKind::Relation));
            }
        }
    }
}
