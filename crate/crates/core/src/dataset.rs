//! A graph pair with its encoder inputs, and the on-disk directory layout.
//!
//! ```text
//! dir/seeds.tsv                   all gold pairs (source<TAB>target names)
//! dir/train_seeds.tsv             optional explicit split, with test_seeds.tsv
//! dir/{source,target}/entities.txt
//! dir/{source,target}/rel_triples.tsv
//! dir/{source,target}/attr_triples.tsv
//! dir/{source,target}/{rel_text,attr_text,visual}.feat
//! ```
//!
//! Text feature files are optional; without them the stub text encoder is
//! used. The visual file may omit entities without an image.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{GraphInputs, ModelShape};
use crate::error::{Error, Result};
use crate::features::{
    bow_features, build_bow_vocab, impute_missing_visual, load_feature_file, stub_text_features, write_feature_file,
    FeatureKind, ModalFeatureBundle,
};
use crate::kg::synth::{visual_rows, SyntheticBenchmark};
use crate::kg::{
    build_adjacency, load_kg, load_seeds, split_seeds, write_kg, write_seeds, KnowledgeGraph, MmkgPair,
    SeedRole, Side,
};

/// Everything training and evaluation read.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pair: MmkgPair,
    pub source: GraphInputs,
    pub target: GraphInputs,
    pub shape: ModelShape,
}

impl Dataset {
    pub fn new(pair: MmkgPair, source: ModalFeatureBundle, target: ModalFeatureBundle) -> Result<Self> {
        pair.validate()?;
        source.validate(pair.source.num_entities())?;
        target.validate(pair.target.num_entities())?;
        let shape = ModelShape::from_features(&source, &target)?;
        let source = GraphInputs {
            side: Side::Source,
            adjacency: Arc::new(build_adjacency(&pair.source)),
            features: source,
        };
        let target = GraphInputs {
            side: Side::Target,
            adjacency: Arc::new(build_adjacency(&pair.target)),
            features: target,
        };
        Ok(Dataset { pair, source, target, shape })
    }

    /// Split the benchmark's gold pairs into train and test seeds.
    pub fn from_synthetic(bench: &SyntheticBenchmark, train_fraction: f64, split_seed: u64) -> Result<Self> {
        let (train, test) = split_seeds(&bench.seeds, train_fraction, split_seed)?;
        let pair = MmkgPair::new(bench.source.clone(), bench.target.clone(), train, test)?;
        Dataset::new(pair, bench.source_features.clone(), bench.target_features.clone())
    }

    pub fn inputs(&self, side: Side) -> &GraphInputs {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }
}

/// Feature construction choices for directory loading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    /// Vocabulary cap of the bag-of-words features.
    pub bow_size: usize,
    /// Width of stub text features when no text file is present.
    pub text_dim: usize,
    pub text_seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { bow_size: 1000, text_dim: 16, text_seed: 0 }
    }
}

fn side_dir(dir: &Path, side: Side) -> std::path::PathBuf {
    dir.join(match side {
        Side::Source => "source",
        Side::Target => "target",
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_graph(dir: &Path, kg: &KnowledgeGraph, f: &ModalFeatureBundle) -> Result<()> {
    create_dir(dir)?;
    write_kg(kg, &dir.join("rel_triples.tsv"), &dir.join("attr_triples.tsv"), &dir.join("entities.txt"))?;
    let dense = |a: &Array2<f64>| -> Vec<(usize, Vec<f64>)> { a.rows().into_iter().map(|r| r.to_vec()).enumerate().collect() };
    for (name, a) in [("rel_text.feat", &f.text_rel), ("attr_text.feat", &f.text_attr)] {
        let rows = dense(a);
        write_feature_file(&dir.join(name), a.ncols(), rows.iter().map(|(i, v)| (*i, v.as_slice())))?;
    }
    let vis = visual_rows(f);
    write_feature_file(&dir.join("visual.feat"), f.visual.ncols(), vis.iter().map(|(i, v)| (*i, v.as_slice())))
}

/// Write a synthetic benchmark in the directory layout.
pub fn write_dataset_dir(bench: &SyntheticBenchmark, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_graph(&side_dir(dir, Side::Source), &bench.source, &bench.source_features)?;
    write_graph(&side_dir(dir, Side::Target), &bench.target, &bench.target_features)?;
    write_seeds(&dir.join("seeds.tsv"), &bench.seeds, &bench.source, &bench.target)
}

fn feature_dim(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .next()
        .and_then(|h| h.split_whitespace().nth(1))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: missing or bad header", path.display())))
}

fn dense_rows(path: &Path, map: BTreeMap<usize, Vec<f64>>, n: usize, dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((n, dim));
    for e in 0..n {
        let row = map
            .get(&e)
            .ok_or_else(|| Error::Format(format!("{}: no row for entity {e}", path.display())))?;
        out.row_mut(e).assign(&ndarray::ArrayView1::from(row.as_slice()));
    }
    if let Some(extra) = map.keys().find(|&&k| k >= n) {
        return Err(Error::Validation(format!("{}: entity {extra} out of range", path.display())));
    }
    Ok(out)
}

fn text_features(dir: &Path, name: &str, kg: &KnowledgeGraph, kind: FeatureKind, opts: &DataOptions) -> Result<Array2<f64>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(stub_text_features(kg, kind, opts.text_dim, opts.text_seed));
    }
    let dim = feature_dim(&path)?;
    dense_rows(&path, load_feature_file(&path, dim)?, kg.num_entities(), dim)
}

fn load_graph(dir: &Path) -> Result<KnowledgeGraph> {
    let mut kg = load_kg(&dir.join("rel_triples.tsv"), &dir.join("attr_triples.tsv"), &dir.join("entities.txt"))?;
    kg.image_keys = vec![None; kg.num_entities()];
    Ok(kg)
}

/// Load a directory written by [`write_dataset_dir`] (or laid out the same way).
///
/// If `train_seeds.tsv` and `test_seeds.tsv` exist they define the split;
/// otherwise `seeds.tsv` is split with `train_fraction` and `split_seed`.
pub fn load_dataset_dir(dir: &Path, opts: &DataOptions, train_fraction: f64, split_seed: u64) -> Result<Dataset> {
    let (sdir, tdir) = (side_dir(dir, Side::Source), side_dir(dir, Side::Target));
    let mut source = load_graph(&sdir)?;
    let mut target = load_graph(&tdir)?;
    let (train_path, test_path) = (dir.join("train_seeds.tsv"), dir.join("test_seeds.tsv"));
    let (train, test) = if train_path.exists() && test_path.exists() {
        let mut train = load_seeds(&train_path, &source, &target)?;
        let mut test = load_seeds(&test_path, &source, &target)?;
        train.role = SeedRole::Train;
        test.role = SeedRole::Test;
        (train, test)
    } else {
        split_seeds(&load_seeds(&dir.join("seeds.tsv"), &source, &target)?, train_fraction, split_seed)?
    };

    let rel_vocab = build_bow_vocab(&[&source, &target], FeatureKind::Relation, opts.bow_size)?;
    let attr_vocab = build_bow_vocab(&[&source, &target], FeatureKind::Attribute, opts.bow_size)?;
    let mut bundles = Vec::with_capacity(2);
    for (d, kg) in [(&sdir, &mut source), (&tdir, &mut target)] {
        let vis_path = d.join("visual.feat");
        let vis_dim = feature_dim(&vis_path)?;
        let vis = load_feature_file(&vis_path, vis_dim)?;
        if let Some(extra) = vis.keys().find(|&&k| k >= kg.num_entities()) {
            return Err(Error::Validation(format!("{}: entity {extra} out of range", vis_path.display())));
        }
        for &e in vis.keys() {
            kg.image_keys[e] = Some(e);
        }
        let (visual, visual_present) = impute_missing_visual(&vis, kg.num_entities(), vis_dim);
        bundles.push(ModalFeatureBundle {
            bow_rel: bow_features(kg, &rel_vocab),
            bow_attr: bow_features(kg, &attr_vocab),
            text_rel: text_features(d, "rel_text.feat", kg, FeatureKind::Relation, opts)?,
            text_attr: text_features(d, "attr_text.feat", kg, FeatureKind::Attribute, opts)?,
            visual,
            visual_present,
        });
    }
    let tf = bundles.pop().expect("two bundles");
    let sf = bundles.pop().expect("two bundles");
    Dataset::new(MmkgPair::new(source, target, train, test)?, sf, tf)
}
