use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lines, read_text, write_lines, KnowledgeGraph};
use crate::error::{Error, Result};

/// An aligned (source, target) entity pair, as dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AlignedPair {
    pub source: usize,
    pub target: usize,
}

impl AlignedPair {
    pub fn new(source: usize, target: usize) -> Self {
        AlignedPair { source, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedRole {
    Train,
    Test,
}

/// A 1-to-1 set of seed alignments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedAlignmentSet {
    pairs: Vec<AlignedPair>,
    pub role: SeedRole,
}

impl SeedAlignmentSet {
    /// Build a set, rejecting any entity that appears twice on either side.
    pub fn new(pairs: Vec<AlignedPair>, role: SeedRole) -> Result<Self> {
        let set = SeedAlignmentSet { pairs, role };
        set.check_one_to_one()?;
        Ok(set)
    }

    pub fn empty(role: SeedRole) -> Self {
        SeedAlignmentSet { pairs: Vec::new(), role }
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

    pub fn check_one_to_one(&self) -> Result<()> {
        let mut src = HashSet::new();
        let mut tgt = HashSet::new();
        for p in &self.pairs {
            if !src.insert(p.source) {
                return Err(Error::Validation(format!("source entity {} aligned twice", p.source)));
            }
            if !tgt.insert(p.target) {
                return Err(Error::Validation(format!("target entity {} aligned twice", p.target)));
            }
        }
        Ok(())
    }
}

/// Read `source<TAB>target` lines, resolving names against both graphs.
pub fn load_seeds(path: &Path, src: &KnowledgeGraph, tgt: &KnowledgeGraph) -> Result<SeedAlignmentSet> {
    let text = read_text(path)?;
    let (si, ti) = (src.entity_index(), tgt.entity_index());
    let mut pairs = Vec::new();
    for (line_no, line) in lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        let resolve = |idx: &std::collections::HashMap<&str, usize>, name: &str| {
            idx.get(name).copied().ok_or_else(|| {
                Error::Validation(format!("{}:{line_no}: unknown entity '{name}'", path.display()))
            })
        };
        pairs.push(AlignedPair::new(resolve(&si, fields[0])?, resolve(&ti, fields[1])?));
    }
    SeedAlignmentSet::new(pairs, SeedRole::Train)
}

pub fn write_seeds(
    path: &Path,
    seeds: &SeedAlignmentSet,
    src: &KnowledgeGraph,
    tgt: &KnowledgeGraph,
) -> Result<()> {
    write_lines(path, |w: &mut dyn Write| {
        for p in seeds.pairs() {
            writeln!(w, "{}\t{}", src.entities[p.source], tgt.entities[p.target])?;
        }
        Ok(())
    })
}

/// Deterministically partition seeds into train and test sets.
///
/// The input is sorted before shuffling, so the split depends only on the
/// pair set and `rng_seed`, never on file order.
pub fn split_seeds(
    seeds: &SeedAlignmentSet,
    train_fraction: f64,
    rng_seed: u64,
) -> Result<(SeedAlignmentSet, SeedAlignmentSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if seeds.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 seeds to split, got {}",
            seeds.len()
        )));
    }
    let mut pairs = seeds.pairs.clone();
    pairs.sort_unstable();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let n_train = (train_fraction * pairs.len() as f64).round() as usize;
    let test = pairs.split_off(n_train);
    Ok((
        SeedAlignmentSet { pairs, role: SeedRole::Train },
        SeedAlignmentSet { pairs: test, role: SeedRole::Test },
    ))
}
