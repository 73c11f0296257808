//! Multi-modal knowledge-graph pairs: data model, file ingestion, seed
//! alignments and the adjacency used by the structure encoder.

mod adjacency;
mod seeds;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adjacency::{build_adjacency, Adjacency};
pub use seeds::{load_seeds, split_seeds, write_seeds, AlignedPair, SeedAlignmentSet, SeedRole};

/// Which of the two graphs an entity belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

/// Dense per-graph entity index tagged with its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub side: Side,
    pub index: usize,
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.side {
            Side::Source => "src",
            Side::Target => "tgt",
        };
        write!(f, "{tag}:{}", self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeTriple {
    pub entity: usize,
    pub attribute: usize,
    pub value: String,
}

/// One multi-modal knowledge graph.
///
/// Entities, relations and attributes are densely indexed; relation and
/// attribute vocabularies are in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub attributes: Vec<String>,
    pub relation_triples: Vec<RelationTriple>,
    pub attribute_triples: Vec<AttributeTriple>,
    /// Row key into a visual-feature file, when the entity has an image.
    pub image_keys: Vec<Option<usize>>,
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn entity_index(&self) -> HashMap<&str, usize> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }

    /// Check every index against its vocabulary bounds.
    pub fn validate(&self) -> Result<()> {
        let n = self.entities.len();
        for (k, t) in self.relation_triples.iter().enumerate() {
            if t.head >= n || t.tail >= n {
                return Err(Error::Validation(format!(
                    "relation triple {k}: entity index out of range ({} entities)",
                    n
                )));
            }
            if t.relation >= self.relations.len() {
                return Err(Error::Validation(format!(
                    "relation triple {k}: relation index {} out of range",
                    t.relation
                )));
            }
        }
        for (k, t) in self.attribute_triples.iter().enumerate() {
            if t.entity >= n {
                return Err(Error::Validation(format!(
                    "attribute triple {k}: entity index {} out of range",
                    t.entity
                )));
            }
            if t.attribute >= self.attributes.len() {
                return Err(Error::Validation(format!(
                    "attribute triple {k}: attribute index {} out of range",
                    t.attribute
                )));
            }
        }
        if self.image_keys.len() != n {
            return Err(Error::Validation(format!(
                "image key table has {} rows for {} entities",
                self.image_keys.len(),
                n
            )));
        }
        Ok(())
    }
}

/// A source/target graph pair with its train and test seed alignments.
#[derive(Clone, Debug, PartialEq)]
pub struct MmkgPair {
    pub source: KnowledgeGraph,
    pub target: KnowledgeGraph,
    pub train_seeds: SeedAlignmentSet,
    pub test_seeds: SeedAlignmentSet,
}

impl MmkgPair {
    pub fn new(
        source: KnowledgeGraph,
        target: KnowledgeGraph,
        train_seeds: SeedAlignmentSet,
        test_seeds: SeedAlignmentSet,
    ) -> Result<Self> {
        let pair = MmkgPair {
            source,
            target,
            train_seeds,
            test_seeds,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn graph(&self, side: Side) -> &KnowledgeGraph {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        let (ns, nt) = (self.source.num_entities(), self.target.num_entities());
        for set in [&self.train_seeds, &self.test_seeds] {
            set.check_one_to_one()?;
            for p in set.pairs() {
                if p.source >= ns || p.target >= nt {
                    return Err(Error::Validation(format!(
                        "seed ({}, {}) out of range",
                        p.source, p.target
                    )));
                }
            }
        }
        let train_src: std::collections::HashSet<_> =
            self.train_seeds.pairs().iter().map(|p| p.source).collect();
        let train_tgt: std::collections::HashSet<_> =
            self.train_seeds.pairs().iter().map(|p| p.target).collect();
        for p in self.test_seeds.pairs() {
            if train_src.contains(&p.source) || train_tgt.contains(&p.target) {
                return Err(Error::Validation(format!(
                    "test seed ({}, {}) overlaps the train seeds",
                    p.source, p.target
                )));
            }
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.is_empty())
}

fn intern(vocab: &mut Vec<String>, index: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&i) = index.get(name) {
        return i;
    }
    let i = vocab.len();
    vocab.push(name.to_owned());
    index.insert(name.to_owned(), i);
    i
}

/// Load one graph from its entity list, relation triples and attribute
/// triples. Entity indices follow the order of the entity list.
pub fn load_kg(triples_path: &Path, attr_path: &Path, entity_list_path: &Path) -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::default();

    let text = read_text(entity_list_path)?;
    let mut ent_index: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in lines(&text) {
        if ent_index.contains_key(line) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate entity '{line}'",
                entity_list_path.display()
            )));
        }
        intern(&mut kg.entities, &mut ent_index, line);
    }
    let lookup = |name: &str, path: &Path, line_no: usize| -> Result<usize> {
        ent_index.get(name).copied().ok_or_else(|| {
            Error::Validation(format!(
                "{}:{line_no}: unknown entity '{name}'",
                path.display()
            ))
        })
    };

    let text = read_text(triples_path)?;
    let mut rel_index = HashMap::new();
    for (line_no, line) in lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                triples_path,
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let head = lookup(fields[0], triples_path, line_no)?;
        let tail = lookup(fields[2], triples_path, line_no)?;
        let relation = intern(&mut kg.relations, &mut rel_index, fields[1]);
        kg.relation_triples.push(RelationTriple { head, relation, tail });
    }

    let text = read_text(attr_path)?;
    let mut attr_index = HashMap::new();
    for (line_no, line) in lines(&text) {
        // Values may themselves contain tabs; only the first two separate fields.
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                attr_path,
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let entity = lookup(fields[0], attr_path, line_no)?;
        let attribute = intern(&mut kg.attributes, &mut attr_index, fields[1]);
        kg.attribute_triples.push(AttributeTriple {
            entity,
            attribute,
            value: fields[2].to_owned(),
        });
    }

    kg.image_keys = vec![None; kg.entities.len()];
    Ok(kg)
}

fn write_lines(path: &Path, mut f: impl FnMut(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Write a graph in the canonical layout read by [`load_kg`].
pub fn write_kg(kg: &KnowledgeGraph, triples_path: &Path, attr_path: &Path, entity_list_path: &Path) -> Result<()> {
    write_lines(entity_list_path, |w| {
        for name in &kg.entities {
            writeln!(w, "{name}")?;
        }
        Ok(())
    })?;
    write_lines(triples_path, |w| {
        for t in &kg.relation_triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                kg.entities[t.head], kg.relations[t.relation], kg.entities[t.tail]
            )?;
        }
        Ok(())
    })?;
    write_lines(attr_path, |w| {
        for t in &kg.attribute_triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                kg.entities[t.entity], kg.attributes[t.attribute], t.value
            )?;
        }
        Ok(())
    })
}
