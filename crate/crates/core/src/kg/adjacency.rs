use super::KnowledgeGraph;

/// Undirected neighbor lists with a self-loop on every entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Build from explicit lists; each list is sorted, deduplicated and given
    /// a self-loop, and reverse edges are added.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Adjacency { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, l)| l.iter().all(|&j| self.neighbors[j].binary_search(&i).is_ok()))
    }
}

/// Neighborhoods over relation-triple endpoints, ignoring direction and
/// relation type.
pub fn build_adjacency(kg: &KnowledgeGraph) -> Adjacency {
    Adjacency::from_edges(
        kg.num_entities(),
        kg.relation_triples.iter().map(|t| (t.head, t.tail)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationTriple;
    use proptest::prelude::*;

    fn kg(n: usize, triples: &[(usize, usize, usize)]) -> KnowledgeGraph {
        KnowledgeGraph {
            entities: (0..n).map(|i| format!("e{i}")).collect(),
            relations: vec!["r".into(), "s".into()],
            relation_triples: triples
                .iter()
                .map(|&(head, relation, tail)| RelationTriple { head, relation, tail })
                .collect(),
            image_keys: vec![None; n],
            ..Default::default()
        }
    }

    #[test]
    fn self_loops_only() {
        let a = build_adjacency(&kg(3, &[]));
        for i in 0..3 {
            assert_eq!(a.neighbors(i), &[i]);
        }
    }

    #[test]
    fn single_edge_is_symmetric() {
        let a = build_adjacency(&kg(2, &[(0, 0, 1)]));
        assert_eq!(a.neighbors(0), &[0, 1]);
        assert_eq!(a.neighbors(1), &[0, 1]);
    }

    #[test]
    fn parallel_triples_dedupe() {
        assert_eq!(
            build_adjacency(&kg(2, &[(0, 0, 1), (0, 1, 1)])),
            build_adjacency(&kg(2, &[(0, 0, 1)]))
        );
    }

    proptest! {
        #[test]
        fn always_symmetric_with_self_loops(edges in proptest::collection::vec((0usize..12, 0usize..12), 0..40)) {
            let triples: Vec<_> = edges.iter().map(|&(h, t)| (h, 0, t)).collect();
            let a = build_adjacency(&kg(12, &triples));
            prop_assert!(a.is_symmetric());
            for i in 0..12 {
                prop_assert!(a.neighbors(i).contains(&i));
            }
        }
    }
}
