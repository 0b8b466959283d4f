//! The query/candidate graph.
//!
//! Node `i < N` is candidate `i` of the pool, node `N` is the query. Edges:
//! every ordered candidate pair `(i, cc, j)` with `i != j`, plus
//! `(query, qc, i)` and `(i, cq, query)` for every candidate, for a total of
//! `N^2 + N` directed edges.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidateExample;
use crate::embedder::{EmbedError, Embedder, EmbeddingVector};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Candidate,
    Query,
}

impl NodeType {
    pub const ALL: [NodeType; 2] = [NodeType::Candidate, NodeType::Query];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Candidate => "candidate",
            NodeType::Query => "query",
        }
    }
}

/// Edge relation. The derive order (`cc < qc < cq`) is the neighbor ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "cc")]
    CandCand,
    #[serde(rename = "qc")]
    QueryCand,
    #[serde(rename = "cq")]
    CandQuery,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::CandCand, Relation::QueryCand, Relation::CandQuery];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::CandCand => "cc",
            Relation::QueryCand => "qc",
            Relation::CandQuery => "cq",
        }
    }

    /// The (source type, target type) this relation connects.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            Relation::CandCand => (NodeType::Candidate, NodeType::Candidate),
            Relation::QueryCand => (NodeType::Query, NodeType::Candidate),
            Relation::CandQuery => (NodeType::Candidate, NodeType::Query),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub relation: Relation,
    pub dst: NodeId,
}

#[derive(Debug, Clone)]
pub struct PromptGraph {
    candidates: Vec<CandidateExample>,
    query: String,
    edges: Vec<Edge>,
    /// In-edges per node, sorted by (relation, source).
    incoming: Vec<Vec<(NodeId, Relation)>>,
    x: Array2<f64>,
}

impl PromptGraph {
    /// Embeds every candidate and the query, then wires the edges.
    pub fn build(
        pool: &[CandidateExample],
        query: &str,
        embedder: &dyn Embedder,
    ) -> Result<Self, GraphError> {
        if pool.is_empty() {
            return Err(GraphError::Argument("candidate pool is empty".into()));
        }
        let rows = pool
            .iter()
            .map(|c| embedder.embed_example(c))
            .collect::<Result<Vec<_>, _>>()?;
        let q = embedder.embed_text(query)?;
        Self::from_embeddings(pool, &rows, query, &q)
    }

    /// Builds the graph from already computed candidate and query vectors.
    pub fn from_embeddings(
        pool: &[CandidateExample],
        candidate_rows: &[EmbeddingVector],
        query: &str,
        query_row: &EmbeddingVector,
    ) -> Result<Self, GraphError> {
        let n = pool.len();
        if n == 0 {
            return Err(GraphError::Argument("candidate pool is empty".into()));
        }
        if query.trim().is_empty() {
            return Err(GraphError::Argument("query is empty".into()));
        }
        if candidate_rows.len() != n {
            return Err(GraphError::Argument(format!(
                "{} candidate embeddings for a pool of {n}",
                candidate_rows.len()
            )));
        }
        let d = query_row.dim();
        let mut x = Array2::zeros((n + 1, d));
        for (i, row) in candidate_rows.iter().chain(std::iter::once(query_row)).enumerate() {
            if row.dim() != d {
                return Err(GraphError::Argument(format!(
                    "embedding {i} has dimension {}, expected {d}",
                    row.dim()
                )));
            }
            x.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
        }

        let qid = NodeId(n);
        let mut edges = Vec::with_capacity(n * n + n);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                edges.push(Edge {
                    src: NodeId(i),
                    relation: Relation::CandCand,
                    dst: NodeId(j),
                });
            }
        }
        for i in 0..n {
            edges.push(Edge {
                src: qid,
                relation: Relation::QueryCand,
                dst: NodeId(i),
            });
        }
        for i in 0..n {
            edges.push(Edge {
                src: NodeId(i),
                relation: Relation::CandQuery,
                dst: qid,
            });
        }

        let mut incoming = vec![Vec::new(); n + 1];
        for e in &edges {
            incoming[e.dst.0].push((e.src, e.relation));
        }
        for list in &mut incoming {
            list.sort_by_key(|&(src, rel)| (rel, src));
        }

        Ok(Self {
            candidates: pool.to_vec(),
            query: query.to_owned(),
            edges,
            incoming,
            x,
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.candidates.len() + 1
    }

    pub fn query_node(&self) -> NodeId {
        NodeId(self.candidates.len())
    }

    pub fn candidates(&self) -> &[CandidateExample] {
        &self.candidates
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Initial node embeddings, candidates first, query last.
    pub fn features(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn node_type(&self, id: NodeId) -> NodeType {
        if id.0 == self.candidates.len() {
            NodeType::Query
        } else {
            NodeType::Candidate
        }
    }

    /// Sources of in-edges into `id` with their relation, ordered by
    /// (relation, source id).
    pub fn neighbors(&self, id: NodeId) -> Result<&[(NodeId, Relation)], GraphError> {
        self.incoming
            .get(id.0)
            .map(Vec::as_slice)
            .ok_or_else(|| GraphError::Argument(format!("unknown node id {}", id.0)))
    }

    /// JSON summary for inspection; node texts are truncated to `max_chars`.
    pub fn to_json(&self, full: bool, max_chars: usize) -> serde_json::Value {
        let trunc = |s: &str| -> String {
            if s.chars().count() > max_chars {
                format!("{}...", s.chars().take(max_chars).collect::<String>())
            } else {
                s.to_owned()
            }
        };
        let mut nodes: Vec<serde_json::Value> = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                serde_json::json!({
                    "id": i,
                    "type": "candidate",
                    "query": trunc(&c.query),
                    "response": trunc(&c.response),
                })
            })
            .collect();
        nodes.push(serde_json::json!({
            "id": self.candidates.len(),
            "type": "query",
            "query": trunc(&self.query),
        }));
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|e| serde_json::json!([e.src.0, e.relation.name(), e.dst.0]))
            .collect();
        let mut out = serde_json::json!({
            "nodes": nodes,
            "edges": edges,
            "num_edges": self.edges.len(),
            "features": { "rows": self.x.nrows(), "cols": self.x.ncols() },
        });
        if full {
            out["features"]["values"] = serde_json::json!(self
                .x
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect::<Vec<_>>());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::HashEmbedder;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn pool(n: usize) -> Vec<CandidateExample> {
        (0..n)
            .map(|i| CandidateExample::new(format!("question {i}"), None, format!("answer {i}")).unwrap())
            .collect()
    }

    fn graph(n: usize) -> PromptGraph {
        PromptGraph::build(&pool(n), "what is it", &HashEmbedder::new(8, 0)).unwrap()
    }

    #[test]
    fn three_candidates_give_twelve_edges() {
        let g = graph(3);
        assert_eq!(g.edges().len(), 12);
        assert_eq!(g.features().dim(), (4, 8));
    }

    #[test]
    fn single_candidate_boundary() {
        let g = graph(1);
        let count = |r| g.edges().iter().filter(|e| e.relation == r).count();
        assert_eq!(count(Relation::CandCand), 0);
        assert_eq!(count(Relation::QueryCand), 1);
        assert_eq!(count(Relation::CandQuery), 1);
        assert_eq!(g.neighbors(NodeId(0)).unwrap(), &[(NodeId(1), Relation::QueryCand)]);
    }

    #[test]
    fn candidate_edges_run_both_ways() {
        let g = graph(2);
        let has = |s, d| {
            g.edges().contains(&Edge {
                src: NodeId(s),
                relation: Relation::CandCand,
                dst: NodeId(d),
            })
        };
        assert!(has(0, 1) && has(1, 0));
    }

    #[test]
    fn neighbor_lists() {
        let g = graph(3);
        let q = g.neighbors(g.query_node()).unwrap();
        assert_eq!(q.len(), 3);
        assert!(q.iter().all(|&(_, r)| r == Relation::CandQuery));
        assert_eq!(
            g.neighbors(NodeId(0)).unwrap(),
            &[
                (NodeId(1), Relation::CandCand),
                (NodeId(2), Relation::CandCand),
                (NodeId(3), Relation::QueryCand)
            ]
        );
        assert!(g.neighbors(NodeId(4)).is_err());
    }

    #[test]
    fn features_come_from_embedder() {
        let e = HashEmbedder::new(8, 0);
        let p = pool(2);
        let g = PromptGraph::build(&p, "what is it", &e).unwrap();
        assert_eq!(g.features().row(1).to_vec(), e.embed_example(&p[1]).unwrap().into_vec());
        assert_eq!(g.features().row(2).to_vec(), e.embed_text("what is it").unwrap().into_vec());
    }

    #[test]
    fn rejects_empty_inputs() {
        let e = HashEmbedder::new(8, 0);
        assert!(PromptGraph::build(&[], "q", &e).is_err());
        assert!(PromptGraph::build(&pool(2), " ", &e).is_err());
    }

    #[test]
    fn json_summary_counts_edges() {
        let v = graph(3).to_json(false, 10);
        assert_eq!(v["num_edges"], 12);
        assert_eq!(v["edges"].as_array().unwrap().len(), 12);
        assert!(v["features"].get("values").is_none());
        assert_eq!(graph(3).to_json(true, 10)["features"]["values"].as_array().unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn degree_and_uniqueness(n in 1usize..12) {
            let g = graph(n);
            prop_assert_eq!(g.edges().len(), n * n + n);
            for i in 0..=n {
                prop_assert_eq!(g.neighbors(NodeId(i)).unwrap().len(), n);
            }
            let unique: HashSet<_> = g.edges().iter().collect();
            prop_assert_eq!(unique.len(), g.edges().len());
            prop_assert!(g.edges().iter().all(|e| e.src != e.dst));
            let typed = g.edges().iter().all(|e| {
                let (s, d) = e.relation.endpoints();
                g.node_type(e.src) == s && g.node_type(e.dst) == d
            });
            prop_assert!(typed);
        }

        #[test]
        fn rebuild_is_identical(n in 1usize..6) {
            let (a, b) = (graph(n), graph(n));
            prop_assert_eq!(a.edges(), b.edges());
            prop_assert_eq!(a.features(), b.features());
        }
    }
}
