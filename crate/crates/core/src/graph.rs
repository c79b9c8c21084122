//! Heterogeneous graph model, metapath composition and homophily analytics.
//!
//! Relations are stored as sparse integer count matrices. Composing a closed
//! metapath multiplies the chain of relation matrices exactly in integer
//! arithmetic, so entry `(i, j)` of the result is the number of distinct
//! metapath instances joining target nodes `i` and `j` (the connection
//! strength).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Sparse nonnegative integer matrix in CSR layout.
pub type CountMatrix = CsMat<u32>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
}

/// Edges of one relation type between a source and a destination node type.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub name: String,
    pub src_type: String,
    pub dst_type: String,
    entries: CountMatrix,
}

impl RelationMatrix {
    /// Builds a relation from an edge list; repeated edges accumulate as
    /// parallel-edge counts.
    pub fn from_edges(
        name: impl Into<String>,
        src_type: impl Into<String>,
        dst_type: impl Into<String>,
        shape: (usize, usize),
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let name = name.into();
        let mut tri = TriMat::new(shape);
        for &(s, d) in edges {
            if s >= shape.0 || d >= shape.1 {
                return Err(Error::config(format!(
                    "relation {name}: edge ({s}, {d}) outside {}x{}",
                    shape.0, shape.1
                )));
            }
            tri.add_triplet(s, d, 1u32);
        }
        Ok(Self {
            name,
            src_type: src_type.into(),
            dst_type: dst_type.into(),
            entries: tri.to_csr(),
        })
    }

    pub fn from_matrix(
        name: impl Into<String>,
        src_type: impl Into<String>,
        dst_type: impl Into<String>,
        entries: CountMatrix,
    ) -> Result<Self> {
        let name = name.into();
        if entries.data().iter().any(|&v| v == 0) {
            return Err(Error::config(format!("relation {name}: explicit zero stored")));
        }
        Ok(Self {
            name,
            src_type: src_type.into(),
            dst_type: dst_type.into(),
            entries: entries.to_csr(),
        })
    }

    pub fn entries(&self) -> &CountMatrix {
        &self.entries
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    /// Number of stored (distinct) edges.
    pub fn nnz(&self) -> usize {
        self.entries.nnz()
    }

    /// `(src, dst, multiplicity)` for every stored edge, row-major.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.entries
            .outer_iterator()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |(j, &v)| (i, j, v)).collect::<Vec<_>>())
    }

    /// Same relation with a different edge set.
    pub fn with_entries(&self, entries: CountMatrix) -> Result<Self> {
        if entries.shape() != self.shape() {
            return Err(Error::shape(
                "RelationMatrix::with_entries",
                format!("{:?} vs {:?}", entries.shape(), self.shape()),
            ));
        }
        Self::from_matrix(self.name.clone(), self.src_type.clone(), self.dst_type.clone(), entries)
    }
}

#[derive(Clone, Debug)]
pub struct HeteroGraph {
    node_types: Vec<NodeType>,
    relations: Vec<RelationMatrix>,
    target_type: String,
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl HeteroGraph {
    pub fn new(
        node_types: Vec<NodeType>,
        relations: Vec<RelationMatrix>,
        target_type: impl Into<String>,
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let target_type = target_type.into();
        let count_of = |name: &str| node_types.iter().find(|t| t.name == name).map(|t| t.count);

        for (i, t) in node_types.iter().enumerate() {
            if node_types[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::config(format!("duplicate node type {}", t.name)));
            }
        }
        for (i, r) in relations.iter().enumerate() {
            if relations[..i].iter().any(|u| u.name == r.name) {
                return Err(Error::config(format!("duplicate relation {}", r.name)));
            }
            let rows = count_of(&r.src_type)
                .ok_or_else(|| Error::config(format!("relation {}: unknown type {}", r.name, r.src_type)))?;
            let cols = count_of(&r.dst_type)
                .ok_or_else(|| Error::config(format!("relation {}: unknown type {}", r.name, r.dst_type)))?;
            if r.shape() != (rows, cols) {
                return Err(Error::shape(
                    "HeteroGraph::new",
                    format!("relation {} is {:?}, types declare ({rows}, {cols})", r.name, r.shape()),
                ));
            }
        }
        let n = count_of(&target_type)
            .ok_or_else(|| Error::config(format!("unknown target type {target_type}")))?;
        if features.nrows() != n {
            return Err(Error::shape(
                "HeteroGraph::new",
                format!("{} feature rows for {n} target nodes", features.nrows()),
            ));
        }
        if node_types.len() < 2 && relations.len() < 2 {
            return Err(Error::config(
                "a heterogeneous graph needs at least two node types or two relation types",
            ));
        }
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::shape("HeteroGraph::new", format!("{} labels for {n} nodes", y.len())));
            }
        }
        Ok(Self {
            node_types,
            relations,
            target_type,
            features,
            labels,
        })
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn relations(&self) -> &[RelationMatrix] {
        &self.relations
    }

    pub fn relation(&self, name: &str) -> Option<&RelationMatrix> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn type_count(&self, name: &str) -> Option<usize> {
        self.node_types.iter().find(|t| t.name == name).map(|t| t.count)
    }

    pub fn target_type(&self) -> &str {
        &self.target_type
    }

    pub fn num_targets(&self) -> usize {
        self.features.nrows()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|y| y.iter().max().map_or(0, |m| m + 1))
    }

    /// Same graph with every relation replaced; names and shapes must match.
    pub fn with_relations(&self, relations: Vec<RelationMatrix>) -> Result<Self> {
        if relations.len() != self.relations.len()
            || relations
                .iter()
                .zip(&self.relations)
                .any(|(a, b)| a.name != b.name || a.shape() != b.shape())
        {
            return Err(Error::config("replacement relations do not match the graph schema"));
        }
        Ok(Self {
            relations,
            ..self.clone()
        })
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(Error::shape(
                "HeteroGraph::with_features",
                format!("{:?} vs {:?}", features.dim(), self.features.dim()),
            ));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }
}

/// One hop of a metapath: a relation, optionally traversed dst → src.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetapathStep {
    pub relation: String,
    pub reversed: bool,
}

impl fmt::Display for MetapathStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.reversed {
            write!(f, "{}^T", self.relation)
        } else {
            f.write_str(&self.relation)
        }
    }
}

impl FromStr for MetapathStep {
    type Err = Error;

    /// `"rel"` walks the relation forward, `"rel^T"` walks it backward.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (relation, reversed) = match s.strip_suffix("^T") {
            Some(r) => (r, true),
            None => (s, false),
        };
        if relation.is_empty() {
            return Err(Error::config(format!("empty relation in metapath step {s:?}")));
        }
        Ok(Self {
            relation: relation.to_string(),
            reversed,
        })
    }
}

impl Serialize for MetapathStep {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetapathStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A closed metapath over the target type, e.g. `PAP = [PA, PA^T]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetapathSpec {
    pub name: String,
    pub chain: Vec<MetapathStep>,
}

impl MetapathSpec {
    pub fn new(name: impl Into<String>, chain: &[&str]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            chain: chain.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        })
    }

    /// Checks the chain is a closed walk starting and ending at the target type.
    pub fn validate(&self, graph: &HeteroGraph) -> Result<()> {
        if self.chain.len() < 2 {
            return Err(Error::config(format!("metapath {}: length must be at least 2", self.name)));
        }
        let mut at = graph.target_type();
        for step in &self.chain {
            let rel = graph.relation(&step.relation).ok_or_else(|| {
                Error::config(format!("metapath {}: unknown relation {}", self.name, step.relation))
            })?;
            let (from, to) = if step.reversed {
                (&rel.dst_type, &rel.src_type)
            } else {
                (&rel.src_type, &rel.dst_type)
            };
            if from != at {
                return Err(Error::config(format!(
                    "metapath {}: step {step} starts at {from}, chain is at {at}",
                    self.name
                )));
            }
            at = to;
        }
        if at != graph.target_type() {
            return Err(Error::config(format!(
                "metapath {}: ends at {at}, not target type {}",
                self.name,
                graph.target_type()
            )));
        }
        Ok(())
    }
}

/// Homogeneous graph over target nodes induced by a metapath.
///
/// `adjacency[i, j]` is the connection strength between `i != j`; the
/// diagonal is zero. `self_paths[i]` keeps the number of closed instances
/// from `i` back to itself, which PathSim needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetapathSubgraph {
    pub spec: MetapathSpec,
    adjacency: CountMatrix,
    self_paths: Vec<u32>,
}

impl MetapathSubgraph {
    /// Wraps an adjacency matrix, checking symmetry and dropping the diagonal.
    pub fn from_adjacency(spec: MetapathSpec, full: CountMatrix) -> Result<Self> {
        let (r, c) = full.shape();
        if r != c {
            return Err(Error::shape("MetapathSubgraph", format!("{r}x{c} is not square")));
        }
        let full = full.to_csr();
        for (i, row) in full.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                if full.get(j, i).copied().unwrap_or(0) != v {
                    return Err(Error::config(format!(
                        "metapath {}: adjacency not symmetric at ({i}, {j})",
                        spec.name
                    )));
                }
            }
        }
        let self_paths = (0..r).map(|i| full.get(i, i).copied().unwrap_or(0)).collect();
        let adjacency = filter(&full, |i, j, v| i != j && v > 0);
        Ok(Self {
            spec,
            adjacency,
            self_paths,
        })
    }

    pub fn adjacency(&self) -> &CountMatrix {
        &self.adjacency
    }

    pub fn self_paths(&self) -> &[u32] {
        &self.self_paths
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn strength(&self, i: usize, j: usize) -> u32 {
        self.adjacency.get(i, j).copied().unwrap_or(0)
    }

    /// Undirected edges `(i, j, strength)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::with_capacity(self.adjacency.nnz() / 2);
        for (i, row) in self.adjacency.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                if j > i {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.outer_view(i).map_or(0, |r| r.nnz())
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.adjacency
            .outer_view(i)
            .map(|r| r.indices().to_vec())
            .unwrap_or_default()
    }

    /// Same metapath restricted to the given undirected edges (`i < j`).
    pub fn with_edges(&self, edges: &[(usize, usize, u32)]) -> Self {
        let n = self.num_nodes();
        let mut tri = TriMat::new((n, n));
        for &(i, j, v) in edges {
            tri.add_triplet(i, j, v);
            tri.add_triplet(j, i, v);
        }
        Self {
            spec: self.spec.clone(),
            adjacency: tri.to_csr(),
            self_paths: self.self_paths.clone(),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut out = Array2::zeros((n, n));
        for (i, row) in self.adjacency.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                out[[i, j]] = v as f64;
            }
        }
        out
    }
}

fn filter(m: &CountMatrix, keep: impl Fn(usize, usize, u32) -> bool) -> CountMatrix {
    let mut indptr = Vec::with_capacity(m.rows() + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0);
    for (i, row) in m.outer_iterator().enumerate() {
        let mut entries: Vec<(usize, u32)> =
            row.iter().filter(|&(j, &v)| keep(i, j, v)).map(|(j, &v)| (j, v)).collect();
        entries.sort_unstable_by_key(|e| e.0);
        for (j, v) in entries {
            indices.push(j);
            data.push(v);
        }
        indptr.push(indices.len());
    }
    CsMat::new(m.shape(), indptr, indices, data)
}

fn oriented(rel: &RelationMatrix, reversed: bool) -> CountMatrix {
    if reversed {
        rel.entries.transpose_view().to_csr()
    } else {
        rel.entries.clone()
    }
}

/// Chained sparse product along the metapath, diagonal split off.
pub fn compose_metapath(graph: &HeteroGraph, spec: &MetapathSpec) -> Result<MetapathSubgraph> {
    spec.validate(graph)?;
    let mut steps = spec.chain.iter();
    let first = steps.next().expect("validated length");
    let mut acc = oriented(graph.relation(&first.relation).expect("validated"), first.reversed);
    for step in steps {
        let next = oriented(graph.relation(&step.relation).expect("validated"), step.reversed);
        acc = &acc * &next;
    }
    MetapathSubgraph::from_adjacency(spec.clone(), acc)
}

pub fn compose_all(graph: &HeteroGraph, specs: &[MetapathSpec]) -> Result<Vec<MetapathSubgraph>> {
    specs.iter().map(|s| compose_metapath(graph, s)).collect()
}

fn check_labels(sub: &MetapathSubgraph, labels: &[usize]) -> Result<()> {
    if labels.len() != sub.num_nodes() {
        return Err(Error::shape(
            "mhr",
            format!("{} labels for {} nodes", labels.len(), sub.num_nodes()),
        ));
    }
    Ok(())
}

/// Metapath-based homophily ratio: share of undirected edges joining nodes
/// of the same class. Each node pair counts once regardless of strength.
pub fn mhr(sub: &MetapathSubgraph, labels: &[usize]) -> Result<f64> {
    check_labels(sub, labels)?;
    let edges = sub.edges();
    if edges.is_empty() {
        return Err(Error::Undefined(format!("metapath {} has no edges", sub.spec.name)));
    }
    let same = edges.iter().filter(|&&(i, j, _)| labels[i] == labels[j]).count();
    Ok(same as f64 / edges.len() as f64)
}

/// One row of an MCS/MHR profile: edges with strength in `[lower, upper)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrengthBucket {
    pub lower: u32,
    /// Exclusive; `None` for the open last bucket.
    pub upper: Option<u32>,
    pub edges: usize,
    pub mhr: Option<f64>,
}

/// MHR per connection-strength bucket. `thresholds` must start at 1 and be
/// strictly increasing; bucket `k` covers `[t_k, t_{k+1})` and the last one
/// is open-ended, so the buckets partition every observed strength.
pub fn mcs_homophily_profile(
    sub: &MetapathSubgraph,
    labels: &[usize],
    thresholds: &[u32],
) -> Result<Vec<StrengthBucket>> {
    check_labels(sub, labels)?;
    if thresholds.first() != Some(&1) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "strength thresholds must start at 1 and increase strictly, got {thresholds:?}"
        )));
    }
    let mut counts = vec![(0usize, 0usize); thresholds.len()];
    for (i, j, n) in sub.edges() {
        let b = thresholds.partition_point(|&t| t <= n) - 1;
        counts[b].0 += 1;
        if labels[i] == labels[j] {
            counts[b].1 += 1;
        }
    }
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(k, &lower)| {
            let (edges, same) = counts[k];
            StrengthBucket {
                lower,
                upper: thresholds.get(k + 1).copied(),
                edges,
                mhr: (edges > 0).then(|| same as f64 / edges as f64),
            }
        })
        .collect())
}

/// Sum of connection strengths over all metapaths.
pub fn total_strength(subgraphs: &[MetapathSubgraph]) -> Result<CountMatrix> {
    let n = subgraphs
        .first()
        .map(|s| s.num_nodes())
        .ok_or_else(|| Error::config("no metapath subgraphs"))?;
    let mut tri = TriMat::new((n, n));
    for sub in subgraphs {
        if sub.num_nodes() != n {
            return Err(Error::shape("total_strength", "subgraphs over different node sets"));
        }
        for (i, row) in sub.adjacency.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                tri.add_triplet(i, j, v);
            }
        }
    }
    Ok(tri.to_csr())
}

/// Dense 0/1 matrix marking pairs whose total strength strictly exceeds `delta`.
pub fn strength_indicator(subgraphs: &[MetapathSubgraph], delta: u32) -> Result<Array2<f64>> {
    if delta < 1 {
        return Err(Error::config("strength threshold must be at least 1"));
    }
    let total = total_strength(subgraphs)?;
    let n = total.rows();
    let mut p = Array2::zeros((n, n));
    for (i, row) in total.outer_iterator().enumerate() {
        for (j, &v) in row.iter() {
            if v > delta && i != j {
                p[[i, j]] = 1.0;
            }
        }
    }
    Ok(p)
}

pub fn build_strength_indicator(
    graph: &HeteroGraph,
    specs: &[MetapathSpec],
    delta: u32,
) -> Result<Array2<f64>> {
    strength_indicator(&compose_all(graph, specs)?, delta)
}

/// Cosine similarity with zero-norm rows mapped to similarity 0.
pub fn cosine_similarities(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut sim = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let s = x.row(i).dot(&x.row(j)) / (norms[i] * norms[j]);
                sim[[i, j]] = s;
                sim[[j, i]] = s;
            }
        }
    }
    sim
}

/// Symmetric 0/1 top-K cosine-similarity graph; ties go to the lower index.
pub fn build_topk_similarity(x: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let n = x.nrows();
    if k < 1 || n <= k {
        return Err(Error::config(format!("top-K needs 1 <= K < N, got K={k}, N={n}")));
    }
    let sim = cosine_similarities(x);
    let mut out = Array2::zeros((n, n));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]).then(a.cmp(&b)));
        for &j in &order[..k] {
            out[[i, j]] = 1.0;
            out[[j, i]] = 1.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pa_graph(papers: usize, authors: usize, edges: &[(usize, usize)]) -> HeteroGraph {
        let rel = RelationMatrix::from_edges("PA", "P", "A", (papers, authors), edges).unwrap();
        HeteroGraph::new(
            vec![
                NodeType { name: "P".into(), count: papers },
                NodeType { name: "A".into(), count: authors },
            ],
            vec![rel],
            "P",
            Array2::zeros((papers, 2)),
            None,
        )
        .unwrap()
    }

    fn pap() -> MetapathSpec {
        MetapathSpec::new("PAP", &["PA", "PA^T"]).unwrap()
    }

    #[test]
    fn one_shared_author() {
        let g = pa_graph(2, 1, &[(0, 0), (1, 0)]);
        let s = compose_metapath(&g, &pap()).unwrap();
        assert_eq!(s.strength(0, 1), 1);
        assert_eq!(s.strength(1, 0), 1);
        assert_eq!(s.strength(0, 0), 0);
        assert_eq!(s.self_paths(), &[1, 1]);
    }

    #[test]
    fn two_shared_authors_two_paths() {
        let g = pa_graph(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let s = compose_metapath(&g, &pap()).unwrap();
        assert_eq!(s.strength(0, 1), 2);
        assert_eq!(s.num_edges(), 1);
    }

    #[test]
    fn empty_relation_gives_empty_subgraph() {
        let g = pa_graph(3, 2, &[]);
        let s = compose_metapath(&g, &pap()).unwrap();
        assert_eq!(s.num_edges(), 0);
        assert!(matches!(mhr(&s, &[0, 0, 0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn bad_metapaths_rejected() {
        let g = pa_graph(2, 1, &[(0, 0)]);
        assert!(compose_metapath(&g, &MetapathSpec::new("X", &["PX", "PA^T"]).unwrap()).is_err());
        assert!(compose_metapath(&g, &MetapathSpec::new("X", &["PA", "PA"]).unwrap()).is_err());
        assert!(compose_metapath(&g, &MetapathSpec::new("X", &["PA"]).unwrap()).is_err());
    }

    #[test]
    fn graph_invariants_enforced() {
        let rel = RelationMatrix::from_edges("PA", "P", "A", (2, 1), &[(0, 0)]).unwrap();
        let types = vec![
            NodeType { name: "P".into(), count: 2 },
            NodeType { name: "A".into(), count: 1 },
        ];
        assert!(HeteroGraph::new(types.clone(), vec![rel.clone()], "P", Array2::zeros((3, 1)), None).is_err());
        assert!(HeteroGraph::new(types.clone(), vec![rel.clone()], "Q", Array2::zeros((2, 1)), None).is_err());
        assert!(HeteroGraph::new(types[..1].to_vec(), vec![rel], "P", Array2::zeros((2, 1)), None).is_err());
        assert!(RelationMatrix::from_edges("PA", "P", "A", (2, 1), &[(2, 0)]).is_err());
    }

    fn triangle() -> MetapathSubgraph {
        let mut tri = TriMat::new((3, 3));
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            tri.add_triplet(i, j, 1u32);
            tri.add_triplet(j, i, 1u32);
        }
        MetapathSubgraph::from_adjacency(pap(), tri.to_csr()).unwrap()
    }

    #[test]
    fn mhr_examples() {
        assert_eq!(mhr(&triangle(), &[4, 4, 4]).unwrap(), 1.0);
        let star = triangle().with_edges(&[(0, 1, 1), (0, 2, 1)]);
        assert_eq!(mhr(&star, &[0, 0, 1]).unwrap(), 0.5);
        assert!(mhr(&star, &[0, 0]).is_err());
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let mut tri = TriMat::new((2, 2));
        tri.add_triplet(0, 1, 1u32);
        assert!(MetapathSubgraph::from_adjacency(pap(), tri.to_csr()).is_err());
    }

    #[test]
    fn profile_separates_strengths() {
        // strength-2 edges intra-class, strength-1 edges inter-class
        let sub = triangle().with_edges(&[(0, 1, 2), (0, 2, 1), (1, 2, 1)]);
        let labels = [0, 0, 1];
        let prof = mcs_homophily_profile(&sub, &labels, &[1, 2]).unwrap();
        assert_eq!(prof[0].edges, 2);
        assert_eq!(prof[0].mhr, Some(0.0));
        assert_eq!(prof[1].edges, 1);
        assert_eq!(prof[1].mhr, Some(1.0));

        let one = mcs_homophily_profile(&sub, &labels, &[1]).unwrap();
        assert_eq!(one[0].mhr, Some(mhr(&sub, &labels).unwrap()));

        let empty = mcs_homophily_profile(&sub, &labels, &[1, 5]).unwrap();
        assert_eq!(empty[1].edges, 0);
        assert_eq!(empty[1].mhr, None);

        assert!(mcs_homophily_profile(&sub, &labels, &[2, 3]).is_err());
        assert!(mcs_homophily_profile(&sub, &labels, &[1, 1]).is_err());
    }

    #[test]
    fn indicator_is_strict() {
        let sub = triangle().with_edges(&[(0, 1, 3), (1, 2, 2)]);
        let p = strength_indicator(&[sub.clone()], 2).unwrap();
        assert_eq!(p[[0, 1]], 1.0);
        assert_eq!(p[[1, 0]], 1.0);
        assert_eq!(p[[1, 2]], 0.0);
        let none = strength_indicator(&[sub.clone()], 10).unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
        // strengths add across metapaths
        let both = strength_indicator(&[sub.clone(), sub], 4).unwrap();
        assert_eq!(both[[0, 1]], 1.0);
        assert_eq!(both[[1, 2]], 0.0);
    }

    #[test]
    fn topk_tie_break_on_identical_rows() {
        let x = Array2::from_elem((4, 3), 1.0);
        let k = build_topk_similarity(&x, 1).unwrap();
        // 0 -> 1, 1 -> 0, 2 -> 0, 3 -> 0, then OR-symmetrized
        let expected = array![
            [0., 1., 1., 1.],
            [1., 0., 0., 0.],
            [1., 0., 0., 0.],
            [1., 0., 0., 0.]
        ];
        assert_eq!(k, expected);
    }

    #[test]
    fn topk_orthogonal_and_zero_rows() {
        let x = array![[1., 0., 0.], [0., 1., 0.], [0., 0., 1.], [0., 0., 0.]];
        let k = build_topk_similarity(&x, 1).unwrap();
        assert_eq!(k[[0, 1]], 1.0);
        assert_eq!(k[[2, 0]], 1.0);
        assert_eq!(k[[3, 0]], 1.0);
        for i in 0..4 {
            assert_eq!(k[[i, i]], 0.0);
        }
        assert!(build_topk_similarity(&x, 4).is_err());
        assert!(build_topk_similarity(&x, 0).is_err());
    }

    #[test]
    fn step_roundtrip() {
        let s: MetapathStep = "PA^T".parse().unwrap();
        assert!(s.reversed);
        assert_eq!(s.to_string(), "PA^T");
        let json = serde_json::to_string(&pap()).unwrap();
        assert_eq!(json, r#"{"name":"PAP","chain":["PA","PA^T"]}"#);
        assert_eq!(serde_json::from_str::<MetapathSpec>(&json).unwrap(), pap());
    }
}
