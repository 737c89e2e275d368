//! Hierarchical production graph (wells, facilities, fields) and per-node
//! input features for the attention network.
//!
//! Hierarchy edges run both ways by default so attention can pull facility
//! context down into wells; a directed mode keeps only upward edges for
//! ablation. Peer edges connect every ordered pair of wells sharing a
//! facility, and every node carries a self edge so its own state joins the
//! neighborhood aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ingest::{sniff_delimiter, Topology};

/// Node ordering is (kind, id): wells first, then facilities, then fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Well,
    Facility,
    Field,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Well => "well",
            NodeKind::Facility => "facility",
            NodeKind::Field => "field",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Hierarchy,
    Peer,
    SelfLoop,
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Hierarchy => "hierarchy",
            EdgeKind::Peer => "peer",
            EdgeKind::SelfLoop => "self",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// Directed edge between node positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Connect every ordered pair of co-facility wells.
    pub peer_edges: bool,
    /// Keep only upward hierarchy edges (well to facility, facility to
    /// field); wells then receive no facility context.
    pub directed_hierarchy: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { peer_edges: true, directed_hierarchy: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductionGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    node_index: BTreeMap<String, usize>,
}

impl ProductionGraph {
    /// Assemble a graph directly from nodes and edges (testing and custom
    /// topologies). Ids must be unique, edge endpoints in range, and every
    /// node must carry its self edge so attention can normalize.
    pub fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<ProductionGraph> {
        let mut node_index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node_index.insert(node.id.clone(), i).is_some() {
                return Err(Error::Topology(format!("duplicate node id {:?}", node.id)));
            }
        }
        let mut has_self = vec![false; nodes.len()];
        for e in &edges {
            if e.src >= nodes.len() || e.dst >= nodes.len() {
                return Err(Error::Topology(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    e.src,
                    e.dst,
                    nodes.len()
                )));
            }
            if e.kind == EdgeKind::SelfLoop && e.src == e.dst {
                has_self[e.src] = true;
            }
        }
        if let Some(i) = has_self.iter().position(|&ok| !ok) {
            return Err(Error::Topology(format!("node {:?} lacks a self edge", nodes[i].id)));
        }
        Ok(ProductionGraph { nodes, edges, node_index })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn wells(&self) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.kind == NodeKind::Well)
    }

    /// Tab-separated edge list (src_id, dst_id, kind) for external viewers.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::from("src\tdst\tkind\n");
        for edge in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.nodes[edge.src].id,
                self.nodes[edge.dst].id,
                edge.kind.name()
            ));
        }
        out
    }
}

/// Build the graph from a validated topology. Node order is wells,
/// facilities, fields, each sorted by id, so identical topologies produce
/// identical graphs.
pub fn build_graph(topology: &Topology, cfg: &GraphConfig) -> Result<ProductionGraph> {
    topology.validate()?;
    let mut nodes = Vec::new();
    for well in topology.well_facility.keys() {
        nodes.push(Node { id: well.clone(), kind: NodeKind::Well });
    }
    for facility in topology.facility_field.keys() {
        nodes.push(Node { id: facility.clone(), kind: NodeKind::Facility });
    }
    let mut fields: Vec<&String> = topology.facility_field.values().collect();
    fields.sort();
    fields.dedup();
    for field in fields {
        nodes.push(Node { id: field.clone(), kind: NodeKind::Field });
    }

    let mut node_index = BTreeMap::new();
    for (i, node) in nodes.iter().enumerate() {
        if let Some(prev) = node_index.insert(node.id.clone(), i) {
            return Err(Error::Topology(format!(
                "id {:?} used for both a {} and a {}",
                node.id,
                nodes[prev].kind.name(),
                node.kind.name()
            )));
        }
    }
    let index = |id: &str| node_index[id];

    let mut edges = Vec::new();
    for (well, facility) in &topology.well_facility {
        edges.push(Edge { src: index(well), dst: index(facility), kind: EdgeKind::Hierarchy });
        if !cfg.directed_hierarchy {
            edges.push(Edge { src: index(facility), dst: index(well), kind: EdgeKind::Hierarchy });
        }
    }
    for (facility, field) in &topology.facility_field {
        edges.push(Edge { src: index(facility), dst: index(field), kind: EdgeKind::Hierarchy });
        if !cfg.directed_hierarchy {
            edges.push(Edge { src: index(field), dst: index(facility), kind: EdgeKind::Hierarchy });
        }
    }
    if cfg.peer_edges {
        // group wells per facility; topology iteration is already sorted
        let mut members: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (well, facility) in &topology.well_facility {
            members.entry(facility).or_default().push(well);
        }
        for wells in members.values() {
            for &a in wells {
                for &b in wells {
                    if a != b {
                        edges.push(Edge { src: index(a), dst: index(b), kind: EdgeKind::Peer });
                    }
                }
            }
        }
    }
    for i in 0..nodes.len() {
        edges.push(Edge { src: i, dst: i, kind: EdgeKind::SelfLoop });
    }

    Ok(ProductionGraph { nodes, edges, node_index })
}

/// Parse the three-column topology table (well_id, facility_id, field_id).
pub fn parse_topology_table(text: &str) -> Result<Topology> {
    let delim = sniff_delimiter(text) as char;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("topology table is empty".into()))?;
    let cols: Vec<&str> = header.split(delim).map(str::trim).collect();
    if cols != ["well_id", "facility_id", "field_id"] {
        return Err(Error::Validation(format!(
            "topology header must be well_id{delim}facility_id{delim}field_id, got {header:?}"
        )));
    }
    let mut well_facility = BTreeMap::new();
    let mut facility_field = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(delim).map(str::trim).collect();
        if cells.len() != 3 || cells.iter().any(|c| c.is_empty()) {
            return Err(Error::Validation(format!(
                "topology row {}: expected 3 non-empty cells, got {line:?}",
                i + 1
            )));
        }
        if let Some(prev) = well_facility.insert(cells[0].to_string(), cells[1].to_string()) {
            if prev != cells[1] {
                return Err(Error::Topology(format!(
                    "well {:?} mapped to both {prev:?} and {:?}",
                    cells[0], cells[1]
                )));
            }
        }
        if let Some(prev) = facility_field.insert(cells[1].to_string(), cells[2].to_string()) {
            if prev != cells[2] {
                return Err(Error::Topology(format!(
                    "facility {:?} mapped to both {prev:?} and {:?}",
                    cells[1], cells[2]
                )));
            }
        }
    }
    let topology = Topology { well_facility, facility_field };
    topology.validate()?;
    Ok(topology)
}

/// How the per-node vectors were constructed; carried through artifacts so
/// runs are self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFeatureMode {
    /// Well vector = column-mean of the sample's own window (recomputed
    /// per window batch).
    WindowMean,
    /// Well vector = column-mean over the whole training period.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    /// n_nodes x F, rows aligned with graph node order.
    pub values: Tensor,
    pub mode: NodeFeatureMode,
}

/// Aggregate per-well matrices into one vector per node: wells take the
/// column-mean of their matrix, facilities the mean over member wells,
/// fields the mean over their facilities. Aggregation follows the topology
/// only, so peer edges never influence the result.
pub fn node_input_features(
    graph: &ProductionGraph,
    topology: &Topology,
    per_well: &BTreeMap<String, Tensor>,
    mode: NodeFeatureMode,
) -> Result<NodeFeatures> {
    let mut dim: Option<usize> = None;
    let mut well_vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (_, node) in graph.wells() {
        let x = per_well.get(&node.id).ok_or_else(|| {
            Error::Validation(format!("no window in scope for well {:?}", node.id))
        })?;
        match dim {
            None => dim = Some(x.cols()),
            Some(d) if d != x.cols() => {
                return Err(Error::Shape {
                    op: "node_input_features".into(),
                    lhs: vec![1, d],
                    rhs: vec![x.rows(), x.cols()],
                })
            }
            Some(_) => {}
        }
        well_vectors.insert(&node.id, column_means(x)?);
    }
    let dim = dim.ok_or_else(|| Error::Validation("graph has no well nodes".into()))?;

    // facility = mean of member-well vectors
    let mut facility_vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut facility_members: BTreeMap<&str, usize> = BTreeMap::new();
    for (well, facility) in &topology.well_facility {
        if let Some(v) = well_vectors.get(well.as_str()) {
            let acc = facility_vectors.entry(facility).or_insert_with(|| vec![0.0; dim]);
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
            *facility_members.entry(facility).or_insert(0) += 1;
        }
    }
    for (facility, acc) in facility_vectors.iter_mut() {
        let n = facility_members[facility] as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
    }

    // field = mean of facility vectors
    let mut field_vectors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut field_members: BTreeMap<&str, usize> = BTreeMap::new();
    for (facility, field) in &topology.facility_field {
        if let Some(v) = facility_vectors.get(facility.as_str()) {
            let acc = field_vectors.entry(field).or_insert_with(|| vec![0.0; dim]);
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
            *field_members.entry(field).or_insert(0) += 1;
        }
    }
    for (field, acc) in field_vectors.iter_mut() {
        let n = field_members[field] as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
    }

    let mut data = Vec::with_capacity(graph.n_nodes() * dim);
    for node in &graph.nodes {
        let vector = match node.kind {
            NodeKind::Well => well_vectors.get(node.id.as_str()),
            NodeKind::Facility => facility_vectors.get(node.id.as_str()),
            NodeKind::Field => field_vectors.get(node.id.as_str()),
        }
        .ok_or_else(|| {
            Error::Validation(format!("no feature source for node {:?}", node.id))
        })?;
        data.extend_from_slice(vector);
    }
    let values = Tensor::from_vec(graph.n_nodes(), dim, data)?;
    Ok(NodeFeatures { values, mode })
}

fn column_means(x: &Tensor) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(Error::Validation("cannot average an empty window".into()));
    }
    let mut means = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in means.iter_mut().zip(x.row_slice(r)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= x.rows() as f64;
    }
    Ok(means)
}
