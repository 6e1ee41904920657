//! Directed road networks: topology, arc-length geometry, directed path
//! distance and the downstream visual field of a driver.
//!
//! Edges are addressed by their position in [`Network::edges`]; the numeric
//! `id` carried by each [`Edge`] is the label used in scenario files.

use std::collections::{BTreeMap, HashSet};

use petgraph::algo::dijkstra;
use petgraph::graph::{DiGraph, NodeIndex};

use crate::error::{Error, Result};

/// One directed road, parametrized by arc length on `[0, length]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: u32,
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    /// Truncated stand-in for an arc of infinite length; mass leaving it is lost
    /// through a free-outflow boundary.
    pub terminal: bool,
}

/// Input row for [`build_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub id: u32,
    pub tail: String,
    pub head: String,
    pub length: f64,
    pub terminal: bool,
}

impl EdgeSpec {
    pub fn new(id: u32, tail: &str, head: &str, length: f64) -> Self {
        EdgeSpec {
            id,
            tail: tail.to_string(),
            head: head.to_string(),
            length,
            terminal: false,
        }
    }

    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexKind {
    Source,
    Junction,
    Sink,
}

/// A point on the network: an edge index and an arc-length offset along it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePoint {
    pub edge: usize,
    pub offset: f64,
}

impl EdgePoint {
    pub fn new(edge: usize, offset: f64) -> Self {
        EdgePoint { edge, offset }
    }
}

/// A piece `[start, end]` of an edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub edge: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    edges: Vec<Edge>,
    vertex_names: Vec<String>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    kinds: Vec<VertexKind>,
    min_edge_length: f64,
    /// Shortest directed vertex-to-vertex distances; `None` when unreachable.
    vertex_distance: Vec<Vec<Option<f64>>>,
}

/// Builds a network from an edge list, classifying vertices into sources,
/// junctions and sinks.
pub fn build_network(edge_list: &[EdgeSpec]) -> Result<Network> {
    if edge_list.is_empty() {
        return Err(Error::validation("network.edges", "edge list is empty"));
    }
    let mut names: Vec<String> = Vec::new();
    let mut index_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut vertex = |name: &str, names: &mut Vec<String>| -> usize {
        *index_of.entry(name.to_string()).or_insert_with(|| {
            names.push(name.to_string());
            names.len() - 1
        })
    };

    let mut seen_ids = HashSet::new();
    let mut edges = Vec::with_capacity(edge_list.len());
    for (k, spec) in edge_list.iter().enumerate() {
        let path = format!("network.edges[{k}] (id {})", spec.id);
        if !seen_ids.insert(spec.id) {
            return Err(Error::validation(path, "duplicate edge id"));
        }
        if spec.tail == spec.head {
            return Err(Error::validation(path, format!("self-loop at vertex {}", spec.tail)));
        }
        if !(spec.length.is_finite() && spec.length > 0.0) {
            return Err(Error::validation(
                path,
                format!("length must be positive, got {}", spec.length),
            ));
        }
        let tail = vertex(&spec.tail, &mut names);
        let head = vertex(&spec.head, &mut names);
        edges.push(Edge {
            id: spec.id,
            tail,
            head,
            length: spec.length,
            terminal: spec.terminal,
        });
    }

    let nv = names.len();
    let mut incoming = vec![Vec::new(); nv];
    let mut outgoing = vec![Vec::new(); nv];
    for (e, edge) in edges.iter().enumerate() {
        outgoing[edge.tail].push(e);
        incoming[edge.head].push(e);
    }
    let kinds = (0..nv)
        .map(|v| match (incoming[v].is_empty(), outgoing[v].is_empty()) {
            (true, _) => VertexKind::Source,
            (false, true) => VertexKind::Sink,
            (false, false) => VertexKind::Junction,
        })
        .collect();
    let min_edge_length = edges.iter().map(|e| e.length).fold(f64::INFINITY, f64::min);

    let mut graph: DiGraph<(), f64> = DiGraph::with_capacity(nv, edges.len());
    let nodes: Vec<NodeIndex> = (0..nv).map(|_| graph.add_node(())).collect();
    for edge in &edges {
        graph.add_edge(nodes[edge.tail], nodes[edge.head], edge.length);
    }
    let vertex_distance = nodes
        .iter()
        .map(|&from| {
            let reached = dijkstra(&graph, from, None, |e| *e.weight());
            nodes.iter().map(|n| reached.get(n).copied()).collect()
        })
        .collect();

    Ok(Network {
        edges,
        vertex_names: names,
        incoming,
        outgoing,
        kinds,
        min_edge_length,
        vertex_distance,
    })
}

impl Network {
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_names.len()
    }

    pub fn vertex_name(&self, v: usize) -> &str {
        &self.vertex_names[v]
    }

    pub fn vertex_index(&self, name: &str) -> Option<usize> {
        self.vertex_names.iter().position(|n| n == name)
    }

    pub fn edge_index(&self, id: u32) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }

    /// Edges ending at `v`.
    pub fn incoming(&self, v: usize) -> &[usize] {
        &self.incoming[v]
    }

    /// Edges starting at `v`.
    pub fn outgoing(&self, v: usize) -> &[usize] {
        &self.outgoing[v]
    }

    pub fn kind(&self, v: usize) -> VertexKind {
        self.kinds[v]
    }

    fn vertices_of(&self, kind: VertexKind) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&v| self.kinds[v] == kind).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.vertices_of(VertexKind::Source)
    }

    pub fn junctions(&self) -> Vec<usize> {
        self.vertices_of(VertexKind::Junction)
    }

    pub fn sinks(&self) -> Vec<usize> {
        self.vertices_of(VertexKind::Sink)
    }

    /// Shortest edge length `L_0`; interaction and light radii must stay below it.
    pub fn min_edge_length(&self) -> f64 {
        self.min_edge_length
    }

    /// Directed vertex-to-vertex distance.
    pub fn vertex_distance(&self, from: usize, to: usize) -> Option<f64> {
        self.vertex_distance[from][to]
    }

    pub fn check_point(&self, p: EdgePoint) -> Result<()> {
        let edge = self.edges.get(p.edge).ok_or_else(|| {
            Error::validation("point.edge", format!("no edge with index {}", p.edge))
        })?;
        if !(0.0..=edge.length).contains(&p.offset) {
            return Err(Error::validation(
                "point.offset",
                format!("offset {} outside [0, {}] on edge {}", p.offset, edge.length, edge.id),
            ));
        }
        Ok(())
    }

    /// Length of the shortest orientation-respecting path from `x` to `y`, or
    /// `None` when `y` is not downstream of `x`.
    pub fn path_distance(&self, x: EdgePoint, y: EdgePoint) -> Result<Option<f64>> {
        self.check_point(x)?;
        self.check_point(y)?;
        if x.edge == y.edge && y.offset >= x.offset {
            return Ok(Some(y.offset - x.offset));
        }
        let ex = &self.edges[x.edge];
        let ey = &self.edges[y.edge];
        Ok(self
            .vertex_distance(ex.head, ey.tail)
            .map(|d| (ex.length - x.offset) + d + y.offset))
    }

    /// Downstream segments within `radius` of `x`. With `radius < L_0` the
    /// field spills over at most one vertex, into every outgoing edge.
    pub fn visual_field(&self, x: EdgePoint, radius: f64) -> Result<Vec<Segment>> {
        self.check_point(x)?;
        if radius >= self.min_edge_length {
            return Err(Error::Constraint(format!(
                "visual radius {radius} must be below the minimal edge length {}",
                self.min_edge_length
            )));
        }
        let edge = &self.edges[x.edge];
        let remaining = edge.length - x.offset;
        let mut segments = Vec::new();
        if remaining > 0.0 {
            segments.push(Segment {
                edge: x.edge,
                start: x.offset,
                end: (x.offset + radius).min(edge.length),
            });
        }
        let spill = radius - remaining;
        if spill > 0.0 {
            for &next in &self.outgoing[edge.head] {
                segments.push(Segment {
                    edge: next,
                    start: 0.0,
                    end: spill,
                });
            }
        }
        Ok(segments)
    }
}
