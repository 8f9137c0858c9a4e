//! Topological map: nodes at fixed arc-length spacing along a reference route.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::Pose;

pub const DEFAULT_SPACING: f64 = 1.5;
const FORMAT: &str = "topodepth-topomap";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoNode {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub arc_length: f64,
}

impl TopoNode {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoMap {
    nodes: Vec<TopoNode>,
    spacing: f64,
    /// Route length the nodes were placed on.
    route_length: f64,
    is_loop: bool,
}

/// Exactly one 1.0 among `len` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHot(Vec<f64>);

impl OneHot {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(node_id: usize, num_nodes: usize) -> Result<OneHot> {
    if node_id >= num_nodes {
        return Err(Error::IndexOutOfRange { index: node_id, len: num_nodes });
    }
    let mut v = vec![0.0; num_nodes];
    v[node_id] = 1.0;
    Ok(OneHot(v))
}

fn planar_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Cumulative planar distance along the poses.
pub fn arc_length(poses: &[Pose]) -> Result<Vec<f64>> {
    if poses.len() < 2 {
        return Err(Error::TooFewPoses(poses.len()));
    }
    let mut out = Vec::with_capacity(poses.len());
    out.push(0.0);
    for w in poses.windows(2) {
        let step = planar_dist(w[0].planar(), w[1].planar());
        out.push(out.last().unwrap() + step);
    }
    Ok(out)
}

/// Places a node every `spacing` meters of arc length along the poses.
///
/// When the path's ends are within `spacing / 2` of each other the path is
/// treated as a loop and a trailing node within `spacing / 2` of the end is
/// merged into node 0.
pub fn build_topomap(poses: &[Pose], spacing: f64) -> Result<TopoMap> {
    if !(spacing > 0.0) {
        return Err(Error::Config(format!("node spacing must be > 0, got {spacing}")));
    }
    let arcs = arc_length(poses)?;
    let total = *arcs.last().unwrap();
    // tolerate accumulated rounding when the length is an exact multiple
    let count = ((total / spacing) * (1.0 + 1e-12)).floor() as usize + 1;
    if count < 2 {
        return Err(Error::PathTooShort { length: total, spacing });
    }
    let mut nodes = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = (k as f64 * spacing).min(total);
        while seg + 2 < arcs.len() && arcs[seg + 1] < s {
            seg += 1;
        }
        let (a, b) = (poses[seg].planar(), poses[seg + 1].planar());
        let len = arcs[seg + 1] - arcs[seg];
        let f = if len > 0.0 { ((s - arcs[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        nodes.push(TopoNode {
            id: k,
            x: a[0] + f * (b[0] - a[0]),
            y: a[1] + f * (b[1] - a[1]),
            arc_length: k as f64 * spacing,
        });
    }

    let ends_meet = planar_dist(poses[0].planar(), poses[poses.len() - 1].planar()) <= spacing / 2.0;
    if ends_meet && nodes.len() > 2 && total - nodes.last().unwrap().arc_length < spacing / 2.0 {
        nodes.pop();
    }
    Ok(TopoMap { nodes, spacing, route_length: total, is_loop: ends_meet })
}

impl TopoMap {
    /// Rebuilds a map from stored parts, checking the node invariants.
    pub fn from_parts(nodes: Vec<TopoNode>, spacing: f64, route_length: f64, is_loop: bool) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config(format!("topological map needs >= 2 nodes, got {}", nodes.len())));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Config(format!("node ids must be consecutive, found {} at {i}", n.id)));
            }
            if i > 0 && (n.arc_length - nodes[i - 1].arc_length - spacing).abs() > 1e-9 {
                return Err(Error::Config(format!("node {i} is not {spacing} m after node {}", i - 1)));
            }
        }
        Ok(TopoMap { nodes, spacing, route_length, is_loop })
    }

    pub fn nodes(&self) -> &[TopoNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn route_length(&self) -> f64 {
        self.route_length
    }

    pub fn is_loop(&self) -> bool {
        self.is_loop
    }

    /// Nearest node by Euclidean distance, ties to the lower id.
    pub fn assign_node(&self, position: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for node in &self.nodes {
            let d = planar_dist(node.position(), position);
            if d < best_d {
                best_d = d;
                best = node.id;
            }
        }
        best
    }

    pub fn one_hot(&self, node_id: usize) -> Result<OneHot> {
        one_hot(node_id, self.len())
    }

    /// Route distance between an arc position and a node, wrapping on loops.
    pub fn arc_distance(&self, arc: f64, node_id: usize) -> f64 {
        let d = (arc - self.nodes[node_id].arc_length).abs();
        if self.is_loop {
            d.min(self.route_length - d)
        } else {
            d
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format": FORMAT,
            "version": VERSION,
            "spacing": self.spacing,
            "route_length": self.route_length,
            "is_loop": self.is_loop,
            "num_nodes": self.nodes.len(),
        });
        let mut text = header.to_string();
        text.push('\n');
        for node in &self.nodes {
            text.push_str(&serde_json::to_string(node).expect("node serializes"));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            spacing: f64,
            route_length: f64,
            is_loop: bool,
            num_nodes: usize,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::format(path, format!("not a topological map ({})", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::VersionMismatch { path: path.into(), found: header.version, expected: VERSION });
        }
        let nodes = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, format!("bad node: {e}"))))
            .collect::<Result<Vec<TopoNode>>>()?;
        if nodes.len() != header.num_nodes {
            return Err(Error::format(path, format!("expected {} nodes, found {}", header.num_nodes, nodes.len())));
        }
        TopoMap::from_parts(nodes, header.spacing, header.route_length, header.is_loop)
    }
}
