use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::ObjectType;

/// Default tie tolerance: half a cell of the 8x8 localizer grid.
pub const DEFAULT_TAU: f64 = 0.0625;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexLabel {
    Center,
    Object(ObjectType),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    LeftOf,
    RightOf,
    Above,
    Below,
}

/// Directed edge `from -> to`: "`from` is <label> `to`".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: VertexLabel,
    pub to: VertexLabel,
    pub label: EdgeLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub vertices: BTreeMap<VertexLabel, (f64, f64)>,
    pub edges: BTreeSet<Edge>,
}

/// Relations of `a` with respect to `b` along each axis (y grows downward).
fn relations(a: (f64, f64), b: (f64, f64), tau: f64) -> impl Iterator<Item = EdgeLabel> {
    let h = if a.0 < b.0 - tau {
        Some(EdgeLabel::LeftOf)
    } else if a.0 > b.0 + tau {
        Some(EdgeLabel::RightOf)
    } else {
        None
    };
    let v = if a.1 < b.1 - tau {
        Some(EdgeLabel::Above)
    } else if a.1 > b.1 + tau {
        Some(EdgeLabel::Below)
    } else {
        None
    };
    h.into_iter().chain(v)
}

/// Objects plus the image center as vertices; every ordered pair of
/// distinct vertices gets one horizontal and one vertical edge unless the
/// coordinates tie within `tau`.
pub fn build_scene_graph(items: &[(ObjectType, (f64, f64))], tau: f64) -> Result<SceneGraph> {
    let mut vertices = BTreeMap::new();
    vertices.insert(VertexLabel::Center, (0.5, 0.5));
    for &(otype, pos) in items {
        if vertices.insert(VertexLabel::Object(otype), pos).is_some() {
            return Err(Error::Contract(format!("duplicate scene-graph label {otype}")));
        }
    }
    let mut edges = BTreeSet::new();
    for (&from, &a) in &vertices {
        for (&to, &b) in &vertices {
            if from != to {
                edges.extend(relations(a, b, tau).map(|label| Edge { from, to, label }));
            }
        }
    }
    Ok(SceneGraph { vertices, edges })
}

/// Relational similarity: the share of ground-truth relations among common
/// vertices that the generated graph reproduces, scaled by recall.
pub fn rsim(gt: &SceneGraph, gen: &SceneGraph, recall: f64) -> f64 {
    let common: BTreeSet<VertexLabel> = gt
        .vertices
        .keys()
        .filter(|k| gen.vertices.contains_key(*k))
        .copied()
        .collect();
    if common.len() <= 1 {
        return recall;
    }
    let keep = |e: &&Edge| common.contains(&e.from) && common.contains(&e.to);
    let gt_edges: BTreeSet<&Edge> = gt.edges.iter().filter(keep).collect();
    if gt_edges.is_empty() {
        return 0.0;
    }
    let shared = gen.edges.iter().filter(keep).filter(|e| gt_edges.contains(e)).count();
    recall * shared as f64 / gt_edges.len() as f64
}
