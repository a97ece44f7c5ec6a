//! The group hierarchy: agent-wise, intra-group and inter-group interaction
//! graphs, plus the pooling/unpooling operators that move features between
//! agent and group granularity.
//!
//! Adjacency follows the spatio-temporal GCN convention: one matrix per
//! timestep with inverse-distance weights, unit self-loops, and symmetric
//! degree normalization. Graph structure is built from raw positions and the
//! hard partition, so it carries no gradient; node features do.

use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::numerics::{Array, Var};

/// An interaction graph at some granularity: per-timestep adjacency plus
/// tape-registered node features (`node_count×T×C`).
pub struct InteractionGraph<'t> {
    pub node_count: usize,
    /// Raw weights, `T×n×n`: inverse distance off-diagonal, 1 on the
    /// diagonal, 0 for coincident positions.
    pub raw: Array,
    /// Symmetric degree normalization of `raw`, applied exactly once.
    pub normalized: Array,
    pub node_features: Var<'t>,
}

fn inverse_distance_adjacency(positions: &Array) -> Array {
    let (n, t) = (positions.shape()[0], positions.shape()[1]);
    let mut raw = Array::zeros(&[t, n, n]);
    for s in 0..t {
        for i in 0..n {
            raw.set3(s, i, i, 1.0);
            for j in (i + 1)..n {
                let dx = positions.at3(i, s, 0) - positions.at3(j, s, 0);
                let dy = positions.at3(i, s, 1) - positions.at3(j, s, 1);
                let dist = (dx * dx + dy * dy).sqrt();
                // coincident positions get weight 0, not infinity
                let w = if dist > 0.0 { 1.0 / dist } else { 0.0 };
                raw.set3(s, i, j, w);
                raw.set3(s, j, i, w);
            }
        }
    }
    raw
}

fn normalize_adjacency(raw: &Array) -> Array {
    let (t, n) = (raw.shape()[0], raw.shape()[1]);
    let mut out = Array::zeros(&[t, n, n]);
    for s in 0..t {
        let mut degree = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                degree[i] += raw.at3(s, i, j);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let d = (degree[i] * degree[j]).sqrt();
                // the unit self-loop keeps every degree >= 1
                out.set3(s, i, j, raw.at3(s, i, j) / d);
            }
        }
    }
    out
}

fn check_features(positions: &Array, features: Var<'_>, op: &'static str) -> Result<()> {
    let fs = features.shape();
    let ps = positions.shape();
    if ps.len() != 3 || ps[2] != 2 || fs.len() != 3 || fs[0] != ps[0] || fs[1] != ps[1] {
        return Err(Error::Dimension {
            op,
            lhs: ps.to_vec(),
            rhs: fs,
        });
    }
    Ok(())
}

/// Complete agent-wise graph over all pedestrians, weighted by inverse
/// distance between absolute positions at each timestep.
pub fn ped_graph<'t>(positions: &Array, features: Var<'t>) -> Result<InteractionGraph<'t>> {
    check_features(positions, features, "ped_graph")?;
    let raw = inverse_distance_adjacency(positions);
    let normalized = normalize_adjacency(&raw);
    Ok(InteractionGraph {
        node_count: positions.shape()[0],
        raw,
        normalized,
        node_features: features,
    })
}

/// Intra-group graph: the agent graph with every edge between pedestrians of
/// different groups masked out. Self-loops are retained and the masked raw
/// weights are renormalized.
pub fn member_graph<'t>(
    g: &InteractionGraph<'t>,
    part: &GroupPartition,
) -> Result<InteractionGraph<'t>> {
    if part.len() != g.node_count {
        return Err(Error::Partition(format!(
            "member_graph: partition covers {} nodes, graph has {}",
            part.len(),
            g.node_count
        )));
    }
    let (t, n) = (g.raw.shape()[0], g.node_count);
    let mut raw = Array::zeros(&[t, n, n]);
    for s in 0..t {
        for i in 0..n {
            for j in 0..n {
                if part.same_group(i, j) {
                    raw.set3(s, i, j, g.raw.at3(s, i, j));
                }
            }
        }
    }
    let normalized = normalize_adjacency(&raw);
    Ok(InteractionGraph {
        node_count: n,
        raw,
        normalized,
        node_features: g.node_features,
    })
}

/// Average member features into one row per group: `N×T×C -> K×T×C`.
/// Differentiable; the adjoint hands `1/|G_k|` back to each member.
pub fn group_pool<'t>(x: Var<'t>, part: &GroupPartition) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "group_pool (3-D required)",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (n, t, c) = (shape[0], shape[1], shape[2]);
    let k = part.group_count();
    x.reshape(&[n, t * c])?
        .segment_mean(part)?
        .reshape(&[k, t, c])
}

/// Duplicate group features back to every member: `K×T×C -> N×T×C`.
pub fn group_unpool<'t>(z: Var<'t>, part: &GroupPartition) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "group_unpool (3-D required)",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (k, t, c) = (shape[0], shape[1], shape[2]);
    if k != part.group_count() {
        return Err(Error::Partition(format!(
            "group_unpool: {} group rows but partition has {} groups",
            k,
            part.group_count()
        )));
    }
    z.reshape(&[k, t * c])?
        .segment_gather(part)?
        .reshape(&[part.len(), t, c])
}

/// Mean member position per group and timestep (plain values, no tape).
pub fn pool_positions(positions: &Array, part: &GroupPartition) -> Array {
    let t = positions.shape()[1];
    let k = part.group_count();
    let mut out = Array::zeros(&[k, t, 2]);
    for (gi, group) in part.groups().iter().enumerate() {
        let scale = 1.0 / group.len() as f64;
        for &i in group {
            for s in 0..t {
                for c in 0..2 {
                    let v = out.at3(gi, s, c) + positions.at3(i, s, c) * scale;
                    out.set3(gi, s, c, v);
                }
            }
        }
    }
    out
}

/// Complete inter-group graph over the K pooled group nodes, weighted by
/// inverse distance between group-mean positions, same normalization as the
/// agent graph.
pub fn group_graph<'t>(
    group_positions: &Array,
    features: Var<'t>,
) -> Result<InteractionGraph<'t>> {
    check_features(group_positions, features, "group_graph")?;
    let raw = inverse_distance_adjacency(group_positions);
    let normalized = normalize_adjacency(&raw);
    Ok(InteractionGraph {
        node_count: group_positions.shape()[0],
        raw,
        normalized,
        node_features: features,
    })
}
