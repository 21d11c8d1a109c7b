use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Instance,
    Category,
}

/// Undirected edge between two vertex slots of an [`IRGraph`], stored once
/// with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(a: usize, b: usize, weight: f64) -> Self {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        Self { a, b, weight }
    }

    pub fn other(&self, slot: usize) -> usize {
        if slot == self.a {
            self.b
        } else {
            self.a
        }
    }
}

/// Ingredient-relation graph: weighted ingredient vertices plus weighted
/// undirected edges between them. Edge endpoints are slot indices into
/// `vertices`; no token embeddings are carried.
#[derive(Clone, Debug, PartialEq)]
pub struct IRGraph {
    pub kind: GraphKind,
    /// Ingredient id per vertex slot; distinct, ascending by convention.
    pub vertices: Vec<usize>,
    /// Nonnegative vertex weights aligned with `vertices`.
    pub weights: Vec<f64>,
    pub edges: Vec<Edge>,
}

impl IRGraph {
    pub fn new(kind: GraphKind, vertices: Vec<usize>, weights: Vec<f64>, edges: Vec<Edge>) -> Result<Self> {
        let g = Self {
            kind,
            vertices,
            weights,
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "{} vertices but {} weights",
                self.vertices.len(),
                self.weights.len()
            )));
        }
        let mut seen = HashMap::with_capacity(self.vertices.len());
        for (slot, &v) in self.vertices.iter().enumerate() {
            if seen.insert(v, slot).is_some() {
                return Err(Error::invalid(format!("duplicate vertex {v}")));
            }
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("vertex weight {w} is not a finite nonnegative value")));
        }
        let mut pairs = std::collections::HashSet::with_capacity(self.edges.len());
        for e in &self.edges {
            if e.a >= e.b || e.b >= self.vertices.len() {
                return Err(Error::invalid(format!("bad edge endpoints ({}, {})", e.a, e.b)));
            }
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(Error::invalid(format!("edge weight {} is not a finite nonnegative value", e.weight)));
            }
            if !pairs.insert((e.a, e.b)) {
                return Err(Error::invalid(format!("duplicate edge ({}, {})", e.a, e.b)));
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn slot_of(&self, ingredient: usize) -> Option<usize> {
        self.vertices.iter().position(|&v| v == ingredient)
    }

    pub fn weight_of(&self, ingredient: usize) -> f64 {
        self.slot_of(ingredient).map_or(0.0, |s| self.weights[s])
    }

    /// Weight of the edge between two ingredients, 0 when absent.
    pub fn edge_weight(&self, u: usize, v: usize) -> f64 {
        match (self.slot_of(u), self.slot_of(v)) {
            (Some(a), Some(b)) if a != b => {
                let (a, b) = (a.min(b), a.max(b));
                self.edges
                    .iter()
                    .find(|e| e.a == a && e.b == b)
                    .map_or(0.0, |e| e.weight)
            }
            _ => 0.0,
        }
    }

    /// Symmetric dense adjacency over vertex slots.
    pub fn dense_adjacency(&self) -> Matrix {
        let k = self.vertex_count();
        let mut m = Matrix::zeros(k, k);
        for e in &self.edges {
            m.set(e.a, e.b, e.weight);
            m.set(e.b, e.a, e.weight);
        }
        m
    }

    /// Edge indices incident to each slot.
    pub fn incidence(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.vertex_count()];
        for (i, e) in self.edges.iter().enumerate() {
            inc[e.a].push(i);
            inc[e.b].push(i);
        }
        inc
    }

    /// Ingredient ids of the closed neighborhood of `slot` (itself plus
    /// every vertex joined by an edge of positive weight).
    pub fn closed_neighborhood(&self, slot: usize) -> Vec<usize> {
        let mut out = vec![self.vertices[slot]];
        for e in &self.edges {
            if e.weight > 0.0 && (e.a == slot || e.b == slot) {
                out.push(self.vertices[e.other(slot)]);
            }
        }
        out.sort_unstable();
        out
    }

    /// Copy with vertex slots sorted by ingredient id.
    pub fn sorted(&self) -> IRGraph {
        let mut order: Vec<usize> = (0..self.vertex_count()).collect();
        order.sort_by_key(|&s| self.vertices[s]);
        let mut new_slot = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_slot[old] = new;
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge::new(new_slot[e.a], new_slot[e.b], e.weight))
            .collect();
        edges.sort_by_key(|e| (e.a, e.b));
        IRGraph {
            kind: self.kind,
            vertices: order.iter().map(|&s| self.vertices[s]).collect(),
            weights: order.iter().map(|&s| self.weights[s]).collect(),
            edges,
        }
    }
}

/// Quantities kept from [`normalize_with_cache`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormalizeCache {
    pub weight_sum: f64,
    pub row_sums: Vec<f64>,
}

/// Normalizes vertex weights to sum to one and edge weights by row sums
/// followed by symmetrization: `s_uv = (w_uv / r_u + w_uv / r_v) / 2`.
/// Rows summing to zero contribute zero.
pub fn normalize_graph(raw: &IRGraph) -> Result<IRGraph> {
    normalize_with_cache(raw).map(|(g, _)| g)
}

pub fn normalize_with_cache(raw: &IRGraph) -> Result<(IRGraph, NormalizeCache)> {
    let weight_sum: f64 = raw.weights.iter().sum();
    if raw.vertices.is_empty() || weight_sum <= 0.0 {
        return Err(Error::DegenerateGraph("vertex weights sum to zero".into()));
    }
    let mut row_sums = vec![0.0; raw.vertex_count()];
    for e in &raw.edges {
        row_sums[e.a] += e.weight;
        row_sums[e.b] += e.weight;
    }
    let edges = raw
        .edges
        .iter()
        .map(|e| Edge {
            weight: 0.5 * (ratio(e.weight, row_sums[e.a]) + ratio(e.weight, row_sums[e.b])),
            ..*e
        })
        .collect();
    let g = IRGraph {
        kind: raw.kind,
        vertices: raw.vertices.clone(),
        weights: raw.weights.iter().map(|w| w / weight_sum).collect(),
        edges,
    };
    Ok((g, NormalizeCache { weight_sum, row_sums }))
}

#[inline]
fn ratio(w: f64, sum: f64) -> f64 {
    if sum > 0.0 {
        w / sum
    } else {
        0.0
    }
}

/// Backward of [`normalize_with_cache`].
///
/// `d_weights` / `d_edges` are loss gradients with respect to the normalized
/// vertex and (symmetric) edge weights. Returns gradients with respect to the
/// raw weights.
pub fn normalize_backward(
    raw: &IRGraph,
    cache: &NormalizeCache,
    d_weights: &[f64],
    d_edges: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let s = cache.weight_sum;
    let dot: f64 = d_weights
        .iter()
        .zip(&raw.weights)
        .map(|(d, w)| d * w / s)
        .sum();
    let d_raw_weights = d_weights.iter().map(|d| (d - dot) / s).collect();

    // Row u contributes t_{e,u} = w_e / r_u with weight ½ to each incident edge.
    let mut q = vec![0.0; raw.vertex_count()];
    for (e, g) in raw.edges.iter().zip(d_edges) {
        q[e.a] += 0.5 * g * ratio(e.weight, cache.row_sums[e.a]);
        q[e.b] += 0.5 * g * ratio(e.weight, cache.row_sums[e.b]);
    }
    let d_raw_edges = raw
        .edges
        .iter()
        .zip(d_edges)
        .map(|(e, g)| {
            let mut d = 0.0;
            for x in [e.a, e.b] {
                let r = cache.row_sums[x];
                if r > 0.0 {
                    d += (0.5 * g - q[x]) / r;
                }
            }
            d
        })
        .collect();
    (d_raw_weights, d_raw_edges)
}
