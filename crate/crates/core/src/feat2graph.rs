//! Conversion of one record's tokens and attention into an instance graph.
//!
//! The attention matrix is symmetrized and split into auxiliary and visual
//! blocks; tokens are discretized into ingredients; every distinct ingredient
//! becomes a vertex weighted by CLS attention mass and occurrence count, and
//! every pair of distinct ingredients is joined by an edge mixing mean
//! attention and mean inverse spatial distance over all position pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{normalize_graph, Edge, GraphKind, IRGraph};
use crate::error::{Error, Result};
use crate::feature_io::FeatureRecord;
use crate::numerics::Matrix;
use crate::vocabulary::{discretize_record, VisualVocabulary};

/// Symmetrized attention and its blocks.
#[derive(Clone, Debug)]
pub struct AttentionViews {
    zeta: usize,
    /// `(Ψ̄ + Ψ̄ᵀ) / 2` over all `n + zeta` tokens.
    pub psi: Matrix,
    /// Visual-visual block, `n x n`.
    pub psi_v: Matrix,
    /// CLS row of the auxiliary block restricted to visual tokens.
    pub psi_cls: Vec<f64>,
}

impl AttentionViews {
    pub fn zeta(&self) -> usize {
        self.zeta
    }

    pub fn n_visual(&self) -> usize {
        self.psi_v.rows()
    }

    /// Auxiliary-to-visual block, `zeta x n`. Row 0 is CLS, row 1 (if any) DIST.
    pub fn psi_a(&self) -> Matrix {
        let n = self.n_visual();
        let mut m = Matrix::zeros(self.zeta, n);
        for a in 0..self.zeta {
            m.row_mut(a).copy_from_slice(&self.psi.row(a)[self.zeta..self.zeta + n]);
        }
        m
    }

    /// Auxiliary-auxiliary block, `zeta x zeta`.
    pub fn psi_star(&self) -> Matrix {
        let mut m = Matrix::zeros(self.zeta, self.zeta);
        for a in 0..self.zeta {
            m.row_mut(a).copy_from_slice(&self.psi.row(a)[..self.zeta]);
        }
        m
    }
}

pub fn attention_views(rec: &FeatureRecord) -> AttentionViews {
    let t = rec.attn.rows();
    let zeta = rec.grid.zeta;
    let n = t - zeta;
    let mut psi = Matrix::zeros(t, t);
    for r in 0..t {
        for c in 0..t {
            psi.set(r, c, 0.5 * (rec.attn.get(r, c) + rec.attn.get(c, r)));
        }
    }
    let mut psi_v = Matrix::zeros(n, n);
    for i in 0..n {
        psi_v.row_mut(i).copy_from_slice(&psi.row(zeta + i)[zeta..]);
    }
    let psi_cls = psi.row(0)[zeta..].to_vec();
    AttentionViews {
        zeta,
        psi,
        psi_v,
        psi_cls,
    }
}

/// Ingredient sequence of one record with its occurrence lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedSequence {
    indices: Vec<usize>,
    positions: Vec<u32>,
    grid_w: usize,
    /// Distinct ingredients, ascending.
    vertices: Vec<usize>,
    /// Token positions (indices into `indices`) per entry of `vertices`, ascending.
    occurrences: Vec<Vec<usize>>,
    /// Vertex slot of each token.
    slot_of_token: Vec<usize>,
}

impl DiscretizedSequence {
    pub fn new(indices: Vec<usize>, positions: Vec<u32>, grid_w: usize, vocab_size: usize) -> Result<Self> {
        if indices.len() != positions.len() {
            return Err(Error::shape(format!(
                "{} ingredients for {} positions",
                indices.len(),
                positions.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&v| v >= vocab_size) {
            return Err(Error::IngredientOutOfRange {
                ingredient: bad,
                vocab_size,
            });
        }
        if grid_w == 0 {
            return Err(Error::invalid("grid width must be positive"));
        }
        let mut vertices = indices.clone();
        vertices.sort_unstable();
        vertices.dedup();
        let mut occurrences = vec![Vec::new(); vertices.len()];
        let mut slot_of_token = Vec::with_capacity(indices.len());
        for (i, v) in indices.iter().enumerate() {
            let slot = vertices.binary_search(v).expect("present by construction");
            occurrences[slot].push(i);
            slot_of_token.push(slot);
        }
        Ok(Self {
            indices,
            positions,
            grid_w,
            vertices,
            occurrences,
            slot_of_token,
        })
    }

    /// Sequence over a full `grid_h x grid_w` raster (positions 0..n).
    pub fn on_grid(indices: Vec<usize>, grid_w: usize, vocab_size: usize) -> Result<Self> {
        let positions = (0..indices.len() as u32).collect();
        Self::new(indices, positions, grid_w, vocab_size)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Distinct ingredients in ascending order.
    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    /// Token indices holding `ingredient`, ascending; empty if absent.
    pub fn occurrences(&self, ingredient: usize) -> &[usize] {
        match self.vertices.binary_search(&ingredient) {
            Ok(s) => &self.occurrences[s],
            Err(_) => &[],
        }
    }

    /// 2D patch coordinate (row, col) of token `i`.
    pub fn pos(&self, i: usize) -> Result<(usize, usize)> {
        let p = *self
            .positions
            .get(i)
            .ok_or_else(|| Error::invalid(format!("token {i} out of range for {} tokens", self.len())))?
            as usize;
        Ok(pos(p, self.grid_w))
    }
}

/// Raster index to (row, col) on a grid `grid_w` wide.
pub fn pos(index: usize, grid_w: usize) -> (usize, usize) {
    (index / grid_w, index % grid_w)
}

/// Mixing scalars of vertex and edge weights, plus the adjacency offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feat2GraphParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Feat2GraphParams {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.5,
            beta1: 0.5,
            beta2: 0.5,
            epsilon: 1.0,
        }
    }
}

impl Feat2GraphParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-vertex and per-pair aggregates of one record, independent of the
/// mixing scalars. Raw weights are linear in these, which is what lets the
/// matcher differentiate with respect to the mixing scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphComponents {
    pub image_id: u64,
    pub label: u32,
    /// Distinct ingredients, ascending.
    pub vertices: Vec<usize>,
    /// Sum of CLS attention over each vertex's positions.
    pub lambda_cls: Vec<f64>,
    /// Occurrence count of each vertex.
    pub lambda_bag: Vec<f64>,
    /// Vertex-slot pairs `(a, b)` with `a < b`, row-major over slots.
    pub pairs: Vec<(usize, usize)>,
    /// Mean visual attention over the position pairs of each vertex pair.
    pub e_attn: Vec<f64>,
    /// Mean `1 / (epsilon + distance)` over the same position pairs.
    pub e_adj: Vec<f64>,
}

impl GraphComponents {
    /// Raw (unnormalized) instance graph for the given mixing scalars.
    pub fn raw_graph(&self, params: &Feat2GraphParams) -> IRGraph {
        let weights = self
            .lambda_cls
            .iter()
            .zip(&self.lambda_bag)
            .map(|(c, b)| params.alpha1 * c + params.alpha2 * b)
            .collect();
        let edges = self
            .pairs
            .iter()
            .zip(self.e_attn.iter().zip(&self.e_adj))
            .map(|(&(a, b), (at, ad))| Edge {
                a,
                b,
                weight: params.beta1 * at + params.beta2 * ad,
            })
            .collect();
        IRGraph {
            kind: GraphKind::Instance,
            vertices: self.vertices.clone(),
            weights,
            edges,
        }
    }

    /// Normalized instance graph.
    pub fn graph(&self, params: &Feat2GraphParams) -> Result<IRGraph> {
        normalize_graph(&self.raw_graph(params))
    }
}

/// Raw vertex weights `alpha1 · Σ psi_cls + alpha2 · count` per distinct ingredient.
pub fn feat2vertex(seq: &DiscretizedSequence, views: &AttentionViews, params: &Feat2GraphParams) -> Vec<(usize, f64)> {
    seq.vertices
        .iter()
        .zip(&seq.occurrences)
        .map(|(&v, occ)| {
            let cls: f64 = occ.iter().map(|&i| views.psi_cls[i]).sum();
            (v, params.alpha1 * cls + params.alpha2 * occ.len() as f64)
        })
        .collect()
}

/// Raw edge weights `(u, v, beta1 · e_attn + beta2 · e_adj)` over ingredient
/// pairs `u < v`.
pub fn feat2edge(
    seq: &DiscretizedSequence,
    views: &AttentionViews,
    params: &Feat2GraphParams,
) -> Result<Vec<(usize, usize, f64)>> {
    let (pairs, attn, adj) = edge_components(seq, views, params.epsilon)?;
    Ok(pairs
        .into_iter()
        .zip(attn.into_iter().zip(adj))
        .map(|((a, b), (at, ad))| (seq.vertices[a], seq.vertices[b], params.beta1 * at + params.beta2 * ad))
        .collect())
}

/// Lookup table of `1 / (epsilon + ‖Δ‖)` indexed by absolute row/col offsets.
struct InverseDistance {
    width: usize,
    table: Vec<f64>,
}

impl InverseDistance {
    fn new(rows: usize, cols: usize, epsilon: f64) -> Self {
        let mut table = Vec::with_capacity(rows * cols);
        for dr in 0..rows {
            for dc in 0..cols {
                table.push(1.0 / (epsilon + ((dr * dr + dc * dc) as f64).sqrt()));
            }
        }
        Self { width: cols, table }
    }

    #[inline]
    fn get(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        self.table[a.0.abs_diff(b.0) * self.width + a.1.abs_diff(b.1)]
    }
}

type EdgeParts = (Vec<(usize, usize)>, Vec<f64>, Vec<f64>);

/// Mean attention and mean inverse distance per vertex pair.
///
/// Each token's row is reduced into per-vertex accumulators, then added into
/// its own vertex's row, so the cost is O(n² + n·|V|) and the Cartesian
/// product of occurrence lists is never materialized.
fn edge_components(seq: &DiscretizedSequence, views: &AttentionViews, epsilon: f64) -> Result<EdgeParts> {
    let n = seq.len();
    if views.n_visual() != n {
        return Err(Error::shape(format!(
            "attention covers {} visual tokens, sequence has {n}",
            views.n_visual()
        )));
    }
    let k = seq.vertices.len();
    let coords: Vec<(usize, usize)> = seq.positions.iter().map(|&p| pos(p as usize, seq.grid_w)).collect();
    let max_r = coords.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let max_c = coords.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let inv = InverseDistance::new(max_r, max_c, epsilon);

    let mut attn_sum = vec![0.0; k * k];
    let mut adj_sum = vec![0.0; k * k];
    let mut row_attn = vec![0.0; k];
    let mut row_adj = vec![0.0; k];
    for i in 0..n {
        row_attn.iter_mut().for_each(|v| *v = 0.0);
        row_adj.iter_mut().for_each(|v| *v = 0.0);
        let u = seq.slot_of_token[i];
        let psi_row = views.psi_v.row(i);
        for j in 0..n {
            let v = seq.slot_of_token[j];
            if v == u {
                continue;
            }
            row_attn[v] += psi_row[j];
            row_adj[v] += inv.get(coords[i], coords[j]);
        }
        for v in 0..k {
            attn_sum[u * k + v] += row_attn[v];
            adj_sum[u * k + v] += row_adj[v];
        }
    }

    let pair_count = k * k.saturating_sub(1) / 2;
    let mut pairs = Vec::with_capacity(pair_count);
    let mut attn = Vec::with_capacity(pair_count);
    let mut adj = Vec::with_capacity(pair_count);
    for a in 0..k {
        for b in a + 1..k {
            let count = (seq.occurrences[a].len() * seq.occurrences[b].len()) as f64;
            pairs.push((a, b));
            attn.push(attn_sum[a * k + b] / count);
            adj.push(adj_sum[a * k + b] / count);
        }
    }
    Ok((pairs, attn, adj))
}

/// Discretizes `rec` and computes its vertex and edge aggregates.
pub fn graph_components(rec: &FeatureRecord, vocab: &VisualVocabulary, epsilon: f64) -> Result<GraphComponents> {
    let seq = discretize_record(rec, vocab)?;
    let views = attention_views(rec);
    components_from_parts(rec.image_id, rec.label, &seq, &views, epsilon)
}

pub fn components_from_parts(
    image_id: u64,
    label: u32,
    seq: &DiscretizedSequence,
    views: &AttentionViews,
    epsilon: f64,
) -> Result<GraphComponents> {
    let lambda_cls = seq
        .occurrences
        .iter()
        .map(|occ| occ.iter().map(|&i| views.psi_cls[i]).sum())
        .collect();
    let lambda_bag = seq.occurrences.iter().map(|occ| occ.len() as f64).collect();
    let (pairs, e_attn, e_adj) = edge_components(seq, views, epsilon)?;
    Ok(GraphComponents {
        image_id,
        label,
        vertices: seq.vertices.clone(),
        lambda_cls,
        lambda_bag,
        pairs,
        e_attn,
        e_adj,
    })
}

/// Record to normalized instance graph.
pub fn feat2graph(rec: &FeatureRecord, vocab: &VisualVocabulary, params: &Feat2GraphParams) -> Result<IRGraph> {
    params.validate()?;
    graph_components(rec, vocab, params.epsilon)?.graph(params)
}

/// [`graph_components`] over many records in parallel; output order follows input order.
pub fn batch_components(records: &[FeatureRecord], vocab: &VisualVocabulary, epsilon: f64) -> Result<Vec<GraphComponents>> {
    records
        .par_iter()
        .map(|r| graph_components(r, vocab, epsilon))
        .collect()
}
