use serde::{Deserialize, Serialize};

use super::forward::{embed_graph, GraphEmbedding, PreparedAtlas};
use super::MatcherParams;
use crate::atlas::{IRAtlas, IRGraph};
use crate::error::{Error, Result};
use crate::numerics::dot;

/// Contribution of one ingredient present in both graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedEvidence {
    pub ingredient: usize,
    pub category_weight: f64,
    pub instance_weight: f64,
    /// Inner product of the two final-layer features of the ingredient.
    pub similarity: f64,
    pub evidence: f64,
}

/// One term between different ingredients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTerm {
    pub category_vertex: usize,
    pub instance_vertex: usize,
    pub similarity: f64,
    pub term: f64,
    /// Ingredients in both the category vertex's and the instance vertex's
    /// closed neighbourhoods.
    pub neighbor_overlap: Vec<usize>,
}

/// Decomposition of one logit into vertex-pair terms
/// `λ̂_u λ_v <f̂_u, f_v>` over all category vertices `u` and instance
/// vertices `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub class: usize,
    pub logit: f64,
    /// Shared-ingredient terms, largest evidence first.
    pub shared: Vec<SharedEvidence>,
    pub shared_total: f64,
    /// The `top_k` cross terms of largest magnitude.
    pub top_cross: Vec<CrossTerm>,
    pub cross_total: f64,
    pub cross_count: usize,
}

impl EvidenceReport {
    /// Sum of every term of the decomposition.
    pub fn term_sum(&self) -> f64 {
        self.shared_total + self.cross_total
    }
}

/// All `(category slot, instance slot, term)` triples of the expansion.
pub fn expansion_terms(category: &GraphEmbedding, instance: &GraphEmbedding) -> Vec<(usize, usize, f64)> {
    let (fc, fi) = (category.last_features(), instance.last_features());
    let mut out = Vec::with_capacity(category.graph.vertex_count() * instance.graph.vertex_count());
    for (u, &wu) in category.graph.weights.iter().enumerate() {
        for (v, &wv) in instance.graph.weights.iter().enumerate() {
            out.push((u, v, wu * wv * dot(fc.row(u), fi.row(v))));
        }
    }
    out
}

pub fn explain_embedded(
    class: usize,
    category: &GraphEmbedding,
    instance: &GraphEmbedding,
    top_k: usize,
) -> EvidenceReport {
    let (cg, ig) = (&category.graph, &instance.graph);
    let (fc, fi) = (category.last_features(), instance.last_features());
    let mut shared = Vec::new();
    let mut cross = Vec::new();
    let (mut shared_total, mut cross_total) = (0.0, 0.0);
    for (u, v, term) in expansion_terms(category, instance) {
        let (cu, iv) = (cg.vertices[u], ig.vertices[v]);
        let similarity = dot(fc.row(u), fi.row(v));
        if cu == iv {
            shared_total += term;
            shared.push(SharedEvidence {
                ingredient: cu,
                category_weight: cg.weights[u],
                instance_weight: ig.weights[v],
                similarity,
                evidence: term,
            });
        } else {
            cross_total += term;
            cross.push((u, v, similarity, term));
        }
    }
    shared.sort_by(|a, b| b.evidence.total_cmp(&a.evidence).then(a.ingredient.cmp(&b.ingredient)));
    let cross_count = cross.len();
    cross.sort_by(|a, b| b.3.abs().total_cmp(&a.3.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
    let top_cross = cross
        .into_iter()
        .take(top_k)
        .map(|(u, v, similarity, term)| {
            let nc = cg.closed_neighborhood(u);
            let ni = ig.closed_neighborhood(v);
            CrossTerm {
                category_vertex: cg.vertices[u],
                instance_vertex: ig.vertices[v],
                similarity,
                term,
                neighbor_overlap: nc.into_iter().filter(|x| ni.binary_search(x).is_ok()).collect(),
            }
        })
        .collect();
    EvidenceReport {
        class,
        logit: dot(&category.z, &instance.z),
        shared,
        shared_total,
        top_cross,
        cross_total,
        cross_count,
    }
}

/// Evidence for `class` given a normalized instance graph.
pub fn explain(
    instance: &IRGraph,
    class: usize,
    atlas: &IRAtlas,
    params: &MatcherParams,
    top_k: usize,
) -> Result<EvidenceReport> {
    if class >= atlas.class_count() {
        return Err(Error::invalid(format!("class {class} >= class count {}", atlas.class_count())));
    }
    params.check_vocab(atlas.vocab_size)?;
    let category = embed_graph(&atlas.normalized(class), params)?;
    let inst = embed_graph(instance, params)?;
    Ok(explain_embedded(class, &category, &inst, top_k))
}

/// [`explain`] against an already embedded atlas.
pub fn explain_prepared(
    instance: &IRGraph,
    class: usize,
    prepared: &PreparedAtlas,
    params: &MatcherParams,
    top_k: usize,
) -> Result<EvidenceReport> {
    let category = prepared
        .classes
        .get(class)
        .ok_or_else(|| Error::invalid(format!("class {class} >= class count {}", prepared.class_count())))?;
    let inst = embed_graph(instance, params)?;
    Ok(explain_embedded(class, category, &inst, top_k))
}
