//! Category-level graphs: initialization by class-wise averaging,
//! sparsification, entropy regularizers, extension and serialization.

mod graph;
mod io;

use std::collections::BTreeMap;
use std::ops::Range;

pub use graph::{normalize_backward, normalize_graph, normalize_with_cache, Edge, GraphKind, IRGraph, NormalizeCache};
pub use io::{read_atlas, read_graphs, write_atlas, write_graphs, LabeledGraph, SNAT_MAGIC, SNAT_VERSION, SNGR_MAGIC, SNGR_VERSION};

use crate::error::{Error, Result};

/// Default sparsification threshold on normalized vertex weights.
pub const DEFAULT_DELTA_T: f64 = 0.01;

/// One trainable category graph per class.
///
/// Stored weights are the raw trainable values; consumers normalize them
/// with [`IRAtlas::normalized`] before matching.
#[derive(Clone, Debug, PartialEq)]
pub struct IRAtlas {
    pub graphs: Vec<IRGraph>,
    pub delta_t: f64,
    pub vocab_size: usize,
}

#[derive(Default)]
struct ClassSum {
    count: usize,
    vertices: BTreeMap<usize, f64>,
    edges: BTreeMap<(usize, usize), f64>,
}

impl ClassSum {
    fn add(&mut self, g: &IRGraph) {
        self.count += 1;
        for (&v, &w) in g.vertices.iter().zip(&g.weights) {
            *self.vertices.entry(v).or_default() += w;
        }
        for e in &g.edges {
            let (u, v) = (g.vertices[e.a], g.vertices[e.b]);
            *self.edges.entry((u.min(v), u.max(v))).or_default() += e.weight;
        }
    }

    fn mean_graph(&self, max_vertices: Option<usize>) -> IRGraph {
        let n = self.count as f64;
        let mut kept: Vec<(usize, f64)> = self.vertices.iter().map(|(&v, &w)| (v, w / n)).collect();
        if let Some(cap) = max_vertices {
            if kept.len() > cap {
                kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                kept.truncate(cap);
                kept.sort_by_key(|x| x.0);
            }
        }
        let vertices: Vec<usize> = kept.iter().map(|x| x.0).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|(&(u, v), &w)| {
                let a = vertices.binary_search(&u).ok()?;
                let b = vertices.binary_search(&v).ok()?;
                Some(Edge::new(a, b, w / n))
            })
            .collect();
        IRGraph {
            kind: GraphKind::Category,
            vertices,
            weights: kept.iter().map(|x| x.1).collect(),
            edges,
        }
    }
}

/// Edges removed from each class by [`IRAtlas::sparsify`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparsifyReport {
    pub removed: Vec<usize>,
    /// Per class, whether each pre-pruning edge survived.
    pub keep: Vec<Vec<bool>>,
}

impl SparsifyReport {
    pub fn total_removed(&self) -> usize {
        self.removed.iter().sum()
    }
}

/// Averages labeled, already normalized instance graphs per class.
///
/// The class graph's vertex set is the union of its instances' vertex sets;
/// each weight is the mean over instances with absent entries counted as 0.
/// `max_vertices` keeps only the heaviest vertices of each class.
pub fn average_init<'a>(
    instances: impl IntoIterator<Item = (usize, &'a IRGraph)>,
    class_count: usize,
    vocab_size: usize,
    delta_t: f64,
    max_vertices: Option<usize>,
) -> Result<IRAtlas> {
    let mut sums: Vec<ClassSum> = (0..class_count).map(|_| ClassSum::default()).collect();
    for (label, g) in instances {
        let slot = sums
            .get_mut(label)
            .ok_or_else(|| Error::invalid(format!("label {label} >= class count {class_count}")))?;
        if let Some(&v) = g.vertices.iter().find(|&&v| v >= vocab_size) {
            return Err(Error::IngredientOutOfRange {
                ingredient: v,
                vocab_size,
            });
        }
        slot.add(g);
    }
    let graphs = sums
        .iter()
        .enumerate()
        .map(|(c, s)| {
            if s.count == 0 {
                Err(Error::EmptyClass(c))
            } else {
                Ok(s.mean_graph(max_vertices))
            }
        })
        .collect::<Result<_>>()?;
    Ok(IRAtlas {
        graphs,
        delta_t,
        vocab_size,
    })
}

/// Like [`average_init`] over graphs grouped by class index.
pub fn average_init_grouped(groups: &[Vec<IRGraph>], vocab_size: usize, delta_t: f64) -> Result<IRAtlas> {
    average_init(
        groups.iter().enumerate().flat_map(|(c, gs)| gs.iter().map(move |g| (c, g))),
        groups.len(),
        vocab_size,
        delta_t,
        None,
    )
}

impl IRAtlas {
    pub fn class_count(&self) -> usize {
        self.graphs.len()
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.graphs {
            g.validate()?;
            if let Some(&v) = g.vertices.iter().find(|&&v| v >= self.vocab_size) {
                return Err(Error::IngredientOutOfRange {
                    ingredient: v,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Normalized class graph; a class whose weights are all zero yields
    /// zero weights rather than an error.
    pub fn normalized(&self, class: usize) -> IRGraph {
        normalize_lenient(&self.graphs[class]).0
    }

    /// Removes every edge with an endpoint whose normalized vertex weight is
    /// below `delta_t`. Vertices are kept.
    pub fn sparsify(&mut self, delta_t: f64) -> SparsifyReport {
        self.sparsify_classes(0..self.class_count(), delta_t)
    }

    /// [`IRAtlas::sparsify`] restricted to `classes`; the report covers only
    /// those classes, in order.
    pub fn sparsify_classes(&mut self, classes: Range<usize>, delta_t: f64) -> SparsifyReport {
        self.delta_t = delta_t;
        let mut report = SparsifyReport::default();
        for g in &mut self.graphs[classes] {
            let sum: f64 = g.weights.iter().sum();
            let low: Vec<bool> = g
                .weights
                .iter()
                .map(|w| if sum > 0.0 { w / sum < delta_t } else { 0.0 < delta_t })
                .collect();
            let keep: Vec<bool> = g.edges.iter().map(|e| !(low[e.a] || low[e.b])).collect();
            let mut k = keep.iter();
            g.edges.retain(|_| *k.next().unwrap());
            report.removed.push(keep.iter().filter(|k| !**k).count());
            report.keep.push(keep);
        }
        report
    }

    /// Clamps every weight of the given classes at zero.
    pub fn project_nonnegative(&mut self, classes: Range<usize>) {
        for g in &mut self.graphs[classes] {
            g.weights.iter_mut().for_each(|w| *w = w.max(0.0));
            g.edges.iter_mut().for_each(|e| e.weight = e.weight.max(0.0));
        }
    }

    /// Vertex and edge entropy regularizers `(L_v, L_e)`.
    pub fn regularizers(&self) -> (f64, f64) {
        let r = self.regularizer_grads();
        (r.vertex, r.edge)
    }

    /// Regularizers with their gradients with respect to the stored weights.
    pub fn regularizer_grads(&self) -> Regularizers {
        let c = self.class_count() as f64;
        let mut out = Regularizers::default();
        for g in &self.graphs {
            let (h, dh) = entropy_with_grad(&g.weights);
            out.vertex += h / c;
            out.d_vertex.push(dh.into_iter().map(|d| d / c).collect());

            let mut d_edges = vec![0.0; g.edges.len()];
            let k = g.vertex_count();
            if k > 0 {
                let scale = 1.0 / (c * k as f64);
                for inc in g.incidence() {
                    let row: Vec<f64> = inc.iter().map(|&i| g.edges[i].weight).collect();
                    let (h, dh) = entropy_with_grad(&row);
                    out.edge += scale * h;
                    for (&i, d) in inc.iter().zip(dh) {
                        d_edges[i] += scale * d;
                    }
                }
            }
            out.d_edge.push(d_edges);
        }
        out
    }

    /// Mean over classes of the entropy of the vertex weights.
    pub fn mean_vertex_entropy(&self) -> f64 {
        self.regularizers().0
    }

    /// Appends new classes initialized by averaging their instance graphs.
    ///
    /// Keys of `new_classes` must be exactly `C, C+1, …`; existing class
    /// graphs are untouched.
    pub fn extend(&self, new_classes: &BTreeMap<usize, Vec<IRGraph>>) -> Result<IRAtlas> {
        let c0 = self.class_count();
        for (i, &c) in new_classes.keys().enumerate() {
            if c < c0 {
                return Err(Error::ClassCollision(c));
            }
            if c != c0 + i {
                return Err(Error::invalid(format!("new class {c} leaves a gap after class {}", c0 + i)));
            }
        }
        let groups: Vec<Vec<IRGraph>> = new_classes.values().cloned().collect();
        let added = average_init_grouped(&groups, self.vocab_size, self.delta_t)?;
        let mut out = self.clone();
        out.graphs.extend(added.graphs);
        Ok(out)
    }
}

/// Entropy regularizers and their gradients.
#[derive(Clone, Debug, Default)]
pub struct Regularizers {
    pub vertex: f64,
    pub edge: f64,
    pub d_vertex: Vec<Vec<f64>>,
    pub d_edge: Vec<Vec<f64>>,
}

/// [`normalize_with_cache`] that maps an all-zero weight vector to zeros
/// instead of failing; the cache then records a zero `weight_sum`.
pub(crate) fn normalize_lenient(raw: &IRGraph) -> (IRGraph, NormalizeCache) {
    match normalize_with_cache(raw) {
        Ok(pair) => pair,
        Err(_) => {
            let mut scaled = raw.clone();
            scaled.weights = vec![1.0; raw.vertex_count()];
            let (mut g, mut cache) = match normalize_with_cache(&scaled) {
                Ok(pair) => pair,
                Err(_) => (
                    scaled,
                    NormalizeCache {
                        weight_sum: 0.0,
                        row_sums: Vec::new(),
                    },
                ),
            };
            g.weights = vec![0.0; raw.vertex_count()];
            cache.weight_sum = 0.0;
            (g, cache)
        }
    }
}

/// Shannon entropy of `x / Σx` in nats, with `0 ln 0 = 0` and an all-zero
/// vector mapping to 0.
pub fn entropy(x: &[f64]) -> Result<f64> {
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("entropy of a vector with component {v}")));
    }
    Ok(entropy_with_grad(x).0)
}

/// Entropy and its gradient with respect to `x`. Zero components get a zero
/// gradient (the one-sided derivative there is unbounded).
pub(crate) fn entropy_with_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let s: f64 = x.iter().sum();
    if s <= 0.0 {
        return (0.0, vec![0.0; x.len()]);
    }
    let h: f64 = -x
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / s;
            p * p.ln()
        })
        .sum::<f64>();
    let grad = x
        .iter()
        .map(|&v| if v > 0.0 { -((v / s).ln() + h) / s } else { 0.0 })
        .collect();
    (h, grad)
}
