use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{aggregate, embed_graph, GraphEmbedding, PreparedAtlas};
use super::{MatcherParams, TrainConfig};
use crate::atlas::{normalize_backward, normalize_with_cache, IRAtlas, NormalizeCache};
use crate::error::{Error, Result};
use crate::feat2graph::GraphComponents;
use crate::numerics::{axpy, dot, layer_norm_backward, log_sum_exp, softmax_row, Matrix};

/// Instances per parallel work unit. Partial sums are merged in chunk
/// order, so results do not depend on the thread count.
pub const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    /// Weighted vertex-entropy term.
    pub reg_v: f64,
    /// Weighted edge-entropy term.
    pub reg_e: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub w: Matrix,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of the loss for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embeddings: Matrix,
    pub layers: Vec<LayerGrads>,
    /// `[alpha1, alpha2, beta1, beta2]`
    pub mixing: [f64; 4],
    /// Per class, aligned with the stored vertex weights.
    pub atlas_weights: Vec<Vec<f64>>,
    /// Per class, aligned with the stored edges.
    pub atlas_edges: Vec<Vec<f64>>,
}

impl Gradients {
    /// Zero gradients for the matcher parameters only.
    pub fn zeros(params: &MatcherParams) -> Self {
        let d = params.dim();
        Self {
            embeddings: Matrix::zeros(params.vocab_size(), d),
            layers: params
                .layers
                .iter()
                .map(|_| LayerGrads {
                    w: Matrix::zeros(d, d),
                    gain: vec![0.0; d],
                    bias: vec![0.0; d],
                })
                .collect(),
            mixing: [0.0; 4],
            atlas_weights: Vec::new(),
            atlas_edges: Vec::new(),
        }
    }

    fn add_matcher(&mut self, other: &Gradients) {
        axpy(1.0, other.embeddings.as_slice(), self.embeddings.as_mut_slice());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, b.w.as_slice(), a.w.as_mut_slice());
            axpy(1.0, &b.gain, &mut a.gain);
            axpy(1.0, &b.bias, &mut a.bias);
        }
        for (a, b) in self.mixing.iter_mut().zip(other.mixing) {
            *a += b;
        }
    }

    /// All gradients in the order of [`trainable_vector`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.embeddings.as_slice().to_vec();
        for l in &self.layers {
            out.extend(l.w.as_slice());
            out.extend(&l.gain);
            out.extend(&l.bias);
        }
        out.extend(self.mixing);
        for (w, e) in self.atlas_weights.iter().zip(&self.atlas_edges) {
            out.extend(w);
            out.extend(e);
        }
        out
    }
}

/// Every trainable value: embeddings, per-layer `W`, gain and bias, the four
/// mixing scalars, then per class the vertex weights and edge weights.
pub fn trainable_vector(params: &MatcherParams, atlas: &IRAtlas) -> Vec<f64> {
    let mut out = params.embeddings.as_slice().to_vec();
    for l in &params.layers {
        out.extend(l.w.as_slice());
        out.extend(&l.gain);
        out.extend(&l.bias);
    }
    let m = &params.mixing;
    out.extend([m.alpha1, m.alpha2, m.beta1, m.beta2]);
    for g in &atlas.graphs {
        out.extend(&g.weights);
        out.extend(g.edges.iter().map(|e| e.weight));
    }
    out
}

/// Inverse of [`trainable_vector`].
pub fn load_trainable_vector(params: &mut MatcherParams, atlas: &mut IRAtlas, flat: &[f64]) -> Result<()> {
    let expected = trainable_vector(params, atlas).len();
    if flat.len() != expected {
        return Err(Error::shape(format!("{} values for {expected} trainables", flat.len())));
    }
    let mut it = flat.iter().copied();
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = it.next().unwrap());
    fill(params.embeddings.as_mut_slice());
    for l in &mut params.layers {
        fill(l.w.as_mut_slice());
        fill(&mut l.gain);
        fill(&mut l.bias);
    }
    let mut mix = [0.0; 4];
    fill(&mut mix);
    let m = &mut params.mixing;
    [m.alpha1, m.alpha2, m.beta1, m.beta2] = mix;
    for g in &mut atlas.graphs {
        fill(&mut g.weights);
        let mut ew: Vec<f64> = vec![0.0; g.edges.len()];
        fill(&mut ew);
        for (e, w) in g.edges.iter_mut().zip(ew) {
            e.weight = w;
        }
    }
    Ok(())
}

/// Backpropagates `dL/dz` through pooling and the convolution stack.
///
/// Accumulates into the embedding and layer gradients of `grads` and
/// returns gradients with respect to the graph's (normalized) vertex and
/// edge weights.
pub(crate) fn backward_graph(
    emb: &GraphEmbedding,
    dz: &[f64],
    params: &MatcherParams,
    grads: &mut Gradients,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = &emb.graph;
    let k = g.vertex_count();
    let d = params.dim();
    let last = emb.last_features();
    let d_weights = (0..k).map(|s| dot(last.row(s), dz)).collect();
    let mut df = Matrix::zeros(k, d);
    for (s, &w) in g.weights.iter().enumerate() {
        axpy(w, dz, df.row_mut(s));
    }
    let mut d_edges = vec![0.0; g.edges.len()];
    for l in (0..params.depth()).rev() {
        let layer = &params.layers[l];
        let cache = &emb.caches[l];
        let lg = &mut grads.layers[l];
        let mut dp = layer_norm_backward(&df, &cache.ln, &layer.gain, &mut lg.gain, &mut lg.bias);
        for (v, &p) in dp.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if p <= 0.0 {
                *v = 0.0;
            }
        }
        let dw = cache.agg.t_matmul(&dp)?;
        axpy(1.0, dw.as_slice(), lg.w.as_mut_slice());
        let da = dp.matmul_t(&layer.w)?;
        let f = &emb.features[l];
        for (de, e) in d_edges.iter_mut().zip(&g.edges) {
            *de += dot(da.row(e.a), f.row(e.b)) + dot(da.row(e.b), f.row(e.a));
        }
        df = aggregate(&da, g);
    }
    for (s, &v) in g.vertices.iter().enumerate() {
        axpy(1.0, df.row(s), grads.embeddings.row_mut(v));
    }
    Ok((d_weights, d_edges))
}

/// Raw-weight gradients of a category graph from normalized-weight gradients.
fn category_raw_grads(
    raw: &crate::atlas::IRGraph,
    cache: &NormalizeCache,
    d_weights: &[f64],
    d_edges: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    if cache.weight_sum > 0.0 {
        return normalize_backward(raw, cache, d_weights, d_edges);
    }
    // All vertex weights are zero: the normalized weights are constant there.
    let proxy = NormalizeCache {
        weight_sum: 1.0,
        row_sums: cache.row_sums.clone(),
    };
    let (_, de) = normalize_backward(raw, &proxy, d_weights, d_edges);
    (vec![0.0; raw.vertex_count()], de)
}

/// Loss terms, gradients and training accuracy of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub correct: usize,
}

struct Partial {
    grads: Gradients,
    d_class_z: Vec<Vec<f64>>,
    ce_sum: f64,
    correct: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of the batch plus the weighted atlas regularizers,
/// with exact gradients for every trainable tensor.
///
/// Instance graphs are rebuilt from their cached aggregates with the
/// current mixing scalars so that those receive gradients through the
/// vertex and edge normalization.
pub fn loss_and_grads(
    batch: &[&GraphComponents],
    atlas: &IRAtlas,
    params: &MatcherParams,
    cfg: &TrainConfig,
) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let c = atlas.class_count();
    let d = params.dim();
    let prepared = PreparedAtlas::new(atlas, params)?;
    let inv_b = 1.0 / batch.len() as f64;

    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut p = Partial {
                grads: Gradients::zeros(params),
                d_class_z: vec![vec![0.0; d]; c],
                ce_sum: 0.0,
                correct: 0,
            };
            for comp in chunk {
                let label = comp.label as usize;
                if label >= c {
                    return Err(Error::InvalidRecord {
                        image_id: comp.image_id,
                        reason: format!("label {label} >= class count {c}"),
                    });
                }
                let raw = comp.raw_graph(&params.mixing);
                let (g, ncache) = normalize_with_cache(&raw)?;
                let emb = embed_graph(&g, params)?;
                let y = prepared.logits(&emb.z);
                p.ce_sum += log_sum_exp(&y) - y[label];
                if argmax(&y) == label {
                    p.correct += 1;
                }
                let mut dy = softmax_row(&y);
                dy[label] -= 1.0;
                let mut dz = vec![0.0; d];
                for (k, &g_k) in dy.iter().enumerate() {
                    let g_k = g_k * inv_b;
                    axpy(g_k, &prepared.classes[k].z, &mut dz);
                    axpy(g_k, &emb.z, &mut p.d_class_z[k]);
                }
                let (dw, de) = backward_graph(&emb, &dz, params, &mut p.grads)?;
                let (dwr, der) = normalize_backward(&raw, &ncache, &dw, &de);
                p.grads.mixing[0] += dot(&dwr, &comp.lambda_cls);
                p.grads.mixing[1] += dot(&dwr, &comp.lambda_bag);
                p.grads.mixing[2] += dot(&der, &comp.e_attn);
                p.grads.mixing[3] += dot(&der, &comp.e_adj);
            }
            Ok(p)
        })
        .collect::<Result<Vec<Partial>>>()?;

    let mut grads = Gradients::zeros(params);
    let mut d_class_z = vec![vec![0.0; d]; c];
    let mut ce_sum = 0.0;
    let mut correct = 0;
    for p in &partials {
        grads.add_matcher(&p.grads);
        for (acc, part) in d_class_z.iter_mut().zip(&p.d_class_z) {
            axpy(1.0, part, acc);
        }
        ce_sum += p.ce_sum;
        correct += p.correct;
    }

    let per_class = (0..c)
        .into_par_iter()
        .map(|k| {
            let mut g = Gradients::zeros(params);
            let (dw, de) = backward_graph(&prepared.classes[k], &d_class_z[k], params, &mut g)?;
            let (dwr, der) = category_raw_grads(&atlas.graphs[k], &prepared.norm_caches[k], &dw, &de);
            Ok((g, dwr, der))
        })
        .collect::<Result<Vec<_>>>()?;

    let reg = atlas.regularizer_grads();
    for (k, (g, mut dwr, mut der)) in per_class.into_iter().enumerate() {
        grads.add_matcher(&g);
        axpy(cfg.gamma_v, &reg.d_vertex[k], &mut dwr);
        axpy(cfg.gamma_e, &reg.d_edge[k], &mut der);
        grads.atlas_weights.push(dwr);
        grads.atlas_edges.push(der);
    }

    let ce = ce_sum * inv_b;
    let reg_v = cfg.gamma_v * reg.vertex;
    let reg_e = cfg.gamma_e * reg.edge;
    Ok(BatchOutput {
        loss: LossBreakdown {
            total: ce + reg_v + reg_e,
            ce,
            reg_v,
            reg_e,
        },
        grads,
        correct,
    })
}
