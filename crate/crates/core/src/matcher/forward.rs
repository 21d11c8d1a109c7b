use rayon::prelude::*;

use super::{GraphConvLayer, MatcherParams};
use crate::atlas::{normalize_lenient, IRAtlas, IRGraph, NormalizeCache};
use crate::error::{Error, Result};
use crate::feat2graph::feat2graph;
use crate::feature_io::FeatureRecord;
use crate::numerics::{axpy, dot, layer_norm_with_cache, LayerNormCache, Matrix};
use crate::vocabulary::VisualVocabulary;

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    /// `(I + E) F`
    pub agg: Matrix,
    /// `(I + E) F W`, before the ReLU.
    pub pre: Matrix,
    pub ln: LayerNormCache,
}

/// A graph pushed through the embedding table and the convolution stack.
#[derive(Clone, Debug)]
pub struct GraphEmbedding {
    /// The normalized graph that was embedded.
    pub graph: IRGraph,
    /// Vertex features per layer, `features[0]` gathered from the table.
    pub features: Vec<Matrix>,
    pub(crate) caches: Vec<LayerCache>,
    /// Vertex-weighted sum of the last layer's features.
    pub z: Vec<f64>,
}

impl GraphEmbedding {
    pub fn last_features(&self) -> &Matrix {
        self.features.last().expect("at least the input layer")
    }
}

/// `(I + E) F`: each vertex's features plus the edge-weighted sum of its
/// neighbours'.
pub(crate) fn aggregate(f: &Matrix, g: &IRGraph) -> Matrix {
    let mut a = f.clone();
    for e in &g.edges {
        if e.weight == 0.0 {
            continue;
        }
        axpy(e.weight, f.row(e.b), a.row_mut(e.a));
        axpy(e.weight, f.row(e.a), a.row_mut(e.b));
    }
    a
}

fn graph_conv_cached(f: &Matrix, g: &IRGraph, layer: &GraphConvLayer) -> Result<(Matrix, LayerCache)> {
    if f.rows() != g.vertex_count() {
        return Err(Error::shape(format!(
            "{} feature rows for {} vertices",
            f.rows(),
            g.vertex_count()
        )));
    }
    let agg = aggregate(f, g);
    let pre = agg.matmul(&layer.w)?;
    let mut relu = pre.clone();
    relu.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let (out, ln) = layer_norm_with_cache(&relu, &layer.gain, &layer.bias)?;
    Ok((out, LayerCache { agg, pre, ln }))
}

/// One layer: `LayerNorm(ReLU((I + E) F W))` with the identity acting on
/// vertices.
pub fn graph_conv(f: &Matrix, g: &IRGraph, layer: &GraphConvLayer) -> Result<Matrix> {
    graph_conv_cached(f, g, layer).map(|(out, _)| out)
}

/// Embeds a normalized graph and pools it with its vertex weights.
pub fn embed_graph(g: &IRGraph, params: &MatcherParams) -> Result<GraphEmbedding> {
    let m = params.vocab_size();
    if let Some(&v) = g.vertices.iter().find(|&&v| v >= m) {
        return Err(Error::IngredientOutOfRange {
            ingredient: v,
            vocab_size: m,
        });
    }
    let mut features = Vec::with_capacity(params.depth() + 1);
    let mut caches = Vec::with_capacity(params.depth());
    features.push(params.embeddings.select_rows(&g.vertices));
    for layer in &params.layers {
        let (next, cache) = graph_conv_cached(features.last().unwrap(), g, layer)?;
        features.push(next);
        caches.push(cache);
    }
    let last = features.last().unwrap();
    let mut z = vec![0.0; params.dim()];
    for (s, &w) in g.weights.iter().enumerate() {
        for (zj, fj) in z.iter_mut().zip(last.row(s)) {
            *zj += w * fj;
        }
    }
    Ok(GraphEmbedding {
        graph: g.clone(),
        features,
        caches,
        z,
    })
}

/// Category graph embeddings for one fixed set of parameters, shared by
/// every instance scored against them.
#[derive(Clone, Debug)]
pub struct PreparedAtlas {
    pub classes: Vec<GraphEmbedding>,
    pub(crate) norm_caches: Vec<NormalizeCache>,
}

impl PreparedAtlas {
    pub fn new(atlas: &IRAtlas, params: &MatcherParams) -> Result<Self> {
        params.check_vocab(atlas.vocab_size)?;
        let prepared: Vec<(GraphEmbedding, NormalizeCache)> = atlas
            .graphs
            .par_iter()
            .map(|raw| {
                let (g, cache) = normalize_lenient(raw);
                Ok((embed_graph(&g, params)?, cache))
            })
            .collect::<Result<_>>()?;
        let (classes, norm_caches) = prepared.into_iter().unzip();
        Ok(Self { classes, norm_caches })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// `y_c = <z_c, z>` for every class.
    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.classes.iter().map(|c| dot(&c.z, z)).collect()
    }
}

/// Everything computed while scoring one instance.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub instance: GraphEmbedding,
    pub atlas: PreparedAtlas,
    pub logits: Vec<f64>,
}

/// Scores a normalized instance graph against every class of the atlas.
pub fn forward(instance: &IRGraph, atlas: &IRAtlas, params: &MatcherParams) -> Result<(Vec<f64>, ForwardTrace)> {
    let prepared = PreparedAtlas::new(atlas, params)?;
    let emb = embed_graph(instance, params)?;
    let logits = prepared.logits(&emb.z);
    Ok((
        logits.clone(),
        ForwardTrace {
            instance: emb,
            atlas: prepared,
            logits,
        },
    ))
}

/// Logits of a record in the bag-of-visual-words configuration.
pub fn bovw_mode_logits(
    rec: &FeatureRecord,
    vocab: &VisualVocabulary,
    atlas: &IRAtlas,
    params: &MatcherParams,
) -> Result<Vec<f64>> {
    if !params.is_bovw_mode() {
        return Err(Error::Config(format!(
            "bag-of-words mode needs 0 layers and alpha1 = 0, have {} layers and alpha1 = {}",
            params.depth(),
            params.mixing.alpha1
        )));
    }
    params.check_vocab(vocab.size())?;
    let g = feat2graph(rec, vocab, &params.mixing)?;
    forward(&g, atlas, params).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{Edge, GraphKind};
    use crate::numerics::{layer_norm, SeededRng};

    fn path3() -> IRGraph {
        IRGraph::new(
            GraphKind::Instance,
            vec![0, 1, 2],
            vec![0.2, 0.3, 0.5],
            vec![Edge::new(0, 1, 1.0), Edge::new(1, 2, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn aggregation_matches_dense_product() {
        let mut rng = SeededRng::new(2);
        let f = crate::numerics::gaussian_matrix(&mut rng, 3, 4);
        let g = path3();
        let mut s = g.dense_adjacency();
        for i in 0..3 {
            s.set(i, i, 1.0);
        }
        let dense = s.matmul(&f).unwrap();
        let sparse = aggregate(&f, &g);
        for (a, b) in dense.as_slice().iter().zip(sparse.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }

        let params = MatcherParams::init(3, 4, 1, 5).unwrap();
        let layer = &params.layers[0];
        let mut relu = dense.matmul(&layer.w).unwrap();
        relu.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let expect = layer_norm(&relu, &layer.gain, &layer.bias).unwrap();
        let got = graph_conv(&f, &g, layer).unwrap();
        for (a, b) in expect.as_slice().iter().zip(got.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edgeless_graph_transforms_vertices_independently() {
        let params = MatcherParams::init(4, 5, 1, 6).unwrap();
        let layer = &params.layers[0];
        let single = IRGraph::new(GraphKind::Instance, vec![3], vec![1.0], vec![]).unwrap();
        let f = params.embeddings.select_rows(&[3]);
        let mut p = f.matmul(&layer.w).unwrap();
        p.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        assert_eq!(graph_conv(&f, &single, layer).unwrap(), layer_norm(&p, &layer.gain, &layer.bias).unwrap());

        let pair = IRGraph::new(GraphKind::Instance, vec![1, 3], vec![0.5, 0.5], vec![]).unwrap();
        let f2 = params.embeddings.select_rows(&[1, 3]);
        let out = graph_conv(&f2, &pair, layer).unwrap();
        assert_eq!(out.row(1), graph_conv(&f, &single, layer).unwrap().row(0));
    }

    #[test]
    fn zero_layer_pooling() {
        let params = MatcherParams::init(5, 3, 0, 1).unwrap();
        let single = IRGraph::new(GraphKind::Instance, vec![4], vec![1.0], vec![]).unwrap();
        assert_eq!(embed_graph(&single, &params).unwrap().z, params.embeddings.row(4));

        let uniform = IRGraph::new(GraphKind::Instance, vec![0, 2, 3], vec![1.0 / 3.0; 3], vec![]).unwrap();
        let z = embed_graph(&uniform, &params).unwrap().z;
        for j in 0..3 {
            let mean = (params.embeddings.get(0, j) + params.embeddings.get(2, j) + params.embeddings.get(3, j)) / 3.0;
            assert!((z[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn two_layers_match_stepwise_composition() {
        let params = MatcherParams::init(4, 6, 2, 8).unwrap();
        let g = path3();
        let f0 = params.embeddings.select_rows(&g.vertices);
        let f1 = graph_conv(&f0, &g, &params.layers[0]).unwrap();
        let f2 = graph_conv(&f1, &g, &params.layers[1]).unwrap();
        let emb = embed_graph(&g, &params).unwrap();
        assert_eq!(emb.features[2], f2);
        for j in 0..6 {
            let expect: f64 = (0..3).map(|s| g.weights[s] * f2.get(s, j)).sum();
            assert!((emb.z[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn out_of_range_vertex_is_rejected() {
        let params = MatcherParams::init(2, 3, 0, 1).unwrap();
        let g = IRGraph::new(GraphKind::Instance, vec![2], vec![1.0], vec![]).unwrap();
        assert!(matches!(embed_graph(&g, &params), Err(Error::IngredientOutOfRange { .. })));
    }

    #[test]
    fn self_match_and_symmetric_classes() {
        let params = MatcherParams::init(4, 5, 2, 3).unwrap();
        let inst = crate::atlas::normalize_graph(&path3()).unwrap();
        let mut cat = inst.clone();
        cat.kind = GraphKind::Category;
        let atlas = IRAtlas {
            graphs: vec![cat.clone(), cat],
            delta_t: 0.01,
            vocab_size: 4,
        };
        let (y, trace) = forward(&inst, &atlas, &params).unwrap();
        let z2: f64 = trace.instance.z.iter().map(|v| v * v).sum();
        assert!((y[0] - z2).abs() < 1e-12);
        assert_eq!(y[0], y[1]);
    }

    #[test]
    fn bovw_mode_requires_configuration() {
        let params = MatcherParams::init(4, 5, 1, 3).unwrap();
        let atlas = IRAtlas { graphs: vec![], delta_t: 0.01, vocab_size: 4 };
        let grid = crate::feature_io::TokenGrid { zeta: 1, grid_h: 1, grid_w: 1 };
        let rec = FeatureRecord::new(0, 0, grid, Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        let vocab = VisualVocabulary::new(
            Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            Default::default(),
        )
        .unwrap();
        assert!(matches!(bovw_mode_logits(&rec, &vocab, &atlas, &params), Err(Error::Config(_))));
    }
}
