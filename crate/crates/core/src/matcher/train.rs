use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{loss_and_grads, LossBreakdown};
use super::MatcherParams;
use crate::atlas::{average_init, IRAtlas, IRGraph};
use crate::error::{Error, Result};
use crate::feat2graph::{batch_components, Feat2GraphParams, GraphComponents};
use crate::feature_io::FeatureRecord;
use crate::numerics::{streams, AdamW, AdamWConfig, CosineSchedule, SeededRng};
use crate::vocabulary::VisualVocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub gamma_v: f64,
    pub gamma_e: f64,
    pub delta_t: f64,
    pub layers: usize,
    pub dim: usize,
    pub seed: u64,
    /// No graph convolution and the CLS vertex term frozen at zero.
    pub bovw_mode: bool,
    /// Keep at most this many vertices per class graph at initialization.
    pub max_vertices: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            min_lr: 0.0,
            gamma_v: 0.5,
            gamma_e: 0.75,
            delta_t: 0.01,
            layers: 2,
            dim: 256,
            seed: 0,
            bovw_mode: false,
            max_vertices: None,
        }
    }
}

impl TrainConfig {
    /// The bag-of-visual-words configuration of `self`.
    pub fn bovw(self) -> Self {
        Self {
            layers: 0,
            bovw_mode: true,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dim == 0 {
            return Err(Error::invalid("batch size and dimension must be positive"));
        }
        if self.bovw_mode && self.layers != 0 {
            return Err(Error::Config("bag-of-words mode runs without graph convolution layers".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight decay", self.weight_decay),
            ("min lr", self.min_lr),
            ("gamma_v", self.gamma_v),
            ("gamma_e", self.gamma_e),
            ("delta_t", self.delta_t),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.min_lr > self.lr {
            return Err(Error::invalid("min lr exceeds lr"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Batch-size-weighted mean over the epoch.
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub mean_vertex_entropy: f64,
    pub pruned_edges: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: MatcherParams,
    pub atlas: IRAtlas,
    pub history: Vec<EpochStats>,
}

/// Number of classes implied by the labels; every class must occur.
pub fn class_count_of(comps: &[GraphComponents]) -> Result<usize> {
    let c = comps
        .iter()
        .map(|x| x.label as usize + 1)
        .max()
        .ok_or_else(|| Error::invalid("no training records"))?;
    let mut seen = vec![false; c];
    for x in comps {
        seen[x.label as usize] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(empty) => Err(Error::EmptyClass(empty)),
        None => Ok(c),
    }
}

/// Normalized instance graphs for the given mixing scalars, in input order.
pub fn instance_graphs(comps: &[GraphComponents], mixing: &Feat2GraphParams) -> Result<Vec<IRGraph>> {
    comps.par_iter().map(|c| c.graph(mixing)).collect()
}

/// Seeded parameters and the class-averaged, sparsified atlas.
pub fn initialize(comps: &[GraphComponents], vocab_size: usize, cfg: &TrainConfig) -> Result<(MatcherParams, IRAtlas)> {
    cfg.validate()?;
    let mut params = MatcherParams::init(vocab_size, cfg.dim, cfg.layers, cfg.seed)?;
    if cfg.bovw_mode {
        params.mixing.alpha1 = 0.0;
    }
    let c = class_count_of(comps)?;
    let graphs = instance_graphs(comps, &params.mixing)?;
    let mut atlas = average_init(
        comps.iter().zip(&graphs).map(|(x, g)| (x.label as usize, g)),
        c,
        vocab_size,
        cfg.delta_t,
        cfg.max_vertices,
    )?;
    atlas.sparsify(cfg.delta_t);
    Ok((params, atlas))
}

/// Which tensors an optimization run updates.
#[derive(Clone, Debug)]
enum Scope {
    Everything,
    /// Only the category graphs of these classes.
    Classes(Range<usize>),
}

struct Optimizer {
    adamw: AdamW,
    schedule: CosineSchedule,
    step: u64,
    scope: Scope,
}

impl Optimizer {
    fn edge_slot(&self, params: &MatcherParams, class: usize) -> usize {
        match &self.scope {
            Scope::Everything => 2 + 3 * params.depth() + 2 * class + 1,
            Scope::Classes(r) => 2 * (class - r.start) + 1,
        }
    }

    fn classes(&self, atlas: &IRAtlas) -> Range<usize> {
        match &self.scope {
            Scope::Everything => 0..atlas.class_count(),
            Scope::Classes(r) => r.clone(),
        }
    }

    fn sparsify(&mut self, params: &MatcherParams, atlas: &mut IRAtlas, delta_t: f64) -> usize {
        let classes = self.classes(atlas);
        let report = atlas.sparsify_classes(classes.clone(), delta_t);
        for (class, keep) in classes.zip(&report.keep) {
            let slot = self.edge_slot(params, class);
            self.adamw.retain(slot, keep);
        }
        report.total_removed()
    }

    fn step(
        &mut self,
        params: &mut MatcherParams,
        atlas: &mut IRAtlas,
        grads: &super::Gradients,
        freeze_alpha1: bool,
    ) -> Result<f64> {
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let classes = self.classes(atlas);
        let mut edge_bufs: Vec<Vec<f64>> = atlas.graphs[classes.clone()]
            .iter()
            .map(|g| g.edges.iter().map(|e| e.weight).collect())
            .collect();
        let m = &params.mixing;
        let mut mix = [m.alpha1, m.alpha2, m.beta1, m.beta2];
        let mut mix_grad = grads.mixing;
        if freeze_alpha1 {
            mix_grad[0] = 0.0;
        }
        {
            let mut slots: Vec<&mut [f64]> = Vec::new();
            let mut grad_slots: Vec<&[f64]> = Vec::new();
            if matches!(self.scope, Scope::Everything) {
                let MatcherParams { embeddings, layers, .. } = &mut *params;
                slots.push(embeddings.as_mut_slice());
                grad_slots.push(grads.embeddings.as_slice());
                for (l, g) in layers.iter_mut().zip(&grads.layers) {
                    slots.push(l.w.as_mut_slice());
                    slots.push(&mut l.gain);
                    slots.push(&mut l.bias);
                    grad_slots.push(g.w.as_slice());
                    grad_slots.push(&g.gain);
                    grad_slots.push(&g.bias);
                }
                slots.push(&mut mix);
                grad_slots.push(&mix_grad);
            }
            for ((g, eb), c) in atlas.graphs[classes.clone()].iter_mut().zip(edge_bufs.iter_mut()).zip(classes.clone()) {
                slots.push(&mut g.weights);
                slots.push(eb);
                grad_slots.push(&grads.atlas_weights[c]);
                grad_slots.push(&grads.atlas_edges[c]);
            }
            self.adamw.step_with_lr(lr, &mut slots, &grad_slots)?;
        }
        for (g, eb) in atlas.graphs[classes.clone()].iter_mut().zip(edge_bufs) {
            for (e, w) in g.edges.iter_mut().zip(eb) {
                e.weight = w;
            }
        }
        if matches!(self.scope, Scope::Everything) {
            let m = &mut params.mixing;
            [m.alpha1, m.alpha2, m.beta1, m.beta2] = mix;
            params.project_nonnegative();
        }
        atlas.project_nonnegative(classes);
        Ok(lr)
    }
}

fn run(
    comps: &[GraphComponents],
    params: &mut MatcherParams,
    atlas: &mut IRAtlas,
    cfg: &TrainConfig,
    scope: Scope,
) -> Result<Vec<EpochStats>> {
    let n = comps.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut opt = Optimizer {
        adamw: AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        }),
        schedule: CosineSchedule::new(cfg.lr, cfg.min_lr, per_epoch * cfg.epochs as u64),
        step: 0,
        scope,
    };
    let mut rng = SeededRng::new(cfg.seed).fork(streams::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pruned = opt.sparsify(params, atlas, cfg.delta_t);
        rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        let mut correct = 0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GraphComponents> = chunk.iter().map(|&i| &comps[i]).collect();
            let out = loss_and_grads(&batch, atlas, params, cfg)?;
            let w = batch.len() as f64;
            sum.total += w * out.loss.total;
            sum.ce += w * out.loss.ce;
            sum.reg_v += w * out.loss.reg_v;
            sum.reg_e += w * out.loss.reg_e;
            correct += out.correct;
            lr = opt.step(params, atlas, &out.grads, cfg.bovw_mode)?;
        }
        let inv = 1.0 / n as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: LossBreakdown {
                total: sum.total * inv,
                ce: sum.ce * inv,
                reg_v: sum.reg_v * inv,
                reg_e: sum.reg_e * inv,
            },
            train_accuracy: correct as f64 * inv,
            mean_vertex_entropy: atlas.mean_vertex_entropy(),
            pruned_edges: pruned,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}) train acc {:.3}",
            stats.loss.total,
            stats.loss.ce,
            stats.train_accuracy
        );
        history.push(stats);
    }
    Ok(history)
}

/// Initializes the atlas by class averaging, then trains matcher and atlas
/// jointly with AdamW under a cosine schedule.
pub fn train_from_components(comps: &[GraphComponents], vocab_size: usize, cfg: &TrainConfig) -> Result<TrainOutput> {
    let (mut params, mut atlas) = initialize(comps, vocab_size, cfg)?;
    let history = run(comps, &mut params, &mut atlas, cfg, Scope::Everything)?;
    Ok(TrainOutput { params, atlas, history })
}

pub fn train(records: &[FeatureRecord], vocab: &VisualVocabulary, cfg: &TrainConfig) -> Result<TrainOutput> {
    let comps = batch_components(records, vocab, Feat2GraphParams::default().epsilon)?;
    train_from_components(&comps, vocab.size(), cfg)
}

/// Adds the classes present in `comps` to the atlas and trains only their
/// graphs; the matcher and the existing classes stay fixed.
pub fn train_extension(
    params: &MatcherParams,
    atlas: &IRAtlas,
    comps: &[GraphComponents],
    cfg: &TrainConfig,
) -> Result<(IRAtlas, Vec<EpochStats>)> {
    cfg.validate()?;
    let c0 = atlas.class_count();
    let graphs = instance_graphs(comps, &params.mixing)?;
    let mut groups: BTreeMap<usize, Vec<IRGraph>> = BTreeMap::new();
    for (x, g) in comps.iter().zip(graphs) {
        groups.entry(x.label as usize).or_default().push(g);
    }
    let mut extended = atlas.extend(&groups)?;
    let new = c0..extended.class_count();
    extended.sparsify_classes(new.clone(), cfg.delta_t);
    let mut frozen = params.clone();
    let history = run(comps, &mut frozen, &mut extended, cfg, Scope::Classes(new))?;
    debug_assert_eq!(&frozen, params);
    Ok((extended, history))
}
