use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{FeatureRecord, TokenGrid};
use crate::numerics::{softmax_row, streams, Matrix, SeededRng};
use crate::vocabulary::{VisualVocabulary, VocabFingerprint};

/// Token content and planted attention of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// `(ingredient, token count)`; counts sum to the grid size.
    pub bag: Vec<(usize, usize)>,
    /// Ingredient pairs whose tokens attend strongly to each other.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
    /// Ingredients whose tokens draw extra CLS attention.
    #[serde(default)]
    pub relevant: Vec<usize>,
}

/// Description of a synthetic dataset. Token embeddings are noisy copies of
/// scaled one-hot centers; attention is a row softmax over planted logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    /// Number of planted centers (the vocabulary size).
    pub vocab_size: usize,
    /// Token embedding dimension; at least `vocab_size`.
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(default = "default_zeta")]
    pub zeta: usize,
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    /// Standard deviation of the Gaussian noise added to token embeddings.
    #[serde(default)]
    pub token_noise: f64,
    /// Standard deviation of the Gaussian noise added to attention logits.
    #[serde(default)]
    pub attention_noise: f64,
    /// Attention logit added between tokens of a planted pair.
    #[serde(default)]
    pub pair_boost: f64,
    /// Attention logit added between CLS and relevant tokens.
    #[serde(default)]
    pub relevance_boost: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_zeta() -> usize {
    1
}

fn default_center_scale() -> f64 {
    4.0
}

impl SyntheticSpec {
    /// Two classes over the same six ingredients, six tokens each, differing
    /// only in which ingredients attend to each other.
    pub fn edge_only(seed: u64) -> Self {
        let bag: Vec<(usize, usize)> = (0..6).map(|m| (m, 6)).collect();
        Self {
            classes: vec![
                ClassSpec {
                    bag: bag.clone(),
                    pairs: vec![(0, 1), (2, 3), (4, 5)],
                    relevant: vec![],
                },
                ClassSpec {
                    bag,
                    pairs: vec![(0, 2), (1, 4), (3, 5)],
                    relevant: vec![],
                },
            ],
            vocab_size: 6,
            dim: 6,
            grid_h: 6,
            grid_w: 6,
            zeta: 1,
            center_scale: 4.0,
            token_noise: 0.1,
            attention_noise: 0.3,
            pair_boost: 3.0,
            relevance_boost: 0.0,
            train_per_class: 200,
            test_per_class: 100,
            seed,
        }
    }

    /// `classes` classes sharing five background ingredients; each class adds
    /// six tokens of its own marker ingredient, and only markers draw CLS
    /// attention.
    pub fn planted_relevance(classes: usize, seed: u64) -> Self {
        let background: Vec<(usize, usize)> = (classes..classes + 5).map(|m| (m, 6)).collect();
        Self {
            classes: (0..classes)
                .map(|c| ClassSpec {
                    bag: [vec![(c, 6)], background.clone()].concat(),
                    pairs: vec![],
                    relevant: vec![c],
                })
                .collect(),
            vocab_size: classes + 5,
            dim: classes + 5,
            grid_h: 6,
            grid_w: 6,
            zeta: 1,
            center_scale: 4.0,
            token_noise: 0.1,
            attention_noise: 0.3,
            pair_boost: 0.0,
            relevance_boost: 3.0,
            train_per_class: 60,
            test_per_class: 40,
            seed,
        }
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            zeta: self.zeta,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid_h * self.grid_w;
        if self.classes.is_empty() || n == 0 || self.zeta == 0 {
            return Err(Error::invalid("need at least one class, a nonempty grid and a CLS token"));
        }
        if self.vocab_size < 2 || self.dim < self.vocab_size {
            return Err(Error::invalid(format!(
                "need 2 <= vocab_size <= dim, got vocab_size {} and dim {}",
                self.vocab_size, self.dim
            )));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("token_noise", self.token_noise),
            ("attention_noise", self.attention_noise),
            ("pair_boost", self.pair_boost),
            ("relevance_boost", self.relevance_boost),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.center_scale == 0.0 {
            return Err(Error::invalid("center_scale must be positive"));
        }
        for (c, class) in self.classes.iter().enumerate() {
            let total: usize = class.bag.iter().map(|b| b.1).sum();
            if total != n {
                return Err(Error::invalid(format!("class {c}: bag has {total} tokens, grid has {n}")));
            }
            let mut ids = class
                .bag
                .iter()
                .map(|b| b.0)
                .chain(class.pairs.iter().flat_map(|p| [p.0, p.1]))
                .chain(class.relevant.iter().copied());
            if let Some(m) = ids.find(|&m| m >= self.vocab_size) {
                return Err(Error::IngredientOutOfRange {
                    ingredient: m,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// The planted centers as a vocabulary.
    pub fn vocabulary(&self) -> Result<VisualVocabulary> {
        let mut centers = Matrix::zeros(self.vocab_size, self.dim);
        for m in 0..self.vocab_size {
            centers.set(m, m, self.center_scale);
        }
        VisualVocabulary::new(
            centers,
            VocabFingerprint {
                probe_size: 0,
                seed: self.seed,
                layer_index: 0,
            },
        )
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
    pub vocab: VisualVocabulary,
}

impl SyntheticData {
    pub fn class_count(&self) -> usize {
        self.train.iter().chain(&self.test).map(|r| r.label as usize + 1).max().unwrap_or(0)
    }
}

/// Records of both splits, classes interleaved, with ids counting up from 0
/// through the training split and then the test split. Every stored value is
/// rounded to `f32` so records equal what a reader returns after a write.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let mut rng = SeededRng::new(spec.seed).fork(streams::SYNTHETIC);
    let mut next_id = 0u64;
    let mut split = |per_class: usize, rng: &mut SeededRng| -> Result<Vec<FeatureRecord>> {
        let mut out = Vec::with_capacity(per_class * spec.classes.len());
        for _ in 0..per_class {
            for label in 0..spec.classes.len() {
                out.push(synthetic_record(spec, &vocab, next_id, label, rng)?);
                next_id += 1;
            }
        }
        Ok(out)
    };
    let train = split(spec.train_per_class, &mut rng)?;
    let test = split(spec.test_per_class, &mut rng)?;
    Ok(SyntheticData { train, test, vocab })
}

fn synthetic_record(
    spec: &SyntheticSpec,
    vocab: &VisualVocabulary,
    image_id: u64,
    label: usize,
    rng: &mut SeededRng,
) -> Result<FeatureRecord> {
    let class = &spec.classes[label];
    let mut layout: Vec<usize> = class.bag.iter().flat_map(|&(m, k)| std::iter::repeat_n(m, k)).collect();
    rng.shuffle(&mut layout);
    let (zeta, n) = (spec.zeta, layout.len());
    let t = zeta + n;

    let mut tokens = Matrix::zeros(t, spec.dim);
    for r in 0..t {
        let row = tokens.row_mut(r);
        if r >= zeta {
            row.copy_from_slice(vocab.centers().row(layout[r - zeta]));
        }
        for x in row.iter_mut() {
            *x = round_f32(*x + spec.token_noise * rng.gaussian());
        }
    }

    let paired = |a: usize, b: usize| class.pairs.iter().any(|&(p, q)| (p, q) == (a, b) || (q, p) == (a, b));
    let relevant: Vec<bool> = layout.iter().map(|m| class.relevant.contains(m)).collect();
    let mut attn = Matrix::zeros(t, t);
    let mut logits = vec![0.0; t];
    for r in 0..t {
        for (c, l) in logits.iter_mut().enumerate() {
            let mut v = spec.attention_noise * rng.gaussian();
            match (r.checked_sub(zeta), c.checked_sub(zeta)) {
                (Some(i), Some(j)) if paired(layout[i], layout[j]) => v += spec.pair_boost,
                (None, Some(j)) | (Some(j), None) if r.min(c) == 0 && relevant[j] => v += spec.relevance_boost,
                _ => {}
            }
            *l = v;
        }
        let row = softmax_row(&logits);
        for (dst, p) in attn.row_mut(r).iter_mut().zip(row) {
            *dst = round_f32(p);
        }
    }
    FeatureRecord::new(image_id, label as u32, spec.grid(), tokens, attn)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
