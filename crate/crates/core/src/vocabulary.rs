//! Visual vocabulary: k-means over probe-set visual tokens, and nearest-center
//! ingredient assignment.
//!
//! Ingredients are 0-based indices into the vocabulary's center table.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{to_u32, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::feat2graph::DiscretizedSequence;
use crate::feature_io::FeatureRecord;
use crate::numerics::{Matrix, SeededRng};

pub const SNVW_MAGIC: &[u8; 4] = b"SNVW";
pub const SNVW_VERSION: u32 = 1;

/// Probe sets larger than this many records are subsampled.
pub const DEFAULT_PROBE_RECORDS: usize = 5000;

/// Where a vocabulary came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VocabFingerprint {
    pub probe_size: u32,
    pub seed: u64,
    pub layer_index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualVocabulary {
    centers: Matrix,
    pub fingerprint: VocabFingerprint,
}

impl VisualVocabulary {
    pub fn new(centers: Matrix, fingerprint: VocabFingerprint) -> Result<Self> {
        if centers.rows() < 2 {
            return Err(Error::invalid(format!(
                "a vocabulary needs at least 2 words, got {}",
                centers.rows()
            )));
        }
        if !centers.is_finite() {
            return Err(Error::invalid("non-finite vocabulary center"));
        }
        if count_distinct_rows(&centers) != centers.rows() {
            return Err(Error::invalid("duplicate vocabulary centers"));
        }
        Ok(Self {
            centers,
            fingerprint,
        })
    }

    /// Vocabulary size M.
    pub fn size(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    /// Nearest center by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest(&self.centers, x).0
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<W> {
        let mut out = BinWriter::new(w);
        out.bytes(SNVW_MAGIC)?;
        out.u32(SNVW_VERSION)?;
        out.u32(to_u32(self.size(), "M")?)?;
        out.u32(to_u32(self.dim(), "d")?)?;
        out.f32_slice(self.centers.as_slice())?;
        out.u32(self.fingerprint.probe_size)?;
        out.u64(self.fingerprint.seed)?;
        out.u32(self.fingerprint.layer_index)?;
        out.flush()?;
        Ok(out.into_inner())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut input = BinReader::new(r, "SNVW");
        input.magic(SNVW_MAGIC)?;
        input.version(SNVW_VERSION)?;
        let m = input.u32()? as usize;
        let d = input.u32()? as usize;
        let centers = Matrix::from_vec(m, d, input.f32_vec(m * d)?)?;
        let fingerprint = VocabFingerprint {
            probe_size: input.u32()?,
            seed: input.u64()?,
            layer_index: input.u32()?,
        };
        input.expect_end()?;
        Self::new(centers, fingerprint)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Index of and squared distance to the nearest row of `centers`.
pub fn nearest(centers: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.row_iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Ingredient of `x`: index of the nearest vocabulary word.
pub fn assign_ingredient(x: &[f64], vocab: &VisualVocabulary) -> Result<usize> {
    if x.len() != vocab.dim() {
        return Err(Error::shape(format!(
            "token of dimension {} against a {}-dimensional vocabulary",
            x.len(),
            vocab.dim()
        )));
    }
    Ok(vocab.assign(x))
}

/// Maps every visual token of `rec` to its ingredient.
pub fn discretize_record(rec: &FeatureRecord, vocab: &VisualVocabulary) -> Result<DiscretizedSequence> {
    if rec.dim() != vocab.dim() {
        return Err(Error::shape(format!(
            "record {} has d = {}, vocabulary has d = {}",
            rec.image_id,
            rec.dim(),
            vocab.dim()
        )));
    }
    let indices = (0..rec.n_visual())
        .map(|i| vocab.assign(rec.visual_token(i)))
        .collect();
    DiscretizedSequence::new(indices, rec.positions.clone(), rec.grid.grid_w, vocab.size())
}

fn count_distinct_rows(m: &Matrix) -> usize {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative objective improvement of one Lloyd step falls below this.
    pub rel_tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 100,
            rel_tol: 1e-4,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

/// Sum of squared distances from each point to its nearest center.
pub fn kmeans_objective(points: &Matrix, centers: &Matrix) -> f64 {
    points.row_iter().map(|p| nearest(centers, p).1).sum()
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: &Matrix, cfg: &KMeansConfig, rng: &mut SeededRng) -> Result<KMeansResult> {
    if cfg.k == 0 {
        return Err(Error::KMeans("k must be positive".into()));
    }
    let distinct = count_distinct_rows(points);
    if distinct < cfg.k {
        return Err(Error::KMeans(format!(
            "{distinct} distinct points cannot support {} clusters",
            cfg.k
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(points, plus_plus_seeds(points, cfg.k, rng), cfg);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.below(n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.uniform() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = i;
                break;
            }
            target -= w;
            pick = i;
        }
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_all(points: &Matrix, centers: &Matrix) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(centers, points.row(i)))
        .collect()
}

fn lloyd(points: &Matrix, mut centers: Matrix, cfg: &KMeansConfig) -> KMeansResult {
    let (k, dim) = centers.shape();
    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut assigned = assign_all(points, &centers);
    for _ in 0..cfg.max_iters.max(1) {
        let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let objective: f64 = assigned.iter().map(|a| a.1).sum();
        let converged_tol = history
            .last()
            .is_some_and(|&prev: &f64| prev - objective < cfg.rel_tol * prev);
        history.push(objective);
        if previous.as_ref() == Some(&labels) {
            break;
        }

        // Center update. Sums run in point order so results do not depend on
        // the thread count used for assignment.
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: move it onto the point worst served by its center.
                let far = dist
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &d)| if d > dist[best] { i } else { best });
                centers.row_mut(c).copy_from_slice(points.row(far));
                dist[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        previous = Some(labels);
        assigned = assign_all(points, &centers);
        if converged_tol {
            let objective: f64 = assigned.iter().map(|a| a.1).sum();
            history.push(objective);
            break;
        }
    }
    let objective = assigned.iter().map(|a| a.1).sum();
    KMeansResult {
        centers,
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        objective,
        history,
    }
}

/// Clusters `tokens` (one visual token per row) into `size` visual words.
pub fn build_vocabulary(
    tokens: &Matrix,
    size: usize,
    rng: &mut SeededRng,
    max_iters: usize,
    rel_tol: f64,
    layer_index: u32,
    probe_records: usize,
) -> Result<VisualVocabulary> {
    if size < 2 {
        return Err(Error::invalid("vocabulary size must be at least 2"));
    }
    let cfg = KMeansConfig {
        k: size,
        max_iters,
        rel_tol,
        restarts: 1,
    };
    let seed = rng.seed();
    let result = kmeans(tokens, &cfg, rng)?;
    VisualVocabulary::new(
        result.centers,
        VocabFingerprint {
            probe_size: to_u32(probe_records, "probe size")?,
            seed,
            layer_index,
        },
    )
}

/// Indices of the probe records: all of them up to `limit`, otherwise a seeded
/// uniform sample of `limit` records (returned sorted).
pub fn probe_indices(total: usize, limit: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    if total > limit {
        rng.shuffle(&mut idx);
        idx.truncate(limit);
        idx.sort_unstable();
    }
    idx
}

/// Stacks the visual tokens (auxiliary rows excluded) of `records`.
pub fn visual_token_matrix<'a>(records: impl IntoIterator<Item = &'a FeatureRecord>) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut dim = None;
    for rec in records {
        let d = *dim.get_or_insert(rec.dim());
        if d != rec.dim() {
            return Err(Error::shape("records disagree on embedding dimension"));
        }
        for i in 0..rec.n_visual() {
            data.extend_from_slice(rec.visual_token(i));
            rows += 1;
        }
    }
    Matrix::from_vec(rows, dim.unwrap_or(0), data)
}
