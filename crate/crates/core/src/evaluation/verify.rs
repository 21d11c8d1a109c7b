use serde::{Deserialize, Serialize};

use crate::atlas::{normalize_graph, Edge, GraphKind, IRAtlas, IRGraph};
use crate::error::{Error, Result};
use crate::feat2graph::GraphComponents;
use crate::matcher::{forward, MatcherParams};
use crate::numerics::{axpy, dot, gaussian_matrix, Matrix, SeededRng};

/// Minimum Monte-Carlo sample count accepted by [`verify_lemma1`].
pub const LEMMA1_MIN_SAMPLES: usize = 10_000;

/// Tolerance of each Monte-Carlo check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tolerance {
    StandardErrors(f64),
    Relative(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloCase {
    pub name: String,
    pub expected: f64,
    pub mean: f64,
    pub std_error: f64,
    pub tolerance: Tolerance,
    pub passed: bool,
}

impl MonteCarloCase {
    fn new(name: &str, expected: f64, samples: &[f64], tolerance: Tolerance) -> Self {
        let (mean, std_error) = mean_and_std_error(samples);
        let passed = match tolerance {
            Tolerance::StandardErrors(k) => (mean - expected).abs() <= k * std_error,
            Tolerance::Relative(r) => (mean - expected).abs() <= r * expected.abs(),
        };
        Self {
            name: name.to_string(),
            expected,
            mean,
            std_error,
            tolerance,
            passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub dim: usize,
    pub samples: usize,
    pub seed: u64,
    pub cases: Vec<MonteCarloCase>,
    pub passed: bool,
}

/// Sample mean and its standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_and_std_error(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn project(w: &Matrix, f: &[f64]) -> Vec<f64> {
    w.row_iter().map(|row| dot(row, f)).collect()
}

/// Monte-Carlo estimates of `f Wᵀ W gᵀ` for standard-normal row vectors:
/// independent `f, g` with a fixed Gaussian `W` (mean 0), `g = f` with the
/// same `W` (mean `‖W‖_F²`), `g = f` with `W = I` (mean `dim`), and `g = f`
/// with a fresh Gaussian `W` per sample (mean `dim²`).
pub fn verify_lemma1(dim: usize, samples: usize, rng: &mut SeededRng) -> Result<Lemma1Report> {
    if samples < LEMMA1_MIN_SAMPLES {
        return Err(Error::invalid(format!("need at least {LEMMA1_MIN_SAMPLES} samples, got {samples}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let seed = rng.seed();
    let w = gaussian_matrix(rng, dim, dim);
    let draw = |rng: &mut SeededRng| -> Vec<f64> { (0..dim).map(|_| rng.gaussian()).collect() };

    let mut independent = Vec::with_capacity(samples);
    let mut same = Vec::with_capacity(samples);
    let mut identity = Vec::with_capacity(samples);
    let mut fresh = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (f, g) = (draw(rng), draw(rng));
        let wf = project(&w, &f);
        independent.push(dot(&wf, &project(&w, &g)));
        same.push(dot(&wf, &wf));
        identity.push(dot(&f, &f));
        let wr = gaussian_matrix(rng, dim, dim);
        let h = project(&wr, &f);
        fresh.push(dot(&h, &h));
    }
    let d = dim as f64;
    let cases = vec![
        MonteCarloCase::new("independent", 0.0, &independent, Tolerance::StandardErrors(4.0)),
        MonteCarloCase::new("same_vector", w.frobenius_sq(), &same, Tolerance::Relative(0.02)),
        MonteCarloCase::new("identity_w", d, &identity, Tolerance::Relative(0.02)),
        MonteCarloCase::new("gaussian_w", d * d, &fresh, Tolerance::Relative(0.05)),
    ];
    Ok(Lemma1Report {
        dim,
        samples,
        seed,
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}

/// `rows` orthonormal rows in `dim` dimensions by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_rows(rows: usize, dim: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if rows > dim {
        return Err(Error::invalid(format!("{rows} orthonormal rows do not fit in {dim} dimensions")));
    }
    let mut q = Matrix::zeros(rows, dim);
    let mut r = 0;
    while r < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        // Two passes keep the rows orthogonal to machine precision.
        for _ in 0..2 {
            for p in 0..r {
                let c = dot(q.row(p), &v);
                axpy(-c, q.row(p), &mut v);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.row_mut(r).copy_from_slice(&v);
        r += 1;
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub trials: usize,
    pub seed: u64,
    pub pairs_checked: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A random set of ingredient ids, at least one, drawn from `0..m`.
fn random_support(rng: &mut SeededRng, m: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..m).filter(|_| rng.uniform() < 0.5).collect();
    if v.is_empty() {
        v.push(rng.below(m));
    }
    v
}

/// Components of a random instance with every vertex pair present.
pub fn random_components(rng: &mut SeededRng, m: usize, label: u32) -> GraphComponents {
    let vertices = random_support(rng, m);
    let k = vertices.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    GraphComponents {
        image_id: 0,
        label,
        vertices,
        lambda_cls: (0..k).map(|_| rng.uniform()).collect(),
        lambda_bag: (0..k).map(|_| 1.0 + rng.below(6) as f64).collect(),
        e_attn: pairs.iter().map(|_| rng.uniform()).collect(),
        e_adj: pairs.iter().map(|_| rng.uniform()).collect(),
        pairs,
    }
}

/// A random normalized category graph over `0..m` with all pairs connected.
pub fn random_category_graph(rng: &mut SeededRng, m: usize) -> Result<IRGraph> {
    let vertices = random_support(rng, m);
    let k = vertices.len();
    let weights = (0..k).map(|_| rng.uniform() + 0.01).collect();
    let edges = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).map(|(a, b)| Edge::new(a, b, rng.uniform())).collect();
    normalize_graph(&IRGraph::new(GraphKind::Category, vertices, weights, edges)?)
}

/// Compares matcher logits in the bag-of-words configuration (no graph
/// convolution, CLS vertex term off) with an orthonormal embedding table
/// against `Σ_φ λ_φ λ̂_{c,φ} ‖f_φ‖²`, where `λ_φ` is the occurrence count of
/// `φ` over the total count.
pub fn verify_theorem1(trials: usize, rng: &mut SeededRng) -> Result<Theorem1Report> {
    const TOLERANCE: f64 = 1e-6;
    let seed = rng.seed();
    let mut max_dev: f64 = 0.0;
    let mut pairs = 0;
    for _ in 0..trials {
        let m = 3 + rng.below(10);
        let dim = m + rng.below(4);
        let mut params = MatcherParams::init(m, dim, 0, rng.next_u64())?;
        params.embeddings = orthonormal_rows(m, dim, rng)?;
        params.mixing.alpha1 = 0.0;
        let classes = 1 + rng.below(4);
        let atlas = IRAtlas {
            graphs: (0..classes).map(|_| random_category_graph(rng, m)).collect::<Result<_>>()?,
            delta_t: 0.01,
            vocab_size: m,
        };
        let comps = random_components(rng, m, 0);
        let (logits, _) = forward(&comps.graph(&params.mixing)?, &atlas, &params)?;
        let total: f64 = comps.lambda_bag.iter().sum();
        for (c, y) in logits.iter().enumerate() {
            let expected: f64 = comps
                .vertices
                .iter()
                .zip(&comps.lambda_bag)
                .map(|(&phi, count)| {
                    let f = params.embeddings.row(phi);
                    count / total * atlas.graphs[c].weight_of(phi) * dot(f, f)
                })
                .sum();
            max_dev = max_dev.max((y - expected).abs());
            pairs += 1;
        }
    }
    Ok(Theorem1Report {
        trials,
        seed,
        pairs_checked: pairs,
        max_abs_deviation: max_dev,
        tolerance: TOLERANCE,
        passed: max_dev < TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma1_default_cases_pass() {
        let mut rng = SeededRng::new(7);
        let r = verify_lemma1(8, 20_000, &mut rng).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.cases.len(), 4);
    }

    #[test]
    fn lemma1_rejects_small_samples() {
        assert!(verify_lemma1(8, 100, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn lemma1_report_is_deterministic() {
        let a = verify_lemma1(4, 10_000, &mut SeededRng::new(3)).unwrap();
        let b = verify_lemma1(4, 10_000, &mut SeededRng::new(3)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn standard_error_of_known_sample() {
        let (m, se) = mean_and_std_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let q = orthonormal_rows(5, 7, &mut SeededRng::new(2)).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot(q.row(a), q.row(b)) - want).abs() < 1e-12);
            }
        }
        assert!(orthonormal_rows(4, 3, &mut SeededRng::new(2)).is_err());
    }

    #[test]
    fn theorem1_holds_on_random_cases() {
        let r = verify_theorem1(20, &mut SeededRng::new(8)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.pairs_checked >= 20);
    }

    #[test]
    fn gaussian_table_cross_terms_are_small() {
        // Without orthogonality the identity holds only up to cross terms,
        // which shrink relative to the shared-vertex sum in high dimension.
        let mut rng = SeededRng::new(12);
        let m = 10;
        let mut params = MatcherParams::init(m, 256, 0, 4).unwrap();
        params.mixing.alpha1 = 0.0;
        let atlas = IRAtlas {
            graphs: vec![random_category_graph(&mut rng, m).unwrap()],
            delta_t: 0.01,
            vocab_size: m,
        };
        let mut comps = random_components(&mut rng, m, 0);
        comps.vertices = atlas.graphs[0].vertices.clone();
        let k = comps.vertices.len();
        comps.lambda_bag = vec![1.0; k];
        comps.lambda_cls = vec![0.0; k];
        comps.pairs = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
        comps.e_attn = vec![0.5; comps.pairs.len()];
        comps.e_adj = vec![0.5; comps.pairs.len()];
        let g = comps.graph(&params.mixing).unwrap();
        let (y, _) = forward(&g, &atlas, &params).unwrap();
        let shared: f64 = g
            .vertices
            .iter()
            .zip(&g.weights)
            .map(|(&phi, w)| w * atlas.graphs[0].weight_of(phi) * dot(params.embeddings.row(phi), params.embeddings.row(phi)))
            .sum();
        assert!(((y[0] - shared) / shared).abs() < 0.25, "{} vs {shared}", y[0]);
    }
}
