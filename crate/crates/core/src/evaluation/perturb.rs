use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate_logits;
use crate::error::{Error, Result};
use crate::feat2graph::attention_views;
use crate::feature_io::FeatureRecord;
use crate::matcher::Model;
use crate::numerics::Matrix;

/// Order in which tokens are dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Most relevant first.
    #[default]
    Positive,
    /// Least relevant first.
    Negative,
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" | "positive" => Ok(Polarity::Positive),
            "neg" | "negative" => Ok(Polarity::Negative),
            _ => Err(Error::invalid(format!("polarity must be pos or neg, got {s:?}"))),
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "pos",
            Polarity::Negative => "neg",
        })
    }
}

/// Drop fractions 0, 0.1, ..., 0.9.
pub fn drop_fractions() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Number of tokens dropped out of `n` at `fraction`, i.e. `floor(fraction * n)`.
/// The small slack keeps grid values such as `0.3 * 10` from flooring to 2.
pub fn drop_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Visual token indices in drop order. Positive: relevance descending, ties
/// by grid position ascending. Negative is the exact reverse.
pub fn drop_order(relevance: &[f64], positions: &[u32], polarity: Polarity) -> Vec<usize> {
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]).then(positions[a].cmp(&positions[b])));
    if polarity == Polarity::Negative {
        order.reverse();
    }
    order
}

/// Removes `floor(fraction * n)` visual tokens in relevance order. Survivors
/// keep their grid positions and order; their attention rows and columns are
/// sliced out unchanged.
pub fn perturb_record(rec: &FeatureRecord, relevance: &[f64], fraction: f64, polarity: Polarity) -> Result<FeatureRecord> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("drop fraction must lie in [0, 1), got {fraction}")));
    }
    let n = rec.n_visual();
    if relevance.len() != n {
        return Err(Error::shape(format!("{} relevance values for {n} visual tokens", relevance.len())));
    }
    let k = drop_count(n, fraction);
    if k == 0 {
        return Ok(rec.clone());
    }
    let mut dropped = vec![false; n];
    for &i in &drop_order(relevance, &rec.positions, polarity)[..k] {
        dropped[i] = true;
    }
    let zeta = rec.grid.zeta;
    let keep: Vec<usize> = (0..zeta).chain((0..n).filter(|&i| !dropped[i]).map(|i| zeta + i)).collect();
    let mut attn = Matrix::zeros(keep.len(), keep.len());
    for (r, &src) in keep.iter().enumerate() {
        let row = rec.attn.row(src);
        for (dst, &c) in attn.row_mut(r).iter_mut().zip(&keep) {
            *dst = row[c];
        }
    }
    let out = FeatureRecord {
        image_id: rec.image_id,
        label: rec.label,
        grid: rec.grid,
        positions: (0..n).filter(|&i| !dropped[i]).map(|i| rec.positions[i]).collect(),
        tokens: rec.tokens.select_rows(&keep),
        attn,
    };
    out.check_shapes()?;
    Ok(out)
}

/// Trapezoidal area under `accuracy` over `fractions`, taken in ascending
/// fraction order.
pub fn auc(fractions: &[f64], accuracy: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = fractions.iter().copied().zip(accuracy.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    #[serde(skip)]
    pub polarity: Polarity,
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
}

/// Accuracy of `model` on `records` perturbed at each fraction of
/// [`drop_fractions`], with CLS attention of the unperturbed record as
/// relevance.
pub fn run_perturbation(records: &[FeatureRecord], model: &Model, polarity: Polarity) -> Result<PerturbationCurve> {
    run_perturbation_at(records, model, polarity, &drop_fractions())
}

pub fn run_perturbation_at(
    records: &[FeatureRecord],
    model: &Model,
    polarity: Polarity,
    fractions: &[f64],
) -> Result<PerturbationCurve> {
    let prepared = model.prepare()?;
    let relevance: Vec<Vec<f64>> = records.par_iter().map(|r| attention_views(r).psi_cls).collect();
    let labels: Vec<u32> = records.iter().map(|r| r.label).collect();
    let mut accuracy = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let logits = records
            .par_iter()
            .zip(&relevance)
            .map(|(rec, rel)| model.logits_with(&prepared, &perturb_record(rec, rel, f, polarity)?))
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(evaluate_logits(&labels, &logits, model.class_count())?.accuracy);
        log::info!("{polarity} fraction {f:.2}: accuracy {:.4}", accuracy.last().unwrap());
    }
    Ok(PerturbationCurve {
        polarity,
        fractions: fractions.to_vec(),
        auc: auc(fractions, &accuracy),
        accuracy,
    })
}
