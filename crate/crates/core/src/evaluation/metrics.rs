use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::FeatureRecord;
use crate::matcher::{argmax, Model};

/// Top-1 accuracy with the confusion matrix, `confusion[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
}

/// Scores precomputed logits; the prediction is the argmax with ties going to
/// the lowest class index.
pub fn evaluate_logits(labels: &[u32], logits: &[Vec<f64>], class_count: usize) -> Result<Evaluation> {
    if labels.len() != logits.len() {
        return Err(Error::shape(format!("{} labels for {} logit vectors", labels.len(), logits.len())));
    }
    let mut confusion = vec![vec![0; class_count]; class_count];
    let mut correct = 0;
    for (&label, y) in labels.iter().zip(logits) {
        let label = label as usize;
        if label >= class_count || y.len() != class_count {
            return Err(Error::invalid(format!(
                "label {label} with {} logits for {class_count} classes",
                y.len()
            )));
        }
        let pred = argmax(y);
        confusion[label][pred] += 1;
        correct += usize::from(pred == label);
    }
    let total = labels.len();
    Ok(Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        confusion,
    })
}

pub fn evaluate(records: &[FeatureRecord], model: &Model) -> Result<Evaluation> {
    let logits = model.batch_logits(records)?;
    let labels: Vec<u32> = records.iter().map(|r| r.label).collect();
    evaluate_logits(&labels, &logits, model.class_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_logits() {
        let labels = [0, 1, 2, 1];
        let logits: Vec<Vec<f64>> = labels.iter().map(|&l| (0..3).map(|c| f64::from(c == l)).collect()).collect();
        let e = evaluate_logits(&labels, &logits, 3).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_logits_on_balanced_set() {
        let labels = [0, 1, 0, 1];
        let logits = vec![vec![0.3, 0.3]; 4];
        let e = evaluate_logits(&labels, &logits, 2).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn accuracy_matches_recount() {
        let mut rng = crate::numerics::SeededRng::new(4);
        let labels: Vec<u32> = (0..200).map(|_| rng.below(4) as u32).collect();
        let logits: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.gaussian()).collect()).collect();
        let e = evaluate_logits(&labels, &logits, 4).unwrap();
        let mut hits = 0;
        for (l, y) in labels.iter().zip(&logits) {
            let mut best = 0;
            for c in 1..4 {
                if y[c] > y[best] {
                    best = c;
                }
            }
            hits += (best == *l as usize) as usize;
        }
        assert_eq!(e.correct, hits);
        assert_eq!(e.accuracy, hits as f64 / 200.0);
        assert_eq!(e.confusion.iter().flatten().sum::<usize>(), 200);
    }

    #[test]
    fn bad_label_is_an_error() {
        assert!(evaluate_logits(&[2], &[vec![0.0, 1.0]], 2).is_err());
        assert!(evaluate_logits(&[0, 1], &[vec![0.0, 1.0]], 2).is_err());
    }
}
