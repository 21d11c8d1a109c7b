//! Perturbation tests, accuracy metrics, synthetic datasets and the
//! Monte-Carlo and exact verifiers of the matcher's similarity identities.

mod metrics;
mod perturb;
mod synthetic;
mod verify;

pub use metrics::{evaluate, evaluate_logits, Evaluation};
pub use perturb::{
    auc, drop_count, drop_fractions, drop_order, perturb_record, run_perturbation, run_perturbation_at,
    PerturbationCurve, Polarity,
};
pub use synthetic::{generate_synthetic, ClassSpec, SyntheticData, SyntheticSpec};
pub use verify::{
    mean_and_std_error, orthonormal_rows, random_category_graph, random_components, verify_lemma1, verify_theorem1,
    Lemma1Report, MonteCarloCase, Theorem1Report, Tolerance, LEMMA1_MIN_SAMPLES,
};
