//! Classifier backends sharing one prediction contract.

use serde::{Deserialize, Serialize};

use crate::annotation::Class;

pub mod linear;
pub mod optim;
pub mod transformer;

pub use linear::{train_linear, LinearClassifier, LinearConfig};
pub use transformer::{
    train_transformer, TrainingHyperparams, TransformerClassifier, TransformerConfig,
};

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Class,
    /// Probability of the target class.
    pub score: f64,
}

impl Prediction {
    pub fn from_score(score: f64) -> Prediction {
        Prediction {
            label: Class::from_target(score >= DECISION_THRESHOLD),
            score,
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_both_classes(labels: &[Class]) -> crate::Result<()> {
    let has_target = labels.iter().any(|l| l.is_target());
    let has_non = labels.iter().any(|l| !l.is_target());
    if has_target && has_non {
        Ok(())
    } else {
        Err(crate::Error::DegenerateLabels)
    }
}
