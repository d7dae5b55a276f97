//! L2-regularized logistic regression on sparse TF-IDF vectors.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_both_classes, sigmoid, Prediction};
use crate::annotation::Class;
use crate::error::{Error, Result};
use crate::features::SparseVector;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Full-batch gradient descent when absent; otherwise mini-batches drawn
    /// in a seeded order.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            l2: 1e-4,
            learning_rate: 1.0,
            epochs: 300,
            seed: 0,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: LinearConfig,
}

impl LinearClassifier {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn decision(&self, x: &SparseVector) -> f64 {
        x.indices
            .iter()
            .zip(&x.values)
            .map(|(&i, &v)| self.weights[i as usize] * v)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, items: &[SparseVector]) -> Result<Vec<Prediction>> {
        items
            .iter()
            .map(|x| {
                if x.dim != self.dim() {
                    return Err(Error::BadInput(format!(
                        "vector dimension {} does not match model dimension {}",
                        x.dim,
                        self.dim()
                    )));
                }
                Ok(Prediction::from_score(sigmoid(self.decision(x))))
            })
            .collect()
    }
}

/// Mean logistic loss plus `l2 / 2 * |w|^2` and its gradient; `params` is
/// the weight vector followed by the bias.
pub fn logistic_loss_and_grad(
    params: &[f64],
    xs: &[SparseVector],
    ys: &[Class],
    l2: f64,
) -> (f64, Vec<f64>) {
    let dim = params.len() - 1;
    let (w, b) = (&params[..dim], params[dim]);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let n = xs.len() as f64;
    for (x, y) in xs.iter().zip(ys) {
        let z = x
            .indices
            .iter()
            .zip(&x.values)
            .map(|(&i, &v)| w[i as usize] * v)
            .sum::<f64>()
            + b;
        let y = if y.is_target() { 1.0 } else { 0.0 };
        // log(1 + e^z) - y z, computed stably
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let r = (sigmoid(z) - y) / n;
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            grad[i as usize] += r * v;
        }
        grad[dim] += r;
    }
    loss /= n;
    for i in 0..dim {
        loss += 0.5 * l2 * w[i] * w[i];
        grad[i] += l2 * w[i];
    }
    (loss, grad)
}

pub fn train_linear(
    vectors: &[SparseVector],
    labels: &[Class],
    config: &LinearConfig,
) -> Result<LinearClassifier> {
    if vectors.len() != labels.len() {
        return Err(Error::BadInput(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    if vectors.len() < 2 {
        return Err(Error::BadInput("need at least two training items".into()));
    }
    check_both_classes(labels)?;
    let dim = vectors[0].dim;
    if vectors.iter().any(|v| v.dim != dim) {
        return Err(Error::BadInput("vectors have mixed dimensions".into()));
    }
    let mut params = vec![0.0; dim + 1];
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    for _ in 0..config.epochs {
        match config.batch_size {
            None => {
                let (_, g) = logistic_loss_and_grad(&params, vectors, labels, config.l2);
                params
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(p, g)| *p -= config.learning_rate * g);
            }
            Some(bs) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs.max(1)) {
                    let xs: Vec<SparseVector> = chunk.iter().map(|&i| vectors[i].clone()).collect();
                    let ys: Vec<Class> = chunk.iter().map(|&i| labels[i]).collect();
                    let (_, g) = logistic_loss_and_grad(&params, &xs, &ys, config.l2);
                    params
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(p, g)| *p -= config.learning_rate * g);
                }
            }
        }
    }
    let bias = params.pop().expect("bias present");
    Ok(LinearClassifier {
        weights: params,
        bias,
        config: config.clone(),
    })
}
