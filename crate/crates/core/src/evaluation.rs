//! Frozen-feature evaluation: KNN majority vote and a linear probe.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::vecmath::{dot, normalized};

/// Unit-normalized feature rows with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureBank {
    /// Normalizes every row of `features` (row-major, `dim` columns).
    pub fn new(dim: usize, features: &[f64], labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(invalid(format!(
                "{} feature values for {} labels of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut normed = Vec::with_capacity(features.len());
        for row in features.chunks_exact(dim) {
            normed.extend(normalized(row)?);
        }
        Ok(Self {
            dim,
            features: normed,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Majority vote over the `k_eval` most similar bank rows. Vote ties go to
/// the larger summed similarity, then to the smaller class id. Equal
/// similarities prefer the lower bank index.
pub fn knn_classify(bank: &FeatureBank, query: &[f64], k_eval: usize) -> Result<usize> {
    if bank.is_empty() {
        return Err(invalid("empty feature bank"));
    }
    if query.len() != bank.dim {
        return Err(Error::DimensionMismatch {
            expected: bank.dim,
            got: query.len(),
        });
    }
    if k_eval == 0 || k_eval > bank.len() {
        return Err(invalid(format!("k_eval {k_eval} not in 1..={}", bank.len())));
    }
    let mut scored: Vec<(f64, usize)> = (0..bank.len()).map(|i| (dot(query, bank.row(i)), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k_eval < scored.len() {
        scored.select_nth_unstable_by(k_eval - 1, cmp);
        scored.truncate(k_eval);
    }
    scored.sort_unstable_by(cmp);
    let n_classes = bank.n_classes();
    let mut votes = vec![0usize; n_classes];
    let mut sims = vec![0.0f64; n_classes];
    for &(s, i) in &scored {
        let c = bank.labels[i];
        votes[c] += 1;
        sims[c] += s;
    }
    let mut best = 0;
    for c in 1..n_classes {
        let better = votes[c] > votes[best] || (votes[c] == votes[best] && sims[c] > sims[best]);
        if better {
            best = c;
        }
    }
    Ok(best)
}

/// Top-1 accuracy of [`knn_classify`] over every row of `test`.
pub fn knn_accuracy(bank: &FeatureBank, test: &FeatureBank, k_eval: usize, exec: Execution) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("empty test bank"));
    }
    let preds = exec.try_map(test.len(), |i| knn_classify(bank, test.row(i), k_eval))?;
    let hits = preds.iter().zip(test.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            milestones: vec![60, 80],
            decay: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Affine softmax classifier trained by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    dim: usize,
    n_classes: usize,
    /// `n_classes × (dim + 1)`, bias in the last column.
    weights: Vec<f64>,
}

impl LinearProbe {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let w = self.dim + 1;
        (0..self.n_classes)
            .map(|c| dot(&self.weights[c * w..c * w + self.dim], x) + self.weights[c * w + self.dim])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for c in 1..l.len() {
            if l[c] > l[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, bank: &FeatureBank) -> f64 {
        let hits = (0..bank.len()).filter(|&i| self.predict(bank.row(i)) == bank.labels[i]).count();
        hits as f64 / bank.len().max(1) as f64
    }

    pub fn train(bank: &FeatureBank, n_classes: usize, cfg: &ProbeConfig, exec: Execution) -> Result<(Self, f64)> {
        let distinct = {
            let mut seen = vec![false; n_classes];
            for &l in bank.labels() {
                if l >= n_classes {
                    return Err(invalid(format!("label {l} outside {n_classes} classes")));
                }
                seen[l] = true;
            }
            seen.iter().filter(|s| **s).count()
        };
        if n_classes < 2 || distinct < 2 {
            return Err(invalid("linear probe needs at least two classes in the training set"));
        }
        let w = bank.dim + 1;
        let mut probe = LinearProbe {
            dim: bank.dim,
            n_classes,
            weights: vec![0.0; n_classes * w],
        };
        let mut velocity = vec![0.0; probe.weights.len()];
        let n = bank.len() as f64;
        let mut loss = f64::NAN;
        // fixed-size chunks keep the reduction order independent of threads
        const CHUNK: usize = 256;
        let n_chunks = bank.len().div_ceil(CHUNK);
        for epoch in 0..cfg.epochs {
            let parts = exec.map(n_chunks, |c| {
                let mut g = vec![0.0; probe.weights.len()];
                let mut l = 0.0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(bank.len()) {
                    let x = bank.row(i);
                    let logits = probe.logits(x);
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let y = bank.labels[i];
                    l += z.ln() + m - logits[y];
                    for k in 0..n_classes {
                        let d = exps[k] / z - f64::from(u8::from(k == y));
                        let row = &mut g[k * w..(k + 1) * w];
                        for (gj, xj) in row[..bank.dim].iter_mut().zip(x) {
                            *gj += d * xj;
                        }
                        row[bank.dim] += d;
                    }
                }
                (g, l)
            });
            let mut grad = vec![0.0; probe.weights.len()];
            let mut total = 0.0;
            for (g, l) in parts {
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                total += l;
            }
            loss = total / n;
            grad.iter_mut().for_each(|g| *g /= n);
            crate::model::sgd_step(
                &mut probe.weights,
                &mut velocity,
                &grad,
                cfg.lr_at(epoch),
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        Ok((probe, loss))
    }
}

/// Trains on `train`, reports accuracy on both banks.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig, exec: Execution) -> Result<ProbeReport> {
    if train.dim != test.dim {
        return Err(Error::DimensionMismatch {
            expected: train.dim,
            got: test.dim,
        });
    }
    let n_classes = train.n_classes().max(test.n_classes());
    let (probe, final_loss) = LinearProbe::train(train, n_classes, cfg, exec)?;
    Ok(ProbeReport {
        train_accuracy: probe.accuracy(train),
        test_accuracy: probe.accuracy(test),
        final_loss,
    })
}
