//! Synthetic labeled data: Gaussian clusters in a small latent space pushed
//! through a frozen random `tanh` network into the ambient space, plus
//! independent per-coordinate noise that hides the class structure from a
//! raw-input nearest-neighbor search.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::evaluation::{knn_accuracy, FeatureBank};
use crate::exec::Execution;
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Standard deviation of each cluster around its mean.
    pub cluster_spread: f64,
    /// Standard deviation of the cluster means.
    pub class_separation: f64,
    /// Standard deviation of the independent noise added to every ambient
    /// coordinate, relative to the unit-variance mapped signal.
    pub ambient_noise: f64,
    /// Seeds the cluster means, the nonlinear map and the samples.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_train: 5000,
            n_test: 1000,
            ambient_dim: 64,
            latent_dim: 16,
            hidden_dim: 64,
            cluster_spread: 1.0,
            class_separation: 1.0,
            ambient_noise: 2.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid("a dataset needs at least two classes"));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(invalid("latent and hidden dimensions must be positive"));
        }
        if self.ambient_dim < self.latent_dim {
            return Err(invalid(format!(
                "ambient dimension {} is below the latent dimension {}",
                self.ambient_dim, self.latent_dim
            )));
        }
        if self.n_train < self.n_classes || self.n_test == 0 {
            return Err(invalid("too few samples for the number of classes"));
        }
        if !(self.cluster_spread >= 0.0) || !(self.class_separation > 0.0) || !(self.ambient_noise >= 0.0) {
            return Err(invalid("spread and noise must be non-negative and separation positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Row-major, `ambient_dim` columns.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, dim: usize, i: usize) -> &[f64] {
        &self.inputs[i * dim..(i + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.spec.ambient_dim
    }
}

struct FrozenMap {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    latent: usize,
    hidden: usize,
}

impl FrozenMap {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let w = &self.w1[j * self.latent..(j + 1) * self.latent];
                (crate::vecmath::dot(w, z) + self.b1[j]).tanh()
            })
            .collect();
        self.w2
            .chunks_exact(self.hidden)
            .map(|w| crate::vecmath::dot(w, &h))
            .collect()
    }
}

fn gaussian(rng: &mut impl rand::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

/// Generates a class-balanced dataset; label `i` of each split is
/// `i mod n_classes`. The mapped coordinates are standardized with train
/// statistics, noise is added, and the result is standardized again.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (l, h, d) = (spec.latent_dim, spec.hidden_dim, spec.ambient_dim);
    let mut rng = rng_for(spec.seed, &[stream::DATA, 0]);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| gaussian(&mut rng, l, spec.class_separation))
        .collect();
    // pre-activations get standard deviation 1.5: curved but not saturated
    let in_scale = 1.5 / (l as f64 * (spec.class_separation.powi(2) + spec.cluster_spread.powi(2))).sqrt();
    let map = FrozenMap {
        w1: gaussian(&mut rng, h * l, in_scale),
        b1: gaussian(&mut rng, h, 0.1),
        w2: gaussian(&mut rng, d * h, 1.0 / (h as f64).sqrt()),
        latent: l,
        hidden: h,
    };
    let sample = |n: usize, split: u64| -> Split {
        let mut rng = rng_for(spec.seed, &[stream::DATA, split]);
        let mut inputs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.n_classes;
            let z: Vec<f64> = means[c]
                .iter()
                .map(|m| m + spec.cluster_spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            inputs.extend(map.apply(&z));
            labels.push(c);
        }
        Split { inputs, labels }
    };
    let mut train = sample(spec.n_train, 1);
    let mut test = sample(spec.n_test, 2);
    standardize(&mut train, &mut test, d);
    if spec.ambient_noise > 0.0 {
        for (split, tag) in [(&mut train, 1), (&mut test, 2)] {
            let mut rng = rng_for(spec.seed, &[stream::DATA, tag, 1]);
            split.inputs.iter_mut().for_each(|x| {
                *x += spec.ambient_noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
        }
        standardize(&mut train, &mut test, d);
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

fn standardize(train: &mut Split, test: &mut Split, d: usize) {
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.inputs.iter().skip(j).step_by(d).sum::<f64>() / n;
        let var = train.inputs.iter().skip(j).step_by(d).map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for split in [&mut *train, &mut *test] {
            split.inputs.iter_mut().skip(j).step_by(d).for_each(|x| *x = (*x - mean) / sd);
        }
    }
}

/// KNN accuracy on the raw (cosine-compared) inputs, the floor a learned
/// representation should beat.
pub fn raw_input_knn(data: &Dataset, k_eval: usize, exec: Execution) -> Result<f64> {
    let d = data.dim();
    let bank = FeatureBank::new(d, &data.train.inputs, data.train.labels.clone())?;
    let test = FeatureBank::new(d, &data.test.inputs, data.test.labels.clone())?;
    knn_accuracy(&bank, &test, k_eval, exec)
}
