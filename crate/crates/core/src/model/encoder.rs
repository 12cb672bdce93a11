//! Student (backbone → projector → predictor) and momentum teacher
//! (backbone → projector).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{BatchTape, LayerSpec, Mlp, Norm, Tape};
use super::optim::{ema_update, sgd_step, SgdConfig};
use crate::error::{invalid, Result};
use crate::exec::Execution;

fn batch_norm() -> Norm {
    Norm::Batch
}

/// Layer widths of the three heads, and the normalization used inside the
/// projector and predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub backbone_hidden: usize,
    pub feature_dim: usize,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    #[serde(default = "batch_norm")]
    pub head_norm: Norm,
}

impl Architecture {
    /// backbone `[in→128→64]`, projector `[64→128→16]`, predictor `[16→128→16]`.
    pub fn reference(input_dim: usize) -> Self {
        Self {
            input_dim,
            backbone_hidden: 128,
            feature_dim: 64,
            projector_hidden: 128,
            embed_dim: 16,
            predictor_hidden: 128,
            head_norm: Norm::Batch,
        }
    }

    /// Small stack with 8-dimensional embeddings, for gradient checks.
    pub fn toy(input_dim: usize) -> Self {
        Self {
            input_dim,
            backbone_hidden: 12,
            feature_dim: 10,
            projector_hidden: 12,
            embed_dim: 8,
            predictor_hidden: 12,
            head_norm: Norm::Batch,
        }
    }

    pub fn backbone(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(self.input_dim, self.backbone_hidden).relu(),
            LayerSpec::new(self.backbone_hidden, self.feature_dim),
        ]
    }

    pub fn projector(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(self.feature_dim, self.projector_hidden).with_norm(self.head_norm).relu(),
            LayerSpec::new(self.projector_hidden, self.embed_dim),
        ]
    }

    pub fn predictor(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(self.embed_dim, self.predictor_hidden).with_norm(self.head_norm).relu(),
            LayerSpec::new(self.predictor_hidden, self.embed_dim),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Student {
    pub backbone: Mlp,
    pub projector: Mlp,
    pub predictor: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub backbone: Mlp,
    pub projector: Mlp,
}

/// Result of one student forward pass.
pub struct StudentPass {
    /// Projector output `q = g(f(x))`, before the predictor.
    pub projection: Vec<f64>,
    /// Predictor output `p = h(q)`.
    pub prediction: Vec<f64>,
    tapes: [Tape; 3],
}

/// Result of a student forward pass over a batch.
pub struct StudentBatchPass {
    pub projections: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<f64>>,
    tapes: [BatchTape; 3],
}

/// Gradient (or velocity) buffers shaped like a [`Student`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentGrads {
    pub backbone: Vec<f64>,
    pub projector: Vec<f64>,
    pub predictor: Vec<f64>,
}

impl StudentGrads {
    pub fn zeros_like(s: &Student) -> Self {
        Self {
            backbone: vec![0.0; s.backbone.n_params()],
            projector: vec![0.0; s.projector.n_params()],
            predictor: vec![0.0; s.predictor.n_params()],
        }
    }

    pub fn add_assign(&mut self, other: &StudentGrads) {
        for (a, b) in [
            (&mut self.backbone, &other.backbone),
            (&mut self.projector, &other.projector),
            (&mut self.predictor, &other.predictor),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in [&mut self.backbone, &mut self.projector, &mut self.predictor] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// All gradients concatenated backbone, projector, predictor.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.backbone.clone();
        v.extend(&self.projector);
        v.extend(&self.predictor);
        v
    }
}

impl Student {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        Ok(Self {
            backbone: Mlp::init(arch.backbone(), rng)?,
            projector: Mlp::init(arch.projector(), rng)?,
            predictor: Mlp::init(arch.predictor(), rng)?,
        })
    }

    /// Backbone features, as used by the frozen evaluations.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.backbone.predict(x)
    }

    pub fn forward(&self, x: &[f64]) -> Result<StudentPass> {
        let (feat, t0) = self.backbone.forward(x)?;
        let (projection, t1) = self.projector.forward(&feat)?;
        let (prediction, t2) = self.predictor.forward(&projection)?;
        Ok(StudentPass {
            projection,
            prediction,
            tapes: [t0, t1, t2],
        })
    }

    /// Backpropagates `∂L/∂p` through all three heads into `acc`.
    pub fn backward_into(&self, pass: &StudentPass, grad_prediction: &[f64], acc: &mut StudentGrads) -> Result<()> {
        let g = self
            .predictor
            .backward_into(&pass.tapes[2], grad_prediction, &mut acc.predictor)?;
        let g = self.projector.backward_into(&pass.tapes[1], &g, &mut acc.projector)?;
        self.backbone.backward_into(&pass.tapes[0], &g, &mut acc.backbone)?;
        Ok(())
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>], exec: Execution) -> Result<StudentBatchPass> {
        let (feats, t0) = self.backbone.forward_batch(xs, exec)?;
        let (projections, t1) = self.projector.forward_batch(&feats, exec)?;
        let (predictions, t2) = self.predictor.forward_batch(&projections, exec)?;
        Ok(StudentBatchPass {
            projections,
            predictions,
            tapes: [t0, t1, t2],
        })
    }

    /// Backpropagates per-row `∂L/∂pᵣ` through all three heads into `acc`.
    pub fn backward_batch(
        &self,
        pass: &StudentBatchPass,
        grad_predictions: &[Vec<f64>],
        acc: &mut StudentGrads,
        exec: Execution,
    ) -> Result<()> {
        let g = self
            .predictor
            .backward_batch(&pass.tapes[2], grad_predictions, &mut acc.predictor, exec)?;
        let g = self.projector.backward_batch(&pass.tapes[1], &g, &mut acc.projector, exec)?;
        self.backbone.backward_batch(&pass.tapes[0], &g, &mut acc.backbone, exec)?;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.backbone.n_params() + self.projector.n_params() + self.predictor.n_params()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.backbone.params().to_vec();
        v.extend(self.projector.params());
        v.extend(self.predictor.params());
        v
    }

    /// Mutable access to parameter `i` of the concatenated layout.
    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (b, p) = (self.backbone.n_params(), self.projector.n_params());
        if i < b {
            &mut self.backbone.params_mut()[i]
        } else if i < b + p {
            &mut self.projector.params_mut()[i - b]
        } else {
            &mut self.predictor.params_mut()[i - b - p]
        }
    }
}

impl Teacher {
    pub fn from_student(s: &Student) -> Self {
        Self {
            backbone: s.backbone.clone(),
            projector: s.projector.clone(),
        }
    }

    /// Un-normalized teacher embedding `g(f(x))`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.projector.predict(&self.backbone.predict(x)?)
    }

    /// Un-normalized teacher embeddings of a batch; batch-norm layers use
    /// the statistics of `xs`.
    pub fn embed_batch(&self, xs: &[Vec<f64>], exec: Execution) -> Result<Vec<Vec<f64>>> {
        self.projector.predict_batch(&self.backbone.predict_batch(xs, exec)?, exec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub student: Student,
    pub teacher: Teacher,
    pub momentum: f64,
}

impl EncoderPair {
    /// Random student; the teacher starts as an exact copy.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, momentum: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid(format!("momentum {momentum} not in [0, 1]")));
        }
        let student = Student::init(arch, rng)?;
        let teacher = Teacher::from_student(&student);
        Ok(Self {
            student,
            teacher,
            momentum,
        })
    }

    pub fn ema_update(&mut self) {
        let m = self.momentum;
        ema_update(self.teacher.backbone.params_mut(), self.student.backbone.params(), m);
        ema_update(self.teacher.projector.params_mut(), self.student.projector.params(), m);
    }
}

/// Momentum buffers for the student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentOptimizer {
    pub config: SgdConfig,
    pub velocity: StudentGrads,
}

impl StudentOptimizer {
    pub fn new(student: &Student, config: SgdConfig) -> Self {
        Self {
            config,
            velocity: StudentGrads::zeros_like(student),
        }
    }

    pub fn step(&mut self, student: &mut Student, grads: &StudentGrads, lr: f64) {
        let c = self.config;
        sgd_step(student.backbone.params_mut(), &mut self.velocity.backbone, &grads.backbone, lr, c.momentum, c.weight_decay);
        sgd_step(student.projector.params_mut(), &mut self.velocity.projector, &grads.projector, lr, c.momentum, c.weight_decay);
        sgd_step(student.predictor.params_mut(), &mut self.velocity.predictor, &grads.predictor, lr, c.momentum, c.weight_decay);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn teacher_mirrors_student_at_init() {
        let mut rng = rng_for(1, &[]);
        let pair = EncoderPair::init(&Architecture::reference(64), 0.99, &mut rng).unwrap();
        assert_eq!(pair.teacher.backbone.params(), pair.student.backbone.params());
        assert_eq!(pair.teacher.projector.params(), pair.student.projector.params());
        assert!(pair.teacher.backbone.same_shape(&pair.student.backbone));
    }

    #[test]
    fn ema_never_touches_student() {
        let mut rng = rng_for(2, &[]);
        let mut pair = EncoderPair::init(&Architecture::toy(6), 0.5, &mut rng).unwrap();
        pair.student.backbone.params_mut()[0] += 1.0;
        let before = pair.student.clone();
        let t0 = pair.teacher.backbone.params()[0];
        pair.ema_update();
        assert_eq!(pair.student, before);
        let expected = 0.5 * t0 + 0.5 * before.backbone.params()[0];
        assert!((pair.teacher.backbone.params()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn ema_extremes_on_pair() {
        let mut rng = rng_for(3, &[]);
        let mut pair = EncoderPair::init(&Architecture::toy(6), 1.0, &mut rng).unwrap();
        pair.student.projector.params_mut()[3] = 9.0;
        let frozen = pair.teacher.clone();
        pair.ema_update();
        assert_eq!(pair.teacher.backbone.params(), frozen.backbone.params());
        assert_eq!(pair.teacher.projector.params(), frozen.projector.params());
        pair.momentum = 0.0;
        pair.ema_update();
        assert_eq!(pair.teacher.projector.params(), pair.student.projector.params());
    }

    #[test]
    fn shapes_chain() {
        let mut rng = rng_for(4, &[]);
        let s = Student::init(&Architecture::reference(64), &mut rng).unwrap();
        let xs = vec![vec![0.1; 64], vec![-0.2; 64]];
        let pass = s.forward_batch(&xs, Execution::Sequential).unwrap();
        assert_eq!(pass.projections[1].len(), 16);
        assert_eq!(pass.predictions[1].len(), 16);
        assert_eq!(s.features(&xs[0]).unwrap().len(), 64);
        assert!(s.forward(&xs[0]).is_err());
        let layer = Architecture { head_norm: Norm::Layer, ..Architecture::reference(64) };
        let s = Student::init(&layer, &mut rng).unwrap();
        assert_eq!(s.forward(&xs[0]).unwrap().prediction.len(), 16);
        assert!(EncoderPair::init(&Architecture::toy(3), 1.5, &mut rng).is_err());
    }
}
