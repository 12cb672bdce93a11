//! SGD with momentum and the EMA teacher update.

use serde::{Deserialize, Serialize};

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
///
/// ```text
/// v ← μ·v + g + λ·θ
/// θ ← θ − lr·v
/// ```
pub fn sgd_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient shape mismatch");
    assert_eq!(params.len(), velocity.len(), "parameter/velocity shape mismatch");
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `teacher ← m·teacher + (1 − m)·student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], m: f64) {
    assert_eq!(teacher.len(), student.len(), "teacher/student shape mismatch");
    if m == 0.0 {
        teacher.copy_from_slice(student);
        return;
    }
    if m == 1.0 {
        return;
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = m * *t + (1.0 - m) * s;
    }
}
