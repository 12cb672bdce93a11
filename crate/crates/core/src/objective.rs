//! Neighbor weighting, feature-space mixing and the weighted squared-error loss.
//!
//! For a student prediction `p`, teacher embedding `z` and mixed neighbors
//! `z̃ᵢ`, the loss is
//!
//! ```text
//! L = w₀·‖p̂ − ẑ‖² + Σᵢ wᵢ·‖p̂ − t̂ᵢ‖²
//! ```
//!
//! where hats denote L2 normalisation and `tᵢ` are the mixed neighbors.
//! The training path normalizes the mixed targets as well
//! ([`TargetNorm::Normalize`]); the algebraic decomposition of the mixture
//! holds for raw mixed targets ([`TargetNorm::Raw`]), so both are available
//! through the same evaluator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::support_set::NeighborSet;
use crate::vecmath::{dot, is_unit, norm, normalized, sq_dist};

/// How neighbor contributions are weighted. Index 0 is always the positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `[1, 1/K, …, 1/K]`
    Wse,
    /// `1/(K+1)` everywhere
    Mse,
    /// Softmax over neighbor-to-student cosines, scaled by `1/γᵢ`.
    /// `gamma = None` means every `γᵢ = 1`.
    Cas { gamma: Option<Vec<f64>> },
}

impl WeightScheme {
    pub fn cas() -> Self {
        WeightScheme::Cas { gamma: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Wse => "wse",
            WeightScheme::Mse => "mse",
            WeightScheme::Cas { .. } => "cas",
        }
    }

    /// Weights for `neighbors`; `q1` is only read by CAS.
    pub fn weights(&self, neighbors: &NeighborSet, q1: Option<&[f64]>) -> Result<Vec<f64>> {
        let k = neighbors.k();
        match self {
            WeightScheme::Wse => Ok(weights_wse(k)),
            WeightScheme::Mse => Ok(weights_mse(k)),
            WeightScheme::Cas { gamma } => {
                if k == 0 {
                    // nothing to attend over; only the positive term remains
                    return Ok(vec![1.0]);
                }
                let q1 = q1.ok_or_else(|| invalid("CAS weights need the student embedding q1"))?;
                let ones;
                let gamma = match gamma {
                    Some(g) => {
                        if g.len() < k {
                            return Err(invalid(format!(
                                "CAS gamma has {} entries for K = {k}",
                                g.len()
                            )));
                        }
                        &g[..k]
                    }
                    None => {
                        ones = vec![1.0; k];
                        &ones[..]
                    }
                };
                weights_cas(neighbors, q1, gamma)
            }
        }
    }
}

pub fn weights_wse(k: usize) -> Vec<f64> {
    let mut w = vec![1.0];
    w.extend(std::iter::repeat(1.0 / k as f64).take(k));
    w
}

pub fn weights_mse(k: usize) -> Vec<f64> {
    vec![1.0 / (k + 1) as f64; k + 1]
}

/// Cross-attention weights: entry 0 is 1, entry `i` is
/// `(1/γᵢ)·exp(cos(zᵢ, q1)) / Σₖ exp(cos(zₖ, q1))`.
pub fn weights_cas(neighbors: &NeighborSet, q1: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    let k = neighbors.k();
    if k == 0 {
        return Err(invalid("CAS weights are undefined without neighbors"));
    }
    if gamma.len() != k {
        return Err(invalid(format!("gamma has {} entries for K = {k}", gamma.len())));
    }
    if gamma.iter().any(|g| !(*g > 0.0)) {
        return Err(invalid("gamma entries must be positive"));
    }
    if !is_unit(q1) {
        return Err(Error::NotNormalized { norm: norm(q1) });
    }
    let logits: Vec<f64> = neighbors
        .embeddings()
        .map(|z| crate::vecmath::cosine(z, q1))
        .collect::<Result<_>>()?;
    // cosines are bounded, so no max-shift is needed
    let exps: Vec<f64> = logits.iter().map(|c| c.exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut w = Vec::with_capacity(k + 1);
    w.push(1.0);
    w.extend(exps.iter().zip(gamma).map(|(e, g)| e / total / g));
    Ok(w)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One λ per training step, shared by every row and neighbor.
    #[default]
    PerBatch,
    /// An independent λ for every neighbor of every row.
    PerNeighbor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Off,
    /// λ ~ Uniform(0, 1)
    Uniform,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPolicy {
    pub mode: MixMode,
    #[serde(default)]
    pub granularity: Granularity,
}

/// The mixing coefficients used for one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Shared(f64),
    PerNeighbor(Vec<f64>),
}

impl Lambda {
    fn at(&self, i: usize) -> f64 {
        match self {
            Lambda::Shared(l) => *l,
            Lambda::PerNeighbor(v) => v[i],
        }
    }
}

impl MixPolicy {
    pub const OFF: MixPolicy = MixPolicy {
        mode: MixMode::Off,
        granularity: Granularity::PerBatch,
    };

    pub fn uniform() -> Self {
        Self {
            mode: MixMode::Uniform,
            granularity: Granularity::PerBatch,
        }
    }

    pub fn fixed(lambda: f64) -> Self {
        Self {
            mode: MixMode::Fixed(lambda),
            granularity: Granularity::PerBatch,
        }
    }

    pub fn is_off(&self) -> bool {
        self.mode == MixMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        if let MixMode::Fixed(l) = self.mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(invalid(format!("fixed lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.mode {
            MixMode::Off => 1.0,
            MixMode::Uniform => rng.random::<f64>(),
            MixMode::Fixed(l) => l,
        }
    }

    /// The per-step λ for [`Granularity::PerBatch`] policies.
    pub fn draw_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        match (self.mode, self.granularity) {
            (MixMode::Off, _) | (_, Granularity::PerNeighbor) => None,
            _ => Some(self.draw_one(rng)),
        }
    }

    /// Resolves the coefficients for one row with `k` neighbors.
    /// `batch_lambda` is the value from [`MixPolicy::draw_batch`].
    pub fn lambda_for_row<R: Rng + ?Sized>(
        &self,
        k: usize,
        batch_lambda: Option<f64>,
        rng: &mut R,
    ) -> Option<Lambda> {
        match (self.mode, self.granularity) {
            (MixMode::Off, _) => None,
            (_, Granularity::PerBatch) => {
                Some(Lambda::Shared(batch_lambda.unwrap_or_else(|| self.draw_one(rng))))
            }
            (_, Granularity::PerNeighbor) => {
                Some(Lambda::PerNeighbor((0..k).map(|_| self.draw_one(rng)).collect()))
            }
        }
    }
}

/// `z̃ᵢ = λᵢ·zᵢ + (1 − λᵢ)·z`, or the raw neighbors when `lambda` is `None`.
/// Results are not normalized.
pub fn mix_with(z2: &[f64], neighbors: &NeighborSet, lambda: Option<&Lambda>) -> Vec<Vec<f64>> {
    neighbors
        .embeddings()
        .enumerate()
        .map(|(i, zi)| match lambda {
            None => zi.to_vec(),
            Some(l) => {
                let l = l.at(i);
                zi.iter().zip(z2).map(|(a, b)| l * a + (1.0 - l) * b).collect()
            }
        })
        .collect()
}

/// Draws λ per `policy` from `seed` and mixes every neighbor with `z2`.
pub fn mix_neighbors(
    z2: &[f64],
    neighbors: &NeighborSet,
    policy: &MixPolicy,
    seed: u64,
) -> (Vec<Vec<f64>>, Option<Lambda>) {
    let mut rng = <crate::rng::Rng as rand::SeedableRng>::seed_from_u64(seed);
    let batch = policy.draw_batch(&mut rng);
    let lambda = policy.lambda_for_row(neighbors.k(), batch, &mut rng);
    (mix_with(z2, neighbors, lambda.as_ref()), lambda)
}

/// Whether mixed targets are re-normalized before the distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetNorm {
    Normalize,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `‖p̂ − ẑ‖²`
    pub positive_term: f64,
    /// `‖p̂ − t̂ᵢ‖²` per neighbor
    pub neighbor_terms: Vec<f64>,
    pub weights_used: Vec<f64>,
    pub lambda_used: Option<Lambda>,
}

fn check_lengths(mixed: &[Vec<f64>], weights: &[f64], dim: usize) -> Result<()> {
    if weights.len() != mixed.len() + 1 {
        return Err(invalid(format!(
            "{} weights for {} neighbors",
            weights.len(),
            mixed.len()
        )));
    }
    for m in mixed {
        if m.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.len(),
            });
        }
    }
    Ok(())
}

fn targets(z2: &[f64], mixed: &[Vec<f64>], mode: TargetNorm) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let z = normalized(z2)?;
    let t = mixed
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let n = norm(m);
            if !(n > 1e-12) {
                return Err(Error::ZeroMixedNeighbor { index: i });
            }
            Ok(match mode {
                TargetNorm::Normalize => m.iter().map(|x| x / n).collect(),
                TargetNorm::Raw => m.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((z, t))
}

/// Evaluates the weighted loss with an explicit target normalisation mode.
pub fn evaluate_loss(
    p1: &[f64],
    z2: &[f64],
    mixed: &[Vec<f64>],
    weights: &[f64],
    mode: TargetNorm,
) -> Result<LossBreakdown> {
    if p1.len() != z2.len() {
        return Err(Error::DimensionMismatch {
            expected: p1.len(),
            got: z2.len(),
        });
    }
    check_lengths(mixed, weights, p1.len())?;
    let p = normalized(p1)?;
    let (z, t) = targets(z2, mixed, mode)?;
    let positive_term = sq_dist(&p, &z);
    let neighbor_terms: Vec<f64> = t.iter().map(|ti| sq_dist(&p, ti)).collect();
    let total = weights[0] * positive_term
        + neighbor_terms
            .iter()
            .zip(&weights[1..])
            .map(|(d, w)| w * d)
            .sum::<f64>();
    Ok(LossBreakdown {
        total,
        positive_term,
        neighbor_terms,
        weights_used: weights.to_vec(),
        lambda_used: None,
    })
}

/// The training loss: every vector, mixed targets included, is normalized.
pub fn mnn_loss(p1: &[f64], z2: &[f64], mixed: &[Vec<f64>], weights: &[f64]) -> Result<LossBreakdown> {
    evaluate_loss(p1, z2, mixed, weights, TargetNorm::Normalize)
}

/// `∂L/∂p1` through the normalisation `p̂ = p/‖p‖`.
pub fn loss_gradient_p1(
    p1: &[f64],
    z2: &[f64],
    mixed: &[Vec<f64>],
    weights: &[f64],
    mode: TargetNorm,
) -> Result<Vec<f64>> {
    check_lengths(mixed, weights, p1.len())?;
    let pn = norm(p1);
    if !(pn > 0.0) {
        return Err(Error::ZeroVector);
    }
    let p: Vec<f64> = p1.iter().map(|x| x / pn).collect();
    let (z, t) = targets(z2, mixed, mode)?;
    // dL/dp̂ = Σ 2wᵢ(p̂ − tᵢ)
    let mut g = vec![0.0; p.len()];
    for (w, target) in weights.iter().zip(std::iter::once(&z).chain(t.iter())) {
        for ((gi, pi), ti) in g.iter_mut().zip(&p).zip(target) {
            *gi += 2.0 * w * (pi - ti);
        }
    }
    // dp̂/dp = (I − p̂p̂ᵀ)/‖p‖
    let proj = dot(&g, &p);
    Ok(g.iter().zip(&p).map(|(gi, pi)| (gi - proj * pi) / pn).collect())
}

/// The closed form obtained by dropping the cross terms:
/// `(1 + (1−λ)²)·‖p − z‖² + (λ²/K)·Σ‖p − zᵢ‖²`.
pub fn simplified_loss(p1: &[f64], z2: &[f64], raw_neighbors: &[Vec<f64>], lambda: f64) -> Result<f64> {
    let k = raw_neighbors.len();
    if k == 0 {
        return Err(invalid("simplified loss needs at least one neighbor"));
    }
    let pos = sq_dist(p1, z2);
    let nb: f64 = raw_neighbors.iter().map(|zi| sq_dist(p1, zi)).sum();
    Ok((1.0 + (1.0 - lambda).powi(2)) * pos + lambda * lambda / k as f64 * nb)
}

/// `2λ(1−λ)·(p − zᵢ)ᵀ(p − z)` for each neighbor.
pub fn cross_terms(p1: &[f64], z2: &[f64], raw_neighbors: &[Vec<f64>], lambda: f64) -> Vec<f64> {
    let d: Vec<f64> = p1.iter().zip(z2).map(|(a, b)| a - b).collect();
    raw_neighbors
        .iter()
        .map(|zi| {
            let di: Vec<f64> = p1.iter().zip(zi).map(|(a, b)| a - b).collect();
            2.0 * lambda * (1.0 - lambda) * dot(&di, &d)
        })
        .collect()
}

/// Loss and `∂L/∂p1` for one row, as computed by the training loop.
#[derive(Clone, Debug)]
pub struct RowObjective {
    pub breakdown: LossBreakdown,
    pub grad_p1: Vec<f64>,
}

/// Mixes, weights and evaluates one row. `q1` is the student embedding used
/// by CAS weighting; weights are treated as constants for the gradient.
pub fn row_objective(
    p1: &[f64],
    z2: &[f64],
    neighbors: &NeighborSet,
    scheme: &WeightScheme,
    lambda: Option<Lambda>,
    q1: Option<&[f64]>,
) -> Result<RowObjective> {
    let mixed = mix_with(z2, neighbors, lambda.as_ref());
    let weights = scheme.weights(neighbors, q1)?;
    let mut breakdown = mnn_loss(p1, z2, &mixed, &weights)?;
    breakdown.lambda_used = lambda;
    let grad_p1 = loss_gradient_p1(p1, z2, &mixed, &weights, TargetNorm::Normalize)?;
    Ok(RowObjective { breakdown, grad_p1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::support_set::{Neighbor, NeighborOrder};

    fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalized(&v).unwrap()
    }

    fn neighbor_set(anchor: &[f64], members: &[Vec<f64>]) -> NeighborSet {
        NeighborSet {
            anchor: anchor.to_vec(),
            members: members
                .iter()
                .enumerate()
                .map(|(i, e)| Neighbor {
                    embedding: e.clone(),
                    similarity: dot(anchor, e),
                    support_index: i as u64,
                    label: None,
                })
                .collect(),
            order: NeighborOrder::CosineDesc,
            shortfall: false,
        }
    }

    #[test]
    fn wse_and_mse_weights() {
        assert_eq!(weights_wse(5), vec![1.0, 0.2, 0.2, 0.2, 0.2, 0.2]);
        assert_eq!(weights_wse(0), vec![1.0]);
        assert_eq!(weights_wse(1), vec![1.0, 1.0]);
        assert_eq!(weights_mse(5), vec![1.0 / 6.0; 6]);
        assert_eq!(weights_mse(0), vec![1.0]);
        for k in 0..=64 {
            let s: f64 = weights_mse(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cas_equal_logits_uniform() {
        let q = normalized(&[1.0, 1.0, 0.0]).unwrap();
        let nn = neighbor_set(&q, &[q.clone(), q.clone(), q.clone(), q.clone()]);
        let w = weights_cas(&nn, &q, &[1.0; 4]).unwrap();
        assert_eq!(w[0], 1.0);
        for wi in &w[1..] {
            assert!((wi - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn cas_two_neighbor_softmax() {
        let q = vec![1.0, 0.0];
        let nn = neighbor_set(&q, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let w = weights_cas(&nn, &q, &[1.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let expected = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];
        assert!((w[1] - expected[0]).abs() < 1e-15);
        assert!((w[2] - expected[1]).abs() < 1e-15);
        assert!((w[1] - 0.8808).abs() < 1e-4 && (w[2] - 0.1192).abs() < 1e-4);

        let halved = weights_cas(&nn, &q, &[2.0, 2.0]).unwrap();
        assert!((halved[1] - w[1] / 2.0).abs() < 1e-15);
        assert!((halved[2] - w[2] / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cas_errors() {
        let q = vec![1.0, 0.0];
        let empty = neighbor_set(&q, &[]);
        assert!(weights_cas(&empty, &q, &[]).is_err());
        let nn = neighbor_set(&q, &[vec![0.0, 1.0]]);
        assert!(weights_cas(&nn, &[2.0, 0.0], &[1.0]).is_err());
        assert!(weights_cas(&nn, &q, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cas_sums_to_one_with_unit_gamma() {
        let mut rng = rng_for(1, &[]);
        for _ in 0..50 {
            let q = unit(&mut rng, 6);
            let members: Vec<_> = (0..5).map(|_| unit(&mut rng, 6)).collect();
            let w = weights_cas(&neighbor_set(&q, &members), &q, &[1.0; 5]).unwrap();
            assert!((w[1..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let z = vec![1.0, 0.0];
        let nn = neighbor_set(&z, &[vec![0.0, 1.0]]);
        assert_eq!(mix_with(&z, &nn, Some(&Lambda::Shared(0.0))), vec![z.clone()]);
        assert_eq!(mix_with(&z, &nn, Some(&Lambda::Shared(1.0))), vec![vec![0.0, 1.0]]);
        assert_eq!(mix_with(&z, &nn, Some(&Lambda::Shared(0.5))), vec![vec![0.5, 0.5]]);
        assert_eq!(mix_with(&z, &nn, None), vec![vec![0.0, 1.0]]);
        let (off, l) = mix_neighbors(&z, &nn, &MixPolicy::OFF, 3);
        assert_eq!(off, vec![vec![0.0, 1.0]]);
        assert!(l.is_none());
    }

    #[test]
    fn per_neighbor_lambdas_are_independent() {
        let policy = MixPolicy {
            mode: MixMode::Uniform,
            granularity: Granularity::PerNeighbor,
        };
        let mut rng = rng_for(2, &[]);
        assert!(policy.draw_batch(&mut rng).is_none());
        match policy.lambda_for_row(4, None, &mut rng) {
            Some(Lambda::PerNeighbor(v)) => {
                assert_eq!(v.len(), 4);
                assert!(v.iter().all(|l| (0.0..1.0).contains(l)));
                assert_ne!(v[0], v[1]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(MixPolicy::fixed(1.5).validate().is_err());
    }

    #[test]
    fn byol_reduction() {
        let mut rng = rng_for(3, &[]);
        let p = unit(&mut rng, 8);
        assert_eq!(mnn_loss(&p, &p, &[], &[1.0]).unwrap().total, 0.0);
        let z = unit(&mut rng, 8);
        let l = mnn_loss(&p, &z, &[], &[1.0]).unwrap().total;
        assert!((l - (2.0 - 2.0 * dot(&p, &z))).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_recomputation() {
        let mut rng = rng_for(4, &[]);
        let (dim, k, lambda) = (8, 5, 0.37);
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = unit(&mut rng, dim);
        let members: Vec<_> = (0..k).map(|_| unit(&mut rng, dim)).collect();
        let nn = neighbor_set(&z, &members);
        let mixed = mix_with(&z, &nn, Some(&Lambda::Shared(lambda)));
        let w = weights_wse(k);
        let got = mnn_loss(&p, &z, &mixed, &w).unwrap();

        // naive: normalize, subtract, square, sum, one coordinate at a time
        let nrm = |v: &[f64]| {
            let mut s = 0.0;
            for x in v {
                s += x * x;
            }
            let s = s.sqrt();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let ph = nrm(&p);
        let mut targets = vec![nrm(&z)];
        for i in 0..k {
            let mut m = vec![0.0; dim];
            for c in 0..dim {
                m[c] = lambda * members[i][c] + (1.0 - lambda) * z[c];
            }
            targets.push(nrm(&m));
        }
        let mut expected = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let mut d = 0.0;
            for c in 0..dim {
                d += (ph[c] - t[c]) * (ph[c] - t[c]);
            }
            expected += w[i] * d;
        }
        assert!((got.total - expected).abs() < 1e-12);
        let recombined: f64 = got.weights_used[0] * got.positive_term
            + got.neighbor_terms.iter().zip(&got.weights_used[1..]).map(|(a, b)| a * b).sum::<f64>();
        assert!((recombined - got.total).abs() < 1e-12);
    }

    #[test]
    fn zero_mixed_vector_named() {
        let z = vec![1.0, 0.0];
        let mixed = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let err = mnn_loss(&[0.0, 1.0], &z, &mixed, &weights_wse(2)).unwrap_err();
        assert!(matches!(err, Error::ZeroMixedNeighbor { index: 1 }));
    }

    #[test]
    fn gradient_zero_at_minimum() {
        let z = normalized(&[0.3, -0.2, 0.9]).unwrap();
        let g = loss_gradient_p1(&z, &z, &[], &[1.0], TargetNorm::Normalize).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_for(5, &[]);
        for mode in [TargetNorm::Normalize, TargetNorm::Raw] {
            let dim = 8;
            let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = unit(&mut rng, dim);
            let members: Vec<_> = (0..4).map(|_| unit(&mut rng, dim)).collect();
            let mixed = mix_with(&z, &neighbor_set(&z, &members), Some(&Lambda::Shared(0.6)));
            let w = weights_wse(4);
            let g = loss_gradient_p1(&p, &z, &mixed, &w, mode).unwrap();
            let h = 1e-6;
            for c in 0..dim {
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[c] += h;
                dn[c] -= h;
                let fd = (evaluate_loss(&up, &z, &mixed, &w, mode).unwrap().total
                    - evaluate_loss(&dn, &z, &mixed, &w, mode).unwrap().total)
                    / (2.0 * h);
                let rel = (fd - g[c]).abs() / fd.abs().max(g[c].abs()).max(1e-8);
                assert!(rel <= 1e-5, "coordinate {c}: fd {fd} analytic {}", g[c]);
            }
        }
    }

    #[test]
    fn loss_is_scale_invariant_in_p1() {
        let mut rng = rng_for(6, &[]);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = unit(&mut rng, 8);
        let members: Vec<_> = (0..3).map(|_| unit(&mut rng, 8)).collect();
        let w = weights_wse(3);
        let a = mnn_loss(&p, &z, &members, &w).unwrap().total;
        let p2: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let b = mnn_loss(&p2, &z, &members, &w).unwrap().total;
        assert!((a - b).abs() < 1e-12);
        let g = loss_gradient_p1(&p, &z, &members, &w, TargetNorm::Normalize).unwrap();
        assert!(dot(&g, &p).abs() < 1e-9);
    }

    #[test]
    fn simplified_loss_endpoints() {
        let mut rng = rng_for(7, &[]);
        let p = unit(&mut rng, 6);
        let z = unit(&mut rng, 6);
        let nb: Vec<_> = (0..3).map(|_| unit(&mut rng, 6)).collect();
        let at0 = simplified_loss(&p, &z, &nb, 0.0).unwrap();
        assert!((at0 - 2.0 * sq_dist(&p, &z)).abs() < 1e-12);
        let at1 = simplified_loss(&p, &z, &nb, 1.0).unwrap();
        let unmixed = sq_dist(&p, &z) + nb.iter().map(|n| sq_dist(&p, n)).sum::<f64>() / 3.0;
        assert!((at1 - unmixed).abs() < 1e-12);
        assert!(simplified_loss(&p, &z, &[], 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn loss_permutation_equivariant(seed in 0u64..1000) {
            let mut rng = rng_for(seed, &[]);
            let p = unit(&mut rng, 5);
            let z = unit(&mut rng, 5);
            let nb: Vec<_> = (0..4).map(|_| unit(&mut rng, 5)).collect();
            let w = vec![1.0, 0.1, 0.2, 0.3, 0.4];
            let a = mnn_loss(&p, &z, &nb, &w).unwrap().total;
            let perm = [2usize, 0, 3, 1];
            let nb2: Vec<_> = perm.iter().map(|&i| nb[i].clone()).collect();
            let mut w2 = vec![1.0];
            w2.extend(perm.iter().map(|&i| w[i + 1]));
            let b = mnn_loss(&p, &z, &nb2, &w2).unwrap().total;
            proptest::prop_assert!((a - b).abs() <= 1e-15);
            proptest::prop_assert!(a.is_finite() && a >= 0.0);
        }
    }
}
