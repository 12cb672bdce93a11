//! Label-aware measurements of neighbor quality.
//!
//! None of these feed back into training; they read hidden labels that the
//! learner never sees.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::support_set::{NeighborOrder, NeighborSet};

/// Fraction of neighbors whose hidden label equals `anchor_label`.
pub fn purity(neighbors: &NeighborSet, anchor_label: usize) -> Result<f64> {
    if neighbors.k() == 0 {
        return Err(invalid("purity of an empty neighbor set"));
    }
    let mut hits = 0usize;
    for m in &neighbors.members {
        match m.label {
            Some(l) => hits += usize::from(l == anchor_label),
            None => {
                return Err(Error::MissingLabel(format!(
                    "neighbor {} carries no label",
                    m.support_index
                )))
            }
        }
    }
    Ok(hits as f64 / neighbors.k() as f64)
}

/// Shannon entropy (nats) of the weights after renormalisation.
pub fn weight_entropy(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(invalid("entropy of an empty weight vector"));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("weights are all zero"));
    }
    let h: f64 = weights
        .iter()
        .map(|w| w / total)
        .filter(|q| *q > 0.0)
        .map(|q| q * q.ln())
        .sum();
    // 0.0 - h rather than -h so a one-hot vector gives +0
    Ok(0.0 - h)
}

/// Fraction of positions at which the two orderings hold different members.
/// Members are compared by support index.
pub fn inconsistency(a: &NeighborSet, b: &NeighborSet) -> Result<f64> {
    let (ia, ib) = (a.indices(), b.indices());
    let mut sa = ia.clone();
    let mut sb = ib.clone();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb {
        return Err(invalid("neighbor sets hold different members"));
    }
    if ia.is_empty() {
        return Err(invalid("inconsistency of empty neighbor sets"));
    }
    let differ = ia.iter().zip(&ib).filter(|(x, y)| x != y).count();
    Ok(differ as f64 / ia.len() as f64)
}

/// Reorders `neighbors` by descending CAS weight. `cas_weights` is the full
/// `K+1` vector (index 0 is the positive). Equal weights keep their
/// original relative order.
pub fn cas_reorder(neighbors: &NeighborSet, cas_weights: &[f64]) -> Result<NeighborSet> {
    if cas_weights.len() != neighbors.k() + 1 {
        return Err(invalid("CAS weights do not match the neighbor count"));
    }
    let mut order: Vec<usize> = (0..neighbors.k()).collect();
    order.sort_by(|&i, &j| cas_weights[j + 1].total_cmp(&cas_weights[i + 1]));
    Ok(NeighborSet {
        anchor: neighbors.anchor.clone(),
        members: order.into_iter().map(|i| neighbors.members[i].clone()).collect(),
        order: NeighborOrder::CasDesc,
        shortfall: neighbors.shortfall,
    })
}

/// Per-position purity over a stream of `(neighbors, anchor_label)`.
pub fn positional_purity<'a, I>(records: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (&'a NeighborSet, usize)>,
{
    let mut hits: Vec<usize> = Vec::new();
    let mut count = 0usize;
    for (set, label) in records {
        if count == 0 {
            if set.k() == 0 {
                return Err(invalid("positional purity needs K >= 1"));
            }
            hits = vec![0; set.k()];
        } else if set.k() != hits.len() {
            return Err(invalid("inconsistent K across records"));
        }
        for (j, m) in set.members.iter().enumerate() {
            let l = m
                .label
                .ok_or_else(|| Error::MissingLabel(format!("neighbor {} carries no label", m.support_index)))?;
            hits[j] += usize::from(l == label);
        }
        count += 1;
    }
    if count == 0 {
        return Err(invalid("positional purity of an empty stream"));
    }
    Ok(hits.into_iter().map(|h| h as f64 / count as f64).collect())
}

/// One neighbor-quality measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityRecord {
    pub step: usize,
    pub k: usize,
    pub purity: f64,
    pub strategy: String,
    pub per_position: Vec<f64>,
}

/// Aggregated diagnostics for one probe pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub step: usize,
    pub k: usize,
    pub purity: f64,
    pub entropy_mean: f64,
    pub inconsistency_mean: f64,
    /// Per-position purity in the selection order.
    pub per_position: Vec<f64>,
    /// Per-position purity after CAS reordering.
    pub per_position_cas: Vec<f64>,
    /// Oracle selections that needed cosine padding.
    pub shortfalls: usize,
}

/// Accumulates per-anchor records into a [`DiagnosticsSummary`].
#[derive(Debug, Default)]
pub struct DiagnosticsAccumulator {
    selected: Vec<(NeighborSet, usize)>,
    reordered: Vec<(NeighborSet, usize)>,
    entropy_sum: f64,
    inconsistency_sum: f64,
    purity_sum: f64,
    shortfalls: usize,
}

impl DiagnosticsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one anchor: the selected neighbors and their CAS weights
    /// (`K+1` entries).
    pub fn push(&mut self, neighbors: NeighborSet, cas_weights: &[f64], anchor_label: usize) -> Result<()> {
        let reordered = cas_reorder(&neighbors, cas_weights)?;
        self.entropy_sum += weight_entropy(&cas_weights[1..])?;
        self.inconsistency_sum += inconsistency(&neighbors, &reordered)?;
        self.purity_sum += purity(&neighbors, anchor_label)?;
        self.shortfalls += usize::from(neighbors.shortfall);
        self.selected.push((neighbors, anchor_label));
        self.reordered.push((reordered, anchor_label));
        Ok(())
    }

    pub fn finish(self, step: usize) -> Result<DiagnosticsSummary> {
        let n = self.selected.len();
        if n == 0 {
            return Err(invalid("no diagnostics records"));
        }
        let k = self.selected[0].0.k();
        Ok(DiagnosticsSummary {
            step,
            k,
            purity: self.purity_sum / n as f64,
            entropy_mean: self.entropy_sum / n as f64,
            inconsistency_mean: self.inconsistency_sum / n as f64,
            per_position: positional_purity(self.selected.iter().map(|(s, l)| (s, *l)))?,
            per_position_cas: positional_purity(self.reordered.iter().map(|(s, l)| (s, *l)))?,
            shortfalls: self.shortfalls,
        })
    }
}

/// Writes diagnostics rows: `step, k, purity, entropy_mean,
/// inconsistency_mean, pos_1 … pos_K`.
pub fn write_diagnostics_csv<W: std::io::Write>(out: W, rows: &[DiagnosticsSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = rows.first().map(|r| r.k).unwrap_or(0);
    let mut header = vec![
        "step".to_string(),
        "k".into(),
        "purity".into(),
        "entropy_mean".into(),
        "inconsistency_mean".into(),
    ];
    header.extend((1..=k).map(|j| format!("pos_{j}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.k.to_string(),
            r.purity.to_string(),
            r.entropy_mean.to_string(),
            r.inconsistency_mean.to_string(),
        ];
        rec.extend(r.per_position.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::support_set::Neighbor;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn set_with(labels: &[usize], indices: &[u64]) -> NeighborSet {
        NeighborSet {
            anchor: vec![1.0],
            members: labels
                .iter()
                .zip(indices)
                .map(|(&l, &i)| Neighbor {
                    embedding: vec![1.0],
                    similarity: 1.0,
                    support_index: i,
                    label: Some(l),
                })
                .collect(),
            order: NeighborOrder::CosineDesc,
            shortfall: false,
        }
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&set_with(&[3, 3, 3], &[0, 1, 2]), 3).unwrap(), 1.0);
        assert_eq!(purity(&set_with(&[1, 2], &[0, 1]), 3).unwrap(), 0.0);
        assert_eq!(purity(&set_with(&[1, 0, 1, 2, 1], &[0, 1, 2, 3, 4]), 1).unwrap(), 0.6);
        let mut missing = set_with(&[1], &[0]);
        missing.members[0].label = None;
        assert!(matches!(purity(&missing, 1), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn entropy_examples() {
        assert!((weight_entropy(&[0.2; 5]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(weight_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = weight_entropy(&[0.8808, 0.1192]).unwrap();
        let q = [0.8808f64, 0.1192];
        let direct = -(q[0] * q[0].ln() + q[1] * q[1].ln());
        assert!((h - direct).abs() < 1e-12);
        assert!((h - 0.36533).abs() < 1e-5);
        assert!(weight_entropy(&[0.5, -0.1]).is_err());
        assert!(weight_entropy(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn inconsistency_examples() {
        let a = set_with(&[0; 5], &[10, 11, 12, 13, 14]);
        assert_eq!(inconsistency(&a, &a).unwrap(), 0.0);
        let swapped = set_with(&[0; 2], &[2, 1]);
        assert_eq!(inconsistency(&set_with(&[0; 2], &[1, 2]), &swapped).unwrap(), 1.0);
        let one_transposition = set_with(&[0; 5], &[10, 12, 11, 13, 14]);
        assert_eq!(inconsistency(&a, &one_transposition).unwrap(), 0.4);
        assert!(inconsistency(&a, &set_with(&[0; 5], &[10, 11, 12, 13, 99])).is_err());
    }

    #[test]
    fn positional_examples() {
        let s = set_with(&[4, 4, 4], &[0, 1, 2]);
        assert_eq!(positional_purity([(&s, 4)]).unwrap(), vec![1.0; 3]);
        let a = set_with(&[1, 0], &[0, 1]);
        let b = set_with(&[0, 0], &[0, 1]);
        assert_eq!(positional_purity([(&a, 1), (&b, 1)]).unwrap()[0], 0.5);
        assert!(positional_purity(std::iter::empty()).is_err());
        let c = set_with(&[0], &[0]);
        assert!(positional_purity([(&a, 1), (&c, 1)]).is_err());
    }

    #[test]
    fn positional_mean_equals_aggregate_purity() {
        let mut rng = rng_for(1, &[]);
        let k = 5;
        let sets: Vec<(NeighborSet, usize)> = (0..1000)
            .map(|_| {
                let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..4)).collect();
                (set_with(&labels, &[0, 1, 2, 3, 4]), rng.random_range(0..4))
            })
            .collect();
        let pos = positional_purity(sets.iter().map(|(s, l)| (s, *l))).unwrap();
        let mean_pos = pos.iter().sum::<f64>() / k as f64;
        let aggregate =
            sets.iter().map(|(s, l)| purity(s, *l).unwrap()).sum::<f64>() / sets.len() as f64;
        assert!((mean_pos - aggregate).abs() < 1e-12);
    }

    #[test]
    fn cas_reorder_preserves_members() {
        let s = set_with(&[0, 1, 2], &[5, 6, 7]);
        let r = cas_reorder(&s, &[1.0, 0.1, 0.7, 0.2]).unwrap();
        assert_eq!(r.indices(), vec![6, 7, 5]);
        assert_eq!(purity(&s, 1).unwrap(), purity(&r, 1).unwrap());
        assert_eq!(r.order, NeighborOrder::CasDesc);
    }

    #[test]
    fn accumulator_summary() {
        let mut acc = DiagnosticsAccumulator::new();
        acc.push(set_with(&[1, 1], &[0, 1]), &[1.0, 0.5, 0.5], 1).unwrap();
        acc.push(set_with(&[1, 0], &[2, 3]), &[1.0, 0.2, 0.8], 1).unwrap();
        let s = acc.finish(7).unwrap();
        assert_eq!(s.purity, 0.75);
        assert_eq!(s.per_position, vec![1.0, 0.5]);
        assert_eq!(s.per_position_cas, vec![0.5, 1.0]);
        assert_eq!(s.inconsistency_mean, 0.5);
        assert!((s.entropy_mean - (2f64.ln() + weight_entropy(&[0.2, 0.8]).unwrap()) / 2.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn inconsistency_symmetric(seed in 0u64..1000, k in 1usize..10) {
            let mut rng = rng_for(seed, &[]);
            let mut idx: Vec<u64> = (0..k as u64).collect();
            let a = set_with(&vec![0; k], &idx);
            idx.shuffle(&mut rng);
            let b = set_with(&vec![0; k], &idx);
            proptest::prop_assert_eq!(inconsistency(&a, &b).unwrap(), inconsistency(&b, &a).unwrap());
        }

        #[test]
        fn entropy_bounded_by_log_k(w in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            proptest::prop_assume!(w.iter().sum::<f64>() > 1e-9);
            let h = weight_entropy(&w).unwrap();
            proptest::prop_assert!(h <= (w.len() as f64).ln() + 1e-12);
            proptest::prop_assert!(h >= 0.0);
        }

        #[test]
        fn purity_permutation_invariant(seed in 0u64..1000) {
            let mut rng = rng_for(seed, &[]);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let a = set_with(&labels, &[0, 1, 2, 3, 4, 5]);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let pi: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
            let b = set_with(&pl, &pi);
            proptest::prop_assert_eq!(purity(&a, 1).unwrap(), purity(&b, 1).unwrap());
        }
    }
}
