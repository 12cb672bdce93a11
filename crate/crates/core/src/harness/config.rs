//! Run configuration and the method table.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evaluation::ProbeConfig;
use crate::exec::Execution;
use crate::harness::dataset::DatasetSpec;
use crate::model::{scaled_base_lr, Architecture, AugmentPolicy};
use crate::objective::{MixPolicy, WeightScheme};

/// How neighbors are picked from the support set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Top-K by cosine similarity.
    Cosine,
    /// K uniform draws without replacement.
    Random,
    /// K uniform draws among entries sharing the anchor's hidden label.
    Oracle,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Cosine => "cosine",
            Selection::Random => "random",
            Selection::Oracle => "oracle",
        }
    }
}

/// Training method tags.
///
/// | tag              | weights | mixing | selection | K          |
/// |------------------|---------|--------|-----------|------------|
/// | `mnn`            | WSE     | on     | cosine    | config     |
/// | `msf`            | MSE     | off    | cosine    | config     |
/// | `byol`           | WSE     | off    | cosine    | forced 0   |
/// | `mnn_cas`        | CAS     | on     | cosine    | config     |
/// | `mnn_random`     | WSE     | on     | random    | config     |
/// | `mnn_oracle`     | WSE     | on     | oracle    | config     |
/// | `mnn_no_mix`     | WSE     | off    | cosine    | config     |
/// | `msf_mix`        | MSE     | on     | cosine    | config     |
/// | `mnn_cas_no_mix` | CAS     | off    | cosine    | config     |
///
/// "on" uses the run's [`MixPolicy`]; "off" ignores it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mnn,
    Msf,
    Byol,
    MnnCas,
    MnnRandom,
    MnnOracle,
    MnnNoMix,
    MsfMix,
    MnnCasNoMix,
}

/// What a method tag resolves to.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub scheme: WeightScheme,
    pub mixing: bool,
    pub selection: Selection,
    pub force_k_zero: bool,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Mnn,
        Method::Msf,
        Method::Byol,
        Method::MnnCas,
        Method::MnnRandom,
        Method::MnnOracle,
        Method::MnnNoMix,
        Method::MsfMix,
        Method::MnnCasNoMix,
    ];

    pub fn spec(self) -> MethodSpec {
        use Selection::*;
        let (scheme, mixing, selection) = match self {
            Method::Mnn => (WeightScheme::Wse, true, Cosine),
            Method::Msf => (WeightScheme::Mse, false, Cosine),
            Method::Byol => (WeightScheme::Wse, false, Cosine),
            Method::MnnCas => (WeightScheme::cas(), true, Cosine),
            Method::MnnRandom => (WeightScheme::Wse, true, Random),
            Method::MnnOracle => (WeightScheme::Wse, true, Oracle),
            Method::MnnNoMix => (WeightScheme::Wse, false, Cosine),
            Method::MsfMix => (WeightScheme::Mse, true, Cosine),
            Method::MnnCasNoMix => (WeightScheme::cas(), false, Cosine),
        };
        MethodSpec {
            scheme,
            mixing,
            selection,
            force_k_zero: self == Method::Byol,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mnn => "mnn",
            Method::Msf => "msf",
            Method::Byol => "byol",
            Method::MnnCas => "mnn_cas",
            Method::MnnRandom => "mnn_random",
            Method::MnnOracle => "mnn_oracle",
            Method::MnnNoMix => "mnn_no_mix",
            Method::MsfMix => "msf_mix",
            Method::MnnCasNoMix => "mnn_cas_no_mix",
        }
    }

    /// The method with the same weights and mixing but another selection.
    pub fn with_selection(self, selection: Selection) -> Result<Method> {
        let spec = self.spec();
        Method::ALL
            .into_iter()
            .find(|m| {
                let s = m.spec();
                s.scheme == spec.scheme && s.mixing == spec.mixing && s.selection == selection && !s.force_k_zero
            })
            .ok_or_else(|| invalid(format!("no {} variant of {}", selection.name(), self)))
    }

    /// The method with the same mixing and selection but other weights.
    pub fn with_scheme(self, scheme: &WeightScheme) -> Result<Method> {
        let spec = self.spec();
        Method::ALL
            .into_iter()
            .find(|m| {
                let s = m.spec();
                s.scheme.name() == scheme.name() && s.mixing == spec.mixing && s.selection == spec.selection && !s.force_k_zero
            })
            .ok_or_else(|| invalid(format!("no {} variant of {}", scheme.name(), self)))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Augmentations for the student (`x¹`) and teacher (`x²`) views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPair {
    pub student: AugmentPolicy,
    pub teacher: AugmentPolicy,
}

impl Default for AugmentPair {
    fn default() -> Self {
        Self {
            student: AugmentPolicy::strong(),
            teacher: AugmentPolicy::weak(),
        }
    }
}

impl AugmentPair {
    /// Parses `s/w`, `s/s`, `w/w` or `w/s` (student/teacher).
    pub fn parse(s: &str) -> Result<Self> {
        let pick = |c: &str| match c {
            "s" | "strong" => Ok(AugmentPolicy::strong()),
            "w" | "weak" => Ok(AugmentPolicy::weak()),
            _ => Err(invalid(format!("unknown augmentation strength {c:?}"))),
        };
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| invalid(format!("augmentation pair {s:?} is not of the form s/w")))?;
        Ok(Self {
            student: pick(a)?,
            teacher: pick(b)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_eval: usize,
    pub probe: ProbeConfig,
    /// Skip the linear probe (KNN only).
    pub skip_probe: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_eval: 20,
            probe: ProbeConfig::default(),
            skip_probe: false,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    pub method: Method,
    pub k: usize,
    pub support_capacity: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Teacher EMA coefficient.
    pub momentum: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub mix: MixPolicy,
    pub augment: AugmentPair,
    pub symmetric_loss: bool,
    pub eval: EvalConfig,
    pub seed: u64,
    pub execution: Execution,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        Self {
            architecture: Architecture::reference(dataset.ambient_dim),
            dataset,
            method: Method::Mnn,
            k: 5,
            support_capacity: 1024,
            batch_size: 128,
            epochs: 50,
            warmup_epochs: 5,
            momentum: 0.99,
            base_lr: scaled_base_lr(128),
            weight_decay: 5e-4,
            sgd_momentum: 0.9,
            mix: MixPolicy::uniform(),
            augment: AugmentPair::default(),
            symmetric_loss: true,
            eval: EvalConfig::default(),
            seed: 1,
            execution: Execution::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.architecture.input_dim != self.dataset.ambient_dim {
            return Err(invalid(format!(
                "architecture input {} differs from ambient dimension {}",
                self.architecture.input_dim, self.dataset.ambient_dim
            )));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset.n_train {
            return Err(invalid("batch size must be in 1..=n_train"));
        }
        if self.support_capacity < self.batch_size {
            return Err(invalid(format!(
                "support capacity {} is below the batch size {}",
                self.support_capacity, self.batch_size
            )));
        }
        if self.k >= self.support_capacity {
            return Err(invalid(format!(
                "K = {} must be below the support capacity {}",
                self.k, self.support_capacity
            )));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(invalid("need epochs > warmup_epochs"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid("teacher momentum must lie in [0, 1]"));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(invalid("invalid optimizer settings"));
        }
        if self.eval.k_eval == 0 {
            return Err(invalid("k_eval must be positive"));
        }
        self.mix.validate()?;
        self.augment.student.validate()?;
        self.augment.teacher.validate()?;
        Ok(())
    }

    /// Neighbors used per anchor after the method table is applied.
    pub fn effective_k(&self) -> usize {
        if self.method.spec().force_k_zero {
            0
        } else {
            self.k
        }
    }

    /// The mixing actually applied.
    pub fn effective_mix(&self) -> MixPolicy {
        if self.method.spec().mixing {
            self.mix
        } else {
            MixPolicy::OFF
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset.n_train / self.batch_size
    }

    /// Deterministic identifier: method, K, seed and a hash of the config.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.execution = Execution::default();
        let json = serde_json::to_vec(&c).unwrap_or_default();
        // FNV-1a
        let h = json
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3));
        format!("{}_k{}_s{}_{:08x}", self.method, self.effective_k(), self.seed, h as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::MixMode;

    #[test]
    fn method_table_is_exhaustive_and_unique() {
        let mut seen = Vec::new();
        for m in Method::ALL {
            let s = m.spec();
            let key = (s.scheme.name(), s.mixing, s.selection, s.force_k_zero);
            assert!(!seen.contains(&key), "{m} duplicates another tag");
            seen.push(key);
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!(seen.len(), Method::ALL.len());
        assert!("mixup".parse::<Method>().is_err());
    }

    #[test]
    fn method_table_rows() {
        let m = Method::Mnn.spec();
        assert_eq!((m.scheme, m.mixing, m.selection), (WeightScheme::Wse, true, Selection::Cosine));
        let m = Method::Msf.spec();
        assert_eq!((m.scheme, m.mixing, m.selection), (WeightScheme::Mse, false, Selection::Cosine));
        assert!(Method::Byol.spec().force_k_zero);
        assert_eq!(Method::MnnCas.spec().scheme, WeightScheme::cas());
        assert_eq!(Method::MnnRandom.spec().selection, Selection::Random);
        assert_eq!(Method::MnnOracle.spec().selection, Selection::Oracle);
        assert!(!Method::MnnNoMix.spec().mixing);
    }

    #[test]
    fn variants() {
        assert_eq!(Method::Mnn.with_selection(Selection::Oracle).unwrap(), Method::MnnOracle);
        assert_eq!(Method::Mnn.with_scheme(&WeightScheme::Mse).unwrap(), Method::MsfMix);
        assert_eq!(Method::MnnNoMix.with_scheme(&WeightScheme::Mse).unwrap(), Method::Msf);
        assert_eq!(Method::MnnNoMix.with_scheme(&WeightScheme::cas()).unwrap(), Method::MnnCasNoMix);
        assert!(Method::Msf.with_selection(Selection::Random).is_err());
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.base_lr, 0.03);
        assert_eq!(c.steps_per_epoch(), 39);
        assert_eq!(c.effective_mix().mode, MixMode::Uniform);
        let byol = RunConfig { method: Method::Byol, ..c.clone() };
        assert_eq!(byol.effective_k(), 0);
        assert!(byol.effective_mix().is_off());
    }

    #[test]
    fn invalid_configs() {
        let c = RunConfig::default();
        assert!(RunConfig { support_capacity: 64, ..c.clone() }.validate().is_err());
        assert!(RunConfig { k: 1024, ..c.clone() }.validate().is_err());
        assert!(RunConfig { momentum: 1.5, ..c.clone() }.validate().is_err());
        assert!(RunConfig { mix: MixPolicy::fixed(2.0), ..c }.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"method": "msf", "k": 3}"#).unwrap();
        assert_eq!(c.method, Method::Msf);
        assert_eq!(c.k, 3);
        assert_eq!(c.batch_size, 128);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn run_id_is_stable_and_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: Some("x".into()), ..a.clone() };
        assert_eq!(a.run_id(), b.run_id());
        assert_ne!(a.run_id(), RunConfig { seed: 2, ..a.clone() }.run_id());
    }

    #[test]
    fn augment_pairs() {
        let p = AugmentPair::parse("w/s").unwrap();
        assert_eq!(p.student, AugmentPolicy::weak());
        assert_eq!(p.teacher, AugmentPolicy::strong());
        assert!(AugmentPair::parse("ws").is_err());
    }
}
