//! One-axis ablation sweeps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::harness::config::{AugmentPair, RunConfig, Selection};
use crate::harness::manifest::RunManifest;
use crate::harness::svg::{document, line_panel, Frame, Series};
use crate::harness::train::train;
use crate::objective::{MixPolicy, WeightScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    K,
    SupportSize,
    Augmentation,
    Strategy,
    Lambda,
    WeightScheme,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::SupportSize => "support_size",
            Axis::Augmentation => "augmentation",
            Axis::Strategy => "strategy",
            Axis::Lambda => "lambda",
            Axis::WeightScheme => "weight_scheme",
        }
    }

    /// `base` with the axis set to `value`.
    ///
    /// Values: `k` and `support_size` take integers, `augmentation` takes
    /// `s/w`-style pairs, `strategy` takes `cosine|random|oracle`, `lambda`
    /// takes a number in `[0, 1]` or `uniform`, and `weight_scheme` takes
    /// `wse|mse|cas`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        let int = || value.parse::<usize>().map_err(|_| invalid(format!("{value:?} is not an integer")));
        match self {
            Axis::K => c.k = int()?,
            Axis::SupportSize => c.support_capacity = int()?,
            Axis::Augmentation => c.augment = AugmentPair::parse(value)?,
            Axis::Strategy => {
                let s = match value {
                    "cosine" => Selection::Cosine,
                    "random" => Selection::Random,
                    "oracle" => Selection::Oracle,
                    _ => return Err(invalid(format!("unknown strategy {value:?}"))),
                };
                c.method = c.method.with_selection(s)?;
            }
            Axis::Lambda => {
                c.mix = if value == "uniform" {
                    MixPolicy { granularity: c.mix.granularity, ..MixPolicy::uniform() }
                } else {
                    let l: f64 = value.parse().map_err(|_| invalid(format!("{value:?} is not a number")))?;
                    MixPolicy { granularity: c.mix.granularity, ..MixPolicy::fixed(l) }
                };
            }
            Axis::WeightScheme => {
                let s = match value {
                    "wse" => WeightScheme::Wse,
                    "mse" => WeightScheme::Mse,
                    "cas" => WeightScheme::cas(),
                    _ => return Err(invalid(format!("unknown weight scheme {value:?}"))),
                };
                c.method = c.method.with_scheme(&s)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Axis::K, Axis::SupportSize, Axis::Augmentation, Axis::Strategy, Axis::Lambda, Axis::WeightScheme]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub run_id: String,
    pub knn_acc: f64,
    pub probe_acc: Option<f64>,
    pub purity: Option<f64>,
    pub final_loss: f64,
}

impl SweepPoint {
    fn from_manifest(axis: Axis, value: &str, m: &RunManifest) -> Self {
        let last = m.epochs.last();
        Self {
            axis: axis.name().to_string(),
            value: value.to_string(),
            seed: m.config.seed,
            run_id: m.run_id.clone(),
            knn_acc: m.final_eval.knn_acc,
            probe_acc: m.final_eval.probe_acc,
            purity: last.and_then(|e| e.purity),
            final_loss: last.map_or(f64::NAN, |e| e.loss_mean),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
    pub manifests: Vec<RunManifest>,
}

impl SweepResult {
    /// Mean of `f` over seeds, per axis value, in sweep order.
    pub fn means(&self, f: impl Fn(&SweepPoint) -> Option<f64>) -> Vec<(String, Option<f64>)> {
        let mut values: Vec<&str> = Vec::new();
        for p in &self.points {
            if !values.contains(&p.value.as_str()) {
                values.push(&p.value);
            }
        }
        values
            .into_iter()
            .map(|v| {
                let xs: Option<Vec<f64>> = self.points.iter().filter(|p| p.value == v).map(&f).collect();
                let mean = xs.filter(|x| !x.is_empty()).map(|x| x.iter().sum::<f64>() / x.len() as f64);
                (v.to_string(), mean)
            })
            .collect()
    }
}

fn write_outputs(result: &SweepResult, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    for p in &result.points {
        w.serialize(p)?;
    }
    w.flush()?;
    let numeric: Option<Vec<f64>> = result.means(|_| Some(0.0)).iter().map(|(v, _)| v.parse().ok()).collect();
    let series = |name: &str, f: &dyn Fn(&SweepPoint) -> Option<f64>| -> Series {
        Series {
            name: name.to_string(),
            points: result
                .means(f)
                .into_iter()
                .enumerate()
                .filter_map(|(i, (_, m))| m.map(|m| (numeric.as_ref().map_or(i as f64, |n| n[i]), m)))
                .collect(),
        }
    };
    let mut body = String::new();
    let (w, h) = (420.0, 300.0);
    let title = format!("accuracy vs {}", result.axis);
    line_panel(
        &mut body,
        Frame { x: 0.0, y: 0.0, w, h },
        &title,
        &[series("knn", &|p| Some(p.knn_acc)), series("probe", &|p| p.probe_acc)],
    );
    let title = format!("purity vs {}", result.axis);
    line_panel(&mut body, Frame { x: w, y: 0.0, w, h }, &title, &[series("purity", &|p| p.purity)]);
    fs::write(dir.join("comparison.svg"), document(2.0 * w, h, &body))?;
    Ok(())
}

/// Trains every `(value, seed)` pair with `train_fn`. Each finished run's
/// manifest is written under `out_dir/runs/` immediately; if a run fails,
/// the comparison files are written for the runs that finished and the
/// error is returned.
pub fn sweep_with<F>(
    axis: Axis,
    values: &[String],
    base: &RunConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    mut train_fn: F,
) -> Result<SweepResult>
where
    F: FnMut(&RunConfig) -> Result<RunManifest>,
{
    if values.is_empty() || seeds.is_empty() {
        return Err(invalid("a sweep needs at least one value and one seed"));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d.join("runs"))?;
    }
    let mut result = SweepResult {
        axis,
        points: Vec::new(),
        manifests: Vec::new(),
    };
    for (value, config) in values.iter().zip(&configs) {
        for &seed in seeds {
            let c = RunConfig { seed, ..config.clone() };
            match train_fn(&c) {
                Ok(m) => {
                    if let Some(d) = out_dir {
                        m.save(&d.join("runs").join(format!("{}.json", m.run_id)))?;
                    }
                    result.points.push(SweepPoint::from_manifest(axis, value, &m));
                    result.manifests.push(m);
                }
                Err(e) => {
                    if let Some(d) = out_dir {
                        write_outputs(&result, d)?;
                    }
                    return Err(e);
                }
            }
        }
    }
    if let Some(d) = out_dir {
        write_outputs(&result, d)?;
    }
    Ok(result)
}

pub fn sweep(axis: Axis, values: &[String], base: &RunConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<SweepResult> {
    sweep_with(axis, values, base, seeds, out_dir, |c| train(c).map(|o| o.manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Method;
    use crate::objective::MixMode;

    #[test]
    fn axes_parse_and_apply() {
        let base = RunConfig::default();
        assert_eq!("support_size".parse::<Axis>().unwrap(), Axis::SupportSize);
        assert!("depth".parse::<Axis>().is_err());
        assert_eq!(Axis::K.apply(&base, "10").unwrap().k, 10);
        assert_eq!(Axis::SupportSize.apply(&base, "2048").unwrap().support_capacity, 2048);
        assert!(Axis::SupportSize.apply(&base, "64").is_err());
        assert_eq!(Axis::Strategy.apply(&base, "random").unwrap().method, Method::MnnRandom);
        assert_eq!(Axis::Lambda.apply(&base, "0.3").unwrap().mix.mode, MixMode::Fixed(0.3));
        assert!(Axis::Lambda.apply(&base, "1.3").is_err());
        assert_eq!(Axis::WeightScheme.apply(&base, "cas").unwrap().method, Method::MnnCas);
        assert!(Axis::Augmentation.apply(&base, "x/w").is_err());
    }

    #[test]
    fn failure_keeps_partial_results() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<String> = ["1", "5"].iter().map(|s| s.to_string()).collect();
        let mut calls = 0;
        let err = sweep_with(Axis::K, &values, &RunConfig::default(), &[1, 2], Some(dir.path()), |c| {
            calls += 1;
            if calls == 3 {
                return Err(invalid("boom"));
            }
            Ok(fake_manifest(c))
        });
        assert!(err.is_err());
        let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 2);
    }

    #[test]
    fn single_value_is_one_run() {
        let r = sweep_with(Axis::K, &["5".to_string()], &RunConfig::default(), &[1], None, |c| Ok(fake_manifest(c))).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!(r.means(|p| Some(p.knn_acc)), vec![("5".to_string(), Some(0.5))]);
    }

    fn fake_manifest(c: &RunConfig) -> RunManifest {
        use crate::harness::manifest::*;
        let eval = EvalReport {
            knn_acc: 0.5,
            probe_acc: None,
            probe_train_acc: None,
            probe_final_loss: None,
        };
        RunManifest {
            version: MANIFEST_VERSION,
            run_id: c.run_id(),
            config: c.clone(),
            epochs: Vec::new(),
            step_losses: Vec::new(),
            step_lrs: Vec::new(),
            raw_input_knn: 0.0,
            baseline: eval.clone(),
            final_eval: eval,
            evaluations: Vec::new(),
            wall_clock_secs: 0.0,
            build: BuildStamp::current(),
        }
    }
}
