//! Fully connected networks with a hand-written backward pass.
//!
//! Parameters live in one flat buffer so that SGD, EMA and checkpointing are
//! plain slice operations. Each layer is `affine → [norm] → [relu]`.
//! Normalization has no learnable scale or shift. Layer norm works per row;
//! batch norm uses the statistics of the current batch, so layers with it
//! only run through [`Mlp::forward_batch`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::vecmath::dot;

const NORM_EPS: f64 = 1e-5;
/// Rows per partial parameter-gradient sum in the batch backward pass.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    None,
    /// Across the features of one row.
    Layer,
    /// Across the rows of a batch, per feature.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub norm: Norm,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            norm: Norm::None,
            activation: Activation::None,
        }
    }

    pub fn relu(mut self) -> Self {
        self.activation = Activation::Relu;
        self
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    fn n_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Borrowed view of one layer's parameters.
pub struct LayerView<'a> {
    pub spec: LayerSpec,
    /// Row-major `output × input`.
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    #[serde(default)]
    generation: u64,
}

#[derive(Clone, Debug)]
struct LayerTape {
    input: Vec<f64>,
    /// Normalized pre-activation (or the affine output when not normalized).
    normed: Vec<f64>,
    inv_std: f64,
}

/// Everything needed to run the backward pass for one forward call.
#[derive(Clone, Debug)]
pub struct Tape {
    layers: Vec<LayerTape>,
    generation: u64,
}

/// Parameter gradient (same layout as [`Mlp::params`]) and input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl Mlp {
    /// Builds a network with all-zero parameters.
    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].output != w[1].input {
                return Err(invalid(format!(
                    "layer output {} does not feed next input {}",
                    w[0].output, w[1].input
                )));
            }
        }
        if layers.iter().any(|l| l.input == 0 || l.output == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.n_params();
        }
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
            generation: 0,
        })
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        for li in 0..net.layers.len() {
            let bound = 1.0 / (net.layers[li].input as f64).sqrt();
            let (start, end) = net.range(li);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    fn range(&self, li: usize) -> (usize, usize) {
        (self.offsets[li], self.offsets[li] + self.layers[li].n_params())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, li: usize) -> LayerView<'_> {
        let spec = self.layers[li];
        let start = self.offsets[li];
        let wlen = spec.input * spec.output;
        LayerView {
            spec,
            weight: &self.params[start..start + wlen],
            bias: &self.params[start + wlen..start + wlen + spec.output],
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers == other.layers
    }

    /// Forward pass that skips recording.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.run(x, None)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let mut tape = Tape {
            layers: Vec::with_capacity(self.layers.len()),
            generation: self.generation,
        };
        let out = self.run(x, Some(&mut tape))?;
        Ok((out, tape))
    }

    fn run(&self, x: &[f64], mut tape: Option<&mut Tape>) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h = x.to_vec();
        for li in 0..self.layers.len() {
            let view = self.layer(li);
            let spec = view.spec;
            let mut a = affine(&view, &h);
            let mut inv_std = 1.0;
            if spec.norm == Norm::Batch {
                return Err(invalid("batch normalization needs a batch; use forward_batch"));
            }
            if spec.norm == Norm::Layer {
                inv_std = layer_norm(&mut a);
            }
            let mut out = a.clone();
            if spec.activation == Activation::Relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(LayerTape {
                    input: std::mem::take(&mut h),
                    normed: a,
                    inv_std,
                });
            }
            h = out;
        }
        Ok(h)
    }

    /// Reverse pass; returns fresh gradient buffers.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_into(tape, grad_out, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Reverse pass that adds parameter gradients into `acc` and returns the
    /// input gradient.
    pub fn backward_into(&self, tape: &Tape, grad_out: &[f64], acc: &mut [f64]) -> Result<Vec<f64>> {
        if tape.generation != self.generation || tape.layers.len() != self.layers.len() {
            return Err(Error::StaleTape {
                tape: tape.generation,
                network: self.generation,
            });
        }
        if grad_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: grad_out.len(),
            });
        }
        if acc.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: acc.len(),
            });
        }
        let mut g = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let view = self.layer(li);
            let spec = view.spec;
            let lt = &tape.layers[li];
            if spec.activation == Activation::Relu {
                for (gi, n) in g.iter_mut().zip(&lt.normed) {
                    if *n <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            if spec.norm == Norm::Layer {
                layer_norm_backward(&mut g, &lt.normed, lt.inv_std);
            }
            let (start, end) = self.range(li);
            accumulate_affine_grad(spec, &g, &lt.input, &mut acc[start..end]);
            g = affine_input_grad(&view, &g);
        }
        Ok(g)
    }

    fn check_batch(&self, xs: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(invalid("empty batch"));
        }
        for x in xs {
            if x.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim(),
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    /// Batch forward pass without recording.
    pub fn predict_batch(&self, xs: &[Vec<f64>], exec: Execution) -> Result<Vec<Vec<f64>>> {
        self.check_batch(xs)?;
        Ok(self.run_batch(xs.to_vec(), exec, None))
    }

    /// Forward pass over a batch of rows. Batch-norm layers use the
    /// statistics of this batch.
    pub fn forward_batch(&self, xs: &[Vec<f64>], exec: Execution) -> Result<(Vec<Vec<f64>>, BatchTape)> {
        self.check_batch(xs)?;
        let mut tape = BatchTape {
            layers: Vec::with_capacity(self.layers.len()),
            generation: self.generation,
            rows: xs.len(),
        };
        let out = self.run_batch(xs.to_vec(), exec, Some(&mut tape));
        Ok((out, tape))
    }

    fn run_batch(&self, mut h: Vec<Vec<f64>>, exec: Execution, mut tape: Option<&mut BatchTape>) -> Vec<Vec<f64>> {
        let n = h.len();
        for li in 0..self.layers.len() {
            let view = self.layer(li);
            let spec = view.spec;
            let mut a = exec.map(n, |r| affine(&view, &h[r]));
            let inv_std = match spec.norm {
                Norm::None => Vec::new(),
                Norm::Layer => a.iter_mut().map(|row| layer_norm(row)).collect(),
                Norm::Batch => batch_norm(&mut a),
            };
            let out: Vec<Vec<f64>> = if spec.activation == Activation::Relu {
                a.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect()
            } else {
                a.clone()
            };
            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(BatchLayerTape {
                    input: std::mem::take(&mut h),
                    normed: a,
                    inv_std,
                });
            }
            h = out;
        }
        h
    }

    /// Batch reverse pass: adds the parameter gradients summed over rows into
    /// `acc` and returns the per-row input gradients.
    pub fn backward_batch(
        &self,
        tape: &BatchTape,
        grads_out: &[Vec<f64>],
        acc: &mut [f64],
        exec: Execution,
    ) -> Result<Vec<Vec<f64>>> {
        if tape.generation != self.generation || tape.layers.len() != self.layers.len() {
            return Err(Error::StaleTape {
                tape: tape.generation,
                network: self.generation,
            });
        }
        if grads_out.len() != tape.rows {
            return Err(invalid(format!("{} output gradients for {} rows", grads_out.len(), tape.rows)));
        }
        if let Some(g) = grads_out.iter().find(|g| g.len() != self.output_dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: g.len(),
            });
        }
        if acc.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: acc.len(),
            });
        }
        let n = tape.rows;
        let mut g = grads_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let view = self.layer(li);
            let spec = view.spec;
            let lt = &tape.layers[li];
            if spec.activation == Activation::Relu {
                for (gr, nr) in g.iter_mut().zip(&lt.normed) {
                    for (gi, ni) in gr.iter_mut().zip(nr) {
                        if *ni <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
            }
            match spec.norm {
                Norm::None => {}
                Norm::Layer => {
                    for ((gr, nr), s) in g.iter_mut().zip(&lt.normed).zip(&lt.inv_std) {
                        layer_norm_backward(gr, nr, *s);
                    }
                }
                Norm::Batch => batch_norm_backward(&mut g, &lt.normed, &lt.inv_std),
            }
            let (start, end) = self.range(li);
            let partials = exec.map(n.div_ceil(GRAD_CHUNK), |c| {
                let mut part = vec![0.0; end - start];
                for r in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
                    accumulate_affine_grad(spec, &g[r], &lt.input[r], &mut part);
                }
                part
            });
            for part in partials {
                acc[start..end].iter_mut().zip(&part).for_each(|(a, p)| *a += p);
            }
            g = exec.map(n, |r| affine_input_grad(&view, &g[r]));
        }
        Ok(g)
    }
}

/// Recorded state of [`Mlp::forward_batch`].
#[derive(Clone, Debug)]
pub struct BatchTape {
    layers: Vec<BatchLayerTape>,
    generation: u64,
    rows: usize,
}

#[derive(Clone, Debug)]
struct BatchLayerTape {
    input: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
    /// Per row for layer norm, per feature for batch norm.
    inv_std: Vec<f64>,
}

fn affine(view: &LayerView<'_>, x: &[f64]) -> Vec<f64> {
    let spec = view.spec;
    (0..spec.output)
        .map(|o| dot(&view.weight[o * spec.input..(o + 1) * spec.input], x) + view.bias[o])
        .collect()
}

/// Normalizes `a` in place and returns `1/σ`.
fn layer_norm(a: &mut [f64]) -> f64 {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    a.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
    inv_std
}

// d/da of (a − μ)/σ: σ⁻¹·(g − mean(g) − n·mean(g·n))
fn layer_norm_backward(g: &mut [f64], normed: &[f64], inv_std: f64) {
    let n = g.len() as f64;
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_gn = dot(g, normed) / n;
    for (gi, ni) in g.iter_mut().zip(normed) {
        *gi = inv_std * (*gi - mean_g - ni * mean_gn);
    }
}

/// Normalizes every column of `a` over the rows; returns `1/σ` per column.
fn batch_norm(a: &mut [Vec<f64>]) -> Vec<f64> {
    let n = a.len() as f64;
    let width = a[0].len();
    let mut mean = vec![0.0; width];
    for row in a.iter() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for row in a.iter() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + NORM_EPS).sqrt()).collect();
    for row in a.iter_mut() {
        for ((v, m), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * is;
        }
    }
    inv_std
}

// the column-wise version of the layer-norm backward
fn batch_norm_backward(g: &mut [Vec<f64>], normed: &[Vec<f64>], inv_std: &[f64]) {
    let n = g.len() as f64;
    let width = inv_std.len();
    let mut mean_g = vec![0.0; width];
    let mut mean_gn = vec![0.0; width];
    for (gr, nr) in g.iter().zip(normed) {
        for j in 0..width {
            mean_g[j] += gr[j];
            mean_gn[j] += gr[j] * nr[j];
        }
    }
    mean_g.iter_mut().chain(mean_gn.iter_mut()).for_each(|v| *v /= n);
    for (gr, nr) in g.iter_mut().zip(normed) {
        for j in 0..width {
            gr[j] = inv_std[j] * (gr[j] - mean_g[j] - nr[j] * mean_gn[j]);
        }
    }
}

/// Adds `g·xᵀ` and `g` into a layer's `[weight | bias]` gradient slice.
fn accumulate_affine_grad(spec: LayerSpec, g: &[f64], x: &[f64], acc: &mut [f64]) {
    let (wgrad, bgrad) = acc.split_at_mut(spec.input * spec.output);
    for o in 0..spec.output {
        let go = g[o];
        if go != 0.0 {
            let row = &mut wgrad[o * spec.input..(o + 1) * spec.input];
            for (w, xi) in row.iter_mut().zip(x) {
                *w += go * xi;
            }
        }
        bgrad[o] += go;
    }
}

fn affine_input_grad(view: &LayerView<'_>, g: &[f64]) -> Vec<f64> {
    let spec = view.spec;
    let mut gin = vec![0.0; spec.input];
    for (o, go) in g.iter().enumerate() {
        if *go != 0.0 {
            let row = &view.weight[o * spec.input..(o + 1) * spec.input];
            for (gi, w) in gin.iter_mut().zip(row) {
                *gi += go * w;
            }
        }
    }
    gin
}
