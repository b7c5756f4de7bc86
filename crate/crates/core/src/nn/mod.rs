//! Minimal differentiable MLP core.
//!
//! Networks are tanh-activated hidden layers with an identity output, stored
//! as one flat `f64` vector (row-major weight matrices followed by biases,
//! layer by layer). Gradients are exact reverse-mode; there is no
//! computational graph, just cached activations. Forward-mode directional
//! derivatives ([`jvp`]) are provided for Fisher-vector products.

mod adam;
mod serial;

pub use adam::{adam_step, adam_step_in_place, AdamParams, AdamState};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Hidden-layer activation. The output layer is always identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Tanh,
}

/// Architecture of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        assert!(input_dim > 0 && output_dim > 0);
        assert!(hidden_dims.iter().all(|&d| d > 0));
        MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Tanh,
        }
    }

    /// `(in, out)` dimensions of each layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `(weight_offset, bias_offset, in, out)` for each layer in the flat
    /// parameter vector.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for (i, o) in self.layer_dims() {
            out.push((off, off + i * o, i, o));
            off += i * o + o;
        }
        out
    }
}

/// Flat vector of trainable parameters: the common currency of updates,
/// decomposition, and aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Arithmetic mean of several equal-length vectors.
    pub fn mean_of(vs: &[ParamVector]) -> Result<ParamVector> {
        let first = vs.first().ok_or(Error::Empty("parameter vectors"))?;
        let n = first.len();
        let mut acc = vec![0.0; n];
        for v in vs {
            if v.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "parameter mean",
                    expected: n,
                    got: v.len(),
                });
            }
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += x;
            }
        }
        let inv = 1.0 / vs.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        Ok(ParamVector(acc))
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One layer's parameters in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `weights[o][i]`, shape (out, in).
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Structured view of a flat vector. Inverse of [`flatten`], bit-exact.
pub fn unflatten(spec: &MlpSpec, params: &ParamVector) -> Result<Vec<LayerParams>> {
    check_len("unflatten", spec.param_count(), params.len())?;
    let mut layers = Vec::with_capacity(spec.num_layers());
    for (w_off, b_off, i, o) in spec.layout() {
        let weights = (0..o)
            .map(|r| params.0[w_off + r * i..w_off + (r + 1) * i].to_vec())
            .collect();
        let biases = params.0[b_off..b_off + o].to_vec();
        layers.push(LayerParams { weights, biases });
    }
    Ok(layers)
}

/// Flatten structured layers back into one vector. Inverse of [`unflatten`].
pub fn flatten(layers: &[LayerParams]) -> ParamVector {
    let mut out = Vec::new();
    for layer in layers {
        for row in &layer.weights {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&layer.biases);
    }
    ParamVector(out)
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// Cached per-layer activations from a forward pass.
/// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has layers")
    }
}

/// Forward pass. Deterministic in all inputs.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_traced(spec, params, input)?.activations.pop().expect("output layer"))
}

/// Forward pass keeping every activation for a later backward pass.
pub fn forward_traced(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<ForwardTrace> {
    check_len("mlp params", spec.param_count(), params.len())?;
    check_len("mlp input", spec.input_dim, input.len())?;
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut activations = Vec::with_capacity(layout.len() + 1);
    activations.push(input.to_vec());
    for (l, &(w_off, b_off, i, o)) in layout.iter().enumerate() {
        let prev = &activations[l];
        let mut z = vec![0.0; o];
        for r in 0..o {
            let row = &params[w_off + r * i..w_off + (r + 1) * i];
            let mut acc = params[b_off + r];
            for (w, a) in row.iter().zip(prev) {
                acc += w * a;
            }
            z[r] = if l < last { acc.tanh() } else { acc };
            if !z[r].is_finite() {
                return Err(Error::NonFinite(format!("mlp forward, layer {l}, unit {r}")));
            }
        }
        activations.push(z);
    }
    Ok(ForwardTrace { activations })
}

/// Reverse-mode pass: accumulates `d loss / d params` into `grad` given
/// `d loss / d output`. Returns `d loss / d input`.
pub fn backward_traced(
    spec: &MlpSpec,
    params: &[f64],
    trace: &ForwardTrace,
    d_output: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    check_len("mlp params", spec.param_count(), params.len())?;
    check_len("mlp grad", spec.param_count(), grad.len())?;
    check_len("mlp d_output", spec.output_dim, d_output.len())?;
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut d_act = d_output.to_vec();
    for (l, &(w_off, b_off, i, o)) in layout.iter().enumerate().rev() {
        let out_act = &trace.activations[l + 1];
        let in_act = &trace.activations[l];
        // Identity on the output layer, tanh elsewhere.
        let mut dz = d_act;
        if l < last {
            for (d, a) in dz.iter_mut().zip(out_act) {
                *d *= 1.0 - a * a;
            }
        }
        let mut d_prev = vec![0.0; i];
        for r in 0..o {
            let g = dz[r];
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("mlp backward, layer {l}, unit {r}")));
            }
            grad[b_off + r] += g;
            let w_row = &params[w_off + r * i..w_off + (r + 1) * i];
            let g_row = &mut grad[w_off + r * i..w_off + (r + 1) * i];
            for c in 0..i {
                g_row[c] += g * in_act[c];
                d_prev[c] += g * w_row[c];
            }
        }
        d_act = d_prev;
    }
    Ok(d_act)
}

/// Forward-mode directional derivative: `d output / d params` contracted
/// with the tangent `v`, reusing the activations of a previous forward pass.
pub fn jvp(spec: &MlpSpec, params: &[f64], trace: &ForwardTrace, v: &[f64]) -> Result<Vec<f64>> {
    check_len("mlp params", spec.param_count(), params.len())?;
    check_len("mlp tangent", spec.param_count(), v.len())?;
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut t = vec![0.0; spec.input_dim];
    for (l, &(w_off, b_off, i, o)) in layout.iter().enumerate() {
        let in_act = &trace.activations[l];
        let out_act = &trace.activations[l + 1];
        let mut tz = vec![0.0; o];
        for r in 0..o {
            let w_row = &params[w_off + r * i..w_off + (r + 1) * i];
            let v_row = &v[w_off + r * i..w_off + (r + 1) * i];
            let mut acc = v[b_off + r];
            for c in 0..i {
                acc += w_row[c] * t[c] + v_row[c] * in_act[c];
            }
            tz[r] = if l < last {
                (1.0 - out_act[r] * out_act[r]) * acc
            } else {
                acc
            };
        }
        t = tz;
    }
    Ok(t)
}

/// Exact reverse-mode gradient of a scalar loss over a batch of inputs.
///
/// The loss is supplied as a functional of all network outputs: it returns
/// the scalar value together with `d loss / d output` for every element of
/// the batch.
pub fn loss_gradient<F>(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &[Vec<f64>],
    loss: F,
) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let traces: Vec<ForwardTrace> = inputs
        .iter()
        .map(|x| forward_traced(spec, params.as_slice(), x))
        .collect::<Result<_>>()?;
    let outputs: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
    let (value, d_outputs) = loss(&outputs);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss value".to_string()));
    }
    check_len("loss d_outputs", inputs.len(), d_outputs.len())?;
    let mut grad = vec![0.0; spec.param_count()];
    for (trace, d_out) in traces.iter().zip(&d_outputs) {
        backward_traced(spec, params.as_slice(), trace, d_out, &mut grad)?;
    }
    Ok((value, ParamVector(grad)))
}

/// Orthogonal initialization with a per-layer gain schedule; biases zero.
///
/// Each weight matrix has orthonormal rows scaled by the gain when
/// `out <= in`, orthonormal columns otherwise. Orthonormalization is
/// modified Gram-Schmidt, whose positive normalization makes the result
/// unique, so the same seed gives the same vector everywhere.
pub fn orthogonal_init(spec: &MlpSpec, gains: &[f64], seed: u64) -> ParamVector {
    assert_eq!(
        gains.len(),
        spec.num_layers(),
        "one gain per layer required"
    );
    let mut rng = RngStream::named(seed, "orthogonal-init");
    let mut layers = Vec::with_capacity(spec.num_layers());
    for ((in_dim, out_dim), &gain) in spec.layer_dims().into_iter().zip(gains) {
        let weights = orthogonal_matrix(&mut rng, out_dim, in_dim, gain);
        layers.push(LayerParams {
            weights,
            biases: vec![0.0; out_dim],
        });
    }
    flatten(&layers)
}

fn orthogonal_matrix(rng: &mut RngStream, rows: usize, cols: usize, gain: f64) -> Vec<Vec<f64>> {
    if rows <= cols {
        let q = gram_schmidt(rng, rows, cols);
        q.into_iter()
            .map(|r| r.into_iter().map(|x| gain * x).collect())
            .collect()
    } else {
        // Orthonormal columns: orthogonalize in the transposed view.
        let q = gram_schmidt(rng, cols, rows);
        let mut w = vec![vec![0.0; cols]; rows];
        for (c, qc) in q.iter().enumerate() {
            for (r, &x) in qc.iter().enumerate() {
                w[r][c] = gain * x;
            }
        }
        w
    }
}

/// `n` orthonormal vectors of dimension `dim >= n` from Gaussian draws.
fn gram_schmidt(rng: &mut RngStream, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for prev in &q {
            let proj = crate::linalg::dot(prev, &v);
            crate::linalg::axpy(&mut v, -proj, prev);
        }
        let norm = crate::linalg::norm2(&v);
        if norm < 1e-10 {
            continue; // degenerate draw; take a fresh one
        }
        crate::linalg::scale(&mut v, 1.0 / norm);
        q.push(v);
    }
    q
}
