//! Small feedforward networks with a frozen flat parameter layout.
//!
//! Every layer is `z = W a + b`; hidden layers apply `tanh`, the final layer
//! is affine. Parameters live in one flat `f64` buffer, laid out layer by
//! layer: the weight matrix of the layer in row-major `(out, in)` order,
//! followed by its bias vector. Velocities solved for during the evolution
//! are indexed in exactly this order.
//!
//! Gradients come from a single reverse sweep ([`vjp_sum`], [`vjp_rows`]);
//! [`param_jacobian`] is that sweep run once per output coordinate.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `tanh` on hidden layers, identity on the output layer.
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activated value `a = act(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => f.write_str("tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture of one feedforward network: `widths[0]` is the input
/// dimension, the last entry the output dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MlpSpecRepr", into = "MlpSpecRepr")]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct MlpSpecRepr {
    widths: Vec<usize>,
    activation: Activation,
}

impl TryFrom<MlpSpecRepr> for MlpSpec {
    type Error = Error;

    fn try_from(r: MlpSpecRepr) -> Result<Self> {
        MlpSpec::with_activation(r.widths, r.activation)
    }
}

impl From<MlpSpec> for MlpSpecRepr {
    fn from(s: MlpSpec) -> Self {
        MlpSpecRepr {
            widths: s.widths,
            activation: s.activation,
        }
    }
}

/// Location of one layer inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlot {
    pub n_in: usize,
    pub n_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        Self::with_activation(widths, Activation::Tanh)
    }

    pub fn with_activation(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "an MLP needs at least 2 layer widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        Ok(Self { widths, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Number of affine layers.
    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub(crate) fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    n_in: w[0],
                    n_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }

    /// One-line textual form, e.g. `mlp widths=2,3,1 activation=tanh`.
    pub fn header(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("mlp widths={} activation={}", widths.join(","), self.activation)
    }

    pub fn parse_header(line: &str) -> Result<Self> {
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("mlp") {
            return Err(Error::parse(format!("expected `mlp` header, got `{line}`")));
        }
        let mut widths = None;
        let mut activation = Activation::Tanh;
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("malformed header token `{tok}`")))?;
            match key {
                "widths" => {
                    let parsed: std::result::Result<Vec<usize>, _> = value.split(',').map(str::parse).collect();
                    widths = Some(parsed.map_err(|e| Error::parse(format!("widths: {e}")))?);
                }
                "activation" => activation = value.parse()?,
                other => return Err(Error::parse(format!("unknown header key `{other}`"))),
            }
        }
        let widths = widths.ok_or_else(|| Error::parse("header is missing `widths`"))?;
        Self::with_activation(widths, activation)
    }
}

/// Flat parameter storage in the frozen layout of its [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_vec(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        check_len("ParamVector::from_vec", spec.param_count(), values.len())?;
        check_finite("ParamVector::from_vec", &values)?;
        Ok(Self(values))
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
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

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Glorot-uniform weights, zero biases. The stream is a pure function of
/// `(spec, seed)`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    for slot in spec.slots() {
        let bound = (6.0 / (slot.n_in + slot.n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weights = &mut values[slot.weight_offset..slot.bias_offset];
        for w in weights {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector(values)
}

fn check_params(spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    check_len("parameter vector", spec.param_count(), params.len())
}

/// Evaluates the network at one input.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    check_len("forward input", spec.input_dim(), input.len())?;
    let p = params.as_slice();
    let slots = spec.slots();
    let last = slots.len() - 1;
    let mut a = input.to_vec();
    for (l, slot) in slots.iter().enumerate() {
        let mut z = p[slot.bias_offset..slot.bias_offset + slot.n_out].to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &p[slot.weight_offset + o * slot.n_in..slot.weight_offset + (o + 1) * slot.n_in];
            *zo += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
        }
        if l != last {
            for zo in &mut z {
                *zo = spec.activation.apply(*zo);
            }
        }
        a = z;
    }
    Ok(a)
}

/// `W^T` of a layer as an `(n_in, n_out)` view: row-major `(out, in)` storage
/// is column-major `(in, out)`.
fn weight_t<'a>(p: &'a [f64], slot: &LayerSlot) -> MatRef<'a, f64> {
    MatRef::from_column_major_slice(&p[slot.weight_offset..slot.bias_offset], slot.n_in, slot.n_out)
}

/// Activations of every layer for a batch of inputs (one row per example);
/// entry 0 is the input itself, the last entry the network output.
fn forward_trace(spec: &MlpSpec, p: &[f64], inputs: MatRef<'_, f64>) -> Vec<Mat<f64>> {
    let slots = spec.slots();
    let last = slots.len() - 1;
    let n = inputs.nrows();
    let mut acts = Vec::with_capacity(slots.len() + 1);
    acts.push(inputs.to_owned());
    for (l, slot) in slots.iter().enumerate() {
        let mut z = Mat::<f64>::zeros(n, slot.n_out);
        matmul(
            z.as_mut(),
            Accum::Replace,
            acts[l].as_ref(),
            weight_t(p, slot),
            1.0,
            Par::Seq,
        );
        let bias = &p[slot.bias_offset..slot.bias_offset + slot.n_out];
        for (o, &b) in bias.iter().enumerate() {
            let col = z
                .col_mut(o)
                .try_as_col_major_mut()
                .expect("owned column")
                .as_slice_mut();
            if l == last {
                col.iter_mut().for_each(|v| *v += b);
            } else {
                col.iter_mut().for_each(|v| *v = spec.activation.apply(*v + b));
            }
        }
        acts.push(z);
    }
    acts
}

fn check_batch(spec: &MlpSpec, params: &ParamVector, inputs: MatRef<'_, f64>) -> Result<()> {
    check_params(spec, params)?;
    check_len("batch input columns", spec.input_dim(), inputs.ncols())
}

/// Evaluates a batch of inputs given as rows; returns one output row per
/// example.
pub fn forward_batch(spec: &MlpSpec, params: &ParamVector, inputs: MatRef<'_, f64>) -> Result<Mat<f64>> {
    check_batch(spec, params, inputs)?;
    let mut acts = forward_trace(spec, params.as_slice(), inputs);
    Ok(acts.pop().expect("at least one layer"))
}

/// Reverse sweep: calls `visit(slot, delta, a_prev)` for every layer from the
/// output backwards, where `delta` holds `∂(c·f)/∂z` per example.
fn reverse_sweep(
    spec: &MlpSpec,
    p: &[f64],
    acts: &[Mat<f64>],
    cotangents: MatRef<'_, f64>,
    mut visit: impl FnMut(&LayerSlot, MatRef<'_, f64>, MatRef<'_, f64>),
) {
    let slots = spec.slots();
    let n = cotangents.nrows();
    let mut delta = cotangents.to_owned();
    for l in (0..slots.len()).rev() {
        let slot = &slots[l];
        let a_prev = acts[l].as_ref();
        visit(slot, delta.as_ref(), a_prev);
        if l == 0 {
            break;
        }
        let w = MatRef::from_row_major_slice(&p[slot.weight_offset..slot.bias_offset], slot.n_out, slot.n_in);
        let mut next = Mat::<f64>::zeros(n, slot.n_in);
        matmul(next.as_mut(), Accum::Replace, delta.as_ref(), w, 1.0, Par::Seq);
        for i in 0..slot.n_in {
            for e in 0..n {
                next[(e, i)] *= spec.activation.derivative_from_output(a_prev[(e, i)]);
            }
        }
        delta = next;
    }
}

fn check_cotangents(spec: &MlpSpec, inputs: MatRef<'_, f64>, cotangents: MatRef<'_, f64>) -> Result<()> {
    check_len("cotangent rows", inputs.nrows(), cotangents.nrows())?;
    check_len("cotangent columns", spec.output_dim(), cotangents.ncols())
}

/// Batched vector-Jacobian product summed over examples:
/// returns the outputs and `Σ_e ∂(c_e · f(x_e))/∂θ`.
pub fn vjp_sum(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: MatRef<'_, f64>,
    cotangents: MatRef<'_, f64>,
) -> Result<(Mat<f64>, Vec<f64>)> {
    check_batch(spec, params, inputs)?;
    check_cotangents(spec, inputs, cotangents)?;
    let p = params.as_slice();
    let mut acts = forward_trace(spec, p, inputs);
    let mut grad = vec![0.0; spec.param_count()];
    reverse_sweep(spec, p, &acts, cotangents, |slot, delta, a_prev| {
        let (w_grad, rest) = grad[slot.weight_offset..].split_at_mut(slot.n_in * slot.n_out);
        let w_grad = MatMut::from_column_major_slice_mut(w_grad, slot.n_in, slot.n_out);
        matmul(w_grad, Accum::Replace, a_prev.transpose(), delta, 1.0, Par::Seq);
        for (o, gb) in rest[..slot.n_out].iter_mut().enumerate() {
            *gb = delta.col(o).iter().sum();
        }
    });
    let out = acts.pop().expect("at least one layer");
    Ok((out, grad))
}

/// Per-example vector-Jacobian products: row `e` of the result is
/// `∂(c_e · f(x_e))/∂θ`.
pub fn vjp_rows(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: MatRef<'_, f64>,
    cotangents: MatRef<'_, f64>,
) -> Result<Mat<f64>> {
    check_batch(spec, params, inputs)?;
    check_cotangents(spec, inputs, cotangents)?;
    let p = params.as_slice();
    let n = inputs.nrows();
    let acts = forward_trace(spec, p, inputs);
    let mut rows = Mat::<f64>::zeros(n, spec.param_count());
    reverse_sweep(spec, p, &acts, cotangents, |slot, delta, a_prev| {
        for o in 0..slot.n_out {
            for i in 0..slot.n_in {
                let mut col = rows.col_mut(slot.weight_offset + o * slot.n_in + i);
                for e in 0..n {
                    col[e] = delta[(e, o)] * a_prev[(e, i)];
                }
            }
            let mut col = rows.col_mut(slot.bias_offset + o);
            for e in 0..n {
                col[e] = delta[(e, o)];
            }
        }
    });
    Ok(rows)
}

/// Exact `∂f/∂θ` at one input, `(output dim × param count)`; one reverse pass
/// per output coordinate.
pub fn param_jacobian(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Mat<f64>> {
    check_len("jacobian input", spec.input_dim(), input.len())?;
    let out = spec.output_dim();
    let inputs = Mat::<f64>::from_fn(out, input.len(), |_, j| input[j]);
    let unit = Mat::<f64>::identity(out, out);
    vjp_rows(spec, params, inputs.as_ref(), unit.as_ref())
}

pub(crate) fn write_params(mut w: impl Write, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    check_params(spec, params)?;
    writeln!(w, "{}", spec.header())?;
    for v in params.as_slice() {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

pub(crate) fn read_values<B: BufRead>(lines: &mut std::io::Lines<B>, count: usize) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(count);
    while values.len() < count {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(format!("expected {count} values, found {}", values.len())))??;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|e| Error::parse(format!("bad value `{line}`: {e}")))?;
        values.push(v);
    }
    Ok(values)
}

/// Writes the spec header followed by one value per line.
pub fn save_params(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(file, spec, params)
}

pub fn load_params(path: &Path) -> Result<(MlpSpec, ParamVector)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("empty parameter file").with_path(path))??;
    let spec = MlpSpec::parse_header(&header).map_err(|e| e.with_path(path))?;
    let values = read_values(&mut lines, spec.param_count()).map_err(|e| e.with_path(path))?;
    let params = ParamVector::from_vec(&spec, values)?;
    Ok((spec, params))
}
