//! Unstacked DeepONet: one branch net encoding the input function at the
//! sensors, one trunk net encoding the query point, combined by an inner
//! product over the `p` latent channels plus an optional scalar bias.
//!
//! For the evolution the trainable parameters are flattened as
//! `[trunk | branch | bias]`, matching the column order of
//! [`jacobian_blocks`].

use std::io::{BufRead, Write};
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::net_core::{self, forward, forward_batch, init_params, param_jacobian, MlpSpec, ParamVector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeepONetModel {
    branch: MlpSpec,
    trunk: MlpSpec,
    use_bias: bool,
}

impl DeepONetModel {
    pub fn new(branch: MlpSpec, trunk: MlpSpec, use_bias: bool) -> Result<Self> {
        if branch.output_dim() != trunk.output_dim() {
            return Err(Error::InvalidSpec(format!(
                "branch and trunk must share the latent width: {} vs {}",
                branch.output_dim(),
                trunk.output_dim()
            )));
        }
        if !(1..=2).contains(&trunk.input_dim()) {
            return Err(Error::InvalidSpec(format!(
                "trunk input dimension must be 1 or 2, got {}",
                trunk.input_dim()
            )));
        }
        Ok(Self {
            branch,
            trunk,
            use_bias,
        })
    }

    /// Branch `[m, hidden.., p]`, trunk `[d, hidden.., p]`.
    pub fn with_widths(sensors: usize, dim: usize, hidden: &[usize], p: usize, use_bias: bool) -> Result<Self> {
        let widths = |input: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(p);
            w
        };
        Self::new(MlpSpec::new(widths(sensors))?, MlpSpec::new(widths(dim))?, use_bias)
    }

    pub fn branch(&self) -> &MlpSpec {
        &self.branch
    }

    pub fn trunk(&self) -> &MlpSpec {
        &self.trunk
    }

    pub fn use_bias(&self) -> bool {
        self.use_bias
    }

    /// Latent width `p`.
    pub fn latent(&self) -> usize {
        self.branch.output_dim()
    }

    pub fn sensors(&self) -> usize {
        self.branch.input_dim()
    }

    pub fn spatial_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn trunk_params(&self) -> usize {
        self.trunk.param_count()
    }

    pub fn branch_params(&self) -> usize {
        self.branch.param_count()
    }

    /// Total trainable parameters, including `b0` when enabled.
    pub fn param_count(&self) -> usize {
        self.trunk_params() + self.branch_params() + usize::from(self.use_bias)
    }

    pub fn init_weights(&self, seed: u64) -> DeepONetWeights {
        DeepONetWeights {
            branch: init_params(&self.branch, seed),
            trunk: init_params(&self.trunk, seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepONetWeights {
    pub branch: ParamVector,
    pub trunk: ParamVector,
    /// `b0`; kept at 0 when the model has no bias.
    pub bias: f64,
}

impl DeepONetWeights {
    pub fn check(&self, model: &DeepONetModel) -> Result<()> {
        check_len("branch parameters", model.branch_params(), self.branch.len())?;
        check_len("trunk parameters", model.trunk_params(), self.trunk.len())?;
        check_finite("branch parameters", self.branch.as_slice())?;
        check_finite("trunk parameters", self.trunk.as_slice())?;
        check_finite("bias", &[self.bias])
    }

    /// `[trunk | branch | bias]`.
    pub fn flatten(&self, model: &DeepONetModel) -> Vec<f64> {
        let mut flat = Vec::with_capacity(model.param_count());
        flat.extend_from_slice(self.trunk.as_slice());
        flat.extend_from_slice(self.branch.as_slice());
        if model.use_bias {
            flat.push(self.bias);
        }
        flat
    }

    pub fn from_flat(model: &DeepONetModel, flat: &[f64]) -> Result<Self> {
        check_len("flat DeepONet parameters", model.param_count(), flat.len())?;
        let (trunk, rest) = flat.split_at(model.trunk_params());
        let (branch, bias) = rest.split_at(model.branch_params());
        Ok(Self {
            trunk: ParamVector::from_vec(&model.trunk, trunk.to_vec())?,
            branch: ParamVector::from_vec(&model.branch, branch.to_vec())?,
            bias: bias.first().copied().unwrap_or(0.0),
        })
    }
}

/// One input function as seen by the branch net.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub branch_input: Vec<f64>,
    /// Generating parameter (`a`, `c` or `ε`), kept for reporting.
    pub label: f64,
}

fn bias_term(model: &DeepONetModel, weights: &DeepONetWeights) -> f64 {
    if model.use_bias {
        weights.bias
    } else {
        0.0
    }
}

fn check_sample(model: &DeepONetModel, sample: &FieldSample) -> Result<()> {
    check_len("branch input", model.sensors(), sample.branch_input.len())?;
    check_finite("branch input", &sample.branch_input)
}

/// `Σ_k g_k(y) b_k(u) (+ b0)`.
pub fn evaluate(model: &DeepONetModel, weights: &DeepONetWeights, sample: &FieldSample, y: &[f64]) -> Result<f64> {
    check_sample(model, sample)?;
    check_len("query point", model.spatial_dim(), y.len())?;
    let b = forward(&model.branch, &weights.branch, &sample.branch_input)?;
    let g = forward(&model.trunk, &weights.trunk, y)?;
    Ok(b.iter().zip(&g).map(|(bk, gk)| bk * gk).sum::<f64>() + bias_term(model, weights))
}

/// Branch outputs for a list of samples, one row per sample.
pub fn branch_outputs(model: &DeepONetModel, weights: &DeepONetWeights, samples: &[FieldSample]) -> Result<Mat<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    for s in samples {
        check_sample(model, s)?;
    }
    let inputs = Mat::<f64>::from_fn(samples.len(), model.sensors(), |j, i| samples[j].branch_input[i]);
    forward_batch(&model.branch, &weights.branch, inputs.as_ref())
}

/// Trunk outputs at the query points (rows of `points`).
pub fn trunk_outputs(model: &DeepONetModel, weights: &DeepONetWeights, points: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if points.nrows() == 0 {
        return Err(Error::Empty("grid points"));
    }
    forward_batch(&model.trunk, &weights.trunk, points)
}

/// Solution values, `(samples × points)`. Branch outputs are computed once
/// per sample and trunk outputs once per point.
pub fn evaluate_field(
    model: &DeepONetModel,
    weights: &DeepONetWeights,
    samples: &[FieldSample],
    points: MatRef<'_, f64>,
) -> Result<Mat<f64>> {
    let b = branch_outputs(model, weights, samples)?;
    let g = trunk_outputs(model, weights, points)?;
    let mut u = Mat::<f64>::zeros(samples.len(), points.nrows());
    matmul(
        u.as_mut(),
        Accum::Replace,
        b.as_ref(),
        g.as_ref().transpose(),
        1.0,
        Par::Seq,
    );
    let b0 = bias_term(model, weights);
    if b0 != 0.0 {
        for i in 0..u.ncols() {
            for j in 0..u.nrows() {
                u[(j, i)] += b0;
            }
        }
    }
    Ok(u)
}

/// Jacobian of `u(y_i)` for one sample with respect to the trunk parameters
/// (`J1`, `points × N_t`) and the branch parameters (`J2`,
/// `points × (N_b [+1])`). With a bias, the last column of `J2` is all ones.
pub fn jacobian_blocks(
    model: &DeepONetModel,
    weights: &DeepONetWeights,
    sample: &FieldSample,
    points: MatRef<'_, f64>,
) -> Result<(Mat<f64>, Mat<f64>)> {
    check_sample(model, sample)?;
    check_len("grid point dimension", model.spatial_dim(), points.ncols())?;
    if points.nrows() == 0 {
        return Err(Error::Empty("grid points"));
    }
    let n = points.nrows();
    let p = model.latent();

    let b = forward(&model.branch, &weights.branch, &sample.branch_input)?;
    let cot = Mat::<f64>::from_fn(n, p, |_, k| b[k]);
    let j1 = net_core::vjp_rows(&model.trunk, &weights.trunk, points, cot.as_ref())?;

    let g = forward_batch(&model.trunk, &weights.trunk, points)?;
    let jb = param_jacobian(&model.branch, &weights.branch, &sample.branch_input)?;
    let nb = model.branch_params();
    let mut j2 = Mat::<f64>::zeros(n, nb + usize::from(model.use_bias));
    matmul(
        j2.as_mut().subcols_mut(0, nb),
        Accum::Replace,
        g.as_ref(),
        jb.as_ref(),
        1.0,
        Par::Seq,
    );
    if model.use_bias {
        j2.col_mut(nb).fill(1.0);
    }
    Ok((j1, j2))
}

/// Header lines, then branch values, trunk values and (if enabled) `b0`,
/// one number per line.
pub fn save_weights(path: &Path, model: &DeepONetModel, weights: &DeepONetWeights) -> Result<()> {
    weights.check(model)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "deeponet p={} use_bias={}", model.latent(), model.use_bias)?;
    writeln!(w, "branch {}", model.branch.header())?;
    writeln!(w, "trunk {}", model.trunk.header())?;
    for v in weights.branch.as_slice().iter().chain(weights.trunk.as_slice()) {
        writeln!(w, "{v:e}")?;
    }
    if model.use_bias {
        writeln!(w, "{:e}", weights.bias)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(DeepONetModel, DeepONetWeights)> {
    let inner = || -> Result<(DeepONetModel, DeepONetWeights)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let mut next_line = || -> Result<String> {
            Ok(lines
                .next()
                .ok_or_else(|| Error::parse("truncated DeepONet header"))??)
        };
        let head = next_line()?;
        let mut tokens = head.split_whitespace();
        if tokens.next() != Some("deeponet") {
            return Err(Error::parse(format!("expected `deeponet` header, got `{head}`")));
        }
        let mut use_bias = None;
        let mut latent = None;
        for tok in tokens {
            match tok.split_once('=') {
                Some(("p", v)) => latent = Some(v.parse::<usize>().map_err(|e| Error::parse(e.to_string()))?),
                Some(("use_bias", v)) => use_bias = Some(v.parse::<bool>().map_err(|e| Error::parse(e.to_string()))?),
                _ => return Err(Error::parse(format!("unknown header token `{tok}`"))),
            }
        }
        let use_bias = use_bias.ok_or_else(|| Error::parse("missing use_bias"))?;
        let branch_line = next_line()?;
        let branch = MlpSpec::parse_header(
            branch_line
                .strip_prefix("branch ")
                .ok_or_else(|| Error::parse("expected `branch` line"))?,
        )?;
        let trunk_line = next_line()?;
        let trunk = MlpSpec::parse_header(
            trunk_line
                .strip_prefix("trunk ")
                .ok_or_else(|| Error::parse("expected `trunk` line"))?,
        )?;
        let model = DeepONetModel::new(branch, trunk, use_bias)?;
        if let Some(p) = latent {
            check_len("latent width in header", model.latent(), p)?;
        }
        let branch_vals = net_core::read_values(&mut lines, model.branch_params())?;
        let trunk_vals = net_core::read_values(&mut lines, model.trunk_params())?;
        let bias = if use_bias {
            net_core::read_values(&mut lines, 1)?[0]
        } else {
            0.0
        };
        let weights = DeepONetWeights {
            branch: ParamVector::from_vec(&model.branch, branch_vals)?,
            trunk: ParamVector::from_vec(&model.trunk, trunk_vals)?,
            bias,
        };
        Ok((model, weights))
    };
    inner().map_err(|e| e.with_path(path))
}
