use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{embed_sigma, DiffusionError, EMBED_WIDTH};
use crate::channels::{CorruptionChannel, Observation};
use crate::numerics::{self, Graph, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::rng::Stream;

/// Shape of the denoiser MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim_x: usize,
    /// `dim(y)` plus the width of the matrix descriptor features.
    pub cond_width: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn for_channel(channel: &CorruptionChannel, hidden: Vec<usize>) -> Self {
        Self {
            dim_x: channel.dim_x(),
            cond_width: channel.dim_y() + channel.descriptor_width(),
            hidden,
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim_x + self.cond_width + EMBED_WIDTH
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    Conditional,
    Unconditional,
}

/// The network body `F`: Linear, SiLU, LayerNorm with affine, per hidden
/// layer, then a final Linear.
struct Mlp<'a> {
    arch: &'a Architecture,
}

impl Mlp<'_> {
    fn body(&self, tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var, NumericsError> {
        let mut h = tape.concat(parts)?;
        for l in 0..self.arch.hidden.len() {
            let w = tape.param(&format!("l{l}.w"))?;
            let b = tape.param(&format!("l{l}.b"))?;
            let gamma = tape.param(&format!("l{l}.gamma"))?;
            let beta = tape.param(&format!("l{l}.beta"))?;
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            let z = tape.silu(z)?;
            let z = tape.layer_norm(z)?;
            let z = tape.mul(z, gamma)?;
            h = tape.add(z, beta)?;
        }
        let w = tape.param("out.w")?;
        let b = tape.param("out.b")?;
        let z = tape.matmul(h, w)?;
        tape.add(z, b)
    }
}

/// Inputs: `[c_in x_t, cond (optional), embedding]`.
struct BodyGraph<'a> {
    mlp: Mlp<'a>,
}

impl Graph for BodyGraph<'_> {
    fn build(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var, NumericsError> {
        self.mlp.body(tape, inputs)
    }
}

/// Inputs: body inputs followed by the scaled regression target and `1/B`.
///
/// The weighted loss `w ||c_skip x_t + c_out F - x0||²` with `w = 1/c_out²`
/// equals `||F - (x0 - c_skip x_t)/c_out||²`.
struct LossGraph<'a> {
    mlp: Mlp<'a>,
}

impl Graph for LossGraph<'_> {
    fn build(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var, NumericsError> {
        let (body, rest) = inputs.split_at(inputs.len() - 2);
        let f = self.mlp.body(tape, body)?;
        let r = tape.add(f, rest[0])?;
        let s = tape.sum_squares(r)?;
        tape.mul(s, rest[1])
    }
}

/// Preconditioning coefficients `(c_skip, c_out, c_in)` at variance `s`.
pub fn preconditioning(sigma_sq: f64) -> (f64, f64, f64) {
    let c_skip = 1.0 / (sigma_sq + 1.0);
    let c_out = (sigma_sq / (sigma_sq + 1.0)).sqrt();
    let c_in = 1.0 / (sigma_sq + 1.0).sqrt();
    (c_skip, c_out, c_in)
}

/// Conditional denoiser `d(x_t, σ | y, A) = c_skip x_t + c_out F(c_in x_t, y, A, emb(σ))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: Architecture,
    pub mode: ConditioningMode,
    pub channel: Option<CorruptionChannel>,
    pub params: ParamStore,
    pub ema: Option<ParamStore>,
}

impl DenoiserModel {
    /// Fresh parameters: uniform `±1/sqrt(fan_in)` for linear layers,
    /// unit scale and zero shift for the LayerNorm affine terms.
    pub fn init(
        arch: Architecture,
        mode: ConditioningMode,
        channel: Option<CorruptionChannel>,
        rng: &mut Stream,
    ) -> Result<Self, DiffusionError> {
        if arch.dim_x == 0 || arch.hidden.iter().any(|&h| h == 0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "architecture {arch:?} has an empty layer"
            )));
        }
        if let Some(ch) = &channel {
            let expect = Architecture::for_channel(ch, arch.hidden.clone());
            if expect.dim_x != arch.dim_x || expect.cond_width != arch.cond_width {
                return Err(DiffusionError::InvalidConfig(format!(
                    "architecture widths ({}, {}) do not fit the channel ({}, {})",
                    arch.dim_x, arch.cond_width, expect.dim_x, expect.cond_width
                )));
            }
        }
        let mut params = ParamStore::new();
        let mut fan_in = arch.input_width();
        let mut linear = |name: &str, fan_in: usize, fan_out: usize, params: &mut ParamStore| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
            params.insert(format!("{name}.b"), Tensor::row(b));
        };
        for (l, &width) in arch.hidden.iter().enumerate() {
            linear(&format!("l{l}"), fan_in, width, &mut params);
            params.insert(format!("l{l}.gamma"), Tensor::filled(&[1, width], 1.0));
            params.insert(format!("l{l}.beta"), Tensor::zeros(&[1, width]));
            fan_in = width;
        }
        linear("out", fan_in, arch.dim_x, &mut params);
        Ok(Self {
            arch,
            mode,
            channel,
            params,
            ema: None,
        })
    }

    /// Parameters used for sampling: the EMA shadow when present.
    pub fn sampling_params(&self) -> &ParamStore {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    /// Conditioning rows `[y, features(A)]`, zeros in unconditional mode.
    pub fn encode_conditioning(
        &self,
        batch: usize,
        obs: Option<&[Observation]>,
    ) -> Result<Option<Tensor>, DiffusionError> {
        let c = self.arch.cond_width;
        if c == 0 {
            return Ok(None);
        }
        let mut data = vec![0.0; batch * c];
        if self.mode == ConditioningMode::Conditional {
            let obs = obs.ok_or(DiffusionError::MissingObservation)?;
            if obs.len() != batch {
                return Err(DiffusionError::BatchMismatch {
                    expected: batch,
                    got: obs.len(),
                });
            }
            let channel = self.channel.as_ref().ok_or(DiffusionError::MissingObservation)?;
            for (i, o) in obs.iter().enumerate() {
                let row = &mut data[i * c..(i + 1) * c];
                let feats = channel.features(&o.a);
                if o.y.len() + feats.len() != c {
                    return Err(DiffusionError::BatchMismatch {
                        expected: c,
                        got: o.y.len() + feats.len(),
                    });
                }
                row[..o.y.len()].copy_from_slice(&o.y);
                row[o.y.len()..].copy_from_slice(&feats);
            }
        }
        Ok(Some(Tensor::new(vec![batch, c], data)?))
    }

    fn body_inputs(
        &self,
        x_t: &Tensor,
        sigma_sq: &[f64],
        cond: Option<Tensor>,
    ) -> Result<Vec<Tensor>, DiffusionError> {
        let (b, d) = x_t.dims2("denoiser input")?;
        if d != self.arch.dim_x || sigma_sq.len() != b {
            return Err(DiffusionError::BatchMismatch {
                expected: self.arch.dim_x,
                got: d,
            });
        }
        let mut xs = x_t.clone();
        let mut emb = Vec::with_capacity(b * EMBED_WIDTH);
        for (i, &s) in sigma_sq.iter().enumerate() {
            let (_, _, c_in) = preconditioning(s);
            for v in xs.row_slice_mut(i) {
                *v *= c_in;
            }
            emb.extend(embed_sigma(s));
        }
        let mut inputs = vec![xs];
        inputs.extend(cond);
        inputs.push(Tensor::new(vec![b, EMBED_WIDTH], emb)?);
        Ok(inputs)
    }

    /// `d(x_t, σ_i² | obs_i)` row by row, with per-row noise levels.
    pub fn denoise_with(
        &self,
        params: &ParamStore,
        x_t: &Tensor,
        sigma_sq: &[f64],
        obs: Option<&[Observation]>,
    ) -> Result<Tensor, DiffusionError> {
        let b = x_t.shape()[0];
        let cond = self.encode_conditioning(b, obs)?;
        let inputs = self.body_inputs(x_t, sigma_sq, cond)?;
        let graph = BodyGraph {
            mlp: Mlp { arch: &self.arch },
        };
        let mut out = numerics::forward(&graph, inputs, params)?;
        for (i, &s) in sigma_sq.iter().enumerate() {
            let (c_skip, c_out, _) = preconditioning(s);
            for (o, x) in out.row_slice_mut(i).iter_mut().zip(x_t.row_slice(i)) {
                *o = c_skip * x + c_out * *o;
            }
        }
        Ok(out)
    }

    /// Weighted denoising loss on prepared `(x0, x_t, σ²)` triples and its gradient.
    pub fn loss_and_grad(
        &self,
        x0: &Tensor,
        x_t: &Tensor,
        sigma_sq: &[f64],
        obs: Option<&[Observation]>,
    ) -> Result<(f64, std::collections::BTreeMap<String, Tensor>), DiffusionError> {
        let b = x0.shape()[0];
        let cond = self.encode_conditioning(b, obs)?;
        let mut inputs = self.body_inputs(x_t, sigma_sq, cond)?;
        let mut target = x0.clone();
        for (i, &s) in sigma_sq.iter().enumerate() {
            let (c_skip, c_out, _) = preconditioning(s);
            for (t, x) in target.row_slice_mut(i).iter_mut().zip(x_t.row_slice(i)) {
                *t = (c_skip * x - *t) / c_out;
            }
        }
        inputs.push(target);
        inputs.push(Tensor::scalar(1.0 / b as f64));
        let graph = LossGraph {
            mlp: Mlp { arch: &self.arch },
        };
        Ok(numerics::value_and_grad(&graph, inputs, &self.params)?)
    }
}
