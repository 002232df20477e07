//! Learnable parameters, seeded initialization and binary checkpoints.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{dim_u32, put_f32, put_f64, put_u32, ByteReader};
use crate::numerics::Tensor2D;
use crate::{Error, Real, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGFC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Patch-importance temperature used unless configured otherwise.
pub const DEFAULT_TAU_P: f64 = 0.05;
/// Interactiveness gate exponent used unless configured otherwise.
pub const DEFAULT_GAMMA: f64 = 1.0;
/// Fresh-init log temperature of every scaled sigmoid (`ln 10`).
pub const SIGMOID_INIT_LOG_TEMP: f64 = std::f64::consts::LN_10;
pub const SIGMOID_INIT_BIAS: f64 = -5.0;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Model dimensions. `d` is the decoder width and must equal `d_v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub d: usize,
}

impl Dims {
    /// `d_s = d_t` and `d = d_v`.
    pub fn new(d_v: usize, d_t: usize) -> Self {
        Self {
            d_v,
            d_t,
            d_s: d_t,
            d: d_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_t == 0 || self.d_s == 0 || self.d == 0 {
            return Err(Error::Argument(format!("all dims must be positive: {self:?}")));
        }
        if self.d != self.d_v {
            return Err(Error::Argument(format!(
                "decoder width d = {} must equal backbone width d_v = {}",
                self.d, self.d_v
            )));
        }
        Ok(())
    }
}

/// Non-learnable hyperparameters stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tau_p: f64,
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau_p: DEFAULT_TAU_P,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0) || !self.tau_p.is_finite() {
            return Err(Error::Argument(format!("tau_p must be > 0, got {}", self.tau_p)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Argument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Temperature and bias of a scaled sigmoid `sigmoid(exp(log_temp) * z + bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidParams<T> {
    pub log_temp: T,
    pub bias: T,
}

impl<T: Real> SigmoidParams<T> {
    pub fn fresh() -> Self {
        Self {
            log_temp: T::lit(SIGMOID_INIT_LOG_TEMP),
            bias: T::lit(SIGMOID_INIT_BIAS),
        }
    }

    pub fn zeros() -> Self {
        Self {
            log_temp: T::zero(),
            bias: T::zero(),
        }
    }

    #[inline]
    pub fn apply(&self, z: T) -> T {
        crate::numerics::scaled_sigmoid(z, self.log_temp, self.bias)
    }
}

/// Single-head cross-attention block with a residual connection and layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor2D<T>,
    pub w_k: Tensor2D<T>,
    pub w_v: Tensor2D<T>,
    pub w_o: Tensor2D<T>,
    /// Layer-norm scale, `1 x d`.
    pub ln_scale: Tensor2D<T>,
    /// Layer-norm shift, `1 x d`.
    pub ln_shift: Tensor2D<T>,
}

impl<T: Real> AttentionParams<T> {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_q: uniform_fan_in(d, d, rng),
            w_k: uniform_fan_in(d, d, rng),
            w_v: uniform_fan_in(d, d, rng),
            w_o: uniform_fan_in(d, d, rng),
            ln_scale: Tensor2D::from_fn(1, d, |_, _| T::one()),
            ln_shift: Tensor2D::zeros(1, d),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    fn matrices(&self) -> [&Tensor2D<T>; 6] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln_scale,
            &self.ln_shift,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut Tensor2D<T>; 6] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln_scale,
            &mut self.ln_shift,
        ]
    }
}

/// Every learnable weight of the interaction head plus its fixed
/// hyperparameters (`tau_p`, `gamma`).
///
/// Projections act on row vectors: `proj_patch_h` is `d_v x d_s` and maps a
/// patch feature into the shared grounding space.
#[derive(Debug, Clone, PartialEq)]
pub struct RegFormerParams<T> {
    pub proj_patch_h: Tensor2D<T>,
    pub proj_patch_o: Tensor2D<T>,
    pub proj_text_h: Tensor2D<T>,
    pub proj_text_o: Tensor2D<T>,
    /// `2d x d`, fuses `[q_h; q_o]` into the pairwise query.
    pub proj_query: Tensor2D<T>,
    pub attn: AttentionParams<T>,
    /// `d x d_t`, maps the decoded query into text space.
    pub proj_action: Tensor2D<T>,
    pub sig_action: SigmoidParams<T>,
    pub sig_inter_h: SigmoidParams<T>,
    pub sig_inter_o: SigmoidParams<T>,
    pub tau_p: T,
    pub gamma: T,
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn at `f32` precision so
/// checkpoints reproduce fresh weights exactly.
fn uniform_fan_in<T: Real>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor2D<T> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor2D::from_fn(fan_in, fan_out, |_, _| {
        T::lit(rng.random_range(-bound..=bound) as f64)
    })
}

pub fn init_params<T: Real>(dims: Dims, seed: u64, config: ModelConfig) -> Result<RegFormerParams<T>> {
    dims.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Dims { d_v, d_t, d_s, d } = dims;
    Ok(RegFormerParams {
        proj_patch_h: uniform_fan_in(d_v, d_s, &mut rng),
        proj_patch_o: uniform_fan_in(d_v, d_s, &mut rng),
        proj_text_h: uniform_fan_in(d_t, d_s, &mut rng),
        proj_text_o: uniform_fan_in(d_t, d_s, &mut rng),
        proj_query: uniform_fan_in(2 * d, d, &mut rng),
        attn: AttentionParams::init(d, &mut rng),
        proj_action: uniform_fan_in(d, d_t, &mut rng),
        sig_action: SigmoidParams::fresh(),
        sig_inter_h: SigmoidParams::fresh(),
        sig_inter_o: SigmoidParams::fresh(),
        tau_p: T::lit(config.tau_p),
        gamma: T::lit(config.gamma),
    })
}

impl<T: Real> RegFormerParams<T> {
    pub fn dims(&self) -> Dims {
        Dims {
            d_v: self.proj_patch_h.rows(),
            d_t: self.proj_text_h.rows(),
            d_s: self.proj_patch_h.cols(),
            d: self.proj_query.cols(),
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            tau_p: self.tau_p.to_f64_lossy(),
            gamma: self.gamma.to_f64_lossy(),
        }
    }

    /// Learnable matrices in checkpoint order.
    pub fn matrices(&self) -> Vec<&Tensor2D<T>> {
        let mut v = vec![
            &self.proj_patch_h,
            &self.proj_patch_o,
            &self.proj_text_h,
            &self.proj_text_o,
            &self.proj_query,
        ];
        v.extend(self.attn.matrices());
        v.push(&self.proj_action);
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Tensor2D<T>> {
        let mut v = vec![
            &mut self.proj_patch_h,
            &mut self.proj_patch_o,
            &mut self.proj_text_h,
            &mut self.proj_text_o,
            &mut self.proj_query,
        ];
        v.extend(self.attn.matrices_mut());
        v.push(&mut self.proj_action);
        v
    }

    pub fn sigmoids(&self) -> [&SigmoidParams<T>; 3] {
        [&self.sig_action, &self.sig_inter_h, &self.sig_inter_o]
    }

    pub fn sigmoids_mut(&mut self) -> [&mut SigmoidParams<T>; 3] {
        [
            &mut self.sig_action,
            &mut self.sig_inter_h,
            &mut self.sig_inter_o,
        ]
    }

    /// Same shapes with every learnable entry zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.matrices_mut() {
            m.data_mut().fill(T::zero());
        }
        for s in z.sigmoids_mut() {
            *s = SigmoidParams::zeros();
        }
        z
    }

    pub fn num_learnable(&self) -> usize {
        self.matrices().iter().map(|m| m.data().len()).sum::<usize>() + 6
    }

    /// Learnable entries flattened in checkpoint order, sigmoids last.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_learnable());
        for m in self.matrices() {
            out.extend_from_slice(m.data());
        }
        for s in self.sigmoids() {
            out.push(s.log_temp);
            out.push(s.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_learnable() {
            return Err(Error::Shape(format!(
                "{} values for {} learnable parameters",
                flat.len(),
                self.num_learnable()
            )));
        }
        let mut rest = flat;
        for m in self.matrices_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&rest[..n]);
            rest = &rest[n..];
        }
        for s in self.sigmoids_mut() {
            s.log_temp = rest[0];
            s.bias = rest[1];
            rest = &rest[2..];
        }
        Ok(())
    }

    /// `self += scale * other` over every learnable entry.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_scaled(b, scale)?;
        }
        for (a, b) in self.sigmoids_mut().into_iter().zip(other.sigmoids()) {
            a.log_temp = a.log_temp + scale * b.log_temp;
            a.bias = a.bias + scale * b.bias;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
            && self
                .sigmoids()
                .iter()
                .all(|s| s.log_temp.is_finite() && s.bias.is_finite())
    }

    /// Expected `(rows, cols)` of every matrix for the given dims, in checkpoint order.
    fn expected_shapes(dims: Dims) -> Vec<(usize, usize)> {
        let Dims { d_v, d_t, d_s, d } = dims;
        vec![
            (d_v, d_s),
            (d_v, d_s),
            (d_t, d_s),
            (d_t, d_s),
            (2 * d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (1, d),
            (d, d_t),
        ]
    }

    /// Encodes a checkpoint: magic, version, dims, `tau_p` and `gamma` as `f64`,
    /// every matrix as `u32 rows, u32 cols` plus `f32` payload, and finally the
    /// three sigmoid `(log_temp, bias)` pairs as `f64`.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let dims = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for d in [dims.d_v, dims.d_t, dims.d_s, dims.d] {
            put_u32(&mut out, dim_u32(d, "dimension")?);
        }
        put_f64(&mut out, self.tau_p.to_f64_lossy());
        put_f64(&mut out, self.gamma.to_f64_lossy());
        for m in self.matrices() {
            put_u32(&mut out, dim_u32(m.rows(), "rows")?);
            put_u32(&mut out, dim_u32(m.cols(), "cols")?);
            for &v in m.data() {
                put_f32(&mut out, v.to_f32().unwrap_or(f32::NAN));
            }
        }
        for s in self.sigmoids() {
            put_f64(&mut out, s.log_temp.to_f64_lossy());
            put_f64(&mut out, s.bias.to_f64_lossy());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let dims = Dims {
            d_v: r.u32("d_v")? as usize,
            d_t: r.u32("d_t")? as usize,
            d_s: r.u32("d_s")? as usize,
            d: r.u32("d")? as usize,
        };
        if let Err(e) = dims.validate() {
            return r.fail(format!("invalid dims header: {e}"));
        }
        let tau_p = r.f64("tau_p")?;
        let gamma = r.f64("gamma")?;
        let mut matrices = Vec::new();
        for (idx, (rows, cols)) in Self::expected_shapes(dims).into_iter().enumerate() {
            let at = r.offset();
            let got_rows = r.u32("matrix rows")? as usize;
            let got_cols = r.u32("matrix cols")? as usize;
            if (got_rows, got_cols) != (rows, cols) {
                return Err(Error::Format {
                    offset: at,
                    reason: format!(
                        "matrix {idx} declared {got_rows}x{got_cols}, dims header implies {rows}x{cols}"
                    ),
                });
            }
            let data = r
                .f32s(rows * cols, "matrix payload")?
                .into_iter()
                .map(|v| T::lit(v as f64))
                .collect();
            matrices.push(Tensor2D::from_vec(rows, cols, data)?);
        }
        let mut sig = || -> Result<SigmoidParams<T>> {
            Ok(SigmoidParams {
                log_temp: T::lit(r.f64("sigmoid log_temp")?),
                bias: T::lit(r.f64("sigmoid bias")?),
            })
        };
        let sig_action = sig()?;
        let sig_inter_h = sig()?;
        let sig_inter_o = sig()?;
        r.finish()?;

        let mut it = matrices.into_iter();
        let mut next = || it.next().expect("shape list length");
        let params = RegFormerParams {
            proj_patch_h: next(),
            proj_patch_o: next(),
            proj_text_h: next(),
            proj_text_o: next(),
            proj_query: next(),
            attn: AttentionParams {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln_scale: next(),
                ln_shift: next(),
            },
            proj_action: next(),
            sig_action,
            sig_inter_h,
            sig_inter_o,
            tau_p: T::lit(tau_p),
            gamma: T::lit(gamma),
        };
        if let Err(e) = params.config().validate() {
            return Err(Error::Format {
                offset: 20,
                reason: e.to_string(),
            });
        }
        Ok(params)
    }
}

pub fn save_checkpoint<T: Real>(params: &RegFormerParams<T>, path: &Path) -> Result<()> {
    fs::write(path, params.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<RegFormerParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RegFormerParams::from_checkpoint_bytes(&bytes)
}

/// Weights of the ML-Decoder baseline: one text-derived query per HOI class.
#[derive(Debug, Clone, PartialEq)]
pub struct MlDecoderParams<T> {
    /// `d_t x d`
    pub proj_query_in: Tensor2D<T>,
    pub attn: AttentionParams<T>,
    /// `d x 1` score head shared by every query.
    pub proj_out: Tensor2D<T>,
    pub sig: SigmoidParams<T>,
}

pub fn init_ml_decoder<T: Real>(d_t: usize, d: usize, seed: u64) -> Result<MlDecoderParams<T>> {
    if d_t == 0 || d == 0 {
        return Err(Error::Argument("all dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MlDecoderParams {
        proj_query_in: uniform_fan_in(d_t, d, &mut rng),
        attn: AttentionParams::init(d, &mut rng),
        proj_out: uniform_fan_in(d, 1, &mut rng),
        sig: SigmoidParams::fresh(),
    })
}
