//! Interaction decoder and the ML-Decoder baseline.
//!
//! Both share one attention block: single-head scaled dot-product
//! cross-attention over every patch, an output projection, a residual
//! connection and layer norm. No feed-forward sublayer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grounding::FeatureMap;
use crate::io::RawTensor;
use crate::numerics::{dot, masked_softmax, safe_cosine, Tensor2D, COSINE_EPS};
use crate::params::{AttentionParams, MlDecoderParams, RegFormerParams, LAYER_NORM_EPS};
use crate::{Error, Real, Result};

/// Frozen text embeddings: the human prompt, one row per object class, one row
/// per action, and optionally one row per HOI class for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingBank<T> {
    e_h: Vec<T>,
    e_o: Tensor2D<T>,
    e_a: Tensor2D<T>,
    pub object_names: Vec<String>,
    pub action_names: Vec<String>,
    hoi: Option<HoiQueries<T>>,
}

/// HOI-class text embeddings with their `(action, object)` class pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiQueries<T> {
    pub embeddings: Tensor2D<T>,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct BankSidecar {
    objects: Vec<String>,
    actions: Vec<String>,
    #[serde(default)]
    hoi: Vec<(usize, usize)>,
}

impl<T: Real> TextEmbeddingBank<T> {
    pub fn new(e_h: Vec<T>, e_o: Tensor2D<T>, e_a: Tensor2D<T>) -> Result<Self> {
        let object_names = (0..e_o.rows()).map(|k| format!("object_{k}")).collect();
        let action_names = (0..e_a.rows()).map(|a| format!("action_{a}")).collect();
        let bank = Self {
            e_h,
            e_o,
            e_a,
            object_names,
            action_names,
            hoi: None,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn with_names(mut self, objects: Vec<String>, actions: Vec<String>) -> Result<Self> {
        self.object_names = objects;
        self.action_names = actions;
        self.validate()?;
        Ok(self)
    }

    pub fn with_hoi(mut self, embeddings: Tensor2D<T>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        self.hoi = Some(HoiQueries { embeddings, pairs });
        self.validate()?;
        Ok(self)
    }

    /// Adds one HOI row per `(action, object)` pair, formed as the normalized
    /// sum of the two class embeddings.
    pub fn with_composed_hoi(self) -> Result<Self> {
        let mut rows = Vec::new();
        let mut pairs = Vec::new();
        for k in 0..self.num_objects() {
            for a in 0..self.num_actions() {
                let v: Vec<T> = self.action(a).iter().zip(self.object(k)).map(|(&x, &y)| x + y).collect();
                let n = crate::numerics::norm(&v).max(T::lit(COSINE_EPS));
                rows.push(v.into_iter().map(|x| x / n).collect());
                pairs.push((a, k));
            }
        }
        let emb = Tensor2D::from_rows(&rows)?;
        self.with_hoi(emb, pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.e_h.len();
        if d == 0 {
            return Err(Error::Shape("empty human embedding".into()));
        }
        if self.e_o.rows() == 0 || self.e_a.rows() == 0 {
            return Err(Error::Argument("bank needs at least one object and one action".into()));
        }
        if self.e_o.cols() != d || self.e_a.cols() != d {
            return Err(Error::Shape(format!(
                "embedding widths differ: human {d}, objects {}, actions {}",
                self.e_o.cols(),
                self.e_a.cols()
            )));
        }
        if self.object_names.len() != self.e_o.rows() || self.action_names.len() != self.e_a.rows() {
            return Err(Error::Shape("class-name lists do not match embedding rows".into()));
        }
        let bad_row = |r: &[T]| r.iter().any(|v| !v.is_finite()) || r.iter().all(|v| *v == T::zero());
        if bad_row(&self.e_h) || self.e_o.iter_rows().any(bad_row) || self.e_a.iter_rows().any(bad_row) {
            return Err(Error::Argument("embedding rows must be finite and nonzero".into()));
        }
        if let Some(h) = &self.hoi {
            if h.embeddings.cols() != d || h.embeddings.rows() != h.pairs.len() {
                return Err(Error::Shape("HOI embeddings do not match their pair list".into()));
            }
            if h.embeddings.iter_rows().any(bad_row) {
                return Err(Error::Argument("HOI embedding rows must be finite and nonzero".into()));
            }
            if let Some(&(a, k)) = h
                .pairs
                .iter()
                .find(|&&(a, k)| a >= self.num_actions() || k >= self.num_objects())
            {
                return Err(Error::Argument(format!("HOI pair ({a}, {k}) out of range")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.e_h.len()
    }

    pub fn num_objects(&self) -> usize {
        self.e_o.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.e_a.rows()
    }

    pub fn human(&self) -> &[T] {
        &self.e_h
    }

    pub fn object(&self, k: usize) -> &[T] {
        self.e_o.row(k)
    }

    pub fn action(&self, a: usize) -> &[T] {
        self.e_a.row(a)
    }

    pub fn objects(&self) -> &Tensor2D<T> {
        &self.e_o
    }

    pub fn actions(&self) -> &Tensor2D<T> {
        &self.e_a
    }

    pub fn hoi(&self) -> Option<&HoiQueries<T>> {
        self.hoi.as_ref()
    }

    pub fn scale_human(&mut self, s: T) {
        for v in &mut self.e_h {
            *v = *v * s;
        }
    }

    /// Reorders object classes so that new class `i` is old class `perm[i]`.
    pub fn permute_objects(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<T>> = perm.iter().map(|&k| self.object(k).to_vec()).collect();
        let names = perm.iter().map(|&k| self.object_names[k].clone()).collect();
        let mut out = self.clone();
        out.e_o = Tensor2D::from_rows(&rows)?;
        out.object_names = names;
        out.hoi = None;
        out.validate()?;
        Ok(out)
    }

    /// Sidecar path naming the rows of a bank tensor file.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the rank-2 `[1 + N_o + N_a + N_hoi, d_t]` tensor (human row,
    /// object rows, action rows, HOI rows) and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data: Vec<f32> = Vec::new();
        let mut push = |r: &[T]| data.extend(r.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        push(&self.e_h);
        self.e_o.iter_rows().for_each(&mut push);
        self.e_a.iter_rows().for_each(&mut push);
        let mut hoi_pairs = Vec::new();
        if let Some(h) = &self.hoi {
            h.embeddings.iter_rows().for_each(&mut push);
            hoi_pairs = h.pairs.clone();
        }
        let rows = 1 + self.num_objects() + self.num_actions() + hoi_pairs.len();
        RawTensor::new(vec![rows, self.dim()], data)?.write(path)?;
        let sidecar = BankSidecar {
            objects: self.object_names.clone(),
            actions: self.action_names.clone(),
            hoi: hoi_pairs,
        };
        let side = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = RawTensor::read(path)?;
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: BankSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let [rows, d] = raw.dims[..] else {
            return Err(Error::Shape(format!("bank tensor must be rank 2, got {:?}", raw.dims)));
        };
        let (n_o, n_a, n_hoi) = (sidecar.objects.len(), sidecar.actions.len(), sidecar.hoi.len());
        if rows != 1 + n_o + n_a + n_hoi {
            return Err(Error::Shape(format!(
                "bank tensor has {rows} rows, sidecar names {}",
                1 + n_o + n_a + n_hoi
            )));
        }
        let all = Tensor2D::from_vec(rows, d, raw.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        let slice = |start: usize, n: usize| -> Result<Tensor2D<T>> {
            Tensor2D::from_vec(n, d, all.data()[start * d..(start + n) * d].to_vec())
        };
        let mut bank = Self::new(all.row(0).to_vec(), slice(1, n_o)?, slice(1 + n_o, n_a)?)?
            .with_names(sidecar.objects, sidecar.actions)?;
        if n_hoi > 0 {
            bank = bank.with_hoi(slice(1 + n_o + n_a, n_hoi)?, sidecar.hoi)?;
        }
        Ok(bank)
    }
}

/// Keys and values of one feature map under one attention block; computed once
/// per image and shared by every query decoded against it.
#[derive(Debug, Clone)]
pub struct AttentionContext<T> {
    pub keys: Tensor2D<T>,
    pub values: Tensor2D<T>,
}

impl<T: Real> AttentionContext<T> {
    pub fn new(fm: &FeatureMap<T>, attn: &AttentionParams<T>) -> Result<Self> {
        if fm.dim() != attn.width() {
            return Err(Error::Shape(format!(
                "feature dim {} but attention width {}",
                fm.dim(),
                attn.width()
            )));
        }
        Ok(Self {
            keys: fm.patches().matmul(&attn.w_k)?,
            values: fm.patches().matmul(&attn.w_v)?,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.keys.rows()
    }
}

/// Intermediates of one attention pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    /// `q W_Q`
    pub query_proj: Vec<T>,
    /// Softmax weights over patches.
    pub weights: Vec<T>,
    /// `sum_p w(p) v(p)` before the output projection.
    pub attended: Vec<T>,
    /// `q + attended W_O`
    pub residual: Vec<T>,
    /// `(residual - mean) / sqrt(var + eps)`
    pub normalized: Vec<T>,
    pub inv_std: T,
    /// Layer-norm output.
    pub out: Vec<T>,
}

/// Layer norm with the block's learnable scale/shift. Returns
/// `(output, normalized, 1/std)`.
pub fn layer_norm<T: Real>(z: &[T], scale: &[T], shift: &[T]) -> (Vec<T>, Vec<T>, T) {
    let n = T::lit(z.len() as f64);
    let mean = z.iter().copied().sum::<T>() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
    let normalized: Vec<T> = z.iter().map(|&v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(scale.iter().zip(shift))
        .map(|(&x, (&g, &b))| g * x + b)
        .collect();
    (out, normalized, inv_std)
}

pub fn attend_traced<T: Real>(
    query: &[T],
    ctx: &AttentionContext<T>,
    attn: &AttentionParams<T>,
) -> Result<AttentionTrace<T>> {
    let d = attn.width();
    if query.len() != d {
        return Err(Error::Shape(format!("query of length {} for width {d}", query.len())));
    }
    let query_proj = attn.w_q.left_mul(query)?;
    let logits: Vec<T> = ctx.keys.iter_rows().map(|k| dot(&query_proj, k)).collect();
    let weights = masked_softmax(&logits, T::lit(d as f64).sqrt(), None)?;
    let attended = ctx.values.left_mul(&weights)?;
    let projected = attn.w_o.left_mul(&attended)?;
    let residual: Vec<T> = query.iter().zip(&projected).map(|(&a, &b)| a + b).collect();
    let (out, normalized, inv_std) = layer_norm(&residual, attn.ln_scale.data(), attn.ln_shift.data());
    Ok(AttentionTrace {
        query_proj,
        weights,
        attended,
        residual,
        normalized,
        inv_std,
        out,
    })
}

pub fn attend<T: Real>(query: &[T], ctx: &AttentionContext<T>, attn: &AttentionParams<T>) -> Result<Vec<T>> {
    Ok(attend_traced(query, ctx, attn)?.out)
}

/// `LayerNorm(q + W_O sum_p softmax_p(W_Q q . W_K x(p) / sqrt d) W_V x(p))`.
pub fn cross_attention<T: Real>(query: &[T], fm: &FeatureMap<T>, attn: &AttentionParams<T>) -> Result<Vec<T>> {
    let ctx = AttentionContext::new(fm, attn)?;
    attend(query, &ctx, attn)
}

/// Per-action probabilities for one pairwise query; each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionScores<T> {
    pub s_hat_a: Vec<T>,
}

/// Action head applied to a decoded query: `sigmoid(cos(q_bar P_a, e_a))`.
pub fn action_head<T: Real>(
    decoded: &[T],
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<ActionScores<T>> {
    let u = params.proj_action.left_mul(decoded)?;
    if u.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "action projection yields {} dims, bank has {}",
            u.len(),
            bank.dim()
        )));
    }
    let eps = T::lit(COSINE_EPS);
    let s_hat_a = (0..bank.num_actions())
        .map(|a| params.sig_action.apply(safe_cosine(&u, bank.action(a), eps)))
        .collect();
    Ok(ActionScores { s_hat_a })
}

pub fn decode_with_context<T: Real>(
    q_ho: &[T],
    ctx: &AttentionContext<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<ActionScores<T>> {
    let decoded = attend(q_ho, ctx, &params.attn)?;
    action_head(&decoded, bank, params)
}

pub fn interaction_decode<T: Real>(
    q_ho: &[T],
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<ActionScores<T>> {
    let ctx = AttentionContext::new(fm, &params.attn)?;
    decode_with_context(q_ho, &ctx, bank, params)
}

/// Decodes several queries against one shared context.
pub fn decode_batch<T: Real>(
    queries: &[Vec<T>],
    ctx: &AttentionContext<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<Vec<ActionScores<T>>> {
    queries
        .iter()
        .map(|q| decode_with_context(q, ctx, bank, params))
        .collect()
}

/// Baseline forward: one query per HOI class (`e_hoi W_q`), each cross-attended
/// over the whole map and scored by `sigmoid(q_bar W_p)`.
pub fn ml_decoder_forward<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &MlDecoderParams<T>,
) -> Result<Vec<T>> {
    let hoi = bank
        .hoi()
        .ok_or_else(|| Error::Config("ML-Decoder needs HOI-class embeddings in the bank".into()))?;
    let queries = hoi.embeddings.matmul(&params.proj_query_in)?;
    let ctx = AttentionContext::new(fm, &params.attn)?;
    queries
        .iter_rows()
        .map(|q| {
            let decoded = attend(q, &ctx, &params.attn)?;
            Ok(params.sig.apply(dot(&decoded, params.proj_out.data())))
        })
        .collect()
}
