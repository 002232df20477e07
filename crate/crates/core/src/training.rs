//! Image-level training: gated classification scores, focal loss, analytic
//! gradients and a cosine-scheduled gradient-descent loop.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{attend_traced, AttentionContext, AttentionTrace, TextEmbeddingBank};
use crate::grounding::{
    fuse_query, patch_importance, pool_features, project_patches, similarity_to, FeatureMap,
    ImportanceField, SimilarityField,
};
use crate::interactiveness::{image_report, patch_interactiveness, InteractivenessReport, PatchInteractiveness};
use crate::numerics::{dot, safe_cosine, safe_cosine_backward, softmax_backward, Tensor2D, COSINE_EPS};
use crate::params::{RegFormerParams, SigmoidParams};
use crate::{Error, Real, Result};

/// Scores are clamped to `[CLAMP, 1 - CLAMP]` inside the focal loss.
pub const SCORE_CLAMP: f64 = 1e-7;

/// One training image with its image-level `(action, object)` labels.
#[derive(Debug, Clone)]
pub struct ImageSample<T> {
    pub image_id: String,
    pub fm: FeatureMap<T>,
    pub labels: BTreeSet<(usize, usize)>,
}

impl<T: Real> ImageSample<T> {
    pub fn validate(&self, bank: &TextEmbeddingBank<T>) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&(a, k)| a >= bank.num_actions() || k >= bank.num_objects())
        {
            Some(&(a, k)) => Err(Error::Argument(format!(
                "image {}: label (action {a}, object {k}) out of range",
                self.image_id
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 5,
            batch_size: 8,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Argument("focal gamma must be >= 0 and alpha in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gated HOI classification scores and their ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutput<T> {
    /// `N_o x N_a` gated scores `s_a * r_ho^gamma`.
    pub scores: Tensor2D<T>,
    /// `N_o x N_a` ungated action scores.
    pub action_scores: Tensor2D<T>,
    pub interactiveness: InteractivenessReport<T>,
}

/// Every intermediate of the classification forward pass for one image.
struct ForwardCache<T> {
    patches_h: Tensor2D<T>,
    patches_o: Tensor2D<T>,
    text_h: Vec<T>,
    text_o: Vec<Vec<T>>,
    sim: SimilarityField<T>,
    alpha_h: ImportanceField<T>,
    alpha_o: Vec<ImportanceField<T>>,
    patch: PatchInteractiveness<T>,
    report: InteractivenessReport<T>,
    q_h: Vec<T>,
    q_o: Vec<Vec<T>>,
    queries: Vec<Vec<T>>,
    ctx: AttentionContext<T>,
    traces: Vec<AttentionTrace<T>>,
    action_proj: Vec<Vec<T>>,
    cosines: Tensor2D<T>,
    action_scores: Tensor2D<T>,
    gates: Vec<T>,
    scores: Tensor2D<T>,
}

fn check_dims<T: Real>(fm: &FeatureMap<T>, bank: &TextEmbeddingBank<T>, params: &RegFormerParams<T>) -> Result<()> {
    let dims = params.dims();
    if fm.dim() != dims.d_v || bank.dim() != dims.d_t {
        return Err(Error::Shape(format!(
            "inputs (d_v = {}, d_t = {}) do not match model {:?}",
            fm.dim(),
            bank.dim(),
            dims
        )));
    }
    Ok(())
}

/// `r^gamma`, with `gamma = 0` giving exactly one.
#[inline]
fn gate<T: Real>(r: T, gamma: T) -> T {
    if gamma == T::zero() {
        T::one()
    } else {
        r.powf(gamma)
    }
}

fn forward_cached<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<ForwardCache<T>> {
    check_dims(fm, bank, params)?;
    let n_o = bank.num_objects();
    let n_a = bank.num_actions();

    let patches_h = project_patches(fm, &params.proj_patch_h)?;
    let patches_o = project_patches(fm, &params.proj_patch_o)?;
    let text_h = params.proj_text_h.left_mul(bank.human())?;
    let text_o = (0..n_o)
        .map(|k| params.proj_text_o.left_mul(bank.object(k)))
        .collect::<Result<Vec<_>>>()?;
    let sim = SimilarityField {
        s_h: similarity_to(&patches_h, &text_h),
        s_o: text_o.iter().map(|t| similarity_to(&patches_o, t)).collect(),
    };

    let alpha_h = patch_importance(&sim.s_h, params.tau_p, None)?;
    let alpha_o = sim
        .s_o
        .iter()
        .map(|s| patch_importance(s, params.tau_p, None))
        .collect::<Result<Vec<_>>>()?;
    let patch = patch_interactiveness(&sim, params);
    let report = image_report(&alpha_h, &alpha_o, &patch)?;

    let q_h = pool_features(&alpha_h, fm)?;
    let q_o = alpha_o
        .iter()
        .map(|a| pool_features(a, fm))
        .collect::<Result<Vec<_>>>()?;
    let queries = q_o
        .iter()
        .map(|qo| fuse_query(&q_h, qo, params))
        .collect::<Result<Vec<_>>>()?;

    let ctx = AttentionContext::new(fm, &params.attn)?;
    let traces = queries
        .iter()
        .map(|q| attend_traced(q, &ctx, &params.attn))
        .collect::<Result<Vec<_>>>()?;
    let action_proj = traces
        .iter()
        .map(|t| params.proj_action.left_mul(&t.out))
        .collect::<Result<Vec<_>>>()?;

    let eps = T::lit(COSINE_EPS);
    let cosines = Tensor2D::from_fn(n_o, n_a, |k, a| safe_cosine(&action_proj[k], bank.action(a), eps));
    let action_scores = cosines.map(|c| params.sig_action.apply(c));
    let gates: Vec<T> = report.r_ho.iter().map(|&r| gate(r, params.gamma)).collect();
    let scores = Tensor2D::from_fn(n_o, n_a, |k, a| action_scores.get(k, a) * gates[k]);
    if !scores.is_finite() {
        return Err(Error::Numerical {
            op: "classification_forward",
            detail: "non-finite HOI score".into(),
        });
    }

    Ok(ForwardCache {
        patches_h,
        patches_o,
        text_h,
        text_o,
        sim,
        alpha_h,
        alpha_o,
        patch,
        report,
        q_h,
        q_o,
        queries,
        ctx,
        traces,
        action_proj,
        cosines,
        action_scores,
        gates,
        scores,
    })
}

/// Image-level HOI scores `s_a[k] * r_ho[k]^gamma` for every object class `k`.
pub fn classification_forward<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<ClassificationOutput<T>> {
    let c = forward_cached(fm, bank, params)?;
    Ok(ClassificationOutput {
        scores: c.scores,
        action_scores: c.action_scores,
        interactiveness: c.report,
    })
}

fn is_positive(labels: &BTreeSet<(usize, usize)>, object: usize, action: usize) -> bool {
    labels.contains(&(action, object))
}

fn check_scores<T: Real>(scores: &Tensor2D<T>) -> Result<()> {
    if scores.data().iter().any(|s| !(*s >= T::zero() && *s <= T::one())) {
        return Err(Error::Numerical {
            op: "focal_loss",
            detail: "scores must lie in [0, 1]".into(),
        });
    }
    Ok(())
}

/// Mean binary focal loss over every `(object, action)` cell.
pub fn focal_loss<T: Real>(
    scores: &Tensor2D<T>,
    labels: &BTreeSet<(usize, usize)>,
    focal_gamma: T,
    focal_alpha: T,
) -> Result<T> {
    check_scores(scores)?;
    let lo = T::lit(SCORE_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for k in 0..scores.rows() {
        for a in 0..scores.cols() {
            let s = scores.get(k, a).max(lo).min(hi);
            total = total
                + if is_positive(labels, k, a) {
                    -focal_alpha * (T::one() - s).powf(focal_gamma) * s.ln()
                } else {
                    -(T::one() - focal_alpha) * s.powf(focal_gamma) * (T::one() - s).ln()
                };
        }
    }
    Ok(total / T::lit((scores.rows() * scores.cols()) as f64))
}

/// `dL/ds` of [`focal_loss`]; zero where the clamp is active.
pub fn focal_loss_grad<T: Real>(
    scores: &Tensor2D<T>,
    labels: &BTreeSet<(usize, usize)>,
    focal_gamma: T,
    focal_alpha: T,
) -> Result<Tensor2D<T>> {
    check_scores(scores)?;
    let lo = T::lit(SCORE_CLAMP);
    let hi = T::one() - lo;
    let n = T::lit((scores.rows() * scores.cols()) as f64);
    let g = focal_gamma;
    Ok(Tensor2D::from_fn(scores.rows(), scores.cols(), |k, a| {
        let s = scores.get(k, a);
        if s < lo || s > hi {
            return T::zero();
        }
        let d = if is_positive(labels, k, a) {
            let m = T::one() - s;
            let focus = if g == T::zero() { T::zero() } else { g * m.powf(g - T::one()) * s.ln() };
            focal_alpha * (focus - m.powf(g) / s)
        } else {
            let m = T::one() - s;
            let focus = if g == T::zero() { T::zero() } else { g * s.powf(g - T::one()) * m.ln() };
            -(T::one() - focal_alpha) * (focus - s.powf(g) / m)
        };
        d / n
    }))
}

/// Accumulates the scaled-sigmoid gradient for `y = sigmoid(exp(lt) z + b)` and
/// returns `dL/dz`.
#[inline]
fn sigmoid_backward<T: Real>(grad: &mut SigmoidParams<T>, sig: &SigmoidParams<T>, z: T, y: T, upstream: T) -> T {
    let dy = upstream * y * (T::one() - y);
    let scale = sig.log_temp.exp();
    grad.log_temp = grad.log_temp + dy * scale * z;
    grad.bias = grad.bias + dy;
    dy * scale
}

fn ensure_finite<T: Real>(values: &[T], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            op,
            detail: "non-finite gradient".into(),
        })
    }
}

/// Backward through one grounding branch: from `dL/dalpha` and `dL/ds_hat`
/// down to the similarity field, then through the cosine into the projected
/// patches (accumulated in `d_patches`) and the projected text anchor.
#[allow(clippy::too_many_arguments)]
fn grounding_branch_backward<T: Real>(
    d_alpha: &[T],
    d_shat: &[T],
    alpha: &ImportanceField<T>,
    sim: &[T],
    shat: &[T],
    sig: &SigmoidParams<T>,
    sig_grad: &mut SigmoidParams<T>,
    tau_p: T,
    projected: &Tensor2D<T>,
    anchor: &[T],
    d_patches: &mut Tensor2D<T>,
) -> Vec<T> {
    let mut d_sim = softmax_backward(&alpha.alpha, d_alpha, tau_p);
    for p in 0..sim.len() {
        d_sim[p] = d_sim[p] + sigmoid_backward(sig_grad, sig, sim[p], shat[p], d_shat[p]);
    }
    let eps = T::lit(COSINE_EPS);
    let mut d_anchor = vec![T::zero(); anchor.len()];
    for (p, &ds) in d_sim.iter().enumerate() {
        if ds == T::zero() {
            continue;
        }
        let (du, dv) = safe_cosine_backward(projected.row(p), anchor, eps, ds);
        for (a, b) in d_patches.row_mut(p).iter_mut().zip(&du) {
            *a = *a + *b;
        }
        for (a, b) in d_anchor.iter_mut().zip(&dv) {
            *a = *a + *b;
        }
    }
    d_anchor
}

/// Focal loss of one image and its analytic gradient for every learnable
/// parameter (`tau_p` and `gamma` are fixed and get no gradient).
pub fn backward<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    labels: &BTreeSet<(usize, usize)>,
    focal_gamma: T,
    focal_alpha: T,
) -> Result<(T, RegFormerParams<T>)> {
    let c = forward_cached(fm, bank, params)?;
    let loss = focal_loss(&c.scores, labels, focal_gamma, focal_alpha)?;
    let d_scores = focal_loss_grad(&c.scores, labels, focal_gamma, focal_alpha)?;

    let mut g = params.zeros_like();
    let n_o = bank.num_objects();
    let n_a = bank.num_actions();
    let d = params.dims().d;
    let n_p = fm.num_patches();
    let eps = T::lit(COSINE_EPS);
    let two = T::lit(2.0);
    let sqrt_d = T::lit(d as f64).sqrt();

    let mut d_keys = Tensor2D::zeros(n_p, d);
    let mut d_values = Tensor2D::zeros(n_p, d);
    let mut d_q_h = vec![T::zero(); d];
    let mut d_r_h = T::zero();
    let mut d_patches_o = Tensor2D::zeros(n_p, params.dims().d_s);

    for k in 0..n_o {
        // Gate: scores = s_a * r_ho^gamma.
        let mut d_gate = T::zero();
        let mut d_sa = vec![T::zero(); n_a];
        for a in 0..n_a {
            d_sa[a] = d_scores.get(k, a) * c.gates[k];
            d_gate = d_gate + d_scores.get(k, a) * c.action_scores.get(k, a);
        }
        let r_ho = c.report.r_ho[k];
        let d_r_ho = if params.gamma == T::zero() {
            T::zero()
        } else {
            d_gate * params.gamma * r_ho.powf(params.gamma - T::one())
        };
        d_r_h = d_r_h + d_r_ho * r_ho / (two * c.report.r_h);
        let d_r_o = d_r_ho * r_ho / (two * c.report.r_o[k]);

        // Action head.
        let u = &c.action_proj[k];
        let mut d_u = vec![T::zero(); u.len()];
        for a in 0..n_a {
            let dz = sigmoid_backward(
                &mut g.sig_action,
                &params.sig_action,
                c.cosines.get(k, a),
                c.action_scores.get(k, a),
                d_sa[a],
            );
            let (du, _) = safe_cosine_backward(u, bank.action(a), eps, dz);
            for (x, y) in d_u.iter_mut().zip(&du) {
                *x = *x + *y;
            }
        }
        let tr = &c.traces[k];
        g.proj_action.add_outer(&tr.out, &d_u);
        let d_out = params.proj_action.right_mul(&d_u)?;

        // Layer norm.
        let scale = params.attn.ln_scale.data();
        let mut d_norm = vec![T::zero(); d];
        for j in 0..d {
            g.attn.ln_shift.data_mut()[j] = g.attn.ln_shift.data()[j] + d_out[j];
            g.attn.ln_scale.data_mut()[j] = g.attn.ln_scale.data()[j] + d_out[j] * tr.normalized[j];
            d_norm[j] = d_out[j] * scale[j];
        }
        let dn = T::lit(d as f64);
        let mean_dn = d_norm.iter().copied().sum::<T>() / dn;
        let mean_dnx = dot(&d_norm, &tr.normalized) / dn;
        let d_resid: Vec<T> = (0..d)
            .map(|j| tr.inv_std * (d_norm[j] - mean_dn - tr.normalized[j] * mean_dnx))
            .collect();

        // Residual and output projection.
        let mut d_query = d_resid.clone();
        g.attn.w_o.add_outer(&tr.attended, &d_resid);
        let d_att = params.attn.w_o.right_mul(&d_resid)?;

        // Attention-weighted values.
        let d_weights: Vec<T> = c.ctx.values.iter_rows().map(|v| dot(&d_att, v)).collect();
        for p in 0..n_p {
            let w = tr.weights[p];
            for (x, &y) in d_values.row_mut(p).iter_mut().zip(&d_att) {
                *x = *x + w * y;
            }
        }
        let d_logits = softmax_backward(&tr.weights, &d_weights, sqrt_d);
        let mut d_qp = vec![T::zero(); d];
        for p in 0..n_p {
            let dl = d_logits[p];
            for (x, &kv) in d_qp.iter_mut().zip(c.ctx.keys.row(p)) {
                *x = *x + dl * kv;
            }
            for (x, &qv) in d_keys.row_mut(p).iter_mut().zip(&tr.query_proj) {
                *x = *x + dl * qv;
            }
        }
        g.attn.w_q.add_outer(&c.queries[k], &d_qp);
        for (x, y) in d_query.iter_mut().zip(params.attn.w_q.right_mul(&d_qp)?) {
            *x = *x + y;
        }

        // Query fusion.
        let mut cat = c.q_h.clone();
        cat.extend_from_slice(&c.q_o[k]);
        g.proj_query.add_outer(&cat, &d_query);
        let d_cat = params.proj_query.right_mul(&d_query)?;
        for j in 0..d {
            d_q_h[j] = d_q_h[j] + d_cat[j];
        }
        let d_q_o = &d_cat[d..];

        // Object grounding branch for class k.
        let alpha = &c.alpha_o[k];
        let shat = &c.patch.s_hat_o[k];
        let d_alpha: Vec<T> = (0..n_p)
            .map(|p| dot(d_q_o, fm.patch(p)) + d_r_o * shat[p])
            .collect();
        let d_shat: Vec<T> = alpha.alpha.iter().map(|&a| d_r_o * a).collect();
        let d_text_o = grounding_branch_backward(
            &d_alpha,
            &d_shat,
            alpha,
            &c.sim.s_o[k],
            shat,
            &params.sig_inter_o,
            &mut g.sig_inter_o,
            params.tau_p,
            &c.patches_o,
            &c.text_o[k],
            &mut d_patches_o,
        );
        g.proj_text_o.add_outer(bank.object(k), &d_text_o);
    }

    // Human grounding branch, shared by every object class.
    let shat_h = &c.patch.s_hat_h;
    let d_alpha_h: Vec<T> = (0..n_p)
        .map(|p| dot(&d_q_h, fm.patch(p)) + d_r_h * shat_h[p])
        .collect();
    let d_shat_h: Vec<T> = c.alpha_h.alpha.iter().map(|&a| d_r_h * a).collect();
    let mut d_patches_h = Tensor2D::zeros(n_p, params.dims().d_s);
    let d_text_h = grounding_branch_backward(
        &d_alpha_h,
        &d_shat_h,
        &c.alpha_h,
        &c.sim.s_h,
        shat_h,
        &params.sig_inter_h,
        &mut g.sig_inter_h,
        params.tau_p,
        &c.patches_h,
        &c.text_h,
        &mut d_patches_h,
    );
    g.proj_text_h.add_outer(bank.human(), &d_text_h);

    let xt = fm.patches().transpose();
    g.proj_patch_h.add_scaled(&xt.matmul(&d_patches_h)?, T::one())?;
    g.proj_patch_o.add_scaled(&xt.matmul(&d_patches_o)?, T::one())?;
    g.attn.w_k.add_scaled(&xt.matmul(&d_keys)?, T::one())?;
    g.attn.w_v.add_scaled(&xt.matmul(&d_values)?, T::one())?;

    ensure_finite(&[loss], "focal_loss")?;
    ensure_finite(&g.flatten(), "backward")?;
    Ok((loss, g))
}

/// Mean focal loss over a dataset.
pub fn dataset_loss<T: Real>(
    dataset: &[ImageSample<T>],
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (fg, fa) = (T::lit(cfg.focal_gamma), T::lit(cfg.focal_alpha));
    let losses = dataset
        .par_iter()
        .map(|s| {
            let out = classification_forward(&s.fm, bank, params)?;
            Ok(focal_loss(&out.scores, &s.labels, fg, fa)?.to_f64_lossy())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub params: RegFormerParams<T>,
    /// Mean pre-update loss of every sample seen in each epoch.
    pub epoch_losses: Vec<f64>,
    /// Dataset loss before the first update.
    pub initial_loss: f64,
    /// Dataset loss after the last update.
    pub final_loss: f64,
    pub steps: usize,
}

/// Learning rate at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos())
}

/// Mini-batch gradient descent with a cosine schedule. Shuffling is seeded, and
/// per-sample gradients are reduced in batch order so runs are reproducible.
pub fn train<T: Real>(
    dataset: &[ImageSample<T>],
    bank: &TextEmbeddingBank<T>,
    init: RegFormerParams<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    cfg.validate()?;
    for s in dataset {
        s.validate(bank)?;
    }
    let (fg, fa) = (T::lit(cfg.focal_gamma), T::lit(cfg.focal_alpha));
    let mut params = init;
    let initial_loss = dataset_loss(dataset, bank, &params, cfg)?;

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset[i];
                    backward(&s.fm, bank, &params, &s.labels, fg, fa)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = params.zeros_like();
            let inv = T::one() / T::lit(batch.len() as f64);
            for (loss, g) in &results {
                epoch_total += loss.to_f64_lossy();
                grad.add_scaled(g, inv)?;
            }
            let lr = cosine_lr(cfg.lr, step, total);
            params.add_scaled(&grad, T::lit(-lr))?;
            step += 1;
        }
        epoch_losses.push(epoch_total / dataset.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::Numerical {
            op: "train",
            detail: "parameters diverged".into(),
        });
    }
    let final_loss = dataset_loss(dataset, bank, &params, cfg)?;
    Ok(TrainReport {
        params,
        epoch_losses,
        initial_loss,
        final_loss,
        steps: total,
    })
}
