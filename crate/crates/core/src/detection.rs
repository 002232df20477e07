//! Training-free instance-level HOI detection: proposal filtering, box-restricted
//! importance and instance interactiveness, and the fused pairwise score.

use std::cmp::Ordering;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{action_head, decode_with_context, layer_norm, ActionScores, AttentionContext, TextEmbeddingBank};
use crate::grounding::{
    box_to_mask, fuse_query, patch_importance, patch_similarity, pool_features, FeatureMap,
    ImportanceField, NormBox, RegionMask, SimilarityField,
};
use crate::interactiveness::{
    instance_interactiveness, pairwise_interactiveness, patch_interactiveness, InstanceInteractiveness,
    PatchInteractiveness,
};
use crate::numerics::{dot, masked_softmax, Tensor2D};
use crate::params::RegFormerParams;
use crate::{Error, Real, Result};

/// One detector proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: NormBox,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(self.score > 0.0 && self.score <= 1.0) {
            return Err(Error::Argument(format!("detection score {} outside (0, 1]", self.score)));
        }
        Ok(())
    }
}

/// Detections of one image as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        for d in &file.detections {
            d.validate()?;
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub score_threshold: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Exponent on the detector confidence `s_h * s_o`.
    pub lambda: f64,
    pub human_class_id: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::hico()
    }
}

impl DetectorConfig {
    pub const HICO_LAMBDA: f64 = 0.5;
    pub const VCOCO_LAMBDA: f64 = 2.0;

    pub fn hico() -> Self {
        Self {
            score_threshold: 0.2,
            min_instances: 3,
            max_instances: 15,
            lambda: Self::HICO_LAMBDA,
            human_class_id: 0,
        }
    }

    pub fn vcoco() -> Self {
        Self {
            lambda: Self::VCOCO_LAMBDA,
            ..Self::hico()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "score threshold {} outside [0, 1)",
                self.score_threshold
            )));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "min_instances {} exceeds max_instances {}",
                self.min_instances, self.max_instances
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Proposals {
    pub humans: Vec<Detection>,
    pub objects: Vec<Detection>,
}

fn select(mut side: Vec<Detection>, cfg: &DetectorConfig) -> Vec<Detection> {
    // Stable sort keeps input order among equal scores.
    side.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let passing = side.iter().take_while(|d| d.score >= cfg.score_threshold).count();
    let keep = passing.max(cfg.min_instances.min(side.len())).min(cfg.max_instances);
    side.truncate(keep);
    side
}

/// Splits proposals into humans and objects and keeps, per side, the ones
/// above threshold, padded with the best rejected ones up to `min_instances`
/// and truncated to `max_instances`.
pub fn filter_proposals(dets: &[Detection], cfg: &DetectorConfig) -> Proposals {
    let (humans, objects): (Vec<Detection>, Vec<Detection>) =
        dets.iter().partition(|d| d.class_id == cfg.human_class_id);
    Proposals {
        humans: select(humans, cfg),
        objects: select(objects, cfg),
    }
}

/// Exact counts of the expensive passes, for instrumentation.
#[derive(Debug, Default)]
pub struct PassCounter {
    grounding: AtomicUsize,
    attention: AtomicUsize,
    decoder: AtomicUsize,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Full similarity-field computations over the image.
    pub fn grounding_passes(&self) -> usize {
        self.grounding.load(AtomicOrdering::Relaxed)
    }

    /// Key/value projections of a whole (possibly cropped) feature map.
    pub fn attention_passes(&self) -> usize {
        self.attention.load(AtomicOrdering::Relaxed)
    }

    /// Decoder forwards (one per pairwise query, or per baseline crop).
    pub fn decoder_forwards(&self) -> usize {
        self.decoder.load(AtomicOrdering::Relaxed)
    }

    pub fn reset(&self) {
        self.grounding.store(0, AtomicOrdering::Relaxed);
        self.attention.store(0, AtomicOrdering::Relaxed);
        self.decoder.store(0, AtomicOrdering::Relaxed);
    }

    pub(crate) fn add_grounding(&self) {
        self.grounding.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub(crate) fn add_attention(&self) {
        self.attention.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub(crate) fn add_decoder(&self) {
        self.decoder.fetch_add(1, AtomicOrdering::Relaxed);
    }
}

/// Factors of the fused score: `score = s_a * r_ho^gamma * det`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreFactors<T> {
    pub s_a: T,
    pub r_ho: T,
    /// Detector confidence already raised to lambda, `(s_h s_o)^lambda`.
    pub det: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoiPrediction<T> {
    /// Index into the filtered human list.
    pub human: usize,
    /// Index into the filtered object list.
    pub object: usize,
    pub human_box: NormBox,
    pub object_box: NormBox,
    pub object_class: usize,
    pub action: usize,
    pub score: T,
    pub factors: ScoreFactors<T>,
    pub human_gate: InstanceInteractiveness<T>,
    pub object_gate: InstanceInteractiveness<T>,
}

impl<T: Real> HoiPrediction<T> {
    /// Recomputes the score from its factors.
    pub fn recompose(&self, gamma: T) -> T {
        self.factors.s_a * gamma_gate(self.factors.r_ho, gamma) * self.factors.det
    }
}

/// An object proposal dropped because its class is not in the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedObject {
    pub object: usize,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput<T> {
    pub predictions: Vec<HoiPrediction<T>>,
    pub skipped: Vec<SkippedObject>,
}

impl<T> DetectOutput<T> {
    fn empty() -> Self {
        Self {
            predictions: Vec::new(),
            skipped: Vec::new(),
        }
    }
}

#[inline]
fn gamma_gate<T: Real>(r: T, gamma: T) -> T {
    if gamma == T::zero() {
        T::one()
    } else {
        r.powf(gamma)
    }
}

fn det_factor<T: Real>(s_h: f64, s_o: f64, lambda: f64) -> T {
    if lambda == 0.0 {
        T::one()
    } else {
        T::lit((s_h * s_o).powf(lambda))
    }
}

/// Per-instance quantities that do not depend on the partner instance.
struct Instance<T> {
    det: Detection,
    /// Object class row in the bank (`None` for humans).
    class: Option<usize>,
    query: Vec<T>,
    gate: InstanceInteractiveness<T>,
}

fn instance<T: Real>(
    det: &Detection,
    class: Option<usize>,
    fm: &FeatureMap<T>,
    field: &[T],
    s_hat: &[T],
    alpha_image: &ImportanceField<T>,
    tau_p: T,
) -> Result<Instance<T>> {
    let mask: RegionMask = box_to_mask(&det.bbox, fm)?;
    let alpha = patch_importance(field, tau_p, Some(&mask))?;
    let query = pool_features(&alpha, fm)?;
    let gate = instance_interactiveness(&alpha, s_hat, alpha_image, &mask)?;
    Ok(Instance {
        det: *det,
        class,
        query,
        gate,
    })
}

/// Shared per-image state: similarity and interactiveness fields, image-level
/// importance and the attention keys/values.
struct ImageContext<T> {
    sim: SimilarityField<T>,
    patch: PatchInteractiveness<T>,
    alpha_h: ImportanceField<T>,
    alpha_o: Vec<ImportanceField<T>>,
    ctx: AttentionContext<T>,
}

impl<T: Real> ImageContext<T> {
    fn new(
        fm: &FeatureMap<T>,
        bank: &TextEmbeddingBank<T>,
        params: &RegFormerParams<T>,
        counter: Option<&PassCounter>,
    ) -> Result<Self> {
        let sim = patch_similarity(fm, bank, params)?;
        let patch = patch_interactiveness(&sim, params);
        let alpha_h = patch_importance(&sim.s_h, params.tau_p, None)?;
        let alpha_o = sim
            .s_o
            .iter()
            .map(|s| patch_importance(s, params.tau_p, None))
            .collect::<Result<Vec<_>>>()?;
        let ctx = AttentionContext::new(fm, &params.attn)?;
        if let Some(c) = counter {
            c.add_grounding();
            c.add_attention();
        }
        Ok(Self {
            sim,
            patch,
            alpha_h,
            alpha_o,
            ctx,
        })
    }

    fn human(&self, det: &Detection, fm: &FeatureMap<T>, tau_p: T) -> Result<Instance<T>> {
        instance(det, None, fm, &self.sim.s_h, &self.patch.s_hat_h, &self.alpha_h, tau_p)
    }

    fn object(&self, det: &Detection, fm: &FeatureMap<T>, tau_p: T) -> Result<Instance<T>> {
        let k = det.class_id;
        instance(det, Some(k), fm, &self.sim.s_o[k], &self.patch.s_hat_o[k], &self.alpha_o[k], tau_p)
    }
}

fn check_inputs<T: Real>(
    bank: &TextEmbeddingBank<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
) -> Result<Vec<SkippedObject>> {
    cfg.validate()?;
    for d in humans.iter().chain(objects) {
        d.validate()?;
    }
    Ok(objects
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id >= bank.num_objects())
        .map(|(j, d)| {
            warn!("object proposal {j} has class {} outside the bank; skipped", d.class_id);
            SkippedObject {
                object: j,
                class_id: d.class_id,
            }
        })
        .collect())
}

/// Half of a pairwise query contributed by one instance, pushed through every
/// linear step of the decoder that precedes the attention softmax.
struct QueryPart<T> {
    /// `q_x P_q` restricted to this instance's rows of `P_q`.
    fused: Vec<T>,
    /// Attention logits `fused W_Q . k(p)`.
    logits: Vec<T>,
}

/// Decoder state shared by all pairs of one image. The query projection is
/// linear in `[q_h; q_o]`, so each side is projected once per instance and
/// pairs only add the halves before the softmax.
struct SharedDecoder<'a, T> {
    keys: &'a Tensor2D<T>,
    proj_h: Tensor2D<T>,
    proj_o: Tensor2D<T>,
    /// `V W_O`, so the attended output needs one product per pair.
    values_out: Tensor2D<T>,
}

impl<'a, T: Real> SharedDecoder<'a, T> {
    fn new(ctx: &'a AttentionContext<T>, params: &RegFormerParams<T>) -> Result<Self> {
        let d = params.attn.width();
        let pq = &params.proj_query;
        if pq.shape() != (2 * d, d) {
            return Err(Error::Shape(format!("query projection {:?} for width {d}", pq.shape())));
        }
        Ok(Self {
            keys: &ctx.keys,
            proj_h: Tensor2D::from_fn(d, d, |i, j| pq.get(i, j)),
            proj_o: Tensor2D::from_fn(d, d, |i, j| pq.get(d + i, j)),
            values_out: ctx.values.matmul(&params.attn.w_o)?,
        })
    }

    fn part(&self, pooled: &[T], human: bool, params: &RegFormerParams<T>) -> Result<QueryPart<T>> {
        let fused = if human { &self.proj_h } else { &self.proj_o }.left_mul(pooled)?;
        let projected = params.attn.w_q.left_mul(&fused)?;
        let logits = self.keys.iter_rows().map(|k| dot(&projected, k)).collect();
        Ok(QueryPart { fused, logits })
    }

    fn decode(
        &self,
        h: &QueryPart<T>,
        o: &QueryPart<T>,
        bank: &TextEmbeddingBank<T>,
        params: &RegFormerParams<T>,
    ) -> Result<ActionScores<T>> {
        let logits: Vec<T> = h.logits.iter().zip(&o.logits).map(|(&a, &b)| a + b).collect();
        let weights = masked_softmax(&logits, T::lit(params.attn.width() as f64).sqrt(), None)?;
        let attended = self.values_out.left_mul(&weights)?;
        let residual: Vec<T> = h
            .fused
            .iter()
            .zip(&o.fused)
            .zip(&attended)
            .map(|((&a, &b), &c)| a + b + c)
            .collect();
        let (decoded, _, _) = layer_norm(&residual, params.attn.ln_scale.data(), params.attn.ln_shift.data());
        action_head(&decoded, bank, params)
    }
}

fn assemble<T: Real>(
    (i, h): (usize, &Instance<T>),
    (j, o): (usize, &Instance<T>),
    actions: ActionScores<T>,
    params: &RegFormerParams<T>,
    cfg: &DetectorConfig,
    counter: Option<&PassCounter>,
) -> Result<Vec<HoiPrediction<T>>> {
    if let Some(c) = counter {
        c.add_decoder();
    }
    let r_ho = pairwise_interactiveness(h.gate.r, o.gate.r)?;
    let gate = gamma_gate(r_ho, params.gamma);
    let det = det_factor::<T>(h.det.score, o.det.score, cfg.lambda);
    let class = o.class.expect("object instance carries a class");
    Ok(actions
        .s_hat_a
        .iter()
        .enumerate()
        .map(|(a, &s_a)| HoiPrediction {
            human: i,
            object: j,
            human_box: h.det.bbox,
            object_box: o.det.bbox,
            object_class: class,
            action: a,
            score: s_a * gate * det,
            factors: ScoreFactors { s_a, r_ho, det },
            human_gate: h.gate,
            object_gate: o.gate,
        })
        .collect())
}

fn detect_impl<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
    counter: Option<&PassCounter>,
    parallel: bool,
) -> Result<DetectOutput<T>> {
    let skipped = check_inputs(bank, humans, objects, cfg)?;
    if humans.is_empty() || objects.len() == skipped.len() {
        return Ok(DetectOutput {
            predictions: Vec::new(),
            skipped,
        });
    }
    let image = ImageContext::new(fm, bank, params, counter)?;
    let hs = humans
        .iter()
        .map(|d| image.human(d, fm, params.tau_p))
        .collect::<Result<Vec<_>>>()?;
    let os = objects
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id < bank.num_objects())
        .map(|(j, d)| Ok((j, image.object(d, fm, params.tau_p)?)))
        .collect::<Result<Vec<_>>>()?;

    if hs.len() == 1 && os.len() == 1 {
        // Nothing to share: decode directly, bit-identical to the naive path.
        let (j, o) = &os[0];
        let q = fuse_query(&hs[0].query, &o.query, params)?;
        let actions = decode_with_context(&q, &image.ctx, bank, params)?;
        return Ok(DetectOutput {
            predictions: assemble((0, &hs[0]), (*j, o), actions, params, cfg, counter)?,
            skipped,
        });
    }
    let shared = SharedDecoder::new(&image.ctx, params)?;
    let h_parts = hs
        .iter()
        .map(|h| shared.part(&h.query, true, params))
        .collect::<Result<Vec<_>>>()?;
    let o_parts = os
        .iter()
        .map(|(_, o)| shared.part(&o.query, false, params))
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(usize, usize)> = (0..hs.len())
        .flat_map(|i| (0..os.len()).map(move |jj| (i, jj)))
        .collect();
    let run = |&(i, jj): &(usize, usize)| {
        let (j, o) = &os[jj];
        let actions = shared.decode(&h_parts[i], &o_parts[jj], bank, params)?;
        assemble((i, &hs[i]), (*j, o), actions, params, cfg, counter)
    };
    let per_pair: Vec<Vec<HoiPrediction<T>>> = if parallel {
        pairs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        pairs.iter().map(run).collect::<Result<_>>()?
    };
    Ok(DetectOutput {
        predictions: per_pair.into_iter().flatten().collect(),
        skipped,
    })
}

/// Fused HOI predictions for every (human, object) pair, ordered by human
/// index, object index and action. Per-image fields, image-level importance,
/// attention keys/values and per-instance queries are computed once and shared.
pub fn detect<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
) -> Result<DetectOutput<T>> {
    detect_impl(fm, bank, params, humans, objects, cfg, None, false)
}

/// [`detect`] with pass instrumentation.
pub fn detect_counted<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
    counter: &PassCounter,
) -> Result<DetectOutput<T>> {
    detect_impl(fm, bank, params, humans, objects, cfg, Some(counter), false)
}

/// [`detect`] with the per-pair decode spread over the rayon pool. Output order
/// is identical.
pub fn detect_parallel<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
) -> Result<DetectOutput<T>> {
    detect_impl(fm, bank, params, humans, objects, cfg, None, true)
}

/// Reference implementation: every pair recomputes every field from scratch.
pub fn detect_naive<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
) -> Result<DetectOutput<T>> {
    detect_naive_counted(fm, bank, params, humans, objects, cfg, &PassCounter::new())
}

pub fn detect_naive_counted<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
    humans: &[Detection],
    objects: &[Detection],
    cfg: &DetectorConfig,
    counter: &PassCounter,
) -> Result<DetectOutput<T>> {
    let skipped = check_inputs(bank, humans, objects, cfg)?;
    let mut out = DetectOutput::empty();
    out.skipped = skipped;
    for (i, h) in humans.iter().enumerate() {
        for (j, o) in objects.iter().enumerate() {
            if o.class_id >= bank.num_objects() {
                continue;
            }
            let image = ImageContext::new(fm, bank, params, Some(counter))?;
            let hi = image.human(h, fm, params.tau_p)?;
            let oi = image.object(o, fm, params.tau_p)?;
            let q = fuse_query(&hi.query, &oi.query, params)?;
            let actions = decode_with_context(&q, &image.ctx, bank, params)?;
            out.predictions
                .extend(assemble((i, &hi), (j, &oi), actions, params, cfg, Some(counter))?);
        }
    }
    Ok(out)
}

/// Scores of one prediction as written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRecord {
    pub s_a: f64,
    pub r_ho: f64,
    pub det: f64,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub human_box: NormBox,
    pub object_box: NormBox,
    pub object_class: usize,
    pub action: usize,
    pub score: f64,
    pub factors: FactorRecord,
}

impl PredictionRecord {
    pub fn from_prediction<T: Real>(image_id: &str, p: &HoiPrediction<T>) -> Self {
        Self {
            image_id: image_id.to_string(),
            human_box: p.human_box,
            object_box: p.object_box,
            object_class: p.object_class,
            action: p.action,
            score: p.score.to_f64_lossy(),
            factors: FactorRecord {
                s_a: p.factors.s_a.to_f64_lossy(),
                r_ho: p.factors.r_ho.to_f64_lossy(),
                det: p.factors.det.to_f64_lossy(),
            },
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_prediction_lines(&mut w, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_prediction_lines(w: &mut impl Write, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2D;
    use crate::params::{init_params, Dims, ModelConfig};
    use crate::training::classification_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: NormBox::from(b),
            score,
            class_id,
        }
    }

    fn scene(seed: u64) -> (FeatureMap<f64>, TextEmbeddingBank<f64>, RegFormerParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fm = FeatureMap::new(4, 4, Tensor2D::from_fn(16, 6, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let bank = TextEmbeddingBank::new(
            (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            Tensor2D::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)),
            Tensor2D::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        (fm, bank, init_params(Dims::new(6, 5), seed, ModelConfig::default()).unwrap())
    }

    #[test]
    fn default_presets() {
        let h = DetectorConfig::default();
        assert_eq!((h.score_threshold, h.min_instances, h.max_instances, h.lambda), (0.2, 3, 15, 0.5));
        assert_eq!(DetectorConfig::vcoco().lambda, 2.0);
        assert_eq!(h.human_class_id, 0);
    }

    #[test]
    fn keeps_top_fifteen() {
        let dets: Vec<_> = (0..20).map(|_| det([0.0, 0.0, 1.0, 1.0], 0.9, 0)).collect();
        let p = filter_proposals(&dets, &DetectorConfig::default());
        assert_eq!(p.humans.len(), 15);
        assert!(p.objects.is_empty());
    }

    #[test]
    fn pads_back_to_minimum() {
        let dets: Vec<_> = [0.15, 0.9, 0.05, 0.3, 0.1]
            .iter()
            .map(|&s| det([0.0, 0.0, 1.0, 1.0], s, 0))
            .collect();
        let p = filter_proposals(&dets, &DetectorConfig::default());
        let scores: Vec<f64> = p.humans.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.3, 0.15]);
        assert_eq!(filter_proposals(&[], &DetectorConfig::default()), Proposals::default());
    }

    #[test]
    fn ties_keep_input_order() {
        let dets = vec![
            det([0.0, 0.0, 0.5, 0.5], 0.5, 2),
            det([0.5, 0.5, 1.0, 1.0], 0.5, 1),
            det([0.0, 0.0, 1.0, 1.0], 0.7, 1),
        ];
        let p = filter_proposals(&dets, &DetectorConfig::default());
        assert_eq!(p.objects, vec![dets[2], dets[0], dets[1]]);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig { score_threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { min_instances: 16, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn full_boxes_reduce_to_classification() {
        let (fm, bank, mut params) = scene(1);
        params.gamma = 0.0;
        let cfg = DetectorConfig { lambda: 0.0, ..Default::default() };
        let cls = classification_forward(&fm, &bank, &params).unwrap();
        let out = detect(&fm, &bank, &params, &[det([0.0, 0.0, 1.0, 1.0], 0.8, 0)], &[det([0.0, 0.0, 1.0, 1.0], 0.6, 2)], &cfg).unwrap();
        assert_eq!(out.predictions.len(), 2);
        for p in &out.predictions {
            assert_eq!(p.score, cls.action_scores.get(2, p.action));
        }
    }

    #[test]
    fn detector_factor_multiplies_scores() {
        let (fm, bank, params) = scene(2);
        let h = [det([0.0, 0.0, 0.5, 1.0], 0.5, 0)];
        let o = [det([0.5, 0.0, 1.0, 1.0], 0.5, 1)];
        let plain = detect(&fm, &bank, &params, &h, &o, &DetectorConfig { lambda: 0.0, ..Default::default() }).unwrap();
        let scaled = detect(&fm, &bank, &params, &h, &o, &DetectorConfig::vcoco()).unwrap();
        for (a, b) in plain.predictions.iter().zip(&scaled.predictions) {
            assert_eq!(b.factors.det, 0.0625);
            assert!((b.score - a.score * 0.0625).abs() < 1e-15);
            assert!((b.recompose(params.gamma) - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_matches_naive_on_toy_scene() {
        let (fm, bank, params) = scene(3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut rand_box = || {
            let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
            [x, y, x + rng.random_range(0.1..0.3), y + rng.random_range(0.1..0.3)]
        };
        let humans: Vec<_> = (0..3).map(|_| det(rand_box(), 0.9, 0)).collect();
        let objects: Vec<_> = (0..4).map(|j| det(rand_box(), 0.7, 1 + j % 2)).collect();
        let cfg = DetectorConfig::default();
        let fast = detect(&fm, &bank, &params, &humans, &objects, &cfg).unwrap();
        let slow = detect_naive(&fm, &bank, &params, &humans, &objects, &cfg).unwrap();
        let par = detect_parallel(&fm, &bank, &params, &humans, &objects, &cfg).unwrap();
        assert_eq!(fast.predictions.len(), 3 * 4 * 2);
        assert_eq!(fast, par);
        for (a, b) in fast.predictions.iter().zip(&slow.predictions) {
            assert_eq!((a.human, a.object, a.action), (b.human, b.object, b.action));
            assert!((a.score - b.score).abs() < 1e-12);
            assert!((a.human_gate.r - b.human_gate.r).abs() < 1e-12);
            assert!(a.score > 0.0 && a.score < 1.0);
        }
    }

    #[test]
    fn counters_are_exact() {
        let (fm, bank, params) = scene(4);
        let humans = vec![det([0.0, 0.0, 0.5, 0.5], 0.9, 0); 2];
        let objects = vec![det([0.5, 0.5, 1.0, 1.0], 0.9, 1); 3];
        let c = PassCounter::new();
        detect_counted(&fm, &bank, &params, &humans, &objects, &DetectorConfig::default(), &c).unwrap();
        assert_eq!((c.grounding_passes(), c.attention_passes(), c.decoder_forwards()), (1, 1, 6));
        c.reset();
        detect_naive_counted(&fm, &bank, &params, &humans, &objects, &DetectorConfig::default(), &c).unwrap();
        assert_eq!((c.grounding_passes(), c.attention_passes(), c.decoder_forwards()), (6, 6, 6));
    }

    #[test]
    fn unknown_class_is_skipped() {
        let (fm, bank, params) = scene(5);
        let humans = [det([0.0, 0.0, 0.5, 0.5], 0.9, 0)];
        let objects = [det([0.5, 0.5, 1.0, 1.0], 0.9, 7), det([0.5, 0.0, 1.0, 0.5], 0.9, 1)];
        let out = detect(&fm, &bank, &params, &humans, &objects, &DetectorConfig::default()).unwrap();
        assert_eq!(out.skipped, vec![SkippedObject { object: 0, class_id: 7 }]);
        assert_eq!(out.predictions.len(), 2);
        assert!(out.predictions.iter().all(|p| p.object == 1));
        let naive = detect_naive(&fm, &bank, &params, &humans, &objects, &DetectorConfig::default()).unwrap();
        assert_eq!(out.skipped, naive.skipped);
        for (a, b) in out.predictions.iter().zip(&naive.predictions) {
            assert_eq!((a.object, a.action), (b.object, b.action));
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_is_bit_identical_to_naive() {
        let (fm, bank, params) = scene(7);
        let humans = [det([0.1, 0.2, 0.6, 0.9], 0.9, 0)];
        let objects = [det([0.4, 0.0, 1.0, 0.5], 0.7, 2)];
        let cfg = DetectorConfig::vcoco();
        let fast = detect(&fm, &bank, &params, &humans, &objects, &cfg).unwrap();
        assert_eq!(fast, detect_naive(&fm, &bank, &params, &humans, &objects, &cfg).unwrap());
    }

    #[test]
    fn empty_sides_give_no_predictions() {
        let (fm, bank, params) = scene(6);
        let o = [det([0.5, 0.5, 1.0, 1.0], 0.9, 1)];
        assert!(detect(&fm, &bank, &params, &[], &o, &DetectorConfig::default()).unwrap().predictions.is_empty());
        assert!(detect_naive(&fm, &bank, &params, &[], &[], &DetectorConfig::default()).unwrap().predictions.is_empty());
    }

    #[test]
    fn prediction_lines_round_trip() {
        let (fm, bank, params) = scene(7);
        let out = detect(&fm, &bank, &params, &[det([0.0, 0.0, 0.5, 0.5], 0.9, 0)], &[det([0.5, 0.5, 1.0, 1.0], 0.4, 2)], &DetectorConfig::default()).unwrap();
        let recs: Vec<_> = out.predictions.iter().map(|p| PredictionRecord::from_prediction("im", p)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_predictions(&path, &recs).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"factors\":{\"s_a\""));
    }

    #[test]
    fn detection_file_rejects_bad_score() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        std::fs::write(&path, r#"{"image_id":"x","detections":[{"box":[0,0,1,1],"score":0.0,"class_id":0}]}"#).unwrap();
        assert!(matches!(DetectionFile::load(&path), Err(Error::Argument(_))));
        std::fs::write(&path, r#"{"image_id":"x","detections":[{"box":[0,0,1,1],"score":0.5,"class_id":0}]}"#).unwrap();
        assert_eq!(DetectionFile::load(&path).unwrap().detections.len(), 1);
    }
}
