//! Pairwise instance encoder: patch/text similarity, patch importance (with an
//! optional region mask) and the spatially grounded pairwise query.

use serde::{Deserialize, Serialize};

use crate::decoder::TextEmbeddingBank;
use crate::io::RawTensor;
use crate::numerics::{masked_softmax, safe_cosine, AdditiveMask, Tensor2D, COSINE_EPS};
use crate::params::RegFormerParams;
use crate::{Error, Real, Result};

/// Backbone output: a `grid_h x grid_w` grid of `dim`-dimensional patch
/// features stored row-major, covering the normalized image `[0, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    grid_h: usize,
    grid_w: usize,
    patches: Tensor2D<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(grid_h: usize, grid_w: usize, patches: Tensor2D<T>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Argument(format!("empty grid {grid_h}x{grid_w}")));
        }
        if patches.rows() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} patch rows for a {grid_h}x{grid_w} grid",
                patches.rows()
            )));
        }
        if patches.cols() == 0 {
            return Err(Error::Shape("zero-width patch features".into()));
        }
        if !patches.is_finite() {
            return Err(Error::Numerical {
                op: "feature map",
                detail: "non-finite patch feature".into(),
            });
        }
        Ok(Self {
            grid_h,
            grid_w,
            patches,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patches(&self) -> &Tensor2D<T> {
        &self.patches
    }

    #[inline]
    pub fn patch(&self, p: usize) -> &[T] {
        self.patches.row(p)
    }

    /// Normalized `(x, y)` center of patch `p` (row-major index).
    pub fn patch_center(&self, p: usize) -> (f64, f64) {
        let (i, j) = (p / self.grid_w, p % self.grid_w);
        (
            (j as f64 + 0.5) / self.grid_w as f64,
            (i as f64 + 0.5) / self.grid_h as f64,
        )
    }

    /// Rank-3 `[grid_h, grid_w, dim]` tensor file contents.
    pub fn to_raw(&self) -> Result<RawTensor> {
        RawTensor::new(
            vec![self.grid_h, self.grid_w, self.dim()],
            self.patches
                .data()
                .iter()
                .map(|v| v.to_f32().unwrap_or(f32::NAN))
                .collect(),
        )
    }

    pub fn from_raw(raw: &RawTensor) -> Result<Self> {
        let [h, w, d] = raw.dims[..] else {
            return Err(Error::Shape(format!(
                "feature map tensor must be rank 3, got dims {:?}",
                raw.dims
            )));
        };
        let data = raw.data.iter().map(|&v| T::lit(v as f64)).collect();
        Self::new(h, w, Tensor2D::from_vec(h * w, d, data)?)
    }
}

/// Axis-aligned box in normalized `[x1, y1, x2, y2]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for NormBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl NormBox {
    pub const FULL: NormBox = NormBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Requires `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x1 < self.x2
            && self.y1 < self.y2;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("degenerate or out-of-range box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Inclusive on every edge.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn union(&self, other: &NormBox) -> NormBox {
        NormBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Binary per-patch membership `m(p)` of a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    bits: Vec<bool>,
    source: [u64; 4],
}

impl RegionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self {
            bits,
            source: [0; 4],
        }
    }

    /// Mask covering every patch.
    pub fn full(num_patches: usize) -> Self {
        Self {
            bits: vec![true; num_patches],
            source: NormBox::FULL.to_bits(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn source_box(&self) -> NormBox {
        NormBox {
            x1: f64::from_bits(self.source[0]),
            y1: f64::from_bits(self.source[1]),
            x2: f64::from_bits(self.source[2]),
            y2: f64::from_bits(self.source[3]),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn contains(&self, p: usize) -> bool {
        self.bits[p]
    }

    pub fn to_additive(&self) -> AdditiveMask {
        AdditiveMask::from_included(self.bits.clone())
    }
}

impl NormBox {
    fn to_bits(self) -> [u64; 4] {
        [
            self.x1.to_bits(),
            self.y1.to_bits(),
            self.x2.to_bits(),
            self.y2.to_bits(),
        ]
    }
}

/// Rasterizes a box onto the patch grid: a patch belongs to the box when its
/// center does. If no center falls inside, the single patch whose center is
/// nearest the box center is used (ties go to the lowest row-major index).
pub fn box_to_mask<T: Real>(b: &NormBox, fm: &FeatureMap<T>) -> Result<RegionMask> {
    box_to_mask_on_grid(b, fm.grid_h, fm.grid_w)
}

pub fn box_to_mask_on_grid(b: &NormBox, grid_h: usize, grid_w: usize) -> Result<RegionMask> {
    b.validate()?;
    let n = grid_h * grid_w;
    let center = |p: usize| {
        (
            ((p % grid_w) as f64 + 0.5) / grid_w as f64,
            ((p / grid_w) as f64 + 0.5) / grid_h as f64,
        )
    };
    let mut bits: Vec<bool> = (0..n)
        .map(|p| {
            let (x, y) = center(p);
            b.contains(x, y)
        })
        .collect();
    if !bits.iter().any(|&v| v) {
        let (bx, by) = b.center();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for p in 0..n {
            let (x, y) = center(p);
            let d = (x - bx).powi(2) + (y - by).powi(2);
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        bits[best] = true;
    }
    Ok(RegionMask {
        bits,
        source: b.to_bits(),
    })
}

/// Cosine similarity of every patch against the human and each object class,
/// measured in the shared grounding space. Every value lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityField<T> {
    pub s_h: Vec<T>,
    /// One field per object class.
    pub s_o: Vec<Vec<T>>,
}

/// Softmax-normalized patch weights; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceField<T> {
    pub alpha: Vec<T>,
}

impl<T: Real> ImportanceField<T> {
    pub fn uniform(n: usize) -> Self {
        Self {
            alpha: vec![T::one() / T::lit(n as f64); n],
        }
    }

    pub fn one_hot(n: usize, at: usize) -> Self {
        let mut alpha = vec![T::zero(); n];
        alpha[at] = T::one();
        Self { alpha }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

fn check_bank_dims<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<()> {
    let dims = params.dims();
    if fm.dim() != dims.d_v {
        return Err(Error::Shape(format!(
            "feature dim {} but model expects d_v = {}",
            fm.dim(),
            dims.d_v
        )));
    }
    if bank.dim() != dims.d_t {
        return Err(Error::Shape(format!(
            "text dim {} but model expects d_t = {}",
            bank.dim(),
            dims.d_t
        )));
    }
    Ok(())
}

/// Projected patch features `X * P` for one branch, `num_patches x d_s`.
pub fn project_patches<T: Real>(fm: &FeatureMap<T>, proj: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    fm.patches().matmul(proj)
}

/// Similarity of each row of `projected` against `anchor`.
pub fn similarity_to<T: Real>(projected: &Tensor2D<T>, anchor: &[T]) -> Vec<T> {
    let eps = T::lit(COSINE_EPS);
    projected
        .iter_rows()
        .map(|row| safe_cosine(row, anchor, eps))
        .collect()
}

pub fn patch_similarity<T: Real>(
    fm: &FeatureMap<T>,
    bank: &TextEmbeddingBank<T>,
    params: &RegFormerParams<T>,
) -> Result<SimilarityField<T>> {
    check_bank_dims(fm, bank, params)?;
    let patches_h = project_patches(fm, &params.proj_patch_h)?;
    let patches_o = project_patches(fm, &params.proj_patch_o)?;
    let text_h = params.proj_text_h.left_mul(bank.human())?;
    let s_h = similarity_to(&patches_h, &text_h);
    let s_o = (0..bank.num_objects())
        .map(|k| {
            let text_o = params.proj_text_o.left_mul(bank.object(k))?;
            Ok(similarity_to(&patches_o, &text_o))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityField { s_h, s_o })
}

/// Patch importance `softmax(s(p) / tau_p)`, optionally restricted to a
/// region: excluded patches contribute `log 0 = -inf` to the logits and get
/// exactly zero weight.
pub fn patch_importance<T: Real>(
    field: &[T],
    tau_p: T,
    mask: Option<&RegionMask>,
) -> Result<ImportanceField<T>> {
    let additive = match mask {
        Some(m) if m.bits().len() != field.len() => {
            return Err(Error::Shape(format!(
                "mask over {} patches for a field of {}",
                m.bits().len(),
                field.len()
            )))
        }
        Some(m) => Some(m.to_additive()),
        None => None,
    };
    let alpha = masked_softmax(field, tau_p, additive.as_ref())?;
    Ok(ImportanceField { alpha })
}

/// Importance-weighted pooling `sum_p alpha(p) x(p)`.
pub fn pool_features<T: Real>(alpha: &ImportanceField<T>, fm: &FeatureMap<T>) -> Result<Vec<T>> {
    if alpha.len() != fm.num_patches() {
        return Err(Error::Shape(format!(
            "importance over {} patches for a {}-patch map",
            alpha.len(),
            fm.num_patches()
        )));
    }
    fm.patches().left_mul(&alpha.alpha)
}

/// `P_q [q_h; q_o]`.
pub fn fuse_query<T: Real>(q_h: &[T], q_o: &[T], params: &RegFormerParams<T>) -> Result<Vec<T>> {
    let mut cat = Vec::with_capacity(q_h.len() + q_o.len());
    cat.extend_from_slice(q_h);
    cat.extend_from_slice(q_o);
    params.proj_query.left_mul(&cat)
}

/// Spatially grounded pairwise query from human and object importance fields.
pub fn grounded_query<T: Real>(
    alpha_h: &ImportanceField<T>,
    alpha_o: &ImportanceField<T>,
    fm: &FeatureMap<T>,
    params: &RegFormerParams<T>,
) -> Result<Vec<T>> {
    let q_h = pool_features(alpha_h, fm)?;
    let q_o = pool_features(alpha_o, fm)?;
    fuse_query(&q_h, &q_o, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, Dims, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fm(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap<f64> {
        let t = Tensor2D::from_fn(h * w, d, |_, _| rng.random_range(-1.0..1.0));
        FeatureMap::new(h, w, t).unwrap()
    }

    fn identity_params(d: usize) -> RegFormerParams<f64> {
        let mut p: RegFormerParams<f64> = init_params(Dims::new(d, d), 0, ModelConfig::default()).unwrap();
        p.proj_patch_h = Tensor2D::identity(d);
        p.proj_patch_o = Tensor2D::identity(d);
        p.proj_text_h = Tensor2D::identity(d);
        p.proj_text_o = Tensor2D::identity(d);
        p
    }

    fn axis_bank(d: usize) -> TextEmbeddingBank<f64> {
        let e = |i: usize| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        TextEmbeddingBank::new(
            e(0),
            Tensor2D::from_rows(&[e(1), e(2)]).unwrap(),
            Tensor2D::from_rows(&[e(3)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn similarity_peaks_on_aligned_patch() {
        let d = 4;
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|p| if p == 2 { vec![1.0, 0.0, 0.0, 0.0] } else { vec![0.0, 0.0, 0.0, 1.0] })
            .collect();
        let fm = FeatureMap::new(2, 2, Tensor2D::from_rows(&rows).unwrap()).unwrap();
        let params = identity_params(d);
        let bank = axis_bank(d);
        let s = patch_similarity(&fm, &bank, &params).unwrap();
        assert_eq!(s.s_h, vec![0.0, 0.0, 1.0, 0.0]);

        let mut scaled = bank.clone();
        scaled.scale_human(3.0);
        assert_eq!(patch_similarity(&fm, &scaled, &params).unwrap().s_h, s.s_h);
    }

    #[test]
    fn similarity_matches_per_patch_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (dv, dt) = (5, 3);
        let fm = random_fm(&mut rng, 3, 2, dv);
        let params: RegFormerParams<f64> = init_params(Dims::new(dv, dt), 4, ModelConfig::default()).unwrap();
        let bank = TextEmbeddingBank::new(
            vec![0.3, -0.2, 0.9],
            Tensor2D::from_rows(&[vec![0.1, 0.5, -0.3], vec![1.0, 0.0, 0.2]]).unwrap(),
            Tensor2D::from_rows(&[vec![0.4, 0.4, 0.1]]).unwrap(),
        )
        .unwrap();
        let s = patch_similarity(&fm, &bank, &params).unwrap();
        let project = |x: &[f64], m: &Tensor2D<f64>| -> Vec<f64> {
            (0..m.cols())
                .map(|j| (0..m.rows()).map(|i| x[i] * m.get(i, j)).sum())
                .collect()
        };
        let th = project(bank.human(), &params.proj_text_h);
        for p in 0..fm.num_patches() {
            let xp = project(fm.patch(p), &params.proj_patch_h);
            assert!((s.s_h[p] - safe_cosine(&xp, &th, COSINE_EPS)).abs() < 1e-12);
            for k in 0..2 {
                let to = project(bank.object(k), &params.proj_text_o);
                let xo = project(fm.patch(p), &params.proj_patch_o);
                assert!((s.s_o[k][p] - safe_cosine(&xo, &to, COSINE_EPS)).abs() < 1e-12);
            }
        }
        assert!(s.s_h.iter().chain(s.s_o.iter().flatten()).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn similarity_rejects_dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = random_fm(&mut rng, 2, 2, 3);
        let params = identity_params(4);
        assert!(matches!(
            patch_similarity(&fm, &axis_bank(4), &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn importance_reference_cases() {
        let a = patch_importance(&[0.4f64; 6], 0.05, None).unwrap();
        assert!(a.alpha.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));

        let mask = RegionMask::from_bits(vec![false, true, false, false]);
        let a = patch_importance(&[0.9, -0.5, 0.3, 0.1], 0.05, Some(&mask)).unwrap();
        assert_eq!(a.alpha, vec![0.0, 1.0, 0.0, 0.0]);

        let a = patch_importance(&[0.8, 0.2, 0.2, 0.2], 0.05, None).unwrap();
        let (e16, e4) = (16f64.exp(), 4f64.exp());
        assert!((a.alpha[0] - e16 / (e16 + 3.0 * e4)).abs() < 1e-15);

        let empty = RegionMask::from_bits(vec![false; 4]);
        assert!(matches!(
            patch_importance(&[0.0; 4], 0.05, Some(&empty)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn box_masks() {
        let fm = FeatureMap::new(4, 4, Tensor2D::<f64>::zeros(16, 1)).unwrap();
        assert_eq!(box_to_mask(&NormBox::FULL, &fm).unwrap().count(), 16);

        // Enumerate the 16 centers against [0.5, 0.5, 1, 1].
        let b = NormBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let m = box_to_mask(&b, &fm).unwrap();
        let expected: Vec<bool> = (0..16)
            .map(|p| {
                let (x, y) = fm.patch_center(p);
                x >= 0.5 && y >= 0.5
            })
            .collect();
        assert_eq!(m.bits(), &expected[..]);
        assert_eq!(
            m.bits().iter().enumerate().filter(|(_, &b)| b).map(|(p, _)| p).collect::<Vec<_>>(),
            vec![10, 11, 14, 15]
        );

        // Inside cell (1, 2) but away from its center: fallback picks that cell.
        let tiny = NormBox::new(0.51, 0.26, 0.55, 0.3).unwrap();
        let m = box_to_mask(&tiny, &fm).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.contains(6));
        assert_eq!(m.source_box(), tiny);

        assert!(box_to_mask(&NormBox { x1: 0.5, y1: 0.0, x2: 0.5, y2: 1.0 }, &fm).is_err());
    }

    #[test]
    fn fallback_ties_take_lowest_index() {
        let fm = FeatureMap::new(2, 2, Tensor2D::<f64>::zeros(4, 1)).unwrap();
        // Centered exactly between all four centers but containing none.
        let b = NormBox::new(0.45, 0.45, 0.55, 0.55).unwrap();
        let m = box_to_mask(&b, &fm).unwrap();
        assert_eq!(m.bits(), &[true, false, false, false]);
    }

    #[test]
    fn grounded_query_reference_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = random_fm(&mut rng, 3, 3, 4);
        let n = fm.num_patches();
        let q = pool_features(&ImportanceField::one_hot(n, 5), &fm).unwrap();
        assert_eq!(q, fm.patch(5));

        let q = pool_features(&ImportanceField::uniform(n), &fm).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..n).map(|p| fm.patch(p)[c]).sum::<f64>() / n as f64;
            assert!((q[c] - mean).abs() < 1e-12);
        }

        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha = ImportanceField { alpha: raw.iter().map(|v| v / total).collect() };
        let q = pool_features(&alpha, &fm).unwrap();
        let mut oracle = [0.0; 4];
        for p in 0..n {
            for c in 0..4 {
                oracle[c] += alpha.alpha[p] * fm.patch(p)[c];
            }
        }
        for c in 0..4 {
            assert!((q[c] - oracle[c]).abs() < 1e-12);
        }

        let params: RegFormerParams<f64> = init_params(Dims::new(4, 2), 1, ModelConfig::default()).unwrap();
        let full = grounded_query(&alpha, &ImportanceField::one_hot(n, 0), &fm, &params).unwrap();
        let mut cat = q.clone();
        cat.extend_from_slice(fm.patch(0));
        for j in 0..4 {
            let v: f64 = (0..8).map(|i| cat[i] * params.proj_query.get(i, j)).sum();
            assert!((full[j] - v).abs() < 1e-12);
        }
    }

    fn field_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, usize)> {
        (1usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(any::<bool>(), n),
                0..n,
            )
        })
    }

    proptest! {
        #[test]
        fn full_mask_reduces_to_unmasked(field in prop::collection::vec(-1.0f64..1.0, 1..30), tau in 0.01f64..1.0) {
            let full = RegionMask::full(field.len());
            let a = patch_importance(&field, tau, Some(&full)).unwrap();
            let b = patch_importance(&field, tau, None).unwrap();
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn shrinking_mask_never_lowers_survivors((field, bits, drop) in field_and_mask(), tau in 0.02f64..1.0) {
            let mut big = bits.clone();
            big[drop] = true;
            let mut small = big.clone();
            small[drop] = false;
            prop_assume!(small.iter().any(|&b| b));
            let a_big = patch_importance(&field, tau, Some(&RegionMask::from_bits(big))).unwrap();
            let a_small = patch_importance(&field, tau, Some(&RegionMask::from_bits(small.clone()))).unwrap();
            for p in 0..field.len() {
                if small[p] {
                    prop_assert!(a_small.alpha[p] >= a_big.alpha[p] - 1e-15);
                }
            }
        }

        #[test]
        fn pooled_query_in_convex_hull(seed in any::<u64>(), tau in 0.02f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = random_fm(&mut rng, 3, 4, 5);
            let field: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = pool_features(&patch_importance(&field, tau, None).unwrap(), &fm).unwrap();
            for c in 0..5 {
                let lo = (0..12).map(|p| fm.patch(p)[c]).fold(f64::INFINITY, f64::min);
                let hi = (0..12).map(|p| fm.patch(p)[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(q[c] >= lo - 1e-12 && q[c] <= hi + 1e-12);
            }
        }

        #[test]
        fn nested_boxes_give_nested_masks(
            x1 in 0.0f64..0.5, y1 in 0.0f64..0.5, w in 0.3f64..0.5, h in 0.3f64..0.5,
            sx in 0.0f64..0.2, sy in 0.0f64..0.2, gh in 1usize..9, gw in 1usize..9,
        ) {
            let outer = NormBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let inner = NormBox::new(x1 + sx * w, y1 + sy * h, x1 + w * 0.8, y1 + h * 0.8).unwrap();
            let mo = box_to_mask_on_grid(&outer, gh, gw).unwrap();
            let mi = box_to_mask_on_grid(&inner, gh, gw).unwrap();
            prop_assert_eq!(&mi, &box_to_mask_on_grid(&inner, gh, gw).unwrap());
            // Nesting holds whenever the inner box covers a center by itself.
            let inner_direct = (0..gh * gw).any(|p| {
                let (x, y) = (((p % gw) as f64 + 0.5) / gw as f64, ((p / gw) as f64 + 0.5) / gh as f64);
                inner.contains(x, y)
            });
            if inner_direct {
                for p in 0..gh * gw {
                    prop_assert!(!mi.contains(p) || mo.contains(p));
                }
            }
        }
    }
}
