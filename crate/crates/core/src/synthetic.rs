//! Planted-signal synthetic scenes.
//!
//! Each image holds one human blob aligned with the human text vector and one
//! or more object blobs aligned with their class vectors. Other patches carry a
//! shared background direction, and every patch gets Gaussian noise. When the
//! human interacts with an object, the action's signature is added on both blobs. Embeddings and features are rounded to `f32` so that
//! what is written to disk is exactly what the in-memory dataset contains.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::TextEmbeddingBank;
use crate::detection::{Detection, DetectionFile};
use crate::evaluation::{GroundTruth, GtAnnotation, GtImage};
use crate::grounding::{FeatureMap, NormBox};
use crate::io::RawTensor;
use crate::numerics::{dot, norm, Tensor2D};
use crate::training::ImageSample;
use crate::{Error, Result};

/// Class id of "person" in generated banks and detection files.
pub const PERSON_CLASS: usize = 0;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// Object classes besides "person".
    pub n_objects: usize,
    pub n_actions: usize,
    pub n_images: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub max_objects_per_image: usize,
    /// Probability that a planted object interacts with the human.
    pub interaction_prob: f64,
    pub signature_strength: f64,
    /// Weight of the shared background direction on non-blob patches.
    pub background_strength: f64,
    /// Largest blob side, in patches.
    pub max_blob: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid_h: 6,
            grid_w: 6,
            d_v: 16,
            d_t: 16,
            n_objects: 3,
            n_actions: 3,
            n_images: 24,
            noise_std: 0.02,
            seed: 0,
            max_objects_per_image: 2,
            interaction_prob: 0.6,
            signature_strength: 1.0,
            background_strength: 1.0,
            max_blob: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("n_objects", self.n_objects),
            ("n_actions", self.n_actions),
            ("n_images", self.n_images),
            ("max_objects_per_image", self.max_objects_per_image),
            ("max_blob", self.max_blob),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be positive")));
        }
        if self.d_v < self.d_t {
            return Err(Error::Argument(format!(
                "d_v ({}) must be at least d_t ({}) to embed text vectors in patches",
                self.d_v, self.d_t
            )));
        }
        if self.max_objects_per_image > self.n_objects {
            return Err(Error::Argument("max_objects_per_image exceeds n_objects".into()));
        }
        if !(self.background_strength >= 0.0) || !self.signature_strength.is_finite() {
            return Err(Error::Argument("background and signature strengths must be finite and >= 0".into()));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.interaction_prob) {
            return Err(Error::Argument("noise_std must be >= 0 and interaction_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedInstance {
    #[serde(rename = "box")]
    pub bbox: NormBox,
    pub class_id: usize,
    /// Action linking this object to the human, if any.
    pub action: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub sample: ImageSample<f64>,
    pub human: PlantedInstance,
    pub objects: Vec<PlantedInstance>,
}

impl SyntheticImage {
    pub fn annotations(&self) -> Vec<GtAnnotation> {
        self.objects
            .iter()
            .filter_map(|o| {
                o.action.map(|action| GtAnnotation {
                    human_box: self.human.bbox,
                    object_box: o.bbox,
                    object_class: o.class_id,
                    action,
                })
            })
            .collect()
    }

    /// Ground-truth boxes as detector proposals with the given confidence.
    pub fn detections(&self, score: f64) -> Vec<Detection> {
        std::iter::once(&self.human)
            .chain(&self.objects)
            .map(|i| Detection {
                bbox: i.bbox,
                score,
                class_id: i.class_id,
            })
            .collect()
    }

    pub fn instances(&self) -> Vec<PlantedInstance> {
        std::iter::once(self.human).chain(self.objects.iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub bank: TextEmbeddingBank<f64>,
    /// Shared background direction, `d_v` long.
    pub background: Vec<f64>,
    pub images: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    pub fn samples(&self) -> Vec<ImageSample<f64>> {
        self.images.iter().map(|i| i.sample.clone()).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            images: self
                .images
                .iter()
                .map(|i| GtImage {
                    image_id: i.sample.image_id.clone(),
                    annotations: i.annotations(),
                })
                .collect(),
        }
    }
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

/// Unit vectors, mutually orthogonal when `count <= dim`.
fn embedding_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// The bank and the background direction, drawn jointly so the background is
/// orthogonal to every text vector whenever the dimension allows.
fn build_bank(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(TextEmbeddingBank<f64>, Vec<f64>)> {
    let mut vecs = embedding_vectors(2 + spec.n_objects + spec.n_actions, spec.d_t, rng);
    let background = padded(&vecs.pop().expect("background vector"), spec.d_v);
    let vecs: Vec<Vec<f64>> = vecs.into_iter().map(|v| v.into_iter().map(round32).collect()).collect();
    let human = vecs[0].clone();
    let mut objects = vec![human.clone()];
    objects.extend_from_slice(&vecs[1..=spec.n_objects]);
    let actions = &vecs[1 + spec.n_objects..];
    let mut object_names = vec!["person".to_string()];
    object_names.extend((1..=spec.n_objects).map(|k| format!("object_{k}")));
    let action_names = (0..spec.n_actions).map(|a| format!("action_{a}")).collect();
    let bank = TextEmbeddingBank::new(human, Tensor2D::from_rows(&objects)?, Tensor2D::from_rows(actions)?)?
        .with_names(object_names, action_names)?
        .with_composed_hoi()?;
    let hoi = bank.hoi().expect("composed above");
    let (emb, pairs) = (hoi.embeddings.map(round32), hoi.pairs.clone());
    let bank = bank.with_hoi(emb, pairs)?;
    Ok((bank, background))
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
}

impl Blob {
    fn overlaps(&self, o: &Blob) -> bool {
        self.r0 < o.r0 + o.h && o.r0 < self.r0 + self.h && self.c0 < o.c0 + o.w && o.c0 < self.c0 + self.w
    }

    fn cells(&self, grid_w: usize) -> impl Iterator<Item = usize> + '_ {
        (self.r0..self.r0 + self.h).flat_map(move |r| (self.c0..self.c0 + self.w).map(move |c| r * grid_w + c))
    }

    fn to_box(self, grid_h: usize, grid_w: usize) -> NormBox {
        NormBox {
            x1: self.c0 as f64 / grid_w as f64,
            y1: self.r0 as f64 / grid_h as f64,
            x2: (self.c0 + self.w) as f64 / grid_w as f64,
            y2: (self.r0 + self.h) as f64 / grid_h as f64,
        }
    }
}

fn place_blobs(n: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    for _ in 0..n {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let h = rng.random_range(1..=spec.max_blob.min(spec.grid_h));
            let w = rng.random_range(1..=spec.max_blob.min(spec.grid_w));
            let b = Blob {
                r0: rng.random_range(0..=spec.grid_h - h),
                c0: rng.random_range(0..=spec.grid_w - w),
                h,
                w,
            };
            (!blobs.iter().any(|o| o.overlaps(&b))).then_some(b)
        });
        match placed {
            Some(b) => blobs.push(b),
            None => {
                return Err(Error::Generation(format!(
                    "could not place {n} disjoint blobs on a {}x{} grid; use a larger grid or fewer objects per image",
                    spec.grid_h, spec.grid_w
                )))
            }
        }
    }
    Ok(blobs)
}

fn padded(v: &[f64], d_v: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(d_v, 0.0);
    out
}

fn generate_image(
    index: usize,
    spec: &SyntheticSpec,
    bank: &TextEmbeddingBank<f64>,
    background: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticImage> {
    let n_obj = rng.random_range(1..=spec.max_objects_per_image);
    let mut classes: Vec<usize> = (1..=spec.n_objects).collect();
    classes.shuffle(rng);
    classes.truncate(n_obj);
    let actions: Vec<Option<usize>> = classes
        .iter()
        .map(|_| {
            rng.random_bool(spec.interaction_prob)
                .then(|| rng.random_range(0..spec.n_actions))
        })
        .collect();
    render_image(index, spec, bank, background, &classes, &actions, rng)
}

fn render_image(
    index: usize,
    spec: &SyntheticSpec,
    bank: &TextEmbeddingBank<f64>,
    background: &[f64],
    classes: &[usize],
    actions: &[Option<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticImage> {
    let n_obj = classes.len();
    let blobs = place_blobs(1 + n_obj, spec, rng)?;

    let (gh, gw) = (spec.grid_h, spec.grid_w);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Generation(e.to_string()))?;
    let mut patches = Tensor2D::from_fn(gh * gw, spec.d_v, |_, _| noise.sample(rng));
    let add = |patches: &mut Tensor2D<f64>, blob: &Blob, v: &[f64], scale: f64| {
        for p in blob.cells(gw) {
            patches.row_mut(p).iter_mut().zip(v).for_each(|(x, y)| *x += scale * y);
        }
    };
    let mut on_blob = vec![false; gh * gw];
    for p in blobs.iter().flat_map(|b| b.cells(gw)) {
        on_blob[p] = true;
    }
    for (p, _) in on_blob.iter().enumerate().filter(|(_, &b)| !b) {
        patches.row_mut(p).iter_mut().zip(background).for_each(|(x, y)| *x += spec.background_strength * y);
    }
    let human_vec = padded(bank.human(), spec.d_v);
    add(&mut patches, &blobs[0], &human_vec, 1.0);
    for (j, &k) in classes.iter().enumerate() {
        add(&mut patches, &blobs[j + 1], &padded(bank.object(k), spec.d_v), 1.0);
        if let Some(a) = actions[j] {
            let sig = padded(bank.action(a), spec.d_v);
            add(&mut patches, &blobs[0], &sig, spec.signature_strength);
            add(&mut patches, &blobs[j + 1], &sig, spec.signature_strength);
        }
    }
    let patches = patches.map(round32);

    let labels: BTreeSet<(usize, usize)> = classes
        .iter()
        .zip(actions)
        .filter_map(|(&k, a)| a.map(|a| (a, k)))
        .collect();
    let objects = classes
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(j, (&k, &action))| PlantedInstance {
            bbox: blobs[j + 1].to_box(gh, gw),
            class_id: k,
            action,
        })
        .collect();
    Ok(SyntheticImage {
        sample: ImageSample {
            image_id: format!("img_{index:04}"),
            fm: FeatureMap::new(gh, gw, patches)?,
            labels,
        },
        human: PlantedInstance {
            bbox: blobs[0].to_box(gh, gw),
            class_id: PERSON_CLASS,
            action: None,
        },
        objects,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (bank, background) = build_bank(spec, &mut rng)?;
    let images = (0..spec.n_images)
        .map(|i| generate_image(i, spec, &bank, &background, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        bank,
        background,
        images,
    })
}

/// Images drawn from the same bank as `dataset` but an independent stream.
pub fn generate_held_out(dataset: &SyntheticDataset, n_images: usize, seed: u64) -> Result<Vec<SyntheticImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|i| generate_image(i, &dataset.spec, &dataset.bank, &dataset.background, &mut rng))
        .collect()
}

/// Scenes with exactly two objects of distinct classes: the first interacts
/// with the human through a random action, the second does not.
pub fn generate_contrast_scenes(dataset: &SyntheticDataset, n_images: usize, seed: u64) -> Result<Vec<SyntheticImage>> {
    let spec = &dataset.spec;
    if spec.n_objects < 2 {
        return Err(Error::Argument("contrast scenes need at least two object classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|i| {
            let mut classes: Vec<usize> = (1..=spec.n_objects).collect();
            classes.shuffle(&mut rng);
            classes.truncate(2);
            let actions = [Some(rng.random_range(0..spec.n_actions)), None];
            render_image(i, spec, &dataset.bank, &dataset.background, &classes, &actions, &mut rng)
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GT_FILE: &str = "gt.json";
pub const BANK_FILE: &str = "bank.rgft";
pub const FEATURES_DIR: &str = "features";
pub const DETECTIONS_DIR: &str = "detections";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub image_id: String,
    /// Feature tensor path relative to the dataset directory.
    pub features: String,
    pub labels: Vec<(usize, usize)>,
    #[serde(default)]
    pub instances: Vec<PlantedInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Bank tensor path relative to the dataset directory.
    pub bank: String,
    pub images: Vec<ManifestImage>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes feature tensors, the bank, per-image detection files, the manifest
/// and the ground-truth file.
pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    create_dir(&dir.join(FEATURES_DIR))?;
    create_dir(&dir.join(DETECTIONS_DIR))?;
    dataset.bank.save(&dir.join(BANK_FILE))?;
    let mut images = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let id = &img.sample.image_id;
        let rel = format!("{FEATURES_DIR}/{id}.rgft");
        img.sample.fm.to_raw()?.write(&dir.join(&rel))?;
        DetectionFile {
            image_id: id.clone(),
            detections: img.detections(1.0),
        }
        .save(&dir.join(DETECTIONS_DIR).join(format!("{id}.json")))?;
        images.push(ManifestImage {
            image_id: id.clone(),
            features: rel,
            labels: img.sample.labels.iter().copied().collect(),
            instances: img.instances(),
        });
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            bank: BANK_FILE.into(),
            images,
        },
    )?;
    write_json(&dir.join(GT_FILE), &dataset.ground_truth())
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub bank: TextEmbeddingBank<f64>,
    pub samples: Vec<ImageSample<f64>>,
}

impl LoadedDataset {
    pub fn detections_path(dir: &Path, image_id: &str) -> PathBuf {
        dir.join(DETECTIONS_DIR).join(format!("{image_id}.json"))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Loads a dataset directory written by [`write_dataset`] (or laid out the same way).
pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(dir)?;
    let bank = TextEmbeddingBank::load(&dir.join(&manifest.bank))?;
    let samples = manifest
        .images
        .iter()
        .map(|m| {
            let fm = FeatureMap::from_raw(&RawTensor::read(&dir.join(&m.features))?)?;
            let sample = ImageSample {
                image_id: m.image_id.clone(),
                fm,
                labels: m.labels.iter().copied().collect(),
            };
            sample.validate(&bank)?;
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { manifest, bank, samples })
}
