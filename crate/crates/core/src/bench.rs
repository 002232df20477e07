//! Throughput harness: shared-grounding pairwise inference against the
//! union-crop ML-Decoder baseline over growing pair counts.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{ml_decoder_forward, TextEmbeddingBank};
use crate::detection::{detect_counted, detect_naive_counted, Detection, DetectorConfig, PassCounter};
use crate::grounding::{FeatureMap, NormBox};
use crate::numerics::Tensor2D;
use crate::params::{init_ml_decoder, init_params, Dims, MlDecoderParams, ModelConfig, RegFormerParams};
use crate::{Error, Result};

/// Sub-grid of the patches whose centers fall inside `b`, or the single
/// patch nearest its center when none do.
pub fn crop_feature_map(fm: &FeatureMap<f64>, b: &NormBox) -> Result<FeatureMap<f64>> {
    b.validate()
        .map_err(|e| Error::Argument(format!("crop box: {e}")))?;
    if b.area() <= 0.0 {
        return Err(Error::Argument("crop box has zero area".into()));
    }
    let (gh, gw) = (fm.grid_h(), fm.grid_w());
    let center = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
    let rows: Vec<usize> = (0..gh).filter(|&r| (b.y1..=b.y2).contains(&center(r, gh))).collect();
    let cols: Vec<usize> = (0..gw).filter(|&c| (b.x1..=b.x2).contains(&center(c, gw))).collect();
    let (rows, cols) = if rows.is_empty() || cols.is_empty() {
        let mask = crate::grounding::box_to_mask(b, fm)?;
        let p = (0..mask.bits().len())
            .find(|&p| mask.contains(p))
            .expect("fallback mask has one patch");
        (vec![p / gw], vec![p % gw])
    } else {
        (rows, cols)
    };
    let mut data = Vec::with_capacity(rows.len() * cols.len() * fm.dim());
    for &r in &rows {
        for &c in &cols {
            data.extend_from_slice(fm.patch(r * gw + c));
        }
    }
    FeatureMap::new(
        rows.len(),
        cols.len(),
        Tensor2D::from_vec(rows.len() * cols.len(), fm.dim(), data)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Regformer,
    RegformerNaive,
    MldecoderCrop,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Regformer => "regformer",
            Strategy::RegformerNaive => "regformer_naive",
            Strategy::MldecoderCrop => "mldecoder_crop",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regformer" => Ok(Strategy::Regformer),
            "regformer_naive" => Ok(Strategy::RegformerNaive),
            "mldecoder_crop" => Ok(Strategy::MldecoderCrop),
            other => Err(Error::Argument(format!(
                "unknown strategy {other:?} (expected regformer, regformer_naive or mldecoder_crop)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_objects: usize,
    pub n_actions: usize,
    pub pair_counts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            d_v: 256,
            d_t: 256,
            n_objects: 5,
            n_actions: 4,
            pair_counts: vec![1, 50, 200],
            strategies: vec![Strategy::Regformer, Strategy::MldecoderCrop],
            iterations: 100,
            warmup: 10,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pair_counts.is_empty() || self.pair_counts.contains(&0) {
            return Err(Error::Argument("pair counts must be a nonempty list of positive counts".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Argument("iterations must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Argument("no strategy selected".into()));
        }
        if [self.grid_h, self.grid_w, self.d_v, self.d_t, self.n_objects, self.n_actions].contains(&0) {
            return Err(Error::Argument("scene dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub strategy: Strategy,
    pub pair_count: usize,
    pub median_ms: f64,
    pub images_per_s: f64,
    pub grounding_passes: usize,
    pub attention_passes: usize,
    pub decoder_forwards: usize,
}

/// Random image, bank, models and proposals for one benchmark run.
pub struct BenchScene {
    pub fm: FeatureMap<f64>,
    pub bank: TextEmbeddingBank<f64>,
    pub params: RegFormerParams<f64>,
    pub ml: MlDecoderParams<f64>,
    pub humans: Vec<Detection>,
    pub objects: Vec<Detection>,
}

/// `h x o = pairs` with `h` the largest divisor not above `sqrt(pairs)`.
pub fn pair_grid(pairs: usize) -> (usize, usize) {
    let h = (1..=pairs).take_while(|h| h * h <= pairs).filter(|h| pairs % h == 0).last().unwrap_or(1);
    (h, pairs / h)
}

fn random_box(rng: &mut ChaCha8Rng) -> NormBox {
    let w = rng.random_range(0.1..0.5);
    let h = rng.random_range(0.1..0.5);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    NormBox { x1: x, y1: y, x2: x + w, y2: y + h }
}

pub fn bench_scene(cfg: &BenchConfig, pairs: usize) -> Result<BenchScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fm = FeatureMap::new(
        cfg.grid_h,
        cfg.grid_w,
        Tensor2D::from_fn(cfg.grid_h * cfg.grid_w, cfg.d_v, |_, _| rng.random_range(-1.0..1.0)),
    )?;
    let mut rand_mat = |r: usize, c: usize| Tensor2D::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let bank = TextEmbeddingBank::new(
        rand_mat(1, cfg.d_t).into_data(),
        rand_mat(cfg.n_objects, cfg.d_t),
        rand_mat(cfg.n_actions, cfg.d_t),
    )?
    .with_composed_hoi()?;
    let params = init_params(Dims::new(cfg.d_v, cfg.d_t), cfg.seed, ModelConfig::default())?;
    let ml = init_ml_decoder(cfg.d_t, cfg.d_v, cfg.seed.wrapping_add(1))?;
    let (nh, no) = pair_grid(pairs);
    let humans = (0..nh)
        .map(|_| Detection { bbox: random_box(&mut rng), score: 0.9, class_id: 0 })
        .collect();
    let objects = (0..no)
        .map(|_| Detection {
            bbox: random_box(&mut rng),
            score: 0.8,
            class_id: rng.random_range(0..cfg.n_objects),
        })
        .collect();
    Ok(BenchScene { fm, bank, params, ml, humans, objects })
}

fn run_once(strategy: Strategy, scene: &BenchScene, counter: &PassCounter) -> Result<()> {
    let cfg = DetectorConfig::default();
    match strategy {
        Strategy::Regformer => {
            detect_counted(&scene.fm, &scene.bank, &scene.params, &scene.humans, &scene.objects, &cfg, counter)?;
        }
        Strategy::RegformerNaive => {
            detect_naive_counted(&scene.fm, &scene.bank, &scene.params, &scene.humans, &scene.objects, &cfg, counter)?;
        }
        Strategy::MldecoderCrop => {
            for h in &scene.humans {
                for o in &scene.objects {
                    let crop = crop_feature_map(&scene.fm, &h.bbox.union(&o.bbox))?;
                    ml_decoder_forward(&crop, &scene.bank, &scene.ml)?;
                    counter.add_attention();
                    counter.add_decoder();
                }
            }
        }
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times every strategy at every pair count on the calling thread. Counters
/// are read from the first run and checked to be identical on every timed run.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    let mut results = Vec::new();
    for &pairs in &cfg.pair_counts {
        let scene = bench_scene(cfg, pairs)?;
        for &strategy in &cfg.strategies {
            let counter = PassCounter::new();
            run_once(strategy, &scene, &counter)?;
            let counts = (counter.grounding_passes(), counter.attention_passes(), counter.decoder_forwards());
            for _ in 1..cfg.warmup {
                run_once(strategy, &scene, &PassCounter::new())?;
            }
            let mut times = Vec::with_capacity(cfg.iterations);
            for _ in 0..cfg.iterations {
                let c = PassCounter::new();
                let t = Instant::now();
                run_once(strategy, &scene, &c)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                if (c.grounding_passes(), c.attention_passes(), c.decoder_forwards()) != counts {
                    return Err(Error::Numerical {
                        op: "run_benchmark",
                        detail: "pass counts changed between runs".into(),
                    });
                }
            }
            let median_ms = median(times).max(f64::MIN_POSITIVE);
            results.push(BenchResult {
                strategy,
                pair_count: pairs,
                median_ms,
                images_per_s: 1e3 / median_ms,
                grounding_passes: counts.0,
                attention_passes: counts.1,
                decoder_forwards: counts.2,
            });
        }
    }
    results.sort_by(|a, b| (a.strategy.name(), a.pair_count).cmp(&(b.strategy.name(), b.pair_count)));
    Ok(results)
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("strategy,pair_count,median_ms,images_per_s,grounding_passes,attention_passes,decoder_forwards\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{:.6},{:.3},{},{},{}\n",
            r.strategy, r.pair_count, r.median_ms, r.images_per_s, r.grounding_passes, r.attention_passes, r.decoder_forwards
        ));
    }
    out
}

pub fn write_results(results: &[BenchResult], json_path: &Path, csv_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(results).map_err(|e| Error::json(json_path, e))?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    std::fs::write(csv_path, results_csv(results)).map_err(|e| Error::io(csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::detect;

    fn grid(h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::new(h, w, Tensor2D::from_fn(h * w, 2, |p, j| (p * 2 + j) as f64)).unwrap()
    }

    #[test]
    fn crop_reference_cases() {
        let fm = grid(4, 4);
        assert_eq!(crop_feature_map(&fm, &NormBox::FULL).unwrap(), fm);
        let right = crop_feature_map(&fm, &NormBox::new(0.5, 0.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!((right.grid_h(), right.grid_w()), (4, 2));
        assert_eq!(right.patch(0), fm.patch(2));
        assert_eq!(right.patch(7), fm.patch(15));
        let tiny = crop_feature_map(&fm, &NormBox::new(0.51, 0.26, 0.55, 0.3).unwrap()).unwrap();
        assert_eq!((tiny.grid_h(), tiny.grid_w()), (1, 1));
        assert_eq!(tiny.patch(0), fm.patch(6));
        assert!(crop_feature_map(&fm, &NormBox { x1: 0.5, y1: 0.0, x2: 0.2, y2: 1.0 }).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for s in [Strategy::Regformer, Strategy::RegformerNaive, Strategy::MldecoderCrop] {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("yolo".parse::<Strategy>(), Err(Error::Argument(_))));
    }

    #[test]
    fn pair_grid_is_exact() {
        assert_eq!(pair_grid(1), (1, 1));
        assert_eq!(pair_grid(50), (5, 10));
        assert_eq!(pair_grid(200), (10, 20));
        assert_eq!(pair_grid(7), (1, 7));
    }

    #[test]
    fn counters_define_strategies() {
        let cfg = BenchConfig {
            grid_h: 4,
            grid_w: 4,
            d_v: 8,
            d_t: 8,
            pair_counts: vec![1, 6],
            strategies: vec![Strategy::RegformerNaive, Strategy::MldecoderCrop, Strategy::Regformer],
            iterations: 2,
            warmup: 1,
            ..Default::default()
        };
        let r = run_benchmark(&cfg).unwrap();
        let order: Vec<_> = r.iter().map(|x| (x.strategy, x.pair_count)).collect();
        assert_eq!(
            order,
            vec![
                (Strategy::MldecoderCrop, 1),
                (Strategy::MldecoderCrop, 6),
                (Strategy::Regformer, 1),
                (Strategy::Regformer, 6),
                (Strategy::RegformerNaive, 1),
                (Strategy::RegformerNaive, 6),
            ]
        );
        for x in &r {
            let p = x.pair_count;
            let want = match x.strategy {
                Strategy::Regformer => (1, 1, p),
                Strategy::RegformerNaive => (p, p, p),
                Strategy::MldecoderCrop => (0, p, p),
            };
            assert_eq!((x.grounding_passes, x.attention_passes, x.decoder_forwards), want);
            assert!(x.median_ms > 0.0);
        }
        let csv = results_csv(&r);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("strategy,pair_count,median_ms"));
    }

    #[test]
    fn benchmarked_path_is_detect() {
        let cfg = BenchConfig { grid_h: 4, grid_w: 4, d_v: 6, d_t: 6, ..Default::default() };
        let s = bench_scene(&cfg, 6).unwrap();
        let c = PassCounter::new();
        let dc = DetectorConfig::default();
        let a = detect_counted(&s.fm, &s.bank, &s.params, &s.humans, &s.objects, &dc, &c).unwrap();
        let b = detect(&s.fm, &s.bank, &s.params, &s.humans, &s.objects, &dc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(run_benchmark(&BenchConfig { pair_counts: vec![], ..Default::default() }).is_err());
        assert!(run_benchmark(&BenchConfig { iterations: 0, ..Default::default() }).is_err());
    }
}
