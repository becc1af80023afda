#![allow(dead_code)]

use mmad_core::eval::{evaluate, MetricsReport, DEFAULT_FPR_LIMITS};
use mmad_core::model::{MapperKind, Model, ModelArch};
use mmad_core::scoring::{AnomalyMap, FusionWeights};
use mmad_core::synthdata::{gen_dataset, SynthConfig, SynthDataset};
use mmad_core::trainer::{train, TrainConfig};
use mmad_core::{PixelMask, ValidityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scored maps with at least one anomalous and one nominal image,
/// at least one region, and ties in the scores.
pub struct MetricCase {
    pub maps: Vec<AnomalyMap<f64>>,
    pub gts: Vec<PixelMask>,
    pub valid: Vec<ValidityMask>,
    pub image_scores: Vec<f64>,
    pub labels: Vec<bool>,
}

pub fn metric_case(seed: u64) -> MetricCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let (h, w) = (rng.random_range(2..=16), rng.random_range(2..=16));
    let levels = rng.random_range(3..=20);
    let mut case = MetricCase {
        maps: Vec::new(),
        gts: Vec::new(),
        valid: Vec::new(),
        image_scores: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0..n {
        let mut valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.9)).collect();
        valid[0] = true;
        valid[1] = true;
        let anomalous = i == 0 || (i > 1 && rng.random_bool(0.5));
        let mut gt = vec![false; h * w];
        if anomalous {
            let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
            let r = rng.random_range(0..=h.min(w) / 3) as isize;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                    if dy.abs() <= r && dx.abs() <= r {
                        gt[y * w + x] = valid[y * w + x];
                    }
                }
            }
            if !gt.iter().any(|&g| g) {
                gt[0] = true;
            }
        }
        let scores: Vec<f64> = (0..h * w)
            .map(|p| {
                let bump = if gt[p] { 0.3 } else { 0.0 };
                ((rng.random::<f64>() + bump) * levels as f64).floor() / levels as f64
            })
            .collect();
        let vm = ValidityMask::from_vec(h, w, valid).unwrap();
        let map = AnomalyMap::new(h, w, scores).unwrap();
        case.image_scores.push(mmad_core::scoring::image_score(&map, &vm).unwrap());
        case.labels.push(anomalous);
        case.maps.push(map);
        case.gts.push(PixelMask::from_vec(h, w, gt).unwrap());
        case.valid.push(vm);
    }
    case
}

/// Benchmark settings: the default synthetic config, default training.
pub fn bench_synth() -> SynthConfig {
    SynthConfig::default()
}

pub struct BenchRun {
    pub data: SynthDataset<f64>,
    pub untrained: Model<f64>,
    pub trained: Model<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn bench_run(seed: u64, mapper: MapperKind) -> BenchRun {
    let cfg = bench_synth();
    let data = gen_dataset::<f64>(&cfg, seed).unwrap();
    let classes = data.generators.iter().map(|g| g.class_name.clone()).collect();
    let mut arch = ModelArch::new(cfg.d_rgb, cfg.d_3d, classes);
    arch.mapper = mapper;
    let untrained = Model::<f64>::init(arch, seed).unwrap();
    let out = train(untrained.clone(), &TrainConfig::default(), &data.train, seed).unwrap();
    BenchRun {
        first_loss: out.log.first().unwrap().l_total,
        last_loss: out.log.last().unwrap().l_total,
        trained: out.model,
        untrained,
        data,
    }
}

pub fn report(model: &Model<f64>, data: &SynthDataset<f64>, fusion: FusionWeights, seed: u64) -> MetricsReport {
    evaluate(model, &data.test, &fusion, &DEFAULT_FPR_LIMITS, "", seed).unwrap()
}

pub fn no_text() -> FusionWeights {
    FusionWeights { alpha: 0.5, beta: 0.0 }
}
