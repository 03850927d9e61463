//! Independent oracles and micro fixtures shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

pub mod fd;
pub mod isolation;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uda_core::alignment::CentroidSet;
use uda_core::config::TrainConfig;
use uda_core::critic::RewardMap;
use uda_core::networks::Model;
use uda_core::nn::Tensor;
use uda_core::pseudolabel::SoftLabelMap;
use uda_core::synthdata::SceneSpec;
use uda_core::trainer::{self, Datasets, SourceItem, StepGraph, StepOptions, TargetItem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive point on the simplex, no entry below ~`lo / k`.
pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize, lo: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(lo..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Selection cost written out directly, `0 ln 0 = 0`.
pub fn cost(y: &[f64], c: &[f64], d: &[f64], gamma: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..y.len() {
        if y[k] > 0.0 {
            s += -y[k] * (c[k] / d[k]).ln() + gamma * y[k] * y[k].ln();
        }
    }
    s
}

fn compositions(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        prefix.push(n);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for i in 0..=n {
        prefix.push(i);
        compositions(n - i, k - 1, prefix, out);
        prefix.pop();
    }
}

/// Brute-force minimizer of the selection cost on the simplex: the best
/// point of a uniform grid, then pairwise mass transfers with a halving
/// step. Pairwise moves suffice because the cost is separable and convex.
pub fn grid_argmin(c: &[f64], d: &[f64], gamma: f64) -> Vec<f64> {
    let k = c.len();
    let n = 20;
    let mut grid = Vec::new();
    compositions(n, k, &mut Vec::new(), &mut grid);
    let mut best: Vec<f64> = Vec::new();
    let mut best_cost = f64::INFINITY;
    for p in grid {
        let y: Vec<f64> = p.iter().map(|&v| v as f64 / n as f64).collect();
        let v = cost(&y, c, d, gamma);
        if v < best_cost {
            best_cost = v;
            best = y;
        }
    }
    let mut step = 1.0 / n as f64;
    while step > 1e-12 {
        let mut improved = true;
        while improved {
            improved = false;
            for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let t = step.min(best[j]);
                    if t <= 0.0 {
                        continue;
                    }
                    let mut y = best.clone();
                    y[i] += t;
                    y[j] -= t;
                    let v = cost(&y, c, d, gamma);
                    if v < best_cost {
                        best_cost = v;
                        best = y;
                        improved = true;
                    }
                }
            }
        }
        step /= 2.0;
    }
    best
}

/// Spread of the Lagrangian gradient `−ln(c/δ) + γ(ln y + 1)` across
/// coordinates; zero at an interior stationary point.
pub fn kkt_residual(y: &[f64], c: &[f64], d: &[f64], gamma: f64) -> f64 {
    let g: Vec<f64> = (0..y.len())
        .map(|k| -(c[k] / d[k]).ln() + gamma * (y[k].ln() + 1.0))
        .collect();
    let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Smallest index `i` with `row[i] >= row[j]` for every `j`.
pub fn first_argmax(row: &[f64]) -> usize {
    (0..row.len())
        .find(|&i| row.iter().all(|&v| row[i] >= v))
        .expect("non-empty row")
}

/// `H×W×K` probability map built from small integer logits, so equal
/// maxima and repeated values are common.
pub fn tied_prob_map(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * k);
    for _ in 0..h * w {
        let e: Vec<f64> = (0..k)
            .map(|_| (rng.random_range(0..3) as f64).exp())
            .collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![h, w, k], data).unwrap()
}

/// δ_k by counting: the collected value `v` with `#{x > v} <= r < #{x >= v}`
/// where `r = floor(percent · len / 100)` clamped to the last index.
pub fn quantile_thresholds(maps: &[Tensor], percent: usize) -> Vec<f64> {
    let k = maps[0].shape()[2];
    let mut lists = vec![Vec::new(); k];
    for m in maps {
        for row in m.data().chunks(k) {
            let c = first_argmax(row);
            lists[c].push(row[c]);
        }
    }
    lists
        .iter()
        .map(|l| {
            if l.is_empty() {
                return 1.0;
            }
            let r = (percent * l.len() / 100).min(l.len() - 1);
            *l.iter()
                .find(|&&v| {
                    let above = l.iter().filter(|&&x| x > v).count();
                    let at_least = l.iter().filter(|&&x| x >= v).count();
                    above <= r && r < at_least
                })
                .expect("some value holds rank r")
        })
        .collect()
}

/// Soft label map whose rows come from small integers, so the argmax of a
/// row is often tied; about a third of pixels are unselected.
pub fn tied_label_map(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> SoftLabelMap {
    let rows = (0..h * w)
        .map(|_| {
            if rng.random_range(0..3) == 0 {
                return None;
            }
            let mut r: Vec<f64> = (0..k).map(|_| rng.random_range(0..3) as f64).collect();
            if r.iter().all(|&v| v == 0.0) {
                r[rng.random_range(0..k)] = 1.0;
            }
            let s: f64 = r.iter().sum();
            Some(r.iter().map(|v| v / s).collect())
        })
        .collect();
    SoftLabelMap::from_rows(h, w, k, rows).unwrap()
}

/// Per-pixel rewards by enumeration. `targets[n] = None` marks an ignored pixel.
pub fn reward_oracle(with: &Tensor, without: &Tensor, targets: &[Option<usize>]) -> RewardMap {
    let (h, w, k) = (with.shape()[0], with.shape()[1], with.shape()[2]);
    let mut out = RewardMap {
        height: h,
        width: w,
        segmentation: vec![0; h * w],
        amelioration: vec![0; h * w],
        mask: vec![false; h * w],
    };
    for (n, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let a = &with.data()[n * k..(n + 1) * k];
        let b = &without.data()[n * k..(n + 1) * k];
        // t wins iff it beats every earlier class and ties no later one downward
        let wins = (0..k).all(|j| if j < t { a[j] < a[t] } else { a[j] <= a[t] });
        out.mask[n] = true;
        out.segmentation[n] = wins as u8;
        out.amelioration[n] = (a[t] > b[t]) as u8;
    }
    out
}

/// `K×C` centroids with about a quarter of the classes massless.
pub fn random_centroids(rng: &mut ChaCha8Rng, k: usize, c: usize) -> CentroidSet {
    let mass: Vec<f64> = (0..k)
        .map(|_| {
            if rng.random_range(0..4) == 0 {
                0.0
            } else {
                rng.random_range(0.5..5.0)
            }
        })
        .collect();
    let centroids = Tensor::from_fn(&[k, c], |i| {
        if mass[i / c] == 0.0 {
            0.0
        } else {
            rng.random_range(0.0..2.0)
        }
    });
    CentroidSet { centroids, mass }
}

/// Argmax class of each selected soft-label row, `None` when unselected.
pub fn soft_targets(labels: &SoftLabelMap) -> Vec<Option<usize>> {
    (0..labels.pixels())
        .map(|n| labels.is_selected(n).then(|| first_argmax(labels.row(n))))
        .collect()
}

/// 8×8 scenes, two per domain, labels from the untrained model.
pub fn micro_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        scenes: 2,
        eval_scenes: 1,
        pseudo_start_epoch: 0,
        save_labels: false,
        save_checkpoints: false,
        data: SceneSpec {
            size: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct Micro {
    pub cfg: TrainConfig,
    pub model: Model,
    pub data: Datasets,
    pub labels: Vec<SoftLabelMap>,
}

impl Micro {
    pub fn new(cfg: TrainConfig) -> Self {
        let data = Datasets::generate(&cfg).unwrap();
        let model = trainer::build_model(&cfg).unwrap();
        let images: Vec<&Tensor> = data.target.iter().map(|s| &s.image).collect();
        let labels = trainer::generate_labels(&model, &images, cfg.gamma, 0.5)
            .unwrap()
            .labels;
        Micro {
            cfg,
            model,
            data,
            labels,
        }
    }

    pub fn source(&self) -> Vec<SourceItem<'_>> {
        self.data
            .source
            .iter()
            .map(|s| SourceItem {
                image: &s.image,
                labels: &s.labels,
            })
            .collect()
    }

    pub fn target(&self) -> Vec<TargetItem<'_>> {
        self.data
            .target
            .iter()
            .zip(&self.labels)
            .map(|(s, l)| TargetItem {
                image: &s.image,
                labels: Some(l),
            })
            .collect()
    }

    /// Step graph for `model` (defaults to the fixture's) under `cfg`.
    pub fn step_with(
        &self,
        model: &Model,
        cfg: &TrainConfig,
        rewards: Option<&[RewardMap]>,
    ) -> StepGraph {
        let opts = StepOptions {
            fixed_rewards: rewards,
            ..Default::default()
        };
        trainer::build_step(model, cfg, &self.source(), &self.target(), opts).unwrap()
    }

    pub fn step(&self) -> StepGraph {
        self.step_with(&self.model, &self.cfg, None)
    }
}
