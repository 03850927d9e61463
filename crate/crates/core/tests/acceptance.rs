//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use uda_core::alignment::{self, AdversarialForm};
use uda_core::config::{TrainConfig, Variant};
use uda_core::critic::{self, RewardLabels};
use uda_core::nn::{Graph, Tensor};
use uda_core::pseudolabel;
use uda_core::trainer::{self, Datasets, RunSummary};

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn criterion(
        &mut self,
        id: usize,
        name: &str,
        limit: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if let Some(l) = limit {
            if start.elapsed() > l {
                pass = false;
                detail = format!("{detail}; over the {} s budget", l.as_secs());
            }
        }
        self.failures += !pass as usize;
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name} ({secs:.1} s): {detail}");
    }
}

fn soft_label_oracle() -> Outcome {
    let mut rng = common::rng(101);
    let (mut worst, mut worst_kkt) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=5);
        let c = common::random_simplex(&mut rng, k, 0.01);
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let gamma = rng.random_range(0.1..2.0);
        let y = pseudolabel::soft_label(&c, &d, gamma).map_err(|e| e.to_string())?;
        let grid = common::grid_argmin(&c, &d, gamma);
        worst = y
            .iter()
            .zip(&grid)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
        worst_kkt = worst_kkt.max(common::kkt_residual(&y, &c, &d, gamma));
    }
    let detail = format!(
        "1000 instances, max L∞ {worst:.2e} (< 1e-3), max KKT residual {worst_kkt:.2e} (< 1e-9)"
    );
    if worst < 1e-3 && worst_kkt < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn threshold_oracle() -> Outcome {
    let mut rng = common::rng(102);
    for set in 0..100 {
        let k = rng.random_range(2..6);
        let scenes = rng.random_range(1..6);
        let maps: Vec<Tensor> = (0..scenes)
            .map(|_| {
                let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
                common::tied_prob_map(&mut rng, h, w, k)
            })
            .collect();
        let percent = rng.random_range(1..=100);
        let got = pseudolabel::determine_thresholds(&maps, percent as f64 / 100.0)
            .map_err(|e| e.to_string())?;
        let want = common::quantile_thresholds(&maps, percent);
        if got.delta != want {
            return Err(format!(
                "set {set} at S_A {percent}%: {:?} vs oracle {want:?}",
                got.delta
            ));
        }
    }
    Ok("100 scene sets equal the counting oracle exactly".into())
}

fn gradient_suite() -> Outcome {
    let mut cases = vec![
        (
            "adversarial, conventional",
            common::fd::adversarial(AdversarialForm::Conventional),
        ),
        (
            "adversarial, literal",
            common::fd::adversarial(AdversarialForm::Literal),
        ),
        ("critic", common::fd::critic_loss()),
        ("regression", common::fd::regression_loss()),
        (
            "cross-entropy (source + target)",
            common::fd::cross_entropy(),
        ),
        ("divergence via centroids", common::fd::divergence()),
    ];
    cases.extend(common::fd::network_cases());
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (name, r) in &cases {
        match r {
            Ok(r) => {
                checked += r.checked;
                worst = worst.max(r.worst_score);
            }
            Err(e) => return Err(format!("{name}: {e}")),
        }
    }
    Ok(format!(
        "{} cases × {} instances, {checked} partials, worst error {:.2} of the 1e-4 relative budget",
        cases.len(),
        common::fd::INSTANCES,
        worst
    ))
}

fn routing_isolation() -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..3 {
        bad.extend(common::isolation::violations(common::micro_config(seed)));
        bad.extend(common::isolation::zero_weight_violation(seed));
    }
    if bad.is_empty() {
        Ok("4 lines × 3 micro steps, routed and unrouted; off-target grads exactly 0".into())
    } else {
        Err(bad.join("; "))
    }
}

fn loss_identities() -> Outcome {
    let mut rng = common::rng(105);
    for _ in 0..1000 {
        let (k, c) = (rng.random_range(2..6), rng.random_range(1..8));
        let (a, b) = (
            common::random_centroids(&mut rng, k, c),
            common::random_centroids(&mut rng, k, c),
        );
        let ab = alignment::loss_div(&a, &b).map_err(|e| e.to_string())?;
        let ba = alignment::loss_div(&b, &a).map_err(|e| e.to_string())?;
        if ab != ba {
            return Err(format!("L_div asymmetric: {ab:?} vs {ba:?}"));
        }
        if ab.is_some_and(|v| v < 0.0) {
            return Err(format!("L_div negative: {ab:?}"));
        }
    }
    let reg = |v: &Tensor, r: &Tensor, m: &Tensor| {
        let mut g = Graph::new();
        let vv = g.constant(v.clone()).unwrap();
        let l = critic::loss_reg(&mut g, &[(vv, r, m)]).unwrap();
        g.value(l.value).item()
    };
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let r = Tensor::from_fn(&[h, w, 1], |_| rng.random_range(0..3) as f64);
        let mut m = Tensor::from_fn(&[h, w, 1], |_| rng.random_range(0..2) as f64);
        m.data_mut()[0] = 1.0;
        let on_mask = Tensor::from_fn(&[h, w, 1], |i| {
            if m.data()[i] == 1.0 {
                r.data()[i]
            } else {
                -5.0
            }
        });
        if reg(&on_mask, &r, &m) != 0.0 {
            return Err("L_reg nonzero with V_cri = R on the mask".into());
        }
        let mut off = on_mask.clone();
        off.data_mut()[0] += rng.random_range(1e-3..1.0);
        let noise = Tensor::from_fn(&[h, w, 1], |_| rng.random_range(-3.0..3.0));
        if !(reg(&off, &r, &m) > 0.0 && reg(&noise, &r, &m) >= 0.0) {
            return Err("L_reg not positive off the zero set".into());
        }
        let kk = rng.random_range(2..6);
        let c = common::random_simplex(&mut rng, kk, 0.01);
        let d: Vec<f64> = (0..kk).map(|_| rng.random_range(0.1..1.0)).collect();
        let zero = pseudolabel::selection_cost(&vec![0.0; kk], &c, &d, rng.random_range(0.05..2.0))
            .unwrap();
        if zero != 0.0 {
            return Err(format!("S_C(0) = {zero}"));
        }
    }
    for i in 0..=10_000 {
        let q = i as f64 / 10_000.0;
        let p = critic::transferability(q, true).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("P({q}) = {p}"));
        }
    }
    let half = critic::transferability(0.5, true).unwrap();
    if half != 0.0 {
        return Err(format!("P(0.5) = {half}"));
    }
    Ok("L_div symmetric and ≥ 0; L_reg ≥ 0, zero iff V_cri = R on mask; S_C(0) = 0; P ∈ [0,1], P(0.5) = 0".into())
}

fn reward_oracle() -> Outcome {
    let mut rng = common::rng(106);
    for trial in 0..100 {
        let (h, w, k) = (
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(2..6),
        );
        let with = common::tied_prob_map(&mut rng, h, w, k);
        let without = if trial % 3 == 0 {
            with.clone()
        } else {
            common::tied_prob_map(&mut rng, h, w, k)
        };
        let hard: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        let got = critic::reward(&with, &without, RewardLabels::Hard(&hard))
            .map_err(|e| e.to_string())?;
        let targets: Vec<Option<usize>> = hard.iter().map(|&t| Some(t)).collect();
        if got != common::reward_oracle(&with, &without, &targets) {
            return Err(format!("instance {trial}, hard labels"));
        }
        let soft = common::tied_label_map(&mut rng, h, w, k);
        let got = critic::reward(&with, &without, RewardLabels::Soft(&soft))
            .map_err(|e| e.to_string())?;
        if got != common::reward_oracle(&with, &without, &common::soft_targets(&soft)) {
            return Err(format!("instance {trial}, soft labels"));
        }
    }
    Ok("100 instances × (hard, soft) labels equal the enumeration oracle".into())
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Final-epoch runs of every variant per seed on shared data.
struct Benchmark {
    miou: Vec<[f64; 5]>,
    gaps: Vec<(Option<f64>, Option<f64>)>,
}

fn benchmark(root: &std::path::Path) -> Result<Benchmark, String> {
    let mut out = Benchmark {
        miou: Vec::new(),
        gaps: Vec::new(),
    };
    for seed in SEEDS {
        let base = TrainConfig {
            seed,
            ..Default::default()
        };
        let data = Datasets::generate(&base).map_err(|e| e.to_string())?;
        let mut row = [0.0; 5];
        for (i, v) in Variant::ALL.into_iter().enumerate() {
            let dir = root.join(format!("seed-{seed}")).join(v.slug());
            let s: RunSummary =
                trainer::run_with_data(&v.apply(&base), &data, &dir).map_err(|e| e.to_string())?;
            row[i] = s.epochs.last().expect("epochs ran").miou;
            if v == Variant::Full {
                out.gaps
                    .push((s.epochs[0].domain_gap, s.epochs.last().unwrap().domain_gap));
            }
        }
        out.miou.push(row);
    }
    Ok(out)
}

fn relative_claim(b: &Benchmark) -> Outcome {
    let idx = |v: Variant| Variant::ALL.iter().position(|&x| x == v).unwrap();
    let mean = |v: Variant| b.miou.iter().map(|r| r[idx(v)]).sum::<f64>() / b.miou.len() as f64;
    let (full, so) = (mean(Variant::Full), mean(Variant::SourceOnly));
    let mut detail = format!(
        "mean mIoU full {:.1}, source-only {:.1} (+{:.1} pts, need ≥ 3)",
        100.0 * full,
        100.0 * so,
        100.0 * (full - so)
    );
    let mut pass = full - so >= 0.03;
    for v in [
        Variant::WithoutCritic,
        Variant::WithoutPseudo,
        Variant::WithoutDivergence,
    ] {
        let below = b
            .miou
            .iter()
            .filter(|r| r[idx(v)] < r[idx(Variant::Full)])
            .count();
        let per_seed: Vec<String> = b
            .miou
            .iter()
            .map(|r| format!("{:.1}", 100.0 * r[idx(v)]))
            .collect();
        detail.push_str(&format!(
            "; {} below full on {below}/3 seeds [{}]",
            v.name(),
            per_seed.join(" ")
        ));
        pass &= below >= 2;
    }
    let full_seeds: Vec<String> = b
        .miou
        .iter()
        .map(|r| format!("{:.1}", 100.0 * r[idx(Variant::Full)]))
        .collect();
    detail.push_str(&format!("; full per seed [{}]", full_seeds.join(" ")));
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gap_decrease(b: &Benchmark) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (first, last)) in SEEDS.iter().zip(&b.gaps) {
        match (first, last) {
            (Some(f), Some(l)) => {
                pass &= l < f;
                parts.push(format!("seed {seed}: {f:.3} → {l:.3}"));
            }
            _ => {
                pass = false;
                parts.push(format!("seed {seed}: gap missing"));
            }
        }
    }
    let detail = format!("domain gap epoch 1 → 10: {}", parts.join(", "));
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(root: &std::path::Path) -> Outcome {
    let cfg = TrainConfig::default();
    let read =
        |d: &std::path::Path| std::fs::read(d.join("metrics.csv")).map_err(|e| e.to_string());
    let (a, b) = (root.join("a"), root.join("b"));
    trainer::run(&cfg, &a).map_err(|e| e.to_string())?;
    trainer::run(&cfg, &b).map_err(|e| e.to_string())?;
    if read(&a)? == read(&b)? {
        Ok(format!(
            "two default runs wrote identical metrics.csv ({} bytes)",
            read(&a)?.len()
        ))
    } else {
        Err("metrics.csv differs between identical runs".into())
    }
}

fn main() {
    let mut report = Report { failures: 0 };
    let secs = Duration::from_secs;
    report.criterion(
        1,
        "soft label vs simplex-grid oracle",
        Some(secs(30)),
        soft_label_oracle,
    );
    report.criterion(
        2,
        "thresholds vs quantile oracle",
        Some(secs(5)),
        threshold_oracle,
    );
    report.criterion(
        3,
        "finite-difference gradient suite",
        Some(secs(120)),
        gradient_suite,
    );
    report.criterion(4, "update-line gradient isolation", None, routing_isolation);
    report.criterion(5, "loss identities", None, loss_identities);
    report.criterion(6, "reward vs enumeration oracle", None, reward_oracle);

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let bench = benchmark(&dir.path().join("bench"));
    let took = start.elapsed();
    report.criterion(7, "end-to-end gain over source-only", None, || {
        let b = bench.as_ref().map_err(|e| e.clone())?;
        let d = relative_claim(b);
        let budget = format!("; 15 runs in {:.0} s (≤ 1200)", took.as_secs_f64());
        match d {
            Ok(s) if took <= secs(1200) => Ok(s + &budget),
            Ok(s) | Err(s) => Err(s + &budget),
        }
    });
    report.criterion(8, "domain gap shrinks over training", None, || {
        gap_decrease(bench.as_ref().map_err(|e| e.clone())?)
    });
    report.criterion(9, "bit-identical reruns", None, || {
        determinism(&dir.path().join("det"))
    });

    println!("{} of 9 criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
