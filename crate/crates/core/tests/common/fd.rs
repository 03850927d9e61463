//! Finite-difference cases for every training loss, each over
//! [`INSTANCES`] random micro-instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use uda_core::alignment::{self, AdversarialForm};
use uda_core::config::TrainConfig;
use uda_core::critic;
use uda_core::nn::gradcheck::{self, GradReport, Tolerance};
use uda_core::nn::{Graph, Group, ParamStore, Tensor, Var};
use uda_core::pseudolabel;
use uda_core::trainer::Line;
use uda_core::Result;

pub const INSTANCES: u64 = 20;

/// Merged report over all instances of a case, or the first failing one.
pub type CaseResult = std::result::Result<GradReport, String>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut m = Tensor::from_fn(shape, |_| rng.random_range(0..2) as f64);
    m.data_mut()[0] = 1.0;
    m
}

fn params(g: &mut Graph, s: &ParamStore) -> Vec<Var> {
    s.iter().map(|(id, _)| g.param(s, id)).collect()
}

/// Runs `instance(seed)` for every seed; each returns its own report.
fn over_instances(name: &str, instance: impl Fn(u64) -> Result<GradReport>) -> CaseResult {
    let mut total = GradReport::default();
    for seed in 0..INSTANCES {
        let r = instance(seed).map_err(|e| format!("{name} instance {seed}: {e}"))?;
        if !(r.passed() && r.max_abs_grad > 0.0) {
            return Err(format!("{name} instance {seed}: {r:?}"));
        }
        total.merge(r);
    }
    Ok(total)
}

fn check_store(
    store: &mut ParamStore,
    loss: impl Fn(&ParamStore) -> Result<(Graph, Var)>,
) -> Result<GradReport> {
    gradcheck::check(store, |_| true, loss, Tolerance::default(), None)
}

pub fn adversarial(form: AdversarialForm) -> CaseResult {
    over_instances(&format!("adversarial {form:?}"), |seed| {
        let mut rng = super::rng(seed);
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut store = ParamStore::new();
        store.add(
            "ds",
            Group::Discriminator,
            uniform(&mut rng, &[h, w, 1], 0.05, 0.95),
        );
        store.add(
            "dt",
            Group::Discriminator,
            uniform(&mut rng, &[h, w, 1], 0.05, 0.95),
        );
        check_store(&mut store, |s| {
            let mut g = Graph::new();
            let x = params(&mut g, s);
            let v = alignment::adversarial_objective(&mut g, x[0], x[1], form)?;
            Ok((g, v))
        })
    })
}

/// Two masked maps pooled into one loss, as a step pools its scenes.
fn critic_instance(seed: u64, reg: bool) -> Result<GradReport> {
    let mut rng = super::rng(seed);
    let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
    let (m1, m2) = (mask(&mut rng, &[h, w, 1]), mask(&mut rng, &[h, w, 1]));
    let r1 = Tensor::from_fn(&[h, w, 1], |_| rng.random_range(0..3) as f64);
    let r2 = Tensor::from_fn(&[h, w, 1], |_| rng.random_range(0..3) as f64);
    let mut store = ParamStore::new();
    store.add(
        "v1",
        Group::Critic,
        uniform(&mut rng, &[h, w, 1], -2.0, 2.0),
    );
    store.add(
        "v2",
        Group::Critic,
        uniform(&mut rng, &[h, w, 1], -2.0, 2.0),
    );
    check_store(&mut store, |s| {
        let mut g = Graph::new();
        let x = params(&mut g, s);
        let l = if reg {
            critic::loss_reg(&mut g, &[(x[0], &r1, &m1), (x[1], &r2, &m2)])?
        } else {
            critic::loss_cri(&mut g, &[(x[0], &m1), (x[1], &m2)])?
        };
        Ok((g, l.value))
    })
}

pub fn critic_loss() -> CaseResult {
    over_instances("loss_cri", |seed| critic_instance(seed, false))
}

pub fn regression_loss() -> CaseResult {
    over_instances("loss_reg", |seed| critic_instance(seed, true))
}

pub fn cross_entropy() -> CaseResult {
    over_instances("cross entropy", |seed| {
        let mut rng = super::rng(seed);
        let (h, w, k) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(2..5),
        );
        let hard: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        let soft = super::tied_label_map(&mut rng, h, w, k);
        let mut store = ParamStore::new();
        store.add(
            "logits",
            Group::Classifier,
            uniform(&mut rng, &[h, w, k], -3.0, 3.0),
        );
        check_store(&mut store, |s| {
            let mut g = Graph::new();
            let x = params(&mut g, s);
            let lp = g.log_softmax(x[0]);
            let a = pseudolabel::source_cross_entropy(&mut g, lp, &hard)?;
            let b = pseudolabel::target_cross_entropy(&mut g, lp, &soft)?;
            let b = g.affine(b, 0.7, 0.0);
            let l = g.add(a, b)?;
            Ok((g, l))
        })
    })
}

/// Divergence of centroids pooled from feature maps under fixed class weights.
pub fn divergence() -> CaseResult {
    over_instances("divergence", |seed| {
        let mut rng = super::rng(seed);
        let k = rng.random_range(2..5);
        let mut store = ParamStore::new();
        let mut weights = Vec::new();
        for i in 0..4 {
            let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
            store.add(
                format!("f{i}"),
                Group::Encoder,
                uniform(&mut rng, &[h, w, 3], 0.0, 2.0),
            );
            let mut wt = uniform(&mut rng, &[h, w, k], 0.0, 1.0);
            // every class keeps mass in both domains
            wt.data_mut()[..k].iter_mut().for_each(|v| *v += 0.5);
            weights.push(wt);
        }
        check_store(&mut store, |s| {
            let mut g = Graph::new();
            let x = params(&mut g, s);
            let scene = |i: usize| (x[i], weights[i].clone());
            let sc = alignment::centroids_var(&mut g, &[scene(0), scene(1)])?;
            let tc = alignment::centroids_var(&mut g, &[scene(2), scene(3)])?;
            let l = alignment::divergence(&mut g, &sc, &tc)?;
            assert!(!l.empty_mask);
            Ok((g, l.value))
        })
    })
}

/// Central differences through the full networks for one line's loss,
/// probing the parameters of `groups`, with rewards pinned to their values
/// at the unperturbed point.
pub fn line(
    name: &str,
    cfg_edit: impl Fn(&mut TrainConfig),
    line: Line,
    groups: &[Group],
) -> CaseResult {
    over_instances(name, |seed| {
        let mut cfg = super::micro_config(seed);
        // narrow nets keep pre-activations few, so a probe rarely straddles a kink
        cfg.model.width = 0.0625;
        cfg.model.feature_channels = 8;
        cfg_edit(&mut cfg);
        let mut micro = super::Micro::new(cfg);
        // zero biases on all-zero feature pixels sit exactly on a ReLU kink
        let mut rng = super::rng(2000 + seed);
        for p in micro.model.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let rewards = micro.step().rewards;
        let mut store = micro.model.store.clone();
        let tol = Tolerance {
            step: 1e-7,
            ..Default::default()
        };
        gradcheck::check(
            &mut store,
            |p| groups.contains(&p.group),
            |s| {
                let mut m = micro.model.clone();
                m.store = s.clone();
                let mut sg = micro.step_with(&m, &micro.cfg, Some(&rewards));
                let l = sg.line_loss(line)?.expect("line has a loss");
                Ok((sg.graph, l))
            },
            tol,
            Some(4),
        )
    })
}

/// Every network-level case: name and result.
pub fn network_cases() -> Vec<(&'static str, CaseResult)> {
    let adv = |literal: bool| {
        move |c: &mut TrainConfig| {
            c.xi2 = 1.0;
            c.use_div = false;
            c.literal_eq1 = literal;
        }
    };
    vec![
        // D is cut from the attention path, so the encoder is probed with attention off
        (
            "segmentation (C, TQ)",
            line(
                "segmentation",
                |_| {},
                Line::Segmentation,
                &[Group::Classifier, Group::Quantizer],
            ),
        ),
        (
            "segmentation (E, C), attention off",
            line(
                "segmentation",
                |c| c.use_critic = false,
                Line::Segmentation,
                &[Group::Encoder, Group::Classifier],
            ),
        ),
        (
            "adversarial, conventional",
            line(
                "adversarial",
                adv(false),
                Line::Alignment,
                &[Group::Encoder, Group::Discriminator],
            ),
        ),
        (
            "adversarial, literal",
            line(
                "adversarial",
                adv(true),
                Line::Alignment,
                &[Group::Encoder, Group::Discriminator],
            ),
        ),
        (
            "divergence",
            line(
                "divergence",
                |c| c.xi2 = 0.0,
                Line::Alignment,
                &[Group::Encoder],
            ),
        ),
        (
            "segmentation + critic (TQ)",
            line("quantizer", |_| {}, Line::Quantizer, &[Group::Quantizer]),
        ),
        (
            "regression (TC)",
            line("critic", |_| {}, Line::Critic, &[Group::Critic]),
        ),
    ]
}
