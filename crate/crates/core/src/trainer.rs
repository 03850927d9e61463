//! Training loop.
//!
//! Every loss of a step is evaluated at the parameters the step starts
//! from, then each network takes one optimizer step on the gradient of the
//! terms assigned to it:
//!
//! | line | loss                         | updates            |
//! |------|------------------------------|--------------------|
//! | seg  | `L_seg`                      | encoder, classifier |
//! | align| `ξ2·L_adv + ξ3·L_div`        | encoder (min), discriminator (max) |
//! | tq   | `L_seg + ξ1·L_cri`           | quantizer          |
//! | tc   | `L_reg`                      | critic             |
//!
//! Stop-gradients make these assignments structural, so one backward pass
//! of the full objective yields the same gradients as four separate passes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, CentroidEma, CentroidSet, CentroidVars};
use crate::config::TrainConfig;
use crate::critic::{self, RewardLabels, RewardMap};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix};
use crate::networks::{self, Binding, Model};
use crate::nn::{
    optim, Checkpoint, Graph, Group, OptimizerConfig, OptimizerKind, ParamStore, Tensor, Var,
};
use crate::pseudolabel::{self, SoftLabelMap, Thresholds};
use crate::synthdata::{generate_domain, Domain, Scene};

/// Training and held-out scenes for both domains.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: Vec<Scene>,
    pub target: Vec<Scene>,
    pub source_eval: Vec<Scene>,
    pub target_eval: Vec<Scene>,
}

impl Datasets {
    /// Scene indices `0..scenes` train, the following `eval_scenes` evaluate.
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let n = cfg.scenes + cfg.eval_scenes;
        let mut source = generate_domain(&cfg.data, n, Domain::Source)?;
        let mut target = generate_domain(&cfg.data, n, Domain::Target)?;
        let source_eval = source.split_off(cfg.scenes);
        let target_eval = target.split_off(cfg.scenes);
        Ok(Datasets {
            source,
            target,
            source_eval,
            target_eval,
        })
    }
}

pub fn build_model(cfg: &TrainConfig) -> Result<Model> {
    if cfg.uses_discriminator() {
        Model::new(cfg.model.clone(), cfg.seed)
    } else {
        Model::segmentation_only(cfg.model.clone(), cfg.seed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SourceItem<'a> {
    pub image: &'a Tensor,
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct TargetItem<'a> {
    pub image: &'a Tensor,
    /// `None` before the first label refresh or with pseudo labels disabled.
    pub labels: Option<&'a SoftLabelMap>,
}

/// One of the four update assignments of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Line {
    Segmentation,
    Alignment,
    Quantizer,
    Critic,
}

impl Line {
    pub const ALL: [Line; 4] = [
        Line::Segmentation,
        Line::Alignment,
        Line::Quantizer,
        Line::Critic,
    ];

    pub fn groups(self) -> &'static [Group] {
        match self {
            Line::Segmentation => &[Group::Encoder, Group::Classifier],
            Line::Alignment => &[Group::Encoder, Group::Discriminator],
            Line::Quantizer => &[Group::Quantizer],
            Line::Critic => &[Group::Critic],
        }
    }
}

/// Gradient scale for a group: the discriminator ascends.
pub fn group_sign(group: Group) -> f64 {
    if group == Group::Discriminator {
        -1.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub seg_src: f64,
    pub seg_tgt: f64,
    pub seg: f64,
    pub adv: f64,
    pub div: f64,
    pub cri: f64,
    pub reg: f64,
    pub obj: f64,
}

impl StepLosses {
    pub fn recombined(&self, cfg: &TrainConfig) -> f64 {
        self.seg + self.reg + cfg.xi1 * self.cri + cfg.xi2 * self.adv + cfg.xi3 * self.div
    }

    fn all_finite(&self) -> bool {
        [
            self.seg_src,
            self.seg_tgt,
            self.seg,
            self.adv,
            self.div,
            self.cri,
            self.reg,
            self.obj,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-domain critic diagnostics of one step (`[source, target]`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    pub mean_p: [Option<f64>; 2],
    pub mean_r: [Option<f64>; 2],
    pub mean_v: [Option<f64>; 2],
}

/// All loss nodes of one step on a shared tape.
pub struct StepGraph {
    pub graph: Graph,
    xi: [f64; 3],
    use_critic: bool,
    seg: Var,
    adv: Option<Var>,
    div: Option<Var>,
    cri: Option<Var>,
    reg: Option<Var>,
    obj: Var,
    pub losses: StepLosses,
    pub stats: CriticStats,
    /// Rewards in scene order: source items, then target items that have labels.
    pub rewards: Vec<RewardMap>,
    pub source_centroids: CentroidSet,
    pub target_centroids: Option<CentroidSet>,
    /// True when the divergence had no class valid in both domains.
    pub div_empty: bool,
}

#[derive(Clone, Copy, Default)]
pub struct StepOptions<'a> {
    /// Replaces the computed rewards (same order as [`StepGraph::rewards`]).
    pub fixed_rewards: Option<&'a [RewardMap]>,
    pub source_ema: Option<&'a CentroidEma>,
    pub target_ema: Option<&'a CentroidEma>,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

fn masked_value_mean(values: &Tensor, mask: &Tensor) -> Option<f64> {
    let n = mask.sum();
    (n > 0.0).then(|| {
        values
            .data()
            .iter()
            .zip(mask.data())
            .map(|(v, m)| v * m)
            .sum::<f64>()
            / n
    })
}

fn mean_of(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct CriticTerms {
    cri: Vec<(Var, Tensor)>,
    reg: Vec<(Var, Tensor, Tensor)>,
    p: [Vec<f64>; 2],
    r: [Vec<f64>; 2],
    v: [Vec<f64>; 2],
}

/// Builds every loss of one step at the model's current parameters.
pub fn build_step(
    model: &Model,
    cfg: &TrainConfig,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    opts: StepOptions<'_>,
) -> Result<StepGraph> {
    if source.is_empty() || source.len() != target.len() {
        return Err(Error::invalid(format!(
            "a step needs matching non-empty batches, got {} source and {} target scenes",
            source.len(),
            target.len()
        )));
    }
    let store = &model.store;
    let k = model.arch.num_classes;
    let inv_b = 1.0 / source.len() as f64;
    let attention = cfg.use_critic;
    let normalize = cfg.normalize_entropy;
    let train_disc = cfg.xi2 > 0.0;
    let mut g = Graph::new();

    let mut seg_src_terms = Vec::new();
    let mut seg_tgt_terms = Vec::new();
    let mut src_centroid_in = Vec::new();
    let mut tgt_centroid_in = Vec::new();
    let mut d_src = Vec::new();
    let mut d_tgt = Vec::new();
    let mut rewards = Vec::new();
    let mut ct = CriticTerms {
        cri: Vec::new(),
        reg: Vec::new(),
        p: [Vec::new(), Vec::new()],
        r: [Vec::new(), Vec::new()],
        v: [Vec::new(), Vec::new()],
    };
    let mut reward_idx = 0;

    let mut scene = |g: &mut Graph,
                     ct: &mut CriticTerms,
                     rewards: &mut Vec<RewardMap>,
                     image: &Tensor,
                     labels: Option<RewardLabels<'_>>,
                     domain: usize|
     -> Result<(Var, Var, Option<Var>)> {
        let x = g.constant(image.clone())?;
        let raw = model.encoder.forward(g, store, x, Binding::Train)?;
        // one D pass serves both the adversarial term and (detached) attention
        let d = if train_disc {
            Some(
                model
                    .nets()?
                    .discriminator
                    .forward(g, store, raw, Binding::Train)?,
            )
        } else {
            None
        };
        let seg =
            networks::classify_with_domain(g, model, raw, d, attention, normalize, Binding::Train)?;
        let log_probs = g.log_softmax(seg.logits);
        if let Some(p) = seg.transfer {
            ct.p[domain].push(g.value(p).mean());
            if let Some(labels) = labels {
                let nets = model.nets()?;
                let frozen_feat = g.detach(raw);
                let base_logits =
                    model
                        .classifier
                        .logits(g, store, frozen_feat, Binding::Frozen)?;
                let base = g.softmax(base_logits);
                let reward = match opts.fixed_rewards {
                    Some(fixed) => fixed
                        .get(reward_idx)
                        .cloned()
                        .ok_or_else(|| Error::invalid("fewer fixed rewards than labeled scenes"))?,
                    None => critic::reward(g.value(seg.probs), g.value(base), labels)?,
                };
                reward_idx += 1;
                let mask = reward.mask_tensor();
                let r = reward.to_tensor();
                let v_cri = nets
                    .critic
                    .forward(g, store, frozen_feat, p, Binding::Frozen)?;
                let p_const = g.detach(p);
                let v_reg = nets
                    .critic
                    .forward(g, store, frozen_feat, p_const, Binding::Train)?;
                if let Some(m) = masked_value_mean(&r, &mask) {
                    ct.r[domain].push(m);
                }
                if let Some(m) = masked_value_mean(g.value(v_reg), &mask) {
                    ct.v[domain].push(m);
                }
                ct.cri.push((v_cri, mask.clone()));
                ct.reg.push((v_reg, r, mask));
                rewards.push(reward);
            }
        }
        Ok((raw, log_probs, d))
    };

    for item in source {
        let (raw, lp, d) = scene(
            &mut g,
            &mut ct,
            &mut rewards,
            item.image,
            Some(RewardLabels::Hard(item.labels)),
            0,
        )?;
        seg_src_terms.push(pseudolabel::source_cross_entropy(&mut g, lp, item.labels)?);
        let (h, w, _) = item.image.dims3("build_step")?;
        src_centroid_in.push((raw, alignment::source_weights(item.labels, h, w, k)?));
        d_src.extend(d);
    }
    let use_target_labels = cfg.use_pseudo;
    for item in target {
        let labels = item.labels.filter(|_| use_target_labels);
        let (raw, lp, d) = scene(
            &mut g,
            &mut ct,
            &mut rewards,
            item.image,
            labels.map(RewardLabels::Soft),
            1,
        )?;
        if let Some(l) = labels {
            seg_tgt_terms.push(pseudolabel::target_cross_entropy(&mut g, lp, l)?);
            tgt_centroid_in.push((raw, alignment::target_weights(l)));
        }
        d_tgt.extend(d);
    }

    let s = sum_vars(&mut g, &seg_src_terms)?.expect("non-empty batch");
    let seg_src = g.affine(s, inv_b, 0.0);
    let seg_tgt = match sum_vars(&mut g, &seg_tgt_terms)? {
        Some(t) => Some(g.affine(t, inv_b, 0.0)),
        None => None,
    };
    let seg = match seg_tgt {
        Some(t) => g.add(seg_src, t)?,
        None => seg_src,
    };

    let adv = if train_disc {
        let mut vs = Vec::new();
        for (&ds, &dt) in d_src.iter().zip(&d_tgt) {
            vs.push(alignment::adversarial_objective(
                &mut g,
                ds,
                dt,
                cfg.adversarial_form(),
            )?);
        }
        let s = sum_vars(&mut g, &vs)?.expect("non-empty batch");
        Some(g.affine(s, inv_b, 0.0))
    } else {
        None
    };

    let blend = |g: &mut Graph, c: CentroidVars, ema: Option<&CentroidEma>| match ema {
        Some(e) => e.blend(g, &c),
        None => Ok(c),
    };
    let src_c = alignment::centroids_var(&mut g, &src_centroid_in)?;
    let src_c = blend(&mut g, src_c, opts.source_ema)?;
    let tgt_c = if tgt_centroid_in.is_empty() {
        None
    } else {
        let c = alignment::centroids_var(&mut g, &tgt_centroid_in)?;
        Some(blend(&mut g, c, opts.target_ema)?)
    };
    let mut div_empty = false;
    let div = match (&tgt_c, cfg.use_div) {
        (Some(t), true) => {
            let l = alignment::divergence(&mut g, &src_c, t)?;
            div_empty = l.empty_mask;
            Some(l.value)
        }
        _ => None,
    };

    let (cri, reg) = if attention && !ct.cri.is_empty() {
        let pairs: Vec<(Var, &Tensor)> = ct.cri.iter().map(|(v, m)| (*v, m)).collect();
        let cri = critic::loss_cri(&mut g, &pairs)?.value;
        let triples: Vec<(Var, &Tensor, &Tensor)> =
            ct.reg.iter().map(|(v, r, m)| (*v, r, m)).collect();
        let reg = critic::loss_reg(&mut g, &triples)?.value;
        (Some(cri), Some(reg))
    } else {
        (None, None)
    };

    let xi = [cfg.xi1, cfg.xi2, cfg.xi3];
    let mut parts = vec![seg];
    if let Some(r) = reg {
        parts.push(r);
    }
    for (term, w) in [(cri, xi[0]), (adv, xi[1]), (div, xi[2])] {
        if let Some(t) = term {
            parts.push(g.affine(t, w, 0.0));
        }
    }
    let obj = sum_vars(&mut g, &parts)?.expect("segmentation term");

    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let losses = StepLosses {
        seg_src: g.value(seg_src).item(),
        seg_tgt: val(&g, seg_tgt),
        seg: g.value(seg).item(),
        adv: val(&g, adv),
        div: val(&g, div),
        cri: val(&g, cri),
        reg: val(&g, reg),
        obj: g.value(obj).item(),
    };
    let stats = CriticStats {
        mean_p: [mean_of(&ct.p[0]), mean_of(&ct.p[1])],
        mean_r: [mean_of(&ct.r[0]), mean_of(&ct.r[1])],
        mean_v: [mean_of(&ct.v[0]), mean_of(&ct.v[1])],
    };
    let source_centroids = src_c.snapshot(&g);
    let target_centroids = tgt_c.as_ref().map(|t| t.snapshot(&g));
    Ok(StepGraph {
        graph: g,
        xi,
        use_critic: cfg.use_critic,
        seg,
        adv,
        div,
        cri,
        reg,
        obj,
        losses,
        stats,
        rewards,
        source_centroids,
        target_centroids,
        div_empty,
    })
}

impl StepGraph {
    pub fn objective(&self) -> Var {
        self.obj
    }

    /// The loss whose gradient a line applies, or `None` when the line has
    /// nothing to do in this configuration.
    pub fn line_loss(&mut self, line: Line) -> Result<Option<Var>> {
        let g = &mut self.graph;
        Ok(match line {
            Line::Segmentation => Some(self.seg),
            Line::Alignment => {
                let mut parts = Vec::new();
                if let Some(a) = self.adv {
                    parts.push(g.affine(a, self.xi[1], 0.0));
                }
                if let Some(d) = self.div {
                    parts.push(g.affine(d, self.xi[2], 0.0));
                }
                sum_vars(g, &parts)?
            }
            Line::Quantizer if self.use_critic => match self.cri {
                Some(c) => {
                    let w = g.affine(c, self.xi[0], 0.0);
                    Some(g.add(self.seg, w)?)
                }
                None => Some(self.seg),
            },
            Line::Quantizer => None,
            Line::Critic => self.reg,
        })
    }

    /// Adds the gradient of `loss` into `store`; `groups = None` takes every
    /// parameter at unit scale, otherwise only the listed groups with the
    /// discriminator negated.
    pub fn accumulate(
        &self,
        loss: Var,
        store: &mut ParamStore,
        groups: Option<&[Group]>,
    ) -> Result<()> {
        let grads = self.graph.backward(loss)?;
        grads.accumulate(&self.graph, store, |p| match groups {
            None => Some(1.0),
            Some(gs) => gs.contains(&p.group).then(|| group_sign(p.group)),
        });
        Ok(())
    }

    /// One backward pass of the full objective, discriminator negated.
    pub fn accumulate_fused(&self, store: &mut ParamStore) -> Result<()> {
        self.accumulate(self.obj, store, Some(&Group::ALL))
    }

    /// Four backward passes, each routed to its line's groups.
    pub fn accumulate_per_line(&mut self, store: &mut ParamStore) -> Result<()> {
        for line in Line::ALL {
            if let Some(loss) = self.line_loss(line)? {
                self.accumulate(loss, store, Some(line.groups()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientMode {
    #[default]
    Fused,
    PerLine,
}

/// Loop state carried between steps and epochs.
#[derive(Clone, Debug)]
pub struct RunState {
    pub iteration: usize,
    pub total_iterations: usize,
    pub epoch: usize,
    /// Number of label refreshes so far.
    pub label_round: usize,
    pub thresholds: Option<Thresholds>,
    pub labels: Option<Vec<SoftLabelMap>>,
    pub rng: ChaCha8Rng,
    pub source_ema: Option<CentroidEma>,
    pub target_ema: Option<CentroidEma>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        RunState {
            iteration: 0,
            total_iterations: cfg.epochs * cfg.steps_per_epoch(),
            epoch: 0,
            label_round: 0,
            thresholds: None,
            labels: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A4D_0000),
            source_ema: cfg.centroid_ema.map(CentroidEma::new),
            target_ema: cfg.centroid_ema.map(CentroidEma::new),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: StepLosses,
    pub stats: CriticStats,
    pub source_centroids: CentroidSet,
    pub target_centroids: Option<CentroidSet>,
}

fn optimizer_for(cfg: &TrainConfig, group: Group, total: usize) -> OptimizerConfig {
    let o = &cfg.optim;
    let mut c = match group {
        Group::Encoder | Group::Classifier => o.segmentation.clone(),
        Group::Discriminator => o.discriminator.clone(),
        Group::Quantizer => o.quantizer.clone(),
        Group::Critic => o.critic.clone(),
    };
    if c.kind != OptimizerKind::Adam && c.max_iterations <= 1 {
        c.max_iterations = total.max(1);
    }
    c
}

/// Groups that take an optimizer step under `cfg`.
pub fn active_groups(cfg: &TrainConfig) -> Vec<Group> {
    let mut gs = vec![Group::Encoder, Group::Classifier];
    if cfg.xi2 > 0.0 {
        gs.push(Group::Discriminator);
    }
    if cfg.use_critic {
        gs.push(Group::Quantizer);
        gs.push(Group::Critic);
    }
    gs
}

/// Builds the step, accumulates gradients and applies one update per group.
pub fn train_step(
    model: &mut Model,
    cfg: &TrainConfig,
    state: &mut RunState,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    mode: GradientMode,
) -> Result<StepReport> {
    model.store.zero_grad();
    let opts = StepOptions {
        fixed_rewards: None,
        source_ema: state.source_ema.as_ref(),
        target_ema: state.target_ema.as_ref(),
    };
    let mut step = build_step(model, cfg, source, target, opts)?;
    if !step.losses.all_finite() {
        return Err(Error::NonFinite(format!(
            "losses at iteration {} (epoch {}): {:?}",
            state.iteration, state.epoch, step.losses
        )));
    }
    match mode {
        GradientMode::Fused => step.accumulate_fused(&mut model.store)?,
        GradientMode::PerLine => step.accumulate_per_line(&mut model.store)?,
    }
    let total = state.total_iterations.max(state.iteration + 1);
    for group in active_groups(cfg) {
        optim::step(
            &mut model.store,
            group,
            &optimizer_for(cfg, group, total),
            state.iteration,
        )?;
    }
    for p in model.store.iter() {
        if !p.1.value.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameter `{}` after iteration {}",
                p.1.name, state.iteration
            )));
        }
    }
    if let Some(e) = state.source_ema.as_mut() {
        e.update(step.source_centroids.clone());
    }
    if let (Some(e), Some(t)) = (state.target_ema.as_mut(), &step.target_centroids) {
        e.update(t.clone());
    }
    state.iteration += 1;
    Ok(StepReport {
        losses: step.losses,
        stats: step.stats,
        source_centroids: step.source_centroids,
        target_centroids: step.target_centroids,
    })
}

/// Pseudo labels for one refresh of the target set.
#[derive(Clone, Debug)]
pub struct EpochLabels {
    pub thresholds: Thresholds,
    pub labels: Vec<SoftLabelMap>,
    /// Per class: fraction of pixels predicted as the class that got a label.
    pub selection: Vec<f64>,
}

/// Attention-off inference over the target set, thresholds at selection
/// amount `sa`, and fresh labels for every scene.
pub fn generate_labels(
    model: &Model,
    images: &[&Tensor],
    gamma: f64,
    sa: f64,
) -> Result<EpochLabels> {
    if images.is_empty() {
        return Err(Error::invalid("target set is empty"));
    }
    let probs: Vec<Tensor> = images
        .iter()
        .map(|x| networks::predict(model, x).map(|(_, p)| p))
        .collect::<Result<_>>()?;
    let thresholds = pseudolabel::determine_thresholds(&probs, sa)?;
    let labels: Vec<SoftLabelMap> = probs
        .iter()
        .map(|p| pseudolabel::generate(p, &thresholds, gamma))
        .collect::<Result<_>>()?;
    let selection = pseudolabel::selection_fraction(&probs, &labels);
    Ok(EpochLabels {
        thresholds,
        labels,
        selection,
    })
}

/// Label refresh at the scheduled selection amount; advances the round.
pub fn generate_epoch_labels(
    model: &Model,
    images: &[&Tensor],
    cfg: &TrainConfig,
    state: &mut RunState,
) -> Result<EpochLabels> {
    let sa = cfg.selection.at(state.label_round);
    let mut out = generate_labels(model, images, cfg.gamma, sa)?;
    out.thresholds.epoch = state.epoch;
    state.label_round += 1;
    state.thresholds = Some(out.thresholds.clone());
    state.labels = Some(out.labels.clone());
    Ok(out)
}

/// Attention-off confusion matrix over labeled scenes.
pub fn evaluate(model: &Model, scenes: &[Scene]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.arch.num_classes);
    for s in scenes {
        let (_, probs) = networks::predict(model, &s.image)?;
        cm.accumulate(&s.labels, &alignment::argmax_map(&probs)?)?;
    }
    Ok(cm)
}

pub fn domain_gap(model: &Model, source: &[Scene], target: &[Scene]) -> Result<f64> {
    let ds: Vec<Tensor> = source
        .iter()
        .map(|s| networks::predict_domain(model, &s.image))
        .collect::<Result<_>>()?;
    let dt: Vec<Tensor> = target
        .iter()
        .map(|s| networks::predict_domain(model, &s.image))
        .collect::<Result<_>>()?;
    metrics::domain_gap(&ds, &dt)
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Mass-weighted running centroid over an epoch.
struct CentroidAcc {
    sum: Vec<f64>,
    mass: Vec<f64>,
    cols: usize,
}

impl CentroidAcc {
    fn new(k: usize, c: usize) -> Self {
        CentroidAcc {
            sum: vec![0.0; k * c],
            mass: vec![0.0; k],
            cols: c,
        }
    }

    fn push(&mut self, set: &CentroidSet) {
        for (k, &m) in set.mass.iter().enumerate() {
            self.mass[k] += m;
            for (s, v) in self.sum[k * self.cols..][..self.cols]
                .iter_mut()
                .zip(set.row(k))
            {
                *s += m * v;
            }
        }
    }

    fn finish(&self) -> Option<CentroidSet> {
        if self.mass.iter().all(|&m| m == 0.0) {
            return None;
        }
        let k = self.mass.len();
        let data = (0..k * self.cols)
            .map(|i| {
                let m = self.mass[i / self.cols];
                if m > 0.0 {
                    self.sum[i] / m
                } else {
                    0.0
                }
            })
            .collect();
        Some(CentroidSet {
            centroids: Tensor::new(vec![k, self.cols], data).expect("centroid shape"),
            mass: self.mass.clone(),
        })
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub selection_amount: Option<f64>,
    pub losses: StepLosses,
    pub mean_p: [Option<f64>; 2],
    pub mean_r: [Option<f64>; 2],
    pub mean_v: [Option<f64>; 2],
    pub source_miou: f64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub domain_gap: Option<f64>,
    pub selection: Option<Vec<f64>>,
}

pub const LOSS_COLUMNS: [&str; 8] = [
    "loss_seg_src",
    "loss_seg_tgt",
    "loss_seg",
    "loss_adv",
    "loss_div",
    "loss_cri",
    "loss_reg",
    "loss_obj",
];

pub fn metrics_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["epoch".into(), "s_a".into()];
    h.extend(LOSS_COLUMNS.iter().map(|s| s.to_string()));
    for name in ["mean_p", "mean_r", "mean_v"] {
        h.push(format!("{name}_src"));
        h.push(format!("{name}_tgt"));
    }
    h.push("src_miou".into());
    h.push("miou".into());
    h.extend((0..classes).map(|k| format!("iou_{k}")));
    h.push("domain_gap".into());
    h.extend((0..classes).map(|k| format!("sel_{k}")));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn row(&self) -> Vec<String> {
        let l = &self.losses;
        let mut r = vec![self.epoch.to_string(), opt(self.selection_amount)];
        r.extend(
            [
                l.seg_src, l.seg_tgt, l.seg, l.adv, l.div, l.cri, l.reg, l.obj,
            ]
            .iter()
            .map(f64::to_string),
        );
        for m in [self.mean_p, self.mean_r, self.mean_v] {
            r.push(opt(m[0]));
            r.push(opt(m[1]));
        }
        r.push(self.source_miou.to_string());
        r.push(self.miou.to_string());
        r.extend(self.iou.iter().map(|v| opt(*v)));
        r.push(opt(self.domain_gap));
        match &self.selection {
            Some(s) => r.extend(s.iter().map(f64::to_string)),
            None => r.extend(self.iou.iter().map(|_| String::new())),
        }
        r
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.txt")
    }
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("epoch-{epoch}.ckpt"))
    }
    pub fn labels(&self, epoch: usize) -> PathBuf {
        self.root.join("labels").join(format!("epoch-{epoch}"))
    }
    pub fn centroids(&self, epoch: usize) -> PathBuf {
        self.root
            .join("centroids")
            .join(format!("epoch-{epoch}.csv"))
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub layout: RunLayout,
    pub epochs: Vec<EpochMetrics>,
    pub model: Model,
}

impl RunSummary {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least one epoch")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_manifest(
    layout: &RunLayout,
    cfg: &TrainConfig,
    started: u64,
    finished: Option<u64>,
    epochs: usize,
) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash = \"{}\"", cfg.hash());
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "version = \"{}\"", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "started_unix = {started}");
    if let Some(f) = finished {
        let _ = writeln!(s, "finished_unix = {f}");
    }
    let _ = writeln!(s, "epochs_completed = {epochs}");
    let _ = writeln!(s, "config = \"config.toml\"");
    let _ = writeln!(s, "metrics = \"metrics.csv\"");
    let _ = writeln!(s, "checkpoints = \"checkpoints\"");
    let _ = writeln!(s, "labels = \"labels\"");
    let _ = writeln!(s, "centroids = \"centroids\"");
    let p = layout.manifest();
    std::fs::write(&p, s).map_err(|e| Error::io(p, e))
}

/// Full training run writing its artifacts under `out_dir`.
pub fn run(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let data = Datasets::generate(cfg)?;
    run_with_data(cfg, &data, out_dir)
}

pub fn run_with_data(cfg: &TrainConfig, data: &Datasets, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let layout = RunLayout {
        root: out_dir.to_path_buf(),
    };
    mkdir(&layout.root)?;
    let started = unix_now();
    std::fs::write(layout.config(), cfg.to_toml()).map_err(|e| Error::io(layout.config(), e))?;
    write_manifest(&layout, cfg, started, None, 0)?;
    let mut csv = csv_line(&metrics_header(cfg.data.classes));
    let metrics_path = layout.metrics();
    std::fs::write(&metrics_path, &csv).map_err(|e| Error::io(&metrics_path, e))?;

    let mut model = build_model(cfg)?;
    let mut state = RunState::new(cfg);
    let steps = cfg.steps_per_epoch();
    let target_images: Vec<&Tensor> = data.target.iter().map(|s| &s.image).collect();
    let mut history = Vec::new();
    let (k, cf) = (cfg.model.num_classes, cfg.model.feature_channels);

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut selection = None;
        let mut sa = None;
        if cfg.use_pseudo && epoch >= cfg.pseudo_start_epoch {
            let el = generate_epoch_labels(&model, &target_images, cfg, &mut state)?;
            sa = Some(el.thresholds.selection_amount);
            if cfg.save_labels {
                let dir = layout.labels(epoch + 1);
                mkdir(&dir)?;
                for (i, l) in el.labels.iter().enumerate() {
                    pseudolabel::write_labels(&dir.join(format!("scene-{i:04}.lbl")), l)?;
                }
            }
            selection = Some(el.selection);
        }

        let mut src_order: Vec<usize> = (0..data.source.len()).collect();
        let mut tgt_order: Vec<usize> = (0..data.target.len()).collect();
        src_order.shuffle(&mut state.rng);
        tgt_order.shuffle(&mut state.rng);

        let mut loss_means: [Mean; 8] = Default::default();
        let mut stat_means: [Mean; 6] = Default::default();
        let mut src_acc = CentroidAcc::new(k, cf);
        let mut tgt_acc = CentroidAcc::new(k, cf);
        for step in 0..steps {
            let idx = step * cfg.batch_size..(step + 1) * cfg.batch_size;
            let source: Vec<SourceItem> = src_order[idx.clone()]
                .iter()
                .map(|&i| SourceItem {
                    image: &data.source[i].image,
                    labels: &data.source[i].labels,
                })
                .collect();
            let labels = state.labels.clone();
            let target: Vec<TargetItem> = tgt_order[idx]
                .iter()
                .map(|&i| TargetItem {
                    image: &data.target[i].image,
                    labels: labels.as_ref().map(|l| &l[i]),
                })
                .collect();
            let report = match train_step(
                &mut model,
                cfg,
                &mut state,
                &source,
                &target,
                GradientMode::Fused,
            ) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    let p = layout.diagnostics();
                    let text = format!(
                        "epoch {}\nstep {step}\niteration {}\n{e}\n",
                        epoch + 1,
                        state.iteration
                    );
                    std::fs::write(&p, text).map_err(|err| Error::io(&p, err))?;
                    return Err(Error::NonFinite(format!(
                        "{e}; diagnostics in {}",
                        p.display()
                    )));
                }
                Err(e) => return Err(e),
            };
            let l = report.losses;
            for (m, v) in loss_means.iter_mut().zip([
                l.seg_src, l.seg_tgt, l.seg, l.adv, l.div, l.cri, l.reg, l.obj,
            ]) {
                m.push(Some(v));
            }
            let s = report.stats;
            for (i, v) in [s.mean_p, s.mean_r, s.mean_v].iter().flatten().enumerate() {
                stat_means[i].push(*v);
            }
            src_acc.push(&report.source_centroids);
            if let Some(t) = &report.target_centroids {
                tgt_acc.push(t);
            }
        }

        let source_miou = evaluate(&model, &data.source_eval)?.iou()?.miou;
        let target_iou = evaluate(&model, &data.target_eval)?.iou()?;
        let gap = if model.adversarial.is_some() && cfg.xi2 > 0.0 {
            Some(domain_gap(&model, &data.source_eval, &data.target_eval)?)
        } else {
            None
        };
        let lm: Vec<f64> = loss_means.iter().map(|m| m.get().unwrap_or(0.0)).collect();
        let sm: Vec<Option<f64>> = stat_means.iter().map(Mean::get).collect();
        let row = EpochMetrics {
            epoch: epoch + 1,
            selection_amount: sa,
            losses: StepLosses {
                seg_src: lm[0],
                seg_tgt: lm[1],
                seg: lm[2],
                adv: lm[3],
                div: lm[4],
                cri: lm[5],
                reg: lm[6],
                obj: lm[7],
            },
            mean_p: [sm[0], sm[1]],
            mean_r: [sm[2], sm[3]],
            mean_v: [sm[4], sm[5]],
            source_miou,
            miou: target_iou.miou,
            iou: target_iou.per_class,
            domain_gap: gap,
            selection,
        };
        csv.push_str(&csv_line(&row.row()));
        std::fs::write(&metrics_path, &csv).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {}/{}: loss {:.4}, target mIoU {:.4}, source mIoU {:.4}",
            epoch + 1,
            cfg.epochs,
            row.losses.obj,
            row.miou,
            row.source_miou
        );
        history.push(row);

        if cfg.save_checkpoints {
            let p = layout.checkpoint(epoch + 1);
            mkdir(p.parent().expect("checkpoint dir"))?;
            Checkpoint::from_store(&model.store).save(&p)?;
        }
        if let Some(sc) = src_acc.finish() {
            let p = layout.centroids(epoch + 1);
            mkdir(p.parent().expect("centroid dir"))?;
            let tc = tgt_acc.finish();
            let mut sets: Vec<(&str, &CentroidSet)> = vec![("source", &sc)];
            if let Some(t) = &tc {
                sets.push(("target", t));
            }
            alignment::write_centroids(&p, &sets)?;
        }
        write_manifest(&layout, cfg, started, None, epoch + 1)?;
    }
    write_manifest(&layout, cfg, started, Some(unix_now()), cfg.epochs)?;
    Ok(RunSummary {
        layout,
        epochs: history,
        model,
    })
}

/// Loads a checkpoint into a freshly built model for `cfg`.
pub fn load_model(cfg: &TrainConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = build_model(cfg)?;
    Checkpoint::load(checkpoint)?.load_into(&mut model.store, checkpoint)?;
    Ok(model)
}
