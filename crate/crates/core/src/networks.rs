//! Toy-scale encoder, classifier, discriminator, transferability quantizer
//! and transferability critic.
//!
//! All layers are stride-1 "same" convolutions so every per-pixel map
//! (domain probability, transferability, critic value) lines up with the
//! label grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic;
use crate::error::{Error, Result};
use crate::nn::{Graph, Group, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Base channel plans at width factor 1.
pub const DISCRIMINATOR_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1];
pub const CRITIC_STATE_CHANNELS: [usize; 3] = [64, 32, 16];
pub const CRITIC_POLICY_CHANNELS: [usize; 2] = [16, 16];
pub const ENCODER_HIDDEN: [usize; 2] = [16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Cf, the encoder's output channel count.
    pub feature_channels: usize,
    /// Kernel size of each of the three encoder convolutions.
    pub encoder_kernels: [usize; 3],
    /// Multiplier on the discriminator and critic channel plans.
    pub width: f64,
    pub disc_kernel: usize,
    pub quantizer_kernel: usize,
    pub critic_kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            num_classes: 5,
            feature_channels: 32,
            encoder_kernels: [3, 3, 1],
            width: 0.25,
            disc_kernel: 1,
            quantizer_kernel: 3,
            critic_kernel: 1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("arch.in_channels", self.in_channels),
            ("arch.feature_channels", self.feature_channels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("arch.num_classes", "need at least 2 classes"));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config("arch.width", "width factor must be > 0"));
        }
        let kernels = self
            .encoder_kernels
            .iter()
            .map(|&k| ("arch.encoder_kernels", k))
            .chain([
                ("arch.disc_kernel", self.disc_kernel),
                ("arch.quantizer_kernel", self.quantizer_kernel),
                ("arch.critic_kernel", self.critic_kernel),
            ]);
        for (name, k) in kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(name, format!("kernel size {k} must be odd")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }

    pub fn discriminator_channels(&self) -> Vec<usize> {
        let n = DISCRIMINATOR_CHANNELS.len();
        DISCRIMINATOR_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| if i + 1 == n { 1 } else { self.scaled(c) })
            .collect()
    }

    pub fn critic_state_channels(&self) -> Vec<usize> {
        CRITIC_STATE_CHANNELS
            .iter()
            .map(|&c| self.scaled(c))
            .collect()
    }

    pub fn critic_policy_channels(&self) -> Vec<usize> {
        CRITIC_POLICY_CHANNELS
            .iter()
            .map(|&c| self.scaled(c))
            .collect()
    }

    pub fn encoder_channels(&self) -> [usize; 3] {
        [ENCODER_HIDDEN[0], ENCODER_HIDDEN[1], self.feature_channels]
    }
}

/// Whether a forward pass binds parameters as differentiable leaves or
/// uses their current values as constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Train,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Followed by a rectifier.
    He,
    /// Linear or squashing output.
    Lecun,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        kernel: usize,
        cin: usize,
        cout: usize,
        init: Init,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let bound = match init {
            Init::He => (6.0 / fan_in).sqrt(),
            Init::Lecun => (3.0 / fan_in).sqrt(),
        };
        let w = Tensor::from_fn(&[kernel, kernel, cin, cout], |_| {
            rng.random_range(-bound..bound)
        });
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        ConvLayer {
            weight,
            bias,
            kernel,
            cin,
            cout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + self.cout
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, bind: Binding) -> Result<Var> {
        let (w, b) = match bind {
            Binding::Train => (g.param(store, self.weight), g.param(store, self.bias)),
            Binding::Frozen => (
                g.param_frozen(store, self.weight),
                g.param_frozen(store, self.bias),
            ),
        };
        g.conv2d(x, w, Some(b), 1, self.kernel / 2)
    }
}

fn expect_channels(g: &Graph, x: Var, want: usize, what: &'static str) -> Result<()> {
    let (_, _, c) = g.value(x).dims3(what)?;
    if c != want {
        return Err(Error::shape(
            what,
            format!("expected {want} input channels, got {c}"),
        ));
    }
    Ok(())
}

/// E: three conv + relu blocks, output H×W×Cf, non-negative.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, bind: Binding) -> Result<Var> {
        expect_channels(g, x, self.layers[0].cin, "encoder")?;
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(g, store, h, bind)?;
            h = g.relu(z);
        }
        Ok(h)
    }
}

/// C: 1×1 conv Cf → K; softmax is applied by the caller.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layer: ConvLayer,
}

impl Classifier {
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        bind: Binding,
    ) -> Result<Var> {
        expect_channels(g, feat, self.layer.cin, "classifier")?;
        self.layer.forward(g, store, feat, bind)
    }
}

/// D: five convs, leaky relu on all but the last, sigmoid output.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<ConvLayer>,
}

impl Discriminator {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        bind: Binding,
    ) -> Result<Var> {
        expect_channels(g, feat, self.layers[0].cin, "discriminator")?;
        let mut h = feat;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(g, store, h, bind)?;
            h = if i == last {
                g.sigmoid(z)
            } else {
                g.leaky_relu(z, LEAKY_SLOPE)
            };
        }
        Ok(h)
    }
}

/// T_Q: one conv on D's output map, sigmoid.
#[derive(Clone, Debug)]
pub struct TransferQuantizer {
    pub layer: ConvLayer,
}

impl TransferQuantizer {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        d_map: Var,
        bind: Binding,
    ) -> Result<Var> {
        expect_channels(g, d_map, 1, "quantizer")?;
        let z = self.layer.forward(g, store, d_map, bind)?;
        Ok(g.sigmoid(z))
    }
}

/// T_C: state branch on F, policy branch on P, concatenation, 1-channel head.
#[derive(Clone, Debug)]
pub struct TransferCritic {
    pub state: Vec<ConvLayer>,
    pub policy: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl TransferCritic {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        transfer: Var,
        bind: Binding,
    ) -> Result<Var> {
        expect_channels(g, feat, self.state[0].cin, "critic state")?;
        expect_channels(g, transfer, 1, "critic policy")?;
        let (fh, fw, _) = g.value(feat).dims3("critic")?;
        let (ph, pw, _) = g.value(transfer).dims3("critic")?;
        if (fh, fw) != (ph, pw) {
            return Err(Error::shape(
                "critic",
                format!("features {fh}×{fw} vs transferability {ph}×{pw}"),
            ));
        }
        let mut s = feat;
        for layer in &self.state {
            let z = layer.forward(g, store, s, bind)?;
            s = g.relu(z);
        }
        let mut p = transfer;
        for layer in &self.policy {
            let z = layer.forward(g, store, p, bind)?;
            p = g.relu(z);
        }
        let cat = g.concat_channels(s, p)?;
        self.head.forward(g, store, cat, bind)
    }
}

/// The five networks and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub adversarial: Option<AdversarialNets>,
}

#[derive(Clone, Debug)]
pub struct AdversarialNets {
    pub discriminator: Discriminator,
    pub quantizer: TransferQuantizer,
    pub critic: TransferCritic,
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut m = Self::segmentation_only(arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_0000);
        let store = &mut m.store;
        let arch = &m.arch;
        let cf = arch.feature_channels;

        let mut layers = Vec::new();
        let mut cin = cf;
        let dch = arch.discriminator_channels();
        for (i, &cout) in dch.iter().enumerate() {
            let init = if i + 1 == dch.len() {
                Init::Lecun
            } else {
                Init::He
            };
            layers.push(ConvLayer::new(
                store,
                &mut rng,
                &format!("disc.{i}"),
                Group::Discriminator,
                arch.disc_kernel,
                cin,
                cout,
                init,
            ));
            cin = cout;
        }
        let discriminator = Discriminator { layers };

        let quantizer = TransferQuantizer {
            layer: ConvLayer::new(
                store,
                &mut rng,
                "quant.0",
                Group::Quantizer,
                arch.quantizer_kernel,
                1,
                1,
                Init::Lecun,
            ),
        };

        let mut state = Vec::new();
        let mut cin = cf;
        for (i, cout) in arch.critic_state_channels().into_iter().enumerate() {
            state.push(ConvLayer::new(
                store,
                &mut rng,
                &format!("critic.state.{i}"),
                Group::Critic,
                arch.critic_kernel,
                cin,
                cout,
                Init::He,
            ));
            cin = cout;
        }
        let state_out = cin;
        let mut policy = Vec::new();
        let mut cin = 1;
        for (i, cout) in arch.critic_policy_channels().into_iter().enumerate() {
            policy.push(ConvLayer::new(
                store,
                &mut rng,
                &format!("critic.policy.{i}"),
                Group::Critic,
                arch.critic_kernel,
                cin,
                cout,
                Init::He,
            ));
            cin = cout;
        }
        let head = ConvLayer::new(
            store,
            &mut rng,
            "critic.head",
            Group::Critic,
            1,
            state_out + cin,
            1,
            Init::Lecun,
        );
        m.adversarial = Some(AdversarialNets {
            discriminator,
            quantizer,
            critic: TransferCritic {
                state,
                policy,
                head,
            },
        });
        Ok(m)
    }

    /// Encoder and classifier only.
    pub fn segmentation_only(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = arch.in_channels;
        for (i, (&cout, &k)) in arch
            .encoder_channels()
            .iter()
            .zip(&arch.encoder_kernels)
            .enumerate()
        {
            layers.push(ConvLayer::new(
                &mut store,
                &mut rng,
                &format!("enc.{i}"),
                Group::Encoder,
                k,
                cin,
                cout,
                Init::He,
            ));
            cin = cout;
        }
        let classifier = Classifier {
            layer: ConvLayer::new(
                &mut store,
                &mut rng,
                "cls.0",
                Group::Classifier,
                1,
                cin,
                arch.num_classes,
                Init::Lecun,
            ),
        };
        Ok(Model {
            arch,
            store,
            encoder: Encoder { layers },
            classifier,
            adversarial: None,
        })
    }

    pub fn nets(&self) -> Result<&AdversarialNets> {
        self.adversarial
            .as_ref()
            .ok_or_else(|| Error::invalid("discriminator / quantizer / critic are not initialized"))
    }

    /// Closed-form weight count of one network.
    pub fn declared_param_count(arch: &ArchConfig, group: Group) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let cf = arch.feature_channels;
        match group {
            Group::Encoder => {
                let ch = arch.encoder_channels();
                let ins = [arch.in_channels, ch[0], ch[1]];
                (0..3)
                    .map(|i| conv(arch.encoder_kernels[i], ins[i], ch[i]))
                    .sum()
            }
            Group::Classifier => conv(1, cf, arch.num_classes),
            Group::Discriminator => {
                let mut cin = cf;
                arch.discriminator_channels()
                    .into_iter()
                    .map(|c| {
                        let n = conv(arch.disc_kernel, cin, c);
                        cin = c;
                        n
                    })
                    .sum()
            }
            Group::Quantizer => conv(arch.quantizer_kernel, 1, 1),
            Group::Critic => {
                let mut total = 0;
                let mut cin = cf;
                for c in arch.critic_state_channels() {
                    total += conv(arch.critic_kernel, cin, c);
                    cin = c;
                }
                let state_out = cin;
                let mut cin = 1;
                for c in arch.critic_policy_channels() {
                    total += conv(arch.critic_kernel, cin, c);
                    cin = c;
                }
                total + conv(1, state_out + cin, 1)
            }
        }
    }
}

/// Output of [`forward_segmentation`].
#[derive(Debug, Clone, Copy)]
pub struct SegmentationVars {
    /// Features before attention.
    pub raw_features: Var,
    /// Features actually fed to the classifier.
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    pub transfer: Option<Var>,
}

/// `C(E(x))`, or `C(E(x) ⊙ (1 + P))` with attention, where
/// `P = quantify(T_Q(D(E(x))))` is computed from a detached D map.
pub fn forward_segmentation(
    g: &mut Graph,
    model: &Model,
    x: Var,
    use_attention: bool,
    normalize_entropy: bool,
    bind: Binding,
) -> Result<SegmentationVars> {
    let arch = &model.arch;
    let (h, w, c) = g.value(x).dims3("forward_segmentation")?;
    if c != arch.in_channels {
        return Err(Error::shape(
            "forward_segmentation",
            format!(
                "scene {h}×{w}×{c} but model expects {} channels",
                arch.in_channels
            ),
        ));
    }
    let feat = model.encoder.forward(g, &model.store, x, bind)?;
    classify(g, model, feat, use_attention, normalize_entropy, bind)
}

/// Classifier head on encoder features, with optional transferability
/// attention; see [`forward_segmentation`].
pub fn classify(
    g: &mut Graph,
    model: &Model,
    feat: Var,
    use_attention: bool,
    normalize_entropy: bool,
    bind: Binding,
) -> Result<SegmentationVars> {
    classify_with_domain(g, model, feat, None, use_attention, normalize_entropy, bind)
}

/// As [`classify`], reusing an already computed `D(feat)` for attention.
/// The map is detached here, so it may carry discriminator gradients.
pub fn classify_with_domain(
    g: &mut Graph,
    model: &Model,
    feat: Var,
    domain: Option<Var>,
    use_attention: bool,
    normalize_entropy: bool,
    bind: Binding,
) -> Result<SegmentationVars> {
    let store = &model.store;
    let (features, transfer) = if use_attention {
        let nets = model.nets()?;
        let d = match domain {
            Some(d) => d,
            None => nets
                .discriminator
                .forward(g, store, feat, Binding::Frozen)?,
        };
        let d = g.detach(d);
        let q = nets.quantizer.forward(g, store, d, bind)?;
        let p = critic::quantify_var(g, q, normalize_entropy);
        let gain = g.affine(p, 1.0, 1.0);
        (g.scale_channels(feat, gain)?, Some(p))
    } else {
        (feat, None)
    };
    let logits = model.classifier.logits(g, store, features, bind)?;
    let probs = g.softmax(logits);
    Ok(SegmentationVars {
        raw_features: feat,
        features,
        logits,
        probs,
        transfer,
    })
}

/// Per-pixel domain probability `D(F)`.
pub fn forward_discriminator(
    g: &mut Graph,
    model: &Model,
    feat: Var,
    bind: Binding,
) -> Result<Var> {
    model
        .nets()?
        .discriminator
        .forward(g, &model.store, feat, bind)
}

/// Evaluation path: attention off, no gradient bookkeeping.
pub fn predict(model: &Model, scene: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(scene.clone())?;
    let out = forward_segmentation(&mut g, model, x, false, true, Binding::Frozen)?;
    Ok((g.value(out.features).clone(), g.value(out.probs).clone()))
}

/// D map for a scene, evaluated without gradients.
pub fn predict_domain(model: &Model, scene: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(scene.clone())?;
    let feat = model
        .encoder
        .forward(&mut g, &model.store, x, Binding::Frozen)?;
    let d = forward_discriminator(&mut g, model, feat, Binding::Frozen)?;
    Ok(g.value(d).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn declared_counts_match_built_networks() {
        for width in [0.25, 0.5, 1.0] {
            let arch = ArchConfig {
                width,
                disc_kernel: 3,
                ..Default::default()
            };
            let m = Model::new(arch.clone(), 3).unwrap();
            for group in Group::ALL {
                assert_eq!(
                    m.store.count(group),
                    Model::declared_param_count(&arch, group),
                    "{group:?}"
                );
            }
        }
    }

    #[test]
    fn unit_width_reproduces_published_channel_plans() {
        let arch = ArchConfig {
            width: 1.0,
            ..Default::default()
        };
        assert_eq!(arch.discriminator_channels(), vec![64, 128, 256, 512, 1]);
        assert_eq!(arch.critic_state_channels(), vec![64, 32, 16]);
        assert_eq!(arch.critic_policy_channels(), vec![16, 16]);
        let quarter = ArchConfig::default();
        assert_eq!(quarter.discriminator_channels(), vec![16, 32, 64, 128, 1]);
    }

    #[test]
    fn output_shapes_follow_input_size() {
        let m = Model::new(ArchConfig::default(), 1).unwrap();
        for size in [16, 32, 64] {
            let x = scene(size, size, 9);
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let seg = forward_segmentation(&mut g, &m, xv, true, true, Binding::Frozen).unwrap();
            assert_eq!(g.value(seg.features).shape(), &[size, size, 32]);
            assert_eq!(g.value(seg.probs).shape(), &[size, size, 5]);
            let d = forward_discriminator(&mut g, &m, seg.raw_features, Binding::Frozen).unwrap();
            assert_eq!(g.value(d).shape(), &[size, size, 1]);
            let p = seg.transfer.unwrap();
            let nets = m.nets().unwrap();
            let v = nets
                .critic
                .forward(&mut g, &m.store, seg.raw_features, p, Binding::Frozen)
                .unwrap();
            assert_eq!(g.value(v).shape(), &[size, size, 1]);
        }
    }

    #[test]
    fn encoder_is_nonnegative_and_probs_sum_to_one() {
        let m = Model::new(ArchConfig::default(), 2).unwrap();
        let (f, p) = predict(&m, &scene(16, 16, 4)).unwrap();
        assert!(f.data().iter().all(|&v| v >= 0.0));
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_transferability_is_a_no_op() {
        let m = Model::new(ArchConfig::default(), 5).unwrap();
        let x = scene(8, 8, 6);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let base = forward_segmentation(&mut g, &m, xv, false, true, Binding::Frozen).unwrap();
        let zero = g.constant(Tensor::zeros(&[8, 8, 1])).unwrap();
        let gain = g.affine(zero, 1.0, 1.0);
        let attended = g.scale_channels(base.features, gain).unwrap();
        let logits = m
            .classifier
            .logits(&mut g, &m.store, attended, Binding::Frozen)
            .unwrap();
        assert_eq!(g.value(logits), g.value(base.logits));

        // P ≡ 1 doubles the features: logits shift by exactly the bias-free response to F
        let one = g.constant(Tensor::full(&[8, 8, 1], 1.0)).unwrap();
        let gain = g.affine(one, 1.0, 1.0);
        let doubled = g.scale_channels(base.features, gain).unwrap();
        let l2 = m
            .classifier
            .logits(&mut g, &m.store, doubled, Binding::Frozen)
            .unwrap();
        let w = m.store.value(m.classifier.layer.weight);
        let nobias = crate::nn::ops::conv2d(g.value(base.features), w, None, 1, 0).unwrap();
        let mut want = g.value(base.logits).clone();
        want.add_scaled(&nobias, 1.0);
        assert!(g.value(l2).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn attention_requires_adversarial_nets() {
        let m = Model::segmentation_only(ArchConfig::default(), 1).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(scene(8, 8, 1)).unwrap();
        assert!(forward_segmentation(&mut g, &m, xv, true, true, Binding::Frozen).is_err());
        assert!(forward_segmentation(&mut g, &m, xv, false, true, Binding::Frozen).is_ok());
    }

    #[test]
    fn zero_features_give_half_domain_probability() {
        let m = Model::new(ArchConfig::default(), 7).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[6, 6, 32])).unwrap();
        let d = forward_discriminator(&mut g, &m, f, Binding::Frozen).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.5));
        let p = g.constant(Tensor::zeros(&[6, 6, 1])).unwrap();
        let v = m
            .nets()
            .unwrap()
            .critic
            .forward(&mut g, &m.store, f, p, Binding::Frozen)
            .unwrap();
        assert!(g.value(v).data().iter().all(|&v| v == 0.0));
    }

    /// Layer-by-layer re-evaluation through the public kernels.
    #[test]
    fn discriminator_matches_reevaluation() {
        use crate::nn::ops;
        let arch = ArchConfig {
            disc_kernel: 3,
            ..Default::default()
        };
        let m = Model::new(arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = Tensor::from_fn(&[7, 7, 32], |_| rng.random_range(0.0..2.0));
        let mut g = Graph::new();
        let fv = g.constant(f.clone()).unwrap();
        let d1 = forward_discriminator(&mut g, &m, fv, Binding::Frozen).unwrap();
        let d2 = forward_discriminator(&mut g, &m, fv, Binding::Frozen).unwrap();
        assert_eq!(g.value(d1), g.value(d2));

        let nets = m.nets().unwrap();
        let mut h = f;
        let n = nets.discriminator.layers.len();
        for (i, l) in nets.discriminator.layers.iter().enumerate() {
            let z = ops::conv2d(
                &h,
                m.store.value(l.weight),
                Some(m.store.value(l.bias)),
                1,
                l.kernel / 2,
            )
            .unwrap();
            h = if i + 1 == n {
                ops::sigmoid(&z).unwrap()
            } else {
                ops::leaky_relu(&z, 0.2).unwrap()
            };
        }
        assert!(g.value(d1).max_abs_diff(&h) < 1e-12);
        assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn critic_matches_reevaluation() {
        use crate::nn::ops;
        let m = Model::new(ArchConfig::default(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = Tensor::from_fn(&[5, 5, 32], |_| rng.random_range(0.0..2.0));
        let p = Tensor::from_fn(&[5, 5, 1], |_| rng.random_range(0.0..1.0));
        let mut g = Graph::new();
        let fv = g.constant(f.clone()).unwrap();
        let pv = g.constant(p.clone()).unwrap();
        let nets = m.nets().unwrap();
        let v = nets
            .critic
            .forward(&mut g, &m.store, fv, pv, Binding::Frozen)
            .unwrap();

        let run = |mut h: Tensor, layers: &[ConvLayer]| {
            for l in layers {
                let z = ops::conv2d(
                    &h,
                    m.store.value(l.weight),
                    Some(m.store.value(l.bias)),
                    1,
                    l.kernel / 2,
                )
                .unwrap();
                h = ops::relu(&z).unwrap();
            }
            h
        };
        let s = run(f, &nets.critic.state);
        let q = run(p, &nets.critic.policy);
        let (cs, cq) = (s.shape()[2], q.shape()[2]);
        let mut cat = Vec::new();
        for (a, b) in s.data().chunks(cs).zip(q.data().chunks(cq)) {
            cat.extend_from_slice(a);
            cat.extend_from_slice(b);
        }
        let cat = Tensor::new(vec![5, 5, cs + cq], cat).unwrap();
        let head = &nets.critic.head;
        let want = ops::conv2d(
            &cat,
            m.store.value(head.weight),
            Some(m.store.value(head.bias)),
            1,
            0,
        )
        .unwrap();
        assert!(g.value(v).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn even_kernels_rejected() {
        let arch = ArchConfig {
            disc_kernel: 2,
            ..Default::default()
        };
        assert!(Model::new(arch, 0).is_err());
    }
}
