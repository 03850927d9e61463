//! Transferability quantification, reward mechanism and critic losses.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::networks::{Binding, Model};
use crate::nn::graph::bernoulli_entropy;
use crate::nn::{Graph, Tensor, Var};
use crate::pseudolabel::SoftLabelMap;

/// Bernoulli entropy of a single probability.
pub fn uncertainty(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("probability {q} outside [0, 1]")));
    }
    Ok(bernoulli_entropy(q))
}

/// Quantified transferability for one raw quantizer output.
pub fn transferability(q: f64, normalize: bool) -> Result<f64> {
    let u = uncertainty(q)?;
    Ok(if normalize { 1.0 - u / LN_2 } else { 1.0 - u })
}

/// Per-pixel transferability with the raw quantizer output alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMap {
    pub p: Tensor,
    pub q: Tensor,
}

/// `P = 1 − U(q) / log 2` (or `1 − U(q)` when unnormalized) on the tape.
pub fn quantify_var(g: &mut Graph, q: Var, normalize: bool) -> Var {
    let u = g.bernoulli_entropy(q);
    let scale = if normalize { -1.0 / LN_2 } else { -1.0 };
    g.affine(u, scale, 1.0)
}

/// Runs T_Q on a D map and converts the result to transferability.
pub fn quantify(model: &Model, d_map: &Tensor, normalize: bool) -> Result<TransferMap> {
    let (_, _, c) = d_map.dims3("quantify")?;
    if c != 1 {
        return Err(Error::shape(
            "quantify",
            format!("D map must have 1 channel, got {c}"),
        ));
    }
    let mut g = Graph::new();
    let d = g.constant(d_map.clone())?;
    let q = model
        .nets()?
        .quantizer
        .forward(&mut g, &model.store, d, Binding::Frozen)?;
    let p = quantify_var(&mut g, q, normalize);
    Ok(TransferMap {
        p: g.value(p).clone(),
        q: g.value(q).clone(),
    })
}

/// Ground truth for the reward: one-hot source labels or soft target labels.
#[derive(Clone, Copy, Debug)]
pub enum RewardLabels<'a> {
    Hard(&'a [usize]),
    Soft(&'a SoftLabelMap),
}

impl RewardLabels<'_> {
    fn pixels(&self) -> usize {
        match self {
            RewardLabels::Hard(l) => l.len(),
            RewardLabels::Soft(s) => s.pixels(),
        }
    }

    /// Target class of pixel `n`, or `None` for an ignored pixel.
    fn target(&self, n: usize) -> Option<usize> {
        match self {
            RewardLabels::Hard(l) => Some(l[n]),
            RewardLabels::Soft(s) => s.argmax(n),
        }
    }
}

/// Segmentation reward, amelioration reward and validity mask per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMap {
    pub height: usize,
    pub width: usize,
    pub segmentation: Vec<u8>,
    pub amelioration: Vec<u8>,
    pub mask: Vec<bool>,
}

impl RewardMap {
    pub fn total(&self, n: usize) -> f64 {
        (self.segmentation[n] + self.amelioration[n]) as f64
    }

    /// `R = Rs + Ra` as an `H×W×1` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width, 1], |n| self.total(n))
    }

    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width, 1], |n| {
            if self.mask[n] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_mean(&self) -> f64 {
        let n = self.masked_count();
        if n == 0 {
            return 0.0;
        }
        (0..self.mask.len())
            .filter(|&i| self.mask[i])
            .map(|i| self.total(i))
            .sum::<f64>()
            / n as f64
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `Rs = [argmax C_with = argmax y]`, `Ra = [C_with[k] > C_without[k]]` at
/// `k = argmax y`; ignored pixels score 0 and are masked out.
pub fn reward(
    prob_with: &Tensor,
    prob_without: &Tensor,
    labels: RewardLabels<'_>,
) -> Result<RewardMap> {
    let (h, w, k) = prob_with.dims3("reward")?;
    if !prob_with.same_shape(prob_without) {
        return Err(Error::shape(
            "reward",
            format!("{:?} vs {:?}", prob_with.shape(), prob_without.shape()),
        ));
    }
    if labels.pixels() != h * w {
        return Err(Error::shape(
            "reward",
            format!("{} labels for {h}×{w} pixels", labels.pixels()),
        ));
    }
    if let RewardLabels::Soft(s) = labels {
        if s.classes() != k {
            return Err(Error::shape(
                "reward",
                format!("{}-class labels for {k} classes", s.classes()),
            ));
        }
        s.validate()?;
    }
    let n = h * w;
    let mut out = RewardMap {
        height: h,
        width: w,
        segmentation: vec![0; n],
        amelioration: vec![0; n],
        mask: vec![false; n],
    };
    for i in 0..n {
        let Some(t) = labels.target(i) else { continue };
        if t >= k {
            return Err(Error::invalid(format!(
                "label {t} at pixel {i} outside {k} classes"
            )));
        }
        let with = &prob_with.data()[i * k..][..k];
        let without = &prob_without.data()[i * k..][..k];
        out.mask[i] = true;
        out.segmentation[i] = (argmax(with) == t) as u8;
        out.amelioration[i] = (with[t] > without[t]) as u8;
    }
    Ok(out)
}

/// `V_cri = T_C(F, P)` evaluated without gradients.
pub fn critic_value(model: &Model, features: &Tensor, transfer: &TransferMap) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(features.clone())?;
    let p = g.constant(transfer.p.clone())?;
    let v = model
        .nets()?
        .critic
        .forward(&mut g, &model.store, f, p, Binding::Frozen)?;
    Ok(g.value(v).clone())
}

/// Result of a masked mean: the loss node plus whether the mask was empty.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub value: Var,
    pub empty_mask: bool,
}

/// `Σ x·m / Σ m` pooled over several `(map, mask)` pairs. Returns a
/// constant zero with `empty_mask` set when no pixel is valid.
pub fn masked_mean(g: &mut Graph, terms: &[(Var, &Tensor)]) -> Result<MaskedLoss> {
    let count: f64 = terms.iter().map(|(_, m)| m.sum()).sum();
    if count == 0.0 {
        let zero = g.constant(Tensor::scalar(0.0))?;
        return Ok(MaskedLoss {
            value: zero,
            empty_mask: true,
        });
    }
    let mut acc: Option<Var> = None;
    for (x, mask) in terms {
        let w = mask.map(|m| m / count);
        let part = g.dot_const(*x, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    Ok(MaskedLoss {
        value: acc.expect("non-empty terms"),
        empty_mask: false,
    })
}

/// `L_cri = mean(−V_cri)` over the pooled masks.
pub fn loss_cri(g: &mut Graph, terms: &[(Var, &Tensor)]) -> Result<MaskedLoss> {
    let m = masked_mean(g, terms)?;
    Ok(MaskedLoss {
        value: g.affine(m.value, -1.0, 0.0),
        empty_mask: m.empty_mask,
    })
}

/// `L_reg = mean((V_cri − R)²)` over the pooled masks.
pub fn loss_reg(g: &mut Graph, terms: &[(Var, &Tensor, &Tensor)]) -> Result<MaskedLoss> {
    let mut sq = Vec::with_capacity(terms.len());
    for (v, reward, _) in terms {
        let neg = reward.map(|r| -r);
        let diff = g.add_const(*v, &neg)?;
        sq.push(g.square(diff));
    }
    let pairs: Vec<(Var, &Tensor)> = sq
        .iter()
        .zip(terms)
        .map(|(&s, (_, _, m))| (s, *m))
        .collect();
    masked_mean(g, &pairs)
}
