//! Domain-level adversarial loss and class-level centroid divergence.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::{argmax, MaskedLoss};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::pseudolabel::SoftLabelMap;

/// Discriminator outputs are clamped to `[D_CLAMP, 1 − D_CLAMP]` before logs.
pub const D_CLAMP: f64 = 1e-7;
/// Smoothing added to centroid entries before normalizing them.
pub const CENTROID_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// `E_s log(1 − D) + E_t log D`.
    #[default]
    Conventional,
    /// `E_s (1 − log D) + E_t log D`, unbounded without the clamp.
    Literal,
}

/// The adversarial objective `V` that the discriminator maximizes and the
/// encoder minimizes, built from pixel means of each domain's map.
pub fn adversarial_objective(
    g: &mut Graph,
    d_source: Var,
    d_target: Var,
    form: AdversarialForm,
) -> Result<Var> {
    let mean_log = |g: &mut Graph, x: Var| -> Result<Var> {
        let n = g.value(x).len();
        let w = Tensor::full(g.value(x).shape(), 1.0 / n as f64);
        let l = g.log(x);
        g.dot_const(l, w)
    };
    let ds = g.clamp(d_source, D_CLAMP, 1.0 - D_CLAMP);
    let dt = g.clamp(d_target, D_CLAMP, 1.0 - D_CLAMP);
    let src = match form {
        AdversarialForm::Conventional => {
            let one_minus = g.affine(ds, -1.0, 1.0);
            mean_log(g, one_minus)?
        }
        AdversarialForm::Literal => {
            let m = mean_log(g, ds)?;
            g.affine(m, -1.0, 1.0)
        }
    };
    let tgt = mean_log(g, dt)?;
    g.add(src, tgt)
}

/// Scalar view of the adversarial game.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLoss {
    /// `−V`, minimized by the discriminator.
    pub discriminator: f64,
    /// `V`, minimized by the encoder.
    pub encoder: f64,
}

pub fn loss_adv(
    d_source: &Tensor,
    d_target: &Tensor,
    form: AdversarialForm,
) -> Result<AdversarialLoss> {
    let mut g = Graph::new();
    let s = g.constant(d_source.clone())?;
    let t = g.constant(d_target.clone())?;
    let v = adversarial_objective(&mut g, s, t, form)?;
    let v = g.value(v).item();
    Ok(AdversarialLoss {
        discriminator: -v,
        encoder: v,
    })
}

/// Per-class centroids `K × Cf` and the mass behind each.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: Tensor,
    pub mass: Vec<f64>,
}

impl CentroidSet {
    pub fn classes(&self) -> usize {
        self.mass.len()
    }

    pub fn is_valid(&self, k: usize) -> bool {
        self.mass[k] > 0.0
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let c = self.centroids.shape()[1];
        &self.centroids.data()[k * c..][..c]
    }
}

/// Centroids as a graph node plus their masses.
#[derive(Clone, Debug)]
pub struct CentroidVars {
    pub value: Var,
    pub mass: Vec<f64>,
}

impl CentroidVars {
    pub fn snapshot(&self, g: &Graph) -> CentroidSet {
        CentroidSet {
            centroids: g.value(self.value).clone(),
            mass: self.mass.clone(),
        }
    }
}

/// Raw per-pixel class weights for a hard label map.
pub fn source_weights(
    labels: &[usize],
    height: usize,
    width: usize,
    classes: usize,
) -> Result<Tensor> {
    if labels.len() != height * width {
        return Err(Error::shape(
            "source_weights",
            format!("{} labels for {height}×{width}", labels.len()),
        ));
    }
    let mut w = Tensor::zeros(&[height, width, classes]);
    for (n, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} outside {classes} classes"
            )));
        }
        w.data_mut()[n * classes + l] = 1.0;
    }
    Ok(w)
}

/// Raw per-pixel weights `ŷ_k · [argmax ŷ = k]`; ignored pixels weigh nothing.
pub fn target_weights(labels: &SoftLabelMap) -> Tensor {
    let k = labels.classes();
    let mut w = Tensor::zeros(&[labels.height(), labels.width(), k]);
    for n in 0..labels.pixels() {
        if let Some(c) = labels.argmax(n) {
            w.data_mut()[n * k + c] = labels.row(n)[c];
        }
    }
    w
}

/// Weighted centroids over a batch: `Σ_n w_nk f_n / Σ_n w_nk`, classes
/// with zero mass left at zero.
pub fn centroids_var(g: &mut Graph, scenes: &[(Var, Tensor)]) -> Result<CentroidVars> {
    let Some((_, first)) = scenes.first() else {
        return Err(Error::invalid("no scenes for centroids"));
    };
    let k = first.dims3("centroids")?.2;
    let mut mass = vec![0.0; k];
    for (_, w) in scenes {
        if w.dims3("centroids")?.2 != k {
            return Err(Error::shape(
                "centroids",
                "class count differs between scenes",
            ));
        }
        for row in w.data().chunks(k) {
            for (m, &v) in mass.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    let mut acc: Option<Var> = None;
    for (feat, w) in scenes {
        let mut scaled = w.clone();
        for row in scaled.data_mut().chunks_mut(k) {
            for (v, &m) in row.iter_mut().zip(&mass) {
                if m > 0.0 {
                    *v /= m;
                }
            }
        }
        let part = g.pool(*feat, scaled)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    Ok(CentroidVars {
        value: acc.expect("non-empty scenes"),
        mass,
    })
}

pub fn source_centroids(
    features: &[Tensor],
    labels: &[&[usize]],
    classes: usize,
) -> Result<CentroidSet> {
    let mut g = Graph::new();
    let mut scenes = Vec::with_capacity(features.len());
    for (f, l) in features.iter().zip(labels) {
        let (h, w, _) = f.dims3("source_centroids")?;
        let v = g.constant(f.clone())?;
        scenes.push((v, source_weights(l, h, w, classes)?));
    }
    if features.len() != labels.len() {
        return Err(Error::shape(
            "source_centroids",
            "feature and label counts differ",
        ));
    }
    Ok(centroids_var(&mut g, &scenes)?.snapshot(&g))
}

pub fn target_centroids(features: &[Tensor], labels: &[SoftLabelMap]) -> Result<CentroidSet> {
    if features.len() != labels.len() {
        return Err(Error::shape(
            "target_centroids",
            "feature and label counts differ",
        ));
    }
    let mut g = Graph::new();
    let mut scenes = Vec::with_capacity(features.len());
    for (f, l) in features.iter().zip(labels) {
        let (h, w, _) = f.dims3("target_centroids")?;
        if (h, w) != (l.height(), l.width()) {
            return Err(Error::shape(
                "target_centroids",
                "label map does not match features",
            ));
        }
        let v = g.constant(f.clone())?;
        scenes.push((v, target_weights(l)));
    }
    Ok(centroids_var(&mut g, &scenes)?.snapshot(&g))
}

/// Symmetric KL between smoothed, normalized centroids over the classes
/// valid in both sets, divided by the total class count.
pub fn divergence(
    g: &mut Graph,
    source: &CentroidVars,
    target: &CentroidVars,
) -> Result<MaskedLoss> {
    let (k, c) = match g.value(source.value).shape() {
        &[k, c] => (k, c),
        other => {
            return Err(Error::shape(
                "loss_div",
                format!("centroids must be K×C, got {other:?}"),
            ))
        }
    };
    if g.value(target.value).shape() != [k, c] || source.mass.len() != k || target.mass.len() != k {
        return Err(Error::shape(
            "loss_div",
            "source and target centroid sets differ in shape",
        ));
    }
    let both: Vec<bool> = (0..k)
        .map(|i| source.mass[i] > 0.0 && target.mass[i] > 0.0)
        .collect();
    if !both.iter().any(|&b| b) {
        return Ok(MaskedLoss {
            value: g.constant(Tensor::scalar(0.0))?,
            empty_mask: true,
        });
    }
    let prob = |g: &mut Graph, x: Var| -> Result<Var> {
        let s = g.affine(x, 1.0, CENTROID_EPS);
        g.normalize_rows(s)
    };
    let ps = prob(g, source.value)?;
    let pt = prob(g, target.value)?;
    let ls = g.log(ps);
    let lt = g.log(pt);
    let dp = g.sub(ps, pt)?;
    let dl = g.sub(ls, lt)?;
    // KL(s‖t) + KL(t‖s) = Σ (p_s − p_t)(log p_s − log p_t)
    let terms = g.mul(dp, dl)?;
    let w = Tensor::from_fn(&[k, c], |i| if both[i / c] { 0.5 / k as f64 } else { 0.0 });
    Ok(MaskedLoss {
        value: g.dot_const(terms, w)?,
        empty_mask: false,
    })
}

/// Scalar divergence between two centroid sets; `None` when no class is
/// valid in both.
pub fn loss_div(source: &CentroidSet, target: &CentroidSet) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let s = CentroidVars {
        value: g.constant(source.centroids.clone())?,
        mass: source.mass.clone(),
    };
    let t = CentroidVars {
        value: g.constant(target.centroids.clone())?,
        mass: target.mass.clone(),
    };
    let l = divergence(&mut g, &s, &t)?;
    Ok((!l.empty_mask).then(|| g.value(l.value).item()))
}

/// Running average of centroids across steps (per-class, only where the
/// current batch has mass).
#[derive(Clone, Debug)]
pub struct CentroidEma {
    pub momentum: f64,
    state: Option<CentroidSet>,
}

impl CentroidEma {
    pub fn new(momentum: f64) -> Self {
        CentroidEma {
            momentum,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&CentroidSet> {
        self.state.as_ref()
    }

    /// Blends `m · previous + (1 − m) · current` for classes seen before;
    /// the gradient flows through the current part only.
    pub fn blend(&self, g: &mut Graph, current: &CentroidVars) -> Result<CentroidVars> {
        let Some(prev) = &self.state else {
            return Ok(current.clone());
        };
        let shape = g.value(current.value).shape().to_vec();
        let c = shape[1];
        let mix = |k: usize| prev.mass[k] > 0.0 && current.mass[k] > 0.0;
        let a = Tensor::from_fn(&shape, |i| {
            let k = i / c;
            if mix(k) {
                1.0 - self.momentum
            } else if current.mass[k] > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        let b = Tensor::from_fn(&shape, |i| {
            let k = i / c;
            if mix(k) {
                self.momentum * prev.centroids.data()[i]
            } else if current.mass[k] > 0.0 {
                0.0
            } else {
                prev.centroids.data()[i]
            }
        });
        let av = g.constant(a)?;
        let scaled = g.mul(current.value, av)?;
        let value = g.add_const(scaled, &b)?;
        let mass = current
            .mass
            .iter()
            .zip(&prev.mass)
            .map(|(&m, &p)| if m > 0.0 { m } else { p })
            .collect();
        Ok(CentroidVars { value, mass })
    }

    pub fn update(&mut self, blended: CentroidSet) {
        self.state = Some(blended);
    }
}

/// Writes a centroid snapshot as CSV rows `domain,class,mass,c0,c1,…`.
pub fn write_centroids(path: &Path, sets: &[(&str, &CentroidSet)]) -> Result<()> {
    let mut out = String::new();
    let c = sets.first().map_or(0, |(_, s)| s.centroids.shape()[1]);
    out.push_str("domain,class,mass");
    for i in 0..c {
        let _ = write!(out, ",c{i}");
    }
    out.push('\n');
    for (name, set) in sets {
        for k in 0..set.classes() {
            let _ = write!(out, "{name},{k},{}", set.mass[k]);
            for v in set.row(k) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Majority class of each pixel row; used for quick argmax maps.
pub fn argmax_map(probs: &Tensor) -> Result<Vec<usize>> {
    let (_, _, k) = probs.dims3("argmax_map")?;
    Ok(probs.data().chunks(k).map(argmax).collect())
}
