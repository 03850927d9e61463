//! Confidence-guided soft pseudo labels.
//!
//! Per-class thresholds come from a ranked list of the classifier's
//! max-probabilities over the whole target set. Each pixel's soft label is
//! the closed-form minimizer of the selection cost on the simplex, kept only
//! when that cost beats the all-zero label.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A pixel is selected only when its cost is below `-TIE_TOLERANCE`;
/// costs within rounding of zero count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Selection amount schedule: 35% at epoch 0, +5% per epoch, capped at 50%.
pub fn scheduled_selection_amount(epoch: usize) -> f64 {
    let percent = (35 + 5 * epoch).min(50);
    percent as f64 / 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds {
    pub delta: Vec<f64>,
    pub selection_amount: f64,
    pub epoch: usize,
}

/// Rank inside a descending list of `len` values for selection amount `sa`.
pub fn threshold_rank(sa: f64, len: usize) -> usize {
    // the small offset keeps e.g. 0.29 * 100 from flooring to 28
    let r = (sa * len as f64 + 1e-9).floor() as usize;
    r.min(len.saturating_sub(1))
}

/// Per-class thresholds from the target set's predictions.
///
/// Classes that are never the argmax get a threshold of 1.
pub fn determine_thresholds(prob_maps: &[Tensor], selection_amount: f64) -> Result<Thresholds> {
    if prob_maps.is_empty() {
        return Err(Error::invalid("no probability maps to rank"));
    }
    if !(selection_amount > 0.0 && selection_amount <= 1.0) {
        return Err(Error::invalid(format!(
            "selection amount {selection_amount} outside (0, 1]"
        )));
    }
    let (_, _, k) = prob_maps[0].dims3("determine_thresholds")?;
    let mut lists: Vec<Vec<f64>> = vec![Vec::new(); k];
    for map in prob_maps {
        let (_, _, kk) = map.dims3("determine_thresholds")?;
        if kk != k {
            return Err(Error::shape(
                "determine_thresholds",
                format!("{kk} classes vs {k}"),
            ));
        }
        for row in map.data().chunks(k) {
            let c = crate::critic::argmax(row);
            lists[c].push(row[c]);
        }
    }
    let delta = lists
        .into_iter()
        .map(|mut l| {
            if l.is_empty() {
                return 1.0;
            }
            l.sort_by(|a, b| b.total_cmp(a));
            l[threshold_rank(selection_amount, l.len())]
        })
        .collect();
    Ok(Thresholds {
        delta,
        selection_amount,
        epoch: 0,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma must be > 0, got {gamma}")))
    }
}

fn check_inputs(probs: &[f64], delta: &[f64]) -> Result<()> {
    if probs.len() != delta.len() || probs.is_empty() {
        return Err(Error::shape(
            "soft_label",
            format!(
                "{} probabilities vs {} thresholds",
                probs.len(),
                delta.len()
            ),
        ));
    }
    if probs.iter().chain(delta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("soft_label input".into()));
    }
    if delta.iter().any(|&d| d <= 0.0) {
        return Err(Error::invalid("thresholds must be positive"));
    }
    Ok(())
}

/// `ŷ_k ∝ (C_k / δ_k)^{1/γ}`, evaluated as a softmax of log-ratios.
pub fn soft_label(probs: &[f64], delta: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_inputs(probs, delta)?;
    let logits: Vec<f64> = probs
        .iter()
        .zip(delta)
        .map(|(&c, &d)| (c.max(PROB_FLOOR).ln() - d.ln()) / gamma)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

/// `S_C(ŷ) = Σ_k −ŷ_k ln(C_k/δ_k) + γ ŷ_k ln ŷ_k`, with `0 ln 0 = 0`.
pub fn selection_cost(label: &[f64], probs: &[f64], delta: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_inputs(probs, delta)?;
    if label.len() != probs.len() {
        return Err(Error::shape(
            "selection_cost",
            "label length differs from class count",
        ));
    }
    let mut cost = 0.0;
    for ((&y, &c), &d) in label.iter().zip(probs).zip(delta) {
        if y == 0.0 {
            continue;
        }
        cost += -y * (c.max(PROB_FLOOR).ln() - d.ln()) + gamma * y * y.ln();
    }
    Ok(cost)
}

/// Per-pixel soft labels; unselected pixels hold the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
    selected: Vec<bool>,
}

impl SoftLabelMap {
    pub fn empty(height: usize, width: usize, classes: usize) -> Self {
        SoftLabelMap {
            height,
            width,
            classes,
            values: vec![0.0; height * width * classes],
            selected: vec![false; height * width],
        }
    }

    /// Builds a map from per-pixel rows, `None` marking ignored pixels.
    pub fn from_rows(
        height: usize,
        width: usize,
        classes: usize,
        rows: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        if rows.len() != height * width {
            return Err(Error::shape(
                "soft_label_map",
                format!("{} rows for {height}×{width}", rows.len()),
            ));
        }
        let mut m = Self::empty(height, width, classes);
        for (n, row) in rows.into_iter().enumerate() {
            if let Some(r) = row {
                if r.len() != classes {
                    return Err(Error::shape(
                        "soft_label_map",
                        format!("row of {} for {classes} classes", r.len()),
                    ));
                }
                m.values[n * classes..][..classes].copy_from_slice(&r);
                m.selected[n] = true;
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.classes..][..self.classes]
    }

    pub fn is_selected(&self, n: usize) -> bool {
        self.selected[n]
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Dominant class of a selected pixel.
    pub fn argmax(&self, n: usize) -> Option<usize> {
        self.selected[n].then(|| crate::critic::argmax(self.row(n)))
    }

    /// The labels as an `H×W×K` tensor (zero rows for ignored pixels).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.classes],
            self.values.clone(),
        )
        .expect("label shape")
    }

    pub fn selection_mask(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width, 1], |n| {
            if self.selected[n] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Simplex-or-zero check on every pixel.
    pub fn validate(&self) -> Result<()> {
        for n in 0..self.pixels() {
            let row = self.row(n);
            if self.selected[n] {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "pixel {n}: soft label {row:?} is not on the simplex"
                    )));
                }
            } else if row.iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!(
                    "pixel {n}: ignored pixel has non-zero label"
                )));
            }
        }
        Ok(())
    }

    /// Per-class mean entropy of the selected rows, in nats.
    pub fn mean_entropy(&self) -> Option<f64> {
        let n = self.selected_count();
        if n == 0 {
            return None;
        }
        let total: f64 = (0..self.pixels())
            .filter(|&i| self.selected[i])
            .map(|i| {
                -self
                    .row(i)
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>()
            })
            .sum();
        Some(total / n as f64)
    }
}

/// Soft labels for one probability map.
pub fn generate(prob_map: &Tensor, thresholds: &Thresholds, gamma: f64) -> Result<SoftLabelMap> {
    let (h, w, k) = prob_map.dims3("generate")?;
    if thresholds.delta.len() != k {
        return Err(Error::shape(
            "generate",
            format!("{} thresholds for {k} classes", thresholds.delta.len()),
        ));
    }
    let mut out = SoftLabelMap::empty(h, w, k);
    for (n, probs) in prob_map.data().chunks(k).enumerate() {
        let y = soft_label(probs, &thresholds.delta, gamma)?;
        let cost = selection_cost(&y, probs, &thresholds.delta, gamma)?;
        if cost < -TIE_TOLERANCE {
            out.values[n * k..][..k].copy_from_slice(&y);
            out.selected[n] = true;
        }
    }
    Ok(out)
}

/// Fraction of pixels predicted as each class that received a label.
pub fn selection_fraction(prob_maps: &[Tensor], labels: &[SoftLabelMap]) -> Vec<f64> {
    let Some(first) = prob_maps.first() else {
        return Vec::new();
    };
    let k = first.shape()[2];
    let mut predicted = vec![0usize; k];
    let mut chosen = vec![0usize; k];
    for (map, lab) in prob_maps.iter().zip(labels) {
        for (n, row) in map.data().chunks(k).enumerate() {
            let c = crate::critic::argmax(row);
            predicted[c] += 1;
            if lab.is_selected(n) {
                chosen[c] += 1;
            }
        }
    }
    predicted
        .iter()
        .zip(&chosen)
        .map(|(&p, &c)| if p == 0 { 0.0 } else { c as f64 / p as f64 })
        .collect()
}

/// Source term of the segmentation loss: mean pixel cross-entropy against
/// hard labels.
pub fn source_cross_entropy(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (h, w, k) = g.value(log_probs).dims3("source_cross_entropy")?;
    if labels.len() != h * w {
        return Err(Error::shape(
            "source_cross_entropy",
            format!("{} labels for {h}×{w}", labels.len()),
        ));
    }
    let n = (h * w) as f64;
    let mut weights = Tensor::zeros(&[h, w, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(format!("label {l} outside {k} classes")));
        }
        weights.data_mut()[i * k + l] = -1.0 / n;
    }
    g.dot_const(log_probs, weights)
}

/// Target term: `−Σ ŷ log C` summed over selected pixels, divided by the
/// scene's pixel count.
pub fn target_cross_entropy(g: &mut Graph, log_probs: Var, labels: &SoftLabelMap) -> Result<Var> {
    let (h, w, k) = g.value(log_probs).dims3("target_cross_entropy")?;
    if (labels.height, labels.width, labels.classes) != (h, w, k) {
        return Err(Error::shape(
            "target_cross_entropy",
            "label map does not match predictions",
        ));
    }
    let n = (h * w) as f64;
    let weights = labels.to_tensor().map(|y| -y / n);
    g.dot_const(log_probs, weights)
}

const LABEL_MAGIC: &[u8; 8] = b"UDALBL\0\0";
const LABEL_VERSION: u32 = 1;

/// Writes a label map: header `magic, version, H, W, K, count` (u32 LE) then
/// `count` records of `pixel index (u32), K × f64`. Ignored pixels are elided.
pub fn write_labels(path: &Path, labels: &SoftLabelMap) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(LABEL_MAGIC);
    for v in [
        LABEL_VERSION,
        labels.height as u32,
        labels.width as u32,
        labels.classes as u32,
        labels.selected_count() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for n in (0..labels.pixels()).filter(|&n| labels.selected[n]) {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        for &v in labels.row(n) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<SoftLabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 28 || &bytes[..8] != LABEL_MAGIC {
        return Err(bad("not a label file"));
    }
    let u =
        |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if u(0) != LABEL_VERSION as usize {
        return Err(bad("unsupported label file version"));
    }
    let (h, w, k, count) = (u(1), u(2), u(3), u(4));
    let rec = 4 + 8 * k;
    if bytes.len() != 28 + count * rec {
        return Err(bad("truncated label file"));
    }
    let mut m = SoftLabelMap::empty(h, w, k);
    for r in 0..count {
        let off = 28 + r * rec;
        let n = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if n >= h * w {
            return Err(bad("pixel index out of range"));
        }
        for c in 0..k {
            let s = off + 4 + 8 * c;
            m.values[n * k + c] = f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap());
        }
        m.selected[n] = true;
    }
    m.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_values() {
        assert_eq!(scheduled_selection_amount(0), 0.35);
        assert_eq!(scheduled_selection_amount(1), 0.40);
        assert_eq!(scheduled_selection_amount(3), 0.50);
        assert_eq!(scheduled_selection_amount(10), 0.50);
    }

    #[test]
    fn single_class_threshold_example() {
        let map = Tensor::new(vec![1, 4, 1], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let t = determine_thresholds(&[map.clone()], 0.5).unwrap();
        assert_eq!(t.delta, vec![0.7]);
        let full = determine_thresholds(&[map], 1.0).unwrap();
        assert_eq!(full.delta, vec![0.6]);
    }

    #[test]
    fn absent_class_gets_unit_threshold() {
        let map = Tensor::new(vec![1, 2, 3], vec![0.7, 0.2, 0.1, 0.6, 0.3, 0.1]).unwrap();
        let t = determine_thresholds(&[map], 0.35).unwrap();
        assert_eq!(t.delta[1], 1.0);
        assert_eq!(t.delta[2], 1.0);
        assert!(determine_thresholds(&[], 0.35).is_err());
    }

    #[test]
    fn soft_label_identities() {
        let c = [0.2, 0.5, 0.3];
        let y = soft_label(&c, &[1.0; 3], 1.0).unwrap();
        assert!(y.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-15));
        let u = soft_label(&[0.25; 4], &[0.4; 4], 0.3).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(soft_label(&c, &[1.0; 3], 0.0).is_err());
        assert!(soft_label(&[f64::NAN, 0.5, 0.5], &[1.0; 3], 1.0).is_err());
    }

    #[test]
    fn two_class_example() {
        let y = soft_label(&[0.9, 0.1], &[0.5, 0.5], 0.25).unwrap();
        let want = 1.8f64.powi(4) / (1.8f64.powi(4) + 0.2f64.powi(4));
        assert!((y[0] - want).abs() < 1e-14);
        assert!((y[0] - 0.99985).abs() < 1e-5);
        let cost = selection_cost(&y, &[0.9, 0.1], &[0.5, 0.5], 0.25).unwrap();
        assert!((cost + 0.588).abs() < 1e-3, "{cost}");
    }

    #[test]
    fn selection_cost_identities() {
        let c = [0.1, 0.6, 0.3];
        assert_eq!(
            selection_cost(&[0.0; 3], &c, &[0.4, 0.9, 0.2], 0.25).unwrap(),
            0.0
        );
        let cost = selection_cost(&c, &c, &[1.0; 3], 1.0).unwrap();
        assert!(cost.abs() < 1e-15);
    }

    #[test]
    fn uniform_probabilities_at_uniform_thresholds_are_selected() {
        // cost = -γ ln K at the closed-form optimum
        let k = 4;
        let probs = Tensor::full(&[1, 1, k], 0.25);
        let t = Thresholds {
            delta: vec![0.25; k],
            selection_amount: 0.35,
            epoch: 0,
        };
        let y = soft_label(probs.data(), &t.delta, 0.25).unwrap();
        let cost = selection_cost(&y, probs.data(), &t.delta, 0.25).unwrap();
        assert!((cost + 0.25 * (k as f64).ln()).abs() < 1e-12);
        assert!(generate(&probs, &t, 0.25).unwrap().is_selected(0));
    }

    #[test]
    fn exact_tie_is_unselected() {
        // γ = 1, δ = 1: the optimum is C itself and its cost is zero
        let probs = Tensor::new(vec![1, 2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.3, 0.1]).unwrap();
        let t = Thresholds {
            delta: vec![1.0; 3],
            selection_amount: 1.0,
            epoch: 0,
        };
        let m = generate(&probs, &t, 1.0).unwrap();
        assert_eq!(m.selected_count(), 0);
        assert!(m.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_pixel_above_threshold_is_selected() {
        let probs = Tensor::new(vec![1, 1, 3], vec![0.9, 0.06, 0.04]).unwrap();
        let t = Thresholds {
            delta: vec![0.8, 0.9, 0.9],
            selection_amount: 0.35,
            epoch: 0,
        };
        let m = generate(&probs, &t, 0.25).unwrap();
        assert!(m.is_selected(0));
        assert_eq!(m.argmax(0), Some(0));
    }

    #[test]
    fn label_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SoftLabelMap::from_rows(
            2,
            2,
            2,
            vec![Some(vec![0.25, 0.75]), None, None, Some(vec![1.0, 0.0])],
        )
        .unwrap();
        let path = dir.path().join("s.lbl");
        write_labels(&path, &m).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 28 + 2 * (4 + 16));
        assert_eq!(read_labels(&path).unwrap(), m);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
        })
    }

    proptest! {
        #[test]
        fn generated_maps_are_simplex_or_zero(
            probs in proptest::collection::vec(simplex(4), 1..30),
            delta in proptest::collection::vec(0.05f64..1.0, 4),
            gamma in 0.01f64..3.0,
        ) {
            let n = probs.len();
            let flat: Vec<f64> = probs.into_iter().flatten().collect();
            let map = Tensor::new(vec![1, n, 4], flat).unwrap();
            let t = Thresholds { delta, selection_amount: 0.5, epoch: 0 };
            let m = generate(&map, &t, gamma).unwrap();
            prop_assert!(m.validate().is_ok());
        }

        #[test]
        fn raising_a_threshold_never_helps_its_class(
            probs in simplex(3),
            delta in proptest::collection::vec(0.05f64..1.0, 3),
            bump in 0.0f64..0.5,
            gamma in 0.05f64..2.0,
            class in 0usize..3,
        ) {
            let y0 = soft_label(&probs, &delta, gamma).unwrap();
            let c0 = selection_cost(&y0, &probs, &delta, gamma).unwrap();
            let mut raised = delta.clone();
            raised[class] += bump;
            let y1 = soft_label(&probs, &raised, gamma).unwrap();
            let c1 = selection_cost(&y1, &probs, &raised, gamma).unwrap();
            prop_assert!(y1[class] <= y0[class] + 1e-12);
            prop_assert!(c1 >= c0 - 1e-12);
        }

        #[test]
        fn thresholds_fall_as_selection_grows(
            values in proptest::collection::vec(0.34f64..1.0, 1..60),
            a in 0.01f64..1.0,
            b in 0.01f64..1.0,
        ) {
            let n = values.len();
            let map = Tensor::new(vec![1, n, 1], values).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let tl = determine_thresholds(&[map.clone()], lo).unwrap();
            let th = determine_thresholds(&[map], hi).unwrap();
            prop_assert!(th.delta[0] <= tl.delta[0]);
            prop_assert!(tl.delta[0] > 0.0 && tl.delta[0] <= 1.0);
        }
    }
}
