//! Procedural two-domain segmentation scenes.
//!
//! Scenes are rendered label-first: a background class plus a few layered
//! rectangles, ellipses and stripe bands, each painted with its class color,
//! a class-specific texture and pixel noise. The target domain draws from
//! the same process with a [`DomainShift`] applied.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Domain::Source => 0x5EED_0001,
            Domain::Target => 0x5EED_0002,
        }
    }
}

/// Differences applied to the target domain only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Added to every pixel, one entry per channel (missing entries are 0).
    pub color_offset: Vec<f64>,
    /// Multiplies the pixel-noise standard deviation.
    pub noise_scale: f64,
    /// Probability mass moved onto `skew_class` when drawing region classes.
    pub class_skew: f64,
    pub skew_class: usize,
    /// Amplitude of a smooth coordinate warp, as a fraction of the size.
    pub jitter: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            color_offset: vec![0.12, -0.10, 0.08],
            noise_scale: 2.0,
            class_skew: 0.3,
            skew_class: 0,
            jitter: 0.08,
        }
    }
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            color_offset: Vec::new(),
            noise_scale: 1.0,
            class_skew: 0.0,
            skew_class: 0,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    pub classes: usize,
    pub channels: usize,
    /// Pixel noise standard deviation in the source domain.
    pub noise: f64,
    /// Amplitude of the per-class texture pattern.
    pub texture: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 32,
            classes: 5,
            channels: 3,
            noise: 0.04,
            texture: 0.06,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::config(
                "data.size",
                format!("must be >= 8, got {}", self.size),
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        if self.channels == 0 {
            return Err(Error::config("data.channels", "must be >= 1"));
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0) {
            return Err(Error::config(
                "data.noise",
                "noise and texture must be >= 0",
            ));
        }
        let s = &self.shift;
        if !(0.0..=1.0).contains(&s.class_skew) {
            return Err(Error::config("data.shift.class_skew", "must lie in [0, 1]"));
        }
        if s.skew_class >= self.classes {
            return Err(Error::config(
                "data.shift.skew_class",
                "outside the class range",
            ));
        }
        if !(s.noise_scale >= 0.0 && s.jitter >= 0.0)
            || s.color_offset.iter().any(|v| !v.is_finite())
        {
            return Err(Error::config(
                "data.shift",
                "noise_scale and jitter must be >= 0",
            ));
        }
        if s.color_offset.len() > self.channels {
            return Err(Error::config(
                "data.shift.color_offset",
                "more entries than channels",
            ));
        }
        Ok(())
    }

    /// Base color of class `k` in channel `c`.
    pub fn class_color(&self, k: usize, c: usize) -> f64 {
        let phase = k as f64 / self.classes as f64 + c as f64 / self.channels.max(3) as f64;
        0.5 + 0.32 * (std::f64::consts::TAU * phase).cos()
    }

    fn class_probabilities(&self, domain: Domain) -> Vec<f64> {
        let k = self.classes;
        let s = if domain == Domain::Target {
            self.shift.class_skew
        } else {
            0.0
        };
        (0..k)
            .map(|i| (1.0 - s) / k as f64 + if i == self.shift.skew_class { s } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H×W×C` values in `[0, 1]`, quantized to multiples of 1/255.
    pub image: Tensor,
    pub labels: Vec<usize>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

fn scene_rng(seed: u64, domain: Domain, index: usize) -> ChaCha8Rng {
    let mut z = seed
        ^ domain.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // splitmix finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn draw_class(rng: &mut ChaCha8Rng, probs: &[f64], exclude: Option<usize>) -> usize {
    let total: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(_, p)| p)
        .sum();
    if total <= 0.0 {
        // all mass sits on the excluded class: fall back to uniform
        let others: Vec<usize> = (0..probs.len()).filter(|&i| Some(i) != exclude).collect();
        return others[rng.random_range(0..others.len())];
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if Some(i) == exclude || p == 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

enum Shape {
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    Stripe {
        nx: f64,
        ny: f64,
        offset: f64,
        half_width: f64,
    },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Shape {
        match rng.random_range(0..3) {
            0 => {
                let w = rng.random_range(0.25..0.6) * size;
                let h = rng.random_range(0.25..0.6) * size;
                let x0 = rng.random_range(-0.1 * size..size - 0.5 * w);
                let y0 = rng.random_range(-0.1 * size..size - 0.5 * h);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                }
            }
            1 => Shape::Ellipse {
                cx: rng.random_range(0.15..0.85) * size,
                cy: rng.random_range(0.15..0.85) * size,
                rx: rng.random_range(0.12..0.35) * size,
                ry: rng.random_range(0.12..0.35) * size,
            },
            _ => {
                let a = rng.random_range(0.0..std::f64::consts::PI);
                let (ny, nx) = a.sin_cos();
                let center = 0.5 * size * (nx + ny);
                Shape::Stripe {
                    nx,
                    ny,
                    offset: center + rng.random_range(-0.3..0.3) * size,
                    half_width: rng.random_range(0.08..0.18) * size,
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Stripe {
                nx,
                ny,
                offset,
                half_width,
            } => (x * nx + y * ny - offset).abs() <= half_width,
        }
    }
}

fn render_labels(spec: &SceneSpec, domain: Domain, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.size;
    let size = n as f64;
    let probs = spec.class_probabilities(domain);
    let jitter = if domain == Domain::Target {
        spec.shift.jitter * size
    } else {
        0.0
    };
    loop {
        let background = draw_class(rng, &probs, None);
        let count = rng.random_range(2..=4);
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let class = draw_class(rng, &probs, (i == 0).then_some(background));
            shapes.push((Shape::random(rng, size), class));
        }
        let (fx, fy, px, py) = (
            rng.random_range(1.0..3.0),
            rng.random_range(1.0..3.0),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let mut labels = vec![background; n * n];
        for y in 0..n {
            for x in 0..n {
                let (u, v) = (x as f64 / size, y as f64 / size);
                let xs = x as f64 + 0.5 + jitter * (std::f64::consts::TAU * fy * v + py).sin();
                let ys = y as f64 + 0.5 + jitter * (std::f64::consts::TAU * fx * u + px).sin();
                for (shape, class) in &shapes {
                    if shape.contains(xs, ys) {
                        labels[y * n + x] = *class;
                    }
                }
            }
        }
        if labels.iter().any(|&l| l != labels[0]) {
            return labels;
        }
    }
}

fn render_image(
    spec: &SceneSpec,
    domain: Domain,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (n, ch) = (spec.size, spec.channels);
    let target = domain == Domain::Target;
    let sigma = spec.noise * if target { spec.shift.noise_scale } else { 1.0 };
    let mut data = Vec::with_capacity(n * n * ch);
    for y in 0..n {
        for x in 0..n {
            let k = labels[y * n + x];
            // class-specific texture: a plane wave whose orientation and
            // frequency depend on the class
            let angle = std::f64::consts::PI * k as f64 / spec.classes as f64;
            let freq = 2.0 + (k % 3) as f64;
            let t =
                (std::f64::consts::TAU * freq * (x as f64 * angle.cos() + y as f64 * angle.sin())
                    / n as f64)
                    .sin();
            for c in 0..ch {
                let mut v = spec.class_color(k, c) + spec.texture * t;
                if target {
                    v += spec.shift.color_offset.get(c).copied().unwrap_or(0.0);
                }
                let z: f64 = rng.sample(StandardNormal);
                v += sigma * z;
                data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    Tensor::new(vec![n, n, ch], data).expect("scene shape")
}

pub fn generate_scene(spec: &SceneSpec, domain: Domain, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, domain, index);
    let labels = render_labels(spec, domain, &mut rng);
    let image = render_image(spec, domain, &labels, &mut rng);
    Ok(Scene { image, labels })
}

pub fn generate_domain(spec: &SceneSpec, count: usize, domain: Domain) -> Result<Vec<Scene>> {
    spec.validate()?;
    (0..count)
        .map(|i| generate_scene(spec, domain, i))
        .collect()
}

/// Realized pixel counts per class in each domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyReport {
    pub source: Vec<u64>,
    pub target: Vec<u64>,
    pub pixels_per_domain: u64,
}

impl FrequencyReport {
    pub fn fractions(counts: &[u64]) -> Vec<f64> {
        let total: u64 = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

pub fn class_frequency_skew(spec: &SceneSpec, scenes: usize) -> Result<FrequencyReport> {
    let count = |domain| -> Result<Vec<u64>> {
        let mut freq = vec![0u64; spec.classes];
        for s in generate_domain(spec, scenes, domain)? {
            for l in s.labels {
                freq[l] += 1;
            }
        }
        Ok(freq)
    };
    Ok(FrequencyReport {
        source: count(Domain::Source)?,
        target: count(Domain::Target)?,
        pixels_per_domain: (scenes * spec.size * spec.size) as u64,
    })
}

/// Binary pixmap: `P6` for three channels, `P5` for one.
pub fn write_pixmap(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.dims3("write_pixmap")?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::invalid(format!(
                "pixmaps need 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pixmap(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("non-ascii header"))?
                .to_string(),
        );
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("expected P5 or P6")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    if bytes.len() < pos || bytes.len() - pos != w * h * c {
        return Err(bad("pixel data length does not match header"));
    }
    let data = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, c], data).map_err(|e| bad(&e.to_string()))
}

/// One text row per image row, class indices separated by spaces.
pub fn write_label_grid(path: &Path, labels: &[usize], width: usize) -> Result<()> {
    let mut out = String::new();
    for row in labels.chunks(width) {
        for (i, l) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{l}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(labels, height, width)`.
pub fn read_label_grid(path: &Path) -> Result<(Vec<usize>, usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<usize> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::format(path, format!("bad label `{t}`")))
            })
            .collect::<Result<_>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::format(path, "ragged label grid"));
        }
        labels.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::format(path, "empty label grid"))?;
    Ok((labels, height, width))
}

/// Writes `<dir>/<domain>/scene-NNNN.{ppm,labels.txt}`.
pub fn export_domain(dir: &Path, domain: Domain, scenes: &[Scene]) -> Result<()> {
    let sub = dir.join(domain.name());
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    for (i, s) in scenes.iter().enumerate() {
        write_pixmap(&sub.join(format!("scene-{i:04}.ppm")), &s.image)?;
        write_label_grid(
            &sub.join(format!("scene-{i:04}.labels.txt")),
            &s.labels,
            s.width(),
        )?;
    }
    Ok(())
}

/// Loads every `scene-*.ppm` under a directory, in name order, with its
/// label grid when present.
pub fn load_scenes(dir: &Path) -> Result<Vec<(Tensor, Option<Vec<usize>>)>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm" || x == "pgm"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let image = read_pixmap(&p)?;
            let lp = p.with_extension("labels.txt");
            let labels = if lp.exists() {
                let (l, h, w) = read_label_grid(&lp)?;
                if (h, w) != (image.shape()[0], image.shape()[1]) {
                    return Err(Error::format(&lp, "label grid does not match image size"));
                }
                Some(l)
            } else {
                None
            };
            Ok((image, labels))
        })
        .collect()
}
