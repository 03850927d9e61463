//! Text tables rebuilt from `metrics.csv` files alone.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

/// Parsed `metrics.csv`: one map per epoch row, empty cells dropped.
#[derive(Clone, Debug)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<HashMap<String, String>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        for needed in ["epoch", "miou", "loss_obj"] {
            if !header.iter().any(|h| h == needed) {
                bail!("metrics file lacks the `{needed}` column");
            }
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            rows.push(
                header
                    .iter()
                    .zip(rec.iter())
                    .filter(|(_, v)| !v.is_empty())
                    .map(|(h, v)| (h.clone(), v.to_string()))
                    .collect(),
            );
        }
        Ok(MetricsTable { header, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn classes(&self) -> usize {
        self.header.iter().filter(|h| h.starts_with("iou_")).count()
    }

    pub fn last(&self) -> Result<&HashMap<String, String>> {
        self.rows
            .last()
            .ok_or_else(|| anyhow!("metrics file has no epoch rows"))
    }

    pub fn final_miou(&self) -> Result<f64> {
        number(self.last()?, "miou")?.ok_or_else(|| anyhow!("final row has no mIoU"))
    }
}

fn number(row: &HashMap<String, String>, key: &str) -> Result<Option<f64>> {
    row.get(key)
        .map(|v| {
            v.parse::<f64>()
                .with_context(|| format!("column `{key}` holds `{v}`"))
        })
        .transpose()
}

fn fixed(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Right-aligned columns separated by two spaces, with a rule under the header.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Per-epoch losses and scores, then the final per-class IoU row (in %).
pub fn run_report(table: &MetricsTable) -> Result<String> {
    let header: Vec<String> = [
        "epoch", "S_A", "L_obj", "L_seg", "L_adv", "L_div", "L_cri", "L_reg", "src mIoU", "mIoU",
        "gap",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for r in &table.rows {
        let n = |k: &str| number(r, k);
        rows.push(vec![
            r.get("epoch").cloned().unwrap_or_default(),
            fixed(n("s_a")?, 2),
            fixed(n("loss_obj")?, 4),
            fixed(n("loss_seg")?, 4),
            fixed(n("loss_adv")?, 4),
            fixed(n("loss_div")?, 5),
            fixed(n("loss_cri")?, 4),
            fixed(n("loss_reg")?, 5),
            percent(n("src_miou")?),
            percent(n("miou")?),
            fixed(n("domain_gap")?, 3),
        ]);
    }
    let mut out = render_table(&header, &rows);
    out.push('\n');

    let last = table.last()?;
    let k = table.classes();
    let mut header: Vec<String> = (0..k).map(|c| format!("class {c}")).collect();
    header.push("mIoU".into());
    let mut row: Vec<String> = (0..k)
        .map(|c| number(last, &format!("iou_{c}")).map(percent))
        .collect::<Result<_>>()?;
    row.push(percent(number(last, "miou")?));
    let _ = writeln!(
        out,
        "target IoU (%) after epoch {}",
        last.get("epoch").map_or("?", String::as_str)
    );
    out.push_str(&render_table(&header, &[row]));
    Ok(out)
}

/// Final target mIoU per variant, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub miou: f64,
    pub per_seed: Vec<f64>,
}

/// Reads `<dir>/seed-<s>/<slug>/metrics.csv` for every seed directory.
pub fn collect_ablation(dir: &Path) -> Result<Vec<AblationRow>> {
    let mut seeds: Vec<(u64, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(s) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            seeds.push((s, entry.path()));
        }
    }
    seeds.sort();
    if seeds.is_empty() {
        bail!("{} holds no seed-* run directories", dir.display());
    }
    let mut rows = Vec::new();
    for v in uda_core::config::Variant::ALL {
        let mut per_seed = Vec::new();
        for (_, p) in &seeds {
            let m = p.join(v.slug()).join("metrics.csv");
            if m.exists() {
                per_seed.push(MetricsTable::load(&m)?.final_miou()?);
            }
        }
        if per_seed.is_empty() {
            continue;
        }
        if per_seed.len() != seeds.len() {
            bail!("variant {} is missing runs for some seeds", v.name());
        }
        rows.push(AblationRow {
            variant: v.name().to_string(),
            miou: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            per_seed,
        });
    }
    Ok(rows)
}

fn baseline(rows: &[AblationRow]) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == "source-only")
        .map(|r| r.miou)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let base = baseline(rows);
    let mut s = String::from("variant,miou,delta_vs_source_only\n");
    for r in rows {
        let d = base.map(|b| (r.miou - b).to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", r.variant, r.miou, d);
    }
    s
}

/// Columns: variant, mIoU, Δ vs source-only (points).
pub fn ablation_report(rows: &[AblationRow]) -> String {
    let base = baseline(rows);
    let header: Vec<String> = ["variant", "mIoU", "Δ vs source-only"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                percent(Some(r.miou)),
                base.map_or_else(|| "-".into(), |b| format!("{:+.1}", 100.0 * (r.miou - b))),
            ]
        })
        .collect();
    render_table(&header, &body)
}
