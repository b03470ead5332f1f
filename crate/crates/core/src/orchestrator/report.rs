//! Figures and the index document of a finished run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::manifest::ExperimentManifest;
use super::plot::{color, lighten, Canvas, Panel};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::evaluate::{finetuned_key, sort_rrc, sweeps_from_csv, write_sorted_rrc, NoiseSweep, RrcEntry, RrcMatrix};
use crate::infometrics::{NmiMode, NmiReport};

fn need(dir: &Path, stage: &str, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact { stage: stage.into(), path: p })
    }
}

#[derive(Debug, Deserialize)]
struct SummaryRow {
    classifier: String,
    standalone: f64,
    #[serde(rename = "A_S")]
    a_s: f64,
    #[serde(rename = "A_i")]
    a_i: f64,
    #[serde(rename = "diff_S")]
    diff_s: Option<f64>,
    diff_i: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct LabRow {
    source: String,
    channel: String,
    count: u64,
}

#[derive(Debug, Deserialize)]
struct FcaRow {
    threshold: f64,
    concepts: usize,
    edges: usize,
    total_order: bool,
    dot: String,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Renders figures and `index.md` from the tables of a run directory.
/// Returns the written paths relative to `dir`.
pub fn emit_report(dir: &Path, manifest: &ExperimentManifest) -> Result<Vec<PathBuf>> {
    let summary_path = need(dir, "evaluate", "tables/top1_summary.csv")?;
    let rrc_path = need(dir, "evaluate", "tables/rrc.csv")?;
    let lab_path = need(dir, "evaluate", "tables/lab_histograms.csv")?;
    let sweep_path = need(dir, "noise-sweep", "tables/noise_sweep.csv")?;
    let fca_path = need(dir, "fca", "tables/fca_summary.csv")?;
    let nmi_path = need(dir, "nmi", "tables/nmi.json")?;

    let classifiers = &manifest.models.classifiers;
    let summary: Vec<SummaryRow> = read_rows(&summary_path)?;
    let rrc = RrcMatrix::read_csv(std::fs::File::open(&rrc_path)?)?;
    let sweeps = sweeps_from_csv(std::fs::File::open(&sweep_path)?)?;
    let sweep = NoiseSweep::mean_of(&sweeps)?;
    let nmi: Vec<NmiReport> = serde_json::from_slice(&std::fs::read(&nmi_path)?)?;
    let lab: Vec<LabRow> = read_rows(&lab_path)?;
    let fca: Vec<FcaRow> = read_rows(&fca_path)?;

    let mut written = Vec::new();
    let noise_png = PathBuf::from("figures/noise_sweep.png");
    noise_figure(&sweep, classifiers)?.save(&dir.join(&noise_png))?;
    written.push(noise_png);

    let order = sort_rrc(&rrc);
    let order_path = PathBuf::from("figures/rrc_sorted_bars.csv");
    let mut buf = Vec::new();
    write_sorted_rrc(&order, &mut buf)?;
    write_atomic(&dir.join(&order_path), &buf)?;
    let rrc_png = PathBuf::from("figures/rrc_sorted.png");
    rrc_figure(&order, classifiers)?.save(&dir.join(&rrc_png))?;
    written.extend([order_path, rrc_png]);

    let nmi_png = PathBuf::from("figures/nmi.png");
    nmi_figure(&nmi)?.save(&dir.join(&nmi_png))?;
    written.push(nmi_png);

    let lab_png = PathBuf::from("figures/lab_histograms.png");
    lab_figure(&lab)?.save(&dir.join(&lab_png))?;
    written.push(lab_png);

    let index = PathBuf::from("index.md");
    let text = index_document(dir, manifest, &summary, &nmi, &fca, &written)?;
    write_atomic(&dir.join(&index), text.as_bytes())?;
    written.push(index);
    Ok(written)
}

fn noise_figure(sweep: &NoiseSweep, classifiers: &[String]) -> Result<Canvas> {
    let smax = sweep.strengths.last().copied().unwrap_or(1.0).max(1e-9);
    let mut c = Canvas::new(840, 360);
    let panels = [
        Panel { x0: 40, y0: 20, w: 360, h: 300, xr: (0.0, smax), yr: (0.0, 1.0) },
        Panel { x0: 460, y0: 20, w: 360, h: 300, xr: (0.0, smax), yr: (0.0, 1.0) },
    ];
    for p in &panels {
        c.axes(p);
    }
    for (i, id) in classifiers.iter().enumerate() {
        let pts = |pre: &str| -> Option<Vec<(f64, f64)>> {
            let curve = sweep.curve(pre, id)?;
            Some(sweep.strengths.iter().copied().zip(curve.top1.iter().copied()).collect())
        };
        let base = pts("identity").ok_or_else(|| Error::contract(format!("no stand-alone curve for {id}")))?;
        for (p, pre) in panels.iter().zip(["A_S".to_owned(), finetuned_key(id)]) {
            c.polyline(p, &base, lighten(color(i)), 1);
            if let Some(v) = pts(&pre) {
                c.polyline(p, &v, color(i), 3);
            }
        }
    }
    Ok(c)
}

fn rrc_figure(order: &[RrcEntry], classifiers: &[String]) -> Result<Canvas> {
    let ymax = order.iter().filter_map(|e| e.value).fold(1.0f64, f64::max) * 1.05;
    let w = (order.len() as u32 * 16).max(200);
    let mut c = Canvas::new(w + 60, 340);
    let p = Panel { x0: 40, y0: 20, w, h: 300, xr: (0.0, 1.0), yr: (0.0, ymax) };
    c.axes(&p);
    let bars: Vec<(f64, [u8; 3])> = order
        .iter()
        .map(|e| {
            let i = classifiers.iter().position(|k| finetuned_key(k) == e.autoencoder).unwrap_or(0);
            (e.value.unwrap_or(0.0), color(i))
        })
        .collect();
    c.bars(&p, &bars);
    c.hline(&p, 1.0, [0, 0, 0]);
    Ok(c)
}

fn nmi_figure(reports: &[NmiReport]) -> Result<Canvas> {
    let aes: Vec<&str> = reports.iter().filter(|r| r.mode == NmiMode::Intra).map(|r| r.autoencoder.as_str()).collect();
    let w = (aes.len() as u32 * 60).max(120);
    let mut c = Canvas::new(w + 60, 340);
    let p = Panel { x0: 40, y0: 20, w, h: 300, xr: (0.0, 1.0), yr: (0.0, 1.0) };
    c.axes(&p);
    let mut bars = Vec::new();
    for (i, ae) in aes.iter().enumerate() {
        for mode in [NmiMode::Intra, NmiMode::Inter] {
            let r = reports.iter().find(|r| r.autoencoder == *ae && r.mode == mode);
            let v = r.map_or(0.0, |r| r.mean);
            bars.push((v, if mode == NmiMode::Intra { color(i) } else { lighten(color(i)) }));
        }
    }
    c.bars(&p, &bars);
    let slot = p.w as f64 / bars.len().max(1) as f64;
    for (k, r) in aes
        .iter()
        .flat_map(|ae| [NmiMode::Intra, NmiMode::Inter].map(|m| reports.iter().find(|r| r.autoencoder == *ae && r.mode == m)))
        .enumerate()
    {
        if let Some(r) = r {
            let x = (p.x0 as f64 + slot * (k as f64 + 0.5)).round() as i64;
            c.line((x, p.py((r.mean - r.std).max(0.0))), (x, p.py((r.mean + r.std).min(1.0))), [0, 0, 0], 1);
        }
    }
    Ok(c)
}

fn lab_figure(rows: &[LabRow]) -> Result<Canvas> {
    let mut sources: Vec<&str> = Vec::new();
    for r in rows {
        if !sources.contains(&r.source.as_str()) {
            sources.push(&r.source);
        }
    }
    let (pw, ph) = (220u32, 90u32);
    let mut c = Canvas::new(3 * (pw + 30) + 20, sources.len() as u32 * (ph + 20) + 20);
    for (si, src) in sources.iter().enumerate() {
        for (ci, ch) in ["L", "A", "B"].iter().enumerate() {
            let counts: Vec<f64> = rows.iter().filter(|r| r.source == *src && r.channel == *ch).map(|r| r.count as f64).collect();
            let total: f64 = counts.iter().sum::<f64>().max(1.0);
            let peak = counts.iter().fold(0.0f64, |a, &b| a.max(b / total)).max(1e-9);
            let p = Panel { x0: 20 + ci as u32 * (pw + 30), y0: 10 + si as u32 * (ph + 20), w: pw, h: ph, xr: (0.0, 1.0), yr: (0.0, peak) };
            c.axes(&p);
            let bars: Vec<(f64, [u8; 3])> = counts.iter().map(|v| (v / total, color(si))).collect();
            c.bars(&p, &bars);
        }
    }
    Ok(c)
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn signed_pct(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{:+.2}", v * 100.0))
}

fn index_document(
    dir: &Path,
    manifest: &ExperimentManifest,
    summary: &[SummaryRow],
    nmi: &[NmiReport],
    fca: &[FcaRow],
    figures: &[PathBuf],
) -> Result<String> {
    let mut s = String::new();
    let digest = manifest.digest()?;
    writeln!(s, "# Run `{}`\n", manifest.name).ok();
    writeln!(s, "Manifest digest `{digest}`, seed {}.\n", manifest.seed).ok();

    writeln!(s, "## Top-1 accuracy (%)\n").ok();
    writeln!(s, "| classifier | stand-alone | A_S | diff | A_i | diff |").ok();
    writeln!(s, "|---|---:|---:|---:|---:|---:|").ok();
    for r in summary {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.classifier,
            pct(r.standalone),
            pct(r.a_s),
            signed_pct(r.diff_s),
            pct(r.a_i),
            signed_pct(r.diff_i)
        )
        .ok();
    }

    writeln!(s, "\n## nMI\n").ok();
    writeln!(s, "| autoencoder | intra mean | intra std | inter mean | inter std |").ok();
    writeln!(s, "|---|---:|---:|---:|---:|").ok();
    let mut intra: Vec<&NmiReport> = nmi.iter().filter(|r| r.mode == NmiMode::Intra).collect();
    intra.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    for r in &intra {
        let inter = nmi.iter().find(|x| x.autoencoder == r.autoencoder && x.mode == NmiMode::Inter);
        writeln!(
            s,
            "| {} | {:.4} | {:.4} | {} | {} |",
            r.autoencoder,
            r.mean,
            r.std,
            inter.map_or_else(String::new, |x| format!("{:.4}", x.mean)),
            inter.map_or_else(String::new, |x| format!("{:.4}", x.std))
        )
        .ok();
    }
    let order: Vec<&str> = intra.iter().map(|r| r.autoencoder.as_str()).collect();
    writeln!(s, "\nIntra-nMI ordering: {}.", order.join(" > ")).ok();

    writeln!(s, "\n## Concept lattices\n").ok();
    writeln!(s, "| threshold | concepts | edges | total order | lattice |").ok();
    writeln!(s, "|---:|---:|---:|:---:|---|").ok();
    for r in fca {
        let link = if dir.join(&r.dot).exists() { format!("[{0}]({0})", r.dot) } else { String::new() };
        writeln!(s, "| {} | {} | {} | {} | {} |", r.threshold, r.concepts, r.edges, r.total_order, link).ok();
    }

    writeln!(s, "\n## Figures\n").ok();
    writeln!(s, "Colors follow the classifier order: {}.\n", manifest.models.classifiers.join(", ")).ok();
    let legend = |p: &Path| match p.file_name().and_then(|n| n.to_str()) {
        Some("noise_sweep.png") => "top-1 vs noise strength; left A_S, right A_i, faint lines stand-alone",
        Some("rrc_sorted.png") => "RRC sorted descending, colored by the fine-tuning classifier; line at 1",
        Some("nmi.png") => "intra (solid) and inter (faint) nMI per autoencoder with one std",
        Some("lab_histograms.png") => "LAB channel histograms, one row per source in table order",
        _ => "",
    };
    for f in figures.iter().filter(|f| dir.join(f).exists()) {
        let d = legend(f);
        if d.is_empty() {
            writeln!(s, "- [{0}]({0})", f.display()).ok();
        } else {
            writeln!(s, "- [{0}]({0}): {d}", f.display()).ok();
        }
    }

    writeln!(s, "\n## Tables and logs\n").ok();
    for sub in ["tables", "lattices", "logs", "checkpoints"] {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir.join(sub))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .filter_map(|p| p.strip_prefix(dir).ok().map(Path::to_path_buf))
            .collect();
        entries.sort();
        for e in entries {
            writeln!(s, "- [{0}]({0})", e.display()).ok();
        }
    }
    Ok(s)
}
