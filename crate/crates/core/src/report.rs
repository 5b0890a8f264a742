//! Read-only summaries of a finished run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{artifact, Manifest};
use crate::trainer::MetricsLog;

/// Trainable-parameter count per epoch for a run with `epochs` epochs, a
/// head stage of `head` epochs and `per_event` parameters frozen at the end
/// of each of the epochs `head+1, head+1+period, ...`.
pub fn trainable_schedule(n: usize, head: u32, period: u32, per_event: usize, epochs: u32) -> Vec<usize> {
    let period = period.max(1);
    let mut frozen = 0usize;
    (1..=epochs)
        .map(|t| {
            let now = n.saturating_sub(frozen);
            if t > head && (t - head) % period == 0 {
                frozen += per_event;
            }
            now
        })
        .collect()
}

/// Σ trainable parameters over epochs, in parameter·epochs.
pub fn accounting_sum(schedule: &[usize]) -> u64 {
    schedule.iter().map(|&c| c as u64).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub summary: String,
    pub svg: Option<String>,
}

fn load(dir: &Path) -> Result<(Manifest, MetricsLog<f64>)> {
    let missing: Vec<_> = [artifact::MANIFEST, artifact::METRICS]
        .iter()
        .map(|name| dir.join(name))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let manifest = Manifest::read(dir)?;
    let path = dir.join(artifact::METRICS);
    let metrics = MetricsLog::from_csv(&fs::read_to_string(&path)?).map_err(|reason| Error::Artifact { path, reason })?;
    Ok((manifest, metrics))
}

pub fn summary_text(manifest: &Manifest, metrics: &MetricsLog<f64>) -> String {
    let mut s = String::new();
    let n = manifest.num_params;
    let _ = writeln!(s, "method: {}", manifest.config.method.as_str());
    let _ = writeln!(s, "status: {}", manifest.status);
    let _ = writeln!(s, "parameters: {n}");
    let _ = writeln!(s, "epochs: {}", metrics.records.len());
    if let Some(last) = metrics.last() {
        let _ = writeln!(s, "final eval loss: {:.6}", last.eval_loss);
        let _ = writeln!(s, "final eval rate: {:.6}", last.eval_rate);
        let _ = writeln!(s, "final eval distortion: {:.6e}", last.eval_distortion);
        let _ = writeln!(s, "final train loss: {:.6}", last.train_loss);
        let _ = writeln!(s, "embedded fraction: {:.4}", last.embedded_frac);
    }
    if let Some(best) = metrics.records.iter().min_by(|a, b| a.eval_loss.total_cmp(&b.eval_loss)) {
        let _ = writeln!(s, "best eval loss: {:.6} (epoch {})", best.eval_loss, best.epoch);
    }
    let total = metrics.trainable_total();
    let full = n as u64 * metrics.records.len() as u64;
    let _ = writeln!(s, "trainable parameter-epochs: {total}");
    if full > 0 {
        let _ = writeln!(s, "relative to full training: {:.4}", total as f64 / full as f64);
    }
    if let Some(m) = manifest.chosen_modes {
        let _ = writeln!(s, "modes: {m}");
    }
    if let Some(f) = manifest.non_embeddable_fraction {
        let _ = writeln!(s, "non-embeddable fraction: {f:.4}");
    }
    if manifest.degenerate {
        let _ = writeln!(s, "note: head stage covers every epoch, no embedding took place");
    }
    s
}

/// Train and eval loss against epoch as a standalone SVG.
pub fn loss_curve_svg(metrics: &MetricsLog<f64>) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let recs = &metrics.records;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let finite = recs.iter().flat_map(|r| [r.train_loss, r.eval_loss]).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if recs.is_empty() || !lo.is_finite() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    let first = recs[0].epoch as f64;
    let last = recs[recs.len() - 1].epoch as f64;
    let x = |e: u32| {
        if last > first {
            PAD + (e as f64 - first) / (last - first) * (W - 2.0 * PAD)
        } else {
            W / 2.0
        }
    };
    let y = |v: f64| H - PAD - (v - lo) / span * (H - 2.0 * PAD);
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{t}\" font-size=\"12\">{hi:.4}</text>\n\
         <text x=\"{PAD}\" y=\"{bl}\" font-size=\"12\">{lo:.4}</text>\n\
         <text x=\"{r}\" y=\"{bl}\" font-size=\"12\" text-anchor=\"end\">epoch {last}</text>",
        b = H - PAD,
        r = W - PAD,
        t = PAD - 8.0,
        bl = H - PAD + 18.0,
    );
    for (name, colour, pick) in [
        ("train", "#1f77b4", (|r: &crate::trainer::EpochRecord<f64>| r.train_loss) as fn(&_) -> f64),
        ("eval", "#d62728", |r| r.eval_loss),
    ] {
        let pts: Vec<String> = recs
            .iter()
            .filter(|r| pick(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", x(r.epoch), y(pick(r))))
            .collect();
        if pts.len() == 1 {
            let (px, py) = pts[0].split_once(',').unwrap();
            let _ = writeln!(svg, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{colour}\"><title>{name}</title></circle>");
        } else {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"><title>{name}</title></polyline>",
                pts.join(" ")
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Builds the summary and, if asked, the loss-curve SVG. Nothing is written.
pub fn report(dir: &Path, plot: bool) -> Result<Report> {
    let (manifest, metrics) = load(dir)?;
    Ok(Report { summary: summary_text(&manifest, &metrics), svg: plot.then(|| loss_curve_svg(&metrics)) })
}
