//! SVG figures from run artifacts.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mdbank_core::evaluation::{EmbeddingRow, EvalReport};
use mdbank_core::experiment::SweepCurve;
use mdbank_core::synthdata::Domain;
use mdbank_core::trainer::StepMetrics;
use plotters::prelude::*;

/// What a plot input file holds.
#[derive(Debug)]
pub enum PlotInput {
    Metrics(Vec<StepMetrics>),
    Report(EvalReport),
    Sweep(SweepCurve),
    Embeddings(Vec<EmbeddingRow>),
}

impl PlotInput {
    pub fn kind(&self) -> &'static str {
        match self {
            PlotInput::Metrics(_) => "training curves",
            PlotInput::Report(_) => "precision-recall curves",
            PlotInput::Sweep(_) => "sweep curve",
            PlotInput::Embeddings(_) => "embedding scatter",
        }
    }
}

/// Reads `path`, choosing the parser from the extension and then the content.
pub fn read_input(path: &Path) -> Result<PlotInput> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "csv" {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let rows = rdr.deserialize().collect::<Result<Vec<EmbeddingRow>, _>>()?;
        return Ok(PlotInput::Embeddings(rows));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if ext == "jsonl" {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<StepMetrics>, _>>()?;
        return Ok(PlotInput::Metrics(rows));
    }
    if let Ok(curve) = serde_json::from_str::<SweepCurve>(&text) {
        return Ok(PlotInput::Sweep(curve));
    }
    if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
        return Ok(PlotInput::Report(report));
    }
    bail!(
        "{} is not a metrics log, eval report, sweep curve or embeddings table",
        path.display()
    )
}

pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn render(input: &PlotInput, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    match input {
        PlotInput::Metrics(m) => metrics(m, out),
        PlotInput::Report(r) => pr_curves(r, out),
        PlotInput::Sweep(s) => sweep(s, out),
        PlotInput::Embeddings(e) => embeddings(e, out),
    }
}

const SIZE: (u32, u32) = (800, 600);

fn palette(i: usize) -> RGBColor {
    let (r, g, b) = Palette99::pick(i).to_rgba().rgb();
    RGBColor(r, g, b)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Trailing moving average, for readable per-step loss curves.
fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn metrics(rows: &[StepMetrics], out: &Path) -> Result<()> {
    if rows.is_empty() {
        bail!("metrics log is empty");
    }
    let root = SVGBackend::new(out, (SIZE.0, SIZE.1 + 300)).into_drawing_area();
    root.fill(&WHITE)?;
    let (top, bottom) = root.split_vertically(SIZE.1);
    let window = (rows.len() / 100).max(1);
    let steps: Vec<f64> = rows.iter().map(|m| m.step as f64).collect();
    let series: [(&str, Vec<f64>); 4] = [
        ("l_det", rows.iter().map(|m| m.l_det).collect()),
        ("l_mt", rows.iter().map(|m| m.l_mt).collect()),
        ("l_adv", rows.iter().map(|m| m.l_adv).collect()),
        ("l_total", rows.iter().map(|m| m.l_total).collect()),
    ];
    let series: Vec<(&str, Vec<f64>)> = series.into_iter().map(|(n, v)| (n, smooth(&v, window))).collect();
    let x_range = 0.0..steps.last().copied().unwrap_or(1.0).max(1.0);
    let (lo, hi) = bounds(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut chart = ChartBuilder::on(&top)
        .caption("training losses", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x_range.clone(), lo.min(0.0)..hi)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw()?;
    for (i, (name, values)) in series.iter().enumerate() {
        let color = palette(i);
        chart
            .draw_series(LineSeries::new(steps.iter().copied().zip(values.iter().copied()), color))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;

    let acc = smooth(&rows.iter().map(|m| m.domain_acc).collect::<Vec<_>>(), window);
    let mut chart = ChartBuilder::on(&bottom)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x_range, 0.0..1.0)?;
    chart.configure_mesh().x_desc("step").y_desc("domain acc").draw()?;
    chart.draw_series(LineSeries::new(steps.iter().copied().zip(acc), palette(4)))?;
    root.present()?;
    Ok(())
}

fn pr_curves(report: &EvalReport, out: &Path) -> Result<()> {
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("precision-recall, {} (mAP {:.3})", report.split.dir_name(), report.map),
            ("sans-serif", 22),
        )
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..1.0, 0.0..1.02)?;
    chart.configure_mesh().x_desc("recall").y_desc("precision").draw()?;
    for (i, (class, curve)) in report.pr_curves.iter().enumerate() {
        let color = palette(i);
        let ap = report.per_class_ap.get(class).copied().unwrap_or(0.0);
        chart
            .draw_series(LineSeries::new(curve.iter().copied(), color))?
            .label(format!("class {class} (AP {ap:.3})"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

fn sweep(curve: &SweepCurve, out: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = curve.points.iter().filter_map(|p| p.map.map(|m| (p.value, m))).collect();
    if pts.is_empty() {
        bail!("sweep has no successful points");
    }
    // Log axis when every value is positive, as sweeps usually span decades.
    let log_x = curve.points.iter().all(|p| p.value > 0.0);
    let xs: Vec<f64> = pts.iter().map(|&(v, _)| if log_x { v.log10() } else { v }).collect();
    let (x_lo, x_hi) = bounds(xs.iter().copied());
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{} sweep, {} seed {}", curve.param.name(), curve.variant.name(), curve.seed),
            ("sans-serif", 22),
        )
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x_lo..x_hi, 0.0..1.0)?;
    let x_desc = if log_x {
        format!("log10 {}", curve.param.name())
    } else {
        curve.param.name().to_string()
    };
    chart.configure_mesh().x_desc(x_desc).y_desc("target mAP").draw()?;
    let line: Vec<(f64, f64)> = xs.iter().copied().zip(pts.iter().map(|&(_, m)| m)).collect();
    chart.draw_series(LineSeries::new(line.clone(), palette(0)))?;
    chart.draw_series(line.into_iter().map(|p| Circle::new(p, 4, palette(0).filled())))?;
    root.present()?;
    Ok(())
}

fn embeddings(rows: &[EmbeddingRow], out: &Path) -> Result<()> {
    if rows.is_empty() {
        bail!("embeddings table is empty");
    }
    let (x_lo, x_hi) = bounds(rows.iter().map(|r| r.x));
    let (y_lo, y_hi) = bounds(rows.iter().map(|r| r.y));
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("region features (color: class, filled: source)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)?;
    chart.configure_mesh().disable_mesh().draw()?;
    // Background regions first so foreground classes stay visible.
    let mut ordered: Vec<&EmbeddingRow> = rows.iter().collect();
    ordered.sort_by_key(|r| r.class_id > 0);
    chart.draw_series(ordered.into_iter().map(|r| {
        let color = if r.class_id == 0 { RGBColor(190, 190, 190) } else { palette(r.class_id) };
        let style = match r.domain {
            Domain::Source => color.filled(),
            Domain::Target => color.stroke_width(1),
        };
        Circle::new((r.x, r.y), 3, style)
    }))?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
