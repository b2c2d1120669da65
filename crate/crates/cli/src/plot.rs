use std::path::Path;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

use ssp_core::retrieval::CurvePoint;

type Series = (String, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_desc: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || !y0.is_finite() {
        bail!("nothing to plot");
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let err = |e: DrawingAreaErrorKind<std::io::Error>| anyhow!("drawing {}: {e}", path.display());
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc(x_desc).draw().map_err(err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

pub fn robustness_svg(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let series = vec![
        ("MRR".to_string(), curve.iter().map(|p| (p.added as f64, p.mrr)).collect()),
        ("NDCG@3".to_string(), curve.iter().map(|p| (p.added as f64, p.ndcg3)).collect()),
    ];
    line_chart(path, "Retrieval with off-topic utterances prepended", "off-topic utterances added", &series)
}

/// Plots every numeric column of a CSV against its first column.
pub fn csv_svg(path: &Path, text: &str, source: &str) -> Result<()> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| anyhow!("{source} is empty"))?
        .split(',')
        .collect();
    if header.len() < 2 {
        bail!("{source}: need at least two columns");
    }
    let mut series: Vec<Series> = header[1..].iter().map(|h| (h.to_string(), Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow!("{source}:{}: {e}", i + 2))?;
        if fields.len() != header.len() {
            bail!("{source}:{}: expected {} fields", i + 2, header.len());
        }
        for (s, &v) in series.iter_mut().zip(&fields[1..]) {
            if v.is_finite() {
                s.1.push((fields[0], v));
            }
        }
    }
    let (title, x_desc) = match header[0] {
        "j" => ("Retrieval with off-topic utterances prepended", "off-topic utterances added"),
        "step" => ("Training losses", "step"),
        other => ("", other),
    };
    line_chart(path, title, x_desc, &series)
}
