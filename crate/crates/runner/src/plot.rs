//! SVG figures: cumulative regret with a ±1.96 SE band, and moderation accuracy against review effort.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::aggregate::AggregateRow;
use crate::error::{Result, RunnerError};
use crate::output::{self, CurvePoint};

pub const REGRET_SVG: &str = "regret.svg";
pub const EFFORT_SVG: &str = "moderation_effort.svg";

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_err(path: &Path) -> impl Fn(String) -> RunnerError + '_ {
    move |message| RunnerError::Plot { path: path.into(), message }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// One line per agent: mean cumulative regret against `t`.
pub fn regret_curves(path: &Path, curves: &[(String, Vec<AggregateRow>)]) -> Result<()> {
    let err = plot_err(path);
    let t_max = curves.iter().flat_map(|c| c.1.last()).map(|r| r.t).max().unwrap_or(1).max(1);
    let (lo, hi) = curves
        .iter()
        .flat_map(|c| c.1.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.mean_cum - 1.96 * r.se), hi.max(r.mean_cum + 1.96 * r.se))
        });
    let (lo, hi) = padded(lo.min(0.0), hi);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..t_max as f64, lo..hi)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("t")
        .y_desc("cumulative regret")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (label, rows)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if rows.iter().any(|r| r.se > 0.0) {
            let upper = rows.iter().map(|r| (r.t as f64, r.mean_cum + 1.96 * r.se));
            let lower = rows.iter().rev().map(|r| (r.t as f64, r.mean_cum - 1.96 * r.se));
            chart
                .draw_series(std::iter::once(Polygon::new(upper.chain(lower).collect::<Vec<_>>(), color.mix(0.2))))
                .map_err(|e| err(e.to_string()))?;
        }
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.t as f64, r.mean_cum)), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperLeft)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// One curve per agent through `(publish fraction, decision accuracy)` points.
pub fn accuracy_vs_effort(path: &Path, curves: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (700, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..1f64, 0f64..1.02f64)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("fraction published (human review effort)")
        .y_desc("decision accuracy")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (label, points)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

fn group_by_agent<T>(rows: Vec<T>, agent: impl Fn(&T) -> &str) -> Vec<(String, Vec<T>)> {
    let mut out: Vec<(String, Vec<T>)> = Vec::new();
    for row in rows {
        let name = agent(&row).to_string();
        match out.iter_mut().find(|(a, _)| *a == name) {
            Some((_, v)) => v.push(row),
            None => out.push((name, vec![row])),
        }
    }
    out
}

/// Redraws figures from the CSVs of a finished experiment. Returns the files written.
pub fn replot(in_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(RunnerError::io(out_dir))?;
    let rows: Vec<AggregateRow> = output::read_csv(&in_dir.join(output::AGGREGATE))?;
    let mut written = Vec::new();
    let path = out_dir.join(REGRET_SVG);
    regret_curves(&path, &group_by_agent(rows, |r| &r.agent))?;
    written.push(path);
    let curve_file = in_dir.join(output::MODERATION_CURVE);
    if curve_file.is_file() {
        let points: Vec<CurvePoint> = output::read_csv(&curve_file)?;
        let curves: Vec<(String, Vec<(f64, f64)>)> = group_by_agent(points, |p| &p.agent)
            .into_iter()
            .map(|(a, ps)| (a, ps.iter().map(|p| (p.publish_fraction, p.decision_accuracy)).collect()))
            .collect();
        let path = out_dir.join(EFFORT_SVG);
        accuracy_vs_effort(&path, &curves)?;
        written.push(path);
    }
    Ok(written)
}
