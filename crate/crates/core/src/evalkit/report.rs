//! CSV and plot output.
//!
//! Sweep CSVs are long form with header `method,class,metric,seed,value`:
//! one row per (axis value, class, metric, seed). `class` is a class id or
//! `avg`, `metric` is `dice` or `hd`, and an undefined distance is written
//! as `undefined`. Evaluation CSVs use `case,class,metric,value`.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalReport, SweepResult};
use crate::trainer::TrainLog;

pub const LONG_CSV_HEADER: [&str; 5] = ["method", "class", "metric", "seed", "value"];
pub const EVAL_CSV_HEADER: [&str; 4] = ["case", "class", "metric", "value"];
const UNDEFINED: &str = "undefined";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub method: String,
    pub class: String,
    pub metric: String,
    pub seed: u64,
    pub value: Option<f64>,
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x}"))
}

/// Flattens a sweep into long-form rows.
pub fn sweep_rows(result: &SweepResult) -> Vec<LongRow> {
    let method = |label: &str| {
        if result.axis == "row" {
            label.to_string()
        } else {
            format!("{}={label}", result.axis)
        }
    };
    let mut rows = Vec::new();
    for point in &result.points {
        for run in &point.runs {
            let s = &run.summary;
            let mut push = |class: String, metric: &str, value: Option<f64>| {
                rows.push(LongRow {
                    method: method(&point.label),
                    class,
                    metric: metric.to_string(),
                    seed: run.seed,
                    value,
                })
            };
            for (c, d) in s.dice.iter().enumerate() {
                push((c + 1).to_string(), "dice", Some(d.mean));
            }
            for (c, h) in s.hd.iter().enumerate() {
                push((c + 1).to_string(), "hd", (h.count > 0).then_some(h.mean));
            }
            push("avg".into(), "dice", Some(s.avg_dice.mean));
            push("avg".into(), "hd", (s.avg_hd.count > 0).then_some(s.avg_hd.mean));
        }
    }
    rows
}

pub fn write_long_csv(path: &Path, rows: &[LongRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LONG_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.class.clone(),
            r.metric.clone(),
            r.seed.to_string(),
            fmt_value(r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_csv(path: &Path) -> Result<Vec<LongRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let value = match &rec[4] {
            UNDEFINED => None,
            v => Some(
                v.parse()
                    .map_err(|_| EvalError::Plot(format!("bad value {v:?} in {}", path.display())))?,
            ),
        };
        rows.push(LongRow {
            method: rec[0].to_string(),
            class: rec[1].to_string(),
            metric: rec[2].to_string(),
            seed: rec[3]
                .parse()
                .map_err(|_| EvalError::Plot(format!("bad seed {:?}", &rec[3])))?,
            value,
        });
    }
    Ok(rows)
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_CSV_HEADER)?;
    for rec in &report.records {
        for (c, d) in rec.dice.iter().enumerate() {
            w.write_record([rec.case_id.clone(), (c + 1).to_string(), "dice".into(), format!("{d}")])?;
        }
        for (c, h) in rec.hd.iter().enumerate() {
            w.write_record([rec.case_id.clone(), (c + 1).to_string(), "hd".into(), fmt_value(*h)])?;
        }
        w.write_record([
            rec.case_id.clone(),
            "avg".into(),
            "dice".into(),
            format!("{}", rec.mean_dice),
        ])?;
        w.write_record([rec.case_id.clone(), "avg".into(), "hd".into(), fmt_value(rec.mean_hd)])?;
    }
    w.flush()?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> EvalError {
    EvalError::Plot(e.to_string())
}

/// Line plot of mean Dice (± std bars) against the sweep axis.
///
/// Writes a PNG and an SVG next to each other (`stem.png`, `stem.svg`).
/// Only the SVG carries text: the bitmap backend is built without a font
/// engine.
pub fn plot_sweep(result: &SweepResult, stem: &Path) -> Result<(), EvalError> {
    let png = stem.with_extension("png");
    let svg = stem.with_extension("svg");
    draw_sweep(result, BitMapBackend::new(&png, (640, 480)).into_drawing_area(), false)?;
    draw_sweep(result, SVGBackend::new(&svg, (640, 480)).into_drawing_area(), true)
}

fn draw_sweep<DB: DrawingBackend>(
    result: &SweepResult,
    root: DrawingArea<DB, plotters::coord::Shift>,
    text: bool,
) -> Result<(), EvalError>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(plot_err)?;
    let xs: Vec<f64> = result.points.iter().map(|p| p.value).collect();
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let pad = ((xmax - xmin) * 0.05).max(0.5);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(format!("mean Dice vs {}", result.axis), ("sans-serif", 20))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d((xmin - pad)..(xmax + pad), 0.0f64..1.0)
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(result.axis.as_str()).y_desc("Dice");
    } else {
        mesh.disable_x_mesh().disable_y_mesh();
    }
    mesh.draw().map_err(plot_err)?;
    let pts: Vec<(f64, f64)> = result.points.iter().map(|p| (p.value, p.dice.mean)).collect();
    chart
        .draw_series(LineSeries::new(pts.clone(), &BLUE))
        .map_err(plot_err)?;
    chart
        .draw_series(pts.iter().map(|&(x, y)| Circle::new((x, y), 4, BLUE.filled())))
        .map_err(plot_err)?;
    for p in &result.points {
        let (lo, hi) = (p.dice.mean - p.dice.std, p.dice.mean + p.dice.std);
        chart
            .draw_series(LineSeries::new(vec![(p.value, lo), (p.value, hi)], &BLACK))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Per-term loss curves over training steps (`stem.png`, `stem.svg`).
pub fn plot_losses(log: &TrainLog, stem: &Path) -> Result<(), EvalError> {
    let png = stem.with_extension("png");
    let svg = stem.with_extension("svg");
    draw_losses(log, BitMapBackend::new(&png, (800, 480)).into_drawing_area(), false)?;
    draw_losses(log, SVGBackend::new(&svg, (800, 480)).into_drawing_area(), true)
}

fn draw_losses<DB: DrawingBackend>(
    log: &TrainLog,
    root: DrawingArea<DB, plotters::coord::Shift>,
    text: bool,
) -> Result<(), EvalError>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(plot_err)?;
    let names = crate::losses::TERM_NAMES;
    let series: Vec<Vec<(f64, f64)>> = (0..names.len())
        .map(|t| {
            log.steps
                .iter()
                .map(|s| (s.global_step as f64, s.losses.terms().as_array()[t]))
                .collect()
        })
        .collect();
    let all = series.iter().flatten().map(|p| p.1).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let steps = log.steps.len().max(1) as f64;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption("training losses", ("sans-serif", 20))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d(0.0..steps + 1.0, (lo - 0.1)..(hi + 0.1))
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if !text {
        mesh.disable_x_mesh().disable_y_mesh();
    }
    mesh.draw().map_err(plot_err)?;
    let colors = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];
    for ((name, pts), color) in names.iter().zip(series).zip(colors) {
        if pts.iter().all(|p| p.1 == 0.0) {
            continue;
        }
        let drawn = chart.draw_series(LineSeries::new(pts, &color)).map_err(plot_err)?;
        if text {
            drawn
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
