//! SVG figures for comparisons and reports.

use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::cnn::LearningCurves;
use crate::error::{Error, Result};

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn palette(i: usize) -> RGBColor {
    const COLOURS: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    COLOURS[i % COLOURS.len()]
}

/// One bar series: label plus (mean, std) per group; `None` leaves a gap.
pub struct BarSeries {
    pub label: String,
    pub values: Vec<Option<(f64, f64)>>,
}

fn draw_bars(area: &DrawingArea<SVGBackend, Shift>, title: &str, groups: &[String], series: &[BarSeries], y_label: &str) -> Result<()> {
    let n_groups = groups.len().max(1);
    let top = series
        .iter()
        .flat_map(|s| s.values.iter().flatten().map(|(m, sd)| m + sd))
        .fold(1.0f64, f64::max);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n_groups as f64, 0.0..top * 1.05)
        .map_err(plot_err)?;
    let names = groups.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n_groups * 2 + 1)
        .x_label_formatter(&|x| {
            let f = x - x.floor();
            if (f - 0.5).abs() < 1e-6 {
                names.get(x.floor() as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;

    let width = 0.8 / series.len().max(1) as f64;
    for (s_idx, s) in series.iter().enumerate() {
        let colour = palette(s_idx);
        let bars: Vec<(f64, f64, f64)> = s
            .values
            .iter()
            .enumerate()
            .filter_map(|(g, v)| v.map(|(m, sd)| (g as f64 + 0.1 + width * s_idx as f64, m, sd)))
            .collect();
        chart
            .draw_series(bars.iter().map(|&(x0, m, _)| Rectangle::new([(x0, 0.0), (x0 + width, m)], colour.filled())))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], colour.filled()));
        chart
            .draw_series(bars.iter().filter(|b| b.2 > 0.0).map(|&(x0, m, sd)| {
                ErrorBar::new_vertical(x0 + width / 2.0, m - sd, m, m + sd, BLACK.stroke_width(1), 6)
            }))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

/// Grouped bar chart with ±1 std error bars.
pub fn bar_chart(path: &Path, title: &str, groups: &[String], series: &[BarSeries], y_label: &str) -> Result<()> {
    let width = (160 * groups.len().max(2) as u32).clamp(480, 1600);
    let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    draw_bars(&root, title, groups, series, y_label)?;
    root.present().map_err(plot_err)
}

/// Precision (left) and recall (right) per class, one bar series per model.
pub fn precision_recall_panel(
    path: &Path,
    title: &str,
    classes: &[String],
    precision: &[BarSeries],
    recall: &[BarSeries],
) -> Result<()> {
    let width = (140 * classes.len().max(2) as u32).clamp(420, 1200);
    let root = SVGBackend::new(path, (width * 2, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(width);
    draw_bars(&left, "precision", classes, precision, "precision")?;
    draw_bars(&right, "recall", classes, recall, "recall")?;
    root.present().map_err(plot_err)
}

/// Loss and accuracy per epoch, training solid and validation dashed, one colour per fold.
pub fn learning_curves(path: &Path, title: &str, folds: &[(usize, &LearningCurves)]) -> Result<()> {
    let root = SVGBackend::new(path, (1100, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(550);
    let epochs = folds.iter().map(|(_, c)| c.epochs()).max().unwrap_or(1).max(2);
    type Pick = fn(&LearningCurves) -> (&[f64], &[f64]);
    let panels: [(&DrawingArea<SVGBackend, Shift>, &str, Pick); 2] = [
        (&left, "loss", |c| (&c.train_loss, &c.val_loss)),
        (&right, "accuracy", |c| (&c.train_accuracy, &c.val_accuracy)),
    ];
    for (area, name, pick) in panels {
        let top = folds
            .iter()
            .flat_map(|(_, c)| {
                let (a, b) = pick(c);
                a.iter().chain(b).copied().collect::<Vec<_>>()
            })
            .filter(|v| v.is_finite())
            .fold(1.0f64, f64::max);
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(50)
            .build_cartesian_2d(1usize..epochs, 0.0..top * 1.05)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("epoch").y_desc(name).draw().map_err(plot_err)?;
        for (fold, curves) in folds {
            let colour = palette(*fold);
            let (train, val) = pick(curves);
            chart
                .draw_series(LineSeries::new(train.iter().enumerate().map(|(e, v)| (e + 1, *v)), colour.stroke_width(2)))
                .map_err(plot_err)?
                .label(format!("fold {fold} train"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], colour.stroke_width(2)));
            chart
                .draw_series(DashedLineSeries::new(
                    val.iter().enumerate().map(|(e, v)| (e + 1, *v)),
                    6,
                    4,
                    colour.stroke_width(1),
                ))
                .map_err(plot_err)?
                .label(format!("fold {fold} validation"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], colour.stroke_width(1)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Square matrix of values in [0, 1] with the value printed in each cell.
pub fn heatmap(path: &Path, title: &str, labels: &[String], values: &[Vec<f64>]) -> Result<()> {
    let n = labels.len();
    let side = (60 * n as u32 + 220).max(360);
    let root = SVGBackend::new(path, (side, side)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(120)
        .y_label_area_size(120)
        .build_cartesian_2d(0.0..n as f64, 0.0..n as f64)
        .map_err(plot_err)?;
    let names = labels.to_vec();
    let name_at = move |v: &f64| {
        let f = v - v.floor();
        if (f - 0.5).abs() < 1e-6 {
            names.get(v.floor() as usize).cloned().unwrap_or_default()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(2 * n + 1)
        .y_labels(2 * n + 1)
        .x_label_formatter(&name_at)
        .y_label_formatter(&name_at)
        .draw()
        .map_err(plot_err)?;
    for (i, row) in values.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let shade = (255.0 * p.clamp(0.0, 1.0)) as u8;
            let (x, y) = (j as f64, (n - 1 - i) as f64);
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x, y), (x + 1.0, y + 1.0)],
                    RGBColor(255, shade, shade).filled(),
                )))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Text::new(
                    format!("{p:.3}"),
                    (x + 0.3, y + 0.55),
                    ("sans-serif", 14).into_font(),
                )))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}
