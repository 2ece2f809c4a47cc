//! SVG renderings of the diagnostic tables.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use cdl::evalkit::Correlation;

use crate::CliError;

const SIZE: (u32, u32) = (640, 420);

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Plot(format!("{}: {e}", path.display()))
}

/// One cumulative curve per CDL step.
pub fn cdf_plot(path: &Path, edges: &[f64], cdf: &BTreeMap<usize, Vec<f64>>) -> Result<(), CliError> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Uncertainty CDF per CDL step", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1f64, 0f64..1f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("mean surrogate variance")
        .y_desc("fraction of videos")
        .draw()
        .map_err(&err)?;
    for (i, (step, ys)) in cdf.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(edges.iter().copied().zip(ys.iter().copied()), color.stroke_width(2)))
            .map_err(&err)?
            .label(format!("step {step}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperLeft)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)
}

/// Spearman rho against CDL step.
pub fn correlation_plot(path: &Path, series: &BTreeMap<usize, Correlation>) -> Result<(), CliError> {
    let err = plot_err(path);
    let last = series.keys().next_back().copied().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Uncertainty/error correlation", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..(last as f64 + 0.5), -1f64..1f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("CDL step")
        .y_desc("Spearman rho")
        .draw()
        .map_err(&err)?;
    let points: Vec<(f64, f64)> = series.iter().map(|(s, c)| (*s as f64, c.rho)).collect();
    chart
        .draw_series(LineSeries::new(points.iter().copied(), BLUE.stroke_width(2)))
        .map_err(&err)?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(&err)?;
    root.present().map_err(&err)
}
