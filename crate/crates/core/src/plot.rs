//! SVG line plots of threshold sweeps.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{DipsError, Result};
use crate::metrics::ThresholdSweep;

fn plot_err(e: impl std::fmt::Display) -> DipsError {
    DipsError::Codec(format!("plot: {e}"))
}

/// One line per series, thresholds on the x axis, values in [0, 1].
pub fn plot_sweep(sweep: &ThresholdSweep, path: &Path, title: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1f64, 0f64..1.02f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("map threshold")
        .y_desc("box accuracy")
        .draw()
        .map_err(plot_err)?;
    for (i, s) in sweep.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                sweep.thresholds.iter().copied().zip(s.values.iter().copied()),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
