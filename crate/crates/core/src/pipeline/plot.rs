use std::io::Write;
use std::path::Path;

use plotters::prelude::*;

use super::experiment::{AggregateRow, EvalReport};
use crate::{Error, Result};

pub const SUMMARY_FORMAT_LINE: &str = "# trajsafe.eval_summary v1";

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

/// One CSV per variant with the cross-seed mean and std at each checkpoint.
pub fn write_summary_csvs(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for v in &report.variants {
        let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}.csv", v.variant)))?);
        writeln!(file, "{SUMMARY_FORMAT_LINE}")?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.write_record([
            "step",
            "seeds",
            "return_mean",
            "return_std",
            "compliance_mean",
            "compliance_std",
            "step_compliance_mean",
            "step_compliance_std",
        ])?;
        for r in &v.checkpoints {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

struct Curve<'a> {
    label: &'a str,
    points: Vec<(f64, f64, f64)>,
}

fn draw(path: &Path, title: &str, y_label: &str, curves: &[Curve<'_>], reference: Option<f64>) -> Result<()> {
    let x_max = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .fold(1.0_f64, f64::max);
    let (mut y_min, mut y_max) = curves
        .iter()
        .flat_map(|c| c.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]))
        .chain(reference)
        .filter(|y| y.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut band: Vec<(f64, f64)> = c.points.iter().map(|p| (p.0, p.1 + p.2)).collect();
        band.extend(c.points.iter().rev().map(|p| (p.0, p.1 - p.2)));
        chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.15)))).map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(c.points.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(c.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    if let Some(d) = reference {
        chart
            .draw_series(DashedLineSeries::new([(0.0, d), (x_max, d)], 8, 6, BLACK.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("d = {d}"))
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `reward.svg` and `compliance.svg`: cross-seed mean with a ±std
/// band per variant, and the threshold d as a dashed line on compliance.
pub fn plot_report(out_dir: &Path, report: &EvalReport) -> Result<()> {
    let curves = |f: fn(&AggregateRow) -> (f64, f64)| -> Vec<Curve<'_>> {
        report
            .variants
            .iter()
            .map(|v| Curve {
                label: v.variant.as_str(),
                points: v
                    .checkpoints
                    .iter()
                    .map(|r| {
                        let (m, s) = f(r);
                        (r.step as f64, m, s)
                    })
                    .collect(),
            })
            .collect()
    };
    draw(
        &out_dir.join("reward.svg"),
        &format!("{}: evaluation return", report.env_id),
        "mean return",
        &curves(|r| (r.return_mean, r.return_std)),
        None,
    )?;
    draw(
        &out_dir.join("compliance.svg"),
        &format!("{}: trajectory compliance", report.env_id),
        "compliant fraction",
        &curves(|r| (r.compliance_mean, r.compliance_std)),
        Some(report.d),
    )
}
