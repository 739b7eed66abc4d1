//! SVG plots of a telemetry CSV: one chart per quantity, one line per joint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use limbkit::sim::{TelemetryRecord, TELEMETRY_HEADER};
use plotters::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

/// Reads a telemetry CSV written by the simulator.
pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRecord>, PlotError> {
    let bad = |message: String| PlotError::Input {
        path: path.to_owned(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != TELEMETRY_HEADER {
        return Err(bad(format!("expected header {TELEMETRY_HEADER}")));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| bad(e.to_string())))
        .collect()
}

const QUANTITIES: [(&str, &str, fn(&TelemetryRecord) -> f64); 3] = [
    ("position", "position (rev)", |r| r.pos_rev),
    ("velocity", "velocity (rev/s)", |r| r.vel_rev_s),
    ("current", "current (A)", |r| r.current_a),
];

/// Writes one SVG per recorded quantity into `out_dir`, one line per joint.
pub fn export_plots(
    records: &[TelemetryRecord],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PlotError> {
    std::fs::create_dir_all(out_dir).map_err(|e| PlotError::Output {
        path: out_dir.to_owned(),
        message: e.to_string(),
    })?;
    let mut by_joint: BTreeMap<&str, Vec<&TelemetryRecord>> = BTreeMap::new();
    for r in records {
        by_joint.entry(&r.joint_id).or_default().push(r);
    }
    let t_end = records
        .iter()
        .map(|r| r.time_s)
        .fold(0.0, f64::max)
        .max(1e-3);
    let mut written = Vec::new();
    for (name, label, value) in QUANTITIES {
        let path = out_dir.join(format!("{name}.svg"));
        let fail = |e: &dyn std::fmt::Display| PlotError::Output {
            path: path.clone(),
            message: e.to_string(),
        };
        let (lo, hi) = records
            .iter()
            .map(value)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let (lo, hi) = if lo.is_finite() && hi > lo {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        } else {
            let mid = if lo.is_finite() { lo } else { 0.0 };
            (mid - 1.0, mid + 1.0)
        };
        {
            let root = SVGBackend::new(&path, (960, 540)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| fail(&e))?;
            let mut chart = ChartBuilder::on(&root)
                .caption(label, ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(36)
                .y_label_area_size(64)
                .build_cartesian_2d(0.0..t_end, lo..hi)
                .map_err(|e| fail(&e))?;
            chart
                .configure_mesh()
                .x_desc("time (s)")
                .y_desc(label)
                .draw()
                .map_err(|e| fail(&e))?;
            for (i, (joint, rows)) in by_joint.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                chart
                    .draw_series(LineSeries::new(
                        rows.iter().map(|r| (r.time_s, value(r))),
                        color,
                    ))
                    .map_err(|e| fail(&e))?
                    .label(*joint)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| fail(&e))?;
            root.present().map_err(|e| fail(&e))?;
        }
        written.push(path);
    }
    Ok(written)
}
