//! SVG plots: robust-accuracy curves with learning-rate drops marked, and a
//! best/last bar chart over a data-fraction sweep.

use std::path::{Path, PathBuf};

use consistency_at::checkpoint::write_atomic;
use consistency_at::config::RunConfig;
use consistency_at::metrics::{MetricsRow, MetricsTable};
use consistency_at::train::METRICS_FILE;
use consistency_at::Error;
use plotters::prelude::*;

use crate::{CliError, CliResult};

pub const CURVES_FILE: &str = "robust_curves.svg";
pub const FRACTIONS_FILE: &str = "fractions.svg";
pub const FRACTIONS_CSV: &str = "fractions.csv";
/// Colour of learning-rate drop markers.
pub const MARKER: RGBColor = RGBColor(150, 150, 150);

struct Run {
    label: String,
    hash: String,
    rows: Vec<MetricsRow>,
}

fn load_run(path: &Path) -> CliResult<Run> {
    let table = MetricsTable::load(path)?;
    if table.rows.is_empty() {
        return Err(Error::MalformedData {
            path: path.to_path_buf(),
            message: "no metric rows".into(),
        }
        .into());
    }
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Run {
        label,
        hash: table.config_hash.unwrap_or_else(|| "unknown".into()),
        rows: table.rows,
    })
}

/// Epochs whose learning rate is lower than the previous epoch's.
pub fn lr_drops(rows: &[MetricsRow]) -> Vec<usize> {
    rows.windows(2).filter(|w| w[1].lr < w[0].lr).map(|w| w[1].epoch).collect()
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("plotting failed: {e}"))
}

/// Renders to a string first so that nothing is written on failure.
fn render_curves(runs: &[Run]) -> CliResult<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, 560)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let max_epoch = runs.iter().flat_map(|r| r.rows.iter().map(|m| m.epoch)).max().unwrap_or(1) as f64;
        let hashes: Vec<&str> = runs.iter().map(|r| r.hash.as_str()).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("PGD-10 robust accuracy (config {})", hashes.join(", ")), ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..max_epoch + 1.0, 0.0..100.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("robust accuracy (%)")
            .draw()
            .map_err(plot_err)?;
        let mut drops: Vec<usize> = runs.iter().flat_map(|r| lr_drops(&r.rows)).collect();
        drops.sort_unstable();
        drops.dedup();
        for e in drops {
            chart
                .draw_series(std::iter::once(PathElement::new(
                    vec![(e as f64, 0.0), (e as f64, 100.0)],
                    MARKER.stroke_width(1),
                )))
                .map_err(plot_err)?;
        }
        for (i, run) in runs.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    run.rows.iter().map(|m| (m.epoch as f64, m.pgd10_acc)),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(format!("{} [{}]", run.label, run.hash))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

struct FractionRun {
    fraction: f64,
    hash: String,
    best: f64,
    last: f64,
}

fn load_fraction_run(dir: &Path) -> CliResult<FractionRun> {
    let cfg = RunConfig::load(&dir.join("config.cfg"))?;
    let run = load_run(&dir.join(METRICS_FILE))?;
    Ok(FractionRun {
        fraction: cfg.train.fraction,
        hash: run.hash,
        best: run.rows.iter().map(|r| r.pgd10_acc).fold(f64::MIN, f64::max),
        last: run.rows.last().expect("non-empty").pgd10_acc,
    })
}

fn render_fractions(runs: &[FractionRun]) -> CliResult<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, 560)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let n = runs.len();
        let hashes: Vec<&str> = runs.iter().map(|r| r.hash.as_str()).collect();
        let labels: Vec<String> = runs.iter().map(|r| format!("{}%", r.fraction * 100.0)).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("best / last PGD-10 accuracy by data fraction (config {})", hashes.join(", ")), ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..n as f64, 0.0..100.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n.max(1))
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                labels.get(i).cloned().unwrap_or_default()
            })
            .x_desc("training data fraction")
            .y_desc("robust accuracy (%)")
            .draw()
            .map_err(plot_err)?;
        let best = Palette99::pick(0).to_rgba();
        let last = Palette99::pick(1).to_rgba();
        chart
            .draw_series(runs.iter().enumerate().map(|(i, r)| {
                Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.5, r.best)], best.filled())
            }))
            .map_err(plot_err)?
            .label("best")
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], best.filled()));
        chart
            .draw_series(runs.iter().enumerate().map(|(i, r)| {
                Rectangle::new([(i as f64 + 0.5, 0.0), (i as f64 + 0.9, r.last)], last.filled())
            }))
            .map_err(plot_err)?
            .label("last")
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], last.filled()));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

pub fn run(metrics: &[PathBuf], fraction_dirs: &[PathBuf], out: &Path) -> CliResult {
    let runs = metrics.iter().map(|p| load_run(p)).collect::<CliResult<Vec<_>>>()?;
    let mut fractions = fraction_dirs
        .iter()
        .map(|d| load_fraction_run(d))
        .collect::<CliResult<Vec<_>>>()?;
    fractions.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    let curves = if runs.is_empty() { None } else { Some(render_curves(&runs)?) };
    let bars = if fractions.is_empty() { None } else { Some(render_fractions(&fractions)?) };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(svg) = curves {
        write_atomic(&out.join(CURVES_FILE), svg.as_bytes())?;
        println!("{}", out.join(CURVES_FILE).display());
    }
    if let Some(svg) = bars {
        let mut csv = String::from("fraction,best_pgd10_acc,last_pgd10_acc,config_hash\n");
        for f in &fractions {
            csv.push_str(&format!("{},{},{},{}\n", f.fraction, f.best, f.last, f.hash));
        }
        write_atomic(&out.join(FRACTIONS_FILE), svg.as_bytes())?;
        write_atomic(&out.join(FRACTIONS_CSV), csv.as_bytes())?;
        println!("{}", out.join(FRACTIONS_FILE).display());
    }
    Ok(())
}
