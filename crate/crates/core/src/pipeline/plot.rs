//! Sweep plots. The CSV is the source of truth; the SVG is a rendering of it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use plotters::prelude::*;

use super::manifest::SweepAxis;
use crate::downstream::EvalReport;
use crate::util::atomic_write;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    LambdaSweep,
    SizeSweep,
    DefenseSweep,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::LambdaSweep => "lambda_sweep",
            PlotKind::SizeSweep => "size_sweep",
            PlotKind::DefenseSweep => "defense_sweep",
        }
    }

    /// The plot kind a sweep axis feeds, if any.
    pub fn for_axis(axis: SweepAxis) -> Option<PlotKind> {
        match axis {
            SweepAxis::Lambda => Some(PlotKind::LambdaSweep),
            SweepAxis::SurrogateSize => Some(PlotKind::SizeSweep),
            SweepAxis::TopK | SweepAxis::Rounding | SweepAxis::PoisonEps => Some(PlotKind::DefenseSweep),
            SweepAxis::Metric | SweepAxis::Variant => None,
        }
    }

    fn accepts(self, axis: &str) -> bool {
        match self {
            PlotKind::LambdaSweep => axis == "lambda",
            PlotKind::SizeSweep => axis == "surrogate_size",
            PlotKind::DefenseSweep => matches!(axis, "top_k" | "rounding" | "poison_eps"),
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PlotKind::LambdaSweep, PlotKind::SizeSweep, PlotKind::DefenseSweep]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown plot kind `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct PlotOutput {
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
    /// Why the plot was skipped, when it was.
    pub notice: Option<String>,
}

struct Row {
    x: f64,
    value: String,
    variant: String,
    task: String,
    ta: f64,
    sa: f64,
}

/// Writes `<stem>.csv` and, given at least two sweep points, `<stem>.svg`
/// into `dir`. Every report must sit on the same axis, and that axis must
/// belong to `kind`.
pub fn emit_plots(reports: &[EvalReport], kind: PlotKind, dir: &Path, stem: &str) -> Result<PlotOutput> {
    let first = reports
        .first()
        .ok_or_else(|| Error::precondition("no reports to plot"))?;
    let axis = first
        .sweep
        .as_ref()
        .map(|p| p.axis.clone())
        .ok_or_else(|| Error::config(format!("report `{}` is not a sweep point", first.label)))?;
    if !kind.accepts(&axis) {
        return Err(Error::config(format!("{kind} cannot plot a `{axis}` sweep")));
    }
    let mut rows = Vec::new();
    for r in reports {
        let p = r
            .sweep
            .as_ref()
            .ok_or_else(|| Error::config(format!("report `{}` is not a sweep point", r.label)))?;
        if p.axis != axis {
            return Err(Error::config(format!(
                "inconsistent sweep axes: `{axis}` and `{}` (report `{}`)",
                p.axis, r.label
            )));
        }
        let x = p
            .x
            .ok_or_else(|| Error::config(format!("sweep value `{}` is not numeric", p.value)))?;
        for t in &r.tasks {
            rows.push(Row {
                x,
                value: p.value.clone(),
                variant: r.variant.clone().unwrap_or_default(),
                task: t.task.clone(),
                ta: t.ta,
                sa: t.sa,
            });
        }
    }
    rows.sort_by(|a, b| a.x.total_cmp(&b.x).then_with(|| (&a.variant, &a.task).cmp(&(&b.variant, &b.task))));

    let mut csv = format!("{axis},variant,task,ta,sa\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.value, r.variant, r.task, r.ta, r.sa));
    }
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    atomic_write(&csv_path, csv.as_bytes())?;

    let mut xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
    xs.dedup();
    if xs.len() < 2 {
        let notice = format!("{stem}: a single sweep point, plot skipped (CSV at {})", csv_path.display());
        warn!("{notice}");
        return Ok(PlotOutput {
            csv: csv_path,
            svg: None,
            notice: Some(notice),
        });
    }
    let svg_path = dir.join(format!("{stem}.svg"));
    draw(&rows, &xs, kind, &axis, &svg_path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("plotting {}: {e}", svg_path.display()))))?;
    Ok(PlotOutput {
        csv: csv_path,
        svg: Some(svg_path),
        notice: None,
    })
}

/// Points are placed at evenly spaced positions labelled with the sweep
/// values, since sweeps such as λ ∈ {0, 0.1, …, 100} span decades.
fn draw(rows: &[Row], xs: &[f64], kind: PlotKind, axis: &str, path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let position = |x: f64| xs.iter().position(|&v| v == x).unwrap_or(0) as f64;
    let labels: Vec<String> = xs
        .iter()
        .map(|&x| rows.iter().find(|r| r.x == x).map(|r| r.value.clone()).unwrap_or_default())
        .collect();

    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series
            .entry(format!("SA {} {}", r.task, r.variant).trim_end().to_string())
            .or_default()
            .push((position(r.x), r.sa));
        if kind == PlotKind::DefenseSweep {
            let ta = series.entry(format!("TA {}", r.task)).or_default();
            if ta.last().map(|p| p.0) != Some(position(r.x)) {
                ta.push((position(r.x), r.ta));
            }
        }
    }

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .caption(format!("{kind}: accuracy vs {axis}"), ("sans-serif", 20))
        .build_cartesian_2d(-0.25..(xs.len() as f64 - 0.75), 0.0..1.0)?;
    chart
        .configure_mesh()
        .x_labels(xs.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc(axis)
        .y_desc("accuracy")
        .draw()?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::{SweepPoint, TaskResult};

    fn point(axis: &str, value: f64, sa: f64) -> EvalReport {
        let mut r = EvalReport::new(&format!("p{value}"), "none", vec![TaskResult::new("T", 0.8, sa, 10, 10)], 5, 3.2);
        r.variant = Some("stolen_encoder".into());
        r.sweep = Some(SweepPoint {
            axis: axis.into(),
            value: value.to_string(),
            x: Some(value),
        });
        r
    }

    #[test]
    fn sweep_writes_csv_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<_> = [(1.0, 0.5), (0.0, 0.3), (20.0, 0.7)]
            .iter()
            .map(|&(x, sa)| point("lambda", x, sa))
            .collect();
        let out = emit_plots(&reports, PlotKind::LambdaSweep, dir.path(), "lam").unwrap();
        let csv = std::fs::read_to_string(&out.csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "lambda,variant,task,ta,sa");
        assert!(lines[1].starts_with("0,") && lines[3].starts_with("20,"));
        assert!(std::fs::read_to_string(out.svg.unwrap()).unwrap().contains("<svg"));
    }

    #[test]
    fn single_point_skips_plot_and_bad_axes_fail() {
        let dir = tempfile::tempdir().unwrap();
        let out = emit_plots(&[point("lambda", 20.0, 0.7)], PlotKind::LambdaSweep, dir.path(), "one").unwrap();
        assert!(out.svg.is_none() && out.notice.is_some() && out.csv.exists());
        let mixed = [point("lambda", 1.0, 0.5), point("top_k", 10.0, 0.5)];
        assert!(matches!(emit_plots(&mixed, PlotKind::LambdaSweep, dir.path(), "m"), Err(Error::Config(_))));
        assert!(emit_plots(&[point("top_k", 1.0, 0.2)], PlotKind::SizeSweep, dir.path(), "k").is_err());
        let mut plain = point("lambda", 1.0, 0.1);
        plain.sweep = None;
        assert!(emit_plots(&[plain], PlotKind::LambdaSweep, dir.path(), "p").is_err());
    }
}
