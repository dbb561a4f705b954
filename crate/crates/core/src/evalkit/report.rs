//! Sweep reports: a results CSV, a markdown summary and SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::sweep::SweepResult;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One line of a plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Replaces numeric x tick labels when set.
    pub x_ticks: Option<Vec<(f64, String)>>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let (w, h) = (640.0, 400.0);
        let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
        let (pw, ph) = (w - left - right, h - top - bottom);
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(all().map(|p| p.0));
        let (y0, y1) = bounds(all().map(|p| p.1));
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            left + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let y = sy(v);
            let _ = writeln!(
                out,
                r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
                left + pw,
                left - 6.0,
                y + 4.0
            );
        }
        let ticks: Vec<(f64, String)> = match &self.x_ticks {
            Some(t) => t.clone(),
            None => (0..=4)
                .map(|i| {
                    let v = x0 + (x1 - x0) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect(),
        };
        for (v, label) in ticks {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                sx(v),
                top + ph + 16.0,
                escape(&label)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + pw / 2.0,
            h - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (x, y) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            }
            let ly = top + 14.0 + 18.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                left + pw + 10.0,
                left + pw + 30.0,
                left + pw + 36.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `axis,setting,seed,mIoU,iou_<class>...`, one row per run.
pub fn results_csv(result: &SweepResult) -> String {
    let mut out = String::from("axis,setting,seed,mIoU");
    for c in &result.class_names {
        let _ = write!(out, ",iou_{c}");
    }
    out.push('\n');
    for s in &result.settings {
        for r in &s.runs {
            let _ = write!(out, "{},{},{},{:.6}", result.axis.name(), s.setting.label(), r.seed, r.miou);
            for v in &r.per_class {
                let _ = write!(out, ",{}", fmt_opt(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn summary_markdown(result: &SweepResult) -> String {
    let mut out = format!(
        "# Sweep over {}\n\n| setting | runs | median mIoU | mean mIoU |\n|---|---|---|---|\n",
        result.axis.name()
    );
    for s in &result.settings {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {:.4} |",
            s.setting.label(),
            s.runs.len(),
            s.median_miou(),
            s.mean_miou()
        );
    }
    out
}

pub fn miou_plot(result: &SweepResult) -> LinePlot {
    let axis = result.axis.name();
    let categorical = result
        .settings
        .iter()
        .any(|s| !matches!(s.setting, super::sweep::Setting::Number(_) | super::sweep::Setting::Count(_)));
    LinePlot {
        title: format!("mIoU vs {axis}"),
        x_label: axis.to_string(),
        y_label: "mIoU".into(),
        series: vec![
            Series {
                name: "median".into(),
                points: result.settings.iter().map(|s| (s.setting.position(), s.median_miou())).collect(),
            },
            Series {
                name: "mean".into(),
                points: result.settings.iter().map(|s| (s.setting.position(), s.mean_miou())).collect(),
            },
        ],
        x_ticks: categorical.then(|| {
            result
                .settings
                .iter()
                .map(|s| (s.setting.position(), s.setting.label()))
                .collect()
        }),
    }
}

/// Per-epoch total training loss, averaged over seeds, one line per setting.
pub fn loss_plot(result: &SweepResult) -> LinePlot {
    let series = result
        .settings
        .iter()
        .map(|s| {
            let epochs = s.runs.iter().map(|r| r.history.epochs.len()).min().unwrap_or(0);
            let points = (0..epochs)
                .map(|e| {
                    let total: f64 = s
                        .runs
                        .iter()
                        .map(|r| {
                            let m = &r.history.epochs[e];
                            m.l_s + m.l_u_in + m.l_u_out
                        })
                        .sum();
                    (e as f64, total / s.runs.len() as f64)
                })
                .collect();
            Series {
                name: format!("{} = {}", result.axis.name(), s.setting.label()),
                points,
            }
        })
        .collect();
    LinePlot {
        title: "Training loss".into(),
        x_label: "epoch".into(),
        y_label: "l_s + l_u_in + l_u_out".into(),
        series,
        x_ticks: None,
    }
}

/// Write `results.csv`, `summary.md`, `miou_vs_<axis>.svg` and
/// `loss_curves.svg` into `out_dir`; returns the written paths.
pub fn render_report(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.run_count() == 0 {
        return Err(Error::Run("no sweep results to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let files = [
        ("results.csv".to_string(), results_csv(result)),
        ("summary.md".to_string(), summary_markdown(result)),
        (format!("miou_vs_{}.svg", result.axis.name()), miou_plot(result).to_svg()),
        ("loss_curves.svg".to_string(), loss_plot(result).to_svg()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SweepAxis;
    use crate::evalkit::sweep::{RunRecord, Setting, SettingResult};
    use crate::trainer::{EpochMetrics, MetricHistory};

    fn fake(points: &[f64]) -> SweepResult {
        let history = MetricHistory {
            epochs: (0..3)
                .map(|e| EpochMetrics {
                    epoch: e,
                    l_s: 1.0 / (e + 1) as f64,
                    l_u_in: 0.1,
                    l_u_out: 0.2,
                    masked_frac_in: 0.5,
                    masked_frac_out: 0.0,
                    lr: 0.01,
                })
                .collect(),
        };
        SweepResult {
            axis: SweepAxis::TauOut,
            class_names: vec!["background".into(), "disk".into()],
            settings: points
                .iter()
                .map(|&t| SettingResult {
                    setting: Setting::Number(t),
                    runs: vec![RunRecord {
                        seed: 1,
                        miou: 0.5 + t / 10.0,
                        per_class: vec![Some(0.9), None],
                        history: history.clone(),
                    }],
                })
                .collect(),
        }
    }

    #[test]
    fn empty_results_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        assert!(render_report(&fake(&[]), &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn five_point_sweep_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = fake(&[0.0, 0.25, 0.5, 0.75, 0.95]);
        let files = render_report(&r, dir.path()).unwrap();
        let svgs = files.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).count();
        assert!(svgs >= 2);
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "axis,setting,seed,mIoU,iou_background,iou_disk");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "tau_out,0,1,0.500000,0.900000,");
        assert!(dir.path().join("miou_vs_tau_out.svg").exists());

        let again = tempfile::tempdir().unwrap();
        render_report(&r, again.path()).unwrap();
        assert_eq!(fs::read(again.path().join("results.csv")).unwrap(), csv.as_bytes());
    }
}
