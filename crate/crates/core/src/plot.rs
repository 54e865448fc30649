//! SVG figures from a completed run directory.
//!
//! Error curves come from the aggregate `errors_<dim>.csv` files; density
//! panels come from the first repeat's stored reference, snapshots, and
//! estimator records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::charest::CharStepRecord;
use crate::error::{Error, Result};
use crate::experiment::{read_json, repeat_dir_name, GridPfResults, RunManifest, MANIFEST_FILE};
use crate::metrics::Marginal1d;
use crate::reference::{CellEnsemble, SnapshotSeries};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const PANEL_SAMPLES: usize = 400;

/// What [`emit_plots`] wrote and what it had to leave out.
#[derive(Debug, Clone, Default)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    pub skipped: Vec<String>,
}

/// One estimator's aggregate error curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub estimator: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Parses an aggregate error CSV into one curve per estimator, in order of
/// first appearance.
pub fn read_aggregate_csv(text: &str) -> Result<Vec<Curve>> {
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some("estimator,time,mean,std") => {}
        other => {
            return Err(Error::invalid(format!(
                "unexpected aggregate header {other:?}"
            )))
        }
    }
    let mut curves: Vec<Curve> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::invalid(format!("malformed row {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number {s:?} in {line:?}")))
        };
        let (t, m, s) = (num(f[1])?, num(f[2])?, num(f[3])?);
        let curve = match curves.iter_mut().position(|c| c.estimator == f[0]) {
            Some(i) => &mut curves[i],
            None => {
                curves.push(Curve {
                    estimator: f[0].to_string(),
                    times: vec![],
                    mean: vec![],
                    std: vec![],
                });
                curves.last_mut().expect("just pushed")
            }
        };
        curve.times.push(t);
        curve.mean.push(m);
        curve.std.push(s);
    }
    Ok(curves)
}

fn color(name: &str) -> &'static str {
    match name {
        "charest" => "#1f77b4",
        "gridpf" => "#d62728",
        "reference" => "#222222",
        "measured" => "#2ca02c",
        _ => "#9467bd",
    }
}

/// Tick positions at 1, 2, or 5 times a power of ten.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![lo];
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A single set of axes occupying a rectangle of the canvas.
struct Axes {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xlim: (f64, f64),
    ylim: (f64, f64),
}

impl Axes {
    fn sx(&self, x: f64) -> f64 {
        self.x0 + (x - self.xlim.0) / (self.xlim.1 - self.xlim.0) * self.w
    }

    fn sy(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.ylim.0) / (self.ylim.1 - self.ylim.0) * self.h
    }

    fn frame(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        for t in ticks(self.xlim.0, self.xlim.1) {
            let x = self.sx(t);
            let yb = self.y0 + self.h;
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.1}" y1="{yb:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"##,
                yb + 4.0,
                yb + 17.0,
                fmt_tick(t)
            );
        }
        for t in ticks(self.ylim.0, self.ylim.1) {
            let y = self.sy(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"##,
                self.x0 - 4.0,
                self.x0,
                self.x0 - 7.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
            self.x0 + self.w / 2.0,
            self.y0 - 10.0,
            escape(title)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 34.0,
            escape(xlabel)
        );
        let (lx, ly) = (self.x0 - 46.0, self.y0 + self.h / 2.0);
        let _ = writeln!(
            svg,
            r#"<text x="{lx:.1}" y="{ly:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#,
            escape(ylabel)
        );
    }

    fn points(&self, xs: &[f64], ys: &[f64]) -> String {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| format!("{:.2},{:.2}", self.sx(*x), self.sy(*y)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn line(&self, svg: &mut String, xs: &[f64], ys: &[f64], stroke: &str, dashed: bool) {
        let dash = if dashed {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.8"{dash}/>"#,
            self.points(xs, ys)
        );
    }

    fn band(&self, svg: &mut String, xs: &[f64], lo: &[f64], hi: &[f64], fill: &str) {
        let mut px: Vec<f64> = xs.to_vec();
        let mut py: Vec<f64> = hi.to_vec();
        px.extend(xs.iter().rev());
        py.extend(lo.iter().rev());
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="0.2" stroke="none"/>"#,
            self.points(&px, &py)
        );
    }

    fn legend(&self, svg: &mut String, entries: &[(String, bool)]) {
        for (i, (name, dashed)) in entries.iter().enumerate() {
            let y = self.y0 + 14.0 + 16.0 * i as f64;
            let x = self.x0 + self.w - 110.0;
            let dash = if *dashed {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            };
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="1.8"{dash}/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
                x + 22.0,
                color(name),
                x + 28.0,
                y + 4.0,
                escape(name)
            );
        }
    }
}

fn svg_document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi + 0.05 * (hi - lo))
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Error-vs-time figure for one marginal: mean curves with a one-std band.
pub fn error_plot_svg(dim: &str, curves: &[Curve]) -> String {
    let tmin = curves
        .iter()
        .flat_map(|c| c.times.first())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let tmax = curves
        .iter()
        .flat_map(|c| c.times.last())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let ymax = curves
        .iter()
        .flat_map(|c| c.mean.iter().zip(&c.std).map(|(m, s)| m + s))
        .fold(0.0, f64::max);
    let ax = Axes {
        x0: MARGIN_L,
        y0: MARGIN_T,
        w: WIDTH - MARGIN_L - MARGIN_R,
        h: HEIGHT - MARGIN_T - MARGIN_B,
        xlim: if tmax > tmin {
            (tmin, tmax)
        } else {
            (tmin, tmin + 1.0)
        },
        ylim: padded(0.0, ymax),
    };
    let mut svg = String::new();
    for c in curves {
        let lo: Vec<f64> = c
            .mean
            .iter()
            .zip(&c.std)
            .map(|(m, s)| (m - s).max(0.0))
            .collect();
        let hi: Vec<f64> = c.mean.iter().zip(&c.std).map(|(m, s)| m + s).collect();
        ax.band(&mut svg, &c.times, &lo, &hi, color(&c.estimator));
    }
    for c in curves {
        ax.line(&mut svg, &c.times, &c.mean, color(&c.estimator), false);
    }
    ax.frame(&mut svg, &format!("L1 error, marginal {dim}"), "t", "L1");
    let entries: Vec<_> = curves
        .iter()
        .map(|c| (c.estimator.clone(), false))
        .collect();
    ax.legend(&mut svg, &entries);
    svg_document(WIDTH, HEIGHT, &svg)
}

/// One density curve of a panel.
#[derive(Debug, Clone)]
pub struct PanelSeries {
    pub name: String,
    pub marginal: Marginal1d,
}

/// Density panel at one time: one subplot per state marginal.
pub fn density_panel_svg(time: f64, dims: &[(String, Vec<PanelSeries>)]) -> Result<String> {
    let sub_w = WIDTH - MARGIN_L - MARGIN_R;
    let sub_h = HEIGHT - MARGIN_T - MARGIN_B;
    let total_w = dims.len() as f64 * WIDTH;
    let mut svg = String::new();
    for (i, (name, series)) in dims.iter().enumerate() {
        let (lo, hi) = series
            .iter()
            .map(|s| s.marginal.support())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| {
                (a.min(c), b.max(d))
            });
        let xs: Vec<f64> = (0..PANEL_SAMPLES)
            .map(|k| lo + (hi - lo) * k as f64 / (PANEL_SAMPLES - 1) as f64)
            .collect();
        let curves = series
            .iter()
            .map(|s| s.marginal.eval_uniform(lo, hi, PANEL_SAMPLES))
            .collect::<Result<Vec<_>>>()?;
        let ymax = curves.iter().flatten().copied().fold(0.0, f64::max);
        let ax = Axes {
            x0: i as f64 * WIDTH + MARGIN_L,
            y0: MARGIN_T,
            w: sub_w,
            h: sub_h,
            xlim: (lo, hi),
            ylim: padded(0.0, ymax),
        };
        for (s, ys) in series.iter().zip(&curves) {
            ax.line(&mut svg, &xs, ys, color(&s.name), s.name == "measured");
        }
        ax.frame(
            &mut svg,
            &format!("{name} at t = {time:.2}"),
            name,
            "density",
        );
        let entries: Vec<_> = series
            .iter()
            .map(|s| (s.name.clone(), s.name == "measured"))
            .collect();
        ax.legend(&mut svg, &entries);
    }
    Ok(svg_document(total_w, HEIGHT, &svg))
}

fn nearest_index(times: &[f64], t: f64) -> Option<usize> {
    (0..times.len()).min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
}

/// Writes all figures for `run_dir` into `run_dir/plots`. Missing inputs are
/// listed in the report; an error with exit status 4 is returned when
/// nothing at all could be drawn.
pub fn emit_plots(run_dir: &Path) -> Result<PlotReport> {
    if !run_dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::NothingToDo(format!(
            "nothing to plot: no manifest in {}",
            run_dir.display()
        )));
    }
    let manifest = RunManifest::read(run_dir)?;
    let cfg = &manifest.config;
    let names = cfg.model.dim_names();
    let out = run_dir.join("plots");
    let mut report = PlotReport::default();
    let mut pending: Vec<(PathBuf, String)> = Vec::new();

    for dim in &names {
        let file = format!("errors_{dim}.csv");
        let path = run_dir.join(&file);
        let Ok(text) = fs::read_to_string(&path) else {
            report.skipped.push(file);
            continue;
        };
        let curves = read_aggregate_csv(&text)?;
        if curves.is_empty() {
            report.skipped.push(file);
            continue;
        }
        pending.push((
            out.join(format!("errors_{dim}.svg")),
            error_plot_svg(dim, &curves),
        ));
    }

    if !cfg.output.panel_times.is_empty() {
        match panel_figures(run_dir, &manifest, &mut report.skipped)? {
            Some(figs) => pending.extend(figs.into_iter().map(|(n, s)| (out.join(n), s))),
            None => report.skipped.push("density panels".into()),
        }
    }

    if pending.is_empty() {
        return Err(Error::NothingToDo(format!(
            "nothing to plot in {}",
            run_dir.display()
        )));
    }
    fs::create_dir_all(&out)?;
    for (path, svg) in pending {
        fs::write(&path, svg)?;
        report.files.push(path);
    }
    Ok(report)
}

fn panel_figures(
    run_dir: &Path,
    manifest: &RunManifest,
    skipped: &mut Vec<String>,
) -> Result<Option<Vec<(String, String)>>> {
    let cfg = &manifest.config;
    let Some(first) = manifest.repeats.first() else {
        return Ok(None);
    };
    let dir = run_dir.join(&first.dir);
    let (Ok(reference), Ok(snaps)) = (
        read_json::<Vec<CellEnsemble>>(&dir.join("reference.json")),
        read_json::<SnapshotSeries>(&dir.join("snapshots.json")),
    ) else {
        return Ok(None);
    };
    let charest: Option<Vec<CharStepRecord>> = read_json(&dir.join("charest_results.json")).ok();
    let gridpf: Option<GridPfResults> = read_json(&dir.join("gridpf_results.json")).ok();
    for (name, present) in [("charest", charest.is_some()), ("gridpf", gridpf.is_some())] {
        let wanted = cfg.estimators.iter().any(|e| e.name() == name);
        if wanted && !present {
            skipped.push(format!(
                "{}/{name}_results.json",
                repeat_dir_name(first.index)
            ));
        }
    }
    let times: Vec<f64> = reference.iter().map(|e| e.time).collect();
    let mut figs = Vec::new();
    for &t in &cfg.output.panel_times {
        let Some(k) = nearest_index(&times, t) else {
            continue;
        };
        let mut dims = Vec::new();
        for (d, name) in cfg.model.dim_names().into_iter().enumerate() {
            let mut series = vec![PanelSeries {
                name: "reference".into(),
                marginal: Marginal1d::Mixture(reference[k].marginal_kde(d)?),
            }];
            if let Some(r) = charest.as_ref().and_then(|r| r.get(k)) {
                series.push(PanelSeries {
                    name: "charest".into(),
                    marginal: Marginal1d::Mixture(r.marginals[d].clone()),
                });
            }
            if let Some(g) = gridpf.as_ref().filter(|g| k < g.records.len()) {
                let axis = g.grid.axes()[d];
                series.push(PanelSeries {
                    name: "gridpf".into(),
                    marginal: Marginal1d::Piecewise {
                        lo: axis.lower,
                        width: axis.width(),
                        values: g.records[k].marginals[d].clone(),
                    },
                });
            }
            if let Some(j) = cfg.model.measured_dims.iter().position(|&m| m == d) {
                if let Some(entry) = snaps.entries.get(k) {
                    series.push(PanelSeries {
                        name: "measured".into(),
                        marginal: Marginal1d::Mixture(entry.gmd.marginalize(&[j])?),
                    });
                }
            }
            dims.push((name, series));
        }
        figs.push((
            format!("panel_t{:.2}.svg", times[k]),
            density_panel_svg(times[k], &dims)?,
        ));
    }
    Ok(Some(figs))
}
