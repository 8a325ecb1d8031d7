//! Learning curves from run directories: one thin line per run and, for
//! labels shared by several runs, a mean line with a standard-error band.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use epo_core::metrics::{read_table, Table};
use epo_core::run::{RunManifest, METRICS};

use crate::stats::mean_stderr;
use crate::{runtime, CliError, PlotArgs, PlotFormat};

const X_COLUMN: &str = "env_steps";
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

#[derive(Debug, Clone)]
pub struct RunSeries {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Pointwise aggregate over the runs of one label, on the x values every
/// run shares.
#[derive(Debug, Clone)]
pub struct Group {
    pub label: String,
    pub runs: Vec<RunSeries>,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: Vec<usize>,
}

fn metrics_path(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join(METRICS)
    } else {
        run.to_path_buf()
    }
}

pub fn run_label(run: &Path) -> String {
    let dir = if run.is_dir() { run } else { run.parent().unwrap_or(run) };
    if let Some(label) = RunManifest::read(dir).ok().and_then(|m| m.label) {
        return label;
    }
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    match name(dir) {
        Some(n) if n.starts_with("seed_") => dir.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => dir.display().to_string(),
    }
}

fn load(run: &Path, metric: &str) -> Result<RunSeries, CliError> {
    let path = metrics_path(run);
    let table: Table = read_table(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let y = table.column(metric).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown metric `{metric}` in {}; available columns: {}",
            path.display(),
            table.header.join(", ")
        ))
    })?;
    let x = table
        .column(X_COLUMN)
        .ok_or_else(|| CliError::Usage(format!("{} has no {X_COLUMN} column", path.display())))?;
    Ok(RunSeries { x, y })
}

pub fn aggregate(label: String, runs: Vec<RunSeries>) -> Group {
    let mut x: Vec<f64> = runs[0].x.clone();
    for r in &runs[1..] {
        x.retain(|v| r.x.contains(v));
    }
    let (mut mean, mut stderr, mut n) = (Vec::new(), Vec::new(), Vec::new());
    let mut kept_x = Vec::new();
    for &xv in &x {
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.x.iter().position(|&v| v == xv).map(|i| r.y[i]))
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let (m, s) = mean_stderr(&vals);
        kept_x.push(xv);
        mean.push(m);
        stderr.push(s);
        n.push(vals.len());
    }
    Group { label, runs, x: kept_x, mean, stderr, n }
}

pub fn collect_groups(runs: &[PathBuf], metric: &str) -> Result<Vec<Group>, CliError> {
    let mut grouped: Vec<(String, Vec<RunSeries>)> = Vec::new();
    for run in runs {
        let series = load(run, metric)?;
        let label = run_label(run);
        match grouped.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(series),
            None => grouped.push((label, vec![series])),
        }
    }
    Ok(grouped.into_iter().map(|(l, r)| aggregate(l, r)).collect())
}

pub fn to_csv(groups: &[Group]) -> String {
    let mut out = String::from("label,env_steps,mean,stderr,n\n");
    for g in groups {
        for i in 0..g.x.len() {
            let _ = writeln!(out, "{},{},{},{},{}", g.label, g.x[i], g.mean[i], g.stderr[i], g.n[i]);
        }
    }
    out
}

/// Roughly five round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn to_svg(groups: &[Group], metric: &str) -> String {
    let (w, h) = (900.0, 540.0);
    let (left, right, top, bottom) = (80.0, 200.0, 30.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for g in groups {
        for r in &g.runs {
            xs.extend(r.x.iter().copied());
            ys.extend(r.y.iter().copied().filter(|v| v.is_finite()));
        }
        for i in 0..g.x.len() {
            ys.push(g.mean[i] - g.stderr[i]);
            ys.push(g.mean[i] + g.stderr[i]);
        }
    }
    let finite_range = |v: &[f64]| {
        let lo = v.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
            _ => (0.0, 1.0),
        }
    };
    let (x0, x1) = finite_range(&xs);
    let (y0, y1) = finite_range(&ys);
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for t in ticks(x0, x1) {
        let x = px(t);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##, top + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, top + ph + 18.0, tick_label(t));
    }
    for t in ticks(y0, y1) {
        let y = py(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, tick_label(t));
    }
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{X_COLUMN}</text>"#, left + pw / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(metric)
    );

    let path = |x: &[f64], y: &[f64]| -> String {
        let mut d = String::new();
        let mut pen_up = true;
        for (&a, &b) in x.iter().zip(y) {
            if !b.is_finite() {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_up { "M" } else { "L" }, px(a), py(b));
            pen_up = false;
        }
        d
    };
    for (gi, g) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let multi = g.runs.len() > 1;
        if multi && !g.x.is_empty() {
            let mut pts = String::new();
            for i in 0..g.x.len() {
                let _ = write!(pts, "{:.2},{:.2} ", px(g.x[i]), py(g.mean[i] + g.stderr[i]));
            }
            for i in (0..g.x.len()).rev() {
                let _ = write!(pts, "{:.2},{:.2} ", px(g.x[i]), py(g.mean[i] - g.stderr[i]));
            }
            let _ = writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.trim_end());
        }
        for r in &g.runs {
            let (width, opacity) = if multi { (0.8, 0.35) } else { (1.8, 1.0) };
            let _ = writeln!(
                s,
                r#"<path class="run" d="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
                path(&r.x, &r.y).trim_end()
            );
        }
        if multi {
            let _ = writeln!(
                s,
                r#"<path class="mean" d="{}" fill="none" stroke="{color}" stroke-width="2.2"/>"#,
                path(&g.x, &g.mean).trim_end()
            );
        }
        let ly = top + 14.0 + 20.0 * gi as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2.2"/>"#, lx + 22.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{} (n={})</text>"#,
            lx + 28.0,
            ly + 4.0,
            escape(&g.label),
            g.runs.len()
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(args: PlotArgs) -> Result<(), CliError> {
    for r in &args.runs {
        if !metrics_path(r).exists() {
            return Err(CliError::Usage(format!("no metrics found at {}", metrics_path(r).display())));
        }
    }
    let groups = collect_groups(&args.runs, &args.metric)?;
    let body = match args.format {
        PlotFormat::Svg => to_svg(&groups, &args.metric),
        PlotFormat::Csv => to_csv(&groups),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    std::fs::write(&args.out, body).map_err(runtime)?;
    println!("{}", args.out.display());
    Ok(())
}
