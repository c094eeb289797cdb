//! Comparison tables and line plots rebuilt from run CSV logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::EpisodeRecord;
use crate::error::{bail, Result};
use crate::metrics::MetricsRow;

/// One noise-baseline cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpCsvRow {
    pub seed: u64,
    pub partition: usize,
    pub multiplier: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "A_base")]
    pub a_base: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "R")]
    pub r: f64,
}

/// Logs of one run directory.
#[derive(Debug, Clone, Default)]
pub struct RunData {
    pub run_id: String,
    pub model: String,
    pub metrics: Vec<MetricsRow>,
    pub dp: Vec<DpCsvRow>,
    pub episodes: Vec<EpisodeRecord>,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<T>, _> = r.deserialize().collect();
    Ok(rows?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl RunData {
    /// Reads whichever of `metrics.csv`, `dp.csv` and `episodes.csv` exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let run_id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let model = match fs::read_to_string(dir.join("config.json")) {
            Ok(text) => super::config::RunConfig::from_json(&text)?
                .model_name()
                .to_string(),
            Err(_) => run_id.clone(),
        };
        let opt = |name: &str| dir.join(name).is_file().then(|| dir.join(name));
        Ok(RunData {
            run_id,
            model,
            metrics: opt("metrics.csv")
                .map(|p| read_csv(&p))
                .transpose()?
                .unwrap_or_default(),
            dp: opt("dp.csv")
                .map(|p| read_csv(&p))
                .transpose()?
                .unwrap_or_default(),
            episodes: opt("episodes.csv")
                .map(|p| read_csv(&p))
                .transpose()?
                .unwrap_or_default(),
        })
    }
}

/// `(x - reference) / reference`.
pub fn relative_gain(x: f64, reference: f64) -> Option<f64> {
    (reference != 0.0 && reference.is_finite()).then(|| (x - reference) / reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub model: String,
    pub strategy: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub d_grid_r: Option<f64>,
    pub d_grid_p: Option<f64>,
    pub d_dp_r: Option<f64>,
    pub d_dp_p: Option<f64>,
}

struct Pick {
    strategy: String,
    a: f64,
    p: f64,
    s: f64,
    r: f64,
}

/// Mean over seeds of each seed's highest-reward row.
fn best_per_seed(rows: &[&MetricsRow]) -> Option<Pick> {
    let mut by_seed: BTreeMap<u64, &MetricsRow> = BTreeMap::new();
    for r in rows {
        let e = by_seed.entry(r.seed).or_insert(r);
        if r.r > e.r {
            *e = r;
        }
    }
    let n = by_seed.len() as f64;
    let first = by_seed.values().next()?;
    let mean = |f: fn(&MetricsRow) -> f64| by_seed.values().map(|r| f(r)).sum::<f64>() / n;
    Some(Pick {
        strategy: first.strategy.clone(),
        a: mean(|r| r.a),
        p: mean(|r| r.p),
        s: mean(|r| r.s),
        r: mean(|r| r.r),
    })
}

/// The noise group with the highest mean reward, then its best partition.
pub fn select_dp(rows: &[DpCsvRow]) -> Option<(f64, usize)> {
    let mut groups: BTreeMap<(u64, usize), Vec<&DpCsvRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.multiplier.to_bits(), r.partition))
            .or_default()
            .push(r);
    }
    let mean_r = |v: &[&DpCsvRow]| v.iter().map(|r| r.r).sum::<f64>() / v.len() as f64;
    let mut mults: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for ((m, _), v) in &groups {
        mults.entry(*m).or_default().push(mean_r(v));
    }
    let (m, _) = mults
        .iter()
        .map(|(m, rs)| (*m, rs.iter().sum::<f64>() / rs.len() as f64))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))?;
    let (_, p) = groups
        .iter()
        .filter(|((gm, _), _)| *gm == m)
        .map(|((_, p), v)| (mean_r(v), *p))
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))?;
    Some((f64::from_bits(m), p))
}

fn dp_pick(rows: &[DpCsvRow]) -> Option<(Pick, f64)> {
    let (m, p) = select_dp(rows)?;
    let sel: Vec<&DpCsvRow> = rows
        .iter()
        .filter(|r| r.multiplier == m && r.partition == p)
        .collect();
    let n = sel.len() as f64;
    let mean = |f: fn(&DpCsvRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
    Some((
        Pick {
            strategy: format!("P:{p}"),
            a: mean(|r| r.a),
            p: mean(|r| r.p),
            s: mean(|r| r.s),
            r: mean(|r| r.r),
        },
        m,
    ))
}

/// One row per (method, model); search rows carry gains relative to the grid
/// and noise baselines of the same model.
pub fn summarize(runs: &[RunData]) -> Result<Vec<SummaryRow>> {
    let mut picks: BTreeMap<(String, String), Pick> = BTreeMap::new();
    let mut grouped: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for run in runs {
        for m in run.metrics.iter().filter(|m| m.method != "dp") {
            grouped
                .entry((m.method.clone(), run.model.clone()))
                .or_default()
                .push(m);
        }
    }
    for (k, rows) in &grouped {
        if let Some(p) = best_per_seed(rows) {
            picks.insert(k.clone(), p);
        }
    }
    let mut dp_rows: BTreeMap<String, Vec<DpCsvRow>> = BTreeMap::new();
    for run in runs {
        dp_rows
            .entry(run.model.clone())
            .or_default()
            .extend(run.dp.iter().cloned());
    }
    for (model, rows) in &dp_rows {
        if let Some((p, m)) = dp_pick(rows) {
            picks.insert((format!("dp-x{m}"), model.clone()), p);
        }
    }
    if picks.is_empty() {
        bail!(Data, "no metric rows to summarize");
    }
    let mut out = Vec::new();
    for ((method, model), p) in &picks {
        let mut row = SummaryRow {
            method: method.clone(),
            model: model.clone(),
            strategy: p.strategy.clone(),
            a: p.a,
            p: p.p,
            s: p.s,
            r: p.r,
            d_grid_r: None,
            d_grid_p: None,
            d_dp_r: None,
            d_dp_p: None,
        };
        if method == "rl" {
            if let Some(g) = picks.get(&("grid".to_string(), model.clone())) {
                row.d_grid_r = relative_gain(p.r, g.r);
                row.d_grid_p = relative_gain(p.p, g.p);
            }
            if let Some((_, d)) = picks
                .iter()
                .find(|((m, md), _)| m.starts_with("dp-") && md == model)
            {
                row.d_dp_r = relative_gain(p.r, d.r);
                row.d_dp_p = relative_gain(p.p, d.p);
            }
        }
        out.push(row);
    }
    Ok(out)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_default()
}

/// Markdown table; gain columns appear only when some row has one.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let with_grid = rows.iter().any(|r| r.d_grid_r.is_some());
    let with_dp = rows.iter().any(|r| r.d_dp_r.is_some());
    let mut head = vec!["method", "model", "strategy", "A", "P", "S", "R"];
    if with_grid {
        head.extend(["dR vs grid", "dP vs grid"]);
    }
    if with_dp {
        head.extend(["dR vs dp", "dP vs dp"]);
    }
    let mut s = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
    for r in rows {
        let mut cells = vec![
            r.method.clone(),
            r.model.clone(),
            r.strategy.clone(),
            format!("{:.4}", r.a),
            format!("{:.4}", r.p),
            format!("{:.4}", r.s),
            format!("{:.4}", r.r),
        ];
        if with_grid {
            cells.extend([pct(r.d_grid_r), pct(r.d_grid_p)]);
        }
        if with_dp {
            cells.extend([pct(r.d_dp_r), pct(r.d_dp_p)]);
        }
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A minimal SVG line chart.
pub fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let pts = series.iter().flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
        H - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (v, anchor, y) in [(y0, "end", sy(y0)), (y1, "end", sy(y1))] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="{anchor}" font-size="10">{:.3}</text>"#,
            M - 4.0,
            y + 3.0,
            v
        );
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            x,
            H - M + 14.0,
            v
        );
    }
    for (i, (name, v)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let points: Vec<String> = v
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{c}">{}</text>"#,
            W - M - 140.0,
            M + 14.0 * (i as f64 + 1.0),
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per-seed series of `f` averaged over rollouts, smoothed with a trailing window.
pub fn episode_series(
    episodes: &[EpisodeRecord],
    f: fn(&EpisodeRecord) -> f64,
    window: usize,
) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut by_seed: BTreeMap<u64, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for e in episodes {
        by_seed
            .entry(e.seed)
            .or_default()
            .entry(e.episode)
            .or_default()
            .push(f(e));
    }
    by_seed
        .into_iter()
        .map(|(seed, eps)| {
            let raw: Vec<(f64, f64)> = eps
                .into_iter()
                .map(|(k, v)| (k as f64, v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            let smooth = raw
                .iter()
                .enumerate()
                .map(|(i, (x, _))| {
                    let lo = (i + 1).saturating_sub(window.max(1));
                    let w = &raw[lo..=i];
                    (*x, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64)
                })
                .collect();
            (format!("seed {seed}"), smooth)
        })
        .collect()
}

/// Writes `summary.md`, `summary.csv` and, when episode logs exist,
/// `reward.svg` and `privacy.svg` into `out`.
pub fn emit_report(run_dirs: &[&Path], out: &Path) -> Result<Vec<SummaryRow>> {
    let runs: Vec<RunData> = run_dirs
        .iter()
        .map(|d| RunData::load(d))
        .collect::<Result<_>>()?;
    let rows = summarize(&runs)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("summary.md"), render_table(&rows))?;
    write_csv(&out.join("summary.csv"), &rows)?;
    let episodes: Vec<EpisodeRecord> = runs
        .iter()
        .flat_map(|r| r.episodes.iter().cloned())
        .collect();
    if !episodes.is_empty() {
        let reward = episode_series(&episodes, |e| e.r, 10);
        fs::write(
            out.join("reward.svg"),
            line_plot_svg("Reward per episode", "episode", "R", &reward),
        )?;
        let privacy = episode_series(&episodes, |e| e.p, 10);
        fs::write(
            out.join("privacy.svg"),
            line_plot_svg("Privacy loss per episode", "episode", "P", &privacy),
        )?;
    }
    Ok(rows)
}
