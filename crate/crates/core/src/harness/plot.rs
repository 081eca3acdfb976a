//! Learning curves aggregated across seeds: mean and population standard
//! deviation of every `success_*` column at matching env steps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::MetricsTable;
use crate::error::{Error, Result};

/// One aggregated point of one evaluation condition.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatePoint {
    pub env_step: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    /// `(condition, series)` with conditions in column order (`all` first).
    pub conditions: Vec<(String, Vec<AggregatePoint>)>,
    pub warnings: Vec<String>,
}

/// Linear interpolation of `series` at `x`, clamped to its end points.
fn interpolate(series: &[(f64, f64)], x: f64) -> f64 {
    let i = series.partition_point(|&(s, _)| s < x);
    if i == 0 {
        return series[0].1;
    }
    if i == series.len() {
        return series[i - 1].1;
    }
    let (x0, y0) = series[i - 1];
    let (x1, y1) = series[i];
    if x1 == x {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Aggregate across runs. If the runs were evaluated on different step
/// grids, every run is resampled onto the grid with the fewest points and a
/// warning is recorded.
pub fn aggregate(tables: &[MetricsTable]) -> Result<Aggregate> {
    let first = tables.first().ok_or_else(|| Error::InvalidArgument("no metrics files given".into()))?;
    let conditions: Vec<String> = first
        .columns
        .iter()
        .filter_map(|c| c.strip_prefix("success_").map(String::from))
        .collect();
    let mut out = Aggregate {
        conditions: Vec::new(),
        warnings: Vec::new(),
    };
    for cond in conditions {
        let column = format!("success_{cond}");
        let series: Vec<Vec<(f64, f64)>> = tables.iter().map(|t| t.series(&column)).collect();
        if series.iter().any(Vec::is_empty) {
            out.warnings.push(format!("condition `{cond}` is missing from some runs; skipped"));
            continue;
        }
        let grid: Vec<f64> = series.iter().min_by_key(|s| s.len()).unwrap().iter().map(|p| p.0).collect();
        let aligned = series.iter().all(|s| s.len() == grid.len() && s.iter().zip(&grid).all(|(p, &g)| p.0 == g));
        if !aligned {
            out.warnings.push(format!(
                "condition `{cond}`: evaluation steps differ across runs; resampled onto the coarsest grid ({} points)",
                grid.len()
            ));
        }
        let points = grid
            .iter()
            .map(|&x| {
                let vals: Vec<f64> = series.iter().map(|s| interpolate(s, x)).collect();
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                AggregatePoint {
                    env_step: x,
                    mean,
                    std: var.sqrt(),
                    n,
                }
            })
            .collect();
        out.conditions.push((cond, points));
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}

/// Tidy CSV: `condition,env_step,mean,std,n`.
pub fn tidy_csv(agg: &Aggregate) -> String {
    let mut s = String::from("condition,env_step,mean,std,n\n");
    for (cond, pts) in &agg.conditions {
        for p in pts {
            writeln!(s, "{cond},{},{},{},{}", p.env_step, p.mean, p.std, p.n).unwrap();
        }
    }
    s
}

/// Final-point summary: `condition,env_step,mean,std`.
pub fn summary_csv(agg: &Aggregate) -> String {
    let mut s = String::from("condition,env_step,mean,std\n");
    for (cond, pts) in &agg.conditions {
        if let Some(p) = pts.last() {
            writeln!(s, "{cond},{},{},{}", p.env_step, p.mean, p.std).unwrap();
        }
    }
    s
}

/// One SVG panel: mean success against env steps with a ±1 std band.
pub fn svg_panel(title: &str, pts: &[AggregatePoint]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let xmax = pts.iter().map(|p| p.env_step).fold(1.0f64, f64::max);
    let px = |x: f64| m + (w - 2.0 * m) * x / xmax;
    let py = |y: f64| h - m - (h - 2.0 * m) * y.clamp(0.0, 1.0);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, w / 2.0).unwrap();
    writeln!(
        s,
        r#"<path d="M{m},{} V{} H{}" fill="none" stroke="black"/>"#,
        m,
        h - m,
        w - m
    )
    .unwrap();
    for tick in [0.0, 0.5, 1.0] {
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{tick}</text>"#,
            m - 4.0,
            py(tick) + 3.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{xmax}</text>"#,
        w - m,
        h - m + 14.0
    )
    .unwrap();
    if !pts.is_empty() {
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.env_step), py(p.mean + p.std))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.env_step), py(p.mean - p.std))).collect();
        writeln!(s, r##"<polygon points="{} {}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##, upper.join(" "), lower.join(" ")).unwrap();
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.env_step), py(p.mean))).collect();
        writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, line.join(" ")).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Read metrics files, write `curves.csv`, `summary.csv` and one
/// `success_<condition>.svg` per condition into `out`.
pub fn plot_export(files: &[PathBuf], out: &Path) -> Result<Aggregate> {
    let tables = files.iter().map(|f| MetricsTable::read(f)).collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&tables)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: String, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("curves.csv".into(), tidy_csv(&agg))?;
    write("summary.csv".into(), summary_csv(&agg))?;
    for (cond, pts) in &agg.conditions {
        write(format!("success_{cond}.svg"), svg_panel(&format!("success rate: {cond}"), pts))?;
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(f64, f64)]) -> MetricsTable {
        let mut text = String::from("env_step,success_all\n");
        for (s, v) in rows {
            text.push_str(&format!("{s},{v}\n"));
        }
        MetricsTable::parse(&text).unwrap()
    }

    #[test]
    fn single_seed_has_zero_band() {
        let agg = aggregate(&[table(&[(10.0, 0.2), (20.0, 0.6)])]).unwrap();
        let pts = &agg.conditions[0].1;
        assert!(pts.iter().all(|p| p.std == 0.0));
        assert_eq!(pts[1].mean, 0.6);
        assert!(agg.warnings.is_empty());
    }

    #[test]
    fn mismatched_grids_are_resampled_with_a_warning() {
        let a = table(&[(10.0, 0.0), (20.0, 1.0), (30.0, 1.0)]);
        let b = table(&[(15.0, 0.5), (30.0, 0.5)]);
        let agg = aggregate(&[a, b]).unwrap();
        assert_eq!(agg.warnings.len(), 1);
        let pts = &agg.conditions[0].1;
        assert_eq!(pts.iter().map(|p| p.env_step).collect::<Vec<_>>(), vec![15.0, 30.0]);
        // a(15) interpolates to 0.5.
        assert_eq!(pts[0].mean, 0.5);
        assert_eq!(pts[1].mean, 0.75);
        assert_eq!(pts[1].std, 0.25);
    }

    #[test]
    fn svg_panel_draws_band_and_curve() {
        let pts = vec![AggregatePoint {
            env_step: 5.0,
            mean: 0.5,
            std: 0.1,
            n: 2,
        }];
        let s = svg_panel("t", &pts);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("<polyline"));
    }
}
