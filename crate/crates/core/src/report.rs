//! Baseline comparison tables: absolute and relative Top-1 differences
//! against a video and a skeleton baseline.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub top1: f64,
    /// `top1 − video`; `None` on the video baseline's own row.
    pub delta_v: Option<f64>,
    /// `100 · delta_v / video`.
    pub rel_v: Option<f64>,
    pub delta_s: Option<f64>,
    pub rel_s: Option<f64>,
}

/// Rounds half away from zero at `decimals` places. A relative nudge of a few
/// ulps lets decimal ties such as `1.005` (stored as `1.00499…`) round up as
/// printed tables do.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    let scaled = x.abs() * f;
    let r = (scaled * (1.0 + 8.0 * f64::EPSILON) + 0.5).floor();
    (r / f).copysign(x)
}

/// Snaps a percentage to the nearest `100·k/n`.
pub fn snap_to_eval_size(top1: f64, n: usize) -> f64 {
    let k = (top1 / 100.0 * n as f64).round();
    100.0 * k / n as f64
}

/// One row per method, sorted by Top-1 descending (ties by name).
///
/// With `eval_size = Some(n)` every Top-1 is first snapped to the nearest
/// `k/n`, undoing the two-decimal rounding of the inputs before differences
/// are taken. All output values are rounded to two decimals.
pub fn build_comparison_table(
    results: &[(String, f64)],
    video_baseline: &str,
    skeleton_baseline: &str,
    eval_size: Option<usize>,
) -> Result<Vec<ComparisonRow>> {
    let mut seen = BTreeSet::new();
    for (name, v) in results {
        if !seen.insert(name.as_str()) {
            return Err(Error::Parse(format!("duplicate method {name:?}")));
        }
        if !v.is_finite() {
            return Err(Error::Parse(format!("{name}: non-finite top1")));
        }
    }
    if eval_size == Some(0) {
        return Err(Error::InvalidConfig("eval_size must be >= 1".into()));
    }
    let exact = |v: f64| eval_size.map_or(v, |n| snap_to_eval_size(v, n));
    let lookup = |name: &str| {
        results
            .iter()
            .find(|(m, _)| m == name)
            .map(|&(_, v)| exact(v))
            .ok_or_else(|| Error::MissingBaseline(name.to_string()))
    };
    let video = lookup(video_baseline)?;
    let skel = lookup(skeleton_baseline)?;
    let compare = |v: f64, base: f64, own: bool| {
        if own {
            return (None, None);
        }
        let delta = v - base;
        let rel = if base == 0.0 {
            None
        } else {
            Some(round_half_up(100.0 * delta / base, 2))
        };
        (Some(round_half_up(delta, 2)), rel)
    };
    let mut rows: Vec<ComparisonRow> = results
        .iter()
        .map(|(name, v)| {
            let x = exact(*v);
            let (delta_v, rel_v) = compare(x, video, name == video_baseline);
            let (delta_s, rel_s) = compare(x, skel, name == skeleton_baseline);
            ComparisonRow {
                method: name.clone(),
                top1: round_half_up(x, 2),
                delta_v,
                rel_v,
                delta_s,
                rel_s,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.top1
            .total_cmp(&a.top1)
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(rows)
}

/// Parses `method,top1` lines; a header line is optional.
pub fn parse_results_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((name, value)) = line.rsplit_once(',') else {
            return Err(Error::Parse(format!(
                "line {}: expected `method,top1`",
                i + 1
            )));
        };
        let (name, value) = (name.trim(), value.trim());
        if i == 0 && value.eq_ignore_ascii_case("top1") {
            continue;
        }
        if name.is_empty() {
            return Err(Error::Parse(format!("line {}: empty method name", i + 1)));
        }
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad top1 {value:?}", i + 1)))?;
        out.push((name.to_string(), v));
    }
    Ok(out)
}

fn signed(v: Option<f64>, suffix: &str) -> String {
    match v {
        Some(0.0) => format!("0.00{suffix}"),
        Some(v) => format!("{v:+.2}{suffix}"),
        None => "-".to_string(),
    }
}

/// Tab-separated table with the columns
/// `method top1 delta_v Delta_v delta_s Delta_s`.
pub fn format_table_tsv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("method\ttop1\tdelta_v\tDelta_v\tdelta_s\tDelta_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.2}\t{}\t{}\t{}\t{}",
            r.method,
            r.top1,
            signed(r.delta_v, ""),
            signed(r.rel_v, "%"),
            signed(r.delta_s, ""),
            signed(r.rel_s, "%"),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn results(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|&(n, v)| (n.to_string(), v)).collect()
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(10.165, 2), 10.17);
        assert_eq!(round_half_up(-10.165, 2), -10.17);
        assert_eq!(round_half_up(1.005, 2), 1.01);
        assert_eq!(round_half_up(61.904761904, 2), 61.90);
        assert_eq!(round_half_up(0.0, 2), 0.0);
    }

    #[test]
    fn small_average_row() {
        let rows = build_comparison_table(
            &results(&[("Average", 60.95), ("Video", 48.57), ("Skeleton", 32.38)]),
            "Video",
            "Skeleton",
            None,
        )
        .unwrap();
        let avg = &rows[0];
        assert_eq!(avg.method, "Average");
        assert_eq!(avg.delta_v, Some(12.38));
        assert_eq!(avg.rel_v, Some(25.49));
    }

    #[test]
    fn tiny_average_row_unsnapped() {
        let rows = build_comparison_table(
            &results(&[("Average", 61.90), ("Video", 56.19), ("Skeleton", 26.67)]),
            "Video",
            "Skeleton",
            None,
        )
        .unwrap();
        assert_eq!(rows[0].delta_v, Some(5.71));
        assert!((rows[0].rel_v.unwrap() - 10.17).abs() <= 0.02);
    }

    #[test]
    fn baseline_rows_have_blanks_and_self_comparison_is_zero() {
        let rows = build_comparison_table(
            &results(&[("V", 50.0), ("S", 25.0), ("Copy", 50.0)]),
            "V",
            "S",
            None,
        )
        .unwrap();
        let v = rows.iter().find(|r| r.method == "V").unwrap();
        assert_eq!((v.delta_v, v.rel_v), (None, None));
        assert_eq!(v.delta_s, Some(25.0));
        let c = rows.iter().find(|r| r.method == "Copy").unwrap();
        assert_eq!((c.delta_v, c.rel_v), (Some(0.0), Some(0.0)));
        // Tie on top1 broken by name.
        assert_eq!(rows[0].method, "Copy");
        assert_eq!(rows[1].method, "V");
    }

    #[test]
    fn missing_baseline() {
        let r = results(&[("A", 1.0), ("V", 2.0)]);
        assert!(matches!(
            build_comparison_table(&r, "V", "S", None),
            Err(Error::MissingBaseline(s)) if s == "S"
        ));
    }

    #[test]
    fn snapping() {
        assert!((snap_to_eval_size(61.90, 105) - 6500.0 / 105.0).abs() < 1e-12);
        assert!((snap_to_eval_size(26.67, 105) - 2800.0 / 105.0).abs() < 1e-12);
    }

    #[test]
    fn csv_and_tsv() {
        let parsed = parse_results_csv("method,top1\nAverage,61.90\n\nVideo, 56.19\n").unwrap();
        assert_eq!(parsed, results(&[("Average", 61.90), ("Video", 56.19)]));
        assert!(parse_results_csv("Average;61.9").is_err());
        assert!(parse_results_csv("Average,abc").is_err());

        let rows = build_comparison_table(
            &results(&[("Average", 61.90), ("Video", 56.19), ("Skeleton", 26.67)]),
            "Video",
            "Skeleton",
            Some(105),
        )
        .unwrap();
        let tsv = format_table_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "method\ttop1\tdelta_v\tDelta_v\tdelta_s\tDelta_s");
        assert_eq!(lines[1], "Average\t61.90\t+5.71\t+10.17%\t+35.24\t+132.14%");
        assert_eq!(lines[2], "Video\t56.19\t-\t-\t+29.52\t+110.71%");
        assert_eq!(lines[3], "Skeleton\t26.67\t-29.52\t-52.54%\t-\t-");
    }
}
