//! CSV tables, parameter checkpoints and polyline SVG plots.
//!
//! Plots are rendered from CSV text only, so any SVG can be regenerated from
//! the CSV that sits next to it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{paired_compare, PairedComparison};
use crate::model::ModelSpec;
use crate::params::ParamVector;
use crate::protocol::{Mode, RunReport};

pub const METRICS_HEADER: &str =
    "held_out,round,warmup,source_val_loss,source_val_acc,l_cls_s,l_sim,l_dis,target_acc,target_f1,target_auc";
pub const SHA_LOG_HEADER: &str = "held_out,round,client,raw_score,post_dense_score,weight";
pub const TRAIN_TRACE_HEADER: &str = "held_out,client,round,batch,l_cls_g,l_dis,l_cls_s,l_sim";
pub const SWEEP_HEADER: &str = "param,value,acc,f1,auc";

const METRICS: [&str; 3] = ["acc", "f1", "auc"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-round summary, one row per (held-out domain, round).
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for fold in &report.folds {
        for r in &fold.rounds {
            let avg = |f: fn(&crate::protocol::ClientRoundMetrics) -> Option<f64>| {
                mean(&r.clients.iter().filter_map(f).collect::<Vec<_>>())
            };
            let t = r.target.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                fold.held_out,
                r.round,
                r.warmup,
                r.source_val_loss,
                r.source_val_acc,
                opt(avg(|c| Some(c.l_cls_s))),
                opt(avg(|c| c.l_sim)),
                opt(avg(|c| c.l_dis)),
                opt(t.map(|e| e.acc)),
                opt(t.map(|e| e.f1)),
                opt(t.and_then(|e| e.auc)),
            );
        }
    }
    out
}

/// Scores and aggregation weights per client and round. Warmup rounds have
/// no scores but still record their uniform weights.
pub fn sha_log_csv(report: &RunReport) -> String {
    let mut out = String::from(SHA_LOG_HEADER);
    out.push('\n');
    for fold in &report.folds {
        for r in &fold.rounds {
            for c in &r.clients {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    fold.held_out,
                    r.round,
                    c.client,
                    opt(c.raw_score),
                    opt(c.post_dense_score),
                    c.weight
                );
            }
        }
    }
    out
}

pub fn train_trace_csv(report: &RunReport) -> String {
    let mut out = String::from(TRAIN_TRACE_HEADER);
    out.push('\n');
    for fold in &report.folds {
        for r in &fold.rounds {
            for c in &r.clients {
                for b in &c.trace {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        fold.held_out,
                        c.client,
                        r.round,
                        b.batch,
                        opt(b.l_cls_g),
                        opt(b.l_dis),
                        b.l_cls_s,
                        opt(b.l_sim)
                    );
                }
            }
        }
    }
    out
}

/// Seed-aligned LODO reports of one mode.
#[derive(Clone, Debug)]
pub struct ModeRuns {
    pub mode: Mode,
    pub runs: Vec<RunReport>,
}

fn metric_of(report: &RunReport, metric: &str, domain: Option<usize>) -> Option<f64> {
    let pick = |acc: f64, f1: f64, auc: Option<f64>| match metric {
        "acc" => Some(acc),
        "f1" => Some(f1),
        _ => auc,
    };
    match domain {
        None => pick(report.average.acc, report.average.f1, report.average.auc),
        Some(d) => report
            .per_domain
            .iter()
            .find(|m| m.domain == d)
            .and_then(|m| pick(m.acc, m.f1, m.auc)),
    }
}

/// Paired accuracy comparisons of `a` against `b`: across seeds (per-seed
/// average accuracy) and across domains (seed-averaged per-domain accuracy).
/// `None` where fewer than three aligned pairs exist.
pub fn paired_accuracy(a: &ModeRuns, b: &ModeRuns) -> Result<(Option<PairedComparison>, Option<PairedComparison>)> {
    if a.runs.len() != b.runs.len() || a.runs.iter().zip(&b.runs).any(|(x, y)| x.seed != y.seed) {
        return Err(Error::InvalidArgument(format!(
            "runs of {} and {} are not seed-aligned",
            a.mode, b.mode
        )));
    }
    let seed_a: Vec<f64> = a.runs.iter().map(|r| r.average.acc).collect();
    let seed_b: Vec<f64> = b.runs.iter().map(|r| r.average.acc).collect();
    let by_seed = (seed_a.len() >= 3)
        .then(|| paired_compare(&seed_a, &seed_b))
        .transpose()?;
    let domains = domains_of(a);
    let dom = |m: &ModeRuns| -> Vec<f64> {
        domains
            .iter()
            .map(|&d| {
                mean(
                    &m.runs
                        .iter()
                        .filter_map(|r| metric_of(r, "acc", Some(d)))
                        .collect::<Vec<_>>(),
                )
                .unwrap_or(0.0)
            })
            .collect()
    };
    let by_domain = (domains.len() >= 3)
        .then(|| paired_compare(&dom(a), &dom(b)))
        .transpose()?;
    Ok((by_seed, by_domain))
}

fn domains_of(m: &ModeRuns) -> Vec<usize> {
    m.runs
        .first()
        .map(|r| r.per_domain.iter().map(|d| d.domain).collect())
        .unwrap_or_default()
}

const PAIRED_COLS: [&str; 5] = ["mean_diff", "wins", "losses", "ties", "sign_p"];

/// One row per mode: seed-averaged per-domain and average metrics, then
/// paired accuracy statistics of full FedDAG against that mode.
pub fn ablation_csv(modes: &[ModeRuns]) -> Result<String> {
    let full = modes
        .iter()
        .find(|m| m.mode == Mode::Feddag)
        .ok_or_else(|| Error::InvalidArgument("ablation needs a feddag row".into()))?;
    let domains = domains_of(full);
    let mut header = vec!["mode".to_string()];
    for metric in METRICS {
        header.extend(domains.iter().map(|d| format!("{metric}_d{d}")));
        header.push(format!("{metric}_avg"));
    }
    for pairing in ["seeds", "domains"] {
        header.extend(PAIRED_COLS.iter().map(|c| format!("vs_full_{pairing}_{c}")));
    }
    let mut out = header.join(",");
    out.push('\n');
    let mut warned = false;
    for m in modes {
        let mut row = vec![m.mode.label().to_string()];
        for metric in METRICS {
            for d in domains.iter().map(|&d| Some(d)).chain([None]) {
                let vals: Vec<f64> = m.runs.iter().filter_map(|r| metric_of(r, metric, d)).collect();
                row.push(opt(mean(&vals)));
            }
        }
        let (by_seed, by_domain) = if m.mode == Mode::Feddag {
            (None, None)
        } else {
            paired_accuracy(full, m)?
        };
        if by_seed.is_none() && m.mode != Mode::Feddag && !warned {
            log::warn!("fewer than 3 seeds; per-seed paired statistics omitted");
            warned = true;
        }
        for p in [by_seed, by_domain] {
            match p {
                Some(p) => row.extend([
                    p.mean_diff.to_string(),
                    p.wins.to_string(),
                    p.losses.to_string(),
                    p.ties.to_string(),
                    p.sign_test_p.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), PAIRED_COLS.len())),
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn sweep_csv(param: &str, rows: &[(String, RunReport)]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (value, r) in rows {
        let _ = writeln!(
            out,
            "{param},{value},{},{},{}",
            r.average.acc,
            r.average.f1,
            opt(r.average.auc)
        );
    }
    out
}

/// Serialized parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: ModelSpec,
    /// `"task"` or `"generator"`.
    pub role: String,
    pub round: usize,
    pub values: ParamVector,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        let expected = match c.role.as_str() {
            "task" => c.arch.task.param_count(),
            "generator" => c.arch.gen.param_count(),
            other => return Err(Error::InvalidArgument(format!("unknown checkpoint role `{other}`"))),
        };
        crate::error::check_dim("checkpoint values", expected, c.values.dim())?;
        Ok(c)
    }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Groups numeric `(x_col, y_col)` pairs from CSV text into one series per
/// distinct value of `group_col` (or a single series). Rows with an empty y
/// cell are skipped.
pub fn series_from_csv(csv_text: &str, x_col: &str, y_col: &str, group_col: Option<&str>) -> Result<Vec<Series>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("column `{name}` not in CSV")))
    };
    let (xi, yi) = (col(x_col)?, col(y_col)?);
    let gi = group_col.map(col).transpose()?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let y = &rec[yi];
        if y.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("non-numeric cell `{s}`")))
        };
        let key = gi.map(|g| rec[g].to_string()).unwrap_or_else(|| y_col.to_string());
        groups.entry(key).or_default().push((parse(&rec[xi])?, parse(y)?));
    }
    Ok(groups
        .into_iter()
        .map(|(name, points)| Series { name, points })
        .collect())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal line chart with axes, min/max tick labels and a legend.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for (v, x) in [(x0, left), (x1, left + pw)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            top + ph + 16.0,
            tick(v)
        );
    }
    for (v, y) in [(y0, top + ph), (y1, top)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 6.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `y_col` against `x_col` from CSV text, one line per `group_col` value.
pub fn plot_csv(csv_text: &str, x_col: &str, y_col: &str, group_col: Option<&str>, title: &str) -> Result<String> {
    let series = series_from_csv(csv_text, x_col, y_col, group_col)?;
    Ok(line_plot_svg(title, x_col, y_col, &series))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_grouping_skips_empty_cells() {
        let text = "g,x,y\na,1,0.5\na,2,\nb,1,0.25\nb,2,0.75\n";
        let s = series_from_csv(text, "x", "y", Some("g")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points, vec![(1.0, 0.5)]);
        assert_eq!(s[1].points, vec![(1.0, 0.25), (2.0, 0.75)]);
        assert!(series_from_csv(text, "x", "z", None).is_err());
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let text = "x,y\n0,1\n1,2\n";
        let a = plot_csv(text, "x", "y", None, "a < b").unwrap();
        assert_eq!(a, plot_csv(text, "x", "y", None, "a < b").unwrap());
        assert!(a.starts_with("<svg") && a.contains("a &lt; b") && a.contains("<polyline"));
    }

    #[test]
    fn empty_plot_is_still_valid() {
        let svg = line_plot_svg("t", "x", "y", &[]);
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn checkpoint_round_trip_checks_dims() {
        use crate::model::{Activation, GenArch, TaskArch};
        let arch = ModelSpec {
            task: TaskArch {
                input_dim: 2,
                hidden_dims: vec![],
                feature_dim: 2,
                num_classes: 2,
                activation: Activation::Relu,
            },
            gen: GenArch {
                input_dim: 2,
                hidden_dims: vec![],
            },
        };
        let c = Checkpoint {
            arch: arch.clone(),
            role: "task".into(),
            round: 3,
            values: ParamVector::filled(arch.task.param_count(), 0.5),
        };
        assert_eq!(Checkpoint::from_json(&c.to_json().unwrap()).unwrap(), c);
        let bad = Checkpoint {
            values: ParamVector::zeros(1),
            ..c.clone()
        };
        assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
        let role = Checkpoint {
            role: "critic".into(),
            ..c
        };
        assert!(Checkpoint::from_json(&role.to_json().unwrap()).is_err());
    }
}
