//! Result tables as CSV and JSON, and static SVG line charts drawn from them.
//! Every writer is a pure function of its rows; column orders are fixed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::adaptation::AdaptRow;
use crate::error::{Error, Result};
use crate::fad::FadResult;
use crate::labels::{Emotion, Task};
use crate::probe::SweepRow;

pub const PROBE_COLUMNS: [&str; 12] = [
    "model_tag",
    "task",
    "layer",
    "val_ua",
    "test_ua",
    "recall_neutral",
    "recall_calm",
    "recall_happy",
    "recall_sad",
    "recall_angry",
    "recall_fearful",
    "epoch_of_best",
];

pub const SUMMARY_COLUMNS: [&str; 5] = ["model_tag", "task", "statistic", "ua", "layers"];

pub const ADAPT_COLUMNS: [&str; 10] = [
    "model_tag",
    "approach",
    "source_task",
    "target_task",
    "seed",
    "trainable_params",
    "stage_one_ua",
    "stage_two_ua",
    "scratch_target_ua",
    "error",
];

pub const FAD_COLUMNS: [&str; 7] = ["model_tag", "layer", "emotion", "fad", "n_speech", "n_music", "error"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn probe_csv(rows: &[SweepRow]) -> Result<String> {
    csv_table(
        &PROBE_COLUMNS,
        rows.iter().map(|r| {
            let mut out = vec![
                r.model_tag.clone(),
                r.task.to_string(),
                r.layer.to_string(),
                r.val_ua.to_string(),
                r.test_ua.to_string(),
            ];
            out.extend((0..Emotion::ALL.len()).map(|c| opt(r.recall.get(c).copied().flatten())));
            out.push(opt(r.epoch_of_best));
            out
        }),
    )
}

/// Best, worst and mean test UA over layers for one model and task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub model_tag: String,
    pub task: Task,
    pub best_ua: f64,
    /// 1-based layers reaching `best_ua`, ascending.
    pub best_layers: Vec<usize>,
    pub worst_ua: f64,
    pub worst_layers: Vec<usize>,
    pub mean_ua: f64,
}

/// One summary per (model_tag, task), sorted by both.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<ProbeSummary> {
    let mut groups: BTreeMap<(String, Task), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.model_tag.clone(), r.task)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model_tag, task), mut rs)| {
            rs.sort_by_key(|r| r.layer);
            let best = rs.iter().map(|r| r.test_ua).fold(f64::NEG_INFINITY, f64::max);
            let worst = rs.iter().map(|r| r.test_ua).fold(f64::INFINITY, f64::min);
            let layers_at = |v: f64| rs.iter().filter(|r| r.test_ua == v).map(|r| r.layer).collect();
            ProbeSummary {
                model_tag,
                task,
                best_ua: best,
                best_layers: layers_at(best),
                worst_ua: worst,
                worst_layers: layers_at(worst),
                mean_ua: rs.iter().map(|r| r.test_ua).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect()
}

fn join_layers(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn summary_csv(summaries: &[ProbeSummary]) -> Result<String> {
    csv_table(
        &SUMMARY_COLUMNS,
        summaries.iter().flat_map(|s| {
            let row = |stat: &str, ua: f64, layers: String| {
                vec![
                    s.model_tag.clone(),
                    s.task.to_string(),
                    stat.to_string(),
                    ua.to_string(),
                    layers,
                ]
            };
            [
                row("Best", s.best_ua, join_layers(&s.best_layers)),
                row("Worst", s.worst_ua, join_layers(&s.worst_layers)),
                row("Mean", s.mean_ua, String::new()),
            ]
        }),
    )
}

pub fn adapt_csv(rows: &[AdaptRow]) -> Result<String> {
    csv_table(
        &ADAPT_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.model_tag.clone(),
                r.approach.to_string(),
                r.source_task.to_string(),
                r.target_task.to_string(),
                r.seed.to_string(),
                opt(r.trainable_params),
                opt(r.stage_one_ua),
                opt(r.stage_two_ua),
                opt(r.scratch_target_ua),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn fad_csv(rows: &[FadResult]) -> Result<String> {
    csv_table(
        &FAD_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.model_tag.clone(),
                r.layer.to_string(),
                r.emotion.clone(),
                opt(r.fad),
                r.n_speech.to_string(),
                r.n_music.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn to_json<T: Serialize + ?Sized>(rows: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(rows)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y)`; a missing `y` breaks the line.
    pub points: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Integer x positions, drawn as ticks in this order.
    pub x_ticks: Vec<usize>,
    pub series: Vec<Series>,
}

/// Test UA per layer, one line per model.
pub fn probe_chart(rows: &[SweepRow], task: Task) -> LineChart {
    let mut by_model: BTreeMap<&str, Vec<(usize, Option<f64>)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.task == task) {
        by_model
            .entry(&r.model_tag)
            .or_default()
            .push((r.layer, Some(r.test_ua)));
    }
    let mut ticks: Vec<usize> = rows.iter().filter(|r| r.task == task).map(|r| r.layer).collect();
    ticks.sort_unstable();
    ticks.dedup();
    LineChart {
        title: format!("{task} layerwise probe"),
        x_label: "layer".into(),
        y_label: "test UA".into(),
        x_ticks: ticks,
        series: by_model
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by_key(|p| p.0);
                Series {
                    name: name.to_string(),
                    points,
                }
            })
            .collect(),
    }
}

/// FAD per layer for one model, one line per emotion subset in sweep order.
pub fn fad_chart(rows: &[FadResult], model_tag: &str) -> LineChart {
    let mine: Vec<&FadResult> = rows.iter().filter(|r| r.model_tag == model_tag).collect();
    let mut names: Vec<&str> = Vec::new();
    for r in &mine {
        if !names.contains(&r.emotion.as_str()) {
            names.push(&r.emotion);
        }
    }
    let mut ticks: Vec<usize> = mine.iter().map(|r| r.layer).collect();
    ticks.sort_unstable();
    ticks.dedup();
    LineChart {
        title: format!("{model_tag} cross-domain FAD"),
        x_label: "layer".into(),
        y_label: "FAD".into(),
        x_ticks: ticks,
        series: names
            .into_iter()
            .map(|name| {
                let mut points: Vec<(usize, Option<f64>)> = mine
                    .iter()
                    .filter(|r| r.emotion == name)
                    .map(|r| (r.layer, r.fad))
                    .collect();
                points.sort_by_key(|p| p.0);
                Series {
                    name: name.to_string(),
                    points,
                }
            })
            .collect(),
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#000000", "#e377c2",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders the chart as a standalone SVG document.
pub fn render_svg(chart: &LineChart) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 64.0;
    const RIGHT: f64 = 150.0;
    const TOP: f64 = 36.0;
    const BOTTOM: f64 = 48.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;

    let ys: Vec<f64> = chart
        .series
        .iter()
        .flat_map(|s| s.points.iter().filter_map(|p| p.1))
        .filter(|y| y.is_finite())
        .collect();
    let (mut y_min, mut y_max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
        (lo.min(y), hi.max(y))
    });
    if ys.is_empty() {
        (y_min, y_max) = (0.0, 1.0);
    } else if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    } else {
        let pad = 0.05 * (y_max - y_min);
        y_min -= pad;
        y_max += pad;
    }
    let n_ticks = chart.x_ticks.len().max(1);
    let x_pos = |x: usize| {
        let i = chart.x_ticks.iter().position(|&t| t == x).unwrap_or(0);
        if n_ticks == 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (n_ticks - 1) as f64
        }
    };
    let y_pos = |y: f64| TOP + plot_h * (1.0 - (y - y_min) / (y_max - y_min));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for &t in &chart.x_ticks {
        let x = x_pos(t);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#,
            TOP + plot_h + 16.0
        );
    }
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y_pos(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - 10.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&chart.y_label)
    );

    for (k, series) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<g data-series="{}" stroke="{color}" fill="{color}">"#,
            escape(&series.name)
        );
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, s: &mut String| {
            if segment.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke-width="2" points="{}"/>"#,
                    segment.join(" ")
                );
            }
            segment.clear();
        };
        for &(x, y) in &series.points {
            match y.filter(|v| v.is_finite()) {
                Some(y) => {
                    let (px, py) = (x_pos(x), y_pos(y));
                    segment.push(format!("{px:.1},{py:.1}"));
                    let _ = writeln!(s, r#"<circle cx="{px:.1}" cy="{py:.1}" r="2.5"/>"#);
                }
                None => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
        let ly = TOP + 12.0 + 18.0 * k as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke-width="2"/><text x="{:.1}" y="{:.1}" stroke="none">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&series.name)
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::Approach;

    fn sweep_row(tag: &str, layer: usize, ua: f64) -> SweepRow {
        SweepRow {
            model_tag: tag.into(),
            task: Task::Ser,
            layer,
            val_ua: ua,
            test_ua: ua,
            recall: vec![Some(ua), None, Some(1.0), Some(0.0), Some(0.5), Some(0.25)],
            epoch_of_best: Some(layer),
        }
    }

    #[test]
    fn probe_csv_columns_and_empty_cells() {
        let csv = probe_csv(&[sweep_row("m", 1, 0.5)]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), PROBE_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "m,SER,1,0.5,0.5,0.5,,1,0,0.5,0.25,1");
    }

    #[test]
    fn summary_joins_tied_layers() {
        let rows = [
            sweep_row("m", 1, 0.2),
            sweep_row("m", 4, 0.9),
            sweep_row("m", 5, 0.9),
            sweep_row("m", 3, 0.2),
            sweep_row("m", 2, 0.5),
        ];
        let s = summarize_sweep(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].best_layers, vec![4, 5]);
        assert_eq!(s[0].worst_layers, vec![1, 3]);
        assert!((s[0].mean_ua - 0.54).abs() < 1e-12);
        let csv = summary_csv(&s).unwrap();
        assert!(csv.contains("m,SER,Best,0.9,4;5\n"));
        assert!(csv.contains("m,SER,Worst,0.2,1;3\n"));
        assert!(csv.contains("m,SER,Mean,"));
    }

    #[test]
    fn adapt_and_fad_tables() {
        let row = AdaptRow {
            model_tag: "m".into(),
            approach: Approach::Peft,
            source_task: Task::Mer,
            target_task: Task::Ser,
            seed: 7,
            trainable_params: Some(12),
            stage_one_ua: Some(0.75),
            stage_two_ua: None,
            scratch_target_ua: None,
            error: Some("no, really".into()),
        };
        let csv = adapt_csv(&[row]).unwrap();
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            r#"m,peft,MER,SER,7,12,0.75,,,"no, really""#
        );
        let fad = FadResult {
            model_tag: "m".into(),
            layer: 2,
            emotion: "all".into(),
            fad: Some(1.5),
            n_speech: 3,
            n_music: 4,
            error: None,
        };
        let csv = fad_csv(&[fad]).unwrap();
        assert_eq!(csv, format!("{}\nm,2,all,1.5,3,4,\n", FAD_COLUMNS.join(",")));
    }

    #[test]
    fn svg_is_deterministic_and_breaks_on_gaps() {
        let chart = LineChart {
            title: "a<b".into(),
            x_label: "layer".into(),
            y_label: "v".into(),
            x_ticks: vec![1, 2, 3, 4],
            series: vec![
                Series {
                    name: "one".into(),
                    points: vec![(1, Some(1.0)), (2, Some(2.0)), (3, None), (4, Some(0.0))],
                },
                Series {
                    name: "flat".into(),
                    points: vec![(1, Some(1.0)), (2, Some(1.0)), (3, Some(1.0)), (4, Some(1.0))],
                },
            ],
        };
        let a = render_svg(&chart);
        assert_eq!(a, render_svg(&chart));
        assert!(a.contains("a&lt;b"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert_eq!(a.matches("<circle").count(), 7);
        assert!(a.contains(r#"data-series="flat""#));
    }

    #[test]
    fn charts_follow_tables() {
        let rows = [sweep_row("b", 2, 0.4), sweep_row("a", 1, 0.3), sweep_row("a", 2, 0.6)];
        let c = probe_chart(&rows, Task::Ser);
        assert_eq!(c.x_ticks, vec![1, 2]);
        assert_eq!(c.series[0].name, "a");
        assert_eq!(c.series[0].points, vec![(1, Some(0.3)), (2, Some(0.6))]);
        assert!(probe_chart(&rows, Task::Mer).series.is_empty());
    }
}
