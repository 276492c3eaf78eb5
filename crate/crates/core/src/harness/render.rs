use std::fmt::Write;

use super::{HarnessError, MultiStepReport, SingleStepReport};
use crate::decode::Strategy;

fn strategy_label(s: Strategy) -> &'static str {
    match s {
        Strategy::Bs => "Beam search",
        Strategy::BsOpt => "Beam search optimized",
        Strategy::Hsbs => "HSBS",
        Strategy::Msbs => "MSBS",
    }
}

fn strategies(report: &SingleStepReport) -> Vec<Strategy> {
    let mut out = Vec::new();
    for c in &report.cells {
        if !out.contains(&c.strategy) {
            out.push(c.strategy);
        }
    }
    out
}

fn batch_sizes(report: &SingleStepReport) -> Vec<usize> {
    let mut out = Vec::new();
    for c in &report.cells {
        if !out.contains(&c.batch_size) {
            out.push(c.batch_size);
        }
    }
    out
}

/// Left column plus right-aligned columns.
fn table(title: &str, header: &[String], rows: &[(String, Vec<String>)]) -> String {
    let first = rows.iter().map(|r| r.0.len()).chain([title.len()]).max().unwrap_or(0);
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            rows.iter()
                .map(|r| r.1[j].len())
                .chain([header[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{title:<first$}");
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    let rule = first + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (name, cells) in rows {
        let _ = write!(out, "{name:<first$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Four panels: wall time, model calls, effective batch size, acceptance.
pub fn render_single_step(report: &SingleStepReport) -> String {
    if report.cells.is_empty() {
        return format!("no reactions decoded (K={})\n", report.beam_size);
    }
    let bs = batch_sizes(report);
    let header: Vec<String> = bs.iter().map(|b| format!("B={b}")).collect();
    let k = report.beam_size;
    let panel = |title: String, speculative_only: bool, f: &dyn Fn(&super::CellReport) -> String| {
        let rows: Vec<(String, Vec<String>)> = strategies(report)
            .into_iter()
            .filter(|s| !speculative_only || s.is_speculative())
            .map(|s| {
                let cells = bs
                    .iter()
                    .map(|&b| report.cell(s, b).map_or_else(|| "-".to_string(), f))
                    .collect();
                (strategy_label(s).to_string(), cells)
            })
            .collect();
        table(&title, &header, &rows)
    };
    let mut out = String::new();
    out.push_str(&panel(format!("(A) Decoding wall time (K={k}), s"), false, &|c| match c.wall_time_std_s {
        Some(sd) => format!("{:.2} ± {:.2}", c.wall_time_mean_s, sd),
        None => format!("{:.2}", c.wall_time_mean_s),
    }));
    out.push('\n');
    out.push_str(&panel(format!("(B) Model calls (K={k})"), false, &|c| c.model_calls.to_string()));
    out.push('\n');
    out.push_str(&panel(format!("(C) Average effective batch size (K={k})"), false, &|c| {
        format!("{:.1}", c.mean_batch_size)
    }));
    out.push('\n');
    out.push_str(&panel(format!("(D) Acceptance rate (K={k}), %"), true, &|c| {
        c.acceptance_rate.map_or_else(|| "-".into(), |a| format!("{:.0}", 100.0 * a))
    }));
    out
}

/// Top-N accuracy and invalid share per rank, at the first batch size.
pub fn render_accuracy(report: &SingleStepReport) -> String {
    let Some(&b) = batch_sizes(report).first() else {
        return String::new();
    };
    let mut ranks = [1usize, 3, 5, 10]
        .into_iter()
        .filter(|&n| n <= report.beam_size)
        .collect::<Vec<_>>();
    if ranks.last() != Some(&report.beam_size) {
        ranks.push(report.beam_size);
    }
    let mut header: Vec<String> = ranks.iter().map(|n| format!("top-{n}")).collect();
    header.extend(ranks.iter().map(|n| format!("invalid@{n}")));
    let rows: Vec<(String, Vec<String>)> = strategies(report)
        .into_iter()
        .filter_map(|s| report.cell(s, b).map(|c| (s, c)))
        .map(|(s, c)| {
            let mut cells: Vec<String> = ranks
                .iter()
                .map(|&n| format!("{:.1}", 100.0 * c.top_n_accuracy[n - 1]))
                .collect();
            cells.extend(ranks.iter().map(|&n| format!("{:.1}", 100.0 * c.invalid_rate[n - 1])));
            (strategy_label(s).to_string(), cells)
        })
        .collect();
    table(&format!("Accuracy, % (B={b})"), &header, &rows)
}

pub fn single_step_csv(report: &SingleStepReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "strategy".to_string(),
        "batch_size".into(),
        "n_drafts".into(),
        "draft_len".into(),
        "wall_time_mean_s".into(),
        "wall_time_std_s".into(),
        "model_calls".into(),
        "mean_batch_size".into(),
        "drafted_tokens".into(),
        "accepted_tokens".into(),
        "acceptance_rate".into(),
    ];
    header.extend((1..=report.beam_size).map(|n| format!("top_{n}")));
    header.extend((1..=report.beam_size).map(|n| format!("invalid_{n}")));
    w.write_record(&header)?;
    for c in &report.cells {
        let mut row = vec![
            c.strategy.to_string(),
            c.batch_size.to_string(),
            c.n_drafts.to_string(),
            c.draft_len.to_string(),
            format!("{:.6}", c.wall_time_mean_s),
            c.wall_time_std_s.map_or(String::new(), |s| format!("{s:.6}")),
            c.model_calls.to_string(),
            format!("{:.4}", c.mean_batch_size),
            c.metrics.drafted_tokens.to_string(),
            c.metrics.accepted_tokens.to_string(),
            c.acceptance_rate.map_or(String::new(), |a| format!("{a:.6}")),
        ];
        row.extend(c.top_n_accuracy.iter().map(|a| format!("{a:.6}")));
        row.extend(c.invalid_rate.iter().map(|a| format!("{a:.6}")));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io {
        path: "<csv>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// Settings as columns; solved counts, common-solved figures, and times as rows.
pub fn render_multi_step(report: &MultiStepReport) -> String {
    if report.configs.is_empty() {
        return "no planner settings\n".into();
    }
    let header: Vec<String> = report.configs.iter().map(|c| c.label.clone()).collect();
    let row = |name: &str, f: &dyn Fn(&super::ConfigReport) -> String| {
        (name.to_string(), report.configs.iter().map(f).collect::<Vec<_>>())
    };
    let rows = vec![
        row("Solved molecules", &|c| c.solved.to_string()),
        row("Solved molecules, %", &|c| format!("{:.2}", c.solved_pct)),
        row("Common solved molecules", &|c| c.common_solved.to_string()),
        row("Avg. time per solved molecule, s", &|c| opt(c.avg_time_per_solved_s, 3)),
        row("Avg. time per common solved molecule, s", &|c| opt(c.avg_time_common_s, 3)),
        row("Avg. alg. iterations per common solved molecule", &|c| opt(c.avg_iterations_common, 2)),
        row("Model calls", &|c| c.model_calls.to_string()),
    ];
    table(&format!("{} targets", report.targets), &header, &rows)
}

/// One row per setting: decoder, beam width, solved share, total time.
pub fn render_beam_width_table(report: &MultiStepReport) -> String {
    let header = ["Bw", "Solved molecules, %", "Total time, h"].map(String::from).to_vec();
    let rows: Vec<(String, Vec<String>)> = report
        .configs
        .iter()
        .map(|c| {
            (
                c.label.clone(),
                vec![
                    c.beam_width.to_string(),
                    format!("{:.2}", c.solved_pct),
                    format!("{:.4}", c.total_time_s / 3600.0),
                ],
            )
        })
        .collect();
    table("inference", &header, &rows)
}

pub fn multi_step_csv(report: &MultiStepReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label",
        "decoder",
        "algorithm",
        "beam_width",
        "time_limit_s",
        "targets",
        "solved",
        "solved_pct",
        "total_time_s",
        "model_calls",
        "avg_time_per_solved_s",
        "common_solved",
        "avg_time_common_s",
        "avg_iterations_common",
    ])?;
    for c in &report.configs {
        w.write_record([
            c.label.clone(),
            c.decoder.clone(),
            c.algorithm.to_string(),
            c.beam_width.to_string(),
            c.time_limit.map_or(String::new(), |t| t.to_string()),
            c.targets.to_string(),
            c.solved.to_string(),
            format!("{:.4}", c.solved_pct),
            format!("{:.6}", c.total_time_s),
            c.model_calls.to_string(),
            c.avg_time_per_solved_s.map_or(String::new(), |t| format!("{t:.6}")),
            c.common_solved.to_string(),
            c.avg_time_common_s.map_or(String::new(), |t| format!("{t:.6}")),
            c.avg_iterations_common.map_or(String::new(), |t| format!("{t:.4}")),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io {
        path: "<csv>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
