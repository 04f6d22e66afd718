//! Per-step heatmaps and saliency maps as CSV and SVG.
//!
//! The SVG shows one grid per step, left to right, shaded on a linear
//! grayscale ramp (darker = larger, relative to the step's maximum). Cells
//! queried up to and including that step carry the step number at which they
//! were queried and the outcome sign.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, VasError};
use crate::policy::VasPolicy;
use crate::task::Task;
use crate::train::EpisodeTrace;

const CELL: usize = 24;
const GAP: usize = 16;
const HEADER: usize = 18;

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(VasError::io(dir))?;
        }
    }
    fs::write(path, contents).map_err(VasError::io(path))
}

fn rows_csv(trace: &EpisodeTrace, rows: &[Vec<f64>]) -> String {
    let n = rows.first().map_or(0, Vec::len);
    let mut out = String::from("task,step,cell,outcome");
    for j in 0..n {
        write!(out, ",v{j}").unwrap();
    }
    out.push('\n');
    for (s, values) in trace.steps.iter().zip(rows) {
        write!(out, "{},{},{},{}", trace.task_id, s.step, s.cell, s.reward).unwrap();
        for v in values {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Renders one grid per step. `rows[t]` holds the per-cell values at step `t`.
pub fn render_svg(
    trace: &EpisodeTrace,
    (grid_rows, grid_cols): (usize, usize),
    rows: &[Vec<f64>],
    title: &str,
) -> String {
    let panel_w = grid_cols * CELL;
    let panel_h = grid_rows * CELL;
    let steps = rows.len();
    let width = steps * panel_w + steps.saturating_sub(1) * GAP + 2 * GAP;
    let height = panel_h + HEADER + 2 * GAP;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(svg, "<title>{}</title>", escape(title)).unwrap();
    let mut queried_at = vec![None; grid_rows * grid_cols];
    for (t, values) in rows.iter().enumerate() {
        let step = &trace.steps[t];
        queried_at[step.cell] = Some((t, step.reward));
        let x0 = GAP + t * (panel_w + GAP);
        let y0 = GAP + HEADER;
        writeln!(svg, r#"<g class="step" data-step="{t}">"#).unwrap();
        writeln!(
            svg,
            r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="12">step {}</text>"#,
            GAP + 12,
            t + 1
        )
        .unwrap();
        let max = values.iter().cloned().fold(0.0, f64::max);
        for (j, &v) in values.iter().enumerate() {
            let level = if max > 0.0 { v / max } else { 0.0 };
            let shade = (255.0 * (1.0 - level.clamp(0.0, 1.0))).round() as u8;
            let (r, c) = (j / grid_cols, j % grid_cols);
            let (x, y) = (x0 + c * CELL, y0 + r * CELL);
            writeln!(
                svg,
                r##"<rect class="cell" data-cell="{j}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},{shade})" stroke="#888" stroke-width="0.5"/>"##
            )
            .unwrap();
            if let Some((when, outcome)) = queried_at[j] {
                let ink = if shade < 128 { "#fff" } else { "#000" };
                let sign = if outcome > 0 { '+' } else { '-' };
                writeln!(
                    svg,
                    r#"<text x="{}" y="{}" font-family="sans-serif" font-size="9" text-anchor="middle" fill="{ink}">{}{sign}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 3,
                    when + 1
                )
                .unwrap();
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `<stem>.csv` and `<stem>.svg` next to each other; returns both paths.
fn export(
    stem: &Path,
    trace: &EpisodeTrace,
    task: &Task,
    rows: &[Vec<f64>],
    title: &str,
) -> Result<(PathBuf, PathBuf)> {
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    write(&csv, &rows_csv(trace, rows))?;
    write(&svg, &render_svg(trace, task.grid_shape(), rows, title))?;
    Ok((csv, svg))
}

/// The masked distribution the policy queried from at every step.
pub fn export_heatmap(
    trace: &EpisodeTrace,
    task: &Task,
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    check(trace, task)?;
    let rows: Vec<Vec<f64>> = trace.steps.iter().map(|s| s.distribution.clone()).collect();
    export(
        stem,
        trace,
        task,
        &rows,
        &format!("{} query distribution", trace.task_id),
    )
}

/// Saliency of the chosen cell's probability at every step.
pub fn export_saliency(
    trace: &EpisodeTrace,
    policy: &VasPolicy,
    task: &Task,
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    check(trace, task)?;
    let states = trace.states(task.n_cells())?;
    let rows = states
        .iter()
        .zip(&trace.steps)
        .map(|(state, s)| policy.saliency(task, state, s.cell))
        .collect::<Result<Vec<_>>>()?;
    export(
        stem,
        trace,
        task,
        &rows,
        &format!("{} saliency", trace.task_id),
    )
}

fn check(trace: &EpisodeTrace, task: &Task) -> Result<()> {
    if trace.task_id != task.id() {
        return Err(VasError::Contract(format!(
            "trace of {} exported against task {}",
            trace.task_id,
            task.id()
        )));
    }
    Ok(())
}
