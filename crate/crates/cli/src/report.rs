use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use comicfuse::evaluation::{MetricReport, Rate, Split};
use comicfuse::io::{load_document, FORMAT_VERSION};
use comicfuse::pipeline::{read_trace, PipelineTrace, META_FILE};
use comicfuse::{ComicDocument, LabelAssignment};
use serde::Serialize;

use crate::args::ReportArgs;
use crate::common::{require_out, write_json, write_text};
use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct TraceColumn {
    pub path: PathBuf,
    pub title: String,
    pub speaker: Vec<Option<f64>>,
    pub character: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
pub struct TitleBars {
    pub title: String,
    pub split: Split,
    /// Speaker accuracy per iteration.
    pub speaker: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub format_version: u32,
    pub traces: Vec<TraceColumn>,
    pub report: MetricReport,
}

fn version_of(dir: &Path) -> CliResult<u64> {
    let p = dir.join(META_FILE);
    let text = fs::read_to_string(&p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
    v.get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CliError::input(format!("{}: missing format_version", p.display())))
}

/// Loads every trace after checking that all share the supported format version.
pub fn load_traces(dirs: &[PathBuf]) -> CliResult<Vec<PipelineTrace>> {
    let versions = dirs.iter().map(|d| version_of(d)).collect::<CliResult<Vec<_>>>()?;
    if let Some((d, v)) = dirs
        .iter()
        .zip(&versions)
        .find(|(_, v)| **v != u64::from(FORMAT_VERSION))
    {
        return Err(CliError::input(format!(
            "{}: format version {v} does not match {FORMAT_VERSION}",
            d.display()
        )));
    }
    dirs.iter().map(|d| read_trace(d).map_err(CliError::from)).collect()
}

fn pct(r: Option<Rate>) -> Option<f64> {
    r.filter(|r| r.total > 0).map(|r| 100.0 * r.value())
}

fn column(path: &Path, trace: &PipelineTrace) -> TraceColumn {
    TraceColumn {
        path: path.to_path_buf(),
        title: trace.meta.title.clone(),
        speaker: trace.iterations.iter().map(|i| pct(i.metrics.speaker)).collect(),
        character: trace.iterations.iter().map(|i| pct(i.metrics.character)).collect(),
    }
}

fn column_name(path: &Path, title: &str) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| s != "trace")
        .unwrap_or_else(|| title.to_string())
}

/// One row per iteration and one speaker/character column pair per trace.
pub fn comparison_table(columns: &[TraceColumn]) -> String {
    let rows = columns.iter().map(|c| c.speaker.len()).max().unwrap_or(0);
    let cell = |v: Option<&Option<f64>>| match v {
        Some(Some(x)) => format!("{x:.1}"),
        _ => "-".to_string(),
    };
    let mut out = String::new();
    let _ = write!(out, "{:<6}", "iter");
    for c in columns {
        let name = column_name(&c.path, &c.title);
        let _ = write!(out, " {:>14} {:>14}", format!("{name}/spk"), format!("{name}/chr"));
    }
    out.push('\n');
    for i in 0..rows {
        let _ = write!(out, "{i:<6}");
        for c in columns {
            let _ = write!(out, " {:>14} {:>14}", cell(c.speaker.get(i)), cell(c.character.get(i)));
        }
        out.push('\n');
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG of one page: character boxes in blue, text boxes in red, each tagged with its label.
pub fn page_svg(
    doc: &ComicDocument,
    page_index: usize,
    chars: &LabelAssignment,
    texts: &LabelAssignment,
) -> Option<String> {
    let page = doc.pages.iter().find(|p| p.index == page_index)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = page.width,
        h = page.height
    );
    let _ = writeln!(
        s,
        r#"<rect width="{}" height="{}" fill="white"/>"#,
        page.width, page.height
    );
    let mut draw = |id: &str, b: &comicfuse::BoundingBox, colour: &str, label: Option<&str>| {
        let [x1, y1, x2, y2] = b.as_array();
        let _ = writeln!(
            s,
            r#"<rect x="{x1}" y="{y1}" width="{}" height="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            x2 - x1,
            y2 - y1
        );
        let _ = writeln!(
            s,
            r#"<text x="{x1}" y="{}" font-size="11" fill="{colour}">{}: {}</text>"#,
            (y1 - 2.0).max(10.0),
            escape(id),
            escape(label.unwrap_or("?"))
        );
    };
    for c in doc.characters.iter().filter(|c| c.page_index == page_index) {
        draw(&c.id, &c.bbox, "#1f5fbf", chars.label_or_abstain(&c.id).name());
    }
    for t in doc.texts.iter().filter(|t| t.page_index == page_index) {
        draw(&t.id, &t.bbox, "#c0392b", texts.label_or_abstain(&t.id).name());
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn safe_name(title: &str) -> String {
    title
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let out = require_out(&args.out)?;
    if args.trace.is_empty() {
        return Err(CliError::usage("report needs at least one --trace"));
    }
    let traces = load_traces(&args.trace)?;

    let mut report = MetricReport::new(false);
    let mut columns = Vec::new();
    for (path, trace) in args.trace.iter().zip(&traces) {
        report.push_title(
            trace.meta.title.clone(),
            trace.iterations.iter().map(|i| i.metrics.clone()).collect(),
        );
        columns.push(column(path, trace));
    }
    let bars: Vec<TitleBars> = report
        .titles
        .iter()
        .map(|t| TitleBars {
            title: t.title.clone(),
            split: t.split,
            speaker: t.iterations.iter().map(|s| pct(s.speaker)).collect(),
        })
        .collect();

    let table = comparison_table(&columns);
    let split_table = report.render_table();
    write_text(&out.join("report.txt"), &format!("{table}\n{split_table}"))?;
    write_json(&out.join("bars.json"), &bars)?;
    write_json(
        &out.join("report.json"),
        &Comparison {
            format_version: FORMAT_VERSION,
            traces: columns,
            report,
        },
    )?;
    print!("{table}\n{split_table}");

    for doc_path in &args.overlay {
        let doc = load_document(doc_path)?;
        let trace = traces
            .iter()
            .find(|t| t.meta.title == doc.title)
            .ok_or_else(|| CliError::input(format!("no trace for title {:?} of {}", doc.title, doc_path.display())))?;
        let Some(last) = trace.last() else { continue };
        let dir = out.join("overlays").join(safe_name(&doc.title));
        for page in &doc.pages {
            if let Some(svg) = page_svg(&doc, page.index, &last.char_labels, &last.text_labels) {
                write_text(&dir.join(format!("page_{:03}.svg", page.index)), &svg)?;
            }
        }
    }
    Ok(())
}
