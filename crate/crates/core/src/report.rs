//! Table and figure-data emission.
//!
//! Three tables: a per-model violation summary, the full model-by-router
//! detail grid, and a per-router-count summary. Each emits as markdown and as
//! CSV; the detail CSV uses the same column set as the reference fixture, so
//! emit followed by parse is the identity on any grid whose values carry at
//! most two decimals. All rounding happens here and nowhere else: quantities
//! arrive as exact rationals and leave as fixed-point strings (scores and
//! gains at 2 decimals in the detail table, rates and excesses at 3
//! elsewhere, ties to even).

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::metrics::{
    group_gains_by_model, group_gains_by_router, model_summary, router_summary, GainRecord,
    MetricsError, ModelSummary, RouterSummary,
};
use crate::rational::{format_fixed, parse_decimal, Rat};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no input rows")]
    EmptyInput,
    #[error("detail grid is missing ({model}, r={router})")]
    IncompleteGrid { model: String, router: u32 },
    #[error("unknown figure {0:?}; known figures: overall_violation, model_panels, improve_degrade")]
    UnknownFigure(String),
    #[error("{context}: {reason}")]
    Parse { context: String, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One table rendered both ways.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDoc {
    pub markdown: String,
    pub csv: String,
}

fn md_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    s.push_str("| ");
    s.push_str(&headers.join(" | "));
    s.push_str(" |\n|");
    for _ in headers {
        s.push_str(" --- |");
    }
    s.push('\n');
    for row in rows {
        s.push_str("| ");
        s.push_str(&row.join(" | "));
        s.push_str(" |\n");
    }
    s
}

fn csv_table(header: &str, rows: &[Vec<String>]) -> String {
    let mut s = String::with_capacity(rows.len() * 40);
    s.push_str(header);
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Table 1 ordering: violation count descending, then mean gain descending,
/// then model name ascending. Documented tie-break; reproduces the reference
/// table's printed order.
pub fn model_table_order(summaries: &mut [ModelSummary]) {
    summaries.sort_by(|a, b| {
        b.violation_count
            .cmp(&a.violation_count)
            .then_with(|| b.mean_gain.cmp(&a.mean_gain))
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
}

/// Per-model violation summary (violation breadth and positive excess).
pub fn emit_model_table(summaries: &[ModelSummary]) -> Result<TableDoc, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut ordered = summaries.to_vec();
    model_table_order(&mut ordered);
    let md_rows: Vec<Vec<String>> = ordered
        .iter()
        .map(|s| {
            vec![
                s.model_id.clone(),
                format!("{}/{}", s.violation_count, s.router_settings),
                format_fixed(s.violation_rate, 3),
                format_fixed(s.max_positive_excess, 3),
                format_fixed(s.mean_positive_excess, 3),
                format_fixed(s.mean_gain, 3),
            ]
        })
        .collect();
    let csv_rows: Vec<Vec<String>> = ordered
        .iter()
        .map(|s| {
            vec![
                s.model_id.clone(),
                s.violation_count.to_string(),
                s.router_settings.to_string(),
                format_fixed(s.violation_rate, 3),
                format_fixed(s.max_positive_excess, 3),
                format_fixed(s.mean_positive_excess, 3),
                format_fixed(s.mean_gain, 3),
            ]
        })
        .collect();
    Ok(TableDoc {
        markdown: md_table(
            &[
                "Model",
                "Viol. Count",
                "Viol. Rate",
                "Max Pos. Excess",
                "Mean Pos. Excess",
                "Mean Gain",
            ],
            &md_rows,
        ),
        csv: csv_table(
            "model,violations,settings,violation_rate,max_positive_excess,mean_positive_excess,mean_gain",
            &csv_rows,
        ),
    })
}

/// Full model-by-router grid. Rows grouped by model in input order, router
/// ascending; every model must cover the same contiguous 1..=M range.
pub fn emit_detail_table(gains: &[GainRecord]) -> Result<TableDoc, ReportError> {
    if gains.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let grouped = group_gains_by_model(gains);
    let m_max = grouped
        .iter()
        .flat_map(|(_, gs)| gs.iter().map(|g| g.router_count))
        .max()
        .expect("non-empty");
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(gains.len());
    for (model, mut gs) in grouped {
        gs.sort_by_key(|g| g.router_count);
        for r in 1..=m_max {
            let g = gs
                .iter()
                .find(|g| g.router_count == r)
                .ok_or_else(|| ReportError::IncompleteGrid {
                    model: model.clone(),
                    router: r,
                })?;
            rows.push(vec![
                model.clone(),
                r.to_string(),
                format_fixed(g.clean_accuracy, 2),
                format_fixed(g.noisy_accuracy, 2),
                format_fixed(g.gain, 2),
                g.improve.to_string(),
                g.degrade.to_string(),
            ]);
        }
    }
    Ok(TableDoc {
        markdown: md_table(
            &["Model", "Router", "Clean", "Noisy", "Gain", "Improve", "Degrade"],
            &rows,
        ),
        csv: csv_table("model,router,clean,noisy,gain,improve,degrade", &rows),
    })
}

/// Per-router-count summary across models.
pub fn emit_router_table(summaries: &[RouterSummary]) -> Result<TableDoc, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut ordered = summaries.to_vec();
    ordered.sort_by_key(|s| s.router_count);
    let md_rows: Vec<Vec<String>> = ordered
        .iter()
        .map(|s| {
            vec![
                s.router_count.to_string(),
                format!("{}/{}", s.violating_models, s.model_count),
                format_fixed(s.violation_rate, 3),
                format_fixed(s.mean_positive_excess, 3),
                s.improve_total.to_string(),
                s.degrade_total.to_string(),
                s.net_improve.to_string(),
            ]
        })
        .collect();
    let csv_rows: Vec<Vec<String>> = ordered
        .iter()
        .map(|s| {
            vec![
                s.router_count.to_string(),
                s.violating_models.to_string(),
                s.model_count.to_string(),
                format_fixed(s.violation_rate, 3),
                format_fixed(s.mean_positive_excess, 3),
                s.improve_total.to_string(),
                s.degrade_total.to_string(),
                s.net_improve.to_string(),
            ]
        })
        .collect();
    Ok(TableDoc {
        markdown: md_table(
            &[
                "Router",
                "Viol. Models",
                "Viol. Rate",
                "Mean Pos. Excess",
                "Improve",
                "Degrade",
                "Net Improve",
            ],
            &md_rows,
        ),
        csv: csv_table(
            "router,violating_models,model_count,violation_rate,mean_positive_excess,improve,degrade,net_improve",
            &csv_rows,
        ),
    })
}

fn parse_err(context: &str, reason: impl Into<String>) -> ReportError {
    ReportError::Parse {
        context: context.to_string(),
        reason: reason.into(),
    }
}

fn parse_rat(context: &str, s: &str) -> Result<Rat, ReportError> {
    parse_decimal(s).map_err(|e| parse_err(context, e.to_string()))
}

/// Parse detail-table CSV (the fixture format) back into gain records.
/// Validates per row that gain = noisy − clean and that the transition counts
/// agree in sign with the gain.
pub fn parse_detail_csv(text: &str) -> Result<Vec<GainRecord>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let expected_header = ["model", "router", "clean", "noisy", "gain", "improve", "degrade"];
    let headers = reader
        .headers()
        .map_err(|e| parse_err("detail csv", e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != expected_header {
        return Err(parse_err(
            "detail csv",
            format!("header {:?}, expected {:?}", headers, expected_header.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let context = format!("detail csv row {}", i + 2);
        let row = row.map_err(|e| parse_err(&context, e.to_string()))?;
        if row.len() != 7 {
            return Err(parse_err(&context, format!("{} fields, expected 7", row.len())));
        }
        let model = row[0].to_string();
        let router: u32 = row[1]
            .parse()
            .map_err(|_| parse_err(&context, format!("bad router count {:?}", &row[1])))?;
        let clean = parse_rat(&context, &row[2])?;
        let noisy = parse_rat(&context, &row[3])?;
        let gain = parse_rat(&context, &row[4])?;
        let improve: u32 = row[5]
            .parse()
            .map_err(|_| parse_err(&context, format!("bad improve count {:?}", &row[5])))?;
        let degrade: u32 = row[6]
            .parse()
            .map_err(|_| parse_err(&context, format!("bad degrade count {:?}", &row[6])))?;
        if noisy - clean != gain {
            return Err(parse_err(
                &context,
                format!(
                    "gain column {} disagrees with noisy - clean = {}",
                    &row[4],
                    format_fixed(noisy - clean, 4)
                ),
            ));
        }
        let rec = GainRecord::new(model, router, clean, noisy, improve, degrade)
            .map_err(|e| parse_err(&context, e.to_string()))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    Ok(out)
}

/// Parsed row of the model-summary CSV, as printed (already rounded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelTableRow {
    pub model_id: String,
    pub violations: u32,
    pub settings: u32,
    pub violation_rate: Rat,
    pub max_positive_excess: Rat,
    pub mean_positive_excess: Rat,
    pub mean_gain: Rat,
}

pub fn parse_model_csv(text: &str) -> Result<Vec<ModelTableRow>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let context = format!("model csv row {}", i + 2);
        let row = row.map_err(|e| parse_err(&context, e.to_string()))?;
        if row.len() != 7 {
            return Err(parse_err(&context, format!("{} fields, expected 7", row.len())));
        }
        out.push(ModelTableRow {
            model_id: row[0].to_string(),
            violations: row[1].parse().map_err(|_| parse_err(&context, "bad violations"))?,
            settings: row[2].parse().map_err(|_| parse_err(&context, "bad settings"))?,
            violation_rate: parse_rat(&context, &row[3])?,
            max_positive_excess: parse_rat(&context, &row[4])?,
            mean_positive_excess: parse_rat(&context, &row[5])?,
            mean_gain: parse_rat(&context, &row[6])?,
        });
    }
    if out.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    Ok(out)
}

/// Parsed row of the router-summary CSV, as printed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterTableRow {
    pub router: u32,
    pub violating_models: u32,
    pub model_count: u32,
    pub violation_rate: Rat,
    pub mean_positive_excess: Rat,
    pub improve: i64,
    pub degrade: i64,
    pub net_improve: i64,
}

pub fn parse_router_csv(text: &str) -> Result<Vec<RouterTableRow>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let context = format!("router csv row {}", i + 2);
        let row = row.map_err(|e| parse_err(&context, e.to_string()))?;
        if row.len() != 8 {
            return Err(parse_err(&context, format!("{} fields, expected 8", row.len())));
        }
        out.push(RouterTableRow {
            router: row[0].parse().map_err(|_| parse_err(&context, "bad router"))?,
            violating_models: row[1].parse().map_err(|_| parse_err(&context, "bad count"))?,
            model_count: row[2].parse().map_err(|_| parse_err(&context, "bad count"))?,
            violation_rate: parse_rat(&context, &row[3])?,
            mean_positive_excess: parse_rat(&context, &row[4])?,
            improve: row[5].parse().map_err(|_| parse_err(&context, "bad improve"))?,
            degrade: row[6].parse().map_err(|_| parse_err(&context, "bad degrade"))?,
            net_improve: row[7].parse().map_err(|_| parse_err(&context, "bad net"))?,
        });
    }
    if out.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Figures

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Per-r violating-model counts and mean positive excess.
    OverallViolation,
    /// Per-model noisy accuracy vs r with the clean baseline alongside.
    ModelPanels,
    /// Per-r improve and degrade totals.
    ImproveDegrade,
}

impl Figure {
    pub const ALL: [Figure; 3] = [
        Figure::OverallViolation,
        Figure::ModelPanels,
        Figure::ImproveDegrade,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Figure::OverallViolation => "overall_violation",
            Figure::ModelPanels => "model_panels",
            Figure::ImproveDegrade => "improve_degrade",
        }
    }

    pub fn parse(s: &str) -> Result<Figure, ReportError> {
        match s {
            "overall_violation" => Ok(Figure::OverallViolation),
            "model_panels" => Ok(Figure::ModelPanels),
            "improve_degrade" => Ok(Figure::ImproveDegrade),
            other => Err(ReportError::UnknownFigure(other.to_string())),
        }
    }
}

/// Plot-ready series: a delimited data file plus a small static chart.
#[derive(Debug, Clone)]
pub struct PlotData {
    pub figure: Figure,
    pub csv: String,
    pub svg: String,
}

pub fn emit_plot_data(figure: Figure, gains: &[GainRecord]) -> Result<PlotData, ReportError> {
    if gains.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    match figure {
        Figure::OverallViolation => {
            let mut rows = Vec::new();
            let mut series = Vec::new();
            for (r, bucket) in group_gains_by_router(gains) {
                let s = router_summary(&bucket)?;
                rows.push(vec![
                    r.to_string(),
                    s.violating_models.to_string(),
                    s.model_count.to_string(),
                    format_fixed(s.mean_positive_excess, 3),
                ]);
                series.push((r as f64, s.violating_models as f64));
            }
            let csv = csv_table("router,violating_models,model_count,mean_positive_excess", &rows);
            let svg = line_chart(
                "Violating models by router count",
                "router count",
                "violating models",
                &[("violating models", &series)],
            );
            Ok(PlotData { figure, csv, svg })
        }
        Figure::ModelPanels => {
            let mut rows = Vec::new();
            let mut all_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for (model, mut gs) in group_gains_by_model(gains) {
                gs.sort_by_key(|g| g.router_count);
                let mut series = Vec::new();
                for g in &gs {
                    rows.push(vec![
                        model.clone(),
                        g.router_count.to_string(),
                        format_fixed(g.clean_accuracy, 2),
                        format_fixed(g.noisy_accuracy, 2),
                    ]);
                    series.push((g.router_count as f64, rat_f64(g.noisy_accuracy)));
                }
                all_series.push((model, series));
            }
            let csv = csv_table("model,router,clean,noisy", &rows);
            let named: Vec<(&str, &[(f64, f64)])> = all_series
                .iter()
                .map(|(m, s)| (m.as_str(), s.as_slice()))
                .collect();
            let svg = line_chart(
                "Noisy accuracy by router count",
                "router count",
                "noisy accuracy",
                &named,
            );
            Ok(PlotData { figure, csv, svg })
        }
        Figure::ImproveDegrade => {
            let mut rows = Vec::new();
            let mut improve_series = Vec::new();
            let mut degrade_series = Vec::new();
            for (r, bucket) in group_gains_by_router(gains) {
                let s = router_summary(&bucket)?;
                rows.push(vec![
                    r.to_string(),
                    s.improve_total.to_string(),
                    s.degrade_total.to_string(),
                    s.net_improve.to_string(),
                ]);
                improve_series.push((r as f64, s.improve_total as f64));
                degrade_series.push((r as f64, s.degrade_total as f64));
            }
            let csv = csv_table("router,improve,degrade,net_improve", &rows);
            let svg = line_chart(
                "Improve and degrade transitions by router count",
                "router count",
                "transitions",
                &[
                    ("improve", &improve_series),
                    ("degrade", &degrade_series),
                ],
            );
            Ok(PlotData { figure, csv, svg })
        }
    }
}

fn rat_f64(r: Rat) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

const CHART_COLORS: [&str; 12] = [
    "#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5",
    "#9c6b4e", "#9498a0", "#cc4e00", "#178084",
];

/// Minimal static line chart. No external assets; any SVG viewer renders it.
fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, &[(f64, f64)])],
) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 150.0, 40.0, 50.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if x0 == x1 {
        x1 = x0 + 1.0;
    }
    if y0 == y1 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.08;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        (ml + w - mr) / 2.0,
        xml_escape(title)
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - mb
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        xml_escape(y_label)
    ));
    // y ticks
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let ypix = sy(yv);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ypix}\" x2=\"{ml}\" y2=\"{ypix}\" stroke=\"#333\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.2}</text>\n",
            ml - 4.0,
            ml - 8.0,
            ypix + 4.0,
            yv
        ));
    }
    // x ticks at integers when the domain is small
    let xticks = ((x1 - x0) as usize).min(12).max(1);
    for i in 0..=xticks {
        let xv = x0 + (x1 - x0) * i as f64 / xticks as f64;
        let xpix = sx(xv);
        s.push_str(&format!(
            "<line x1=\"{xpix}\" y1=\"{}\" x2=\"{xpix}\" y2=\"{}\" stroke=\"#333\"/><text x=\"{xpix}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            h - mb,
            h - mb + 4.0,
            h - mb + 18.0,
            if (x1 - x0) >= 1.0 { format!("{xv:.0}") } else { format!("{xv:.2}") }
        ));
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = CHART_COLORS[i % CHART_COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts.iter() {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = mt + 14.0 * i as f64;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            w - mr + 10.0,
            ly,
            w - mr + 24.0,
            ly + 9.0,
            xml_escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// File emission

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat, ReportError> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(ReportError::Parse {
                context: "formats".into(),
                reason: format!("unknown format {other:?}; known: md, csv, svg"),
            }),
        }
    }

    /// Comma-separated list, e.g. "md,csv,svg".
    pub fn parse_list(s: &str) -> Result<BTreeSet<ReportFormat>, ReportError> {
        let mut out = BTreeSet::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            out.insert(ReportFormat::parse(tok)?);
        }
        if out.is_empty() {
            return Err(ReportError::Parse {
                context: "formats".into(),
                reason: "empty format list".into(),
            });
        }
        Ok(out)
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), ReportError> {
    let mut f = std::fs::File::create(path).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(content.as_bytes()).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Render everything into `<dir>/report/`: three tables in the selected
/// formats and the three figure series (data with csv, charts with svg).
/// Returns the files written, in a stable order.
pub fn write_reports(
    dir: &Path,
    gains: &[GainRecord],
    formats: &BTreeSet<ReportFormat>,
) -> Result<Vec<PathBuf>, ReportError> {
    let model_summaries: Vec<ModelSummary> = group_gains_by_model(gains)
        .iter()
        .map(|(_, gs)| model_summary(gs))
        .collect::<Result<_, _>>()?;
    let router_summaries: Vec<RouterSummary> = group_gains_by_router(gains)
        .iter()
        .map(|(_, gs)| router_summary(gs))
        .collect::<Result<_, _>>()?;
    let table1 = emit_model_table(&model_summaries)?;
    let table2 = emit_detail_table(gains)?;
    let table3 = emit_router_table(&router_summaries)?;

    let report_dir = dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|e| ReportError::Io {
        path: report_dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();
    let tables = [("table1", &table1), ("table2", &table2), ("table3", &table3)];
    for (name, doc) in tables {
        if formats.contains(&ReportFormat::Markdown) {
            let p = report_dir.join(format!("{name}.md"));
            write_file(&p, &doc.markdown)?;
            written.push(p);
        }
        if formats.contains(&ReportFormat::Csv) {
            let p = report_dir.join(format!("{name}.csv"));
            write_file(&p, &doc.csv)?;
            written.push(p);
        }
    }
    for figure in Figure::ALL {
        let plot = emit_plot_data(figure, gains)?;
        if formats.contains(&ReportFormat::Csv) {
            let p = report_dir.join(format!("fig_{}.csv", figure.as_str()));
            write_file(&p, &plot.csv)?;
            written.push(p);
        }
        if formats.contains(&ReportFormat::Svg) {
            let p = report_dir.join(format!("fig_{}.svg", figure.as_str()));
            write_file(&p, &plot.svg)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Summaries recomputed from parsed detail rows, as (table1, table3) docs.
/// Convenience for the fixture path: detail CSV in, all tables out.
pub fn tables_from_detail_csv(text: &str) -> Result<(TableDoc, TableDoc, TableDoc), ReportError> {
    let gains = parse_detail_csv(text)?;
    let model_summaries: Vec<ModelSummary> = group_gains_by_model(&gains)
        .iter()
        .map(|(_, gs)| model_summary(gs))
        .collect::<Result<_, _>>()?;
    let router_summaries: Vec<RouterSummary> = group_gains_by_router(&gains)
        .iter()
        .map(|(_, gs)| router_summary(gs))
        .collect::<Result<_, _>>()?;
    Ok((
        emit_model_table(&model_summaries)?,
        emit_detail_table(&gains)?,
        emit_router_table(&router_summaries)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::round_to_integer;
    use num_rational::Ratio;

    fn gain(model: &str, r: u32, clean: &str, noisy: &str, imp: u32, deg: u32) -> GainRecord {
        GainRecord::new(
            model.into(),
            r,
            parse_decimal(clean).unwrap(),
            parse_decimal(noisy).unwrap(),
            imp,
            deg,
        )
        .unwrap()
    }

    fn two_model_grid() -> Vec<GainRecord> {
        vec![
            gain("m-b", 1, "0.50", "0.60", 12, 2),
            gain("m-b", 2, "0.50", "0.45", 3, 8),
            gain("m-a", 1, "0.40", "0.35", 2, 7),
            gain("m-a", 2, "0.40", "0.48", 10, 2),
        ]
    }

    #[test]
    fn detail_emit_parse_round_trip() {
        let gains = two_model_grid();
        let doc = emit_detail_table(&gains).unwrap();
        let parsed = parse_detail_csv(&doc.csv).unwrap();
        // grouped by model in input order, router ascending
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed[0].model_id, "m-b");
        assert_eq!(parsed[0].router_count, 1);
        assert_eq!(parsed[1].router_count, 2);
        assert_eq!(parsed[2].model_id, "m-a");
        let mut expected = two_model_grid();
        expected.sort_by(|a, b| a.model_id.cmp(&b.model_id).then(a.router_count.cmp(&b.router_count)));
        let mut got = parsed.clone();
        got.sort_by(|a, b| a.model_id.cmp(&b.model_id).then(a.router_count.cmp(&b.router_count)));
        assert_eq!(got, expected);
        // idempotent re-emission
        let doc2 = emit_detail_table(&parsed).unwrap();
        assert_eq!(doc.csv, doc2.csv);
        assert_eq!(doc.markdown, doc2.markdown);
    }

    #[test]
    fn detail_table_requires_full_grid() {
        let gains = vec![
            gain("m", 1, "0.5", "0.6", 12, 2),
            gain("m2", 1, "0.5", "0.6", 12, 2),
            gain("m2", 2, "0.5", "0.6", 12, 2),
        ];
        assert!(matches!(
            emit_detail_table(&gains).unwrap_err(),
            ReportError::IncompleteGrid { ref model, router: 2 } if model == "m"
        ));
    }

    #[test]
    fn detail_parse_rejects_inconsistent_rows() {
        let bad_gain = "model,router,clean,noisy,gain,improve,degrade\nm,1,0.50,0.60,0.20,12,2\n";
        assert!(matches!(
            parse_detail_csv(bad_gain).unwrap_err(),
            ReportError::Parse { reason, .. } if reason.contains("disagrees")
        ));
        let bad_sign = "model,router,clean,noisy,gain,improve,degrade\nm,1,0.50,0.60,0.10,2,12\n";
        assert!(matches!(
            parse_detail_csv(bad_sign).unwrap_err(),
            ReportError::Parse { .. }
        ));
        let bad_header = "model,r,clean,noisy,gain,improve,degrade\n";
        assert!(matches!(
            parse_detail_csv(bad_header).unwrap_err(),
            ReportError::Parse { .. }
        ));
        assert!(matches!(
            parse_detail_csv("model,router,clean,noisy,gain,improve,degrade\n").unwrap_err(),
            ReportError::EmptyInput
        ));
    }

    #[test]
    fn model_table_sorts_by_count_then_gain_then_name() {
        let mk = |name: &str, violations: &[(&str, &str)]| -> ModelSummary {
            let gains: Vec<GainRecord> = violations
                .iter()
                .enumerate()
                .map(|(i, (c, n))| {
                    let cv = parse_decimal(c).unwrap();
                    let nv = parse_decimal(n).unwrap();
                    let diff = round_to_integer((nv - cv) * Ratio::from_integer(100));
                    let (imp, deg) = if diff >= 0 {
                        (diff as u32 + 1, 1)
                    } else {
                        (1, (-diff) as u32 + 1)
                    };
                    GainRecord::new(name.into(), i as u32 + 1, cv, nv, imp, deg).unwrap()
                })
                .collect();
            model_summary(&gains).unwrap()
        };
        let a = mk("alpha", &[("0.5", "0.6"), ("0.5", "0.7")]); // 2 violations, mean 0.15
        let b = mk("beta", &[("0.5", "0.7"), ("0.5", "0.8")]); // 2 violations, mean 0.25
        let c = mk("gamma", &[("0.5", "0.4"), ("0.5", "0.9")]); // 1 violation, mean 0.15
        let doc = emit_model_table(&[a, b, c]).unwrap();
        let lines: Vec<&str> = doc.csv.lines().collect();
        assert!(lines[1].starts_with("beta,"));
        assert!(lines[2].starts_with("alpha,"));
        assert!(lines[3].starts_with("gamma,"));
    }

    #[test]
    fn router_table_rows_ascend() {
        let gains = vec![
            gain("m1", 2, "0.5", "0.6", 12, 2),
            gain("m1", 1, "0.5", "0.4", 2, 12),
            gain("m2", 2, "0.5", "0.7", 21, 1),
            gain("m2", 1, "0.5", "0.5", 4, 4),
        ];
        let summaries: Vec<RouterSummary> = group_gains_by_router(&gains)
            .iter()
            .map(|(_, gs)| router_summary(gs).unwrap())
            .collect();
        let doc = emit_router_table(&summaries).unwrap();
        let lines: Vec<&str> = doc.csv.lines().collect();
        assert_eq!(lines[0], "router,violating_models,model_count,violation_rate,mean_positive_excess,improve,degrade,net_improve");
        assert!(lines[1].starts_with("1,0,2,"));
        assert!(lines[2].starts_with("2,2,2,"));
        assert!(lines[2].ends_with("33,3,30"));
        let parsed = parse_router_csv(&doc.csv).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].net_improve, 30);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(emit_model_table(&[]).unwrap_err(), ReportError::EmptyInput));
        assert!(matches!(emit_detail_table(&[]).unwrap_err(), ReportError::EmptyInput));
        assert!(matches!(emit_router_table(&[]).unwrap_err(), ReportError::EmptyInput));
        assert!(matches!(
            emit_plot_data(Figure::ImproveDegrade, &[]).unwrap_err(),
            ReportError::EmptyInput
        ));
    }

    #[test]
    fn figure_names_round_trip_and_reject_unknown() {
        for f in Figure::ALL {
            assert_eq!(Figure::parse(f.as_str()).unwrap(), f);
        }
        assert!(matches!(
            Figure::parse("pie_chart").unwrap_err(),
            ReportError::UnknownFigure(_)
        ));
    }

    #[test]
    fn model_panels_series_keeps_clean_constant() {
        let gains = two_model_grid();
        let plot = emit_plot_data(Figure::ModelPanels, &gains).unwrap();
        let mut clean_by_model: std::collections::HashMap<&str, Vec<&str>> = Default::default();
        for line in plot.csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            clean_by_model.entry(cols[0]).or_default().push(cols[2]);
        }
        for (_, cleans) in clean_by_model {
            assert!(cleans.windows(2).all(|w| w[0] == w[1]));
        }
        assert!(plot.svg.starts_with("<svg"));
        assert!(plot.svg.contains("polyline"));
    }

    #[test]
    fn improve_degrade_series_totals() {
        let gains = two_model_grid();
        let plot = emit_plot_data(Figure::ImproveDegrade, &gains).unwrap();
        let lines: Vec<&str> = plot.csv.lines().collect();
        assert_eq!(lines[0], "router,improve,degrade,net_improve");
        assert_eq!(lines[1], "1,14,9,5");
        assert_eq!(lines[2], "2,13,10,3");
    }

    #[test]
    fn write_reports_inventory_respects_formats() {
        let dir = tempfile::tempdir().unwrap();
        let gains = two_model_grid();
        let all = ReportFormat::parse_list("md,csv,svg").unwrap();
        let written = write_reports(dir.path(), &gains, &all).unwrap();
        assert_eq!(written.len(), 3 * 2 + 3 * 2);
        for p in &written {
            assert!(p.exists());
        }
        let dir2 = tempfile::tempdir().unwrap();
        let csv_only = ReportFormat::parse_list("csv").unwrap();
        let written2 = write_reports(dir2.path(), &gains, &csv_only).unwrap();
        assert_eq!(written2.len(), 3 + 3);
        assert!(written2.iter().all(|p| p.extension().unwrap() == "csv"));
        assert!(!dir2.path().join("report/table1.md").exists());

        // purity: rerun is byte-identical
        let before = std::fs::read_to_string(dir.path().join("report/table1.csv")).unwrap();
        write_reports(dir.path(), &gains, &all).unwrap();
        let after = std::fs::read_to_string(dir.path().join("report/table1.csv")).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn format_list_parsing() {
        assert!(ReportFormat::parse_list("").is_err());
        assert!(ReportFormat::parse_list("md,tsv").is_err());
        let set = ReportFormat::parse_list(" md , csv ").unwrap();
        assert_eq!(set.len(), 2);
    }
}
