//! Benchmark runner: load a manifest of cases, drive a candidate edit
//! endpoint, collect 0-10 judge scores per metric dimension, and
//! aggregate per-sub-task / per-category / overall tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::read_jsonl;
use crate::gateway::{extract_json_object, ChatRequest, EditRequest, Endpoint, GatewayError, Part};
use crate::model::{ImageRef, MetricVector};
use crate::scoring::{geometric_score, round_report};
use crate::store::ArtifactStore;
use crate::taxonomy::{Category, Metric, SubTask, Taxonomy};

const IF_TEMPLATE: &str = include_str!("../data/prompts/if.txt");
const NC_TEMPLATE: &str = include_str!("../data/prompts/nc.txt");
const VQ_TEMPLATE: &str = include_str!("../data/prompts/vq.txt");
const RA_TEMPLATE: &str = include_str!("../data/prompts/ra.txt");

/// Sub-task cases in the canonical manifest.
pub const CANONICAL_CASES_PER_SUBTASK: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("manifest line {line}: {msg}")]
    SchemaViolation { line: usize, msg: String },
    #[error("manifest shape: {0}")]
    ShapeViolation(String),
    #[error("case {0}: complex case has no reasoning points")]
    MissingReasoningPoints(String),
    #[error("case {0}: no instruction for locale {1}")]
    MissingLocale(String, Locale),
    #[error("case {case}: judge reply unparseable for {dimension} after retry")]
    JudgeUnparseable { case: String, dimension: Metric },
    #[error("case {case}: verdicts missing {missing}")]
    IncompleteVerdicts { case: String, missing: Metric },
    #[error("no cases were scored")]
    NoScoredCases,
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locale {
    En,
    Cn,
}

impl Locale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Locale::En => "en",
            Locale::Cn => "cn",
        }
    }
}

impl std::fmt::Display for Locale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Locale {
    type Err = String;
    fn from_str(s: &str) -> Result<Locale, String> {
        match s.to_ascii_lowercase().as_str() {
            "en" => Ok(Locale::En),
            "cn" => Ok(Locale::Cn),
            other => Err(format!("unknown locale: {other}")),
        }
    }
}

/// One benchmark item.
#[derive(Debug, Clone)]
pub struct BenchCase {
    pub id: String,
    pub image: ImageRef,
    pub instruction_en: String,
    pub instruction_cn: Option<String>,
    pub subtask: SubTask,
    pub reasoning_points: Option<Vec<String>>,
}

impl BenchCase {
    pub fn instruction(&self, locale: Locale) -> Result<&str, BenchError> {
        match locale {
            Locale::En => Ok(&self.instruction_en),
            Locale::Cn => self
                .instruction_cn
                .as_deref()
                .ok_or_else(|| BenchError::MissingLocale(self.id.clone(), locale)),
        }
    }
}

/// On-disk manifest record; `subtask` is the taxonomy key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCaseRecord {
    pub id: String,
    pub image: ImageRef,
    pub instruction_en: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_cn: Option<String>,
    pub subtask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_points: Option<Vec<String>>,
}

/// Load a line-delimited JSON manifest. With `canonical` set the 22x50
/// shape is enforced; otherwise any counts load (with a warning when the
/// shape is non-canonical).
pub fn load_manifest(
    path: &Path,
    taxonomy: &Taxonomy,
    canonical: bool,
) -> Result<Vec<BenchCase>, BenchError> {
    let records: Vec<BenchCaseRecord> =
        read_jsonl(path).map_err(|e| BenchError::SchemaViolation {
            line: 0,
            msg: e.to_string(),
        })?;
    let mut cases = Vec::with_capacity(records.len());
    let mut per_subtask: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in records.into_iter().enumerate() {
        let subtask = taxonomy
            .classify(&r.subtask)
            .map_err(|e| BenchError::SchemaViolation {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let case = BenchCase {
            id: r.id,
            image: r.image,
            instruction_en: r.instruction_en,
            instruction_cn: r.instruction_cn,
            subtask,
            reasoning_points: r.reasoning_points,
        };
        if case.subtask.complexity == crate::taxonomy::Complexity::Complex
            && case
                .reasoning_points
                .as_ref()
                .map_or(true, |p| p.is_empty())
        {
            return Err(BenchError::MissingReasoningPoints(case.id));
        }
        *per_subtask.entry(case.subtask.key.clone()).or_insert(0) += 1;
        cases.push(case);
    }
    let shape_ok = per_subtask.len() == taxonomy.records().len()
        && per_subtask.values().all(|&n| n == CANONICAL_CASES_PER_SUBTASK);
    if canonical && !shape_ok {
        return Err(BenchError::ShapeViolation(format!(
            "expected {} sub-tasks x {} cases, got {} sub-tasks over {} cases",
            taxonomy.records().len(),
            CANONICAL_CASES_PER_SUBTASK,
            per_subtask.len(),
            cases.len()
        )));
    }
    if !shape_ok {
        log::warn!(
            "manifest is non-canonical: {} cases over {} sub-tasks",
            cases.len(),
            per_subtask.len()
        );
    }
    Ok(cases)
}

/// Write cases back to a line-delimited JSON manifest.
pub fn write_manifest(path: &Path, cases: &[BenchCase]) -> Result<(), BenchError> {
    let records: Vec<BenchCaseRecord> = cases
        .iter()
        .map(|c| BenchCaseRecord {
            id: c.id.clone(),
            image: c.image.clone(),
            instruction_en: c.instruction_en.clone(),
            instruction_cn: c.instruction_cn.clone(),
            subtask: c.subtask.key.clone(),
            reasoning_points: c.reasoning_points.clone(),
        })
        .collect();
    crate::curation::append_jsonl(path, &records).map_err(|e| BenchError::SchemaViolation {
        line: 0,
        msg: e.to_string(),
    })
}

/// A parsed judge reply for one dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub dimension: Metric,
    pub score: f64,
    pub reason: String,
}

/// Substitute the case into the verbatim prompt template for a
/// dimension. RA additionally renders the reasoning points as a
/// numbered list.
pub fn render_prompt(
    dimension: Metric,
    case: &BenchCase,
    locale: Locale,
) -> Result<String, BenchError> {
    let template = match dimension {
        Metric::If => IF_TEMPLATE,
        Metric::Nc => NC_TEMPLATE,
        Metric::Vq => VQ_TEMPLATE,
        Metric::Ra => RA_TEMPLATE,
    };
    let instruction = case.instruction(locale)?;
    let mut text = template.replace("<instruction>", instruction);
    if dimension == Metric::Ra {
        let points = case
            .reasoning_points
            .as_ref()
            .filter(|p| !p.is_empty())
            .ok_or_else(|| BenchError::MissingReasoningPoints(case.id.clone()))?;
        let mut listed = String::new();
        for (i, p) in points.iter().enumerate() {
            let _ = writeln!(listed, "{}. {}", i + 1, p);
        }
        text = text.replace("<reasoning_points>", listed.trim_end());
    }
    Ok(text)
}

/// Send the rendered prompt plus both images and parse the
/// {"score","reason"} verdict. Scores outside [0,10] are clamped (and
/// the clamp logged); an unparseable reply gets one re-prompt retry.
pub fn judge_dimension(
    judge: &Endpoint,
    dimension: Metric,
    case: &BenchCase,
    original: &ImageRef,
    edited: &ImageRef,
    locale: Locale,
) -> Result<JudgeVerdict, BenchError> {
    let base = render_prompt(dimension, case, locale)?;
    for attempt in 0..2 {
        let mut text = base.clone();
        if attempt == 1 {
            text.push_str("\nReply with the JSON object only.");
        }
        let req = ChatRequest {
            system: None,
            parts: vec![
                Part::Text { text },
                Part::Image {
                    image: original.clone(),
                    media_type: "image/png".to_string(),
                },
                Part::Image {
                    image: edited.clone(),
                    media_type: "image/png".to_string(),
                },
            ],
            temperature: judge.config().temperature,
            max_tokens: judge.config().max_tokens,
        };
        let reply = judge.chat(&req)?;
        if let Ok(v) = extract_json_object(&reply) {
            if let Some(raw) = v["score"].as_f64() {
                let score = raw.clamp(0.0, 10.0);
                if score != raw {
                    log::warn!(
                        "case {} {dimension}: judge score {raw} clamped to {score}",
                        case.id
                    );
                }
                let reason = match v["reason"].as_str() {
                    Some(r) if !r.is_empty() => r.to_string(),
                    _ => "unspecified".to_string(),
                };
                return Ok(JudgeVerdict {
                    dimension,
                    score,
                    reason,
                });
            }
        }
    }
    Err(BenchError::JudgeUnparseable {
        case: case.id.clone(),
        dimension,
    })
}

/// Assemble the metric vector from verdicts and compute the per-case
/// geometric-mean score over the sub-task's applicable metrics.
pub fn score_case(
    case: &BenchCase,
    verdicts: &[JudgeVerdict],
) -> Result<(MetricVector, f64), BenchError> {
    let mut v = MetricVector::default();
    for verdict in verdicts {
        v.set(verdict.dimension, verdict.score);
    }
    let metrics = case.subtask.metric_set();
    for m in &metrics {
        if v.get(*m).is_none() {
            return Err(BenchError::IncompleteVerdicts {
                case: case.id.clone(),
                missing: *m,
            });
        }
    }
    let overall = geometric_score(&v, &metrics).expect("coverage checked above");
    Ok((v, overall))
}

/// One fully scored case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredCase {
    pub id: String,
    pub subtask: String,
    pub category: Category,
    pub metrics: MetricVector,
    pub overall: f64,
}

/// A case excluded from the means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFailure {
    pub id: String,
    pub reason: String,
}

/// Drive the candidate editor and judge for one case.
pub fn run_case(
    case: &BenchCase,
    editor: &Endpoint,
    judge: &Endpoint,
    store: &ArtifactStore,
    locale: Locale,
    edit_seed: Option<u64>,
) -> Result<ScoredCase, BenchError> {
    let instruction = case.instruction(locale)?.to_string();
    let edited = editor.edit_image(
        &EditRequest {
            source: case.image.clone(),
            instruction,
            seed: edit_seed,
        },
        store,
    )?;
    let mut verdicts = Vec::new();
    for m in case.subtask.metric_set() {
        verdicts.push(judge_dimension(judge, m, case, &case.image, &edited, locale)?);
    }
    let (metrics, overall) = score_case(case, &verdicts)?;
    Ok(ScoredCase {
        id: case.id.clone(),
        subtask: case.subtask.key.clone(),
        category: case.subtask.category,
        metrics,
        overall,
    })
}

/// Run every case; judge failures are collected, not fatal.
pub fn run_bench(
    cases: &[BenchCase],
    editor: &Endpoint,
    judge: &Endpoint,
    store: &ArtifactStore,
    locale: Locale,
    edit_seed: Option<u64>,
) -> (Vec<ScoredCase>, Vec<CaseFailure>) {
    let results: Vec<Result<ScoredCase, BenchError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .iter()
            .map(|c| scope.spawn(move || run_case(c, editor, judge, store, locale, edit_seed)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut scored = Vec::new();
    let mut failures = Vec::new();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(s) => scored.push(s),
            Err(e) => failures.push(CaseFailure {
                id: case.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (scored, failures)
}

/// One table row: per-metric means over the row's cases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub case_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub if_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nc_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vq_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ra_mean: Option<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub locale: Locale,
    /// How rows were averaged; recorded because published tables of this
    /// shape do not pin the averaging order down.
    pub aggregation: String,
    pub scored_count: usize,
    pub failure_count: usize,
    pub overall: ReportRow,
    pub categories: Vec<ReportRow>,
    pub subtasks: Vec<ReportRow>,
    pub cases: Vec<ScoredCase>,
    pub failures: Vec<CaseFailure>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(round_report(v.iter().sum::<f64>() / v.len() as f64, 4))
    }
}

fn row_for(label: &str, cases: &[&ScoredCase]) -> ReportRow {
    ReportRow {
        label: label.to_string(),
        case_count: cases.len(),
        if_mean: mean_of(cases.iter().filter_map(|c| c.metrics.if_score)),
        nc_mean: mean_of(cases.iter().filter_map(|c| c.metrics.nc_score)),
        vq_mean: mean_of(cases.iter().filter_map(|c| c.metrics.vq_score)),
        ra_mean: mean_of(cases.iter().filter_map(|c| c.metrics.ra_score)),
        overall: mean_of(cases.iter().map(|c| c.overall)).unwrap_or(0.0),
    }
}

fn category_label(c: Category) -> &'static str {
    match c {
        Category::ObjectEditing => "ObjectEditing",
        Category::AttributeEditing => "AttributeEditing",
        Category::SceneEditing => "SceneEditing",
        Category::ReasoningEditing => "ReasoningEditing",
    }
}

/// Fold scored cases into the report tables. Default aggregation: every
/// mean is over the row's cases. With `mean_of_subtask_means`, category
/// and overall rows average the sub-task means instead.
pub fn aggregate(
    model: &str,
    locale: Locale,
    taxonomy: &Taxonomy,
    scored: Vec<ScoredCase>,
    failures: Vec<CaseFailure>,
    mean_of_subtask_means: bool,
) -> Result<BenchReport, BenchError> {
    if scored.is_empty() {
        return Err(BenchError::NoScoredCases);
    }
    let mut scored = scored;
    scored.sort_by(|a, b| a.id.cmp(&b.id));

    let subtasks: Vec<ReportRow> = taxonomy
        .records()
        .iter()
        .filter_map(|r| {
            let cases: Vec<&ScoredCase> =
                scored.iter().filter(|c| c.subtask == r.key).collect();
            if cases.is_empty() {
                None
            } else {
                Some(row_for(&r.key, &cases))
            }
        })
        .collect();

    let rollup = |label: &str, member: &dyn Fn(&ScoredCase) -> bool, sub_member: &dyn Fn(&ReportRow) -> bool| {
        if mean_of_subtask_means {
            let rows: Vec<&ReportRow> = subtasks.iter().filter(|r| sub_member(r)).collect();
            let count = rows.iter().map(|r| r.case_count).sum();
            ReportRow {
                label: label.to_string(),
                case_count: count,
                if_mean: mean_of(rows.iter().filter_map(|r| r.if_mean)),
                nc_mean: mean_of(rows.iter().filter_map(|r| r.nc_mean)),
                vq_mean: mean_of(rows.iter().filter_map(|r| r.vq_mean)),
                ra_mean: mean_of(rows.iter().filter_map(|r| r.ra_mean)),
                overall: mean_of(rows.iter().map(|r| r.overall)).unwrap_or(0.0),
            }
        } else {
            let cases: Vec<&ScoredCase> = scored.iter().filter(|c| member(c)).collect();
            row_for(label, &cases)
        }
    };

    let categories: Vec<ReportRow> = [
        Category::ObjectEditing,
        Category::AttributeEditing,
        Category::SceneEditing,
        Category::ReasoningEditing,
    ]
    .iter()
    .filter_map(|&cat| {
        let keys: std::collections::HashSet<&str> = taxonomy
            .records()
            .iter()
            .filter(|r| r.category == cat)
            .map(|r| r.key.as_str())
            .collect();
        let row = rollup(
            category_label(cat),
            &|c: &ScoredCase| c.category == cat,
            &|r: &ReportRow| keys.contains(r.label.as_str()),
        );
        (row.case_count > 0).then_some(row)
    })
    .collect();

    let overall = rollup("overall", &|_| true, &|_| true);

    Ok(BenchReport {
        model: model.to_string(),
        locale,
        aggregation: if mean_of_subtask_means {
            "mean_of_subtask_means".to_string()
        } else {
            "mean_over_cases".to_string()
        },
        scored_count: scored.len(),
        failure_count: failures.len(),
        overall,
        categories,
        subtasks,
        cases: scored,
        failures,
    })
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

fn csv_rows(rows: &[&ReportRow], model: &str, locale: Locale) -> String {
    let mut out = String::from("model,locale,row,cases,IF,NC,VQ,RA,Overall\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{model},{locale},{},{},{},{},{},{},{}",
            r.label,
            r.case_count,
            fmt_cell(r.if_mean),
            fmt_cell(r.nc_mean),
            fmt_cell(r.vq_mean),
            fmt_cell(r.ra_mean),
            fmt_cell(Some(r.overall)),
        );
    }
    out
}

/// Write the full report: JSON detail, three CSV tables, and the radar
/// CSV. Outputs are deterministic for a given report.
pub fn write_report(report: &BenchReport, out_dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let prefix = format!("{}_{}", report.model, report.locale);
    std::fs::write(
        out_dir.join(format!("{prefix}_report.json")),
        serde_json::to_vec_pretty(report).expect("report serializes"),
    )?;
    std::fs::write(
        out_dir.join(format!("{prefix}_overall.csv")),
        csv_rows(&[&report.overall], &report.model, report.locale),
    )?;
    std::fs::write(
        out_dir.join(format!("{prefix}_category.csv")),
        csv_rows(
            &report.categories.iter().collect::<Vec<_>>(),
            &report.model,
            report.locale,
        ),
    )?;
    std::fs::write(
        out_dir.join(format!("{prefix}_subtask.csv")),
        csv_rows(
            &report.subtasks.iter().collect::<Vec<_>>(),
            &report.model,
            report.locale,
        ),
    )?;
    let mut radar = String::from("subtask,model,value\n");
    for r in &report.subtasks {
        let _ = writeln!(radar, "{},{},{:.4}", r.label, report.model, r.overall);
    }
    std::fs::write(out_dir.join(format!("{prefix}_radar.csv")), radar)?;
    Ok(())
}

/// Render the overall row for terminal output.
pub fn format_overall_row(report: &BenchReport) -> String {
    let r = &report.overall;
    format!(
        "{} [{}]  cases={}  IF={}  NC={}  VQ={}  RA={}  Overall={:.4}",
        report.model,
        report.locale,
        r.case_count,
        fmt_cell(r.if_mean),
        fmt_cell(r.nc_mean),
        fmt_cell(r.vq_mean),
        fmt_cell(r.ra_mean),
        r.overall
    )
}
