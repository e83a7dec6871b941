//! Versioned on-disk formats.
//!
//! JSON documents all carry a top-level `format_version: 1` and are written
//! pretty-printed with a trailing newline and a field order fixed by the
//! type, so parse → serialize round-trips are byte-identical. CSV formats
//! cover profiling samples, loading-time measurements, output-length traces,
//! per-request oracle lengths, and per-iteration dumps.
//!
//! Read errors name the offending file and map to the input-error exit code.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::catalog::{ExecutionPlan, GpuTopology, ModelSpec};
use crate::cost::{CostTable, LoadingSample, PhaseKind, ProfileSample};
use crate::error::{Error, Result};
use crate::graph::AppGraph;
use crate::lengths::OutputLengthEcdf;
use crate::planner::AppPlan;
use crate::runtime::{OracleWorkload, RuntimeTrace};
use crate::sim::IterationRecord;
use crate::workload::RequestSpec;

/// Version stamped into and required from every JSON document.
pub const FORMAT_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: format_version {} is not supported (this build reads version {})",
            path.display(),
            version,
            FORMAT_VERSION
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

/// Two-step read for documents whose payload shares the top level with
/// `format_version`: probe the version, then parse the payload type directly
/// from the text (it ignores the extra version field). Parsing the payload
/// through a `#[serde(flatten)]` wrapper instead would break integer map
/// keys, which serde buffers as strings.
fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let probe: VersionProbe = parse_json(path, &text)?;
    let version = probe
        .format_version
        .ok_or_else(|| Error::Config(format!("{}: missing format_version", path.display())))?;
    check_version(path, version)?;
    parse_json(path, &text)
}

// ---------------------------------------------------------------------------
// models.json — { format_version, models: [ModelSpec] }
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelsFile {
    format_version: u32,
    models: Vec<ModelSpec>,
}

pub fn read_models(path: &Path) -> Result<Vec<ModelSpec>> {
    let file: ModelsFile = parse_json(path, &read_text(path)?)?;
    check_version(path, file.format_version)?;
    let mut ids = BTreeSet::new();
    for model in &file.models {
        model.validate()?;
        if !ids.insert(model.id.clone()) {
            return Err(Error::Config(format!(
                "{}: duplicate model id '{}'",
                path.display(),
                model.id
            )));
        }
    }
    Ok(file.models)
}

pub fn write_models(path: &Path, models: &[ModelSpec]) -> Result<()> {
    write_json(
        path,
        &ModelsFile { format_version: FORMAT_VERSION, models: models.to_vec() },
    )
}

// ---------------------------------------------------------------------------
// gpus.json — { format_version, ...GpuTopology }
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GpusFile {
    format_version: u32,
    #[serde(flatten)]
    topology: GpuTopology,
}

pub fn read_gpus(path: &Path) -> Result<GpuTopology> {
    let topology: GpuTopology = read_versioned(path)?;
    topology.validate()?;
    Ok(topology)
}

pub fn write_gpus(path: &Path, topology: &GpuTopology) -> Result<()> {
    write_json(
        path,
        &GpusFile { format_version: FORMAT_VERSION, topology: topology.clone() },
    )
}

// ---------------------------------------------------------------------------
// app.json — { format_version, ...AppGraph }
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AppFile {
    format_version: u32,
    #[serde(flatten)]
    graph: AppGraph,
}

pub fn read_app(path: &Path) -> Result<AppGraph> {
    let graph: AppGraph = read_versioned(path)?;
    graph.validate()?;
    Ok(graph)
}

pub fn write_app(path: &Path, graph: &AppGraph) -> Result<()> {
    write_json(path, &AppFile { format_version: FORMAT_VERSION, graph: graph.clone() })
}

// ---------------------------------------------------------------------------
// requests.json — { format_version, requests: [RequestSpec] }
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RequestsFile {
    format_version: u32,
    requests: Vec<RequestSpec>,
}

pub fn read_requests(path: &Path) -> Result<Vec<RequestSpec>> {
    let file: RequestsFile = parse_json(path, &read_text(path)?)?;
    check_version(path, file.format_version)?;
    let mut ids = BTreeSet::new();
    for request in &file.requests {
        if !ids.insert(request.id.clone()) {
            return Err(Error::Config(format!(
                "{}: duplicate request id '{}'",
                path.display(),
                request.id
            )));
        }
    }
    Ok(file.requests)
}

pub fn write_requests(path: &Path, requests: &[RequestSpec]) -> Result<()> {
    write_json(
        path,
        &RequestsFile { format_version: FORMAT_VERSION, requests: requests.to_vec() },
    )
}

// ---------------------------------------------------------------------------
// cost_table.json — { format_version, ...CostTable }
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CostTableFile {
    format_version: u32,
    #[serde(flatten)]
    table: CostTable,
}

pub fn read_cost_table(path: &Path) -> Result<CostTable> {
    read_versioned(path)
}

pub fn write_cost_table(path: &Path, table: &CostTable) -> Result<()> {
    write_json(
        path,
        &CostTableFile { format_version: FORMAT_VERSION, table: table.clone() },
    )
}

// ---------------------------------------------------------------------------
// ecdf.json — { format_version, models: { model_id: [sorted lengths] } }
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EcdfFile {
    format_version: u32,
    models: BTreeMap<String, Vec<u64>>,
}

pub fn read_ecdfs(path: &Path) -> Result<BTreeMap<String, OutputLengthEcdf>> {
    let file: EcdfFile = parse_json(path, &read_text(path)?)?;
    check_version(path, file.format_version)?;
    let mut out = BTreeMap::new();
    for (model_id, lengths) in file.models {
        let ecdf = OutputLengthEcdf::from_lengths(&model_id, lengths)?;
        out.insert(model_id, ecdf);
    }
    Ok(out)
}

pub fn write_ecdfs(path: &Path, ecdfs: &BTreeMap<String, OutputLengthEcdf>) -> Result<()> {
    let models = ecdfs
        .iter()
        .map(|(id, ecdf)| (id.clone(), ecdf.lengths().to_vec()))
        .collect();
    write_json(path, &EcdfFile { format_version: FORMAT_VERSION, models })
}

// ---------------------------------------------------------------------------
// plan.json — { format_version, ...AppPlan }
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PlanFile {
    format_version: u32,
    #[serde(flatten)]
    plan: AppPlan,
}

pub fn read_plan(path: &Path) -> Result<AppPlan> {
    read_versioned(path)
}

pub fn write_plan(path: &Path, plan: &AppPlan) -> Result<()> {
    write_json(path, &PlanFile { format_version: FORMAT_VERSION, plan: plan.clone() })
}

// ---------------------------------------------------------------------------
// trace.json — { format_version, ...RuntimeTrace }
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TraceFile {
    format_version: u32,
    #[serde(flatten)]
    trace: RuntimeTrace,
}

pub fn read_trace(path: &Path) -> Result<RuntimeTrace> {
    read_versioned(path)
}

pub fn write_trace(path: &Path, trace: &RuntimeTrace) -> Result<()> {
    write_json(path, &TraceFile { format_version: FORMAT_VERSION, trace: trace.clone() })
}

// ---------------------------------------------------------------------------
// profile.csv — model_id,tp,phase,B,x,latency_s
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    model_id: String,
    tp: u64,
    phase: PhaseKind,
    #[serde(rename = "B")]
    batch: u64,
    x: f64,
    latency_s: f64,
}

pub fn read_profile_csv(path: &Path) -> Result<Vec<ProfileSample>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut samples = Vec::new();
    for (line, row) in reader.deserialize::<ProfileRow>().enumerate() {
        let row = row.map_err(|e| {
            Error::Config(format!("{} record {}: {}", path.display(), line + 1, e))
        })?;
        samples.push(ProfileSample {
            model_id: row.model_id,
            tp: row.tp,
            phase: row.phase,
            batch: row.batch,
            x: row.x,
            latency_s: row.latency_s,
        });
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("{}: no profile samples", path.display())));
    }
    Ok(samples)
}

pub fn write_profile_csv(path: &Path, samples: &[ProfileSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    for sample in samples {
        writer.serialize(ProfileRow {
            model_id: sample.model_id.clone(),
            tp: sample.tp,
            phase: sample.phase,
            batch: sample.batch,
            x: sample.x,
            latency_s: sample.latency_s,
        })?;
    }
    writer.flush().map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// loading.csv — model_id,dp,tp,seconds
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LoadingRow {
    model_id: String,
    dp: u64,
    tp: u64,
    seconds: f64,
}

pub fn read_loading_csv(path: &Path) -> Result<Vec<LoadingSample>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut samples = Vec::new();
    for (line, row) in reader.deserialize::<LoadingRow>().enumerate() {
        let row = row.map_err(|e| {
            Error::Config(format!("{} record {}: {}", path.display(), line + 1, e))
        })?;
        if row.dp == 0 || row.tp == 0 {
            return Err(Error::Config(format!(
                "{} record {}: dp and tp must be >= 1",
                path.display(),
                line + 1
            )));
        }
        samples.push(LoadingSample {
            model_id: row.model_id,
            plan: ExecutionPlan { dp: row.dp, tp: row.tp },
            seconds: row.seconds,
        });
    }
    Ok(samples)
}

pub fn write_loading_csv(path: &Path, samples: &[LoadingSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    for sample in samples {
        writer.serialize(LoadingRow {
            model_id: sample.model_id.clone(),
            dp: sample.plan.dp,
            tp: sample.plan.tp,
            seconds: sample.seconds,
        })?;
    }
    writer.flush().map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// length trace CSV — model_id,output_len
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LengthRow {
    model_id: String,
    output_len: u64,
}

/// Reads observed output lengths grouped by model, preserving file order
/// within each model.
pub fn read_length_trace_csv(path: &Path) -> Result<BTreeMap<String, Vec<u64>>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut traces: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (line, row) in reader.deserialize::<LengthRow>().enumerate() {
        let row = row.map_err(|e| {
            Error::Config(format!("{} record {}: {}", path.display(), line + 1, e))
        })?;
        traces.entry(row.model_id).or_default().push(row.output_len);
    }
    if traces.is_empty() {
        return Err(Error::Config(format!("{}: no length observations", path.display())));
    }
    Ok(traces)
}

pub fn write_length_trace_csv(path: &Path, traces: &BTreeMap<String, Vec<u64>>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    for (model_id, lengths) in traces {
        for &output_len in lengths {
            writer.serialize(LengthRow { model_id: model_id.clone(), output_len })?;
        }
    }
    writer.flush().map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle / known-lengths CSV — request_id,output_len
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct OracleRow {
    request_id: String,
    output_len: u64,
}

pub fn read_oracle_csv(path: &Path) -> Result<OracleWorkload> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut lengths = BTreeMap::new();
    for (line, row) in reader.deserialize::<OracleRow>().enumerate() {
        let row = row.map_err(|e| {
            Error::Config(format!("{} record {}: {}", path.display(), line + 1, e))
        })?;
        if lengths.insert(row.request_id.clone(), row.output_len).is_some() {
            return Err(Error::Config(format!(
                "{} record {}: duplicate request id '{}'",
                path.display(),
                line + 1,
                row.request_id
            )));
        }
    }
    Ok(OracleWorkload(lengths))
}

pub fn write_oracle_csv(path: &Path, oracle: &OracleWorkload) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    for (request_id, &output_len) in &oracle.0 {
        writer.serialize(OracleRow { request_id: request_id.clone(), output_len })?;
    }
    writer.flush().map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// iteration dump CSV — t_start,kind,B,s,S,flops,latency
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct IterationRow<'a> {
    t_start: f64,
    kind: &'a str,
    #[serde(rename = "B")]
    batch: u64,
    s: u64,
    #[serde(rename = "S")]
    total: u64,
    flops: f64,
    latency: f64,
}

/// Dumps committed iterations in execution order (start time, then replica).
pub fn write_iterations_csv(path: &Path, iterations: &[IterationRecord]) -> Result<()> {
    let mut rows: Vec<&IterationRecord> = iterations.iter().collect();
    rows.sort_by(|a, b| {
        a.start
            .partial_cmp(&b.start)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.replica.cmp(&b.replica))
    });
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    for record in rows {
        writer.serialize(IterationRow {
            t_start: record.start,
            kind: record.descriptor.kind.as_str(),
            batch: record.descriptor.batch,
            s: record.descriptor.max_len,
            total: record.descriptor.total_len,
            flops: record.flops,
            latency: record.latency,
        })?;
    }
    writer.flush().map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    Ok(())
}
