//! File-based commands. Each reads its inputs from and writes its outputs
//! to one output directory:
//!
//! ```text
//! out/dataset/{manifest.json,train.f32,test.f32}
//! out/index.rdxi
//! out/ckpt/final.rdxc
//! out/runlog.jsonl
//! out/report.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Arm, RunConfig};
use super::dataset::{generate_dataset, Dataset};
use super::metrics::EvalReport;
use super::run::{arm_prompt, global_static_summary, index_for, judge, runlog_jsonl, sha256_hex, Experiment};
use super::HarnessError;
use crate::format::{parse_output, FailureReason};
use crate::policy::{checkpoint_bytes, load_checkpoint, Policy, PolicyError};
use crate::retrieval::{load_index, save_index, EmbeddingIndex};
use crate::saliency::{jet_overlay, saliency_map};
use crate::{GrayImage, Label};

/// Artifact locations under an output directory.
#[derive(Clone, Debug)]
pub struct OutDir(pub PathBuf);

impl OutDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(path.into())
    }

    pub fn dataset(&self) -> PathBuf {
        self.0.join("dataset")
    }

    pub fn index(&self) -> PathBuf {
        self.0.join("index.rdxi")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("ckpt").join("final.rdxc")
    }

    pub fn runlog(&self) -> PathBuf {
        self.0.join("runlog.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }

    pub fn ablation(&self) -> PathBuf {
        self.0.join("ablation.json")
    }
}

fn load_dataset(out: &OutDir, config: &RunConfig) -> Result<Dataset, HarnessError> {
    let dataset = Dataset::load(out.dataset())?;
    if dataset.spec != config.resolved().data {
        return Err(HarnessError::Data(
            "dataset on disk was generated with a different spec or seed".into(),
        ));
    }
    Ok(dataset)
}

fn load_arm_index(out: &OutDir, arm: Arm) -> Result<Option<EmbeddingIndex>, HarnessError> {
    if arm != Arm::FullRag {
        return Ok(None);
    }
    let path = out.index();
    if !path.exists() {
        return Err(HarnessError::Data(format!(
            "{} is missing; run build-index first",
            path.display()
        )));
    }
    Ok(Some(load_index(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_trained(out: &OutDir, config: &RunConfig) -> Result<Policy, HarnessError> {
    let path = out.checkpoint();
    if !path.exists() {
        return Err(HarnessError::Data(format!("{} is missing; run train first", path.display())));
    }
    let resolved = config.resolved();
    match load_checkpoint(&path, Some(&resolved.policy)) {
        Err(PolicyError::Checkpoint(m)) if m.contains("different policy config") => Err(HarnessError::Config(m)),
        other => Ok(other?),
    }
}

/// Generates the dataset and returns its content hash.
pub fn cmd_gen_data(config: &RunConfig, out: &OutDir) -> Result<String, HarnessError> {
    config.validate()?;
    let dataset = generate_dataset(&config.resolved().data)?;
    dataset.save(out.dataset())?;
    Ok(dataset.content_hash())
}

/// Encodes the training images with the initial encoder and saves the index.
pub fn cmd_build_index(config: &RunConfig, out: &OutDir) -> Result<EmbeddingIndex, HarnessError> {
    config.validate()?;
    let dataset = load_dataset(out, config)?;
    let initial = Policy::new(config.resolved().policy, config.seed)?;
    let index = index_for(&initial, &dataset)?;
    save_index(&index, out.index())?;
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arm: Arm,
    pub steps: usize,
    pub checkpoint_sha256: String,
    pub runlog_sha256: String,
    pub final_accuracy: Option<f64>,
}

/// Trains the configured arm, writing the checkpoint and the run log.
pub fn cmd_train(config: &RunConfig, out: &OutDir) -> Result<TrainSummary, HarnessError> {
    config.validate()?;
    let dataset = load_dataset(out, config)?;
    let index = load_arm_index(out, config.arm)?;
    let exp = Experiment::from_parts(config, dataset, index)?;
    let (policy, log) = exp.train(config.arm)?;
    let bytes = checkpoint_bytes(&policy);
    fs::create_dir_all(out.checkpoint().parent().expect("checkpoint has a parent"))?;
    fs::write(out.checkpoint(), &bytes)?;
    let runlog = runlog_jsonl(&log);
    fs::write(out.runlog(), &runlog)?;
    let final_accuracy = log.iter().rev().find_map(|r| match r {
        super::run::LogRecord::Eval(e) => Some(e.accuracy),
        _ => None,
    });
    Ok(TrainSummary {
        arm: config.arm,
        steps: config.steps,
        checkpoint_sha256: sha256_hex(&bytes),
        runlog_sha256: sha256_hex(runlog.as_bytes()),
        final_accuracy,
    })
}

/// Evaluates the trained checkpoint on the test split and writes `report.json`.
pub fn cmd_eval(config: &RunConfig, out: &OutDir) -> Result<EvalReport, HarnessError> {
    config.validate()?;
    let policy = load_trained(out, config)?;
    let dataset = load_dataset(out, config)?;
    let index = load_arm_index(out, config.arm)?;
    let exp = Experiment::from_parts(config, dataset, index)?;
    let report = exp.evaluate(&policy, config.arm)?;
    write_json(&out.report(), &report)?;
    Ok(report)
}

/// Where `infer` takes its image from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    /// Binary PGM (`P5`, 8-bit) or a raw little-endian `f32` grid (`.f32`).
    File(PathBuf),
    /// An item of the stored test split.
    TestItem(usize),
}

/// Reads a grayscale image; pixels must lie in `[0, 1]` after scaling.
pub fn read_image(path: &Path, size: usize) -> Result<GrayImage, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let bad = |m: &str| HarnessError::Data(format!("{}: {m}", path.display()));
    let pixels: Vec<f64> = if bytes.starts_with(b"P5") {
        let mut fields = Vec::new();
        let mut pos = 2;
        while fields.len() < 3 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            let field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad("malformed PGM header"))?;
            fields.push(field);
        }
        let (w, h, max) = (fields[0], fields[1], fields[2]);
        if w != size || h != size {
            return Err(bad(&format!("expected {size}x{size}, got {w}x{h}")));
        }
        if max == 0 || max > 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        let data = bytes.get(pos + 1..).filter(|d| d.len() == w * h).ok_or_else(|| bad("truncated PGM"))?;
        data.iter().map(|&b| f64::from(b) / max as f64).collect()
    } else if path.extension().is_some_and(|e| e == "f32") {
        if bytes.len() != size * size * 4 {
            return Err(bad(&format!("expected {} bytes", size * size * 4)));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        return Err(bad("unrecognized image format"));
    };
    GrayImage::new(size, size, pixels).map_err(|m| bad(&m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutcome {
    pub raw: String,
    pub verdict: Option<Label>,
    pub think: Option<String>,
    pub failure_reason: Option<FailureReason>,
    pub saliency: Option<PathBuf>,
}

impl InferOutcome {
    /// Human-readable lines as printed by the binary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        match (self.verdict, &self.failure_reason) {
            (Some(v), _) => {
                writeln!(s, "verdict: {v}").unwrap();
                writeln!(s, "think: {}", self.think.as_deref().unwrap_or("")).unwrap();
            }
            (None, reason) => {
                writeln!(s, "verdict: UNPARSEABLE").unwrap();
                let reason = reason.map_or("unknown".to_string(), |r| r.to_string());
                writeln!(s, "failure_reason: {reason}").unwrap();
                writeln!(s, "raw: {}", self.raw).unwrap();
            }
        }
        if let Some(p) = &self.saliency {
            writeln!(s, "saliency: {}", p.display()).unwrap();
        }
        s
    }

    pub fn from_text(raw: String, saliency: Option<PathBuf>) -> Self {
        let v = parse_output(&raw);
        Self {
            verdict: v.answer(),
            think: v.parsed().map(|p| p.think_text.clone()),
            failure_reason: v.failure_reason(),
            raw,
            saliency,
        }
    }
}

/// Greedy verdict for one image from the trained checkpoint, with an
/// optional jet overlay of the attention-rollout saliency.
pub fn cmd_infer(
    config: &RunConfig,
    out: &OutDir,
    source: &ImageSource,
    saliency: Option<&Path>,
) -> Result<InferOutcome, HarnessError> {
    config.validate()?;
    let resolved = config.resolved();
    let policy = load_trained(out, config)?;
    let size = resolved.data.width;
    let dataset = load_dataset(out, config)?;
    let image = match source {
        ImageSource::File(p) => read_image(p, size)?,
        ImageSource::TestItem(i) => dataset
            .test
            .get(*i)
            .ok_or_else(|| HarnessError::Data(format!("test item {i} out of range")))?
            .image
            .clone(),
    };
    let initial = Policy::new(resolved.policy.clone(), resolved.seed)?;
    if initial.frozen_hash() != policy.frozen_hash() {
        return Err(HarnessError::Config("checkpoint was not trained with this seed".into()));
    }
    let labels: Vec<Label> = dataset.train.iter().map(|it| it.label).collect();
    let static_text = global_static_summary(&labels, resolved.k)?;
    let retrieved = match load_arm_index(out, resolved.arm)? {
        Some(index) => Some(index.top_k(&initial.encode_image(&image)?.cls_unit, resolved.k)?),
        None => None,
    };
    let prompt = arm_prompt(&initial, resolved.arm, &static_text, retrieved.as_ref())?;
    let features = policy.features(&image)?;
    let judgement = judge(&policy, &features, &prompt, None)?;
    let overlay = match saliency {
        Some(path) => {
            let enc = policy.encode_features(&features)?;
            let c = policy.config();
            let map = saliency_map(&enc.attention, c.grid(), size, size, false)?;
            jet_overlay(image.pixels(), &map, 0.5)?.write_ppm(path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };
    Ok(InferOutcome::from_text(judgement.text, overlay))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub grpo: bool,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: Arm, grpo: bool) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.arm == arm && r.grpo == grpo).map(|r| &r.report)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "| arm | training | ACC | REAL ACC | REAL F1 | FAKE ACC | FAKE F1 | format |").unwrap();
        writeln!(s, "|---|---|---|---|---|---|---|---|").unwrap();
        for r in &self.rows {
            let e = &r.report;
            writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {:.3} | {:.2} | {:.3} | {:.3} |",
                r.arm,
                if r.grpo { "base+grpo" } else { "base" },
                e.accuracy,
                e.real.accuracy,
                e.real.f1,
                e.fake.accuracy,
                e.fake.f1,
                e.format_compliance
            )
            .unwrap();
        }
        s
    }
}

/// Trains every arm with the same budget and evaluates each with and
/// without GRPO. Generates the dataset and index first when absent.
pub fn cmd_ablate(config: &RunConfig, out: &OutDir) -> Result<AblationTable, HarnessError> {
    config.validate()?;
    if !out.dataset().join(super::dataset::MANIFEST_FILE).exists() {
        cmd_gen_data(config, out)?;
    }
    if !out.index().exists() {
        cmd_build_index(config, out)?;
    }
    let dataset = load_dataset(out, config)?;
    let exp = Experiment::from_parts(config, dataset, Some(load_index(out.index())?))?;
    let mut rows = Vec::new();
    for arm in Arm::ALL {
        let base = exp.evaluate(exp.initial_policy(), arm)?;
        rows.push(AblationRow { arm, grpo: false, report: base });
        let (trained, _) = exp.train(arm)?;
        rows.push(AblationRow { arm, grpo: true, report: exp.evaluate(&trained, arm)? });
    }
    let table = AblationTable {
        seed: config.seed,
        steps: config.steps,
        rows,
    };
    write_json(&out.ablation(), &table)?;
    fs::write(out.0.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}
