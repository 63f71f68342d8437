//! The three-stage curation pipeline: instruction generation, image
//! editing, and unified post-verification, with checkpointed resumable
//! execution and stage-volume accounting.
//!
//! Stage outputs are append-only JSONL files in the run directory;
//! `checkpoint.json` records which inputs each stage has durably
//! completed. Resuming with an unchanged config digest skips completed
//! work and reproduces the uninterrupted run byte for byte (given
//! deterministic endpoints).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{extract_json_object, ChatRequest, EditRequest, Endpoint, GatewayError, Part};
use crate::imaging::{self, GrayImage, SsimParams};
use crate::model::{ImageRef, Triplet, TripletStatus, VerificationVerdict};
use crate::store::ArtifactStore;
use crate::taxonomy::{normalize_key, SubTask, Taxonomy};

pub const DEFAULT_GENERATE_PROMPT: &str = include_str!("../data/prompts/generate.txt");
pub const DEFAULT_VERIFY_PROMPT: &str = include_str!("../data/prompts/verify.txt");
const AESTHETIC_PROMPT: &str = "Rate the aesthetic quality of this image on a 0-10 scale. \
     Output a JSON object with exactly two keys: \"score\" (a number) and \"reason\" (a string). \
     Output JSON only.";

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("generator returned too few usable instructions: {got} < {min}")]
    TooFew { got: usize, min: usize },
    #[error("could not parse generator reply: {0}")]
    ParseFailure(String),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("imaging: {0}")]
    Imaging(#[from] imaging::ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {err}")]
    Manifest { line: usize, err: String },
    #[error("config invalid: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint belongs to a different config (digest mismatch)")]
    CheckpointMismatch,
    #[error("prev_count must be >= 1")]
    DivisionByZero,
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    InstructionGen,
    EditingGen,
    FailedEditFilter,
    Recaption,
}

impl Stage {
    pub fn display(&self) -> &'static str {
        match self {
            Stage::Initial => "Initial Images",
            Stage::InstructionGen => "Instruction Gen.",
            Stage::EditingGen => "Editing Gen.",
            Stage::FailedEditFilter => "Failed Edit Filter",
            Stage::Recaption => "Recaption",
        }
    }
}

/// Record-count accounting for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: Stage,
    pub count_in: u64,
    pub count_out: u64,
}

/// Percentage change between consecutive stage counts, rounded half away
/// from zero to 2 decimals.
pub fn compute_stage_ratio(prev_count: u64, next_count: u64) -> Result<f64, CurationError> {
    if prev_count == 0 {
        return Err(CurationError::DivisionByZero);
    }
    let change = 100.0 * (next_count as f64 / prev_count as f64 - 1.0);
    Ok(crate::scoring::round_report(change, 2))
}

/// Check the per-stage conservation laws over a full stats list.
pub fn check_conservation(stats: &[StageStats]) -> Result<(), String> {
    for pair in stats.windows(2) {
        if pair[1].count_in != pair[0].count_out {
            return Err(format!(
                "count_in({:?}) = {} != count_out({:?}) = {}",
                pair[1].stage, pair[1].count_in, pair[0].stage, pair[0].count_out
            ));
        }
    }
    Ok(())
}

/// One source image in the input manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceImage {
    pub id: String,
    pub image: ImageRef,
}

/// Read a line-delimited JSON manifest of any record type.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CurationError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CurationError::Manifest {
            line: i + 1,
            err: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Append records to a JSONL file, one per line.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CurationError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for r in records {
        serde_json::to_writer(&mut file, r)
            .map_err(|e| CurationError::Manifest { line: 0, err: e.to_string() })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CurationError> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        for r in records {
            serde_json::to_writer(&mut file, r)
                .map_err(|e| CurationError::Manifest { line: 0, err: e.to_string() })?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Prompt the generator for 3-7 content-aware instructions, each tagged
/// with a distinct sub-task. Duplicate instruction texts (after
/// normalization) and repeated sub-tasks are dropped; the reply is
/// rejected when fewer than `min_n` usable items remain.
pub fn generate_instructions(
    generator: &Endpoint,
    image: &ImageRef,
    taxonomy: &Taxonomy,
    min_n: usize,
    max_n: usize,
    prompt_template: &str,
) -> Result<Vec<(SubTask, String)>, CurationError> {
    let taxonomy_text: String = taxonomy
        .records()
        .iter()
        .map(|r| format!("- {}: {}\n", r.key, r.description))
        .collect();
    let text = prompt_template
        .replace("<min_n>", &min_n.to_string())
        .replace("<max_n>", &max_n.to_string())
        .replace("<taxonomy>", &taxonomy_text);
    let req = ChatRequest {
        system: None,
        parts: vec![
            Part::Text { text },
            Part::Image {
                image: image.clone(),
                media_type: "image/png".to_string(),
            },
        ],
        temperature: generator.config().temperature,
        max_tokens: generator.config().max_tokens,
    };
    let reply = generator.chat(&req)?;
    let candidates = parse_instruction_reply(&reply, taxonomy)?;

    let mut seen_text = HashSet::new();
    let mut seen_subtask = HashSet::new();
    let mut out = Vec::new();
    for (subtask, instruction) in candidates {
        let norm = normalize_key(&instruction);
        if !seen_text.insert(norm) || !seen_subtask.insert(subtask.key.clone()) {
            continue;
        }
        out.push((subtask, instruction));
        if out.len() == max_n {
            break;
        }
    }
    if out.len() < min_n {
        return Err(CurationError::TooFew {
            got: out.len(),
            min: min_n,
        });
    }
    Ok(out)
}

/// Parse a generator reply: a JSON object with an `instructions` list, a
/// bare JSON array, or numbered lines of the form `1. [subtask] text`.
fn parse_instruction_reply(
    reply: &str,
    taxonomy: &Taxonomy,
) -> Result<Vec<(SubTask, String)>, CurationError> {
    let mut items: Vec<(String, String)> = Vec::new();

    if let Ok(v) = extract_json_object(reply) {
        if let Some(list) = v["instructions"].as_array() {
            for item in list {
                if let (Some(st), Some(text)) =
                    (item["subtask"].as_str(), item["instruction"].as_str())
                {
                    items.push((st.to_string(), text.to_string()));
                }
            }
        }
    }
    if items.is_empty() {
        // numbered list fallback: "1. [subtask] instruction text"
        for line in reply.lines() {
            let line = line.trim();
            let Some(rest) = line
                .strip_prefix(|c: char| c.is_ascii_digit())
                .map(|r| r.trim_start_matches(|c: char| c.is_ascii_digit()))
                .and_then(|r| r.strip_prefix('.').or_else(|| r.strip_prefix(')')))
            else {
                continue;
            };
            let rest = rest.trim();
            if let Some(end) = rest.strip_prefix('[').and_then(|r| r.find(']')) {
                let subtask = &rest[1..=end];
                let text = rest[end + 2..].trim();
                if !text.is_empty() {
                    items.push((subtask.to_string(), text.to_string()));
                }
            }
        }
    }
    if items.is_empty() {
        return Err(CurationError::ParseFailure(
            "no instruction list found in reply".to_string(),
        ));
    }
    // unknown sub-tasks are dropped, not fatal
    Ok(items
        .into_iter()
        .filter_map(|(st, text)| taxonomy.classify(&st).ok().map(|s| (s, text)))
        .collect())
}

/// Run the editing stage over a slice of pending triplets. Per-triplet
/// failures mark the triplet `RejectedOther` and never abort the run;
/// output preserves input order.
pub fn run_edit_stage(
    triplets: &[Triplet],
    editor: &Endpoint,
    store: &ArtifactStore,
    seed: Option<u64>,
) -> Vec<Triplet> {
    let results: Vec<Triplet> = std::thread::scope(|scope| {
        let handles: Vec<_> = triplets
            .iter()
            .map(|t| {
                scope.spawn(move || {
                    let mut t = t.clone();
                    debug_assert_eq!(t.status, TripletStatus::Pending);
                    let req = EditRequest {
                        source: t.original.clone(),
                        instruction: t.instruction.clone(),
                        seed,
                    };
                    match editor.edit_image(&req, store) {
                        Ok(edited) => {
                            t.edited = Some(edited);
                            t.status = TripletStatus::Edited;
                            t.provenance.push("editing_gen".to_string());
                        }
                        Err(e) => {
                            t.status = TripletStatus::RejectedOther;
                            t.provenance.push(format!("editing_gen:failed:{e}"));
                        }
                    }
                    t
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    results
}

/// Send the multi-step verification prompt with both images and apply the
/// verdict. Unparseable replies get one re-prompt retry, then the triplet
/// is rejected with reason `verifier_unparseable`.
pub fn verify_triplet(
    triplet: &Triplet,
    verifier: &Endpoint,
    prompt_template: &str,
) -> (Option<VerificationVerdict>, Triplet) {
    let mut t = triplet.clone();
    debug_assert_eq!(t.status, TripletStatus::Edited);
    let edited = t.edited.clone().expect("edited triplet has edited image");

    let build = |nudge: bool| {
        let mut text = prompt_template.replace("<instruction>", &t.instruction);
        if nudge {
            text.push_str("\nReply with the JSON object only.");
        }
        ChatRequest {
            system: None,
            parts: vec![
                Part::Text { text },
                Part::Image {
                    image: t.original.clone(),
                    media_type: "image/png".to_string(),
                },
                Part::Image {
                    image: edited.clone(),
                    media_type: "image/png".to_string(),
                },
            ],
            temperature: verifier.config().temperature,
            max_tokens: verifier.config().max_tokens,
        }
    };

    for attempt in 0..2 {
        let reply = match verifier.chat(&build(attempt == 1)) {
            Ok(r) => r,
            Err(e) => {
                t.status = TripletStatus::RejectedOther;
                t.provenance.push(format!("verify:failed:{e}"));
                return (None, t);
            }
        };
        if let Some(verdict) = parse_verdict(&reply) {
            if verdict.is_changed {
                t.status = TripletStatus::Verified;
                t.refined_instruction = Some(verdict.refined_instruction.clone());
                t.provenance.push("verify:changed".to_string());
            } else {
                t.status = TripletStatus::RejectedNoEdit;
                t.provenance.push("verify:no_edit".to_string());
            }
            return (Some(verdict), t);
        }
    }
    t.status = TripletStatus::RejectedOther;
    t.provenance.push("verify:verifier_unparseable".to_string());
    (None, t)
}

fn parse_verdict(reply: &str) -> Option<VerificationVerdict> {
    let v = extract_json_object(reply).ok()?;
    let is_changed = v["is_changed"].as_bool()?;
    let refined = v["instruction"]
        .as_str()
        .or_else(|| v["refined_instruction"].as_str())
        .unwrap_or("")
        .to_string();
    if is_changed && refined.is_empty() {
        return None;
    }
    Some(VerificationVerdict {
        is_changed,
        refined_instruction: refined,
        raw_reply: reply.to_string(),
    })
}

/// SSIM no-edit baseline: flag a triplet as no-edit iff
/// ssim(original, edited) ≥ threshold. Both images are square-cropped
/// and resized to a common side first. Used only for A/B comparison
/// against the learned verifier.
pub fn ssim_no_edit_baseline(
    triplet: &Triplet,
    store: &ArtifactStore,
    params: &SsimParams,
    threshold: f64,
) -> Result<bool, CurationError> {
    let edited = triplet
        .edited
        .as_ref()
        .ok_or_else(|| CurationError::ConfigInvalid("triplet has no edited image".to_string()))?;
    let a = GrayImage::decode(&store.read_uri(&triplet.original.uri)?)?;
    let b = GrayImage::decode(&store.read_uri(&edited.uri)?)?;
    let side = a
        .width
        .min(a.height)
        .min(b.width.min(b.height))
        .min(256)
        .max(params.window);
    let a = imaging::center_crop_resize(&a, side, 1.0)?;
    let b = imaging::center_crop_resize(&b, side, 1.0)?;
    Ok(imaging::ssim(&a, &b, params)? >= threshold)
}

/// Pipeline knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Instructions kept per image (sub-task-balanced round-robin).
    pub k_per_image: usize,
    pub min_instructions: usize,
    pub max_instructions: usize,
    pub crop_threshold: f64,
    /// Triplets per durable checkpoint batch.
    pub checkpoint_batch: usize,
    /// Optional per-invocation operation budget; the run checkpoints and
    /// stops once the budget is spent (resume to continue).
    pub max_stage_ops: Option<usize>,
    /// Reject verified triplets whose aesthetic score falls below this
    /// (requires an aesthetic endpoint).
    pub aesthetic_threshold: Option<f64>,
    pub edit_seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_per_image: 4,
            min_instructions: 3,
            max_instructions: 7,
            crop_threshold: imaging::DEFAULT_CROP_THRESHOLD,
            checkpoint_batch: 64,
            max_stage_ops: None,
            aesthetic_threshold: None,
            edit_seed: None,
        }
    }
}

/// The endpoints a curation run needs.
pub struct PipelineEndpoints {
    pub generator: Endpoint,
    pub editor: Endpoint,
    pub verifier: Endpoint,
    pub aesthetic: Option<Endpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    run_id: String,
    config_digest: String,
    gen_done: Vec<String>,
    edit_done: Vec<String>,
    verify_done: Vec<String>,
}

fn config_digest(cfg: &PipelineConfig, taxonomy_version: u32) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(taxonomy_version.to_le_bytes());
    hex::encode(h.finalize())
}

fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), CurationError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(cp).expect("checkpoint serializes"))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Outcome of a pipeline invocation.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub stats: Vec<StageStats>,
    pub manifest_path: PathBuf,
    pub stats_path: PathBuf,
    /// True when the run stopped on the operation budget and needs a
    /// resume to finish.
    pub interrupted: bool,
}

/// Execute (or resume) a curation run in `run_dir`.
pub fn run_pipeline(
    run_dir: &Path,
    run_id: &str,
    sources: &[SourceImage],
    endpoints: &PipelineEndpoints,
    store: &ArtifactStore,
    taxonomy: &Taxonomy,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, CurationError> {
    if cfg.k_per_image == 0 || cfg.checkpoint_batch == 0 {
        return Err(CurationError::ConfigInvalid(
            "k_per_image and checkpoint_batch must be >= 1".to_string(),
        ));
    }
    std::fs::create_dir_all(run_dir)?;
    let cp_path = run_dir.join("checkpoint.json");
    let instructions_path = run_dir.join("instructions.jsonl");
    let edited_path = run_dir.join("edited.jsonl");
    let verified_path = run_dir.join("verified.jsonl");

    let digest = config_digest(cfg, taxonomy.version);
    let mut cp = if cp_path.exists() {
        let cp: Checkpoint = serde_json::from_slice(&std::fs::read(&cp_path)?)
            .map_err(|e| CurationError::ConfigInvalid(e.to_string()))?;
        if cp.config_digest != digest {
            return Err(CurationError::CheckpointMismatch);
        }
        cp
    } else {
        Checkpoint {
            run_id: run_id.to_string(),
            config_digest: digest,
            gen_done: Vec::new(),
            edit_done: Vec::new(),
            verify_done: Vec::new(),
        }
    };

    let mut budget = cfg.max_stage_ops;
    let spend = |n: usize, budget: &mut Option<usize>| -> bool {
        match budget {
            None => true,
            Some(left) => {
                if *left >= n {
                    *left -= n;
                    true
                } else {
                    false
                }
            }
        }
    };

    // ── Stage: instruction generation ────────────────────────────────
    let admitted: Vec<&SourceImage> = sources
        .iter()
        .filter(|s| imaging::admit_image(s.image.width, s.image.height, cfg.crop_threshold))
        .collect();

    let mut triplets: Vec<Triplet> = if instructions_path.exists() {
        read_jsonl(&instructions_path)?
    } else {
        Vec::new()
    };
    // rebuild the balanced round-robin counters from prior output
    let mut subtask_counts: HashMap<String, usize> = HashMap::new();
    for t in &triplets {
        *subtask_counts.entry(t.subtask.key.clone()).or_insert(0) += 1;
    }
    let gen_done: HashSet<String> = cp.gen_done.iter().cloned().collect();
    let pending_images: Vec<&SourceImage> = admitted
        .iter()
        .filter(|s| !gen_done.contains(&s.id))
        .copied()
        .collect();

    let mut interrupted = false;
    for batch in pending_images.chunks(cfg.checkpoint_batch) {
        if !spend(batch.len(), &mut budget) {
            interrupted = true;
            break;
        }
        // generation calls run concurrently; selection is sequential so
        // the round-robin counters stay deterministic
        let generated: Vec<Result<Vec<(SubTask, String)>, CurationError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|s| {
                        scope.spawn(|| {
                            generate_instructions(
                                &endpoints.generator,
                                &s.image,
                                taxonomy,
                                cfg.min_instructions,
                                cfg.max_instructions,
                                DEFAULT_GENERATE_PROMPT,
                            )
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });

        let mut new_triplets = Vec::new();
        for (src, result) in batch.iter().zip(generated) {
            match result {
                Ok(candidates) => {
                    let mut ranked: Vec<(usize, &(SubTask, String))> =
                        candidates.iter().enumerate().collect();
                    ranked.sort_by_key(|(i, (st, _))| {
                        (*subtask_counts.get(&st.key).unwrap_or(&0), *i)
                    });
                    for (seq, (_, (subtask, instruction))) in
                        ranked.into_iter().take(cfg.k_per_image).enumerate()
                    {
                        *subtask_counts.entry(subtask.key.clone()).or_insert(0) += 1;
                        new_triplets.push(Triplet::new(
                            format!("{}-{}-{}", src.id, subtask.key, seq),
                            src.image.clone(),
                            instruction.clone(),
                            subtask.clone(),
                        ));
                    }
                }
                Err(e) => {
                    log::warn!("instruction generation failed for {}: {e}", src.id);
                }
            }
            cp.gen_done.push(src.id.clone());
        }
        append_jsonl(&instructions_path, &new_triplets)?;
        triplets.extend(new_triplets);
        save_checkpoint(&cp_path, &cp)?;
    }

    // ── Stage: editing ───────────────────────────────────────────────
    let mut edited: Vec<Triplet> = if edited_path.exists() {
        read_jsonl(&edited_path)?
    } else {
        Vec::new()
    };
    if !interrupted {
        let edit_done: HashSet<String> = cp.edit_done.iter().cloned().collect();
        let pending: Vec<&Triplet> =
            triplets.iter().filter(|t| !edit_done.contains(&t.id)).collect();
        for batch in pending.chunks(cfg.checkpoint_batch) {
            if !spend(batch.len(), &mut budget) {
                interrupted = true;
                break;
            }
            let owned: Vec<Triplet> = batch.iter().map(|t| (*t).clone()).collect();
            let results = run_edit_stage(&owned, &endpoints.editor, store, cfg.edit_seed);
            for t in &results {
                cp.edit_done.push(t.id.clone());
            }
            append_jsonl(&edited_path, &results)?;
            edited.extend(results);
            save_checkpoint(&cp_path, &cp)?;
        }
    }

    // ── Stage: unified post-verification ─────────────────────────────
    let mut verified: Vec<Triplet> = if verified_path.exists() {
        read_jsonl(&verified_path)?
    } else {
        Vec::new()
    };
    if !interrupted {
        let verify_done: HashSet<String> =
            cp.verify_done.iter().cloned().collect();
        let pending: Vec<&Triplet> =
            edited.iter().filter(|t| !verify_done.contains(&t.id)).collect();
        for batch in pending.chunks(cfg.checkpoint_batch) {
            if !spend(batch.len(), &mut budget) {
                interrupted = true;
                break;
            }
            let results: Vec<Triplet> = std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|t| {
                        scope.spawn(|| {
                            if t.status != TripletStatus::Edited {
                                return (*t).clone(); // editing-stage rejects pass through
                            }
                            let (_, mut out) =
                                verify_triplet(t, &endpoints.verifier, DEFAULT_VERIFY_PROMPT);
                            if out.status == TripletStatus::Verified {
                                if let (Some(ep), Some(threshold)) =
                                    (&endpoints.aesthetic, cfg.aesthetic_threshold)
                                {
                                    match aesthetic_score(ep, out.edited.as_ref().unwrap()) {
                                        Ok(score) if score < threshold => {
                                            out.status = TripletStatus::RejectedOther;
                                            out.refined_instruction = None;
                                            out.provenance
                                                .push(format!("aesthetic:below:{score:.2}"));
                                        }
                                        Ok(_) => {}
                                        Err(e) => {
                                            log::warn!("aesthetic scoring failed: {e}");
                                        }
                                    }
                                }
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            for t in &results {
                cp.verify_done.push(t.id.clone());
            }
            append_jsonl(&verified_path, &results)?;
            verified.extend(results);
            save_checkpoint(&cp_path, &cp)?;
        }
    }

    // ── Final manifest and stats ─────────────────────────────────────
    let manifest_path = run_dir.join("manifest.jsonl");
    let stats_path = run_dir.join("stage_stats.json");
    let mut stats = Vec::new();
    if !interrupted {
        let mut final_triplets = verified.clone();
        final_triplets.sort_by(|a, b| a.id.cmp(&b.id));
        write_jsonl(&manifest_path, &final_triplets)?;

        let n_verified = final_triplets
            .iter()
            .filter(|t| t.status == TripletStatus::Verified)
            .count() as u64;
        stats = vec![
            StageStats {
                stage: Stage::Initial,
                count_in: sources.len() as u64,
                count_out: admitted.len() as u64,
            },
            StageStats {
                stage: Stage::InstructionGen,
                count_in: admitted.len() as u64,
                count_out: triplets.len() as u64,
            },
            StageStats {
                stage: Stage::EditingGen,
                count_in: triplets.len() as u64,
                count_out: edited.len() as u64,
            },
            StageStats {
                stage: Stage::FailedEditFilter,
                count_in: edited.len() as u64,
                count_out: n_verified,
            },
            StageStats {
                stage: Stage::Recaption,
                count_in: n_verified,
                count_out: n_verified,
            },
        ];
        std::fs::write(
            &stats_path,
            serde_json::to_vec_pretty(&stats).expect("stats serialize"),
        )?;
    }

    Ok(PipelineOutcome {
        stats,
        manifest_path,
        stats_path,
        interrupted,
    })
}

fn aesthetic_score(endpoint: &Endpoint, image: &ImageRef) -> Result<f64, CurationError> {
    let req = ChatRequest {
        system: None,
        parts: vec![
            Part::Text {
                text: AESTHETIC_PROMPT.to_string(),
            },
            Part::Image {
                image: image.clone(),
                media_type: "image/png".to_string(),
            },
        ],
        temperature: 0.0,
        max_tokens: 256,
    };
    let reply = endpoint.chat(&req)?;
    let v = extract_json_object(&reply)?;
    v["score"]
        .as_f64()
        .ok_or_else(|| CurationError::ParseFailure("aesthetic score missing".to_string()))
}

/// Render the stage table in the volume-statistics format, with computed
/// Δ ratios.
pub fn format_stage_table(stats: &[StageStats]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>12} {:>12}\n",
        "Processing Stage", "Δ Ratio(%)", "Data Volume"
    ));
    let mut prev: Option<u64> = None;
    for s in stats {
        let ratio = match (prev, s.stage) {
            (Some(p), Stage::EditingGen | Stage::FailedEditFilter | Stage::InstructionGen)
                if p > 0 =>
            {
                format!("{:+.2}", compute_stage_ratio(p, s.count_out).unwrap())
            }
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<22} {:>12} {:>12}\n",
            s.stage.display(),
            ratio,
            s.count_out
        ));
        prev = Some(s.count_out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{mock_endpoint_config, MockTransport};
    use crate::gateway::Endpoint;
    use std::sync::Arc;

    fn mock_endpoint(mock: &Arc<MockTransport>) -> Endpoint {
        Endpoint::new(mock_endpoint_config(8), mock.clone()).unwrap()
    }

    fn test_image(store: &ArtifactStore, value: f64) -> ImageRef {
        let img = GrayImage::constant(16, 16, value);
        store.put_image(&img.encode_png().unwrap(), "png").unwrap()
    }

    #[test]
    fn stage_ratio_published_rows() {
        assert_eq!(compute_stage_ratio(22368563, 15651530).unwrap(), -30.03);
        assert_eq!(compute_stage_ratio(15651530, 11586583).unwrap(), -25.97);
        assert_eq!(compute_stage_ratio(12345, 12345).unwrap(), 0.00);
        assert_eq!(compute_stage_ratio(5001199, 22368563).unwrap(), 347.26);
        assert!(matches!(
            compute_stage_ratio(0, 5),
            Err(CurationError::DivisionByZero)
        ));
    }

    #[test]
    fn stage_ratios_compose() {
        let (x, y, z) = (5001199u64, 22368563u64, 15651530u64);
        let r1 = compute_stage_ratio(x, y).unwrap();
        let r2 = compute_stage_ratio(y, z).unwrap();
        let composed = (1.0 + r1 / 100.0) * (1.0 + r2 / 100.0);
        assert!((composed - z as f64 / x as f64).abs() < 1e-3);
    }

    #[test]
    fn generate_instructions_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let image = test_image(&store, 0.5);
        let mock = MockTransport::new();
        mock.set_chat_hook(|_| {
            Some(
                serde_json::json!({"instructions": [
                    {"subtask": "subject_addition", "instruction": "add a red bird"},
                    {"subtask": "color_alteration", "instruction": "make the sky pink"},
                    {"subtask": "style_transfer", "instruction": "render as watercolor"},
                    {"subtask": "subject_removal", "instruction": "remove the bench"},
                    {"subtask": "spatial_reasoning", "instruction": "move the cup left of the plate"},
                ]})
                .to_string(),
            )
        });
        let ep = mock_endpoint(&mock);
        let tax = Taxonomy::default_taxonomy();
        let got = generate_instructions(&ep, &image, tax, 3, 7, DEFAULT_GENERATE_PROMPT).unwrap();
        assert_eq!(got.len(), 5);
        let keys: HashSet<_> = got.iter().map(|(st, _)| st.key.clone()).collect();
        assert_eq!(keys.len(), 5);
    }

    #[test]
    fn generate_instructions_dedup_and_cap() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let image = test_image(&store, 0.5);
        let mock = MockTransport::new();
        // 9 items, 3 duplicated texts, one repeated sub-task
        mock.set_chat_hook(|_| {
            let keys = [
                "subject_addition",
                "subject_removal",
                "subject_replacement",
                "color_alteration",
                "style_transfer",
                "motion_change",
                "texture_editing",
                "background_change",
                "counting_change",
            ];
            let items: Vec<serde_json::Value> = keys
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    // items 6..9 repeat earlier instruction texts
                    let text = if i >= 6 {
                        format!("instruction {}", i - 6)
                    } else {
                        format!("instruction {i}")
                    };
                    serde_json::json!({"subtask": k, "instruction": text})
                })
                .collect();
            Some(serde_json::json!({ "instructions": items }).to_string())
        });
        let ep = mock_endpoint(&mock);
        let tax = Taxonomy::default_taxonomy();
        let got = generate_instructions(&ep, &image, tax, 3, 7, DEFAULT_GENERATE_PROMPT).unwrap();
        assert!(got.len() <= 7);
        assert_eq!(got.len(), 6); // 3 dupes dropped from 9
    }

    #[test]
    fn generate_instructions_too_few() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let image = test_image(&store, 0.5);
        let mock = MockTransport::new();
        mock.set_chat_hook(|_| {
            Some(
                serde_json::json!({"instructions": [
                    {"subtask": "subject_addition", "instruction": "a"},
                    {"subtask": "subject_removal", "instruction": "b"},
                ]})
                .to_string(),
            )
        });
        let ep = mock_endpoint(&mock);
        let tax = Taxonomy::default_taxonomy();
        assert!(matches!(
            generate_instructions(&ep, &image, tax, 3, 7, DEFAULT_GENERATE_PROMPT),
            Err(CurationError::TooFew { got: 2, min: 3 })
        ));
    }

    fn pending_triplet(store: &ArtifactStore, id: &str, instruction: &str) -> Triplet {
        let tax = Taxonomy::default_taxonomy();
        Triplet::new(
            id.to_string(),
            test_image(store, 0.5),
            instruction.to_string(),
            tax.classify("subject_addition").unwrap(),
        )
    }

    #[test]
    fn edit_stage_identity_and_partial_failure() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let mock = MockTransport::new();
        let ep = mock_endpoint(&mock);

        let triplets: Vec<Triplet> = (0..10)
            .map(|i| pending_triplet(&store, &format!("t{i:02}"), &format!("edit {i}")))
            .collect();
        let out = run_edit_stage(&triplets, &ep, &store, None);
        assert_eq!(out.len(), 10);
        for t in &out {
            assert_eq!(t.status, TripletStatus::Edited);
            assert_eq!(
                t.edited.as_ref().unwrap().content_hash,
                t.original.content_hash
            );
        }

        // fail 2 of 10 by prompt fragment
        mock.set_edit_mode(crate::gateway::mock::MockEditMode::FailMatching(vec![
            "edit 3".to_string(),
            "edit 7".to_string(),
        ]));
        let out = run_edit_stage(&triplets, &ep, &store, None);
        let edited = out.iter().filter(|t| t.status == TripletStatus::Edited).count();
        let rejected = out
            .iter()
            .filter(|t| t.status == TripletStatus::RejectedOther)
            .count();
        assert_eq!((edited, rejected), (8, 2));

        assert!(run_edit_stage(&[], &ep, &store, None).is_empty());
    }

    #[test]
    fn verify_triplet_verdicts() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let mock = MockTransport::new();
        let ep = mock_endpoint(&mock);

        let mut t = pending_triplet(&store, "v1", "turn the car red");
        t.edited = Some(test_image(&store, 0.7));
        t.status = TripletStatus::Edited;

        mock.set_chat_hook(|_| Some(r#"{"is_changed": false, "instruction": ""}"#.to_string()));
        let (verdict, out) = verify_triplet(&t, &ep, DEFAULT_VERIFY_PROMPT);
        assert!(!verdict.unwrap().is_changed);
        assert_eq!(out.status, TripletStatus::RejectedNoEdit);
        assert!(out.refined_instruction.is_none());

        mock.set_chat_hook(|_| {
            Some(r#"{"is_changed": true, "instruction": "turn the car red"}"#.to_string())
        });
        let (verdict, out) = verify_triplet(&t, &ep, DEFAULT_VERIFY_PROMPT);
        assert!(verdict.unwrap().is_changed);
        assert_eq!(out.status, TripletStatus::Verified);
        assert_eq!(out.refined_instruction.as_deref(), Some("turn the car red"));
        out.check_invariants().unwrap();

        mock.set_chat_hook(|_| Some("no JSON here".to_string()));
        let (verdict, out) = verify_triplet(&t, &ep, DEFAULT_VERIFY_PROMPT);
        assert!(verdict.is_none());
        assert_eq!(out.status, TripletStatus::RejectedOther);
        assert!(out
            .provenance
            .iter()
            .any(|p| p.contains("verifier_unparseable")));
    }

    #[test]
    fn ssim_baseline_flags() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let params = SsimParams::default();

        let mut t = pending_triplet(&store, "s1", "x");
        let img = GrayImage::constant(32, 32, 0.5);
        let same = store.put_image(&img.encode_png().unwrap(), "png").unwrap();
        t.original = same.clone();
        t.edited = Some(same);
        t.status = TripletStatus::Edited;
        assert!(ssim_no_edit_baseline(&t, &store, &params, 1.0).unwrap());

        // luminance-inverted pair scores far below 0.9
        let inv = GrayImage::new(32, 32, img.pixels.iter().map(|p| 1.0 - p).collect()).unwrap();
        // constant 0.5 inverts to itself; use a gradient instead
        let grad = GrayImage::new(
            32,
            32,
            (0..32 * 32).map(|i| (i % 32) as f64 / 31.0).collect(),
        )
        .unwrap();
        let grad_inv =
            GrayImage::new(32, 32, grad.pixels.iter().map(|p| 1.0 - p).collect()).unwrap();
        let _ = inv;
        t.original = store.put_image(&grad.encode_png().unwrap(), "png").unwrap();
        t.edited = Some(store.put_image(&grad_inv.encode_png().unwrap(), "png").unwrap());
        assert!(!ssim_no_edit_baseline(&t, &store, &params, 0.9).unwrap());

        // one flipped pixel breaks exact identity
        let mut flipped = grad.clone();
        flipped.pixels[0] = 1.0 - flipped.pixels[0];
        t.edited = Some(store.put_image(&flipped.encode_png().unwrap(), "png").unwrap());
        assert!(!ssim_no_edit_baseline(&t, &store, &params, 1.0).unwrap());
    }
}
