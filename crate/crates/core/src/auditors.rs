//! Auditors map a candidate mask to an [`AuditPrediction`]. The built-in ones
//! are non-neural baselines that exercise the harness; external models plug in
//! through predictions files. Also hosts the audit-then-regenerate loop.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    parse_prediction_line, template_reasoning, AuditFields, AuditPrediction, PredictionRecord,
};
use crate::dataset::{
    load_mask, store_mask, DatasetError, Manifest, ManifestInstance, SampleRecord,
};
use crate::mask::{
    boundary, default_boundary_tolerance, jaccard_and_boundary_f, mask_iou, BinaryMask,
};
use crate::perturb::{derive_seed, Action, Difficulty, LabelRules, MaskType, QualityLabel};

#[derive(Debug, Error)]
pub enum AuditorError {
    #[error("invalid auditor parameter: {0}")]
    InvalidParameter(String),
    #[error("no prediction for sample '{0}'")]
    UnscoredSample(String),
    #[error("regeneration failed for {sample_id}: {reason}")]
    RegenerationFailure { sample_id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// What an auditor sees for one candidate.
#[derive(Debug, Clone, Copy)]
pub struct AuditInput<'a> {
    pub sample: &'a SampleRecord,
    pub instance: &'a ManifestInstance,
    /// Ground truth as known to the harness. Oracle-style baselines read it;
    /// real auditors must not.
    pub label: &'a QualityLabel,
}

pub trait Auditor: Sync {
    fn audit(&self, input: &AuditInput<'_>) -> AuditPrediction;
}

fn fields_for(label: &QualityLabel, instance: &ManifestInstance) -> AuditFields {
    AuditFields {
        iou: label.iou,
        mask_type: label.mask_type,
        action: label.action,
        reasoning: template_reasoning(label.mask_type, label.action, &instance.object_category),
    }
}

/// Emits the ground-truth triple. The text carries the IoU to four decimals;
/// the structured field keeps it exact.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleAuditor;

impl Auditor for OracleAuditor {
    fn audit(&self, input: &AuditInput<'_>) -> AuditPrediction {
        AuditPrediction::from_fields(&fields_for(input.label, input.instance))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseParams {
    pub iou_sigma: f64,
    pub type_flip_prob: f64,
    pub action_flip_prob: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), AuditorError> {
        if !(self.iou_sigma >= 0.0 && self.iou_sigma.is_finite()) {
            return Err(AuditorError::InvalidParameter(format!(
                "iou_sigma must be a non-negative number, got {}",
                self.iou_sigma
            )));
        }
        for (name, p) in [
            ("type_flip_prob", self.type_flip_prob),
            ("action_flip_prob", self.action_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AuditorError::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Oracle with Gaussian IoU noise (clamped to [0, 1]) and uniform flips to a
/// different class. Each sample draws from its own stream keyed by seed and
/// sample id, so results do not depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracle {
    noise: NoiseParams,
    normal: Normal<f64>,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(noise: NoiseParams, seed: u64) -> Result<Self, AuditorError> {
        noise.validate()?;
        let normal = Normal::new(0.0, noise.iou_sigma)
            .map_err(|e| AuditorError::InvalidParameter(e.to_string()))?;
        Ok(Self {
            noise,
            normal,
            seed,
        })
    }
}

fn flip<T: Copy + PartialEq>(rng: &mut ChaCha8Rng, p: f64, value: T, all: &[T]) -> T {
    // Always consume the same number of draws so streams stay aligned.
    let u: f64 = rng.random();
    let pick = rng.random_range(0..all.len() - 1);
    if u < p {
        let others: Vec<T> = all.iter().copied().filter(|&x| x != value).collect();
        others[pick]
    } else {
        value
    }
}

impl Auditor for NoisyOracle {
    fn audit(&self, input: &AuditInput<'_>) -> AuditPrediction {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            "noisy-oracle",
            &self.seed.to_string(),
            &input.sample.sample_id,
        ]));
        let label = input.label;
        let iou = (label.iou + self.normal.sample(&mut rng)).clamp(0.0, 1.0);
        let mask_type = flip(
            &mut rng,
            self.noise.type_flip_prob,
            label.mask_type,
            &MaskType::ALL,
        );
        let action = flip(
            &mut rng,
            self.noise.action_flip_prob,
            label.action,
            &Action::ALL,
        );
        AuditPrediction::from_fields(&AuditFields {
            iou,
            mask_type,
            action,
            reasoning: template_reasoning(mask_type, action, &input.instance.object_category),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantPolicy {
    AlwaysAccept,
    AlwaysReject,
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantAuditor(pub ConstantPolicy);

impl Auditor for ConstantAuditor {
    fn audit(&self, input: &AuditInput<'_>) -> AuditPrediction {
        let (iou, mask_type, action) = match self.0 {
            ConstantPolicy::AlwaysAccept => (1.0, MaskType::Perfect, Action::Accept),
            ConstantPolicy::AlwaysReject => (0.0, MaskType::FullNeg, Action::Reject),
        };
        AuditPrediction::from_fields(&AuditFields {
            iou,
            mask_type,
            action,
            reasoning: template_reasoning(mask_type, action, &input.instance.object_category),
        })
    }
}

fn instance_index(manifest: &Manifest) -> HashMap<&str, &ManifestInstance> {
    manifest
        .instances
        .iter()
        .map(|i| (i.instance_id.as_str(), i))
        .collect()
}

/// Audits every sample of the manifest, in manifest order.
pub fn run_auditor(
    auditor: &dyn Auditor,
    manifest: &Manifest,
) -> Result<Vec<(String, AuditPrediction)>, AuditorError> {
    let instances = instance_index(manifest);
    manifest
        .samples
        .par_iter()
        .map(|s| {
            let instance = instances.get(s.instance_id.as_str()).ok_or_else(|| {
                AuditorError::InvalidParameter(format!("sample {} has no instance", s.sample_id))
            })?;
            let input = AuditInput {
                sample: s,
                instance,
                label: &s.label,
            };
            Ok((s.sample_id.clone(), auditor.audit(&input)))
        })
        .collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> AuditorError + '_ {
    move |source| AuditorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON object per line carrying both the audit text and the
/// structured triple.
pub fn write_predictions(
    path: &Path,
    predictions: &[(String, AuditPrediction)],
) -> Result<(), AuditorError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let file = fs::File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(file);
    for (id, p) in predictions {
        let line = serde_json::to_string(&PredictionRecord::from_prediction(id, p))
            .expect("record serializes");
        writeln!(w, "{line}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictionFileStats {
    pub lines: usize,
    /// Lines that name no sample at all and were skipped.
    pub unattributed: usize,
    /// Later lines replacing an earlier prediction for the same sample.
    pub duplicates: usize,
}

pub fn read_predictions(
    path: &Path,
) -> Result<(HashMap<String, AuditPrediction>, PredictionFileStats), AuditorError> {
    let file = fs::File::open(path).map_err(io(path))?;
    let mut stats = PredictionFileStats::default();
    let mut out = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_prediction_line(&line) {
            Some(rec) => {
                if out
                    .insert(rec.sample_id.clone(), rec.to_prediction())
                    .is_some()
                {
                    stats.duplicates += 1;
                }
            }
            None => {
                stats.unattributed += 1;
                tracing::warn!(line = stats.lines, "prediction line names no sample");
            }
        }
    }
    Ok((out, stats))
}

/// Label an oracle would assign to an arbitrary mask, e.g. a regenerated one.
pub fn observe_label(mask: &BinaryMask, gt: &BinaryMask, rules: &LabelRules) -> QualityLabel {
    let iou = mask_iou(mask, gt).unwrap_or(0.0);
    let subset = mask.is_subset_of(gt).unwrap_or(false);
    let superset = gt.is_subset_of(mask).unwrap_or(false);
    let mask_type = if iou == 1.0 {
        MaskType::Perfect
    } else if mask.is_disjoint(gt).unwrap_or(true) {
        MaskType::FullNeg
    } else if subset {
        if boundary(gt).is_subset_of(mask).unwrap_or(false) {
            MaskType::Cutout
        } else {
            MaskType::Erode
        }
    } else if superset {
        MaskType::Dilate
    } else {
        MaskType::Merge
    };
    if let Some(label) = rules.label(mask_type, iou) {
        return label;
    }
    let (action, difficulty) = if iou >= rules.hard.lo {
        (Action::MinorRevision, Difficulty::Hard)
    } else if iou >= rules.medium.lo {
        (Action::MajorRevision, Difficulty::Medium)
    } else {
        (Action::Reject, Difficulty::Easy)
    };
    QualityLabel {
        iou,
        mask_type,
        action,
        difficulty,
    }
}

/// What the regenerator is asked to produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenRequest {
    pub sample_id: String,
    pub instance_id: String,
    pub frame_index: usize,
    pub reference_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    /// Absolute path of the candidate being replaced.
    pub mask_path: PathBuf,
    pub width: usize,
    pub height: usize,
}

pub trait Regenerator: Sync {
    fn regenerate(&self, request: &RegenRequest) -> Result<BinaryMask, String>;
}

/// Returns the ground truth; the best any segmenter could do.
pub struct GtRegenerator<'a> {
    pub manifest: &'a Manifest,
    pub root: &'a Path,
}

impl Regenerator for GtRegenerator<'_> {
    fn regenerate(&self, request: &RegenRequest) -> Result<BinaryMask, String> {
        let s = self
            .manifest
            .samples
            .iter()
            .find(|s| s.sample_id == request.sample_id)
            .ok_or_else(|| format!("unknown sample {}", request.sample_id))?;
        load_mask(&self.root.join(&s.gt_path)).map_err(|e| e.to_string())
    }
}

/// Runs a shell command per request: the request is written to its stdin as
/// one JSON object, and the first non-empty stdout line must be a mask path
/// (relative paths resolve against `root`).
pub struct CommandRegenerator {
    pub command: String,
    pub root: PathBuf,
}

impl Regenerator for CommandRegenerator {
    fn regenerate(&self, request: &RegenRequest) -> Result<BinaryMask, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn: {e}"))?;
        let payload = serde_json::to_string(request).expect("request serializes");
        if let Some(mut stdin) = child.stdin.take() {
            // A command that ignores its input may close the pipe early.
            let _ = writeln!(stdin, "{payload}");
        }
        let out = child.wait_with_output().map_err(|e| format!("wait: {e}"))?;
        if !out.status.success() {
            return Err(format!("command exited with {}", out.status));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let line = stdout
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .ok_or("command printed no mask path")?;
        let path = self.root.join(line);
        let mask = load_mask(&path).map_err(|e| e.to_string())?;
        if mask.dims() != (request.width, request.height) {
            return Err(format!(
                "regenerated mask is {:?}, expected {:?}",
                mask.dims(),
                (request.width, request.height)
            ));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Also regenerate samples whose predicted action is reject.
    pub trigger_on_reject: bool,
    /// Audit-regenerate rounds; rounds after the first need a re-auditor.
    pub iterations: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            trigger_on_reject: false,
            iterations: 1,
        }
    }
}

fn triggered(p: &AuditPrediction, opts: &RefineOptions) -> bool {
    p.mask_type == Some(MaskType::FullNeg)
        || (opts.trigger_on_reject && p.action == Some(Action::Reject))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JfSummary {
    pub samples: usize,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

fn summarize(scores: &[(f64, f64)]) -> JfSummary {
    if scores.is_empty() {
        return JfSummary::default();
    }
    let n = scores.len() as f64;
    let mut js: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let mut fs: Vec<f64> = scores.iter().map(|s| s.1).collect();
    js.sort_by(f64::total_cmp);
    fs.sort_by(f64::total_cmp);
    let j = js.iter().sum::<f64>() / n;
    let f = fs.iter().sum::<f64>() / n;
    JfSummary {
        samples: scores.len(),
        j,
        f,
        jf: (j + f) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRow {
    pub split: String,
    pub before: JfSummary,
    pub after: JfSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub samples: usize,
    pub flagged: usize,
    pub regenerated: usize,
    pub failures: usize,
    pub iterations_run: usize,
    pub rows: Vec<RefineRow>,
    pub overall: RefineRow,
}

impl RefineReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "# Refinement\n\n| Split | J before | F before | J&F before | J after | F after | J&F after |\n|---|---|---|---|---|---|---|\n",
        );
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.split,
                r.before.j * 100.0,
                r.before.f * 100.0,
                r.before.jf * 100.0,
                r.after.j * 100.0,
                r.after.f * 100.0,
                r.after.jf * 100.0
            ));
        }
        out.push_str(&format!(
            "\n{} samples, {} flagged, {} regenerated, {} failed, {} round(s).\n",
            self.samples, self.flagged, self.regenerated, self.failures, self.iterations_run
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub report: RefineReport,
    /// Replacement masks by sample id; untouched samples are absent.
    pub refined: BTreeMap<String, BinaryMask>,
}

impl RefineOutcome {
    /// Writes replacement masks under `out_dir`, mirroring manifest paths.
    pub fn write_masks(&self, manifest: &Manifest, out_dir: &Path) -> Result<(), AuditorError> {
        for s in &manifest.samples {
            if let Some(m) = self.refined.get(&s.sample_id) {
                store_mask(m, &out_dir.join(&s.mask_path))?;
            }
        }
        Ok(())
    }
}

struct SampleState {
    mask: Option<BinaryMask>,
    score: (f64, f64),
}

/// Regenerates every sample the predictions flag (predicted full_neg, plus
/// reject when enabled) and reports mean J, F and J&F before and after.
/// Untouched samples keep their masks and scores bit for bit.
pub fn refine_loop(
    manifest: &Manifest,
    root: &Path,
    predictions: &HashMap<String, AuditPrediction>,
    regenerator: &dyn Regenerator,
    options: RefineOptions,
    reauditor: Option<&dyn Auditor>,
) -> Result<RefineOutcome, AuditorError> {
    if options.iterations == 0 {
        return Err(AuditorError::InvalidParameter(
            "iterations must be at least 1".into(),
        ));
    }
    if options.iterations > 1 && reauditor.is_none() {
        return Err(AuditorError::InvalidParameter(
            "more than one iteration needs a re-auditor".into(),
        ));
    }
    let instances = instance_index(manifest);
    for s in &manifest.samples {
        if !predictions.contains_key(&s.sample_id) {
            return Err(AuditorError::UnscoredSample(s.sample_id.clone()));
        }
    }

    let mut gts: HashMap<&str, BinaryMask> = HashMap::new();
    for s in &manifest.samples {
        if !gts.contains_key(s.gt_path.as_str()) {
            gts.insert(&s.gt_path, load_mask(&root.join(&s.gt_path))?);
        }
    }

    let score = |mask: &BinaryMask, gt: &BinaryMask| -> (f64, f64) {
        let tol = default_boundary_tolerance(gt.width(), gt.height());
        jaccard_and_boundary_f(mask, gt, tol).unwrap_or((0.0, 0.0))
    };

    let before: Vec<(f64, f64)> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let mask = load_mask(&root.join(&s.mask_path))?;
            Ok(score(&mask, &gts[s.gt_path.as_str()]))
        })
        .collect::<Result<_, AuditorError>>()?;

    let mut state: Vec<SampleState> = before
        .iter()
        .map(|&score| SampleState { mask: None, score })
        .collect();
    let mut current: Vec<AuditPrediction> = manifest
        .samples
        .iter()
        .map(|s| predictions[&s.sample_id].clone())
        .collect();

    let mut flagged_ever = vec![false; manifest.samples.len()];
    let mut regenerated = 0;
    let mut failures = 0;
    let mut rounds = 0;
    for round in 0..options.iterations {
        let todo: Vec<usize> = (0..manifest.samples.len())
            .filter(|&i| triggered(&current[i], &options))
            .collect();
        if todo.is_empty() {
            break;
        }
        rounds += 1;
        let results: Vec<(usize, Result<BinaryMask, String>)> = todo
            .par_iter()
            .map(|&i| {
                let s = &manifest.samples[i];
                let gt = &gts[s.gt_path.as_str()];
                let inst = instances.get(s.instance_id.as_str());
                let request = RegenRequest {
                    sample_id: s.sample_id.clone(),
                    instance_id: s.instance_id.clone(),
                    frame_index: s.frame_index,
                    reference_text: inst.map(|i| i.reference_text.clone()).unwrap_or_default(),
                    target_hint: current[i].target.clone(),
                    video_path: inst.and_then(|i| i.video_path.clone()),
                    mask_path: root.join(&s.mask_path),
                    width: gt.width(),
                    height: gt.height(),
                };
                (i, regenerator.regenerate(&request))
            })
            .collect();
        for (i, result) in results {
            flagged_ever[i] = true;
            let s = &manifest.samples[i];
            match result {
                Ok(mask) if mask.dims() == gts[s.gt_path.as_str()].dims() => {
                    let gt = &gts[s.gt_path.as_str()];
                    state[i].score = score(&mask, gt);
                    state[i].mask = Some(mask);
                    regenerated += 1;
                }
                Ok(mask) => {
                    failures += 1;
                    tracing::warn!(sample = %s.sample_id, dims = ?mask.dims(), "regenerated mask has wrong dimensions");
                }
                Err(reason) => {
                    failures += 1;
                    tracing::warn!(sample = %s.sample_id, %reason, round, "regeneration failed, keeping original");
                }
            }
        }
        let Some(auditor) = reauditor else { break };
        if round + 1 == options.iterations {
            break;
        }
        for &i in &todo {
            let s = &manifest.samples[i];
            let Some(mask) = &state[i].mask else {
                // Failed regenerations are not retried.
                current[i].mask_type = None;
                current[i].action = None;
                continue;
            };
            let label = observe_label(mask, &gts[s.gt_path.as_str()], &manifest.config.rules);
            let Some(instance) = instances.get(s.instance_id.as_str()) else {
                continue;
            };
            current[i] = auditor.audit(&AuditInput {
                sample: s,
                instance,
                label: &label,
            });
        }
    }

    let splits = manifest.split_index();
    // split -> ((J, F) before, (J, F) after)
    type Scores = Vec<(f64, f64)>;
    let mut by_split: BTreeMap<&str, (Scores, Scores)> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        let split = splits
            .get(s.instance_id.as_str())
            .map(|sp| sp.as_str())
            .unwrap_or("unknown");
        let e = by_split.entry(split).or_default();
        e.0.push(before[i]);
        e.1.push(state[i].score);
    }
    let rows: Vec<RefineRow> = by_split
        .iter()
        .map(|(split, (b, a))| RefineRow {
            split: split.to_string(),
            before: summarize(b),
            after: summarize(a),
        })
        .collect();
    let after_all: Vec<(f64, f64)> = state.iter().map(|s| s.score).collect();
    let overall = RefineRow {
        split: "overall".into(),
        before: summarize(&before),
        after: summarize(&after_all),
    };

    let refined = manifest
        .samples
        .iter()
        .zip(state)
        .filter_map(|(s, st)| st.mask.map(|m| (s.sample_id.clone(), m)))
        .collect();
    Ok(RefineOutcome {
        report: RefineReport {
            samples: manifest.samples.len(),
            flagged: flagged_ever.iter().filter(|&&f| f).count(),
            regenerated,
            failures,
            iterations_run: rounds,
            rows,
            overall,
        },
        refined,
    })
}
