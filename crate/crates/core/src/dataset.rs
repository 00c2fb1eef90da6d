//! The benchmark on disk: instance inputs, the build that turns them into
//! labelled candidate masks, the manifest, and its verifier.
//!
//! Layout of a built tree (all manifest paths are relative to its root):
//!
//! ```text
//! manifest.json
//! gt/<instance>/f03.png
//! masks/<instance>/f03_cutout-hard.png
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditPrediction;
use crate::mask::{boundary, mask_iou, BinaryMask, MaskError};
use crate::metrics::{EvalSample, MetricsError, Protocol, ScoredPrediction};
use crate::perturb::{
    derive_seed, gen_instance, LabelRules, MaskType, PerturbError, PerturbationSpec, QualityLabel,
    DEFAULT_MAX_NEGATIVES,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FRAME_COUNT: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.json";
const IOU_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unreadable mask {path}: {reason}")]
    UnreadableMask { path: PathBuf, reason: String },
    #[error("unsupported mask format {path}: expected 8-bit single channel, found {found}")]
    UnsupportedDepth { path: PathBuf, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid instances: {0}")]
    InvalidInstances(String),
    #[error("invalid manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },
    #[error("mask {path} is {found:?}, expected {expected:?}")]
    MaskDimensions {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Split::Train => "Train",
            Split::TestSeen => "Test (Seen)",
            Split::TestUnseen => "Test (Unseen)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRef {
    pub id: String,
    /// Per-frame paths; `null` where the object is absent.
    pub mask_paths: Vec<Option<String>>,
}

fn default_frame_count() -> usize {
    DEFAULT_FRAME_COUNT
}

/// One ⟨video, reference⟩ pair as supplied to the builder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub video_id: String,
    pub reference_text: String,
    pub object_category: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_frame_index: Option<usize>,
    #[serde(default = "default_frame_count")]
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    pub gt_mask_paths: Vec<Option<String>>,
    #[serde(default)]
    pub negative_mask_paths: Vec<NegativeRef>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InstancesFile {
    List(Vec<InstanceRecord>),
    Wrapped { instances: Vec<InstanceRecord> },
}

/// Reads an instances file (a JSON array or `{"instances": [...]}`). Relative
/// paths inside it resolve against the file's directory, returned alongside.
pub fn load_instances(path: &Path) -> Result<(Vec<InstanceRecord>, PathBuf), DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parsed: InstancesFile = serde_json::from_str(&text)
        .map_err(|e| DatasetError::InvalidInstances(format!("{}: {e}", path.display())))?;
    let instances = match parsed {
        InstancesFile::List(v) | InstancesFile::Wrapped { instances: v } => v,
    };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((instances, base))
}

static SAFE_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z0-9][A-Za-z0-9._-]*$").unwrap());

pub fn validate_instances(instances: &[InstanceRecord]) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    for inst in instances {
        let id = &inst.instance_id;
        if !SAFE_ID.is_match(id) {
            return Err(DatasetError::InvalidInstances(format!(
                "instance id '{id}' must match [A-Za-z0-9][A-Za-z0-9._-]*"
            )));
        }
        if !seen.insert(id.as_str()) {
            return Err(DatasetError::InvalidInstances(format!(
                "duplicate instance id '{id}'"
            )));
        }
        if inst.frame_count == 0 {
            return Err(DatasetError::InvalidInstances(format!(
                "{id}: frame_count is 0"
            )));
        }
        if inst.gt_mask_paths.len() > inst.frame_count {
            return Err(DatasetError::InvalidInstances(format!(
                "{id}: {} gt paths for {} frames",
                inst.gt_mask_paths.len(),
                inst.frame_count
            )));
        }
        if let Some(k) = inst.key_frame_index {
            if k >= inst.frame_count {
                return Err(DatasetError::InvalidInstances(format!(
                    "{id}: key frame {k} outside {} frames",
                    inst.frame_count
                )));
            }
        }
    }
    Ok(())
}

/// Reads an 8-bit single-channel image; any nonzero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask, DatasetError> {
    let unreadable = |reason: String| DatasetError::UnreadableMask {
        path: path.to_path_buf(),
        reason,
    };
    let img = ImageReader::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| unreadable(e.to_string()))?
        .decode()
        .map_err(|e| unreadable(e.to_string()))?;
    match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let bits = gray.into_raw().into_iter().map(|v| v != 0).collect();
            Ok(BinaryMask::from_bits(w as usize, h as usize, bits)?)
        }
        other => Err(DatasetError::UnsupportedDepth {
            path: path.to_path_buf(),
            found: format!("{:?}", other.color()),
        }),
    }
}

/// Writes a 0/255 grayscale PNG, creating parent directories.
pub fn store_mask(mask: &BinaryMask, path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let raw: Vec<u8> = mask
        .bits()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer matches dimensions");
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    let encoder = PngEncoder::new_with_quality(&mut writer, CompressionType::Fast, FilterType::Sub);
    img.write_with_encoder(encoder).map_err(|e| match e {
        image::ImageError::IoError(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DatasetError::UnreadableMask {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    writer.flush().map_err(io_err(path))
}

/// Keeps frame pixels under the mask and blacks out the rest.
pub fn render_masked_frame(frame: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, MaskError> {
    let dims = (frame.width() as usize, frame.height() as usize);
    if dims != mask.dims() {
        return Err(MaskError::DimensionMismatch {
            left: dims,
            right: mask.dims(),
        });
    }
    let mut out = RgbImage::new(frame.width(), frame.height());
    for (x, y, px) in frame.enumerate_pixels() {
        if mask.get(x as usize, y as usize) {
            out.put_pixel(x, y, *px);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildProtocol {
    #[default]
    Image,
    Video,
    Both,
}

impl BuildProtocol {
    fn includes(&self, p: Protocol) -> bool {
        matches!(
            (self, p),
            (BuildProtocol::Both, _)
                | (BuildProtocol::Image, Protocol::ImageBased)
                | (BuildProtocol::Video, Protocol::VideoBased)
        )
    }
}

/// Settings recorded in the manifest for provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub protocol: BuildProtocol,
    pub rules: LabelRules,
    pub max_negatives: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            protocol: BuildProtocol::Image,
            rules: LabelRules::default(),
            max_negatives: DEFAULT_MAX_NEGATIVES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub generation: GenerationConfig,
    pub global_seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide. Output never depends on it.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMask {
    pub frame_index: usize,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub instance_id: String,
    pub video_id: String,
    pub reference_text: String,
    pub object_category: String,
    pub split: Split,
    pub key_frame_index: usize,
    /// Key frame picked by largest gt area rather than supplied.
    pub key_frame_heuristic: bool,
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    pub gt_masks: Vec<FrameMask>,
    /// Some slot could not be generated on some frame.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub instance_id: String,
    pub frame_index: usize,
    /// Slot name; a video-protocol video is one (instance, track) pair.
    pub track: String,
    pub mask_path: String,
    pub gt_path: String,
    pub protocols: Vec<Protocol>,
    pub label: QualityLabel,
    pub spec: PerturbationSpec,
}

impl SampleRecord {
    pub fn video_key(&self) -> String {
        format!("{}/{}", self.instance_id, self.track)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub instance_id: String,
    pub frame_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeCounts {
    pub perfect: usize,
    pub cutout: usize,
    pub dilate: usize,
    pub erode: usize,
    pub merge: usize,
    pub full_neg: usize,
}

impl TypeCounts {
    pub fn get(&self, t: MaskType) -> usize {
        match t {
            MaskType::Perfect => self.perfect,
            MaskType::Cutout => self.cutout,
            MaskType::Dilate => self.dilate,
            MaskType::Erode => self.erode,
            MaskType::Merge => self.merge,
            MaskType::FullNeg => self.full_neg,
        }
    }

    fn bump(&mut self, t: MaskType) {
        let slot = match t {
            MaskType::Perfect => &mut self.perfect,
            MaskType::Cutout => &mut self.cutout,
            MaskType::Dilate => &mut self.dilate,
            MaskType::Erode => &mut self.erode,
            MaskType::Merge => &mut self.merge,
            MaskType::FullNeg => &mut self.full_neg,
        };
        *slot += 1;
    }

    pub fn sum(&self) -> usize {
        MaskType::ALL.iter().map(|&t| self.get(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub split: Split,
    pub protocol: Protocol,
    pub total: usize,
    pub by_type: TypeCounts,
    /// Keyed `<mask_type>/<difficulty>`.
    pub by_type_difficulty: BTreeMap<String, usize>,
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl CompositionRow {
    /// `Train | 16,761 | 1,306 | 2,612 | ...` in per-type column order.
    pub fn table_row(&self) -> String {
        let mut cells = vec![self.split.title().to_string(), thousands(self.total)];
        cells.extend(
            MaskType::ALL
                .iter()
                .map(|&t| thousands(self.by_type.get(t))),
        );
        cells.join(" | ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Composition {
    pub rows: Vec<CompositionRow>,
}

impl Composition {
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a SampleRecord>,
        splits: &HashMap<&str, Split>,
    ) -> Self {
        let mut rows: BTreeMap<(Split, Protocol), CompositionRow> = BTreeMap::new();
        for s in samples {
            let Some(&split) = splits.get(s.instance_id.as_str()) else {
                continue;
            };
            for &protocol in &s.protocols {
                let row = rows
                    .entry((split, protocol))
                    .or_insert_with(|| CompositionRow {
                        split,
                        protocol,
                        total: 0,
                        by_type: TypeCounts::default(),
                        by_type_difficulty: BTreeMap::new(),
                    });
                row.total += 1;
                row.by_type.bump(s.label.mask_type);
                *row.by_type_difficulty
                    .entry(format!("{}/{}", s.label.mask_type, s.label.difficulty))
                    .or_default() += 1;
            }
        }
        Self {
            rows: rows.into_values().collect(),
        }
    }

    pub fn row(&self, split: Split, protocol: Protocol) -> Option<&CompositionRow> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.protocol == protocol)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "| Split | Protocol | Total | #Perfect | #Cutout | #Dilate | #Erode | #Merge | #Full_neg |\n|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let protocol = match r.protocol {
                Protocol::ImageBased => "image-based",
                Protocol::VideoBased => "video-based",
            };
            let mut cells: Vec<String> = r.table_row().split(" | ").map(String::from).collect();
            cells.insert(1, protocol.to_string());
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub global_seed: u64,
    pub config: GenerationConfig,
    pub instances: Vec<ManifestInstance>,
    pub samples: Vec<SampleRecord>,
    pub composition: Composition,
    pub failures: Vec<FailureRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn split_index(&self) -> HashMap<&str, Split> {
        self.instances
            .iter()
            .map(|i| (i.instance_id.as_str(), i.split))
            .collect()
    }

    pub fn recompute_composition(&self) -> Composition {
        Composition::from_samples(&self.samples, &self.split_index())
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Manifest::from_json(&text).map_err(|e| DatasetError::InvalidManifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, manifest.to_json()).map_err(io_err(path))
}

fn frame_file(frame: usize) -> String {
    format!("f{frame:02}")
}

struct InstanceOutput {
    instance: ManifestInstance,
    samples: Vec<SampleRecord>,
    failures: Vec<FailureRecord>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    base.join(p)
}

fn build_instance(
    inst: &InstanceRecord,
    base: &Path,
    config: &BuildConfig,
) -> Result<InstanceOutput, DatasetError> {
    let id = &inst.instance_id;
    let gen = &config.generation;
    let gt_path = |frame: usize| -> Result<PathBuf, DatasetError> {
        inst.gt_mask_paths
            .get(frame)
            .and_then(|p| p.as_deref())
            .map(|p| resolve(base, p))
            .ok_or_else(|| {
                DatasetError::InvalidInstances(format!("{id}: no gt mask for frame {frame}"))
            })
    };

    let (key_frame, heuristic) = match inst.key_frame_index {
        Some(k) => (k, false),
        None => {
            let mut best: Option<(usize, usize)> = None;
            for (frame, p) in inst.gt_mask_paths.iter().enumerate() {
                if let Some(p) = p {
                    let area = load_mask(&resolve(base, p))?.area();
                    if best.is_none_or(|(_, a)| area > a) {
                        best = Some((frame, area));
                    }
                }
            }
            let (frame, _) = best.ok_or_else(|| {
                DatasetError::InvalidInstances(format!(
                    "{id}: no gt masks to pick a key frame from"
                ))
            })?;
            (frame, true)
        }
    };

    let frames: Vec<usize> = match gen.protocol {
        BuildProtocol::Image => vec![key_frame],
        BuildProtocol::Video | BuildProtocol::Both => (0..inst.frame_count).collect(),
    };

    let root = &config.out_dir;
    let seed_str = config.global_seed.to_string();
    let mut gt_masks = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();

    for frame in frames {
        let src = gt_path(frame)?;
        let gt = load_mask(&src)?;
        let mut negatives = Vec::new();
        for neg in &inst.negative_mask_paths {
            if let Some(Some(p)) = neg.mask_paths.get(frame) {
                let path = resolve(base, p);
                let m = load_mask(&path)?;
                if m.dims() != gt.dims() {
                    return Err(DatasetError::MaskDimensions {
                        path,
                        expected: gt.dims(),
                        found: m.dims(),
                    });
                }
                negatives.push((neg.id.clone(), m));
            }
        }

        let gt_rel = format!("gt/{id}/{}.png", frame_file(frame));
        store_mask(&gt, &root.join(&gt_rel))?;
        gt_masks.push(FrameMask {
            frame_index: frame,
            path: gt_rel.clone(),
        });

        let mut protocols = Vec::new();
        if frame == key_frame && gen.protocol.includes(Protocol::ImageBased) {
            protocols.push(Protocol::ImageBased);
        }
        if gen.protocol.includes(Protocol::VideoBased) {
            protocols.push(Protocol::VideoBased);
        }

        let seed = derive_seed(&[&seed_str, id, &frame.to_string()]);
        let generated = match gen_instance(&gt, &negatives, seed, &gen.rules, gen.max_negatives) {
            Ok(g) => g,
            Err(error) => {
                tracing::warn!(instance = %id, frame, %error, "skipping frame");
                failures.push(FailureRecord {
                    instance_id: id.clone(),
                    frame_index: frame,
                    slot: None,
                    error: error.to_string(),
                });
                continue;
            }
        };
        for f in &generated.failures {
            failures.push(FailureRecord {
                instance_id: id.clone(),
                frame_index: frame,
                slot: Some(f.slot.name()),
                error: f.error.to_string(),
            });
        }
        for (slot, sample) in generated.samples {
            let track = slot.name();
            let mask_rel = format!("masks/{id}/{}_{track}.png", frame_file(frame));
            store_mask(&sample.mask, &root.join(&mask_rel))?;
            samples.push(SampleRecord {
                sample_id: format!("{id}/{}/{track}", frame_file(frame)),
                instance_id: id.clone(),
                frame_index: frame,
                track,
                mask_path: mask_rel,
                gt_path: gt_rel.clone(),
                protocols: protocols.clone(),
                label: sample.label,
                spec: sample.spec,
            });
        }
    }

    Ok(InstanceOutput {
        instance: ManifestInstance {
            instance_id: id.clone(),
            video_id: inst.video_id.clone(),
            reference_text: inst.reference_text.clone(),
            object_category: inst.object_category.clone(),
            split: inst.split,
            key_frame_index: key_frame,
            key_frame_heuristic: heuristic,
            frame_count: inst.frame_count,
            video_path: inst.video_path.clone(),
            audio_path: inst.audio_path.clone(),
            gt_masks,
            partial: !failures.is_empty(),
        },
        samples,
        failures,
    })
}

/// Generates every instance's samples into `config.out_dir` and writes the
/// manifest. Per-frame generation failures are recorded and skipped; input
/// errors (unreadable masks, missing gt) abort.
pub fn build_benchmark(
    instances: &[InstanceRecord],
    base_dir: &Path,
    config: &BuildConfig,
) -> Result<Manifest, DatasetError> {
    config.generation.rules.validate()?;
    validate_instances(instances)?;
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| DatasetError::ThreadPool(e.to_string()))?;
    let outputs: Vec<InstanceOutput> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| build_instance(inst, base_dir, config))
            .collect::<Result<_, _>>()
    })?;

    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        global_seed: config.global_seed,
        config: config.generation,
        instances: Vec::with_capacity(outputs.len()),
        samples: Vec::new(),
        composition: Composition::default(),
        failures: Vec::new(),
    };
    for out in outputs {
        manifest.instances.push(out.instance);
        manifest.samples.extend(out.samples);
        manifest.failures.extend(out.failures);
    }
    manifest.composition = manifest.recompute_composition();
    write_manifest(&manifest, &config.out_dir.join(MANIFEST_FILE))?;
    tracing::info!(
        instances = manifest.instances.len(),
        samples = manifest.samples.len(),
        failures = manifest.failures.len(),
        "benchmark built"
    );
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnreadableMask,
    DimensionMismatch,
    PerfectIdentity,
    CutoutStructure,
    DilateStructure,
    ErodeStructure,
    MergeStructure,
    FullNegOverlap,
    IouMismatch,
    LabelRule,
    DuplicateSample,
    UnknownInstance,
    SampleCount,
    MixedTrackType,
    CategoryLeak,
    Composition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub samples_checked: usize,
    pub violations: Vec<Violation>,
    pub composition: Composition,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// The first structural problem of a candidate against its gt, if any.
fn structure_violation(
    label: &QualityLabel,
    mask: &BinaryMask,
    gt: &BinaryMask,
) -> Option<(ViolationKind, String)> {
    let holds = |r: Result<bool, MaskError>| r.unwrap_or(false);
    match label.mask_type {
        MaskType::Perfect => {
            let d = mask.hamming(gt).unwrap_or(usize::MAX);
            (d != 0).then(|| {
                (
                    ViolationKind::PerfectIdentity,
                    format!("differs from gt in {d} pixels"),
                )
            })
        }
        MaskType::Cutout => {
            if !holds(mask.is_subset_of(gt)) {
                Some((
                    ViolationKind::CutoutStructure,
                    "cutout has pixels outside gt".into(),
                ))
            } else if !holds(boundary(gt).is_subset_of(mask)) {
                Some((
                    ViolationKind::CutoutStructure,
                    "cutout hole touches the gt boundary".into(),
                ))
            } else {
                None
            }
        }
        MaskType::Dilate => (!holds(gt.is_subset_of(mask))).then(|| {
            (
                ViolationKind::DilateStructure,
                "dilated mask does not contain gt".into(),
            )
        }),
        MaskType::Erode => (!holds(mask.is_subset_of(gt))).then(|| {
            (
                ViolationKind::ErodeStructure,
                "eroded mask extends outside gt".into(),
            )
        }),
        MaskType::Merge => (!holds(gt.is_subset_of(mask))).then(|| {
            (
                ViolationKind::MergeStructure,
                "merged mask does not contain gt".into(),
            )
        }),
        MaskType::FullNeg => {
            if mask.is_empty() {
                Some((
                    ViolationKind::FullNegOverlap,
                    "full negative is empty".into(),
                ))
            } else if !holds(mask.is_disjoint(gt)) {
                let n = mask.intersection_area(gt).unwrap_or(0);
                Some((
                    ViolationKind::FullNegOverlap,
                    format!("overlaps gt in {n} pixels"),
                ))
            } else {
                None
            }
        }
    }
}

fn check_sample(
    s: &SampleRecord,
    gt: &Result<BinaryMask, String>,
    root: &Path,
    rules: &LabelRules,
) -> Option<Violation> {
    let v = |kind, detail: String| {
        Some(Violation {
            sample_id: Some(s.sample_id.clone()),
            kind,
            detail,
        })
    };
    let gt = match gt {
        Ok(g) => g,
        Err(e) => return v(ViolationKind::UnreadableMask, e.clone()),
    };
    let mask = match load_mask(&root.join(&s.mask_path)) {
        Ok(m) => m,
        Err(e) => return v(ViolationKind::UnreadableMask, e.to_string()),
    };
    if mask.dims() != gt.dims() {
        return v(
            ViolationKind::DimensionMismatch,
            format!("mask {:?} vs gt {:?}", mask.dims(), gt.dims()),
        );
    }
    if let Some((kind, detail)) = structure_violation(&s.label, &mask, gt) {
        return v(kind, detail);
    }
    let iou = mask_iou(&mask, gt).unwrap_or(0.0);
    if (iou - s.label.iou).abs() > IOU_TOLERANCE {
        return v(
            ViolationKind::IouMismatch,
            format!("label iou {} but recomputed {iou}", s.label.iou),
        );
    }
    if let Err(detail) = rules.check_label(&s.label) {
        return v(ViolationKind::LabelRule, detail);
    }
    None
}

/// Re-reads every mask and rechecks labels, structure, per-instance counts,
/// track consistency, split category disjointness and composition.
pub fn verify_manifest(manifest: &Manifest, root: &Path) -> VerifyReport {
    let rules = &manifest.config.rules;
    let mut violations = Vec::new();
    let global = |kind, detail: String| Violation {
        sample_id: None,
        kind,
        detail,
    };

    let splits = manifest.split_index();
    let mut ids = BTreeSet::new();
    for s in &manifest.samples {
        if !ids.insert(s.sample_id.as_str()) {
            violations.push(Violation {
                sample_id: Some(s.sample_id.clone()),
                kind: ViolationKind::DuplicateSample,
                detail: "sample id appears more than once".into(),
            });
        }
        if !splits.contains_key(s.instance_id.as_str()) {
            violations.push(Violation {
                sample_id: Some(s.sample_id.clone()),
                kind: ViolationKind::UnknownInstance,
                detail: format!("instance '{}' not in manifest", s.instance_id),
            });
        }
    }

    // One gt read per group of samples sharing it.
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        groups.entry(s.gt_path.as_str()).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    let mut per_sample: Vec<(usize, Violation)> = groups
        .par_iter()
        .flat_map_iter(|(gt_path, idx)| {
            let gt = load_mask(&root.join(gt_path)).map_err(|e| e.to_string());
            idx.iter()
                .filter_map(|&i| {
                    check_sample(&manifest.samples[i], &gt, root, rules).map(|v| (i, v))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    per_sample.sort_by_key(|(i, _)| *i);
    violations.extend(per_sample.into_iter().map(|(_, v)| v));

    let partial: HashMap<&str, bool> = manifest
        .instances
        .iter()
        .map(|i| (i.instance_id.as_str(), i.partial))
        .collect();
    let mut per_frame: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    let mut tracks: BTreeMap<(&str, &str), BTreeSet<MaskType>> = BTreeMap::new();
    for s in &manifest.samples {
        *per_frame
            .entry((&s.instance_id, s.frame_index))
            .or_default() += 1;
        tracks
            .entry((&s.instance_id, &s.track))
            .or_default()
            .insert(s.label.mask_type);
    }
    for ((inst, frame), n) in per_frame {
        let lo = if partial.get(inst).copied().unwrap_or(false) {
            1
        } else {
            7
        };
        if !(lo..=13).contains(&n) {
            violations.push(global(
                ViolationKind::SampleCount,
                format!("{inst} frame {frame} has {n} samples, expected {lo}..=13"),
            ));
        }
    }
    for ((inst, track), types) in tracks {
        if types.len() > 1 {
            violations.push(global(
                ViolationKind::MixedTrackType,
                format!("{inst} track {track} mixes {} mask types", types.len()),
            ));
        }
    }

    let train: BTreeSet<&str> = manifest
        .instances
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(|i| i.object_category.as_str())
        .collect();
    for inst in &manifest.instances {
        if inst.split == Split::TestUnseen && train.contains(inst.object_category.as_str()) {
            violations.push(global(
                ViolationKind::CategoryLeak,
                format!(
                    "unseen instance {} has category '{}' present in train",
                    inst.instance_id, inst.object_category
                ),
            ));
        }
    }

    let composition = manifest.recompute_composition();
    for row in &manifest.composition.rows {
        if row.by_type.sum() != row.total {
            violations.push(global(
                ViolationKind::Composition,
                format!(
                    "{}: type counts sum to {} not {}",
                    row.table_row(),
                    row.by_type.sum(),
                    row.total
                ),
            ));
        }
    }
    if composition != manifest.composition {
        violations.push(global(
            ViolationKind::Composition,
            "stored composition does not match the samples".into(),
        ));
    }

    VerifyReport {
        samples_checked: manifest.samples.len(),
        violations,
        composition,
    }
}

/// Pairs manifest samples of `protocol` with predictions keyed by sample id.
pub fn eval_samples(
    manifest: &Manifest,
    predictions: &HashMap<String, AuditPrediction>,
    protocol: Protocol,
    strict_parse: bool,
) -> Result<Vec<EvalSample>, MetricsError> {
    let splits = manifest.split_index();
    manifest
        .samples
        .iter()
        .filter(|s| s.protocols.contains(&protocol))
        .map(|s| {
            let p = predictions
                .get(&s.sample_id)
                .ok_or_else(|| MetricsError::UnscoredSample(s.sample_id.clone()))?;
            Ok(EvalSample {
                split: splits
                    .get(s.instance_id.as_str())
                    .map(|sp| sp.as_str())
                    .unwrap_or("unknown")
                    .to_string(),
                video: s.video_key(),
                label: s.label,
                prediction: ScoredPrediction::from_audit(p, strict_parse),
            })
        })
        .collect()
}
