//! The six candidate-mask generators and their quality labels.
//!
//! Geometric corruptions (cutout, dilate, erode) are driven into a target IoU
//! interval by searching over integer structuring-element sizes. When the IoU
//! jumps over the interval between two consecutive sizes, single pixels of the
//! ring between them are flipped one at a time, in seeded random order, until
//! the IoU lands inside.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::{
    bbox, bbox_iou, dilate, erode, mask_iou, BinaryMask, MaskError, StructuringElement,
};

/// Geometric kinds need at least this many foreground pixels so that a single
/// pixel moves the IoU by less than an interval width.
pub const MIN_OBJECT_AREA: usize = 20;

/// Default number of full negatives kept per instance.
pub const DEFAULT_MAX_NEGATIVES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
    #[error("object area {area} is below the minimum of {MIN_OBJECT_AREA} pixels")]
    DegenerateObject { area: usize },
    #[error("could not reach IoU interval [{lo}, {hi}) for {kind}: {reason}")]
    UnreachableTarget {
        kind: MaskType,
        lo: f64,
        hi: f64,
        reason: String,
    },
    #[error("negative '{id}' overlaps the ground truth")]
    OverlapViolation { id: String },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskType {
    Perfect,
    Cutout,
    Dilate,
    Erode,
    Merge,
    FullNeg,
}

impl MaskType {
    pub const ALL: [MaskType; 6] = [
        MaskType::Perfect,
        MaskType::Cutout,
        MaskType::Dilate,
        MaskType::Erode,
        MaskType::Merge,
        MaskType::FullNeg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskType::Perfect => "perfect",
            MaskType::Cutout => "cutout",
            MaskType::Dilate => "dilate",
            MaskType::Erode => "erode",
            MaskType::Merge => "merge",
            MaskType::FullNeg => "full_neg",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, MaskType::Cutout | MaskType::Dilate | MaskType::Erode)
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown mask type '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    MinorRevision,
    MajorRevision,
    Reject,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Accept,
        Action::MinorRevision,
        Action::MajorRevision,
        Action::Reject,
    ];

    /// Title-case form used in audit text.
    pub fn title(&self) -> &'static str {
        match self {
            Action::Accept => "Accept",
            Action::MinorRevision => "Minor Revision",
            Action::MajorRevision => "Major Revision",
            Action::Reject => "Reject",
        }
    }

    /// Snake-case form used in JSON.
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Accept => "accept",
            Action::MinorRevision => "minor_revision",
            Action::MajorRevision => "major_revision",
            Action::Reject => "reject",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    #[serde(rename = "hard")]
    Hard,
    #[serde(rename = "medium")]
    Medium,
    #[serde(rename = "easy")]
    Easy,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Hard => "hard",
            Difficulty::Medium => "medium",
            Difficulty::Easy => "easy",
            Difficulty::NotApplicable => "n/a",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open IoU interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUTarget {
    pub lo: f64,
    pub hi: f64,
}

impl IoUTarget {
    pub const HARD: IoUTarget = IoUTarget { lo: 0.85, hi: 0.90 };
    pub const MEDIUM: IoUTarget = IoUTarget { lo: 0.75, hi: 0.80 };

    pub fn new(lo: f64, hi: f64) -> Result<Self, PerturbError> {
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(PerturbError::InvalidRule(format!(
                "IoU interval must satisfy 0 < lo < hi <= 1, got [{lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, iou: f64) -> bool {
        iou >= self.lo && iou < self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Merge IoU cut points: `[minor, 1)` minor revision, `[major, minor)` major
/// revision, below `major` reject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeThresholds {
    pub minor: f64,
    pub major: f64,
}

impl Default for MergeThresholds {
    fn default() -> Self {
        Self {
            minor: 0.9,
            major: 0.75,
        }
    }
}

/// Every constant that decides a label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRules {
    pub hard: IoUTarget,
    pub medium: IoUTarget,
    pub merge: MergeThresholds,
}

impl Default for LabelRules {
    fn default() -> Self {
        Self {
            hard: IoUTarget::HARD,
            medium: IoUTarget::MEDIUM,
            merge: MergeThresholds::default(),
        }
    }
}

impl LabelRules {
    pub fn validate(&self) -> Result<(), PerturbError> {
        IoUTarget::new(self.hard.lo, self.hard.hi)?;
        IoUTarget::new(self.medium.lo, self.medium.hi)?;
        if self.medium.hi > self.hard.lo {
            return Err(PerturbError::InvalidRule(
                "medium interval must lie below the hard interval".into(),
            ));
        }
        let m = self.merge;
        if !(m.major > 0.0 && m.major < m.minor && m.minor < 1.0) {
            return Err(PerturbError::InvalidRule(format!(
                "merge thresholds must satisfy 0 < major < minor < 1, got {}, {}",
                m.minor, m.major
            )));
        }
        Ok(())
    }

    pub fn interval(&self, difficulty: Difficulty) -> Option<IoUTarget> {
        match difficulty {
            Difficulty::Hard => Some(self.hard),
            Difficulty::Medium => Some(self.medium),
            _ => None,
        }
    }

    /// Action and difficulty implied by a mask type and IoU, or `None` when the
    /// IoU is impossible for that type.
    pub fn derive(&self, mask_type: MaskType, iou: f64) -> Option<(Action, Difficulty)> {
        match mask_type {
            MaskType::Perfect => {
                (iou == 1.0).then_some((Action::Accept, Difficulty::NotApplicable))
            }
            MaskType::FullNeg => {
                (iou == 0.0).then_some((Action::Reject, Difficulty::NotApplicable))
            }
            MaskType::Cutout | MaskType::Dilate | MaskType::Erode => {
                if self.hard.contains(iou) {
                    Some((Action::MinorRevision, Difficulty::Hard))
                } else if self.medium.contains(iou) {
                    Some((Action::MajorRevision, Difficulty::Medium))
                } else {
                    None
                }
            }
            MaskType::Merge => {
                if !(iou > 0.0 && iou < 1.0) {
                    None
                } else if iou >= self.merge.minor {
                    Some((Action::MinorRevision, Difficulty::Hard))
                } else if iou >= self.merge.major {
                    Some((Action::MajorRevision, Difficulty::Medium))
                } else {
                    Some((Action::Reject, Difficulty::Easy))
                }
            }
        }
    }

    pub fn label(&self, mask_type: MaskType, iou: f64) -> Option<QualityLabel> {
        self.derive(mask_type, iou)
            .map(|(action, difficulty)| QualityLabel {
                iou,
                mask_type,
                action,
                difficulty,
            })
    }

    /// First inconsistency in a label, if any.
    pub fn check_label(&self, label: &QualityLabel) -> Result<(), String> {
        match self.derive(label.mask_type, label.iou) {
            None => Err(format!(
                "iou {} is not admissible for mask type {}",
                label.iou, label.mask_type
            )),
            Some((action, _)) if action != label.action => Err(format!(
                "action {} does not match {} at iou {} (expected {})",
                label.action, label.mask_type, label.iou, action
            )),
            Some((_, difficulty)) if difficulty != label.difficulty => Err(format!(
                "difficulty {} does not match {} at iou {} (expected {})",
                label.difficulty, label.mask_type, label.iou, difficulty
            )),
            Some(_) => Ok(()),
        }
    }
}

/// Ground-truth triple attached to every generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityLabel {
    pub iou: f64,
    pub mask_type: MaskType,
    pub action: Action,
    pub difficulty: Difficulty,
}

impl QualityLabel {
    pub fn perfect() -> Self {
        Self {
            iou: 1.0,
            mask_type: MaskType::Perfect,
            action: Action::Accept,
            difficulty: Difficulty::NotApplicable,
        }
    }

    pub fn full_neg() -> Self {
        Self {
            iou: 0.0,
            mask_type: MaskType::FullNeg,
            action: Action::Reject,
            difficulty: Difficulty::NotApplicable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometricKind {
    Cutout,
    Dilate,
    Erode,
}

impl GeometricKind {
    pub const ALL: [GeometricKind; 3] = [
        GeometricKind::Cutout,
        GeometricKind::Dilate,
        GeometricKind::Erode,
    ];

    pub fn mask_type(&self) -> MaskType {
        match self {
            GeometricKind::Cutout => MaskType::Cutout,
            GeometricKind::Dilate => MaskType::Dilate,
            GeometricKind::Erode => MaskType::Erode,
        }
    }
}

/// Everything needed to replay a sample from its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: MaskType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub difficulty: Option<Difficulty>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rng_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<IoUTarget>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub element: Option<StructuringElement>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed_point: Option<[usize; 2]>,
    #[serde(default)]
    pub fine_tune_flips: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub negative_id: Option<String>,
}

impl PerturbationSpec {
    fn plain(kind: MaskType) -> Self {
        Self {
            kind,
            difficulty: None,
            rng_seed: None,
            target: None,
            element: None,
            seed_point: None,
            fine_tune_flips: 0,
            negative_id: None,
        }
    }

    /// Regenerates the mask this spec describes.
    pub fn replay(
        &self,
        gt: &BinaryMask,
        negatives: &[(String, BinaryMask)],
        rules: &LabelRules,
    ) -> Result<BinaryMask, PerturbError> {
        let negative = || {
            let id = self.negative_id.as_deref().unwrap_or_default();
            negatives
                .iter()
                .find(|(nid, _)| nid == id)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| PerturbError::InvalidRule(format!("unknown negative '{id}'")))
        };
        match self.kind {
            MaskType::Perfect => Ok(gt.clone()),
            MaskType::FullNeg => negative(),
            MaskType::Merge => Ok(gt.union(&negative()?)?),
            MaskType::Cutout | MaskType::Dilate | MaskType::Erode => {
                let kind = match self.kind {
                    MaskType::Cutout => GeometricKind::Cutout,
                    MaskType::Dilate => GeometricKind::Dilate,
                    _ => GeometricKind::Erode,
                };
                let difficulty = self.difficulty.ok_or_else(|| {
                    PerturbError::InvalidRule("geometric spec without difficulty".into())
                })?;
                let seed = self.rng_seed.ok_or_else(|| {
                    PerturbError::InvalidRule("geometric spec without seed".into())
                })?;
                gen_geometric(gt, kind, difficulty, rules, seed).map(|s| s.mask)
            }
        }
    }
}

/// Stable 64-bit seed from an ordered list of parts.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub mask: BinaryMask,
    pub label: QualityLabel,
    pub spec: PerturbationSpec,
}

pub fn gen_perfect(gt: &BinaryMask) -> Result<GeneratedSample, PerturbError> {
    if gt.is_empty() {
        return Err(PerturbError::EmptyGroundTruth);
    }
    Ok(GeneratedSample {
        mask: gt.clone(),
        label: QualityLabel::perfect(),
        spec: PerturbationSpec::plain(MaskType::Perfect),
    })
}

/// Element of "size" `k`: half-width `k`, half-height scaled by `aspect`.
fn element_at(shape_is_ellipse: bool, aspect: f64, k: usize) -> StructuringElement {
    let hh = ((k as f64) * aspect).round() as usize;
    if shape_is_ellipse {
        StructuringElement::ellipse(k, hh)
    } else {
        StructuringElement::rect(k, hh)
    }
}

fn stamp(dims: (usize, usize), center: (usize, usize), element: &StructuringElement) -> BinaryMask {
    let mut m = BinaryMask::new(dims.0, dims.1).expect("non-empty dimensions");
    for (dx, dy) in element.footprint() {
        let x = center.0 as isize + dx;
        let y = center.1 as isize + dy;
        if x >= 0 && y >= 0 && (x as usize) < dims.0 && (y as usize) < dims.1 {
            m.set(x as usize, y as usize, true);
        }
    }
    m
}

struct GeometricSearch<'a> {
    gt: &'a BinaryMask,
    kind: GeometricKind,
    ellipse: bool,
    aspect: f64,
    interior: Option<BinaryMask>,
    seed_point: Option<(usize, usize)>,
}

impl GeometricSearch<'_> {
    fn element(&self, k: usize) -> StructuringElement {
        element_at(self.ellipse, self.aspect, k)
    }

    fn candidate(&self, k: usize) -> BinaryMask {
        let element = self.element(k);
        match self.kind {
            GeometricKind::Dilate => dilate(self.gt, &element),
            GeometricKind::Erode => erode(self.gt, &element),
            GeometricKind::Cutout => {
                let interior = self.interior.as_ref().expect("cutout interior");
                let seed = self.seed_point.expect("cutout seed");
                let hole = stamp(self.gt.dims(), seed, &element)
                    .intersection(interior)
                    .expect("same dims");
                self.gt.difference(&hole).expect("same dims")
            }
        }
    }
}

fn iou_with(gt: &BinaryMask, m: &BinaryMask) -> f64 {
    // An eroded or cut-out mask may be empty; its IoU against a non-empty gt is 0.
    mask_iou(m, gt).unwrap_or(0.0)
}

/// Cutout, dilate or erode `gt` into the interval that `difficulty` selects.
pub fn gen_geometric(
    gt: &BinaryMask,
    kind: GeometricKind,
    difficulty: Difficulty,
    rules: &LabelRules,
    rng_seed: u64,
) -> Result<GeneratedSample, PerturbError> {
    let target = rules.interval(difficulty).ok_or_else(|| {
        PerturbError::InvalidRule(format!("difficulty {difficulty} has no geometric interval"))
    })?;
    let area = gt.area();
    if area == 0 {
        return Err(PerturbError::EmptyGroundTruth);
    }
    if area < MIN_OBJECT_AREA {
        return Err(PerturbError::DegenerateObject { area });
    }
    let mask_type = kind.mask_type();
    let unreachable = |reason: &str| PerturbError::UnreachableTarget {
        kind: mask_type,
        lo: target.lo,
        hi: target.hi,
        reason: reason.to_string(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ellipse = rng.random_bool(0.5);
    let aspect = rng.random_range(0.5..=2.0);
    let k_max = gt.width().max(gt.height());

    let mut search = GeometricSearch {
        gt,
        kind,
        ellipse,
        aspect,
        interior: None,
        seed_point: None,
    };

    if kind == GeometricKind::Cutout {
        let interior = erode(gt, &StructuringElement::unit());
        if interior.is_empty() {
            return Err(unreachable("object has no interior"));
        }
        // Size the seed region for the hole the interval calls for, then take
        // the largest element (up to that size) that still fits the interior.
        let wanted = ((1.0 - (target.lo + target.hi) / 2.0) * area as f64).ceil() as usize;
        let k_wanted = (0..=k_max)
            .find(|&k| search.element(k).footprint_len() >= wanted)
            .unwrap_or(k_max);
        let fits = |k: usize| !erode(&interior, &search.element(k)).is_empty();
        let (mut lo, mut hi) = (0usize, 1usize);
        while hi < k_wanted && fits(hi) {
            lo = hi;
            hi *= 2;
        }
        hi = hi.min(k_wanted);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let core = erode(&interior, &search.element(lo));
        let points: Vec<(usize, usize)> = core.foreground().collect();
        let seed = points[rng.random_range(0..points.len())];
        search.interior = Some(interior);
        search.seed_point = Some(seed);
    }

    // IoU is non-increasing in k (elements are nested). Gallop to bracket the
    // smallest size that drops below hi, then bisect.
    let cache: RefCell<HashMap<usize, BinaryMask>> = RefCell::new(HashMap::new());
    let candidate = |k: usize| -> BinaryMask {
        if let Some(m) = cache.borrow().get(&k) {
            return m.clone();
        }
        let m = search.candidate(k);
        cache.borrow_mut().insert(k, m.clone());
        m
    };
    let iou_at = |k: usize| iou_with(gt, &candidate(k));
    let mut lo = 0usize;
    let mut hi = 1usize;
    loop {
        if hi >= k_max {
            if iou_at(k_max) >= target.hi {
                return Err(unreachable("largest element does not reach the interval"));
            }
            hi = k_max;
            break;
        }
        if iou_at(hi) < target.hi {
            break;
        }
        lo = hi + 1;
        hi *= 2;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if iou_at(mid) < target.hi {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let k = lo;
    let landed = candidate(k);
    let landed_iou = iou_with(gt, &landed);

    let (mask, flips) = if target.contains(landed_iou) {
        (landed, 0)
    } else {
        // The interval lies strictly between size k-1 and size k.
        let mut current = if k == 0 { gt.clone() } else { candidate(k - 1) };
        let mut ring: Vec<(usize, usize)> = match kind {
            GeometricKind::Dilate => landed.difference(&current)?,
            _ => current.difference(&landed)?,
        }
        .foreground()
        .collect();
        ring.shuffle(&mut rng);

        let cap = 4 * area;
        let mut flips = 0usize;
        let mut current_area = current.area();
        let mut iou = iou_with(gt, &current);
        for (x, y) in ring {
            if iou < target.hi {
                break;
            }
            if flips >= cap {
                return Err(unreachable("fine-tuning exceeded its flip budget"));
            }
            match kind {
                GeometricKind::Dilate => {
                    current.set(x, y, true);
                    current_area += 1;
                    iou = area as f64 / current_area as f64;
                }
                _ => {
                    current.set(x, y, false);
                    current_area -= 1;
                    iou = current_area as f64 / area as f64;
                }
            }
            flips += 1;
        }
        (current, flips)
    };

    let iou = iou_with(gt, &mask);
    if !target.contains(iou) {
        return Err(unreachable("fine-tuning stepped over the interval"));
    }
    let label = QualityLabel {
        iou,
        mask_type,
        action: if difficulty == Difficulty::Hard {
            Action::MinorRevision
        } else {
            Action::MajorRevision
        },
        difficulty,
    };
    let spec = PerturbationSpec {
        kind: mask_type,
        difficulty: Some(difficulty),
        rng_seed: Some(rng_seed),
        target: Some(target),
        element: Some(search.element(k)),
        seed_point: search.seed_point.map(|(x, y)| [x, y]),
        fine_tune_flips: flips,
        negative_id: None,
    };
    Ok(GeneratedSample { mask, label, spec })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullNegative {
    pub id: String,
    pub mask: BinaryMask,
    pub label: QualityLabel,
}

/// Keeps non-empty candidates that are pixel-disjoint from `gt`, ranked by
/// bounding-box IoU with `gt` (descending, ties by id), at most `k` of them.
pub fn select_full_negs(
    gt: &BinaryMask,
    candidates: &[(String, BinaryMask)],
    k: usize,
) -> Result<Vec<FullNegative>, PerturbError> {
    let gt_box = bbox(gt).map_err(|_| PerturbError::EmptyGroundTruth)?;
    let mut ranked = Vec::new();
    for (id, m) in candidates {
        if m.is_empty() || !m.is_disjoint(gt)? {
            continue;
        }
        let score = bbox_iou(&bbox(m)?, &gt_box);
        ranked.push((score, id, m));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(_, id, m)| FullNegative {
            id: id.clone(),
            mask: m.clone(),
            label: QualityLabel::full_neg(),
        })
        .collect())
}

/// Unions `gt` with each disjoint negative.
pub fn gen_merges(
    gt: &BinaryMask,
    full_negs: &[(String, BinaryMask)],
    rules: &LabelRules,
) -> Result<Vec<GeneratedSample>, PerturbError> {
    if gt.is_empty() {
        return Err(PerturbError::EmptyGroundTruth);
    }
    full_negs
        .iter()
        .map(|(id, neg)| {
            if !neg.is_disjoint(gt)? || neg.is_empty() {
                return Err(PerturbError::OverlapViolation { id: id.clone() });
            }
            let mask = gt.union(neg)?;
            let iou = mask_iou(&mask, gt)?;
            let label = rules
                .label(MaskType::Merge, iou)
                .ok_or_else(|| PerturbError::OverlapViolation { id: id.clone() })?;
            let mut spec = PerturbationSpec::plain(MaskType::Merge);
            spec.negative_id = Some(id.clone());
            Ok(GeneratedSample { mask, label, spec })
        })
        .collect()
}

/// Position of a sample within an instance's sample set. Also names the
/// per-instance track that video-based scoring follows across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Perfect,
    Geometric(GeometricKind, Difficulty),
    Merge(usize),
    FullNeg(usize),
}

impl Slot {
    pub fn name(&self) -> String {
        match self {
            Slot::Perfect => "perfect".into(),
            Slot::Geometric(kind, d) => format!("{}-{}", kind.mask_type(), d),
            Slot::Merge(r) => format!("merge-{r}"),
            Slot::FullNeg(r) => format!("full_neg-{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotFailure {
    pub slot: Slot,
    pub error: PerturbError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSamples {
    pub samples: Vec<(Slot, GeneratedSample)>,
    pub failures: Vec<SlotFailure>,
}

impl InstanceSamples {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// One perfect, two each of cutout/dilate/erode (hard and medium), and up to
/// `max_negatives` merges and full negatives.
pub fn gen_instance(
    gt: &BinaryMask,
    negatives: &[(String, BinaryMask)],
    rng_seed: u64,
    rules: &LabelRules,
    max_negatives: usize,
) -> Result<InstanceSamples, PerturbError> {
    let perfect = gen_perfect(gt)?;
    let mut samples = vec![(Slot::Perfect, perfect)];
    let mut failures = Vec::new();

    let seed_str = rng_seed.to_string();
    for kind in GeometricKind::ALL {
        for difficulty in [Difficulty::Hard, Difficulty::Medium] {
            let slot = Slot::Geometric(kind, difficulty);
            let seed = derive_seed(&[&seed_str, kind.mask_type().as_str(), difficulty.as_str()]);
            match gen_geometric(gt, kind, difficulty, rules, seed) {
                Ok(s) => samples.push((slot, s)),
                Err(error) => {
                    tracing::warn!(slot = %slot.name(), %error, "dropping geometric sample");
                    failures.push(SlotFailure { slot, error });
                }
            }
        }
    }

    let negs = select_full_negs(gt, negatives, max_negatives)?;
    let pairs: Vec<(String, BinaryMask)> = negs
        .iter()
        .map(|n| (n.id.clone(), n.mask.clone()))
        .collect();
    for (rank, merged) in gen_merges(gt, &pairs, rules)?.into_iter().enumerate() {
        samples.push((Slot::Merge(rank), merged));
    }
    for (rank, neg) in negs.into_iter().enumerate() {
        let mut spec = PerturbationSpec::plain(MaskType::FullNeg);
        spec.negative_id = Some(neg.id);
        samples.push((
            Slot::FullNeg(rank),
            GeneratedSample {
                mask: neg.mask,
                label: neg.label,
                spec,
            },
        ));
    }
    Ok(InstanceSamples { samples, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(canvas: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::rect(canvas, canvas, x0, y0, side, side).unwrap()
    }

    #[test]
    fn mask_type_round_trips_through_strings() {
        for t in MaskType::ALL {
            assert_eq!(t.as_str().parse::<MaskType>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
        }
        assert_eq!(
            serde_json::to_string(&Action::MinorRevision).unwrap(),
            "\"minor_revision\""
        );
        assert_eq!(Action::MajorRevision.title(), "Major Revision");
        assert_eq!(
            serde_json::to_string(&Difficulty::NotApplicable).unwrap(),
            "\"n/a\""
        );
    }

    #[test]
    fn rules_derive_the_documented_actions() {
        let r = LabelRules::default();
        assert_eq!(
            r.derive(MaskType::Perfect, 1.0),
            Some((Action::Accept, Difficulty::NotApplicable))
        );
        assert_eq!(r.derive(MaskType::Perfect, 0.99), None);
        assert_eq!(
            r.derive(MaskType::Dilate, 0.85),
            Some((Action::MinorRevision, Difficulty::Hard))
        );
        assert_eq!(r.derive(MaskType::Dilate, 0.90), None);
        assert_eq!(
            r.derive(MaskType::Erode, 0.75),
            Some((Action::MajorRevision, Difficulty::Medium))
        );
        assert_eq!(r.derive(MaskType::Cutout, 0.82), None);
        assert_eq!(
            r.derive(MaskType::Merge, 0.9),
            Some((Action::MinorRevision, Difficulty::Hard))
        );
        assert_eq!(
            r.derive(MaskType::Merge, 0.8),
            Some((Action::MajorRevision, Difficulty::Medium))
        );
        assert_eq!(
            r.derive(MaskType::Merge, 0.25),
            Some((Action::Reject, Difficulty::Easy))
        );
        assert_eq!(r.derive(MaskType::Merge, 1.0), None);
    }

    #[test]
    fn invalid_rules_are_rejected() {
        assert!(IoUTarget::new(0.9, 0.85).is_err());
        assert!(IoUTarget::new(0.0, 0.5).is_err());
        let r = LabelRules {
            medium: IoUTarget { lo: 0.8, hi: 0.88 },
            ..Default::default()
        };
        assert!(r.validate().is_err());
        let mut r = LabelRules::default();
        r.merge.major = 0.95;
        assert!(r.validate().is_err());
        assert!(LabelRules::default().validate().is_ok());
    }

    #[test]
    fn perfect_is_identity() {
        let gt = square(32, 4, 4, 10);
        let s = gen_perfect(&gt).unwrap();
        assert_eq!(s.mask, gt);
        assert_eq!(s.label, QualityLabel::perfect());
        assert_eq!(mask_iou(&s.mask, &gt).unwrap(), 1.0);
        assert_eq!(
            gen_perfect(&BinaryMask::new(4, 4).unwrap()),
            Err(PerturbError::EmptyGroundTruth)
        );
    }

    #[test]
    fn dilate_hard_on_square() {
        let gt = square(96, 28, 28, 40);
        let s = gen_geometric(
            &gt,
            GeometricKind::Dilate,
            Difficulty::Hard,
            &LabelRules::default(),
            7,
        )
        .unwrap();
        assert!(gt.is_subset_of(&s.mask).unwrap());
        assert!(s.mask.area() >= 1600);
        let iou = mask_iou(&s.mask, &gt).unwrap();
        assert!(IoUTarget::HARD.contains(iou), "iou {iou}");
        assert_eq!(iou, s.label.iou);
        assert_eq!(s.label.action, Action::MinorRevision);
    }

    #[test]
    fn erode_medium_on_square() {
        let gt = square(96, 28, 28, 40);
        let s = gen_geometric(
            &gt,
            GeometricKind::Erode,
            Difficulty::Medium,
            &LabelRules::default(),
            7,
        )
        .unwrap();
        assert!(s.mask.is_subset_of(&gt).unwrap());
        assert_ne!(s.mask, gt);
        let iou = mask_iou(&s.mask, &gt).unwrap();
        assert!(IoUTarget::MEDIUM.contains(iou), "iou {iou}");
        assert_eq!(s.label.action, Action::MajorRevision);
        assert_eq!(s.label.difficulty, Difficulty::Medium);
    }

    #[test]
    fn cutout_keeps_the_boundary_ring() {
        let gt = square(96, 28, 28, 40);
        for d in [Difficulty::Hard, Difficulty::Medium] {
            let s =
                gen_geometric(&gt, GeometricKind::Cutout, d, &LabelRules::default(), 11).unwrap();
            assert!(s.mask.is_subset_of(&gt).unwrap());
            assert!(crate::mask::boundary(&gt).is_subset_of(&s.mask).unwrap());
            assert!(s.spec.seed_point.is_some());
            let iou = mask_iou(&s.mask, &gt).unwrap();
            assert!(LabelRules::default().interval(d).unwrap().contains(iou));
        }
    }

    #[test]
    fn tiny_objects_are_degenerate() {
        let gt = square(16, 4, 4, 3);
        for kind in GeometricKind::ALL {
            assert_eq!(
                gen_geometric(&gt, kind, Difficulty::Hard, &LabelRules::default(), 1),
                Err(PerturbError::DegenerateObject { area: 9 })
            );
        }
    }

    #[test]
    fn dilate_of_full_canvas_is_unreachable() {
        let gt = BinaryMask::from_fn(10, 10, |_, _| true).unwrap();
        assert!(matches!(
            gen_geometric(
                &gt,
                GeometricKind::Dilate,
                Difficulty::Hard,
                &LabelRules::default(),
                1
            ),
            Err(PerturbError::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn geometric_generation_replays() {
        let gt = BinaryMask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 30.0, y as f64 - 33.0);
            dx * dx / 300.0 + dy * dy / 120.0 <= 1.0
        })
        .unwrap();
        let rules = LabelRules::default();
        for kind in GeometricKind::ALL {
            let a = gen_geometric(&gt, kind, Difficulty::Medium, &rules, 99).unwrap();
            let b = a.spec.replay(&gt, &[], &rules).unwrap();
            assert_eq!(a.mask, b);
        }
    }

    #[test]
    fn full_negs_filter_and_rank() {
        let gt = square(64, 10, 10, 10);
        let touching = BinaryMask::rect(64, 64, 19, 19, 5, 5).unwrap();
        let empty = BinaryMask::new(64, 64).unwrap();
        let near = BinaryMask::rect(64, 64, 21, 10, 5, 10)
            .unwrap()
            .union(&BinaryMask::rect(64, 64, 10, 21, 10, 3).unwrap())
            .unwrap();
        let far = BinaryMask::rect(64, 64, 50, 50, 5, 5).unwrap();
        let out = select_full_negs(
            &gt,
            &[
                ("a-touch".into(), touching),
                ("b-empty".into(), empty),
                ("c-far".into(), far),
                ("d-near".into(), near),
            ],
            3,
        )
        .unwrap();
        let ids: Vec<&str> = out.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, vec!["d-near", "c-far"]);
        assert!(out.iter().all(|n| n.label == QualityLabel::full_neg()));
        assert!(select_full_negs(&gt, &[], 3).unwrap().is_empty());
    }

    #[test]
    fn full_neg_ties_break_by_id() {
        let gt = square(64, 10, 10, 10);
        let a = BinaryMask::rect(64, 64, 40, 40, 3, 3).unwrap();
        let b = BinaryMask::rect(64, 64, 50, 50, 3, 3).unwrap();
        let out = select_full_negs(&gt, &[("z".into(), a), ("m".into(), b)], 3).unwrap();
        assert_eq!(out[0].id, "m");
        assert_eq!(out[1].id, "z");
    }

    fn merge_case(gt_area: usize, neg_area: usize) -> QualityLabel {
        let w = 400;
        let gt = BinaryMask::rect(w, 2, 0, 0, gt_area, 1).unwrap();
        let neg = BinaryMask::rect(w, 2, 0, 1, neg_area, 1).unwrap();
        let out = gen_merges(&gt, &[("n".into(), neg)], &LabelRules::default()).unwrap();
        out[0].label
    }

    #[test]
    fn merge_labels_follow_the_thresholds() {
        let l = merge_case(80, 20);
        assert_eq!(l.iou, 0.8);
        assert_eq!(
            (l.action, l.difficulty),
            (Action::MajorRevision, Difficulty::Medium)
        );
        let l = merge_case(95, 5);
        assert_eq!(l.iou, 0.95);
        assert_eq!(
            (l.action, l.difficulty),
            (Action::MinorRevision, Difficulty::Hard)
        );
        let l = merge_case(50, 150);
        assert_eq!(l.iou, 0.25);
        assert_eq!((l.action, l.difficulty), (Action::Reject, Difficulty::Easy));
    }

    #[test]
    fn merge_rejects_overlap() {
        let gt = square(32, 4, 4, 10);
        let neg = square(32, 10, 10, 10);
        assert!(matches!(
            gen_merges(&gt, &[("x".into(), neg)], &LabelRules::default()),
            Err(PerturbError::OverlapViolation { .. })
        ));
    }

    fn instance_fixture(valid: usize) -> (BinaryMask, Vec<(String, BinaryMask)>) {
        let gt = square(96, 30, 30, 30);
        let mut negs = Vec::new();
        for i in 0..valid {
            negs.push((
                format!("neg{i}"),
                BinaryMask::rect(96, 96, 62 + i * 8, 30, 6, 20).unwrap(),
            ));
        }
        negs.push(("overlap".into(), square(96, 50, 50, 20)));
        (gt, negs)
    }

    #[test]
    fn instance_sizes() {
        let rules = LabelRules::default();
        let (gt, negs) = instance_fixture(3);
        let out = gen_instance(&gt, &negs, 5, &rules, 3).unwrap();
        assert_eq!(out.samples.len(), 13);
        assert!(!out.is_partial());

        let (gt, negs) = instance_fixture(0);
        let out = gen_instance(&gt, &negs, 5, &rules, 3).unwrap();
        assert_eq!(out.samples.len(), 7);

        let (gt, negs) = instance_fixture(4);
        let out = gen_instance(&gt, &negs, 5, &rules, 3).unwrap();
        assert_eq!(out.samples.len(), 13);
    }

    #[test]
    fn instance_is_deterministic() {
        let rules = LabelRules::default();
        let (gt, negs) = instance_fixture(2);
        let a = gen_instance(&gt, &negs, 42, &rules, 3).unwrap();
        let b = gen_instance(&gt, &negs, 42, &rules, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_instance_is_partial() {
        let gt = square(16, 4, 4, 4);
        let out = gen_instance(&gt, &[], 1, &LabelRules::default(), 3).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.failures.len(), 6);
        assert!(out.is_partial());
    }

    #[test]
    fn derived_seeds_are_stable_and_separated() {
        assert_eq!(derive_seed(&["a", "b"]), derive_seed(&["a", "b"]));
        assert_ne!(derive_seed(&["ab", ""]), derive_seed(&["a", "b"]));
    }
}
