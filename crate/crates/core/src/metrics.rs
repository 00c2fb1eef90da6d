//! RMSE and macro F2 for audit predictions, in the per-type column layout
//! (Perfect | Cutout H/M | Dilate H/M | Erode H/M | Merge | Full_neg | Avg).
//!
//! Image protocol: every sample counts once. Video protocol: frames are
//! grouped into videos, IoUs are averaged per video and F2 is computed per
//! video before averaging across videos.
//!
//! All floating-point sums are taken over sorted values so reported numbers do
//! not depend on input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditPrediction, ParseStatus, FAILED_PARSE_IOU};
use crate::perturb::{Action, Difficulty, MaskType, QualityLabel};

pub const F_BETA: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no prediction for sample '{0}'")]
    UnscoredSample(String),
    #[error("video '{0}' has no frames")]
    EmptyVideo(String),
}

/// F-beta from raw counts; 0 whenever precision and recall are both 0.
pub fn f_beta(tp: u64, fp: u64, fn_: u64, beta: f64) -> f64 {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    f_beta_pr(ratio(tp, tp + fp), ratio(tp, tp + fn_), beta)
}

pub fn f_beta_pr(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn mean(v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(sorted_sum(v) / n)
}

fn rmse(residuals: impl IntoIterator<Item = f64>) -> Option<f64> {
    mean(residuals.into_iter().map(|r| r * r).collect()).map(f64::sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ImageBased,
    VideoBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// Per-column precision is taken over the whole split.
    #[default]
    Global,
    /// Per-column precision is taken over the column's own samples.
    Subset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub precision: PrecisionMode,
    /// Treat recovered parses as failed.
    pub strict_parse: bool,
}

/// The reporting columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Perfect,
    CutoutHard,
    CutoutMedium,
    DilateHard,
    DilateMedium,
    ErodeHard,
    ErodeMedium,
    Merge,
    FullNeg,
}

impl Column {
    pub const ALL: [Column; 9] = [
        Column::Perfect,
        Column::CutoutHard,
        Column::CutoutMedium,
        Column::DilateHard,
        Column::DilateMedium,
        Column::ErodeHard,
        Column::ErodeMedium,
        Column::Merge,
        Column::FullNeg,
    ];

    pub fn of(label: &QualityLabel) -> Column {
        let hard = label.difficulty == Difficulty::Hard;
        match label.mask_type {
            MaskType::Perfect => Column::Perfect,
            MaskType::Cutout if hard => Column::CutoutHard,
            MaskType::Cutout => Column::CutoutMedium,
            MaskType::Dilate if hard => Column::DilateHard,
            MaskType::Dilate => Column::DilateMedium,
            MaskType::Erode if hard => Column::ErodeHard,
            MaskType::Erode => Column::ErodeMedium,
            MaskType::Merge => Column::Merge,
            MaskType::FullNeg => Column::FullNeg,
        }
    }

    pub fn header(&self) -> &'static str {
        match self {
            Column::Perfect => "Perfect",
            Column::CutoutHard => "Cutout H",
            Column::CutoutMedium => "Cutout M",
            Column::DilateHard => "Dilate H",
            Column::DilateMedium => "Dilate M",
            Column::ErodeHard => "Erode H",
            Column::ErodeMedium => "Erode M",
            Column::Merge => "Merge",
            Column::FullNeg => "Full_neg",
        }
    }
}

/// The prediction reduced to what scoring needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub iou: f64,
    pub mask_type: Option<MaskType>,
    pub action: Option<Action>,
    pub status: ParseStatus,
}

impl ScoredPrediction {
    pub fn from_audit(p: &AuditPrediction, strict_parse: bool) -> Self {
        let failed =
            p.status == ParseStatus::Failed || (strict_parse && p.status == ParseStatus::Recovered);
        if failed {
            return Self {
                iou: FAILED_PARSE_IOU,
                mask_type: None,
                action: None,
                status: ParseStatus::Failed,
            };
        }
        Self {
            iou: p.scored_iou(),
            mask_type: p.mask_type,
            action: p.action,
            status: p.status,
        }
    }

    pub fn exact(label: &QualityLabel) -> Self {
        Self {
            iou: label.iou,
            mask_type: Some(label.mask_type),
            action: Some(label.action),
            status: ParseStatus::Clean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub split: String,
    /// Grouping key for the video protocol; ignored by the image protocol.
    pub video: String,
    pub label: QualityLabel,
    pub prediction: ScoredPrediction,
}

/// Ground truth by rows, prediction by columns; the last column counts
/// samples with no predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn is_zero(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

impl ConfusionMatrix {
    fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n + 1]; n],
        }
    }

    fn add(&mut self, gt: usize, pred: Option<usize>) {
        let col = pred.unwrap_or(self.classes.len());
        self.counts[gt][col] += 1;
    }

    pub fn class_counts(&self, c: usize) -> ClassCounts {
        let tp = self.counts[c][c];
        let row: u64 = self.counts[c].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        ClassCounts {
            tp,
            fp: col - tp,
            fn_: row - tp,
        }
    }

    /// Macro F2 over classes with any nonzero count.
    pub fn macro_f2(&self) -> Option<f64> {
        let scores: Vec<f64> = (0..self.classes.len())
            .map(|c| self.class_counts(c))
            .filter(|cc| !cc.is_zero())
            .map(|cc| f_beta(cc.tp, cc.fp, cc.fn_, F_BETA))
            .collect();
        mean(scores)
    }
}

/// A class family scored separately: mask types (6) or actions (4).
trait ClassSet {
    const N: usize;
    fn gt(label: &QualityLabel) -> usize;
    fn pred(p: &ScoredPrediction) -> Option<usize>;
    fn names() -> Vec<String>;
}

struct TypeClasses;
impl ClassSet for TypeClasses {
    const N: usize = 6;
    fn gt(label: &QualityLabel) -> usize {
        label.mask_type.index()
    }
    fn pred(p: &ScoredPrediction) -> Option<usize> {
        p.mask_type.map(|t| t.index())
    }
    fn names() -> Vec<String> {
        MaskType::ALL
            .iter()
            .map(|t| t.as_str().to_string())
            .collect()
    }
}

struct ActionClasses;
impl ClassSet for ActionClasses {
    const N: usize = 4;
    fn gt(label: &QualityLabel) -> usize {
        label.action.index()
    }
    fn pred(p: &ScoredPrediction) -> Option<usize> {
        p.action.map(|a| a.index())
    }
    fn names() -> Vec<String> {
        Action::ALL.iter().map(|a| a.as_str().to_string()).collect()
    }
}

fn confusion<C: ClassSet>(samples: &[&EvalSample]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(C::names());
    for s in samples {
        m.add(C::gt(&s.label), C::pred(&s.prediction));
    }
    m
}

/// Column F2: macro over the ground-truth classes present in the column;
/// recall from the column, precision per `mode`.
fn column_f2<C: ClassSet>(
    column: &ConfusionMatrix,
    split: &ConfusionMatrix,
    mode: PrecisionMode,
) -> Option<f64> {
    let scores: Vec<f64> = (0..C::N)
        .filter(|&c| column.counts[c].iter().sum::<u64>() > 0)
        .map(|c| {
            let sub = column.class_counts(c);
            let recall = sub.tp as f64 / (sub.tp + sub.fn_) as f64;
            let p_counts = match mode {
                PrecisionMode::Global => split.class_counts(c),
                PrecisionMode::Subset => sub,
            };
            let precision = if p_counts.tp + p_counts.fp == 0 {
                0.0
            } else {
                p_counts.tp as f64 / (p_counts.tp + p_counts.fp) as f64
            };
            f_beta_pr(precision, recall, F_BETA)
        })
        .collect();
    mean(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellMetrics {
    pub rmse: Option<f64>,
    /// Percent, 0..=100.
    pub f2_mask_type: Option<f64>,
    /// Percent, 0..=100.
    pub f2_action: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub column: Column,
    /// Samples (image protocol) or videos (video protocol).
    pub count: usize,
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseCounts {
    pub clean: usize,
    pub recovered: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub samples: usize,
    pub videos: usize,
    pub parse: ParseCounts,
    pub cells: Vec<CellReport>,
    /// Mean over the non-empty columns.
    pub average: CellMetrics,
    /// Pooled over every sample (or video) of the split.
    pub overall: CellMetrics,
    pub mask_type_confusion: ConfusionMatrix,
    pub action_confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub options: EvalOptions,
    pub splits: Vec<SplitReport>,
}

fn pct(x: Option<f64>) -> Option<f64> {
    x.map(|v| v * 100.0)
}

fn average_row(cells: &[CellReport]) -> CellMetrics {
    let avg = |f: fn(&CellMetrics) -> Option<f64>| {
        mean(cells.iter().filter_map(|c| f(&c.metrics)).collect())
    };
    CellMetrics {
        rmse: avg(|m| m.rmse),
        f2_mask_type: avg(|m| m.f2_mask_type),
        f2_action: avg(|m| m.f2_action),
    }
}

fn parse_counts(samples: &[&EvalSample]) -> ParseCounts {
    let mut pc = ParseCounts::default();
    for s in samples {
        match s.prediction.status {
            ParseStatus::Clean => pc.clean += 1,
            ParseStatus::Recovered => pc.recovered += 1,
            ParseStatus::Failed => pc.failed += 1,
        }
    }
    pc
}

fn by_split(samples: &[EvalSample]) -> BTreeMap<&str, Vec<&EvalSample>> {
    let mut out: BTreeMap<&str, Vec<&EvalSample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.split.as_str()).or_default().push(s);
    }
    out
}

pub fn evaluate_image_based(samples: &[EvalSample], options: EvalOptions) -> MetricReport {
    let splits = by_split(samples)
        .into_iter()
        .map(|(split, items)| {
            let type_all = confusion::<TypeClasses>(&items);
            let action_all = confusion::<ActionClasses>(&items);
            let cells = Column::ALL
                .iter()
                .map(|&column| {
                    let sub: Vec<&EvalSample> = items
                        .iter()
                        .copied()
                        .filter(|s| Column::of(&s.label) == column)
                        .collect();
                    let metrics = CellMetrics {
                        rmse: rmse(sub.iter().map(|s| s.prediction.iou - s.label.iou)),
                        f2_mask_type: pct(column_f2::<TypeClasses>(
                            &confusion::<TypeClasses>(&sub),
                            &type_all,
                            options.precision,
                        )),
                        f2_action: pct(column_f2::<ActionClasses>(
                            &confusion::<ActionClasses>(&sub),
                            &action_all,
                            options.precision,
                        )),
                    };
                    CellReport {
                        column,
                        count: sub.len(),
                        metrics,
                    }
                })
                .collect::<Vec<_>>();
            SplitReport {
                split: split.to_string(),
                samples: items.len(),
                videos: 0,
                parse: parse_counts(&items),
                average: average_row(&cells),
                overall: CellMetrics {
                    rmse: rmse(items.iter().map(|s| s.prediction.iou - s.label.iou)),
                    f2_mask_type: pct(type_all.macro_f2()),
                    f2_action: pct(action_all.macro_f2()),
                },
                cells,
                mask_type_confusion: type_all,
                action_confusion: action_all,
            }
        })
        .collect();
    MetricReport {
        protocol: Protocol::ImageBased,
        options,
        splits,
    }
}

/// Per-video aggregates used by the video protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScore {
    pub column: Column,
    pub frames: usize,
    pub gt_mean_iou: f64,
    pub pred_mean_iou: f64,
    pub f2_mask_type: f64,
    pub f2_action: f64,
}

/// Scores one video. A video with mixed columns is filed under the first one in
/// column order.
pub fn score_video(frames: &[&EvalSample]) -> Option<VideoScore> {
    let first = frames.iter().map(|s| Column::of(&s.label)).min()?;
    let n = frames.len();
    Some(VideoScore {
        column: first,
        frames: n,
        gt_mean_iou: mean(frames.iter().map(|s| s.label.iou).collect())?,
        pred_mean_iou: mean(frames.iter().map(|s| s.prediction.iou).collect())?,
        f2_mask_type: confusion::<TypeClasses>(frames).macro_f2().unwrap_or(0.0),
        f2_action: confusion::<ActionClasses>(frames).macro_f2().unwrap_or(0.0),
    })
}

fn video_metrics(videos: &[&VideoScore]) -> CellMetrics {
    CellMetrics {
        rmse: rmse(videos.iter().map(|v| v.pred_mean_iou - v.gt_mean_iou)),
        f2_mask_type: pct(mean(videos.iter().map(|v| v.f2_mask_type).collect())),
        f2_action: pct(mean(videos.iter().map(|v| v.f2_action).collect())),
    }
}

pub fn evaluate_video_based(
    samples: &[EvalSample],
    options: EvalOptions,
) -> Result<MetricReport, MetricsError> {
    let mut splits = Vec::new();
    for (split, items) in by_split(samples) {
        let mut grouped: BTreeMap<&str, Vec<&EvalSample>> = BTreeMap::new();
        for s in &items {
            grouped.entry(s.video.as_str()).or_default().push(s);
        }
        let mut videos = Vec::with_capacity(grouped.len());
        for (id, frames) in &grouped {
            videos
                .push(score_video(frames).ok_or_else(|| MetricsError::EmptyVideo(id.to_string()))?);
        }
        let cells: Vec<CellReport> = Column::ALL
            .iter()
            .map(|&column| {
                let sub: Vec<&VideoScore> = videos.iter().filter(|v| v.column == column).collect();
                CellReport {
                    column,
                    count: sub.len(),
                    metrics: video_metrics(&sub),
                }
            })
            .collect();
        let all: Vec<&VideoScore> = videos.iter().collect();
        splits.push(SplitReport {
            split: split.to_string(),
            samples: items.len(),
            videos: videos.len(),
            parse: parse_counts(&items),
            average: average_row(&cells),
            overall: video_metrics(&all),
            cells,
            mask_type_confusion: confusion::<TypeClasses>(&items),
            action_confusion: confusion::<ActionClasses>(&items),
        });
    }
    Ok(MetricReport {
        protocol: Protocol::VideoBased,
        options,
        splits,
    })
}

pub fn evaluate(
    protocol: Protocol,
    samples: &[EvalSample],
    options: EvalOptions,
) -> Result<MetricReport, MetricsError> {
    match protocol {
        Protocol::ImageBased => Ok(evaluate_image_based(samples, options)),
        Protocol::VideoBased => evaluate_video_based(samples, options),
    }
}

fn fmt_cell(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "-".to_string(),
    }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One table per split: rows RMSE / F2 mask type / F2 action, percentages
    /// to 2 decimals and RMSE to 3.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let protocol = match self.protocol {
            Protocol::ImageBased => "image-based",
            Protocol::VideoBased => "video-based",
        };
        let _ = writeln!(out, "# Audit evaluation ({protocol})");
        let header: Vec<&str> = Column::ALL.iter().map(Column::header).collect();
        for split in &self.splits {
            let unit = match self.protocol {
                Protocol::ImageBased => format!("{} samples", split.samples),
                Protocol::VideoBased => {
                    format!("{} videos, {} frames", split.videos, split.samples)
                }
            };
            let _ = writeln!(out, "\n## {} ({unit})\n", split.split);
            let _ = writeln!(out, "| Metric | {} | Avg |", header.join(" | "));
            let _ = writeln!(out, "|---|{}---|", "---|".repeat(header.len()));
            type Getter = fn(&CellMetrics) -> Option<f64>;
            let rows: [(&str, Getter, usize); 3] = [
                ("RMSE", |m| m.rmse, 3),
                ("F2 mask type", |m| m.f2_mask_type, 2),
                ("F2 action", |m| m.f2_action, 2),
            ];
            for (name, get, dp) in rows {
                let cells: Vec<String> = split
                    .cells
                    .iter()
                    .map(|c| fmt_cell(get(&c.metrics), dp))
                    .collect();
                let _ = writeln!(
                    out,
                    "| {name} | {} | {} |",
                    cells.join(" | "),
                    fmt_cell(get(&split.average), dp)
                );
            }
            let _ = writeln!(
                out,
                "\nOverall: RMSE {}, F2 mask type {}, F2 action {}. Parses: {} clean, {} recovered, {} failed.",
                fmt_cell(split.overall.rmse, 3),
                fmt_cell(split.overall.f2_mask_type, 2),
                fmt_cell(split.overall.f2_action, 2),
                split.parse.clean,
                split.parse.recovered,
                split.parse.failed
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::LabelRules;

    fn label(t: MaskType, iou: f64) -> QualityLabel {
        LabelRules::default().label(t, iou).unwrap()
    }

    fn sample(split: &str, video: &str, gt: QualityLabel, pred: ScoredPrediction) -> EvalSample {
        EvalSample {
            split: split.into(),
            video: video.into(),
            label: gt,
            prediction: pred,
        }
    }

    #[test]
    fn f_beta_examples() {
        assert!((f_beta(3, 1, 2, 2.0) - 0.625).abs() < 1e-15);
        assert_eq!(f_beta(0, 5, 5, 2.0), 0.0);
        assert_eq!(f_beta(0, 0, 0, 2.0), 0.0);
        for x in [0.1, 0.37, 0.5, 1.0] {
            assert!((f_beta_pr(x, x, 2.0) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_is_a_fixed_point() {
        let labels = [
            QualityLabel::perfect(),
            label(MaskType::Cutout, 0.87),
            label(MaskType::Dilate, 0.76),
            label(MaskType::Merge, 0.5),
            QualityLabel::full_neg(),
        ];
        let samples: Vec<EvalSample> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| sample("s", &format!("v{}", i % 2), *l, ScoredPrediction::exact(l)))
            .collect();
        for protocol in [Protocol::ImageBased, Protocol::VideoBased] {
            let r = evaluate(protocol, &samples, EvalOptions::default()).unwrap();
            let s = &r.splits[0];
            assert_eq!(s.overall.rmse, Some(0.0));
            for c in s.cells.iter().filter(|c| c.count > 0) {
                assert_eq!(c.metrics.rmse, Some(0.0));
            }
            if protocol == Protocol::ImageBased {
                assert_eq!(s.overall.f2_mask_type, Some(100.0));
                for c in s.cells.iter().filter(|c| c.count > 0) {
                    assert_eq!(c.metrics.f2_mask_type, Some(100.0));
                    assert_eq!(c.metrics.f2_action, Some(100.0));
                }
            }
        }
    }

    #[test]
    fn alternating_residuals_give_exact_rmse() {
        let samples: Vec<EvalSample> = (0..10)
            .map(|i| {
                let gt = label(MaskType::Merge, 0.5);
                let mut p = ScoredPrediction::exact(&gt);
                p.iou = if i % 2 == 0 { 0.625 } else { 0.375 };
                sample("s", "v", gt, p)
            })
            .collect();
        let r = evaluate_image_based(&samples, EvalOptions::default());
        assert_eq!(r.splits[0].overall.rmse, Some(0.125));
    }

    #[test]
    fn video_rmse_uses_means() {
        let gt = label(MaskType::Dilate, 0.85);
        let samples: Vec<EvalSample> = [0.55, 0.75]
            .iter()
            .map(|&iou| {
                let mut p = ScoredPrediction::exact(&gt);
                p.iou = iou;
                sample("s", "v", gt, p)
            })
            .collect();
        let r = evaluate_video_based(&samples, EvalOptions::default()).unwrap();
        assert!((r.splits[0].overall.rmse.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn video_f2_averages_over_videos() {
        let gt = QualityLabel::perfect();
        let wrong = ScoredPrediction {
            iou: 1.0,
            mask_type: Some(MaskType::Dilate),
            action: Some(Action::Reject),
            status: ParseStatus::Clean,
        };
        let samples = vec![
            sample("s", "a", gt, ScoredPrediction::exact(&gt)),
            sample("s", "b", gt, wrong),
        ];
        let r = evaluate_video_based(&samples, EvalOptions::default()).unwrap();
        assert_eq!(r.splits[0].overall.f2_mask_type, Some(50.0));
        assert_eq!(r.splits[0].videos, 2);
    }

    #[test]
    fn failed_parse_is_fn_only() {
        let gt = QualityLabel::perfect();
        let failed = ScoredPrediction {
            iou: FAILED_PARSE_IOU,
            mask_type: None,
            action: None,
            status: ParseStatus::Failed,
        };
        let samples = vec![
            sample("s", "a", gt, ScoredPrediction::exact(&gt)),
            sample("s", "b", gt, failed),
        ];
        let r = evaluate_image_based(&samples, EvalOptions::default());
        let m = &r.splits[0].mask_type_confusion;
        let cc = m.class_counts(MaskType::Perfect.index());
        assert_eq!((cc.tp, cc.fp, cc.fn_), (1, 0, 1));
        for c in 0..6 {
            if c != MaskType::Perfect.index() {
                assert_eq!(m.class_counts(c).fp, 0);
            }
        }
        assert_eq!(r.splits[0].parse.failed, 1);
    }

    #[test]
    fn accept_everything_closed_form() {
        let accept = ScoredPrediction {
            iou: 1.0,
            mask_type: Some(MaskType::Perfect),
            action: Some(Action::Accept),
            status: ParseStatus::Clean,
        };
        let mut samples = vec![sample("s", "p", QualityLabel::perfect(), accept)];
        for i in 0..3 {
            samples.push(sample(
                "s",
                &i.to_string(),
                QualityLabel::full_neg(),
                accept,
            ));
        }
        let r = evaluate_image_based(&samples, EvalOptions::default());
        let rho: f64 = 0.25;
        let perfect = &r.splits[0].cells[0];
        let expected = 100.0 * 5.0 * rho / (4.0 * rho + 1.0);
        assert!((perfect.metrics.f2_mask_type.unwrap() - expected).abs() < 1e-12);
        assert_eq!(r.splits[0].cells[8].metrics.f2_mask_type, Some(0.0));

        let sub = evaluate_image_based(
            &samples,
            EvalOptions {
                precision: PrecisionMode::Subset,
                strict_parse: false,
            },
        );
        assert_eq!(sub.splits[0].cells[0].metrics.f2_mask_type, Some(100.0));
    }

    #[test]
    fn markdown_and_json_render() {
        let gt = QualityLabel::perfect();
        let samples = vec![sample("test_seen", "a", gt, ScoredPrediction::exact(&gt))];
        let r = evaluate_image_based(&samples, EvalOptions::default());
        let md = r.to_markdown();
        assert!(md.contains("| RMSE | 0.000 | - |"));
        assert!(md.contains("| F2 mask type | 100.00 |"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);

        let empty = evaluate_image_based(&[], EvalOptions::default());
        assert!(empty.to_markdown().starts_with("# Audit evaluation"));
        assert!(empty.splits.is_empty());
    }
}
