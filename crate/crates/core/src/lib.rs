//! Synthesis of labelled mask corruptions, audit-record parsing and the
//! scoring harness for reference-free mask quality assessment.
//!
//! Start with [`perturb::gen_instance`] for the sample set of one object,
//! [`dataset::build_benchmark`] for a whole benchmark on disk, and
//! [`metrics::evaluate`] to score an auditor's predictions.

pub mod audit;
pub mod auditors;
pub mod dataset;
pub mod mask;
pub mod metrics;
pub mod perturb;

pub use audit::{parse_audit, serialize_audit, AuditFields, AuditPrediction, ParseStatus};
pub use auditors::{
    Auditor, ConstantAuditor, ConstantPolicy, NoiseParams, NoisyOracle, OracleAuditor,
};
pub use dataset::{BuildConfig, BuildProtocol, Composition, Manifest, SampleRecord, Split};
pub use mask::{BinaryMask, BoundingBox, ElementShape, MaskError, StructuringElement};
pub use metrics::{EvalOptions, MetricReport, PrecisionMode, Protocol};
pub use perturb::{
    Action, Difficulty, GeometricKind, IoUTarget, LabelRules, MaskType, MergeThresholds,
    PerturbError, QualityLabel,
};
