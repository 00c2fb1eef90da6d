//! Audit records: the tagged text auditors emit, a total parser with error
//! recovery, and the line-delimited predictions file.
//!
//! Well-formed output looks like
//!
//! ```text
//! <audit> {reasoning} The IoU with GT is <iou> 0.8731 </iou>, its mask type
//! belongs to <mask_type> dilate </mask_type>, and the recommend action is
//! <action> Minor Revision </action> </audit>
//! ```
//!
//! The parser never fails. Anything short of the exact form above is either
//! `Recovered` (some fields salvaged) or `Failed` (neither a mask type nor an
//! action could be found).

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::perturb::{Action, MaskType};

/// IoU assumed for an audit that could not be scored at all.
pub const FAILED_PARSE_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Failed,
    Recovered,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditPrediction {
    pub raw_text: String,
    pub iou: Option<f64>,
    pub mask_type: Option<MaskType>,
    pub action: Option<Action>,
    pub reasoning: String,
    pub status: ParseStatus,
    /// Target-object hint, from a `target:` marker in the text or a sidecar field.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<String>,
}

impl AuditPrediction {
    /// A structured prediction whose text is the canonical serialization.
    pub fn from_fields(fields: &AuditFields) -> Self {
        Self {
            raw_text: serialize_audit(fields),
            iou: Some(fields.iou.clamp(0.0, 1.0)),
            mask_type: Some(fields.mask_type),
            action: Some(fields.action),
            reasoning: fields.reasoning.clone(),
            status: ParseStatus::Clean,
            target: extract_target(&fields.reasoning),
        }
    }

    pub fn fields(&self) -> Option<AuditFields> {
        Some(AuditFields {
            iou: self.iou?,
            mask_type: self.mask_type?,
            action: self.action?,
            reasoning: self.reasoning.clone(),
        })
    }

    /// IoU used for scoring: failed parses and missing values score 0.5.
    pub fn scored_iou(&self) -> f64 {
        match self.status {
            ParseStatus::Failed => FAILED_PARSE_IOU,
            _ => self.iou.unwrap_or(FAILED_PARSE_IOU),
        }
    }
}

/// The predicted triple plus free-text reasoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFields {
    pub iou: f64,
    pub mask_type: MaskType,
    pub action: Action,
    pub reasoning: String,
}

/// Short canonical reasoning for a mask type, naming the target object.
pub fn template_reasoning(mask_type: MaskType, action: Action, target: &str) -> String {
    let body = match mask_type {
        MaskType::Perfect => "The mask covers the object exactly.",
        MaskType::FullNeg => "The mask covers a different object and none of the target.",
        MaskType::Cutout => "The mask misses pixels inside the object.",
        MaskType::Dilate => "The mask spills past the object boundary into the background.",
        MaskType::Erode => "The mask falls short of the object boundary.",
        MaskType::Merge => "The mask covers the object together with a second, unrelated object.",
    };
    let severity = match action {
        Action::Accept => "No change is needed.",
        Action::MinorRevision => "The error is small.",
        Action::MajorRevision => "The error is large.",
        Action::Reject => "The mask should be discarded.",
    };
    format!("target: {target}. {body} {severity}")
}

pub fn serialize_audit(fields: &AuditFields) -> String {
    format!(
        "<audit> {} The IoU with GT is <iou> {:.4} </iou>, its mask type belongs to <mask_type> {} </mask_type>, and the recommend action is <action> {} </action> </audit>",
        fields.reasoning,
        fields.iou,
        fields.mask_type.as_str(),
        fields.action.title()
    )
}

macro_rules! re {
    ($name:ident, $pat:expr) => {
        static $name: LazyLock<Regex> = LazyLock::new(|| Regex::new($pat).unwrap());
    };
}

re!(AUDIT_BLOCK, r"(?is)<\s*audit\s*>(.*?)<\s*/\s*audit\s*>");
re!(AUDIT_OPEN, r"(?i)<\s*audit\s*>");
re!(AUDIT_CLOSE, r"(?i)<\s*/\s*audit\s*>");
re!(IOU_PAIR, r"(?is)<\s*iou\s*>(.*?)<\s*/\s*iou\s*>");
re!(
    TYPE_PAIR,
    r"(?is)<\s*(?:mask_type|mask)\s*>(.*?)<\s*/\s*(?:mask_type|mask)\s*>"
);
re!(ACTION_PAIR, r"(?is)<\s*action\s*>(.*?)<\s*/\s*action\s*>");
re!(IOU_OPEN, r"(?i)<\s*iou\s*>([^<]*)");
re!(TYPE_OPEN, r"(?i)<\s*(?:mask_type|mask)\s*>([^<]*)");
re!(ACTION_OPEN, r"(?i)<\s*action\s*>([^<]*)");
re!(IOU_CLOSE, r"(?i)([^>]*)<\s*/\s*iou\s*>");
re!(TYPE_CLOSE, r"(?i)([^>]*)<\s*/\s*(?:mask_type|mask)\s*>");
re!(ACTION_CLOSE, r"(?i)([^>]*)<\s*/\s*action\s*>");
re!(
    IOU_KEYED,
    r"(?i)\biou\b(?:\s*with\s*gt)?\s*(?:is|=|:)?\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:e[-+]?\d+)?)"
);
re!(TYPE_KEYED, r"(?i)\b(?:mask[\s_\-]*)?type\b([^,;\n<]*)");
re!(ACTION_KEYED, r"(?i)\baction\b([^,;\n<]*)");
re!(NUMBER, r"(?i)[-+]?(?:\d+\.?\d*|\.\d+)(?:e[-+]?\d+)?");
re!(PLAIN_DECIMAL, r"^(?:\d+(?:\.\d*)?|\.\d+)$");
re!(
    TYPE_VALUE,
    r"(?i)(full[\s_\-]*neg)|(perfect)|(cut[\s_\-]*out)|(dilat)|(ero(?:de|sion|ded))|(merg)"
);
re!(ACTION_VALUE, r"(?i)(accept)|(minor)|(major)|(reject)");
re!(TARGET, r"(?i)\btarget\s*:\s*([^\n.,;<]+)");
re!(TAG, r"<[^<>]*>");

const TYPE_ORDER: [MaskType; 6] = [
    MaskType::FullNeg,
    MaskType::Perfect,
    MaskType::Cutout,
    MaskType::Dilate,
    MaskType::Erode,
    MaskType::Merge,
];
const ACTION_ORDER: [Action; 4] = [
    Action::Accept,
    Action::MinorRevision,
    Action::MajorRevision,
    Action::Reject,
];

fn match_mask_type(s: &str, last: bool) -> Option<MaskType> {
    let caps = if last {
        TYPE_VALUE.captures_iter(s).last()
    } else {
        TYPE_VALUE.captures(s)
    }?;
    (1..=6)
        .find(|&i| caps.get(i).is_some())
        .map(|i| TYPE_ORDER[i - 1])
}

fn match_action(s: &str, last: bool) -> Option<Action> {
    let caps = if last {
        ACTION_VALUE.captures_iter(s).last()
    } else {
        ACTION_VALUE.captures(s)
    }?;
    (1..=4)
        .find(|&i| caps.get(i).is_some())
        .map(|i| ACTION_ORDER[i - 1])
}

/// Lenient mask-type matching (`FULL NEG`, `fullneg`, `Dilation`, ...).
pub fn normalize_mask_type(s: &str) -> Option<MaskType> {
    match_mask_type(s, false)
}

/// Lenient action matching (`minor`, `MAJOR revision`, ...).
pub fn normalize_action(s: &str) -> Option<Action> {
    match_action(s, false)
}

fn parse_number(s: &str) -> Option<f64> {
    NUMBER
        .find(s)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

pub fn extract_target(text: &str) -> Option<String> {
    TARGET
        .captures(text)
        .map(|c| c[1].trim().to_string())
        .filter(|t| !t.is_empty())
}

/// Where a field value came from.
enum Hit<'a> {
    /// A complete tag pair; `canonical` when the tags were written exactly and once.
    Pair {
        value: &'a str,
        canonical: bool,
    },
    Open(&'a str),
    Close(&'a str),
    Keyed(&'a str),
    Missing,
}

fn locate<'a>(
    content: &'a str,
    pair: &Regex,
    open: &Regex,
    close: &Regex,
    keyed: &Regex,
    canonical_tags: &[(&str, &str)],
) -> Hit<'a> {
    let pairs: Vec<_> = pair.captures_iter(content).collect();
    if let Some(last) = pairs.last() {
        let whole = last.get(0).unwrap().as_str();
        let canonical = pairs.len() == 1
            && canonical_tags
                .iter()
                .any(|(o, c)| whole.starts_with(o) && whole.ends_with(c));
        return Hit::Pair {
            value: last.get(1).unwrap().as_str(),
            canonical,
        };
    }
    if let Some(c) = open.captures_iter(content).last() {
        return Hit::Open(c.get(1).unwrap().as_str());
    }
    if let Some(c) = close.captures_iter(content).last() {
        return Hit::Close(c.get(1).unwrap().as_str());
    }
    if let Some(c) = keyed.captures_iter(content).last() {
        return Hit::Keyed(c.get(1).unwrap().as_str());
    }
    Hit::Missing
}

fn reasoning_of(content: &str) -> String {
    let head = match content.find('<') {
        Some(i) => &content[..i],
        None => content,
    };
    let head = head.trim_end();
    const LEAD: &str = "the iou with gt is";
    let cut = if head.len() >= LEAD.len()
        && head.is_char_boundary(head.len() - LEAD.len())
        && head[head.len() - LEAD.len()..].eq_ignore_ascii_case(LEAD)
    {
        &head[..head.len() - LEAD.len()]
    } else {
        head
    };
    cut.trim().to_string()
}

/// Parses arbitrary auditor output. Never panics.
pub fn parse_audit(text: &str) -> AuditPrediction {
    let blocks: Vec<_> = AUDIT_BLOCK.captures_iter(text).collect();
    let (content, block_clean) = match blocks.last() {
        Some(c) => {
            let whole = c.get(0).unwrap().as_str();
            let exact = whole.starts_with("<audit>") && whole.ends_with("</audit>");
            (c.get(1).unwrap().as_str(), blocks.len() == 1 && exact)
        }
        None => {
            if let Some(m) = AUDIT_OPEN.find_iter(text).last() {
                (&text[m.end()..], false)
            } else if let Some(m) = AUDIT_CLOSE.find(text) {
                (&text[..m.start()], false)
            } else {
                (text, false)
            }
        }
    };

    let mut clean = block_clean;

    let iou_hit = locate(
        content,
        &IOU_PAIR,
        &IOU_OPEN,
        &IOU_CLOSE,
        &IOU_KEYED,
        &[("<iou>", "</iou>")],
    );
    let mut iou = match iou_hit {
        Hit::Pair { value, canonical } => {
            let v = value.trim();
            let exact = PLAIN_DECIMAL
                .is_match(v)
                .then(|| v.parse::<f64>().ok())
                .flatten()
                .filter(|x| (0.0..=1.0).contains(x));
            match exact {
                Some(x) if canonical => Some(x),
                _ => {
                    clean = false;
                    parse_number(v)
                }
            }
        }
        Hit::Open(v) | Hit::Keyed(v) => {
            clean = false;
            parse_number(v)
        }
        Hit::Close(v) => {
            clean = false;
            NUMBER
                .find_iter(v)
                .last()
                .and_then(|m| m.as_str().parse::<f64>().ok())
                .filter(|x| x.is_finite())
        }
        Hit::Missing => {
            clean = false;
            None
        }
    };
    if let Some(v) = iou {
        if !(0.0..=1.0).contains(&v) {
            clean = false;
            iou = Some(v.clamp(0.0, 1.0));
        }
    }

    let type_hit = locate(
        content,
        &TYPE_PAIR,
        &TYPE_OPEN,
        &TYPE_CLOSE,
        &TYPE_KEYED,
        &[("<mask_type>", "</mask_type>"), ("<mask>", "</mask>")],
    );
    let mask_type = match type_hit {
        Hit::Pair { value, canonical } => {
            let exact = MaskType::ALL
                .into_iter()
                .find(|t| t.as_str() == value.trim());
            match exact {
                Some(t) if canonical => Some(t),
                _ => {
                    clean = false;
                    match_mask_type(value, false)
                }
            }
        }
        Hit::Open(v) | Hit::Keyed(v) => {
            clean = false;
            match_mask_type(v, false)
        }
        Hit::Close(v) => {
            clean = false;
            match_mask_type(v, true)
        }
        Hit::Missing => {
            clean = false;
            None
        }
    };

    let action_hit = locate(
        content,
        &ACTION_PAIR,
        &ACTION_OPEN,
        &ACTION_CLOSE,
        &ACTION_KEYED,
        &[("<action>", "</action>")],
    );
    let action = match action_hit {
        Hit::Pair { value, canonical } => {
            let exact = Action::ALL.into_iter().find(|a| a.title() == value.trim());
            match exact {
                Some(a) if canonical => Some(a),
                _ => {
                    clean = false;
                    match_action(value, false)
                }
            }
        }
        Hit::Open(v) | Hit::Keyed(v) => {
            clean = false;
            match_action(v, false)
        }
        Hit::Close(v) => {
            clean = false;
            match_action(v, true)
        }
        Hit::Missing => {
            clean = false;
            None
        }
    };

    if mask_type.is_none() && action.is_none() {
        return AuditPrediction {
            raw_text: text.to_string(),
            iou: None,
            mask_type: None,
            action: None,
            reasoning: TAG.replace_all(content, " ").trim().to_string(),
            status: ParseStatus::Failed,
            target: extract_target(text),
        };
    }

    if iou.is_none() {
        clean = false;
        iou = mask_type.map(|t| match t {
            MaskType::Perfect => 1.0,
            MaskType::FullNeg => 0.0,
            MaskType::Merge => 0.8,
            MaskType::Cutout | MaskType::Dilate | MaskType::Erode => 0.825,
        });
    }

    AuditPrediction {
        raw_text: text.to_string(),
        iou,
        mask_type,
        action,
        reasoning: reasoning_of(content),
        status: if clean && mask_type.is_some() && action.is_some() {
            ParseStatus::Clean
        } else {
            ParseStatus::Recovered
        },
        target: extract_target(text),
    }
}

/// One line of a predictions file, either raw auditor text or structured fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_type: Option<MaskType>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub action: Option<Action>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<String>,
}

impl PredictionRecord {
    pub fn from_prediction(sample_id: &str, p: &AuditPrediction) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            raw_text: Some(p.raw_text.clone()),
            iou: p.iou,
            mask_type: p.mask_type,
            action: p.action,
            target: p.target.clone(),
        }
    }

    /// Structured fields win when all three are present; otherwise the raw
    /// text is parsed.
    pub fn to_prediction(&self) -> AuditPrediction {
        let raw = self.raw_text.clone().unwrap_or_default();
        let mut p = match (self.iou, self.mask_type, self.action) {
            (Some(iou), Some(mask_type), Some(action)) if iou.is_finite() => {
                let parsed = parse_audit(&raw);
                AuditPrediction {
                    raw_text: raw,
                    iou: Some(iou.clamp(0.0, 1.0)),
                    mask_type: Some(mask_type),
                    action: Some(action),
                    reasoning: parsed.reasoning,
                    status: if (0.0..=1.0).contains(&iou) {
                        ParseStatus::Clean
                    } else {
                        ParseStatus::Recovered
                    },
                    target: parsed.target,
                }
            }
            _ => parse_audit(&raw),
        };
        if self.target.is_some() {
            p.target = self.target.clone();
        }
        p
    }
}

static SAMPLE_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#""sample_id"\s*:\s*"((?:[^"\\]|\\.)*)""#).unwrap());

/// Reads one predictions-file line. Malformed lines that still name a sample
/// become a failed parse for that sample; lines naming no sample yield `None`.
pub fn parse_prediction_line(line: &str) -> Option<PredictionRecord> {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(_) => {
            let id = SAMPLE_ID.captures(line)?.get(1)?.as_str().to_string();
            return Some(PredictionRecord {
                sample_id: id,
                raw_text: Some(line.to_string()),
                iou: None,
                mask_type: None,
                action: None,
                target: None,
            });
        }
    };
    let obj = value.as_object()?;
    let sample_id = obj.get("sample_id")?.as_str()?.to_string();
    let raw_text = obj
        .get("raw_text")
        .and_then(Value::as_str)
        .map(String::from);
    let iou = obj.get("iou").and_then(|v| match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    });
    let mask_type = obj
        .get("mask_type")
        .and_then(Value::as_str)
        .and_then(|s| s.parse().ok().or_else(|| normalize_mask_type(s)));
    let action = obj.get("action").and_then(Value::as_str).and_then(|s| {
        serde_json::from_value::<Action>(Value::String(s.to_string()))
            .ok()
            .or_else(|| normalize_action(s))
    });
    let target = obj.get("target").and_then(Value::as_str).map(String::from);
    Some(PredictionRecord {
        sample_id,
        raw_text,
        iou,
        mask_type,
        action,
        target,
    })
}
