//! Gradient attribution of decoded label and rationale logits to input
//! tokens.
//!
//! The score of input token i for a set K of decoded positions is the sum
//! over embedding dimensions of d(sum_{k in K} logit_k) / dX_i, where
//! logit_k is the pre-softmax score of the token actually decoded at k.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{source_for, DecodedOutput, Mode, TaskFormat};
use crate::instance::RationalizedInstance;
use crate::metrics::AssociationRecord;
use crate::model::{input_gradients_many, ForwardTrace, ModelParams};
use crate::target::MeasurementTarget;

/// Which decoded positions an attribution vector explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanTag {
    Label,
    Rationale,
    /// Label and rationale positions together.
    Total,
}

impl SpanTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SpanTag::Label => "label",
            SpanTag::Rationale => "rationale",
            SpanTag::Total => "total",
        }
    }
}

impl fmt::Display for SpanTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpanTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(SpanTag::Label),
            "rationale" => Ok(SpanTag::Rationale),
            "total" => Ok(SpanTag::Total),
            other => Err(Error::Config(format!("unknown span `{other}`"))),
        }
    }
}

/// One score per input token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub values: Vec<f64>,
    pub span: SpanTag,
    pub normalized: bool,
}

impl AttributionVector {
    pub fn new(values: Vec<f64>, span: SpanTag) -> Self {
        AttributionVector {
            values,
            span,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// Per-token reduction: the plain sum of the gradient row, sign kept.
pub fn attribute_token(grad_row: &[f64]) -> f64 {
    grad_row.iter().sum()
}

fn reduce_rows(grad: &Array2<f64>) -> Vec<f64> {
    grad.rows()
        .into_iter()
        .map(|row| attribute_token(row.as_slice().expect("rows of a standard-layout array are contiguous")))
        .collect()
}

/// Decoded positions belonging to `span`.
pub fn span_positions(decoded: &DecodedOutput, span: SpanTag) -> Vec<usize> {
    match span {
        SpanTag::Label => decoded.label_positions.clone(),
        SpanTag::Rationale => decoded.rationale_positions.clone(),
        SpanTag::Total => {
            let mut all = decoded.label_positions.clone();
            all.extend(&decoded.rationale_positions);
            all.sort_unstable();
            all
        }
    }
}

/// Attribution of one span of a clean decode.
pub fn attribute_span(
    params: &ModelParams,
    trace: &ForwardTrace,
    decoded: &DecodedOutput,
    span: SpanTag,
) -> Result<AttributionVector> {
    let positions = span_positions(decoded, span);
    let grad = input_gradients_many(params, trace, &[&positions])?;
    Ok(AttributionVector::new(reduce_rows(&grad[0]), span))
}

/// Label, rationale and total attributions of one decode. The total is
/// computed from its own backward pass, not as the sum of the other two,
/// so [`SpanAttributions::check_identity`] is a real check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanAttributions {
    pub label: AttributionVector,
    pub rationale: AttributionVector,
    pub total: AttributionVector,
}

impl SpanAttributions {
    /// Fails with [`Error::EmptySpan`] when the rationale is empty.
    pub fn compute(params: &ModelParams, trace: &ForwardTrace, decoded: &DecodedOutput) -> Result<Self> {
        let spans = [SpanTag::Label, SpanTag::Rationale, SpanTag::Total].map(|s| span_positions(decoded, s));
        let grads = input_gradients_many(params, trace, &[&spans[0], &spans[1], &spans[2]])?;
        Ok(SpanAttributions {
            label: AttributionVector::new(reduce_rows(&grads[0]), SpanTag::Label),
            rationale: AttributionVector::new(reduce_rows(&grads[1]), SpanTag::Rationale),
            total: AttributionVector::new(reduce_rows(&grads[2]), SpanTag::Total),
        })
    }

    pub fn get(&self, span: SpanTag) -> &AttributionVector {
        match span {
            SpanTag::Label => &self.label,
            SpanTag::Rationale => &self.rationale,
            SpanTag::Total => &self.total,
        }
    }

    /// Largest |label + rationale - total| relative to the scale of the
    /// three vectors at that token.
    pub fn identity_deviation(&self) -> f64 {
        self.label
            .values
            .iter()
            .zip(&self.rationale.values)
            .zip(&self.total.values)
            .map(|((l, r), t)| {
                let scale = l.abs().max(r.abs()).max(t.abs());
                if scale == 0.0 {
                    0.0
                } else {
                    (l + r - t).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn check_identity(&self, rel_tol: f64) -> Result<()> {
        let n = self.total.len();
        for v in [&self.label, &self.rationale] {
            if v.len() != n {
                return Err(Error::Align { left: v.len(), right: n });
            }
        }
        let deviation = self.identity_deviation();
        if deviation > rel_tol || !deviation.is_finite() {
            return Err(Error::AttributionInconsistent { deviation });
        }
        Ok(())
    }
}

/// Divides by the L1 norm; signs and relative magnitudes are kept.
pub fn normalize_l1(v: &AttributionVector) -> Result<AttributionVector> {
    let norm = v.l1_norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(AttributionVector {
        values: v.values.iter().map(|x| x / norm).collect(),
        span: v.span,
        normalized: true,
    })
}

/// Outcome of parsing a decode before attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    MissingSeparator,
    EmptyLabel,
    EmptyRationale,
}

impl ParseStatus {
    /// Maps the errors that exclude an instance from attribution corpora;
    /// anything else is not a parse outcome.
    pub fn from_error(err: &Error) -> Option<Self> {
        match err.code() {
            "MissingSeparator" => Some(ParseStatus::MissingSeparator),
            "EmptyLabel" => Some(ParseStatus::EmptyLabel),
            "EmptySpan" => Some(ParseStatus::EmptyRationale),
            _ => None,
        }
    }
}

/// One line of an attribution dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub id: String,
    pub input_tokens: Vec<String>,
    pub decoded: Vec<String>,
    pub status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<f64>>,
}

pub fn write_dump<W: Write>(mut out: W, records: &[AttributionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dump<R: std::io::BufRead>(input: R) -> Result<Vec<AttributionRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Everything an attribution run over a corpus produces.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusAttribution {
    pub dump: Vec<AttributionRecord>,
    /// One per instance that parsed, in corpus order.
    pub records: Vec<AssociationRecord>,
    pub parse_failures: usize,
}

/// Attributes every instance's I->OR decode through `target` and scores
/// label against rationale attributions. Instances whose decode does not
/// parse, or has an empty rationale, are dumped with their status and left
/// out of `records`.
pub fn attribute_corpus(
    target: &mut dyn MeasurementTarget,
    instances: &[RationalizedInstance],
    fmt: TaskFormat,
    top_k: usize,
) -> Result<CorpusAttribution> {
    if !target.capabilities().supports_gradients {
        return Err(Error::Config(format!("target `{}` does not provide gradients", target.capabilities().name)));
    }
    let mut run = CorpusAttribution {
        dump: Vec::with_capacity(instances.len()),
        records: Vec::new(),
        parse_failures: 0,
    };
    for inst in instances {
        let input = source_for(inst, Mode::InputToLabelRationale, fmt, None)?;
        match target.attribute(&input, SpanTag::Total) {
            Ok(a) => {
                run.records.push(AssociationRecord::compute(&inst.id, &a.label, &a.rationale, top_k)?);
                run.dump.push(AttributionRecord {
                    id: inst.id.clone(),
                    input_tokens: input,
                    decoded: a.decoded,
                    status: ParseStatus::Ok,
                    label: Some(a.label),
                    rationale: Some(a.rationale),
                });
            }
            Err(e) => {
                let status = ParseStatus::from_error(&e).ok_or(e)?;
                run.parse_failures += 1;
                let decoded = target.decode(&input, None)?;
                run.dump.push(AttributionRecord {
                    id: inst.id.clone(),
                    input_tokens: input,
                    decoded,
                    status,
                    label: None,
                    rationale: None,
                });
            }
        }
    }
    Ok(run)
}
