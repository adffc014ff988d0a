//! Problem instances and their line-delimited file format.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One rationalized problem: input, answer choices, gold label and the
/// human-style reference rationale (R*).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RationalizedInstance {
    pub id: String,
    pub question: Vec<String>,
    pub choices: Vec<Vec<String>>,
    pub gold_label: Vec<String>,
    pub gold_rationale: Vec<String>,
    /// Premise sentence for NLI-formatted instances.
    pub premise: Option<Vec<String>>,
    /// Whether the rationale alone determines the label. Only known for
    /// generated data.
    pub sufficient: bool,
}

impl RationalizedInstance {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidInstance {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.question.is_empty() {
            return fail("empty question");
        }
        if self.gold_rationale.is_empty() {
            return fail("empty rationale");
        }
        if self.choices.is_empty() || self.choices.iter().any(Vec::is_empty) {
            return fail("empty choice");
        }
        let distinct: HashSet<_> = self.choices.iter().collect();
        if distinct.len() != self.choices.len() {
            return fail("choices are not pairwise distinct");
        }
        if !self.choices.contains(&self.gold_label) {
            return fail("gold label is not one of the choices");
        }
        if matches!(&self.premise, Some(p) if p.is_empty()) {
            return fail("empty premise");
        }
        Ok(())
    }

    /// Index of the gold label within `choices`.
    pub fn gold_index(&self) -> Option<usize> {
        self.choices.iter().position(|c| *c == self.gold_label)
    }
}

/// Splits a whitespace-separated string into tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// On-disk record: one JSON object per line with space-joined token strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    id: String,
    question: String,
    choices: Vec<String>,
    label: String,
    rationale: String,
    sufficient: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    premise: Option<String>,
}

impl From<&RationalizedInstance> for Record {
    fn from(inst: &RationalizedInstance) -> Self {
        Record {
            id: inst.id.clone(),
            question: detokenize(&inst.question),
            choices: inst.choices.iter().map(|c| detokenize(c)).collect(),
            label: detokenize(&inst.gold_label),
            rationale: detokenize(&inst.gold_rationale),
            sufficient: inst.sufficient,
            premise: inst.premise.as_ref().map(|p| detokenize(p)),
        }
    }
}

impl From<Record> for RationalizedInstance {
    fn from(r: Record) -> Self {
        RationalizedInstance {
            id: r.id,
            question: tokenize(&r.question),
            choices: r.choices.iter().map(|c| tokenize(c)).collect(),
            gold_label: tokenize(&r.label),
            gold_rationale: tokenize(&r.rationale),
            premise: r.premise.as_deref().map(tokenize),
            sufficient: r.sufficient,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, instances: &[RationalizedInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, &Record::from(inst))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates every record; blank lines are ignored.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RationalizedInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        let inst = RationalizedInstance::from(record);
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[RationalizedInstance]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(BufWriter::new(file), instances)
}

pub fn load_dataset(path: &Path) -> Result<Vec<RationalizedInstance>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(BufReader::new(file))
}
