//! Text-to-text serialization of instances for each model configuration,
//! and parsing of the `[label] explanation: [rationale]` output grammar.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::RationalizedInstance;
use crate::vocab::{EOS, SEP};

/// Input template family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFormat {
    Qa,
    Nli,
}

impl FromStr for TaskFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(TaskFormat::Qa),
            "nli" => Ok(TaskFormat::Nli),
            other => Err(Error::Config(format!("unknown task format `{other}`"))),
        }
    }
}

impl fmt::Display for TaskFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFormat::Qa => "qa",
            TaskFormat::Nli => "nli",
        })
    }
}

/// The four model configurations: which of input (I), rationale (R) and
/// output label (O) a model reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Joint self-rationalizing model: label, separator, rationale.
    #[serde(rename = "I->OR")]
    InputToLabelRationale,
    /// Rationale generator of the pipeline; never sees labels.
    #[serde(rename = "I->R")]
    InputToRationale,
    /// Label predictor of the pipeline; sees choices and rationale only.
    #[serde(rename = "R->O")]
    RationaleToLabel,
    /// Label predictor reading both input and rationale.
    #[serde(rename = "IR->O")]
    InputRationaleToLabel,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::InputToRationale,
        Mode::RationaleToLabel,
        Mode::InputToLabelRationale,
        Mode::InputRationaleToLabel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::InputToLabelRationale => "I->OR",
            Mode::InputToRationale => "I->R",
            Mode::RationaleToLabel => "R->O",
            Mode::InputRationaleToLabel => "IR->O",
        }
    }

    /// Whether the model emits a label as (the start of) its output.
    pub fn predicts_label(self) -> bool {
        !matches!(self, Mode::InputToRationale)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .replace('→', "->")
            .to_ascii_uppercase();
        match norm.as_str() {
            "I->OR" | "I2OR" => Ok(Mode::InputToLabelRationale),
            "I->R" | "I2R" => Ok(Mode::InputToRationale),
            "R->O" | "R2O" => Ok(Mode::RationaleToLabel),
            "IR->O" | "IR2O" => Ok(Mode::InputRationaleToLabel),
            _ => Err(Error::Config(format!("unknown model configuration `{s}`"))),
        }
    }
}

/// Marker tokens the input templates add on top of instance text.
pub const TEMPLATE_TOKENS: [&str; 7] = ["explain", "qa", "nli", "question:", "choice:", "hypothesis:", "premise:"];

/// Vocabulary covering the templates and every token of `instances`.
pub fn task_vocab(instances: &[RationalizedInstance]) -> crate::vocab::Vocab {
    let words = TEMPLATE_TOKENS.iter().map(|s| s.to_string()).chain(instances.iter().flat_map(|inst| {
        inst.question
            .iter()
            .chain(inst.choices.iter().flatten())
            .chain(&inst.gold_label)
            .chain(&inst.gold_rationale)
            .chain(inst.premise.iter().flatten())
            .cloned()
            .collect::<Vec<_>>()
    }));
    crate::vocab::Vocab::new(words)
}

fn push_all(out: &mut Vec<String>, words: &[&str]) {
    out.extend(words.iter().map(|w| w.to_string()));
}

fn push_choices(out: &mut Vec<String>, inst: &RationalizedInstance) {
    for choice in &inst.choices {
        out.push("choice:".into());
        out.extend(choice.iter().cloned());
    }
}

fn push_task_body(out: &mut Vec<String>, inst: &RationalizedInstance, fmt: TaskFormat) -> Result<()> {
    match fmt {
        TaskFormat::Qa => {
            out.push("question:".into());
            out.extend(inst.question.iter().cloned());
            push_choices(out, inst);
        }
        TaskFormat::Nli => {
            let premise = inst.premise.as_ref().ok_or_else(|| {
                Error::Config(format!("instance {} has no premise for nli format", inst.id))
            })?;
            out.push("hypothesis:".into());
            out.extend(inst.question.iter().cloned());
            out.push("premise:".into());
            out.extend(premise.iter().cloned());
        }
    }
    Ok(())
}

/// Serializes the task input read by I->OR and I->R models:
/// `explain qa question: Q choice: C0 choice: C1 ...`.
pub fn format_input(inst: &RationalizedInstance, fmt: TaskFormat) -> Result<Vec<String>> {
    let mut out = Vec::new();
    push_all(&mut out, &["explain", if fmt == TaskFormat::Qa { "qa" } else { "nli" }]);
    push_task_body(&mut out, inst, fmt)?;
    Ok(out)
}

/// Input of the R->O label predictor. The question is never included.
pub fn format_rationale_input(
    inst: &RationalizedInstance,
    rationale: &[String],
    fmt: TaskFormat,
) -> Vec<String> {
    let mut out = Vec::new();
    match fmt {
        TaskFormat::Qa => {
            out.push("qa".into());
            push_choices(&mut out, inst);
        }
        TaskFormat::Nli => out.push("nli".into()),
    }
    out.push(SEP.into());
    out.extend(rationale.iter().cloned());
    out
}

/// Input of the IR->O label predictor: task body followed by the rationale.
pub fn format_input_rationale(
    inst: &RationalizedInstance,
    rationale: &[String],
    fmt: TaskFormat,
) -> Result<Vec<String>> {
    let mut out = vec![fmt.to_string()];
    push_task_body(&mut out, inst, fmt)?;
    out.push(SEP.into());
    out.extend(rationale.iter().cloned());
    Ok(out)
}

/// Source sequence a model in `mode` reads for `inst`. For the
/// rationale-reading modes, `rationale` overrides the gold rationale.
pub fn source_for(
    inst: &RationalizedInstance,
    mode: Mode,
    fmt: TaskFormat,
    rationale: Option<&[String]>,
) -> Result<Vec<String>> {
    let r = rationale.unwrap_or(&inst.gold_rationale);
    match mode {
        Mode::InputToLabelRationale | Mode::InputToRationale => format_input(inst, fmt),
        Mode::RationaleToLabel => Ok(format_rationale_input(inst, r, fmt)),
        Mode::InputRationaleToLabel => format_input_rationale(inst, r, fmt),
    }
}

/// Gold target sequence (terminated by EOS) for training a model in `mode`.
pub fn target_for(inst: &RationalizedInstance, mode: Mode) -> Vec<String> {
    let mut out = Vec::new();
    match mode {
        Mode::InputToLabelRationale => {
            out.extend(inst.gold_label.iter().cloned());
            out.push(SEP.into());
            out.extend(inst.gold_rationale.iter().cloned());
        }
        Mode::InputToRationale => out.extend(inst.gold_rationale.iter().cloned()),
        Mode::RationaleToLabel | Mode::InputRationaleToLabel => {
            out.extend(inst.gold_label.iter().cloned())
        }
    }
    out.push(EOS.into());
    out
}

/// Parsed `[label] explanation: [rationale]` emission with the index sets
/// of label and rationale tokens inside `raw`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedOutput {
    /// Decoded tokens up to and including the first EOS.
    pub raw: Vec<String>,
    pub label_tokens: Vec<String>,
    pub rationale_tokens: Vec<String>,
    pub label_positions: Vec<usize>,
    pub rationale_positions: Vec<usize>,
    pub sep_position: usize,
    pub eos_position: Option<usize>,
}

impl DecodedOutput {
    pub fn has_rationale(&self) -> bool {
        !self.rationale_positions.is_empty()
    }
}

/// Splits a decoded sequence at its first separator. Anything after the
/// first EOS is discarded.
pub fn parse_output<S: AsRef<str>>(raw: &[S]) -> Result<DecodedOutput> {
    let eos_position = raw.iter().position(|t| t.as_ref() == EOS);
    let end = eos_position.unwrap_or(raw.len());
    let raw: Vec<String> = raw[..eos_position.map_or(end, |p| p + 1)]
        .iter()
        .map(|t| t.as_ref().to_string())
        .collect();
    let sep_position = raw[..end]
        .iter()
        .position(|t| t == SEP)
        .ok_or(Error::MissingSeparator)?;
    if sep_position == 0 {
        return Err(Error::EmptyLabel);
    }
    let label_positions: Vec<usize> = (0..sep_position).collect();
    let rationale_positions: Vec<usize> = (sep_position + 1..end).collect();
    Ok(DecodedOutput {
        label_tokens: raw[..sep_position].to_vec(),
        rationale_tokens: raw[sep_position + 1..end].to_vec(),
        label_positions,
        rationale_positions,
        sep_position,
        eos_position,
        raw,
    })
}

/// Label read off a label-only emission (R->O, IR->O): tokens before EOS.
pub fn parse_label<S: AsRef<str>>(raw: &[S]) -> Vec<String> {
    raw.iter()
        .map(AsRef::as_ref)
        .take_while(|t| *t != EOS)
        .map(str::to_string)
        .collect()
}

/// Rationale read off an I->R emission: tokens before EOS.
pub fn parse_rationale<S: AsRef<str>>(raw: &[S]) -> Vec<String> {
    parse_label(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{detokenize, tokenize};

    fn hamburger() -> RationalizedInstance {
        RationalizedInstance {
            id: "h".into(),
            question: tokenize("while eating a hamburger with friends , what are people trying to do ?"),
            choices: vec![tokenize("have_fun"), tokenize("tasty"), tokenize("indigestion")],
            gold_label: tokenize("have_fun"),
            gold_rationale: tokenize("usually a hamburger with friends indicates a good time"),
            premise: None,
            sufficient: false,
        }
    }

    #[test]
    fn qa_input_matches_template() {
        let s = detokenize(&format_input(&hamburger(), TaskFormat::Qa).unwrap());
        assert_eq!(
            s,
            "explain qa question: while eating a hamburger with friends , what are people \
             trying to do ? choice: have_fun choice: tasty choice: indigestion"
        );
    }

    #[test]
    fn formatting_is_deterministic() {
        let a = format_input(&hamburger(), TaskFormat::Qa).unwrap();
        let b = format_input(&hamburger(), TaskFormat::Qa).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuted_choices_only_reorder_choices() {
        let inst = hamburger();
        let mut perm = inst.clone();
        perm.choices.rotate_left(1);
        let a = detokenize(&format_input(&inst, TaskFormat::Qa).unwrap());
        let b = detokenize(&format_input(&perm, TaskFormat::Qa).unwrap());
        assert_ne!(a, b);
        let (qa, ca) = a.split_once(" choice: ").unwrap();
        let (qb, cb) = b.split_once(" choice: ").unwrap();
        assert_eq!(qa, qb);
        let mut sa: Vec<&str> = ca.split(" choice: ").collect();
        let mut sb: Vec<&str> = cb.split(" choice: ").collect();
        assert_eq!(sb, vec!["tasty", "indigestion", "have_fun"]);
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
    }

    #[test]
    fn nli_needs_premise() {
        let mut inst = hamburger();
        assert!(matches!(format_input(&inst, TaskFormat::Nli), Err(Error::Config(_))));
        inst.question = tokenize("a woman is a mother");
        inst.premise = Some(tokenize("a woman walks with her child"));
        let s = detokenize(&format_input(&inst, TaskFormat::Nli).unwrap());
        assert_eq!(
            s,
            "explain nli hypothesis: a woman is a mother premise: a woman walks with her child"
        );
        assert_eq!(
            detokenize(&format_rationale_input(&inst, &tokenize("x y"), TaskFormat::Nli)),
            "nli explanation: x y"
        );
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!("cos_e".parse::<TaskFormat>(), Err(Error::Config(_))));
        assert_eq!("nli".parse::<TaskFormat>().unwrap(), TaskFormat::Nli);
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("i→or".parse::<Mode>().unwrap(), Mode::InputToLabelRationale);
        assert!("O->I".parse::<Mode>().is_err());
    }

    #[test]
    fn rationale_input_hides_question() {
        let inst = hamburger();
        let src = format_rationale_input(&inst, &inst.gold_rationale, TaskFormat::Qa);
        assert_eq!(
            detokenize(&src),
            "qa choice: have_fun choice: tasty choice: indigestion explanation: usually a \
             hamburger with friends indicates a good time"
        );
        for q in ["while", "eating", "people", "trying"] {
            assert!(!src.iter().any(|t| t == q));
        }
    }

    #[test]
    fn targets_per_mode() {
        let inst = hamburger();
        let joint = detokenize(&target_for(&inst, Mode::InputToLabelRationale));
        assert_eq!(
            joint,
            "have_fun explanation: usually a hamburger with friends indicates a good time </s>"
        );
        assert_eq!(detokenize(&target_for(&inst, Mode::RationaleToLabel)), "have_fun </s>");
        assert!(detokenize(&target_for(&inst, Mode::InputToRationale)).starts_with("usually"));
    }

    #[test]
    fn parse_splits_at_separator() {
        let out = parse_output(&tokenize("entailment explanation: child does not imply daughter")).unwrap();
        assert_eq!(out.label_tokens, vec!["entailment"]);
        assert_eq!(detokenize(&out.rationale_tokens), "child does not imply daughter");
        assert_eq!(out.label_positions, vec![0]);
        assert_eq!(out.rationale_positions, vec![2, 3, 4, 5, 6]);
        assert_eq!(out.eos_position, None);
    }

    #[test]
    fn parse_empty_rationale_is_flagged_not_error() {
        let out = parse_output(&tokenize("have_fun explanation: </s>")).unwrap();
        assert_eq!(out.label_tokens, vec!["have_fun"]);
        assert!(!out.has_rationale());
        assert_eq!(out.eos_position, Some(2));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_output(&tokenize("no separator here")),
            Err(Error::MissingSeparator)
        ));
        assert!(matches!(parse_output(&tokenize("explanation: x")), Err(Error::EmptyLabel)));
        // a separator after EOS does not count
        assert!(matches!(
            parse_output(&tokenize("a </s> explanation: b")),
            Err(Error::MissingSeparator)
        ));
        assert!(matches!(parse_output::<&str>(&[]), Err(Error::MissingSeparator)));
    }

    #[test]
    fn positions_partition_decoded_indices() {
        let out = parse_output(&tokenize("a b explanation: c explanation: d </s> junk")).unwrap();
        let mut all: Vec<usize> = out
            .label_positions
            .iter()
            .chain(&out.rationale_positions)
            .copied()
            .chain([out.sep_position])
            .chain(out.eos_position)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..out.raw.len()).collect::<Vec<_>>());
        assert_eq!(out.raw.len(), 7);
        // the second separator belongs to the rationale
        assert_eq!(detokenize(&out.rationale_tokens), "c explanation: d");
    }
}
