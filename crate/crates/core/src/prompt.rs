//! Prompt construction for the fine-tuned training format, the fine-tuned
//! inference format, the retrieval-augmented format, and the base format.
//!
//! Templates are plain text with `{{slot}}` substitution slots. Substitution
//! is a single left-to-right pass, so slot syntax inside a note or claim is
//! never re-expanded. Segment tokens such as `<|assistant|>` are literal text.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::claims::{format_diagnoses, format_procedures, BillingClaim};

pub const SYSTEM_TEXT: &str = "You are an expert on medical coding and procedural billing in the United States. \
Your task is to assist in creating an appropriate billing claim given the provided operative report. \
Every claim should include ICD-10-CM codes, CPT codes from the American Medical Association, \
and the modifiers for each CPT code.";

pub const QUESTION_TEXT: &str = "What ICD-10-CM diagnosis codes, CPT codes, and CPT modifiers could be added \
to the billing claim for the following procedure?";

/// Segment tokens emitted verbatim by the built-in templates.
pub const SEGMENT_TOKENS: [&str; 10] = [
    "<s>",
    "<|system|>",
    "<|user|>",
    "<|assistant|>",
    "<|end|>",
    "<|placeholder1|>",
    "<|placeholder2|>",
    "<|placeholder3|>",
    "<|placeholder4|>",
    "<|placeholder5|>",
];

const TRAINING_TEMPLATE: &str = "<s><|system|>
{{system}}<|end|>

<|user|>
{{question}}<|placeholder1|>

Operative Report:
{{note}}<|placeholder1|><|end|>

<|assistant|>
<|placeholder2|>{{diagnoses}}<|placeholder3|>

<|placeholder4|>{{procedures}}<|placeholder5|>";

const FINETUNED_TEMPLATE: &str = "<s><|system|>
{{system}}<|end|>

<|user|>
{{question}}<|placeholder1|>

Operative Report:
{{note}}<|placeholder1|><|end|>

<|assistant|>
<|placeholder2|>";

const RAG_TEMPLATE: &str = "<s><|system|>
{{system}}<|end|>
<|user|>
{{question}}<|placeholder1|>

Operative Report:

{{note}}<|placeholder1|>

The following are examples from similar procedures:

{{examples}}{{answer_format}}<|end|>
<|assistant|>";

const BASE_TEMPLATE: &str = "<s><|system|>
{{system}}<|end|>
<|user|>
{{question}}<|placeholder1|>

{{note}}<|placeholder1|>

{{answer_format}}<|end|>
";

const RAG_ANSWER_FORMAT: &str = "Provide the answer in the following format:

ICD-10-CM Diagnoses:
XXX.XXX, XXX.XXX, ...

CPT Codes with Modifiers:
CPT Code 1: ##### | Modifiers: XX, XX, ...
CPT Code 2: ##### | Modifiers: XX, XX, ...
";

const BASE_ANSWER_FORMAT: &str = "Provide the answer without descriptions in the following format:

ICD-10-CM Diagnoses:
XXX.XXX, XXX.XXX, ...

CPT Codes with Modifiers:
CPT Code 1: ##### | Modifiers: XX, XX, ... | Description: ...
CPT Code 2: ##### | Modifiers: XX, XX, ... | Description: ...
";

const SLOTS: [&str; 8] = [
    "system",
    "question",
    "note",
    "diagnoses",
    "procedures",
    "claim",
    "examples",
    "answer_format",
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("retrieval-augmented prompt needs {expected} example claims, got {got}")]
    MissingRagContext { expected: usize, got: usize },
    #[error("template {template}: unknown slot `{{{{{slot}}}}}`")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template}: required slot `{{{{{slot}}}}}` is missing")]
    MissingSlot { template: String, slot: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which inference prompt to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Finetuned,
    Rag,
    Base,
}

impl std::fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptVariant::Finetuned => "finetuned",
            PromptVariant::Rag => "rag",
            PromptVariant::Base => "base",
        })
    }
}

/// Retrieved example claims, nearest first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RagContext {
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    pub system_text: String,
    pub question_text: String,
    pub training: String,
    pub finetuned: String,
    pub rag: String,
    pub base: String,
    pub rag_answer_format: String,
    pub base_answer_format: String,
    /// Number of retrieved examples a RAG prompt carries.
    pub rag_k: usize,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            system_text: SYSTEM_TEXT.into(),
            question_text: QUESTION_TEXT.into(),
            training: TRAINING_TEMPLATE.into(),
            finetuned: FINETUNED_TEMPLATE.into(),
            rag: RAG_TEMPLATE.into(),
            base: BASE_TEMPLATE.into(),
            rag_answer_format: RAG_ANSWER_FORMAT.into(),
            base_answer_format: BASE_ANSWER_FORMAT.into(),
            rag_k: 2,
        }
    }
}

impl PromptTemplateSet {
    /// Loads overrides from a directory. Any of `system.txt`, `question.txt`,
    /// `training.txt`, `finetuned.txt`, `rag.txt`, `base.txt`,
    /// `rag_answer_format.txt`, `base_answer_format.txt` replaces the
    /// built-in text; missing files keep the default.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptTemplateSet::default();
        let fields: [(&str, &mut String); 8] = [
            ("system.txt", &mut set.system_text),
            ("question.txt", &mut set.question_text),
            ("training.txt", &mut set.training),
            ("finetuned.txt", &mut set.finetuned),
            ("rag.txt", &mut set.rag),
            ("base.txt", &mut set.base),
            ("rag_answer_format.txt", &mut set.rag_answer_format),
            ("base_answer_format.txt", &mut set.base_answer_format),
        ];
        for (name, field) in fields {
            let path = dir.join(name);
            if path.exists() {
                *field = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn with_rag_k(mut self, k: usize) -> Self {
        self.rag_k = k;
        self
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, template) in [
            ("training", &self.training),
            ("finetuned", &self.finetuned),
            ("rag", &self.rag),
            ("base", &self.base),
        ] {
            let slots = slots_in(template);
            if let Some(bad) = slots.iter().find(|s| !SLOTS.contains(&s.as_str())) {
                return Err(PromptError::UnknownSlot {
                    template: name.into(),
                    slot: bad.clone(),
                });
            }
            if !slots.iter().any(|s| s == "note") {
                return Err(PromptError::MissingSlot {
                    template: name.into(),
                    slot: "note".into(),
                });
            }
        }
        Ok(())
    }

    /// Full training example: prompt plus the claim as the assistant answer.
    pub fn build_training_prompt(&self, note: &str, claim: &BillingClaim) -> String {
        let diagnoses = format_diagnoses(claim);
        let procedures = format_procedures(claim);
        let claim_text = format!("{diagnoses}\n\n{procedures}");
        render(
            &self.training,
            &[
                ("system", &self.system_text),
                ("question", &self.question_text),
                ("note", note),
                ("diagnoses", &diagnoses),
                ("procedures", &procedures),
                ("claim", &claim_text),
            ],
        )
    }

    pub fn build_inference_prompt(
        &self,
        note: &str,
        variant: PromptVariant,
        rag: Option<&RagContext>,
    ) -> Result<String, PromptError> {
        let common = [
            ("system", self.system_text.as_str()),
            ("question", self.question_text.as_str()),
            ("note", note),
        ];
        match variant {
            PromptVariant::Finetuned => Ok(render(&self.finetuned, &common)),
            PromptVariant::Base => {
                let mut slots = common.to_vec();
                slots.push(("answer_format", &self.base_answer_format));
                Ok(render(&self.base, &slots))
            }
            PromptVariant::Rag => {
                let got = rag.map_or(0, |r| r.examples.len());
                let ctx = match rag {
                    Some(ctx) if got == self.rag_k => ctx,
                    _ => {
                        return Err(PromptError::MissingRagContext {
                            expected: self.rag_k,
                            got,
                        })
                    }
                };
                let examples: String = ctx
                    .examples
                    .iter()
                    .enumerate()
                    .map(|(i, ex)| format!("Relevant Example Claim {}:\n\n{}\n\n", i + 1, ex))
                    .collect();
                let mut slots = common.to_vec();
                slots.push(("examples", &examples));
                slots.push(("answer_format", &self.rag_answer_format));
                Ok(render(&self.rag, &slots))
            }
        }
    }
}

fn slots_in(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

/// Single-pass `{{slot}}` substitution. Unknown or unfilled slots render as
/// the empty string.
fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        let name = &after[..end];
        if let Some((_, v)) = values.iter().find(|(k, _)| *k == name) {
            out.push_str(v);
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}
