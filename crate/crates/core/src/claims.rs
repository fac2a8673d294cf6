//! Encounter and billing-claim domain types, code canonicalization, and the
//! claim text codec shared by prompt construction and output extraction.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};

/// Section header that opens the diagnoses block of a claim.
pub const DIAGNOSES_HEADER: &str = "ICD-10-CM Diagnoses:";
/// Section header that opens the procedures block of a claim.
pub const PROCEDURES_HEADER: &str = "CPT Codes with Modifiers:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Icd10,
    Cpt,
    Modifier,
}

impl fmt::Display for CodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeKind::Icd10 => "ICD-10-CM",
            CodeKind::Cpt => "CPT",
            CodeKind::Modifier => "modifier",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodeError {
    #[error("empty {0} code")]
    Empty(CodeKind),
    #[error("`{raw}` is not a structurally valid {kind} code")]
    Structural { kind: CodeKind, raw: String },
}

macro_rules! code_newtype {
    ($(#[$meta:meta])* $name:ident, $canon:path) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl TryFrom<String> for $name {
            type Error = CodeError;
            fn try_from(raw: String) -> Result<Self, CodeError> {
                $canon(&raw)
            }
        }

        impl std::str::FromStr for $name {
            type Err = CodeError;
            fn from_str(raw: &str) -> Result<Self, CodeError> {
                $canon(raw)
            }
        }

        impl From<$name> for String {
            fn from(code: $name) -> String {
                code.0
            }
        }
    };
}

code_newtype!(
    /// Canonical ICD-10-CM diagnosis code: uppercase, dot after the third
    /// character when a subcategory is present (`K21.9`).
    Icd10Code,
    canonicalize_icd10
);
code_newtype!(
    /// Five-character CPT code: five digits, or four digits and a letter.
    CptCode,
    canonicalize_cpt
);
code_newtype!(
    /// Two-character CPT modifier.
    ModifierCode,
    canonicalize_modifier
);

/// Canonicalizes an ICD-10-CM code.
///
/// Accepts either dotted or undotted input in any case. The structure is a
/// letter, a digit, one alphanumeric, then optionally up to four more
/// alphanumerics. A dot, if given, must sit after the third character.
pub fn canonicalize_icd10(raw: &str) -> Result<Icd10Code, CodeError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CodeError::Empty(CodeKind::Icd10));
    }
    let structural = || CodeError::Structural {
        kind: CodeKind::Icd10,
        raw: raw.to_string(),
    };
    let upper = trimmed.to_ascii_uppercase();
    let compact = match upper.find('.') {
        Some(3) if upper.len() > 4 && upper[4..].bytes().all(|b| b != b'.') => {
            format!("{}{}", &upper[..3], &upper[4..])
        }
        Some(_) => return Err(structural()),
        None => upper,
    };
    let bytes = compact.as_bytes();
    if !(3..=7).contains(&bytes.len())
        || !bytes[0].is_ascii_uppercase()
        || !bytes[1].is_ascii_digit()
        || !bytes[2..].iter().all(|b| b.is_ascii_digit() || b.is_ascii_uppercase())
    {
        return Err(structural());
    }
    let value = if compact.len() > 3 {
        format!("{}.{}", &compact[..3], &compact[3..])
    } else {
        compact
    };
    Ok(Icd10Code(value))
}

pub fn canonicalize_cpt(raw: &str) -> Result<CptCode, CodeError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CodeError::Empty(CodeKind::Cpt));
    }
    let upper = trimmed.to_ascii_uppercase();
    let bytes = upper.as_bytes();
    let ok = bytes.len() == 5
        && bytes[..4].iter().all(u8::is_ascii_digit)
        && (bytes[4].is_ascii_digit() || bytes[4].is_ascii_uppercase());
    if !ok {
        return Err(CodeError::Structural {
            kind: CodeKind::Cpt,
            raw: raw.to_string(),
        });
    }
    Ok(CptCode(upper))
}

pub fn canonicalize_modifier(raw: &str) -> Result<ModifierCode, CodeError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(CodeError::Empty(CodeKind::Modifier));
    }
    let upper = trimmed.to_ascii_uppercase();
    if upper.len() != 2 || !upper.bytes().all(|b| b.is_ascii_alphanumeric()) {
        return Err(CodeError::Structural {
            kind: CodeKind::Modifier,
            raw: raw.to_string(),
        });
    }
    Ok(ModifierCode(upper))
}

/// One billed procedure line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CptLine {
    pub cpt: CptCode,
    #[serde(default, deserialize_with = "dedup_modifiers")]
    modifiers: Vec<ModifierCode>,
    #[serde(default)]
    pub description: String,
}

fn dedup_modifiers<'de, D>(de: D) -> Result<Vec<ModifierCode>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = Vec::<ModifierCode>::deserialize(de)?;
    Ok(dedup_in_order(raw))
}

fn dedup_in_order(modifiers: Vec<ModifierCode>) -> Vec<ModifierCode> {
    let mut seen = BTreeSet::new();
    modifiers
        .into_iter()
        .filter(|m| seen.insert(m.clone()))
        .collect()
}

impl CptLine {
    /// Builds a line; repeated modifiers keep their first position only.
    pub fn new(cpt: CptCode, modifiers: Vec<ModifierCode>, description: impl Into<String>) -> Self {
        CptLine {
            cpt,
            modifiers: dedup_in_order(modifiers),
            description: description.into(),
        }
    }

    pub fn modifiers(&self) -> &[ModifierCode] {
        &self.modifiers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderBillables {
    #[serde(rename = "name")]
    pub provider_name: String,
    #[serde(default)]
    pub lines: Vec<CptLine>,
}

/// A (CPT, modifier) pair, the scoring unit for modifiers.
pub type ModifierPair = (CptCode, ModifierCode);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingClaim {
    #[serde(default)]
    pub icd10: BTreeSet<Icd10Code>,
    #[serde(default)]
    pub providers: Vec<ProviderBillables>,
}

impl BillingClaim {
    pub fn cpt_set(&self) -> BTreeSet<CptCode> {
        self.lines().map(|l| l.cpt.clone()).collect()
    }

    pub fn modifier_pairs(&self) -> BTreeSet<ModifierPair> {
        self.lines()
            .flat_map(|l| l.modifiers.iter().map(move |m| (l.cpt.clone(), m.clone())))
            .collect()
    }

    pub fn code_sets(&self) -> CodeSets {
        CodeSets {
            icd10: self.icd10.clone(),
            cpt: self.cpt_set(),
            modifier_pairs: self.modifier_pairs(),
        }
    }

    fn lines(&self) -> impl Iterator<Item = &CptLine> {
        self.providers.iter().flat_map(|p| p.lines.iter())
    }
}

/// Flat code sets of one claim: the unit that scoring and validity checks
/// operate on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSets {
    pub icd10: BTreeSet<Icd10Code>,
    pub cpt: BTreeSet<CptCode>,
    pub modifier_pairs: BTreeSet<ModifierPair>,
}

impl CodeSets {
    pub fn is_subset(&self, other: &CodeSets) -> bool {
        self.icd10.is_subset(&other.icd10)
            && self.cpt.is_subset(&other.cpt)
            && self.modifier_pairs.is_subset(&other.modifier_pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

/// One surgical encounter with its coder-assigned claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub id: String,
    pub note: String,
    pub date: NaiveDate,
    pub service: String,
    pub claim: BillingClaim,
    #[serde(default, rename = "age", skip_serializing_if = "Option::is_none")]
    pub patient_age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
}

fn single_line(text: &str) -> String {
    text.split(['\n', '\r']).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Renders the diagnoses section: header, blank line, comma-separated codes.
pub fn format_diagnoses(claim: &BillingClaim) -> String {
    let codes: Vec<&str> = claim.icd10.iter().map(Icd10Code::as_str).collect();
    format!("{DIAGNOSES_HEADER}\n\n{}", codes.join(", "))
}

/// Renders the procedures section with one block per provider.
pub fn format_procedures(claim: &BillingClaim) -> String {
    let blocks: Vec<String> = claim.providers.iter().map(format_provider).collect();
    format!("{PROCEDURES_HEADER}\n\n{}", blocks.join("\n\n"))
}

fn format_provider(provider: &ProviderBillables) -> String {
    let mut out = format!(
        "Provider Name: {}\nProvider Billables:",
        single_line(&provider.provider_name)
    );
    for (i, line) in provider.lines.iter().enumerate() {
        let modifiers: Vec<&str> = line.modifiers.iter().map(ModifierCode::as_str).collect();
        out.push_str(&format!(
            "\nCPT {}: {} | Modifiers: {} | Description: {}",
            i + 1,
            line.cpt,
            modifiers.join(", "),
            single_line(&line.description)
        ));
    }
    out
}

/// Renders a claim in the assistant-answer layout used for training targets
/// and as the reference text for structure metrics.
pub fn format_claim(claim: &BillingClaim) -> String {
    format!("{}\n\n{}", format_diagnoses(claim), format_procedures(claim))
}

/// Codes and provider blocks recovered from free-form model output.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedClaim {
    pub codes: CodeSets,
    /// Provider blocks in output order. CPT lines that appear before any
    /// `Provider Name:` line are collected under an empty provider name.
    pub providers: Vec<ProviderBillables>,
}

static SPECIAL_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<\|[A-Za-z0-9_]{1,32}\|>|</?s>").unwrap());
static DIAGNOSES_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)ICD[- ]?10(?:[- ]?CM)?[ \t]+(?:Diagnos[ie]s|Diagnosis Codes|Codes)[ \t]*:").unwrap()
});
static PROCEDURES_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)CPT[ \t]+Codes[ \t]+with[ \t]+Modifiers[ \t]*:").unwrap());
static CPT_LINE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[ \t]*(?:[-*][ \t]*)?CPT(?:[ \t]+Code)?[ \t]*#?[ \t]*\d*[ \t]*:[ \t]*([A-Za-z0-9]{5})(?:[^A-Za-z0-9]|$)(.*)$",
    )
    .unwrap()
});
static MODIFIERS_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)Modifiers?[ \t]*:(.*?)(?:\||Description|$)").unwrap());
static DESCRIPTION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\|[ \t]*Description[ \t]*:(.*)$").unwrap());
static PROVIDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[ \t]*Provider[ \t]+Name[ \t]*:(.*)$").unwrap());
static CODE_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z0-9.]+").unwrap());

/// Extracts claim codes from arbitrary text. Never fails: anything that does
/// not parse is simply absent from the result.
///
/// A diagnosis token that runs into the end of the input is treated as
/// possibly truncated and dropped, so that parsing a prefix of a claim never
/// yields a code the full claim does not contain.
pub fn parse_claim(text: &str) -> ParsedClaim {
    let text = SPECIAL_TOKEN.replace_all(text, "");
    let text = text.as_ref();
    let mut parsed = ParsedClaim::default();

    // Line pass: provider blocks and CPT lines.
    let mut block_starts = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if let Some(caps) = PROVIDER_RE.captures(line) {
            block_starts.push(start);
            parsed.providers.push(ProviderBillables {
                provider_name: caps[1].trim().to_string(),
                lines: Vec::new(),
            });
            continue;
        }
        let Some(caps) = CPT_LINE_RE.captures(line) else {
            continue;
        };
        block_starts.push(start);
        let Ok(cpt) = canonicalize_cpt(&caps[1]) else {
            continue;
        };
        let rest = caps.get(2).map_or("", |m| m.as_str());
        let modifiers = MODIFIERS_RE
            .captures(rest)
            .map(|m| {
                m[1].split(|c: char| c == ',' || c == ';' || c.is_whitespace())
                    .filter_map(|tok| canonicalize_modifier(tok).ok())
                    .collect()
            })
            .unwrap_or_default();
        let description = DESCRIPTION_RE
            .captures(rest)
            .map(|m| m[1].trim().to_string())
            .unwrap_or_default();
        let line = CptLine::new(cpt, modifiers, description);
        if parsed.providers.is_empty() {
            parsed.providers.push(ProviderBillables {
                provider_name: String::new(),
                lines: Vec::new(),
            });
        }
        parsed.providers.last_mut().unwrap().lines.push(line);
    }

    if let Some(header) = DIAGNOSES_RE.find(text) {
        let body_start = header.end();
        // The diagnoses body ends at the procedures header or the first
        // provider/CPT line after it, whichever comes first.
        let mut body_end = block_starts
            .iter()
            .copied()
            .find(|&s| s >= body_start)
            .unwrap_or(text.len());
        if let Some(proc) = PROCEDURES_RE.find_at(text, body_start) {
            body_end = body_end.min(proc.start());
        }
        let body = &text[body_start..body_end];
        for tok in CODE_TOKEN.find_iter(body) {
            if body_start + tok.end() == text.len() {
                continue;
            }
            let candidate = tok.as_str().trim_end_matches('.');
            if let Ok(code) = canonicalize_icd10(candidate) {
                parsed.codes.icd10.insert(code);
            }
        }
    }

    for provider in &parsed.providers {
        for line in &provider.lines {
            parsed.codes.cpt.insert(line.cpt.clone());
            for m in &line.modifiers {
                parsed.codes.modifier_pairs.insert((line.cpt.clone(), m.clone()));
            }
        }
    }
    parsed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn icd(s: &str) -> Icd10Code {
        canonicalize_icd10(s).unwrap()
    }
    fn cpt(s: &str) -> CptCode {
        canonicalize_cpt(s).unwrap()
    }
    fn md(s: &str) -> ModifierCode {
        canonicalize_modifier(s).unwrap()
    }

    #[test]
    fn icd10_canonical_forms() {
        assert_eq!(icd("k219").as_str(), "K21.9");
        assert_eq!(icd("K21.9").as_str(), "K21.9");
        assert_eq!(icd("k21.9"), icd("K219"));
        assert_eq!(icd("S72.001A").as_str(), "S72.001A");
        assert_eq!(icd("E11").as_str(), "E11");
        assert!(matches!(
            canonicalize_icd10("12345"),
            Err(CodeError::Structural { .. })
        ));
        assert!(canonicalize_icd10("K2.19").is_err());
        assert!(canonicalize_icd10("K21.").is_err());
        assert!(canonicalize_icd10("K21.12345").is_err());
        assert!(canonicalize_icd10("XXX.XXX").is_err());
        assert!(matches!(canonicalize_icd10("  "), Err(CodeError::Empty(_))));
    }

    #[test]
    fn cpt_canonical_forms() {
        assert_eq!(cpt(" 43239 ").as_str(), "43239");
        assert_eq!(cpt("0075t").as_str(), "0075T");
        assert!(canonicalize_cpt("432").is_err());
        assert!(canonicalize_cpt("A4323").is_err());
        assert!(canonicalize_cpt("43239X").is_err());
    }

    #[test]
    fn modifier_forms() {
        assert_eq!(md("xs").as_str(), "XS");
        assert!(canonicalize_modifier("5").is_err());
        assert!(canonicalize_modifier("59-").is_err());
    }

    #[test]
    fn cpt_line_dedups_modifiers() {
        let line = CptLine::new(cpt("43239"), vec![md("59"), md("xs"), md("59")], "");
        assert_eq!(line.modifiers(), &[md("59"), md("XS")]);
    }

    #[test]
    fn empty_claim_has_both_headers() {
        let text = format_claim(&BillingClaim::default());
        assert!(text.starts_with(DIAGNOSES_HEADER));
        assert!(text.contains(PROCEDURES_HEADER));
        assert_eq!(parse_claim(&text), ParsedClaim::default());
    }

    #[test]
    fn single_line_with_two_modifiers() {
        let claim = BillingClaim {
            icd10: [icd("K21.9")].into(),
            providers: vec![ProviderBillables {
                provider_name: "Dr. Rivera".into(),
                lines: vec![CptLine::new(cpt("43239"), vec![md("59"), md("XS")], "EGD with biopsy")],
            }],
        };
        let text = format_claim(&claim);
        let cpt_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("CPT ") && !l.starts_with(PROCEDURES_HEADER)).collect();
        assert_eq!(cpt_lines.len(), 1);
        assert!(cpt_lines[0].starts_with("CPT 1:"));
        assert!(cpt_lines[0].contains("| Modifiers: 59, XS"));
    }

    #[test]
    fn parses_answer_format() {
        let out = "ICD-10-CM Diagnoses:\nK21.9, E11.9\n\nCPT Codes with Modifiers:\nCPT Code 1: 43239 | Modifiers: 59";
        let parsed = parse_claim(out);
        assert_eq!(parsed.codes.icd10, [icd("K21.9"), icd("E11.9")].into());
        assert_eq!(parsed.codes.cpt, [cpt("43239")].into());
        assert_eq!(parsed.codes.modifier_pairs, [(cpt("43239"), md("59"))].into());
    }

    #[test]
    fn empty_input_parses_to_nothing() {
        assert_eq!(parse_claim(""), ParsedClaim::default());
    }

    #[test]
    fn special_tokens_and_noise_are_ignored() {
        let out = "<|placeholder2|>ICD-10-CM Diagnoses:\n\nk219, XXX.XXX, ...<|placeholder3|>\n\n\
                   <|placeholder4|>CPT Codes with Modifiers:\n\nProvider Name: Dr. Lee\nProvider Billables:\n\
                   CPT 1: 43239 | Modifiers: None | Description: EGD GI biopsy\n\
                   CPT 2: 4323 | Modifiers: 59\n\
                   CPT 3: 0075t | Modifiers: xs, XX, ... | Description: something\n<|end|>";
        let parsed = parse_claim(out);
        assert_eq!(parsed.codes.icd10, [icd("K21.9")].into());
        assert_eq!(parsed.codes.cpt, [cpt("43239"), cpt("0075T")].into());
        assert_eq!(
            parsed.codes.modifier_pairs,
            [(cpt("0075T"), md("XS")), (cpt("0075T"), md("XX"))].into()
        );
        assert_eq!(parsed.providers.len(), 1);
        assert_eq!(parsed.providers[0].provider_name, "Dr. Lee");
        assert_eq!(parsed.providers[0].lines[0].description, "EGD GI biopsy");
    }

    #[test]
    fn modifiers_stop_at_description_without_pipe() {
        let parsed = parse_claim("CPT Code 1: 43239 | Modifiers: 59 Description: upper GI\n");
        assert_eq!(parsed.codes.modifier_pairs, [(cpt("43239"), md("59"))].into());
    }

    #[test]
    fn trailing_diagnosis_at_end_of_input_is_treated_as_truncated() {
        let parsed = parse_claim("ICD-10-CM Diagnoses:\nK21.9, E11.65");
        assert_eq!(parsed.codes.icd10, [icd("K21.9")].into());
        let parsed = parse_claim("ICD-10-CM Diagnoses:\nK21.9, E11.65\n");
        assert_eq!(parsed.codes.icd10, [icd("K21.9"), icd("E11.65")].into());
    }

    #[test]
    fn claim_json_shape() {
        let json = r#"{"icd10":["k219"],"providers":[{"name":"A","lines":[{"cpt":"43239","modifiers":["59","59"]}]}]}"#;
        let claim: BillingClaim = serde_json::from_str(json).unwrap();
        assert_eq!(claim.icd10, [icd("K21.9")].into());
        assert_eq!(claim.providers[0].lines[0].modifiers(), &[md("59")]);
        assert_eq!(claim.providers[0].lines[0].description, "");
        let bad = r#"{"icd10":["12345"],"providers":[]}"#;
        assert!(serde_json::from_str::<BillingClaim>(bad).is_err());
    }
}
