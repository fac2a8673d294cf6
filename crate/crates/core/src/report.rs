//! Scoring of a completed run against ground truth, and the results table.

use chrono::Datelike;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapResult;
use crate::claims::{format_claim, parse_claim};
use crate::cohort::{render_aligned, Corpus};
use crate::error::{Error, Result};
use crate::gateway::{RunHeader, RunManifest};
use crate::metrics::{aggregate, score_case, score_structure, AggregateScore, CaseScore, Meteor, MetricsError, StructureScore};
use crate::registry::{classify, CodeValidity, RegistrySet, ValidityReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub encounter_id: String,
    pub score: CaseScore,
    pub validity: CodeValidity,
    pub structure: StructureScore,
}

/// Aggregate figures for one code kind. Validity is absent for modifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub full_match_pct: f64,
    pub validity: Option<ValidityReport>,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl KindSummary {
    fn new(agg: AggregateScore, validity: Option<ValidityReport>) -> Self {
        KindSummary {
            full_match_pct: agg.full_match_pct,
            validity,
            recall: agg.mean_recall,
            precision: agg.mean_precision,
            f1: agg.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Configuration of the run that produced the outputs.
    pub run: RunHeader,
    /// Registry years available when scoring.
    pub registry_years: Vec<i32>,
    pub cases_scored: usize,
    /// Cases whose endpoint call failed; excluded from every metric.
    pub failed_ids: Vec<String>,
    pub icd10: KindSummary,
    pub cpt: KindSummary,
    pub modifier: KindSummary,
    /// Means over scored cases.
    pub structure: StructureScore,
    pub cases: Vec<ScoredCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
}

impl EvalReport {
    pub fn case_scores(&self) -> Vec<CaseScore> {
        self.cases.iter().map(|c| c.score).collect()
    }
}

/// Scores every successful case of `manifest`. Codes are validated against
/// the registry for the encounter's calendar year, and the structure metrics
/// compare raw output with the canonical rendering of the true claim.
pub fn score_manifest(
    manifest: &RunManifest,
    corpus: &Corpus,
    registries: &RegistrySet,
    meteor: &Meteor,
    label: &str,
) -> Result<EvalReport> {
    let succeeded: Vec<_> = manifest.cases.iter().filter(|c| c.output.is_some()).collect();
    let cases: Vec<ScoredCase> = succeeded
        .par_iter()
        .map(|entry| {
            let record = corpus.get(&entry.encounter_id).ok_or_else(|| {
                Error::Data(format!("run case `{}` is not in the corpus", entry.encounter_id))
            })?;
            let output = entry.output.as_deref().unwrap_or_default();
            let generated = parse_claim(output).codes;
            let truth = record.claim.code_sets();
            let registry = registries.get(record.date.year())?;
            Ok(ScoredCase {
                encounter_id: entry.encounter_id.clone(),
                score: score_case(&generated, &truth),
                validity: classify(&generated, registry),
                structure: score_structure(meteor, output, &format_claim(&record.claim)),
            })
        })
        .collect::<Result<_>>()?;
    if cases.is_empty() {
        return Err(MetricsError::EmptyCohort.into());
    }

    let scores: Vec<CaseScore> = cases.iter().map(|c| c.score).collect();
    let agg = aggregate(&scores)?;
    let validity = cases.iter().fold(CodeValidity::default(), |acc, c| acc + c.validity);
    let n = cases.len() as f64;
    let structure = StructureScore {
        rouge_l: cases.iter().map(|c| c.structure.rouge_l).sum::<f64>() / n,
        rouge_l_sum: cases.iter().map(|c| c.structure.rouge_l_sum).sum::<f64>() / n,
        meteor: cases.iter().map(|c| c.structure.meteor).sum::<f64>() / n,
    };

    Ok(EvalReport {
        label: label.to_string(),
        run: manifest.header.clone(),
        registry_years: registries.years().collect(),
        cases_scored: cases.len(),
        failed_ids: manifest.failed().map(|c| c.encounter_id.clone()).collect(),
        icd10: KindSummary::new(agg.icd10, Some(validity.icd10)),
        cpt: KindSummary::new(agg.cpt, Some(validity.cpt)),
        modifier: KindSummary::new(agg.modifier, None),
        structure,
        cases,
        bootstrap: None,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn two(x: f64) -> String {
    format!("{x:.2}")
}

/// Table rows as `[section, metric, value per report...]`.
pub fn table_rows(reports: &[EvalReport]) -> Vec<Vec<String>> {
    type Getter = fn(&EvalReport) -> String;
    let spec: Vec<(&str, &str, Getter)> = vec![
        ("ICD-10-CM", "Full Match %", |r| pct(r.icd10.full_match_pct)),
        ("ICD-10-CM", "Valid %", |r| r.icd10.validity.map_or(String::new(), |v| pct(v.valid_pct))),
        ("ICD-10-CM", "Fabricated %", |r| r.icd10.validity.map_or(String::new(), |v| pct(v.fabricated_pct))),
        ("ICD-10-CM", "Recall", |r| two(r.icd10.recall)),
        ("ICD-10-CM", "Precision", |r| two(r.icd10.precision)),
        ("ICD-10-CM", "F1", |r| two(r.icd10.f1)),
        ("CPT", "Full Match %", |r| pct(r.cpt.full_match_pct)),
        ("CPT", "Valid %", |r| r.cpt.validity.map_or(String::new(), |v| pct(v.valid_pct))),
        ("CPT", "Fabricated %", |r| r.cpt.validity.map_or(String::new(), |v| pct(v.fabricated_pct))),
        ("CPT", "Recall", |r| two(r.cpt.recall)),
        ("CPT", "Precision", |r| two(r.cpt.precision)),
        ("CPT", "F1", |r| two(r.cpt.f1)),
        ("Modifier", "Full Match %", |r| pct(r.modifier.full_match_pct)),
        ("Modifier", "Recall", |r| two(r.modifier.recall)),
        ("Modifier", "Precision", |r| two(r.modifier.precision)),
        ("Modifier", "F1", |r| two(r.modifier.f1)),
        ("Structure", "ROUGE L", |r| format!("{:.1}", r.structure.rouge_l)),
        ("Structure", "ROUGE L Sum", |r| format!("{:.1}", r.structure.rouge_l_sum)),
        ("Structure", "METEOR Score", |r| two(r.structure.meteor)),
    ];
    spec.into_iter()
        .map(|(section, metric, get)| {
            let mut row = vec![section.to_string(), metric.to_string()];
            row.extend(reports.iter().map(get));
            row
        })
        .collect()
}

fn header(reports: &[EvalReport]) -> Vec<String> {
    let mut h = vec!["section".to_string(), "metric".to_string()];
    h.extend(reports.iter().map(|r| r.label.clone()));
    h
}

pub fn table_csv(reports: &[EvalReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(reports)).expect("in-memory write");
    for row in table_rows(reports) {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn table_text(reports: &[EvalReport]) -> String {
    let mut rows = vec![header(reports)];
    rows.extend(table_rows(reports));
    let mut out = render_aligned(&rows);
    for r in reports.iter().filter(|r| !r.failed_ids.is_empty()) {
        out.push_str(&format!(
            "{}: {} cases scored, {} failed at the endpoint\n",
            r.label,
            r.cases_scored,
            r.failed_ids.len()
        ));
    }
    out
}
