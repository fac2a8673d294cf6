//! Case-level and aggregate code-set scores, plus the text-structure metrics
//! (ROUGE-L, ROUGE-L-Sum, METEOR) used to judge output-format consistency.

use std::collections::{BTreeSet, HashMap};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::claims::CodeSets;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty cohort")]
    EmptyCohort,
}

/// Precision, recall and exact-set match for one code kind in one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub precision: f64,
    pub recall: f64,
    pub full_match: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub icd10: KindScore,
    pub cpt: KindScore,
    /// Scored over (CPT, modifier) pairs pooled across providers.
    pub modifier: KindScore,
}

/// Scores generated codes `generated` against the coder's `truth`.
///
/// Empty-set conventions: with nothing generated, precision is 1 if the truth
/// is also empty and 0 otherwise; with an empty truth, recall is 1 if nothing
/// was generated and 0 otherwise.
pub fn set_score<T: Ord>(generated: &BTreeSet<T>, truth: &BTreeSet<T>) -> KindScore {
    let hits = generated.intersection(truth).count() as f64;
    let precision = match (generated.len(), truth.len()) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (m, _) => hits / m as f64,
    };
    let recall = match (truth.len(), generated.len()) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (p, _) => hits / p as f64,
    };
    KindScore {
        precision,
        recall,
        full_match: generated == truth,
    }
}

pub fn score_case(generated: &CodeSets, truth: &CodeSets) -> CaseScore {
    CaseScore {
        icd10: set_score(&generated.icd10, &truth.icd10),
        cpt: set_score(&generated.cpt, &truth.cpt),
        modifier: set_score(&generated.modifier_pairs, &truth.modifier_pairs),
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// F1 of the two means, not a mean of per-case F1.
    pub f1: f64,
    /// Fraction of cases whose generated set equals the truth set.
    pub full_match_pct: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateByKind {
    pub icd10: AggregateScore,
    pub cpt: AggregateScore,
    pub modifier: AggregateScore,
}

pub fn aggregate_kind<'a>(scores: impl IntoIterator<Item = &'a KindScore>) -> Result<AggregateScore, MetricsError> {
    let (mut p, mut r, mut full, mut n) = (0.0, 0.0, 0usize, 0usize);
    for s in scores {
        p += s.precision;
        r += s.recall;
        full += usize::from(s.full_match);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyCohort);
    }
    let (mean_precision, mean_recall) = (p / n as f64, r / n as f64);
    Ok(AggregateScore {
        mean_precision,
        mean_recall,
        f1: f1(mean_precision, mean_recall),
        full_match_pct: full as f64 / n as f64,
        cases: n,
    })
}

pub fn aggregate(cases: &[CaseScore]) -> Result<AggregateByKind, MetricsError> {
    Ok(AggregateByKind {
        icd10: aggregate_kind(cases.iter().map(|c| &c.icd10))?,
        cpt: aggregate_kind(cases.iter().map(|c| &c.cpt))?,
        modifier: aggregate_kind(cases.iter().map(|c| &c.modifier))?,
    })
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest common subsequence, O(n*m) time, O(m) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Positions in `a` of one longest common subsequence with `b`.
fn lcs_positions<T: PartialEq>(a: &[T], b: &[T]) -> Vec<usize> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        for j in 1..=m {
            table[at(i, j)] = if a[i - 1] == b[j - 1] {
                table[at(i - 1, j - 1)] + 1
            } else {
                table[at(i - 1, j)].max(table[at(i, j - 1)])
            };
        }
    }
    let (mut i, mut j) = (n, m);
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if table[at(i - 1, j)] >= table[at(i, j - 1)] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

fn f_measure(hits: f64, candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 || reference_len == 0 || hits == 0.0 {
        return 0.0;
    }
    f1(hits / candidate_len as f64, hits / reference_len as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge_l: f64,
    pub rouge_l_sum: f64,
}

/// ROUGE-L and ROUGE-L-Sum F-measures (beta = 1) on a 0-100 scale.
///
/// ROUGE-L compares the whole texts. ROUGE-L-Sum splits both on newlines,
/// takes for each reference line the union of its LCS positions against every
/// candidate line, and counts hits with per-token clipping. Two texts with no
/// tokens at all are identical and score 100.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScores {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() && refr.is_empty() {
        return RougeScores {
            rouge_l: 100.0,
            rouge_l_sum: 100.0,
        };
    }
    let whole = f_measure(lcs_len(&cand, &refr) as f64, cand.len(), refr.len());
    RougeScores {
        rouge_l: 100.0 * whole,
        rouge_l_sum: 100.0 * rouge_l_sum_f(candidate, reference),
    }
}

fn rouge_l_sum_f(candidate: &str, reference: &str) -> f64 {
    let cand_lines: Vec<Vec<String>> = candidate.lines().map(tokenize).filter(|l| !l.is_empty()).collect();
    let ref_lines: Vec<Vec<String>> = reference.lines().map(tokenize).filter(|l| !l.is_empty()).collect();
    let cand_len: usize = cand_lines.iter().map(Vec::len).sum();
    let ref_len: usize = ref_lines.iter().map(Vec::len).sum();

    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in cand_lines.iter().flatten() {
        *cand_counts.entry(t).or_default() += 1;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in ref_lines.iter().flatten() {
        *ref_counts.entry(t).or_default() += 1;
    }

    let mut hits = 0usize;
    for r in &ref_lines {
        let union: BTreeSet<usize> = cand_lines.iter().flat_map(|c| lcs_positions(r, c)).collect();
        for pos in union {
            let tok = r[pos].as_str();
            let (Some(c), Some(rc)) = (cand_counts.get_mut(tok), ref_counts.get_mut(tok)) else {
                continue;
            };
            if *c > 0 && *rc > 0 {
                hits += 1;
                *c -= 1;
                *rc -= 1;
            }
        }
    }
    f_measure(hits as f64, cand_len, ref_len)
}

/// Breakdown of one METEOR computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorDetail {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_mean: f64,
    pub penalty: f64,
    pub score: f64,
}

/// METEOR with staged unigram alignment: exact match, then Snowball English
/// stems, then an optional synonym table.
pub struct Meteor {
    stemmer: Stemmer,
    synonyms: HashMap<String, usize>,
}

impl Default for Meteor {
    fn default() -> Self {
        Meteor {
            stemmer: Stemmer::create(Algorithm::English),
            synonyms: HashMap::new(),
        }
    }
}

impl std::fmt::Debug for Meteor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Meteor").field("synonyms", &self.synonyms.len()).finish()
    }
}

impl Meteor {
    /// Adds synonym groups; every word in a group matches every other.
    pub fn with_synonyms<I, G, S>(mut self, groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let base = self.synonyms.values().max().map_or(0, |m| m + 1);
        for (gi, group) in groups.into_iter().enumerate() {
            for w in group {
                self.synonyms.insert(w.as_ref().to_lowercase(), base + gi);
            }
        }
        self
    }

    /// Reads a synonym table: one comma-separated group per line.
    pub fn load_synonyms(self, text: &str) -> Self {
        let groups: Vec<Vec<String>> = text
            .lines()
            .map(|l| {
                l.split(',')
                    .map(|w| w.trim().to_string())
                    .filter(|w| !w.is_empty())
                    .collect::<Vec<_>>()
            })
            .filter(|g| g.len() > 1)
            .collect();
        self.with_synonyms(groups)
    }

    pub fn score(&self, candidate: &str, reference: &str) -> f64 {
        self.detail(candidate, reference).score
    }

    pub fn detail(&self, candidate: &str, reference: &str) -> MeteorDetail {
        let cand = tokenize(candidate);
        let refr = tokenize(reference);
        let mut cand_match: Vec<Option<usize>> = vec![None; cand.len()];
        let mut ref_used = vec![false; refr.len()];

        let as_keys = |toks: &[String]| toks.iter().map(|t| Some(t.clone())).collect::<Vec<_>>();
        align(&as_keys(&cand), &as_keys(&refr), &mut cand_match, &mut ref_used);
        if cand_match.iter().any(Option::is_none) {
            let stem = |toks: &[String]| -> Vec<Option<String>> {
                toks.iter().map(|t| Some(self.stemmer.stem(t).into_owned())).collect()
            };
            align(&stem(&cand), &stem(&refr), &mut cand_match, &mut ref_used);
        }
        if !self.synonyms.is_empty() && cand_match.iter().any(Option::is_none) {
            let syn = |toks: &[String]| -> Vec<Option<usize>> {
                toks.iter().map(|t| self.synonyms.get(t).copied()).collect()
            };
            align(&syn(&cand), &syn(&refr), &mut cand_match, &mut ref_used);
        }

        let pairs: Vec<(usize, usize)> = cand_match
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|j| (i, j)))
            .collect();
        let matches = pairs.len();
        if matches == 0 {
            return MeteorDetail {
                matches: 0,
                chunks: 0,
                precision: 0.0,
                recall: 0.0,
                f_mean: 0.0,
                penalty: 0.0,
                score: 0.0,
            };
        }
        let chunks = 1 + pairs
            .windows(2)
            .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
            .count();
        let precision = matches as f64 / cand.len() as f64;
        let recall = matches as f64 / refr.len() as f64;
        let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
        let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
        MeteorDetail {
            matches,
            chunks,
            precision,
            recall,
            f_mean,
            penalty,
            score: f_mean * (1.0 - penalty),
        }
    }
}

/// One alignment stage over keys (`None` never matches). Each unmatched
/// candidate token, in order, takes the unmatched reference token with an
/// equal key closest to the position right after the previous match, which
/// keeps contiguous runs together.
fn align<K: PartialEq>(
    cand: &[Option<K>],
    refr: &[Option<K>],
    cand_match: &mut [Option<usize>],
    ref_used: &mut [bool],
) {
    for i in 0..cand.len() {
        if cand_match[i].is_some() {
            continue;
        }
        let Some(key) = &cand[i] else { continue };
        let target = (0..i)
            .rev()
            .find_map(|p| cand_match[p])
            .map_or(0, |j| j + 1);
        let best = refr
            .iter()
            .enumerate()
            .filter(|(j, r)| !ref_used[*j] && r.as_ref() == Some(key))
            .min_by_key(|(j, _)| (j.abs_diff(target), *j))
            .map(|(j, _)| j);
        if let Some(j) = best {
            cand_match[i] = Some(j);
            ref_used[j] = true;
        }
    }
}

/// METEOR with exact and stem stages and no synonym table.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    Meteor::default().score(candidate, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub rouge_l: f64,
    pub rouge_l_sum: f64,
    pub meteor: f64,
}

pub fn score_structure(meteor: &Meteor, output: &str, reference: &str) -> StructureScore {
    let r = rouge_l(output, reference);
    StructureScore {
        rouge_l: r.rouge_l,
        rouge_l_sum: r.rouge_l_sum,
        meteor: meteor.score(output, reference),
    }
}
