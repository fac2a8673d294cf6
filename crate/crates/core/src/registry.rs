//! Year-cohort reference lists of valid ICD-10-CM and CPT codes, and the
//! valid/fabricated classification of generated codes.
//!
//! A registry file is a flat two-column CSV, one line per code:
//!
//! ```text
//! ICD10,K21.9
//! CPT,43239
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. A registry directory
//! holds one file per cohort year, named `{year}.csv`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::claims::{canonicalize_cpt, canonicalize_icd10, CodeSets, CptCode, Icd10Code};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read registry {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: {reason}: `{text}`")]
    Format {
        source_name: String,
        line: usize,
        text: String,
        reason: String,
    },
    #[error("{0}: registry is empty")]
    Empty(String),
    #[error("{0}: no `{{year}}.csv` registry files found")]
    NoRegistries(PathBuf),
    #[error("no registry loaded for cohort year {0}")]
    MissingYear(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeRegistry {
    year: i32,
    icd10: HashSet<Icd10Code>,
    cpt: HashSet<CptCode>,
}

impl CodeRegistry {
    /// Builds a registry from already-canonical codes.
    pub fn new(
        year: i32,
        icd10: impl IntoIterator<Item = Icd10Code>,
        cpt: impl IntoIterator<Item = CptCode>,
    ) -> Self {
        CodeRegistry {
            year,
            icd10: icd10.into_iter().collect(),
            cpt: cpt.into_iter().collect(),
        }
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn icd10_len(&self) -> usize {
        self.icd10.len()
    }

    pub fn cpt_len(&self) -> usize {
        self.cpt.len()
    }

    pub fn contains_icd10(&self, code: &Icd10Code) -> bool {
        self.icd10.contains(code)
    }

    pub fn contains_cpt(&self, code: &CptCode) -> bool {
        self.cpt.contains(code)
    }

    /// Writes the registry in its CSV form, codes sorted within each kind.
    pub fn to_csv(&self) -> String {
        let mut icd: Vec<_> = self.icd10.iter().map(Icd10Code::as_str).collect();
        let mut cpt: Vec<_> = self.cpt.iter().map(CptCode::as_str).collect();
        icd.sort_unstable();
        cpt.sort_unstable();
        let mut out = String::new();
        for c in icd {
            out.push_str("ICD10,");
            out.push_str(c);
            out.push('\n');
        }
        for c in cpt {
            out.push_str("CPT,");
            out.push_str(c);
            out.push('\n');
        }
        out
    }
}

pub fn load_registry(path: &Path, year: i32) -> Result<CodeRegistry, RegistryError> {
    let file = fs::File::open(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_registry(file, year, &path.display().to_string())
}

pub fn parse_registry(
    reader: impl Read,
    year: i32,
    source_name: &str,
) -> Result<CodeRegistry, RegistryError> {
    let mut registry = CodeRegistry::new(year, [], []);
    let format_err = |line: usize, text: &str, reason: String| RegistryError::Format {
        source_name: source_name.to_string(),
        line,
        text: text.to_string(),
        reason,
    };
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| RegistryError::Io {
            path: PathBuf::from(source_name),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((kind, code)) = trimmed.split_once(',') else {
            return Err(format_err(lineno, trimmed, "expected KIND,CODE".into()));
        };
        match kind.trim().to_ascii_uppercase().as_str() {
            "ICD10" => {
                let code = canonicalize_icd10(code).map_err(|e| format_err(lineno, trimmed, e.to_string()))?;
                registry.icd10.insert(code);
            }
            "CPT" => {
                let code = canonicalize_cpt(code).map_err(|e| format_err(lineno, trimmed, e.to_string()))?;
                registry.cpt.insert(code);
            }
            other => {
                return Err(format_err(
                    lineno,
                    trimmed,
                    format!("unknown code kind `{other}` (expected ICD10 or CPT)"),
                ))
            }
        }
    }
    if registry.icd10.is_empty() && registry.cpt.is_empty() {
        return Err(RegistryError::Empty(source_name.to_string()));
    }
    Ok(registry)
}

/// Registries for every cohort year found in a directory.
#[derive(Debug, Clone, Default)]
pub struct RegistrySet {
    by_year: BTreeMap<i32, CodeRegistry>,
}

impl RegistrySet {
    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        let entries = fs::read_dir(dir).map_err(|source| RegistryError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut set = RegistrySet::default();
        for entry in entries {
            let entry = entry.map_err(|source| RegistryError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let Some(year) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<i32>().ok())
            else {
                continue;
            };
            set.insert(load_registry(&path, year)?);
        }
        if set.by_year.is_empty() {
            return Err(RegistryError::NoRegistries(dir.to_path_buf()));
        }
        Ok(set)
    }

    pub fn insert(&mut self, registry: CodeRegistry) {
        self.by_year.insert(registry.year, registry);
    }

    pub fn get(&self, year: i32) -> Result<&CodeRegistry, RegistryError> {
        self.by_year.get(&year).ok_or(RegistryError::MissingYear(year))
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.by_year.keys().copied()
    }

    /// Writes `{year}.csv` files into `dir`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (year, reg) in &self.by_year {
            fs::write(dir.join(format!("{year}.csv")), reg.to_csv())?;
        }
        Ok(())
    }
}

/// Valid/fabricated counts for one code kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid_count: u64,
    pub fabricated_count: u64,
    /// Fraction of generated codes found in the registry; 0 when nothing was
    /// generated.
    pub valid_pct: f64,
    pub fabricated_pct: f64,
}

impl ValidityReport {
    pub fn from_counts(valid_count: u64, fabricated_count: u64) -> Self {
        let total = valid_count + fabricated_count;
        let (valid_pct, fabricated_pct) = if total == 0 {
            (0.0, 0.0)
        } else {
            let valid = valid_count as f64 / total as f64;
            (valid, fabricated_count as f64 / total as f64)
        };
        ValidityReport {
            valid_count,
            fabricated_count,
            valid_pct,
            fabricated_pct,
        }
    }

    pub fn total(&self) -> u64 {
        self.valid_count + self.fabricated_count
    }
}

impl Add for ValidityReport {
    type Output = ValidityReport;
    fn add(self, rhs: ValidityReport) -> ValidityReport {
        ValidityReport::from_counts(
            self.valid_count + rhs.valid_count,
            self.fabricated_count + rhs.fabricated_count,
        )
    }
}

impl AddAssign for ValidityReport {
    fn add_assign(&mut self, rhs: ValidityReport) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeValidity {
    pub icd10: ValidityReport,
    pub cpt: ValidityReport,
}

impl Add for CodeValidity {
    type Output = CodeValidity;
    fn add(self, rhs: CodeValidity) -> CodeValidity {
        CodeValidity {
            icd10: self.icd10 + rhs.icd10,
            cpt: self.cpt + rhs.cpt,
        }
    }
}

impl AddAssign for CodeValidity {
    fn add_assign(&mut self, rhs: CodeValidity) {
        *self = *self + rhs;
    }
}

pub fn classify_icd10<'a>(
    codes: impl IntoIterator<Item = &'a Icd10Code>,
    registry: &CodeRegistry,
) -> ValidityReport {
    let (valid, fabricated) = codes.into_iter().fold((0, 0), |(v, f), c| {
        if registry.contains_icd10(c) {
            (v + 1, f)
        } else {
            (v, f + 1)
        }
    });
    ValidityReport::from_counts(valid, fabricated)
}

pub fn classify_cpt<'a>(
    codes: impl IntoIterator<Item = &'a CptCode>,
    registry: &CodeRegistry,
) -> ValidityReport {
    let (valid, fabricated) = codes.into_iter().fold((0, 0), |(v, f), c| {
        if registry.contains_cpt(c) {
            (v + 1, f)
        } else {
            (v, f + 1)
        }
    });
    ValidityReport::from_counts(valid, fabricated)
}

/// Classifies a case's generated codes against its cohort-year registry.
pub fn classify(codes: &CodeSets, registry: &CodeRegistry) -> CodeValidity {
    CodeValidity {
        icd10: classify_icd10(&codes.icd10, registry),
        cpt: classify_cpt(&codes.cpt, registry),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_two_kinds() {
        let reg = parse_registry("ICD10,K21.9\nCPT,43239".as_bytes(), 2019, "mem").unwrap();
        assert_eq!(reg.icd10_len(), 1);
        assert_eq!(reg.cpt_len(), 1);
        assert_eq!(reg.year(), 2019);
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(
            parse_registry("".as_bytes(), 2019, "mem"),
            Err(RegistryError::Empty(_))
        ));
        assert!(matches!(
            parse_registry("\n# header\n".as_bytes(), 2019, "mem"),
            Err(RegistryError::Empty(_))
        ));
    }

    #[test]
    fn duplicates_and_case_collapse() {
        let reg = parse_registry("ICD10,K21.9\nicd10,k219\nCPT,0075t\nCPT,0075T\n".as_bytes(), 2020, "mem").unwrap();
        assert_eq!(reg.icd10_len(), 1);
        assert_eq!(reg.cpt_len(), 1);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_registry("ICD10,K21.9\nCPT,432\n".as_bytes(), 2020, "reg.csv").unwrap_err();
        match err {
            RegistryError::Format { line, text, .. } => {
                assert_eq!(line, 2);
                assert_eq!(text, "CPT,432");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_registry("HCPCS,A0001\n".as_bytes(), 2020, "reg.csv").unwrap_err();
        assert!(matches!(err, RegistryError::Format { line: 1, .. }));
    }

    #[test]
    fn membership_classification() {
        let reg = parse_registry("ICD10,K21.9\nCPT,43239".as_bytes(), 2019, "mem").unwrap();
        let k219 = canonicalize_icd10("K21.9").unwrap();
        let r = classify_icd10([&k219], &reg);
        assert_eq!((r.valid_count, r.fabricated_count), (1, 0));
        let fake = canonicalize_icd10("K99.99").unwrap();
        let r = classify_icd10([&fake], &reg);
        assert_eq!(r.fabricated_pct, 1.0);
        assert_eq!(r.valid_pct, 0.0);
    }

    #[test]
    fn other_year_registry_does_not_validate() {
        let reg2019 = parse_registry("ICD10,K21.9\n".as_bytes(), 2019, "a").unwrap();
        let reg2020 = parse_registry("ICD10,E11.9\n".as_bytes(), 2020, "b").unwrap();
        let code = canonicalize_icd10("K21.9").unwrap();
        assert_eq!(classify_icd10([&code], &reg2019).valid_count, 1);
        assert_eq!(classify_icd10([&code], &reg2020).fabricated_count, 1);
    }

    #[test]
    fn report_addition_recounts() {
        let a = ValidityReport::from_counts(3, 1);
        let b = ValidityReport::from_counts(0, 4);
        let sum = a + b;
        assert_eq!(sum.total(), 8);
        assert!((sum.fabricated_pct - 5.0 / 8.0).abs() < 1e-12);
        assert!((sum.valid_pct + sum.fabricated_pct - 1.0).abs() < 1e-12);
        assert_eq!(ValidityReport::from_counts(0, 0).valid_pct, 0.0);
    }

    #[test]
    fn csv_roundtrip_through_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = RegistrySet::default();
        set.insert(parse_registry("ICD10,K21.9\nCPT,43239".as_bytes(), 2019, "m").unwrap());
        set.insert(parse_registry("ICD10,E11.9\n".as_bytes(), 2020, "m").unwrap());
        set.write_dir(dir.path()).unwrap();
        let loaded = RegistrySet::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.years().collect::<Vec<_>>(), vec![2019, 2020]);
        assert_eq!(loaded.get(2019).unwrap(), set.get(2019).unwrap());
        assert!(matches!(loaded.get(2021), Err(RegistryError::MissingYear(2021))));
    }
}
