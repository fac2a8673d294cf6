//! Deterministic synthetic encounters and code registries, for demos and
//! tests where real notes cannot be shipped.

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::claims::{
    BillingClaim, CptCode, CptLine, EncounterRecord, Icd10Code, ModifierCode, ProviderBillables, Sex,
};
use crate::registry::{CodeRegistry, RegistrySet};

struct Procedure {
    cpt: &'static str,
    description: &'static str,
    anesthesia: &'static str,
}

struct Service {
    name: &'static str,
    procedures: &'static [Procedure],
    diagnoses: &'static [(&'static str, &'static str)],
}

const SERVICES: &[Service] = &[
    Service {
        name: "General Surgery",
        procedures: &[
            Procedure { cpt: "47562", description: "Laparoscopic cholecystectomy", anesthesia: "00790" },
            Procedure { cpt: "44970", description: "Laparoscopic appendectomy", anesthesia: "00840" },
            Procedure { cpt: "49505", description: "Open inguinal hernia repair", anesthesia: "00830" },
            Procedure { cpt: "43239", description: "Upper endoscopy with biopsy", anesthesia: "00731" },
        ],
        diagnoses: &[
            ("K80.20", "calculus of gallbladder"),
            ("K35.80", "acute appendicitis"),
            ("K40.90", "unilateral inguinal hernia"),
            ("K21.9", "gastro-esophageal reflux"),
        ],
    },
    Service {
        name: "Orthopedics",
        procedures: &[
            Procedure { cpt: "29881", description: "Knee arthroscopy with meniscectomy", anesthesia: "01400" },
            Procedure { cpt: "27447", description: "Total knee arthroplasty", anesthesia: "01402" },
            Procedure { cpt: "27130", description: "Total hip arthroplasty", anesthesia: "01214" },
            Procedure { cpt: "29827", description: "Arthroscopic rotator cuff repair", anesthesia: "01630" },
        ],
        diagnoses: &[
            ("M23.221", "derangement of meniscus"),
            ("M17.11", "primary osteoarthritis of right knee"),
            ("M16.12", "primary osteoarthritis of left hip"),
            ("M75.121", "rotator cuff tear"),
        ],
    },
    Service {
        name: "Urology",
        procedures: &[
            Procedure { cpt: "52000", description: "Cystourethroscopy", anesthesia: "00910" },
            Procedure { cpt: "52601", description: "Transurethral resection of prostate", anesthesia: "00914" },
            Procedure { cpt: "52356", description: "Ureteroscopy with lithotripsy and stent", anesthesia: "00918" },
        ],
        diagnoses: &[
            ("N40.1", "benign prostatic hyperplasia"),
            ("R31.9", "hematuria"),
            ("N20.1", "calculus of ureter"),
        ],
    },
    Service {
        name: "Gynecology",
        procedures: &[
            Procedure { cpt: "58558", description: "Hysteroscopy with endometrial biopsy", anesthesia: "00952" },
            Procedure { cpt: "58571", description: "Laparoscopic total hysterectomy", anesthesia: "00840" },
        ],
        diagnoses: &[
            ("N84.0", "polyp of corpus uteri"),
            ("D25.9", "leiomyoma of uterus"),
            ("N92.0", "excessive menstruation"),
        ],
    },
    Service {
        name: "Otolaryngology",
        procedures: &[
            Procedure { cpt: "42820", description: "Tonsillectomy and adenoidectomy", anesthesia: "00170" },
            Procedure { cpt: "31255", description: "Total ethmoidectomy, endoscopic", anesthesia: "00160" },
            Procedure { cpt: "69436", description: "Tympanostomy with tube insertion", anesthesia: "00120" },
        ],
        diagnoses: &[
            ("J35.3", "hypertrophy of tonsils with adenoids"),
            ("J32.9", "chronic sinusitis"),
            ("H65.33", "chronic mucoid otitis media"),
        ],
    },
];

const COMORBIDITIES: &[(&str, &str)] = &[
    ("I10", "essential hypertension"),
    ("E11.9", "type 2 diabetes"),
    ("Z68.41", "body mass index 40 or greater"),
    ("E78.5", "hyperlipidemia"),
    ("Z87.891", "history of nicotine dependence"),
];

const SURGEON_MODIFIERS: &[&str] = &["59", "51", "RT", "LT", "50", "22", "78"];
const ANESTHESIA_MODIFIERS: &[&str] = &["AA", "QK", "QX", "QZ", "P2", "P3"];
const SURGEONS: &[&str] = &["Avery Stone, MD", "Jordan Blake, MD", "Riley Chen, MD", "Morgan Patel, MD"];
const ANESTHESIOLOGISTS: &[&str] = &["Casey Ward, MD", "Quinn Alvarez, MD", "Drew Okafor, CRNA"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub encounters: usize,
    pub seed: u64,
    pub first_year: i32,
    pub last_year: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            encounters: 50,
            seed: 0,
            first_year: 2019,
            last_year: 2019,
        }
    }
}

fn pick<'a, T>(rng: &mut ChaCha20Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty catalog")
}

fn code<T: std::str::FromStr>(s: &str) -> T
where
    T::Err: std::fmt::Debug,
{
    s.parse().expect("catalog codes are valid")
}

/// `n` encounters with unique ids, notes that name their own id, and claims
/// drawn from a small surgical catalog.
pub fn synth_corpus(config: &SynthConfig) -> Vec<EncounterRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let first = NaiveDate::from_ymd_opt(config.first_year, 1, 1).expect("valid year");
    let last = NaiveDate::from_ymd_opt(config.last_year, 12, 31).expect("valid year");
    let span = (last - first).num_days().max(0);
    (0..config.encounters)
        .map(|i| synth_encounter(&mut rng, &format!("enc-{i:06}"), first + chrono::Days::new(rng_days(span, i, config.encounters))))
        .collect()
}

// Dates spread evenly over the span so every month is populated.
fn rng_days(span: i64, i: usize, n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        (span as u128 * i as u128 / (n as u128 - 1)) as u64
    }
}

fn synth_encounter(rng: &mut ChaCha20Rng, id: &str, date: NaiveDate) -> EncounterRecord {
    let service = pick(rng, SERVICES);
    let n_proc = rng.random_range(1..=service.procedures.len().min(2));
    let mut procedures: Vec<&Procedure> = service.procedures.iter().collect();
    procedures.shuffle(rng);
    procedures.truncate(n_proc);

    let mut diagnoses: Vec<(&str, &str)> = service.diagnoses.choose_multiple(rng, n_proc).copied().collect();
    let n_comorbid = rng.random_range(0..=2);
    diagnoses.extend(COMORBIDITIES.choose_multiple(rng, n_comorbid).copied());

    let surgeon_lines: Vec<CptLine> = procedures
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut mods: Vec<ModifierCode> = Vec::new();
            if k > 0 {
                mods.push(code("51"));
            }
            if rng.random_bool(0.3) {
                mods.push(code(pick(rng, SURGEON_MODIFIERS)));
            }
            CptLine::new(code(p.cpt), mods, p.description)
        })
        .collect();
    let anesthesia = procedures[0];
    let n_mods = rng.random_range(1..=2);
    let anesthesia_mods: Vec<ModifierCode> = ANESTHESIA_MODIFIERS
        .choose_multiple(rng, n_mods)
        .map(|m| code(m))
        .collect();
    let claim = BillingClaim {
        icd10: diagnoses.iter().map(|(c, _)| code::<Icd10Code>(c)).collect(),
        providers: vec![
            ProviderBillables {
                provider_name: pick(rng, SURGEONS).to_string(),
                lines: surgeon_lines,
            },
            ProviderBillables {
                provider_name: pick(rng, ANESTHESIOLOGISTS).to_string(),
                lines: vec![CptLine::new(
                    code(anesthesia.anesthesia),
                    anesthesia_mods,
                    format!("Anesthesia for {}", anesthesia.description.to_lowercase()),
                )],
            },
        ],
    };

    let findings: Vec<&str> = diagnoses.iter().map(|(_, d)| *d).collect();
    let performed: Vec<&str> = procedures.iter().map(|p| p.description).collect();
    let ebl = rng.random_range(5..=400);
    let note = format!(
        "OPERATIVE REPORT {id}\n\
         Service: {service}\n\
         Preoperative diagnosis: {findings}.\n\
         Postoperative diagnosis: Same.\n\
         Procedure performed: {performed}.\n\
         Anesthesia: General endotracheal.\n\
         Findings: Consistent with {primary}.\n\
         Estimated blood loss: {ebl} mL.\n\
         The patient tolerated the procedure well and was taken to recovery in stable condition.",
        service = service.name,
        findings = findings.join("; "),
        performed = performed.join("; "),
        primary = findings[0],
    );

    EncounterRecord {
        id: id.to_string(),
        note,
        date,
        service: service.name.to_string(),
        claim,
        patient_age: Some(rng.random_range(18..=90) as f64),
        sex: Some(if rng.random_bool(0.5) { Sex::F } else { Sex::M }),
    }
}

/// Registries holding every catalog code, one per year in `first..=last`.
pub fn synth_registries(first_year: i32, last_year: i32) -> RegistrySet {
    let mut icd: Vec<Icd10Code> = COMORBIDITIES.iter().map(|(c, _)| code(c)).collect();
    let mut cpt: Vec<CptCode> = Vec::new();
    for s in SERVICES {
        icd.extend(s.diagnoses.iter().map(|(c, _)| code::<Icd10Code>(c)));
        for p in s.procedures {
            cpt.push(code(p.cpt));
            cpt.push(code(p.anesthesia));
        }
    }
    let mut set = RegistrySet::default();
    for year in first_year..=last_year {
        set.insert(CodeRegistry::new(year, icd.iter().cloned(), cpt.iter().cloned()));
    }
    set
}

/// A structurally valid ICD-10-CM code, uniformly over shapes and characters.
pub fn random_icd10(rng: &mut impl Rng) -> Icd10Code {
    const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let mut s = String::new();
    s.push(rng.random_range(b'A'..=b'Z') as char);
    s.push(rng.random_range(b'0'..=b'9') as char);
    s.push(*ALNUM.choose(rng).unwrap() as char);
    let extra = rng.random_range(0..=4);
    if extra > 0 {
        s.push('.');
        for _ in 0..extra {
            s.push(*ALNUM.choose(rng).unwrap() as char);
        }
    }
    code(&s)
}

pub fn random_cpt(rng: &mut impl Rng) -> CptCode {
    let mut s: String = (0..4).map(|_| rng.random_range(b'0'..=b'9') as char).collect();
    s.push(if rng.random_bool(0.8) {
        rng.random_range(b'0'..=b'9') as char
    } else {
        *b"FMTU".choose(rng).unwrap() as char
    });
    code(&s)
}

pub fn random_modifier(rng: &mut impl Rng) -> ModifierCode {
    const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let s: String = (0..2).map(|_| *ALNUM.choose(rng).unwrap() as char).collect();
    code(&s)
}

/// A random claim with 0-6 diagnoses and 0-3 providers of 0-4 lines each.
/// Descriptions are free text without `|` or line breaks.
pub fn random_claim(rng: &mut impl Rng) -> BillingClaim {
    const WORDS: &[&str] = &["repair", "excision", "of", "left", "right", "lesion", "with", "graft", "biopsy", "2.5 cm"];
    let icd10 = (0..rng.random_range(0..=6)).map(|_| random_icd10(rng)).collect();
    let providers = (0..rng.random_range(0..=3))
        .map(|p| ProviderBillables {
            provider_name: format!("Provider {p} {}", WORDS.choose(rng).unwrap()),
            lines: (0..rng.random_range(0..=4))
                .map(|_| {
                    let mods = (0..rng.random_range(0..=3)).map(|_| random_modifier(rng)).collect();
                    let words: Vec<&str> = (0..rng.random_range(0..=5)).map(|_| *WORDS.choose(rng).unwrap()).collect();
                    CptLine::new(random_cpt(rng), mods, words.join(" "))
                })
                .collect(),
        })
        .collect();
    BillingClaim { icd10, providers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::classify;

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let cfg = SynthConfig { encounters: 40, seed: 5, first_year: 2018, last_year: 2019 };
        let a = synth_corpus(&cfg);
        assert_eq!(a, synth_corpus(&cfg));
        let regs = synth_registries(cfg.first_year, cfg.last_year);
        for e in &a {
            assert!(e.note.contains(&e.id));
            let reg = regs.get(chrono::Datelike::year(&e.date)).unwrap();
            let v = classify(&e.claim.code_sets(), reg);
            assert_eq!(v.icd10.fabricated_count + v.cpt.fabricated_count, 0);
        }
        assert_eq!(a.first().unwrap().date, NaiveDate::from_ymd_opt(2018, 1, 1).unwrap());
        assert_eq!(a.last().unwrap().date, NaiveDate::from_ymd_opt(2019, 12, 31).unwrap());
    }
}
