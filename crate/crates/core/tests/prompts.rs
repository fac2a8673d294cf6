use claimbench::claims::{CptLine, ProviderBillables};
use claimbench::prompt::{PromptError, PromptTemplateSet, PromptVariant, RagContext, SYSTEM_TEXT};
use claimbench::BillingClaim;

const NOTE: &str = "Laparoscopic cholecystectomy performed without complication.";

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn claim() -> BillingClaim {
    BillingClaim {
        icd10: ["K80.20".parse().unwrap(), "I10".parse().unwrap()].into(),
        providers: vec![ProviderBillables {
            provider_name: "Avery Stone, MD".into(),
            lines: vec![CptLine::new(
                "47562".parse().unwrap(),
                vec!["59".parse().unwrap(), "XS".parse().unwrap()],
                "Laparoscopic cholecystectomy",
            )],
        }],
    }
}

fn examples() -> RagContext {
    RagContext { examples: vec!["EXAMPLE ONE".into(), "EXAMPLE TWO".into()] }
}

fn all_variants(t: &PromptTemplateSet, note: &str) -> Vec<String> {
    vec![
        t.build_training_prompt(note, &claim()),
        t.build_inference_prompt(note, PromptVariant::Finetuned, None).unwrap(),
        t.build_inference_prompt(note, PromptVariant::Rag, Some(&examples())).unwrap(),
        t.build_inference_prompt(note, PromptVariant::Base, None).unwrap(),
    ]
}

#[test]
fn golden_training_prompt() {
    let t = PromptTemplateSet::default();
    assert_eq!(t.build_training_prompt(NOTE, &claim()), golden("training.txt"));
}

#[test]
fn golden_finetuned_prompt() {
    let t = PromptTemplateSet::default();
    assert_eq!(
        t.build_inference_prompt(NOTE, PromptVariant::Finetuned, None).unwrap(),
        golden("finetuned.txt")
    );
}

#[test]
fn golden_rag_prompt() {
    let t = PromptTemplateSet::default();
    assert_eq!(
        t.build_inference_prompt(NOTE, PromptVariant::Rag, Some(&examples())).unwrap(),
        golden("rag.txt")
    );
}

#[test]
fn golden_base_prompt() {
    let t = PromptTemplateSet::default();
    assert_eq!(t.build_inference_prompt(NOTE, PromptVariant::Base, None).unwrap(), golden("base.txt"));
}

#[test]
fn every_variant_carries_the_same_system_message() {
    for p in all_variants(&PromptTemplateSet::default(), NOTE) {
        assert!(p.starts_with(&format!("<s><|system|>\n{SYSTEM_TEXT}<|end|>\n")));
        assert_eq!(p.matches(SYSTEM_TEXT).count(), 1);
    }
}

#[test]
fn changing_the_note_only_changes_the_note_span() {
    let t = PromptTemplateSet::default();
    let (a, b) = ("first note", "a rather different second note\nwith two lines");
    for (pa, pb) in all_variants(&t, a).into_iter().zip(all_variants(&t, b)) {
        let i = pa.find(a).unwrap();
        assert_eq!(pa[..i], pb[..i]);
        assert_eq!(pa[i + a.len()..], pb[i + b.len()..]);
    }
}

#[test]
fn short_retrieval_is_an_error() {
    let t = PromptTemplateSet::default();
    let one = RagContext { examples: vec!["only".into()] };
    assert!(matches!(
        t.build_inference_prompt(NOTE, PromptVariant::Rag, Some(&one)),
        Err(PromptError::MissingRagContext { expected: 2, got: 1 })
    ));
    assert!(t.build_inference_prompt(NOTE, PromptVariant::Rag, None).is_err());
}
