use std::ffi::{CStr, CString};
use std::ptr;

use claimbench_ffi::*;

const CLAIM: &str = "ICD-10-CM Diagnoses:\nK80.20, I10\n\nCPT Codes with Modifiers:\n\nProvider Name: Avery Stone, MD\nCPT Code 1: 47562 | Modifiers: 59 | Description: Laparoscopic cholecystectomy";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cb_last_error()) }.to_str().unwrap().to_string()
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(cb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn parse_claim_json_round_trip() {
    let mut out = ptr::null_mut();
    let status = unsafe { cb_parse_claim_json(c(CLAIM).as_ptr(), &mut out) };
    assert_eq!(status, CbStatus::Ok);
    let json: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(out) }.to_str().unwrap()).unwrap();
    unsafe { cb_string_free(out) };
    assert_eq!(json["icd10"], serde_json::json!(["I10", "K80.20"]));
    assert_eq!(json["cpt"], serde_json::json!(["47562"]));
    assert_eq!(json["modifier_pairs"], serde_json::json!([["47562", "59"]]));
}

#[test]
fn null_and_bad_utf8_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cb_parse_claim_json(ptr::null(), &mut out) }, CbStatus::NullPointer);
    assert!(last_error().contains("text"));
    let bad = [0xffu8, 0xfe, 0];
    let status = unsafe { cb_parse_claim_json(bad.as_ptr().cast(), &mut out) };
    assert_eq!(status, CbStatus::InvalidUtf8);
    assert!(out.is_null());
    assert_eq!(unsafe { cb_parse_claim_json(c("x").as_ptr(), ptr::null_mut()) }, CbStatus::NullPointer);
    unsafe { cb_string_free(ptr::null_mut()) };
}

#[test]
fn score_case_partial_overlap() {
    let generated = "ICD-10-CM Diagnoses:\nK80.20, E11.9\n\nCPT Codes with Modifiers:\nCPT Code 1: 47562 | Modifiers: 59\n";
    let mut s = CbCaseScore::default();
    let status = unsafe { cb_score_case(c(generated).as_ptr(), c(CLAIM).as_ptr(), &mut s) };
    assert_eq!(status, CbStatus::Ok, "{}", last_error());
    assert_eq!((s.icd10.precision, s.icd10.recall, s.icd10.full_match), (0.5, 0.5, false));
    assert_eq!((s.cpt.precision, s.cpt.recall, s.cpt.full_match), (1.0, 1.0, true));
    assert!(s.modifier.full_match);
    assert_eq!(last_error(), "");
}

#[test]
fn structure_score_identity_and_hand_value() {
    let mut s = CbStructureScore::default();
    assert_eq!(unsafe { cb_structure_score(c(CLAIM).as_ptr(), c(CLAIM).as_ptr(), &mut s) }, CbStatus::Ok);
    assert_eq!((s.rouge_l, s.rouge_l_sum), (100.0, 100.0));
    assert_eq!(unsafe { cb_structure_score(c("the cat sat").as_ptr(), c("the cat").as_ptr(), &mut s) }, CbStatus::Ok);
    assert!((s.rouge_l - 80.0).abs() < 1e-9);
}

#[test]
fn registry_handle_lifecycle() {
    let dir = c(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/registries"));
    let mut reg = ptr::null_mut();
    assert_eq!(unsafe { cb_registry_load_dir(dir.as_ptr(), &mut reg) }, CbStatus::Ok, "{}", last_error());
    let generated = c("ICD-10-CM Diagnoses:\nE11.9, Z99.89\n\nCPT Codes with Modifiers:\nCPT Code 1: 99999\n");
    let mut v = CbCodeValidity::default();
    assert_eq!(unsafe { cb_registry_classify(reg, 2019, generated.as_ptr(), &mut v) }, CbStatus::Ok, "{}", last_error());
    assert_eq!(v.icd10.valid_count + v.icd10.fabricated_count, 2);
    assert!(v.icd10.valid_count >= 1);
    assert_eq!((v.cpt.valid_count, v.cpt.fabricated_count), (0, 1));
    assert_eq!(unsafe { cb_registry_classify(reg, 1990, generated.as_ptr(), &mut v) }, CbStatus::InvalidArgument);
    assert!(last_error().contains("1990"));
    unsafe { cb_registry_free(reg) };

    let missing = c("/nonexistent/registry/dir");
    assert_ne!(unsafe { cb_registry_load_dir(missing.as_ptr(), &mut reg) }, CbStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn index_search_matches_brute_force() {
    let dim = 3;
    let data: Vec<f32> = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 5.0, 5.0, 5.0];
    let mut idx = ptr::null_mut();
    assert_eq!(unsafe { cb_index_build(data.as_ptr(), 4, dim, &mut idx) }, CbStatus::Ok);
    assert_eq!(unsafe { (cb_index_len(idx), cb_index_dim(idx)) }, (4, 3));
    let q = [0.9f32, 0.1, 0.0];
    let (mut rows, mut dists) = ([0usize; 2], [0f64; 2]);
    let status = unsafe { cb_index_search(idx, q.as_ptr(), dim, 2, rows.as_mut_ptr(), dists.as_mut_ptr()) };
    assert_eq!(status, CbStatus::Ok);
    assert_eq!(rows, [1, 0]);
    let expected = (0.1f32 as f64).powi(2) * 2.0;
    assert!((dists[0] - expected).abs() < 1e-6);
    let status = unsafe { cb_index_search(idx, q.as_ptr(), dim, 5, rows.as_mut_ptr(), dists.as_mut_ptr()) };
    assert_eq!(status, CbStatus::InvalidArgument);
    let status = unsafe { cb_index_search(idx, q.as_ptr(), 2, 1, rows.as_mut_ptr(), dists.as_mut_ptr()) };
    assert_eq!(status, CbStatus::InvalidArgument);
    assert!(unsafe { cb_index_claim(idx, 9) }.is_null());
    unsafe { cb_index_free(idx) };
    assert_eq!(unsafe { cb_index_len(ptr::null()) }, 0);

    let bad = [f32::NAN, 0.0, 0.0];
    assert_eq!(unsafe { cb_index_build(bad.as_ptr(), 1, 3, &mut idx) }, CbStatus::InvalidArgument);
    assert_eq!(unsafe { cb_index_build(data.as_ptr(), 0, 3, &mut idx) }, CbStatus::InvalidArgument);
}

#[test]
fn errors_are_thread_local() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cb_parse_claim_json(ptr::null(), &mut out) }, CbStatus::NullPointer);
    let other = std::thread::spawn(last_error).join().unwrap();
    assert_eq!(other, "");
    assert!(!last_error().is_empty());
}
