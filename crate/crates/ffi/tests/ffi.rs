use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use recap_core::labeling::{AnnotationRecord, Choice};
use recap_core::snippet::write_instances;
use recap_core::synth;
use recap_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe { recap_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn planted_file(dir: &std::path::Path, n: usize) -> CString {
    let p = dir.join("inst.jsonl");
    write_instances(&p, &synth::planted_benchmark(&synth::PlantedConfig { targets: n, ..Default::default() }, 1)).unwrap();
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn instance_set_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let path = planted_file(d.path(), 4);
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { recap_instances_load(path.as_ptr(), &mut set) }, RecapStatus::Ok);
    assert_eq!(unsafe { recap_instances_len(set) }, 4);

    let mut out = [0usize; 60];
    let mut len = 0;
    assert_eq!(unsafe { recap_closest_k(set, 0, 5, out.as_mut_ptr(), out.len(), &mut len) }, RecapStatus::Ok);
    assert_eq!(&out[..len], &[0, 1, 2, 3, 4]);

    assert_eq!(unsafe { recap_instance_gold(set, 2, out.as_mut_ptr(), out.len(), &mut len) }, RecapStatus::Ok);
    assert!(len > 0);
    let gold = out[..len].to_vec();

    let mut emb = ptr::null_mut();
    assert_eq!(unsafe { recap_hashbag_new(256, &mut emb) }, RecapStatus::Ok);
    let mut sel = [0usize; 5];
    assert_eq!(unsafe { recap_rank_hashbag(set, 2, emb, sel.as_mut_ptr(), 5, &mut len) }, RecapStatus::Ok);
    assert_eq!(len, 5);
    let (mut r, mut p) = (0.0, 0.0);
    assert_eq!(unsafe { recap_at5(sel.as_ptr(), len, gold.as_ptr(), gold.len(), &mut r, &mut p) }, RecapStatus::Ok);
    assert!((0.0..=100.0).contains(&r) && (0.0..=100.0).contains(&p));

    assert_eq!(unsafe { recap_closest_k(set, 9, 5, out.as_mut_ptr(), 60, &mut len) }, RecapStatus::OutOfRange);
    assert!(last_error().contains("index 9"));
    unsafe {
        recap_hashbag_free(emb);
        recap_instances_free(set);
    }
}

#[test]
fn load_errors_map_to_codes() {
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { recap_instances_load(ptr::null(), &mut set) }, RecapStatus::NullPointer);
    let missing = CString::new("/nonexistent/inst.jsonl").unwrap();
    assert_eq!(unsafe { recap_instances_load(missing.as_ptr(), &mut set) }, RecapStatus::Io);
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json}\n").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { recap_instances_load(bad.as_ptr(), &mut set) }, RecapStatus::Parse);
    assert!(!last_error().is_empty());
}

#[test]
fn select_policies_and_buffer_size() {
    let mut scores = [f64::NEG_INFINITY; 60];
    for (k, s) in scores.iter_mut().enumerate().take(10) {
        *s = k as f64 / 10.0;
    }
    let mut out = [0usize; 60];
    let mut len = 0;
    assert_eq!(unsafe { recap_select(scores.as_ptr(), 60, RecapPolicy::Top5, 0.0, out.as_mut_ptr(), 60, &mut len) }, RecapStatus::Ok);
    assert_eq!(&out[..len], &[9, 8, 7, 6, 5]);
    assert_eq!(unsafe { recap_select(scores.as_ptr(), 60, RecapPolicy::FreeThreshold, 0.65, out.as_mut_ptr(), 60, &mut len) }, RecapStatus::Ok);
    assert_eq!(&out[..len], &[9, 8, 7]);
    assert_eq!(unsafe { recap_select(scores.as_ptr(), 60, RecapPolicy::Top5, 0.0, out.as_mut_ptr(), 2, &mut len) }, RecapStatus::BufferTooSmall);
    assert_eq!(len, 5);
    scores[3] = f64::NAN;
    assert_eq!(unsafe { recap_select(scores.as_ptr(), 60, RecapPolicy::Top5, 0.0, out.as_mut_ptr(), 60, &mut len) }, RecapStatus::InvalidArgument);
}

#[test]
fn scalar_functions() {
    assert!((recap_f1(43.65, 54.00) - 48.28).abs() < 0.05);
    assert_eq!(recap_f1(0.0, 0.0), 0.0);
    let (mut w0, mut w1) = (0.0, 0.0);
    assert_eq!(unsafe { recap_class_weights(54.4, 5.6, 1.0, &mut w0, &mut w1) }, RecapStatus::Ok);
    assert!((w0 - 0.1867).abs() < 1e-3 && (w1 - 1.8133).abs() < 1e-3);
    assert_eq!(unsafe { recap_class_weights(0.0, 5.6, 1.0, &mut w0, &mut w1) }, RecapStatus::InvalidArgument);
    assert_eq!(recap_overlap_rate(0, 9, 5, 14), 0.5);
    assert_eq!(recap_overlap_rate(0, 4, 5, 9), 0.0);
    let v = unsafe { CStr::from_ptr(recap_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn kappa_from_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("ann.jsonl");
    let mut lines = String::new();
    for k in 0..60 {
        for a in 0..3 {
            let choice = if k % 7 == 0 { Choice::DefinitelyIs } else { Choice::IsNot };
            let r = AnnotationRecord { target_uid: "t".into(), cand_index: k, annotator_id: format!("a{a}"), choice };
            lines.push_str(&serde_json::to_string(&r).unwrap());
            lines.push('\n');
        }
    }
    std::fs::write(&p, lines).unwrap();
    let c = CString::new(p.to_str().unwrap()).unwrap();
    let mut kappa = 0.0;
    assert_eq!(unsafe { recap_fleiss_kappa_file(c.as_ptr(), &mut kappa) }, RecapStatus::Ok);
    assert_eq!(kappa, 1.0);
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("recap.h")).unwrap();
    for f in ["recap_last_error_message", "recap_instances_load", "recap_select", "recap_fleiss_kappa_file", "recap_class_weights"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let lib = target_dir();
    if Command::new("cc").arg("--version").output().is_err() || !lib.join("librecap_ffi.so").exists() {
        eprintln!("skipping C link check: no cc or no cdylib");
        return;
    }
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "recap.h"
int main(void) {
    double w0 = 0, w1 = 0;
    if (recap_class_weights(1.0, 1.0, 1.0, &w0, &w1) != RECAP_STATUS_OK) return 1;
    if (w0 != 1.0 || w1 != 1.0) return 2;
    RecapInstanceSet *set = NULL;
    if (recap_instances_load("/nonexistent", &set) != RECAP_STATUS_IO) return 3;
    char buf[128];
    if (recap_last_error_message(buf, sizeof buf) == 0) return 4;
    printf("%s ok\n", recap_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = d.path().join("smoke");
    let st = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg("-L")
        .arg(&lib)
        .arg("-lrecap_ffi")
        .arg(format!("-Wl,-rpath,{}", lib.display()))
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke exited {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).ends_with("ok\n"));
}
