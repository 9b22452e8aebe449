use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use layered_control_ffi::*;

fn scalar_problem() -> *mut LcProblem {
    let one = [1.0];
    let mut p = ptr::null_mut();
    let s = unsafe { lc_problem_new(one.as_ptr(), one.as_ptr(), 1, 1, 1, one.as_ptr(), one.as_ptr(), 2.0, &mut p) };
    assert_eq!(s, LcStatus::Ok);
    p
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { lc_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(255)).map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn scalar_plan_matches_closed_form() {
    let p = scalar_problem();
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { lc_oracle_new(p, &mut o) }, LcStatus::Ok);
    assert_eq!(unsafe { lc_problem_reference_len(p) }, 2);

    let nu = [0.0, 0.0];
    let xi = [1.0];
    let mut r = [0.0; 2];
    let mut res = [0.0; 2];
    let s = unsafe { lc_oracle_plan_and_track(o, nu.as_ptr(), 2, xi.as_ptr(), 1, r.as_mut_ptr(), res.as_mut_ptr(), 2) };
    assert_eq!(s, LcStatus::Ok);
    assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 1.0 / 3.0).abs() < 1e-12, "{r:?}");

    // Planning with the optimal dual closes the residual.
    let mut theta = [0.0; 2];
    assert_eq!(unsafe { lc_oracle_theta_star(o, theta.as_mut_ptr(), 2) }, LcStatus::Ok);
    let s = unsafe { lc_oracle_plan_and_track(o, theta.as_ptr(), 2, xi.as_ptr(), 1, r.as_mut_ptr(), res.as_mut_ptr(), 2) };
    assert_eq!(s, LcStatus::Ok);
    assert!(res.iter().all(|v| v.abs() < 1e-10), "{res:?}");

    unsafe {
        lc_oracle_free(o);
        lc_problem_free(p);
    }
}

#[test]
fn errors_are_reported() {
    let p = scalar_problem();
    let mut small = [0.0; 1];
    let s = unsafe { lc_exact_dual_trace(p, 0.5, 4, 3, 0, small.as_mut_ptr(), 1) };
    assert_eq!(s, LcStatus::BufferTooSmall);
    assert!(last_error().contains("needs 4"));

    let xi = [1.0, 2.0];
    let mut cost = 0.0;
    let s = unsafe { lc_problem_optimal_cost(p, xi.as_ptr(), 2, &mut cost) };
    assert_eq!(s, LcStatus::DimensionMismatch);

    let s = unsafe { lc_oracle_new(ptr::null(), &mut ptr::null_mut()) };
    assert_eq!(s, LcStatus::NullPointer);

    let cmd = CString::new("fly").unwrap();
    assert_eq!(unsafe { lc_run_command(cmd.as_ptr(), ptr::null()) }, LcStatus::InvalidArgument);
    let cmd = CString::new("lqr-table").unwrap();
    let bad = CString::new(r#"{"unknown": 1}"#).unwrap();
    assert_eq!(unsafe { lc_run_command(cmd.as_ptr(), bad.as_ptr()) }, LcStatus::InvalidArgument);
    unsafe { lc_problem_free(p) };
}

#[test]
fn dual_trace_decays() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { lc_problem_sample(3, 2, 2, 1.0, 10, 0.01, 2.0, &mut p) }, LcStatus::Ok);
    let mut trace = vec![0.0; 201];
    assert_eq!(unsafe { lc_exact_dual_trace(p, 0.0, 8, 200, 0, trace.as_mut_ptr(), trace.len()) }, LcStatus::Ok);
    assert!(trace[200] < 1e-3 * trace[0], "{} vs {}", trace[200], trace[0]);

    let xi = [1.0, -1.0];
    let mut free = 0.0;
    let mut bounded = 0.0;
    assert_eq!(unsafe { lc_problem_optimal_cost(p, xi.as_ptr(), 2, &mut free) }, LcStatus::Ok);
    assert_eq!(unsafe { lc_problem_set_lower_bound(p, -0.05) }, LcStatus::Ok);
    assert_eq!(unsafe { lc_problem_optimal_cost(p, xi.as_ptr(), 2, &mut bounded) }, LcStatus::Ok);
    assert!(bounded >= free - 1e-9);
    unsafe { lc_problem_free(p) };
}

#[test]
fn verify_theory_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let json = format!(r#"{{"n_systems": 1, "T": 6, "output_path": {:?}}}"#, dir.path().to_str().unwrap());
    let cmd = CString::new("verify-theory").unwrap();
    let cfg = CString::new(json).unwrap();
    assert_eq!(unsafe { lc_run_command(cmd.as_ptr(), cfg.as_ptr()) }, LcStatus::Ok, "{}", last_error());
    assert!(dir.path().join("theory_identities.csv").exists());
    assert!(dir.path().join("theta_trace.csv").exists());
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/layered_control.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["lc_problem_new", "lc_oracle_plan_and_track", "lc_run_command", "LC_STATUS_PANIC"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    match Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).status() {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; syntax check skipped"),
    }
}
