use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nndca::opf::fixtures;
use nndca::{LayerParams, ReluNetwork};
use nndca_ffi::*;

fn one_neuron_json() -> CString {
    let net = ReluNetwork::new(
        vec![LayerParams::from_rows(&[vec![2.0]], &[1.0]).unwrap()],
        LayerParams::from_rows(&[vec![1.0]], &[0.0]).unwrap(),
    )
    .unwrap();
    CString::new(net.to_json()).unwrap()
}

fn load_net() -> *mut NndcaNetwork {
    let json = one_neuron_json();
    let mut net = ptr::null_mut();
    assert_eq!(
        unsafe { nndca_network_from_json(json.as_ptr(), &mut net) },
        NndcaStatus::Ok
    );
    assert!(!net.is_null());
    net
}

fn last_error() -> String {
    let p = nndca_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn forward_through_handle() {
    let net = load_net();
    unsafe {
        assert_eq!(nndca_network_input_dim(net), 1);
        assert_eq!(nndca_network_output_dim(net), 1);
        let x = [0.5];
        let mut y = [0.0];
        assert_eq!(
            nndca_network_forward(net, x.as_ptr(), 1, y.as_mut_ptr(), 1),
            NndcaStatus::Ok
        );
        assert_eq!(y[0], 2.0);
        let mut wrong = [0.0; 2];
        assert_eq!(
            nndca_network_forward(net, x.as_ptr(), 1, wrong.as_mut_ptr(), 2),
            NndcaStatus::InvalidArgument
        );
        assert!(last_error().contains("output"));
        nndca_network_free(net);
    }
}

#[test]
fn null_handles_are_reported() {
    let mut y = [0.0];
    let st = unsafe { nndca_network_forward(ptr::null(), ptr::null(), 0, y.as_mut_ptr(), 1) };
    assert_eq!(st, NndcaStatus::NullPointer);
    assert!(last_error().contains("network"));
    unsafe {
        nndca_network_free(ptr::null_mut());
        nndca_grid_free(ptr::null_mut());
        assert_eq!(nndca_network_input_dim(ptr::null()), 0);
    }
}

#[test]
fn malformed_documents_are_invalid_arguments() {
    let bad = CString::new("{\"nope\": 1}").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(
        unsafe { nndca_network_from_json(bad.as_ptr(), &mut net) },
        NndcaStatus::InvalidArgument
    );
    assert!(net.is_null());
    let missing = CString::new("/nonexistent/net.json").unwrap();
    assert_eq!(
        unsafe { nndca_network_load(missing.as_ptr(), &mut net) },
        NndcaStatus::Io
    );
}

#[test]
fn solve_certify_and_oracle() {
    let net = load_net();
    let (lo, hi) = ([-1.0], [1.0]);
    let dom = NndcaDomain {
        lower: lo.as_ptr(),
        upper: hi.as_ptr(),
        dim: 1,
        has_total: 0,
        total: 0.0,
    };
    let opts = nndca_dca_options_default();
    let mut d = [f64::NAN];
    let mut res = NndcaSolveResult {
        objective: f64::NAN,
        penalty_residual: f64::NAN,
        iterations: 0,
        rho: 0.0,
        status: NndcaDcaStatus::SubproblemFailure,
    };
    unsafe {
        assert_eq!(
            nndca_dca_solve(net, &dom, &opts, d.as_mut_ptr(), 1, &mut res),
            NndcaStatus::Ok
        );
        assert_eq!(res.status, NndcaDcaStatus::ConvergedComplementary);
        assert!(res.objective.abs() < 1e-9);
        assert!(d[0] <= -0.5 + 1e-9);

        let (mut rho_bar, mut rho_star) = (f64::NAN, f64::NAN);
        assert_eq!(
            nndca_certify(net, &dom, &opts, &mut rho_bar, &mut rho_star),
            NndcaStatus::Ok
        );
        assert!(rho_bar >= 0.0 && rho_star > 0.0);

        let mut obj = f64::NAN;
        assert_eq!(
            nndca_oracle(net, &dom, 16, d.as_mut_ptr(), 1, &mut obj),
            NndcaStatus::Ok
        );
        assert!(obj.abs() < 1e-9);
        assert_eq!(
            nndca_oracle(net, &dom, 0, d.as_mut_ptr(), 1, &mut obj),
            NndcaStatus::SizeCap
        );

        let infeasible = NndcaDomain {
            has_total: 1,
            total: 5.0,
            ..dom
        };
        assert_eq!(
            nndca_dca_solve(net, &infeasible, &opts, d.as_mut_ptr(), 1, &mut res),
            NndcaStatus::Infeasible
        );
        nndca_network_free(net);
    }
}

#[test]
fn opf_prices_through_handle() {
    let json = CString::new(fixtures::two_bus().to_json()).unwrap();
    let mut grid = ptr::null_mut();
    unsafe {
        assert_eq!(
            nndca_grid_from_json(json.as_ptr(), &mut grid),
            NndcaStatus::Ok
        );
        assert_eq!(nndca_grid_buses(grid), 2);
        assert_eq!(nndca_grid_data_centers(grid), 1);
        let dc = [10.0];
        let mut pi = [0.0; 2];
        let mut charge = 0.0;
        assert_eq!(
            nndca_opf_lmps(grid, dc.as_ptr(), 1, pi.as_mut_ptr(), 2, &mut charge),
            NndcaStatus::Ok
        );
        assert!((pi[0] - 15.0).abs() < 1e-6);
        assert!((charge - 10.0 * pi[1]).abs() < 1e-9);
        let huge = [1e6];
        assert_eq!(
            nndca_opf_lmps(grid, huge.as_ptr(), 1, pi.as_mut_ptr(), 2, &mut charge),
            NndcaStatus::Infeasible
        );
        nndca_grid_free(grid);
    }
}

/// The freshest `libnndca_ffi.a`: the one next to the test binary in
/// `<target>/<profile>/deps`, else the copy uplifted by `cargo build`.
fn static_lib() -> PathBuf {
    let deps = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let fresh = deps.join("libnndca_ffi.a");
    if fresh.exists() {
        fresh
    } else {
        deps.parent().unwrap().join("libnndca_ffi.a")
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/nndca.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "nndca_dca_solve",
        "nndca_certify",
        "nndca_oracle",
        "nndca_opf_lmps",
        "nndca_last_error",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let lib = static_lib();
    assert!(
        lib.exists(),
        "static library not found at {}",
        lib.display()
    );

    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler runs");
    assert!(status.success());

    let net = dir.path().join("net.json");
    std::fs::write(&net, one_neuron_json().to_bytes()).unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, fixtures::two_bus().to_json()).unwrap();
    let out = Command::new(&exe).arg(&net).arg(&grid).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
