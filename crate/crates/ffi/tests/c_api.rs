use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cutlocus_ffi::*;

const PI: f64 = std::f64::consts::PI;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cl_last_error_message()) }.to_string_lossy().into_owned()
}

fn sphere() -> *mut ClManifold {
    let mut m = ptr::null_mut();
    let axes = [1.0, 1.0, 1.0];
    assert_eq!(unsafe { cl_ellipsoid_new(axes.as_ptr(), 3, &mut m) }, ClStatus::Ok);
    m
}

#[test]
fn sphere_geodesic_reaches_antipode() {
    let m = sphere();
    let (q0, p0) = ([1.0, 0.0, 0.0], [0.0, PI, 0.0]);
    let mut t = ptr::null_mut();
    let st = unsafe { cl_integrate(m, ClScheme::Del as i32, q0.as_ptr(), p0.as_ptr(), 3, 100, ptr::null(), &mut t) };
    assert_eq!(st, ClStatus::Ok);
    unsafe {
        assert_eq!(cl_trajectory_steps(t), 100);
        let len = cl_trajectory_positions_len(t);
        assert_eq!(len, 303);
        let mut qs = vec![0.0; len];
        assert_eq!(cl_trajectory_positions(t, qs.as_mut_ptr(), len), ClStatus::Ok);
        let end = &qs[300..];
        let err = ((end[0] + 1.0).powi(2) + end[1].powi(2) + end[2].powi(2)).sqrt();
        assert!(err <= 25.0 / 1e4, "{err}");
        assert_eq!(cl_trajectory_multipliers_len(t), 99);
        let mut short = [0.0; 3];
        assert_eq!(cl_trajectory_positions(t, short.as_mut_ptr(), 3), ClStatus::BufferTooSmall);
        let mut length = 0.0;
        assert_eq!(cl_trajectory_length(t, &mut length), ClStatus::Ok);
        assert!((length - PI).abs() < 1e-3);
        cl_trajectory_free(t);
        cl_manifold_free(m);
    }
}

#[test]
fn errors_are_reported_with_messages() {
    let mut m = ptr::null_mut();
    let bad = [1.0, -1.0, 1.0];
    assert_eq!(unsafe { cl_ellipsoid_new(bad.as_ptr(), 3, &mut m) }, ClStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { cl_ellipsoid_new(ptr::null(), 3, &mut m) }, ClStatus::NullPointer);
    assert!(last_error().contains("null"));

    let m = sphere();
    let q0 = [1.0, 0.0, 0.0];
    let p0 = [0.0, 1.0, 0.0];
    let mut t = ptr::null_mut();
    let st = unsafe { cl_integrate(m, 7, q0.as_ptr(), p0.as_ptr(), 3, 10, ptr::null(), &mut t) };
    assert_eq!(st, ClStatus::InvalidArgument);
    assert!(last_error().contains("scheme"));
    let off = [2.0, 0.0, 0.0];
    let st = unsafe { cl_integrate(m, 0, off.as_ptr(), p0.as_ptr(), 3, 10, ptr::null(), &mut t) };
    assert_eq!(st, ClStatus::ConstraintViolated);
    unsafe { cl_manifold_free(m) };
    // null handles are ignored by the free functions
    unsafe {
        cl_manifold_free(ptr::null_mut());
        cl_trajectory_free(ptr::null_mut());
        cl_locus_free(ptr::null_mut());
        cl_string_free(ptr::null_mut());
    }
}

#[test]
fn endpoint_map_classification_and_locus() {
    let m = sphere();
    let base = [1.0, 0.0, 0.0];
    let mut map = ptr::null_mut();
    let st = unsafe { cl_endpoint_map_new(m, 0, base.as_ptr(), 3, 20, ptr::null(), &mut map) };
    assert_eq!(st, ClStatus::Ok);
    unsafe {
        assert_eq!(cl_endpoint_map_chart_dim(map), 2);
        let mut det = 0.0;
        assert_eq!(cl_endpoint_map_det(map, [1e-3, 0.0].as_ptr(), 2, &mut det), ClStatus::Ok);
        assert!((det - 1.0).abs() < 1e-5);
        let mut q = [0.0; 3];
        assert_eq!(cl_endpoint_map_eval(map, [0.0, 0.0].as_ptr(), 2, q.as_mut_ptr(), 3), ClStatus::Ok);
        assert!((q[0] - 1.0).abs() < 1e-14);
        let mut c = ClClassification { label: -1, det: 0.0, kernel_cosine: 0.0, kernel_derivative: 0.0, sigma_min: 0.0, sigma_second: 0.0 };
        assert_eq!(cl_classify(map, [0.5, 0.0].as_ptr(), 2, 0.05, &mut c), ClStatus::Ok);
        assert!(c.sigma_min > 0.0 && c.sigma_second >= c.sigma_min);

        let (lo, hi, res) = ([-3.6, -3.6], [3.6, 3.6], [25usize, 25]);
        let mut l = ptr::null_mut();
        assert_eq!(cl_locus_compute(map, lo.as_ptr(), hi.as_ptr(), res.as_ptr(), 2, &mut l), ClStatus::Ok);
        let count = cl_locus_vertex_count(l);
        assert!(count > 0);
        let mut images = vec![0.0; 3 * count];
        assert_eq!(cl_locus_images(l, images.as_mut_ptr(), images.len()), ClStatus::Ok);
        for x in images.chunks(3) {
            assert!((x[0] + 1.0).abs() < 0.05, "{x:?}");
        }
        assert_eq!(cl_locus_cusp_count(l), 0);
        let mut s = ptr::null_mut();
        assert_eq!(cl_locus_to_json(l, &mut s), ClStatus::Ok);
        let json = CStr::from_ptr(s).to_str().unwrap();
        assert!(json.starts_with('{') && json.contains("\"critical_set\""));
        cl_string_free(s);
        cl_locus_free(l);
        cl_endpoint_map_free(map);
        cl_manifold_free(m);
    }
}

#[test]
fn two_geodesics_between_sphere_points() {
    let m = sphere();
    let (a, b) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
    let mut count = 0usize;
    let mut lengths = [0.0; 4];
    let st = unsafe {
        cl_count_solutions(m, a.as_ptr(), b.as_ptr(), 3, 40, ptr::null(), 2.0 * PI, 16, 4, &mut count, lengths.as_mut_ptr(), 4)
    };
    assert_eq!(st, ClStatus::Ok, "{}", last_error());
    assert_eq!(count, 2);
    assert!((lengths[0] - PI / 2.0).abs() < 5e-3);
    assert!((lengths[1] - 1.5 * PI).abs() < 2e-2);
    unsafe { cl_manifold_free(m) };
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(cl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let c = cl_solver_config_default();
    assert_eq!(c.tol, 1e-12);
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "cutlocus.h"

int main(void) {
    double axes[3] = {1.0, 0.8, 0.6};
    ClManifold *m = NULL;
    if (cl_ellipsoid_new(axes, 3, &m) != CL_STATUS_OK) return 1;
    double q0[3] = {1.0, 0.0, 0.0}, p0[3] = {0.0, 0.5, 0.3};
    ClSolverConfig cfg = cl_solver_config_default();
    ClTrajectory *t = NULL;
    if (cl_integrate(m, CL_SCHEME_DEL, q0, p0, 3, 50, &cfg, &t) != CL_STATUS_OK) return 2;
    double len = 0.0;
    cl_trajectory_length(t, &len);
    printf("%zu %.6f\n", cl_trajectory_steps(t), len);
    if (cl_ellipsoid_new(NULL, 3, &m) != CL_STATUS_NULL_POINTER) return 3;
    cl_trajectory_free(t);
    cl_manifold_free(m);
    return 0;
}
"#;

fn include_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_compiles_as_c() {
    let dir = std::env::temp_dir().join(format!("cutlocus-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-c"])
        .arg("-I")
        .arg(include_dir())
        .arg(&src)
        .arg("-o")
        .arg(dir.join("smoke.o"))
        .status()
        .expect("C compiler available");
    assert!(status.success());

    // `cargo test` builds only the rlib; build the static library into a
    // private target directory and link the program against it.
    let target = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/c-link");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "-p", "cutlocus-ffi", "--lib", "--target-dir"])
        .arg(&target)
        .status()
        .unwrap();
    assert!(status.success());
    let lib = target.join("debug/libcutlocus_ffi.a");
    let bin = dir.join("smoke");
    let status = Command::new("cc")
        .arg(dir.join("smoke.o"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("50 "), "{text}");
}
