use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use lesionlab_ffi::*;

fn last_error() -> String {
    let p = lesionlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn weights_and_metrics() {
    let mut w = [0.0f64; 2];
    assert_eq!(unsafe { lesionlab_class_weights(91, 9, w.as_mut_ptr()) }, LesionlabStatus::Ok);
    assert!((w[0] - 0.09).abs() < 1e-12 && (w[1] - 0.91).abs() < 1e-12);
    assert_eq!(
        unsafe { lesionlab_class_weights(0, 9, w.as_mut_ptr()) },
        LesionlabStatus::InvalidInput
    );
    assert!(!last_error().is_empty());

    let mut r = LesionlabRates::default();
    assert_eq!(
        unsafe { lesionlab_metrics_from_confusion(1, 2, 7, 0, &mut r) },
        LesionlabStatus::Ok
    );
    assert_eq!(r.sensitivity, 100.0);
    assert_eq!(format!("{:.2}", r.specificity), "77.78");
    assert_eq!(
        unsafe { lesionlab_metrics_from_confusion(0, 0, 0, 0, &mut r) },
        LesionlabStatus::InvalidInput
    );
}

#[test]
fn null_arguments_are_rejected() {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { lesionlab_manifest_load(ptr::null(), &mut m) },
        LesionlabStatus::BadArgument
    );
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { lesionlab_split_fold_count(ptr::null()) }, 0);
    unsafe {
        lesionlab_manifest_free(ptr::null_mut());
        lesionlab_string_free(ptr::null_mut());
    }
}

#[test]
fn phantom_manifest_and_split_handles() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let params = CString::new("images_per_lesion = 1\nimage_height_px = 60\nimage_width_px = 80\nepithelium_depth_px = [10, 20]\n").unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { lesionlab_phantom_generate(params.as_ptr(), 20, 3, out_dir.as_ptr(), &mut m) };
    assert_eq!(status, LesionlabStatus::Ok, "{}", last_error());

    let (mut b, mut i) = (0usize, 0usize);
    assert_eq!(unsafe { lesionlab_manifest_counts(m, &mut b, &mut i) }, LesionlabStatus::Ok);
    assert_eq!((b, i), (20, 3));

    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { lesionlab_split_make(m, 5, 1, 0, &mut plan) }, LesionlabStatus::Ok);
    assert_eq!(unsafe { lesionlab_split_fold_count(plan) }, 2);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { lesionlab_split_to_json(plan, &mut json) }, LesionlabStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"folds\""));
    unsafe {
        lesionlab_string_free(json);
        lesionlab_split_free(plan);
    }

    // one rare lesion cannot be split
    let mut one = ptr::null_mut();
    let dir2 = tempfile::tempdir().unwrap();
    let out2 = CString::new(dir2.path().to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { lesionlab_phantom_generate(params.as_ptr(), 4, 1, out2.as_ptr(), &mut one) },
        LesionlabStatus::Ok
    );
    let mut p2 = ptr::null_mut();
    assert_eq!(unsafe { lesionlab_split_make(one, 2, 1, 0, &mut p2) }, LesionlabStatus::Precondition);
    assert!(p2.is_null());
    unsafe {
        lesionlab_manifest_free(one);
        lesionlab_manifest_free(m);
    }
}

#[test]
fn config_digest_ignores_output_dir() {
    let digest = |text: &str| {
        let t = CString::new(text).unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(unsafe { lesionlab_config_parse(t.as_ptr(), &mut c) }, LesionlabStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { lesionlab_config_digest(c, &mut s) }, LesionlabStatus::Ok);
        let d = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
        unsafe {
            lesionlab_string_free(s);
            lesionlab_config_free(c);
        }
        d
    };
    assert_eq!(digest("output_dir = \"a\"\n"), digest("output_dir = \"b\"\n"));
    assert_ne!(digest("global_seed = 1\n"), digest("global_seed = 2\n"));

    let bad = CString::new("[train]\nbatch_size = 0\n").unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { lesionlab_config_parse(bad.as_ptr(), &mut c) }, LesionlabStatus::InvalidInput);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lesionlab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "lesionlab_run",
        "lesionlab_report_mean",
        "lesionlab_last_error",
        "LESIONLAB_STATUS_PRECONDITION = 5",
        "typedef struct LesionlabManifest LesionlabManifest;",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"lesionlab.h\"\nint main(void) { LesionlabRates r; return lesionlab_metrics_from_confusion(1, 0, 1, 0, &r); }\n",
    )
    .unwrap();
    match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile check, no compiler: {e}"),
    }
}
