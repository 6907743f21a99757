use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use dcelanm_ffi::*;

const SMALL: &str = "encoder_filters = 4,4,8,8,8
path_repeats = 1,1,1,1
patch = 2
mae_dim = 16
mae_dec_dim = 8
mae_enc_depth = 1
mae_dec_depth = 1
mae_heads = 2
input_side = 32
";

fn last_error() -> String {
    unsafe { CStr::from_ptr(dcm_last_error()) }.to_string_lossy().into_owned()
}

fn small_net() -> *mut DcmNetwork {
    let cfg = CString::new(SMALL).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { dcm_network_create(cfg.as_ptr(), &mut net) }, DcmStatus::Ok);
    assert!(!net.is_null());
    net
}

#[test]
fn create_predict_save_load() {
    let net = small_net();
    let mut n = 0u64;
    let mut side = 0usize;
    unsafe {
        assert_eq!(dcm_network_param_count(net, &mut n), DcmStatus::Ok);
        assert_eq!(dcm_network_input_side(net, &mut side), DcmStatus::Ok);
    }
    assert!(n > 0);
    assert_eq!(side, 32);

    let (h, w) = (20, 27);
    let img: Vec<f32> = (0..3 * h * w).map(|i| (i % 17) as f32 / 16.0).collect();
    let mut mask = vec![7u8; h * w];
    assert_eq!(unsafe { dcm_predict(net, img.as_ptr(), h, w, mask.as_mut_ptr()) }, DcmStatus::Ok);
    assert!(mask.iter().all(|&m| m <= 1));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    let mut again = vec![9u8; h * w];
    unsafe {
        assert_eq!(dcm_network_save(net, path.as_ptr()), DcmStatus::Ok);
        assert_eq!(dcm_network_load(path.as_ptr(), &mut back), DcmStatus::Ok);
        assert_eq!(dcm_predict(back, img.as_ptr(), h, w, again.as_mut_ptr()), DcmStatus::Ok);
        dcm_network_free(back);
        dcm_network_free(net);
    }
    assert_eq!(mask, again);
}

#[test]
fn errors_map_to_status_codes() {
    let mut net = ptr::null_mut();
    let bad = CString::new("patch = seven").unwrap();
    assert_eq!(unsafe { dcm_network_create(bad.as_ptr(), &mut net) }, DcmStatus::Usage);
    assert!(!last_error().is_empty());
    assert!(net.is_null());

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { dcm_network_load(missing.as_ptr(), &mut net) }, DcmStatus::Checkpoint);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dcm_network_load(junk.as_ptr(), &mut net) }, DcmStatus::Checkpoint);

    assert_eq!(unsafe { dcm_network_load(ptr::null(), &mut net) }, DcmStatus::NullPointer);
    let mut n = 0u64;
    assert_eq!(unsafe { dcm_network_param_count(ptr::null(), &mut n) }, DcmStatus::NullPointer);

    let net = small_net();
    assert_eq!(last_error(), "");
    let img = vec![0.0f32; 3];
    let mut m = [0u8; 1];
    assert_eq!(unsafe { dcm_predict(net, img.as_ptr(), 0, 1, m.as_mut_ptr()) }, DcmStatus::Usage);
    unsafe { dcm_network_free(net) };
    unsafe { dcm_network_free(ptr::null_mut()) };
}

#[test]
fn metrics_match_hand_counts() {
    // sample 0: tp 2, fp 1, fn 1; sample 1: both empty
    let pred = [1u8, 1, 1, 0, 0, 0, 0, 0];
    let target = [1u8, 255, 0, 1, 0, 0, 0, 0];
    let mut m = DcmMetrics::default();
    assert_eq!(unsafe { dcm_metrics(pred.as_ptr(), target.as_ptr(), 2, 4, &mut m) }, DcmStatus::Ok);
    assert!((m.dice - (4.0 / 6.0 + 1.0) / 2.0).abs() < 1e-12);
    assert!((m.iou - (2.0 / 4.0 + 1.0) / 2.0).abs() < 1e-12);
    assert!((m.precision - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn tversky_matches_closed_form() {
    let p = [0.9f32, 0.2, 0.6, 0.1];
    let g = [1u8, 0, 1, 1];
    let (tp, fp, fn_) = (0.9f64 + 0.6 + 0.1, 0.2f64, 0.1f64 + 0.4 + 0.9);
    let want = 1.0 - (tp + 1.0) / (tp + 0.3 * fp + 0.7 * fn_ + 1.0);
    let mut got = 0.0;
    assert_eq!(
        unsafe { dcm_tversky_loss(p.as_ptr(), g.as_ptr(), 4, 0.3, 0.7, 1.0, &mut got) },
        DcmStatus::Ok
    );
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert_eq!(
        unsafe { dcm_tversky_loss(p.as_ptr(), g.as_ptr(), 4, -1.0, 0.7, 1.0, &mut got) },
        DcmStatus::Usage
    );
}

#[test]
fn version_is_cargo_version() {
    let v = unsafe { CStr::from_ptr(dcm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dcelanm.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\n\
             int use(void) {{\n\
               DcmNetwork *n = 0;\n\
               DcmMetrics m;\n\
               size_t side = 0;\n\
               if (dcm_network_create(0, &n) != DCM_STATUS_OK) return 1;\n\
               dcm_network_input_side(n, &side);\n\
               dcm_network_free(n);\n\
               (void)m; return (int)side;\n\
             }}\n"
        ),
    )
    .unwrap();
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(cc).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&src).output() else {
            eprintln!("{cc} not available, skipping");
            continue;
        };
        assert!(out.status.success(), "{cc}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
