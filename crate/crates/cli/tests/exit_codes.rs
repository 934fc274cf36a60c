use std::process::Command;

use tempfile::TempDir;

fn acla(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_acla")).args(args).output().unwrap()
}

#[test]
fn make_data_then_eval_identity() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    let out = tmp.path().join("o");
    let d = data.to_str().unwrap();
    let r = acla(&["make-data", "--dir", d, "--count", "2", "--size", "16"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = acla(&["--out-dir", out.to_str().unwrap(), "eval", "--data-dir", d, "--input-dir", d]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("image,psnr,ssim"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn config_and_checkpoint_errors_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "backbone.depth = 3\n").unwrap();
    let r = acla(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("backbone.depth"));

    let ck = tmp.path().join("x.ckpt");
    std::fs::write(&ck, b"nope").unwrap();
    let img = tmp.path().join("i.ppm");
    let r = acla(&["visualize-keys", "--checkpoint", ck.to_str().unwrap(), "--image", img.to_str().unwrap(), "--row", "0", "--col", "0"]);
    assert_eq!(r.status.code(), Some(3));

    assert_eq!(acla(&["train", "--bogus"]).status.code(), Some(2));
}
