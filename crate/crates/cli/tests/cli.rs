use std::path::Path;
use std::process::{Command, Output};

fn comer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("runs comer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn line<'a>(text: &'a str, name: &str) -> &'a str {
    let prefix = format!("{name}: ");
    text.lines()
        .find(|l| l.starts_with(&prefix))
        .unwrap_or_else(|| panic!("no `{name}` line in\n{text}"))
}

fn every_line_is_a_report_line(text: &str) {
    for l in text.lines() {
        let parts: Vec<_> = l.splitn(4, ": ").collect();
        assert_eq!(parts.len(), 4, "{l}");
        assert!(["PASS", "FAIL", "INFO"].contains(&parts[1]), "{l}");
    }
}

#[test]
fn shapes_toy_lists_levels() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["shapes"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    every_line_is_a_report_line(&out);
    assert_eq!(line(&out, "level_1/8"), "level_1/8: PASS: 16x8x8: =16x8x8");
    assert_eq!(line(&out, "level_1/16"), "level_1/16: PASS: 16x4x4: =16x4x4");
    assert_eq!(line(&out, "level_1/32"), "level_1/32: PASS: 16x2x2: =16x2x2");
}

#[test]
fn shapes_at_96_counts_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["shapes", "--set", "img_size=96", "--dtype", "f64"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(line(&out, "tokens_1/8").contains(": 144:"));
    assert!(line(&out, "tokens_1/16").contains(": 36:"));
    assert!(line(&out, "tokens_1/32").contains(": 9:"));
    assert!(line(&out, "tokens_total").contains(": 189:"));
}

#[test]
fn height_65_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["shapes", "--set", "img_h=65"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("img_h = 65 is not a positive multiple of 32"), "{}", stderr(&o));
}

#[test]
fn config_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ok.cfg"), "# toy at 96\nimg_size = 96\nseed = 4\n").unwrap();
    let o = comer(dir.path(), &["shapes", "--config", "ok.cfg"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(line(&stdout(&o), "input").contains("3x96x96"));

    std::fs::write(dir.path().join("bad.cfg"), "depth = 4\nwidth = 3\n").unwrap();
    let o = comer(dir.path(), &["shapes", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key `width`"));

    let o = comer(dir.path(), &["shapes", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(comer(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(comer(dir.path(), &["shapes", "--dtype", "f16"]).status.code(), Some(2));
    assert_eq!(comer(dir.path(), &["shapes", "--set", "depth"]).status.code(), Some(2));
}

#[test]
fn gradcheck_reports_groups_and_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["gradcheck", "--samples", "3"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    every_line_is_a_report_line(&out);
    assert!(line(&out, "alpha_grad_nonzero").contains(": PASS: "));
    for group in ["grad/vit.blocks.0.attn.qkv", "grad/cti_v.0.attn.offsets", "grad/cti_v.0", "grad/mrfp.0.dw0"] {
        assert!(line(&out, group).contains(": PASS: "), "{group}");
    }
}

#[test]
fn gradcheck_with_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["gradcheck", "--samples", "1", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains(": FAIL: "));
}

#[test]
fn equiv_init_controls() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["equiv-init"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(line(&stdout(&o), "max_abs_diff"), "max_abs_diff: PASS: 0.000e0: =0");

    let o = comer(dir.path(), &["equiv-init", "--alpha", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(line(&stdout(&o), "first_differing_layer"), "first_differing_layer: FAIL: 1: none");

    let o = comer(dir.path(), &["equiv-init", "--alpha", "0.1", "--set", "cti_to_vit=false"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn oracle_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["oracle", "--seeds", "2"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    for op in ["deform_attn", "conv2d", "mhsa", "mrfp", "deform_zero_offset"] {
        assert!(line(&out, op).contains(": PASS: "), "{op}");
    }
}

#[test]
fn params_variants() {
    let dir = tempfile::tempdir().unwrap();
    for v in ["T", "S", "B"] {
        let o = comer(dir.path(), &["params", "--variant", v]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(line(&stdout(&o), "overhead_vs_published").contains(": PASS: "));
    }
    let o = comer(dir.path(), &["params"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0));
    assert!(line(&out, "analytic_equals_allocated").contains(": PASS: "));
    assert!(line(&out, "ladder_increasing").contains(": PASS: "));
    let o = comer(dir.path(), &["params", "--variant", "L"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("overhead_vs_published"));
}

#[test]
fn train_toy_with_zero_lr_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["train-toy", "--steps", "4", "--lr", "0", "--out", "run"]);
    assert_eq!(o.status.code(), Some(1), "threshold cannot be met without learning");
    let csv = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let losses: Vec<f64> = lines.map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect();
    assert_eq!(losses.len(), 4);
    for l in losses {
        assert!((l - 4f64.ln()).abs() < 1e-6, "{l}");
    }
}

#[test]
fn train_toy_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        comer(dir.path(), &["train-toy", "--steps", "15", "--images", "12", "--batch-size", "4", "--out", out]);
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a/loss.csv"), read("b/loss.csv"));
    assert_eq!(read("a/toy.vcmr"), read("b/toy.vcmr"));
    comer(dir.path(), &["train-toy", "--steps", "15", "--images", "12", "--batch-size", "4", "--out", "c", "--seed", "1"]);
    assert_ne!(read("a/loss.csv"), read("c/loss.csv"));
}

#[test]
fn train_toy_divergence_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["train-toy", "--steps", "10", "--lr", "50", "--out", "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn export_features_writes_nine_maps() {
    let dir = tempfile::tempdir().unwrap();
    comer(dir.path(), &["train-toy", "--steps", "2", "--images", "4", "--batch-size", "2", "--out", "run"]);
    for image in ["toy", "constant", "checker"] {
        let o = comer(dir.path(), &["export-features", "--out", "run", "--image", image]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(line(&stdout(&o), "files_written").contains(": PASS: 9:"));
    }
    for branch in ["vit", "cnn", "fused"] {
        for (s, n) in [(8, 8), (16, 4), (32, 2)] {
            let bytes = std::fs::read(dir.path().join(format!("run/{branch}_{s}.pgm"))).unwrap();
            let header = format!("P5\n{n} {n}\n255\n");
            assert!(bytes.starts_with(header.as_bytes()), "{branch}_{s}");
            assert_eq!(bytes.len(), header.len() + n * n);
        }
    }
}

#[test]
fn export_features_reads_pgm_input() {
    let dir = tempfile::tempdir().unwrap();
    comer(dir.path(), &["train-toy", "--steps", "1", "--images", "2", "--batch-size", "2", "--out", "run"]);
    let mut pgm = b"P5\n64 64\n255\n".to_vec();
    pgm.extend((0..64 * 64).map(|i| (i % 251) as u8));
    std::fs::write(dir.path().join("in.pgm"), pgm).unwrap();
    let o = comer(dir.path(), &["export-features", "--out", "maps", "--checkpoint", "run/toy.vcmr", "--image", "in.pgm"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("maps/fused_32.pgm").exists());
}

#[test]
fn export_features_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = comer(dir.path(), &["export-features", "--out", "nothing"]);
    assert_eq!(o.status.code(), Some(2));

    comer(dir.path(), &["train-toy", "--steps", "1", "--images", "2", "--batch-size", "2", "--out", "run"]);
    let o = comer(dir.path(), &["export-features", "--out", "run", "--image", "sunset"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("neither a file nor a pattern"));

    let o = comer(dir.path(), &["export-features", "--out", "run", "--dtype", "f64"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dtype mismatch"));

    std::fs::write(dir.path().join("junk.vcmr"), b"not a checkpoint").unwrap();
    let o = comer(dir.path(), &["export-features", "--checkpoint", "junk.vcmr"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"));
}
