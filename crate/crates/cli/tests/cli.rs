use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::Value;

fn krill(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krill"))
        .args(args)
        .env("KRILL_WORKSPACE", ws)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(ws: &Path, args: &[&str]) -> Value {
    let out = krill(ws, args);
    assert!(
        out.status.success(),
        "krill {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"
[taxonomy]
included = ["J", "FS1", "MS1", "MA1", "MA2"]
excluded = ["U"]
min_class_count = 1

[segmentation]
epochs = 1
samples_per_board = 200

[estimation]
epochs = 3
"#;

fn small_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("krill.toml"), SMALL).unwrap();
    ok(dir.path(), &["synth", "--boards", "3", "--per-board", "8"]);
    ok(dir.path(), &["ingest"]);
    dir
}

#[test]
fn ingest_sample_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let boards = dir.path().join("photos");
    fs::create_dir(&boards).unwrap();
    RgbImage::from_pixel(6048, 4032, Rgb([56, 127, 245]))
        .save(boards.join("JR255A_krill_image_73.jpeg"))
        .unwrap();
    let table = dir.path().join("sample.tsv");
    fs::write(
        &table,
        "length\tmaturity\tcruise\tx\ty\twidth\theight\tID\tAlternative view ID\tposition\tevent\tnet\tboard\n\
         34\tFS1\tJR255A\t469\t751\t869\t114\tJR255A_krill_image_73.jpeg-1\tJR255A_krill_image_74.jpeg-1\tDorsal\t78\t2\t3\n\
         23\tJ\tJR255A\t1368\t869\t537\t118\tJR255A_krill_image_73.jpeg-2\tJR255A_krill_image_74.jpeg-2\tDorsal\t78\t2\t3\n\
         25\tJ\tJR255A\t2207\t851\t560\t123\tJR255A_krill_image_73.jpeg-3\tJR255A_krill_image_74.jpeg-3\tDorsal\t78\t2\t3\n\
         29\tJ\tJR255A\t3172\t819\t746\t168\tJR255A_krill_image_73.jpeg-4\tJR255A_krill_image_74.jpeg-4\tDorsal\t78\t2\t3\n\
         40\tMS1\tJR255A\t4319\t783\t1038\t191\tJR255A_krill_image_73.jpeg-5\tJR255A_krill_image_74.jpeg-5\tDorsal\t78\t2\t3\n\
         n/a\tJ\tJR255A\t0\t0\t10\t10\tJR255A_krill_image_73.jpeg-6\tJR255A_krill_image_74.jpeg-6\tDorsal\t78\t2\t3\n",
    )
    .unwrap();
    let s = ok(
        dir.path(),
        &[
            "ingest",
            "--table",
            table.to_str().unwrap(),
            "--boards",
            boards.to_str().unwrap(),
        ],
    );
    assert_eq!(s["metrics"]["rows_in"], 6);
    assert_eq!(s["metrics"]["records"], 5);
    assert_eq!(s["metrics"]["rejected"], 1);
    // The lateral board is absent, so nothing survives pairing.
    assert_eq!(s["metrics"]["paired"], 0);
    let rej = fs::read_to_string(dir.path().join("manifest/rejections.jsonl")).unwrap();
    let line: Value = serde_json::from_str(rej.lines().next().unwrap()).unwrap();
    assert_eq!(line["row"], 6);
}

#[test]
fn ingest_without_boards_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("table.csv"), "length\n").unwrap();
    let out = krill(
        dir.path(),
        &[
            "ingest",
            "--boards",
            dir.path().join("missing").to_str().unwrap(),
        ],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
}

#[test]
fn ingest_missing_column_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("boards")).unwrap();
    fs::write(dir.path().join("table.csv"), "length,maturity\n30,J\n").unwrap();
    let out = krill(dir.path(), &["ingest"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cruise"), "{}", stderr(&out));
}

#[test]
fn detect_validates_threshold_and_handles_empty_dirs() {
    let ws = small_workspace();
    let p = ws.path();
    let out = krill(p, &["detect", "--threshold", "1.1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("[0, 1]"), "{}", stderr(&out));
    let out = krill(p, &["detect", "--threshold", "-0.1"]);
    assert!(!out.status.success());

    ok(p, &["train-seg"]);
    let empty = p.join("empty");
    fs::create_dir(&empty).unwrap();
    let out = krill(p, &["detect", "--boards", empty.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("no board images"), "{}", stderr(&out));
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s["metrics"]["boards"], 0);
    assert_eq!(s["outputs"].as_object().unwrap().len(), 0);

    let s = ok(p, &["detect", "--test-only"]);
    let n = s["metrics"]["boards"].as_u64().unwrap();
    assert!(n >= 1);
    assert_eq!(s["outputs"].as_object().unwrap().len() as u64, n);
    let e = ok(p, &["evaluate"]);
    assert!(e["metrics"]["ap"].as_f64().unwrap() >= 0.0);
}

#[test]
fn ladder_needs_curated_resolution() {
    let ws = small_workspace();
    let p = ws.path();
    let out = krill(p, &["ladder", "--resolutions", "340x100"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("krill curate --resolutions 340x100"),
        "{}",
        stderr(&out)
    );

    ok(p, &["curate", "--resolutions", "340x100"]);
    let s = ok(p, &["ladder", "--resolutions", "340x100"]);
    assert_eq!(s["metrics"]["rows"], 1);
    let table = fs::read_to_string(p.join("reports/ladder/table2.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[1].starts_with("340x100,"));
    assert!(lines[2].starts_with("mean,"));

    let out = krill(
        p,
        &[
            "train-est",
            "--view",
            "dorsal",
            "--resolution",
            "170x50",
            "--task",
            "length",
        ],
    );
    assert!(!out.status.success());
    let s = ok(
        p,
        &[
            "train-est",
            "--view",
            "dorsal",
            "--resolution",
            "340x100",
            "--task",
            "length",
        ],
    );
    assert!(s["metrics"]["metric"].as_f64().unwrap() > 0.0);
    assert!(p
        .join("models/estimator_dorsal_340x100_length.json")
        .exists());
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train-seg", "--split", "loco"][..],
        &["curate", "--resolutions", "340by100"],
        &[
            "train-est",
            "--view",
            "side",
            "--resolution",
            "340x100",
            "--task",
            "length",
        ],
    ] {
        let out = krill(dir.path(), args);
        assert!(!out.status.success(), "{args:?}");
    }
}

#[test]
fn commands_without_inputs_explain_what_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = krill(dir.path(), &["train-seg"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("krill ingest"), "{}", stderr(&out));
}
