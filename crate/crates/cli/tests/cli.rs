//! Black-box tests of the command-line interface: exit codes, output files,
//! and the preprocess -> build-graph -> train -> evaluate flow.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chrono::{Duration, TimeZone, Utc};

fn seaget(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seaget"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// 2 users x 12 days x 4 hourly check-ins over 5 POIs; each day is its own
/// trajectory thanks to the 24h segmentation gap.
fn write_sample_log(path: &Path) {
    let mut text = String::new();
    let base = Utc.with_ymd_and_hms(2012, 4, 3, 18, 0, 6).unwrap();
    for user in 0..2 {
        for day in 0..12 {
            for step in 0..4 {
                let poi = (user + day + step) % 5;
                // two-day spacing keeps each day's block past the 24h
                // segmentation gap
                let t = base + Duration::days(2 * day as i64) + Duration::hours(step as i64);
                writeln!(
                    text,
                    "user{user}\tpoi{poi}\tcat{c}\tCategory {c}\t40.7{poi}\t-74.0{poi}\t-240\t{}",
                    t.format("%a %b %d %H:%M:%S %z %Y"),
                    c = poi % 3,
                )
                .unwrap();
            }
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = seaget(&[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = seaget(&["preprocess", "--bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn preprocess_missing_input_exits_2_without_touching_workdir() {
    let dir = tempfile::tempdir().unwrap();
    let workdir = dir.path().join("work");
    let out = seaget(&[
        "preprocess",
        "--input",
        dir.path().join("nope.tsv").to_str().unwrap(),
        "--workdir",
        workdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!workdir.exists(), "workdir must not be created on failure");
}

#[test]
fn preprocess_malformed_log_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("bad.tsv");
    fs::write(&log, "only\tthree\tcolumns\n").unwrap();
    let out = seaget(&[
        "preprocess",
        "--input",
        log.to_str().unwrap(),
        "--workdir",
        dir.path().join("work").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    write_sample_log(&log);
    let work = dir.path().join("work");

    let out = seaget(&[
        "preprocess",
        "--input",
        log.to_str().unwrap(),
        "--workdir",
        work.to_str().unwrap(),
        "--min-checkins",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stats = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<usize> = stats
        .split_whitespace()
        .map(|f| f.parse().unwrap())
        .collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[0], 2, "users");
    assert_eq!(fields[1], 5, "POIs");
    assert_eq!(fields[2], 3, "categories");
    assert_eq!(fields[3], 96, "check-ins");
    assert_eq!(fields[4], 24, "trajectories");

    let out = seaget(&["build-graph", "--workdir", work.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["edges.csv", "nodes.csv", "popularity.csv"] {
        assert!(work.join(file).exists(), "{file} missing");
    }

    // invalid alpha is a usage error before any training happens
    let out = seaget(&[
        "train",
        "--workdir",
        work.to_str().unwrap(),
        "--alpha",
        "1.5",
    ]);
    assert_eq!(code(&out), 2);

    let config = dir.path().join("train.conf");
    fs::write(
        &config,
        "# narrow widths keep this test fast\nomega = 8\npsi = 8\nsigma = 8\n\
         gcn_layers = 1\nencoder_layers = 1\nff_dim = 32\nepochs = 2\ndropout = 0.0\n",
    )
    .unwrap();
    let out = seaget(&[
        "train",
        "--workdir",
        work.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["model.ckpt", "epochs.csv", "poi_embeddings.mat", "transition_map.mat"] {
        assert!(work.join(file).exists(), "{file} missing");
    }
    let epochs = fs::read_to_string(work.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3, "header plus two epochs");

    let out = seaget(&[
        "evaluate",
        "--workdir",
        work.to_str().unwrap(),
        "--checkpoint",
        work.join("model.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.join("eval.csv").exists());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Acc@1"), "stdout: {stdout}");
}

#[test]
fn config_with_unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    fs::write(&config, "mystery_knob = 3\n").unwrap();
    let out = seaget(&[
        "train",
        "--workdir",
        dir.path().to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mystery_knob"), "stderr: {stderr}");
}

#[test]
fn recommend_unknown_user_names_the_id() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    write_sample_log(&log);
    let work = dir.path().join("work");
    let out = seaget(&[
        "preprocess",
        "--input",
        log.to_str().unwrap(),
        "--workdir",
        work.to_str().unwrap(),
        "--min-checkins",
        "1",
    ]);
    assert_eq!(code(&out), 0);
    let config = dir.path().join("train.conf");
    fs::write(&config, "omega = 8\npsi = 8\nsigma = 8\ngcn_layers = 1\nencoder_layers = 1\nff_dim = 32\nepochs = 1\n").unwrap();
    let out = seaget(&[
        "train",
        "--workdir",
        work.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = seaget(&[
        "recommend",
        "--workdir",
        work.to_str().unwrap(),
        "--checkpoint",
        work.join("model.ckpt").to_str().unwrap(),
        "--user",
        "nobody",
        "--trajectory",
        "poi0@2012-04-03T18:00:00",
        "--at",
        "2012-04-03T20:00:00",
    ]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nobody"), "stderr: {stderr}");
}
