use std::path::Path;
use std::process::{Command, Output};

fn asl2pet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asl2pet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, paired: &str, unpaired: &str) {
    let o = asl2pet(
        dir,
        &["generate", "--paired", paired, "--unpaired", unpaired, "--height", "16", "--width", "16", "--seed", "3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY: &[&str] = &["--base-channels", "4", "--batch-size", "2", "--lr", "0.001"];

#[test]
fn generate_writes_manifest_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "4", "8");
    let manifest = std::fs::read_to_string(dir.path().join("corpus/manifest.jsonl")).unwrap();
    // header line plus one line per subject
    assert_eq!(manifest.lines().count(), 13);
    let resolved = std::fs::read_to_string(dir.path().join("corpus/resolved-config.toml")).unwrap();
    assert!(resolved.contains("paired = 4"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(asl2pet(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(asl2pet(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(asl2pet(dir.path(), &["generate", "--height", "30"]).status.code(), Some(1));
    assert_eq!(asl2pet(dir.path(), &["train", "--manifest", "absent/manifest.jsonl"]).status.code(), Some(2));
    generate(dir.path(), "2", "2");
    let o = asl2pet(dir.path(), &["train", "--manifest", "corpus/manifest.jsonl", "--iterations", "3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = asl2pet(dir.path(), &["ablate", "--manifest", "corpus/manifest.jsonl", "--configs", "S+T1+RA+DA"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = asl2pet(dir.path(), &["ablate", "--manifest", "corpus/manifest.jsonl", "--k", "3", "--configs", "M+T1+RA+DA"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "4", "4");
    let mut args = vec!["train", "--manifest", "corpus/manifest.jsonl", "--iterations", "6", "--checkpoint-every", "2"];
    args.extend_from_slice(TINY);
    let o = asl2pet(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/final.ckpt").exists());
    assert!(dir.path().join("run/checkpoint-00000004.ckpt").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap().lines().count(), 6);

    let o = asl2pet(dir.path(), &["eval", "--checkpoint", "run/final.ckpt", "--manifest", "corpus/manifest.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: Vec<_> = std::fs::read_dir(dir.path().join("eval"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("metrics-"))
        .collect();
    assert_eq!(metrics.len(), 1);
    assert_eq!(std::fs::read_to_string(dir.path().join("eval").join(&metrics[0])).unwrap().lines().count(), 4);

    let o = asl2pet(
        dir.path(),
        &["plot", "--checkpoint", "run/final.ckpt", "--manifest", "corpus/manifest.jsonl", "--subjects", "1", "--scale", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(dir.path().join("plots/sub-0001_panels.png")).unwrap();
    assert_eq!((img.width(), img.height()), (5 * 32 + 4 * 2, 32));

    let mut args = vec!["train", "--manifest", "corpus/manifest.jsonl", "--iterations", "6", "--resume", "run/checkpoint-00000004.ckpt"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--checkpoint-every", "2"]);
    let o = asl2pet(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn single_task_warns_about_unpaired_manifest() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "4", "0");
    let mut args = vec![
        "train",
        "--config",
        "single-task",
        "--manifest",
        "corpus/manifest.jsonl",
        "--unpaired-manifest",
        "corpus/manifest.jsonl",
        "--iterations",
        "2",
    ];
    args.extend_from_slice(TINY);
    let o = asl2pet(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("single-task configuration"), "{}", stderr(&o));
}

#[test]
fn ablate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "4", "4");
    let run = |out: &str| {
        let mut args = vec![
            "ablate",
            "--manifest",
            "corpus/manifest.jsonl",
            "--k",
            "2",
            "--configs",
            "M-T1-RA-DA,M+T1+RA+DA",
            "--iterations",
            "4",
            "--out",
            out,
        ];
        args.extend_from_slice(TINY);
        let o = asl2pet(dir.path(), &args);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path().join(out))
            .unwrap()
            .map(|e| e.unwrap())
            .filter(|e| e.file_name().to_string_lossy().starts_with("report-"))
            .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        (o.stdout, files)
    };
    let (out_a, a) = run("a");
    let (_, b) = run("b");
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert!(String::from_utf8_lossy(&out_a).contains("M+T1+RA+DA"));
}
