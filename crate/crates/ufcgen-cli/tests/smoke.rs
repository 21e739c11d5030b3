//! End-to-end smoke tests driving the real binary over tiny artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ufcgen")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ufcgen-cli-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for cmd in [
        "gen-data",
        "fit-vq",
        "train",
        "train-ar",
        "generate",
        "benchmark",
        "eval",
    ] {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd} --help failed");
        assert!(!out.stdout.is_empty(), "{cmd} --help printed nothing");
    }
    assert!(run(&["--help"]).status.success());
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["gen-data", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["gen-data", "--out"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_artifacts_exit_two_and_name_the_path() {
    let out = run(&["fit-vq", "--dataset", "/nope/missing.ufcd", "--out", "/tmp/x.ufcv"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nope/missing.ufcd"), "stderr: {stderr}");
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = workdir("gendata");
    let a = dir.join("a.ufcd");
    let b = dir.join("b.ufcd");
    ok(&["gen-data", "--n", "64", "--seed", "7", "--out", &s(&a)]);
    ok(&["gen-data", "--n", "64", "--seed", "7", "--out", &s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.join("c.ufcd");
    ok(&["gen-data", "--n", "64", "--seed", "8", "--out", &s(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

/// The full pipeline at toy scale: data, codebook, both trainings,
/// generation under every control type, benchmark, eval.
#[test]
fn full_pipeline_smoke() {
    let dir = workdir("pipeline");
    let data = dir.join("train.ufcd");
    let cb = dir.join("cb.ufcv");
    ok(&["gen-data", "--n", "192", "--seed", "7", "--stratified", "--out", &s(&data)]);
    ok(&[
        "fit-vq", "--dataset", &s(&data), "--k", "64", "--seed", "7",
        "--max-iters", "30", "--restarts", "2", "--out", &s(&cb),
    ]);

    let run_dir = dir.join("run");
    let common = [
        "--dataset".to_string(), s(&data),
        "--codebook".to_string(), s(&cb),
        "--epochs".to_string(), "2".into(),
        "--width".to_string(), "32".into(),
        "--ff-width".to_string(), "64".into(),
        "--layers".to_string(), "1".into(),
        "--seed".to_string(), "5".into(),
        "--quiet".to_string(),
    ];
    let mut train_args: Vec<String> = vec!["train".into(), "--out-dir".into(), s(&run_dir)];
    train_args.extend(common.iter().cloned());
    let args: Vec<&str> = train_args.iter().map(|x| x.as_str()).collect();
    ok(&args);
    assert!(run_dir.join("model.ufcb").exists());
    assert!(run_dir.join("vocab.txt").exists());

    let mut ar_args: Vec<String> = vec!["train-ar".into(), "--out-dir".into(), s(&run_dir)];
    ar_args.extend(common.iter().cloned());
    let args: Vec<&str> = ar_args.iter().map(|x| x.as_str()).collect();
    ok(&args);
    assert!(run_dir.join("ar-model.ufcb").exists());

    let model = s(&run_dir.join("model.ufcb"));
    let ar_model = s(&run_dir.join("ar-model.ufcb"));
    let vocab = s(&run_dir.join("vocab.txt"));
    let cbs = s(&cb);

    // unconditional synthesis: no controls at all
    let out1 = dir.join("uncond.ppm");
    ok(&[
        "generate", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--out", &s(&out1), "--seed", "3",
    ]);
    assert!(out1.exists());

    // text control plus trace
    let out2 = dir.join("text.ppm");
    let trace = dir.join("text.ufct");
    let run2 = ok(&[
        "generate", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--text", "red circle center on blue", "--out", &s(&out2),
        "--trace", &s(&trace), "--seed", "3",
    ]);
    assert!(out2.exists() && trace.exists());
    let stdout = String::from_utf8_lossy(&run2.stdout);
    assert!(stdout.contains("t_max="), "stdout: {stdout}");

    // seed determinism of generation
    let out2b = dir.join("text-b.ppm");
    ok(&[
        "generate", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--text", "red circle center on blue", "--out", &s(&out2b), "--seed", "3",
    ]);
    assert_eq!(
        std::fs::read(&out2).unwrap(),
        std::fs::read(&out2b).unwrap()
    );

    // visual control from a whole-image ppm plus a crop spec of it
    let src = dir.join("src.ppm");
    ok(&[
        "generate", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--text", "magenta square corner on black", "--out", &s(&src), "--seed", "9",
    ]);
    let out3 = dir.join("visual.ppm");
    ok(&[
        "generate", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--visual", &format!("0,0,3,3:{}", s(&src)),
        "--visual", &s(&src),
        "--out", &s(&out3), "--seed", "4",
    ]);
    assert!(out3.exists());

    // preservation control: the preserved block survives exactly
    let out4 = dir.join("preserve.ppm");
    ok(&[
        "generate", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--preserve", &format!("0,0,4,4:{}", s(&src)),
        "--out", &s(&out4), "--seed", "5",
    ]);
    let src_img = ufcgen::ppm::read_ppm(&src).unwrap();
    let out_img = ufcgen::ppm::read_ppm(&out4).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(src_img.get(y, x), out_img.get(y, x), "pixel ({y},{x})");
        }
    }

    // ar decoding from the causal checkpoint
    let out5 = dir.join("ar.ppm");
    ok(&[
        "generate", "--checkpoint", &ar_model, "--codebook", &cbs, "--vocab", &vocab,
        "--text", "red circle center on blue", "--method", "ar",
        "--out", &s(&out5), "--seed", "3",
    ]);
    assert!(out5.exists());

    // benchmark and eval run end to end
    let report = dir.join("bench.txt");
    let bench_out = ok(&[
        "benchmark", "--nar-checkpoint", &model, "--ar-checkpoint", &ar_model,
        "--codebook", &cbs, "--vocab", &vocab, "--n", "8", "--seed", "2",
        "--out", &s(&report),
    ]);
    assert!(report.exists());
    let stdout = String::from_utf8_lossy(&bench_out.stdout);
    assert!(stdout.contains("mean ms") && stdout.contains("pnag-b1"));

    let eval_out = ok(&[
        "eval", "--checkpoint", &model, "--codebook", &cbs, "--vocab", &vocab,
        "--dataset", &s(&data), "--prompts", "10", "--cases", "5", "--seed", "2",
    ]);
    let stdout = String::from_utf8_lossy(&eval_out.stdout);
    assert!(stdout.contains("preservation.exact_rate=1.0000"), "stdout: {stdout}");
    assert!(stdout.contains("reconstruction."), "stdout: {stdout}");

    let _ = std::fs::remove_dir_all(&dir);
}
