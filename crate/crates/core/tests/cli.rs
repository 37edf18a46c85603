use objsal::harness::cli::{run, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use objsal::harness::corpus::scene_path;
use objsal::harness::formats::{load_checkpoint, save_grid};
use objsal::harness::Corpus;
use objsal::tensor::Grid;
use std::path::Path;
use std::process::Command;

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("objsal").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_train_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let bin = env!("CARGO_BIN_EXE_objsal");
    let st = Command::new(bin)
        .args(["synth", "--n", "8", "--seed", "7", "--out", s(&corpus)])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_OK));
    let st = Command::new(bin)
        .args(["train", "--corpus", s(&corpus), "--epochs", "3"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_OK));
    let model = load_checkpoint(&corpus.join("model.rdm")).unwrap();
    assert_eq!(model.input_channels(), 8 + 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (code, _, err) = call(&["train", "--no-such-flag"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage"), "{err}");
    let out = Command::new(env!("CARGO_BIN_EXE_objsal"))
        .arg("--frobnicate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn eval_names_the_scene_with_a_wrong_size() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path();
    assert_eq!(call(&["synth", "--n", "8", "--seed", "3", "--out", s(c)]).0, EXIT_OK);
    assert_eq!(call(&["train", "--corpus", s(c), "--epochs", "2"]).0, EXIT_OK);
    let model = c.join("model.rdm");
    assert_eq!(call(&["predict", "--corpus", s(c), "--model", s(&model)]).0, EXIT_OK);
    let (code, table, _) = call(&["eval", "--corpus", s(c)]);
    assert_eq!(code, EXIT_OK);
    assert!(table.contains("kld"), "{table}");

    let corpus = Corpus::load(c, 0.7).unwrap();
    let test = corpus.split().unwrap().test;
    let id = &corpus.scenes[test[0]].id;
    save_grid(&Grid::new(2, 2, vec![0.25; 4]).unwrap(), &scene_path(c, id, "pred.ftn")).unwrap();
    let (code, _, err) = call(&["eval", "--corpus", s(c)]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.starts_with("objsal eval:"), "{err}");
    assert!(err.contains(id.as_str()), "{err}");
}

#[test]
fn dissim_writes_both_channels() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path();
    assert_eq!(call(&["synth", "--n", "4", "--seed", "1", "--out", s(c)]).0, EXIT_OK);
    let (code, _, err) = call(&["dissim", "--corpus", s(c), "--scene", "s002"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(scene_path(c, "s002", "appearance.ftn").exists());
    assert!(scene_path(c, "s002", "size.ftn").exists());
    assert_eq!(call(&["dissim", "--corpus", s(c), "--scene", "nope"]).0, EXIT_DATA);
}

#[test]
fn gradcheck_exit_codes() {
    let (code, out, _) = call(&["gradcheck", "--models", "2"]);
    assert_eq!(code, EXIT_OK, "{out}");
    // An absurd tolerance makes any roundoff a failure.
    let (code, _, err) = call(&["gradcheck", "--models", "2", "--tolerance", "0"]);
    assert_eq!(code, EXIT_NUMERICAL, "{err}");
    assert!(err.starts_with("objsal gradcheck:"), "{err}");
}
