use std::path::Path;

use splm::cli::run_cli_with;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli_with(std::iter::once("splm").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "preset = disjoint\nsources = 3\ntokens_per_source = 6\ndoc_len = 10\ndocs_per_source = 20\nconcentration = 0.5\nmatrix_seed = 0\nnames = WIKI BOOK NEWS\n";
const CFG: &str = "architecture = decoder_only\nd_model = 8\nn_heads = 2\nd_ff = 16\nn_layers = 1\nmax_seq_len = 12\nsteps = 5\nbatch_size = 4\nlog_every = 1\n";

/// A tiny pre-trained checkpoint in `dir`.
fn pretrained(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("c.spec"), SPEC).unwrap();
    std::fs::write(dir.join("p.cfg"), CFG).unwrap();
    let corpus = dir.join("corpus");
    let ckpt = dir.join("m.ckpt");
    assert_eq!(cli(&["gen-corpus", "--spec", s(&dir.join("c.spec")), "--out", s(&corpus)]).0, 0);
    let (code, _, err) = cli(&["pretrain", "--config", s(&dir.join("p.cfg")), "--corpus", s(&corpus), "--out", s(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    ckpt
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (code, _, err) = cli(&["pretrain", "--bogus"]);
    assert_eq!(code, 1);
    assert!(err.contains("--bogus"));
    assert_eq!(cli(&["--help"]).0, 0);
}

#[test]
fn predict_source_answers_every_input_line() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "w0 w1 w2 w3\nw7 w8 w9\nw14 w13 w12 w15 w16\n").unwrap();
    let (code, out, err) = cli(&["predict-source", "--checkpoint", s(&ckpt), "--input", s(&input)]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| ["WIKI", "BOOK", "NEWS"].contains(l)), "{out}");
}

#[test]
fn manual_sp_for_unregistered_source_lists_the_registered_ones() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let task = dir.path().join("t.tsv");
    std::fs::write(&task, "# kind=classification test_fraction=0.5\nw1\tw0 w1\nw8\tw7 w8\nw1\tw2 w3\nw8\tw9 w10\n").unwrap();
    let (code, _, err) = cli(&[
        "finetune", "--checkpoint", s(&ckpt), "--task", s(&task), "--sp-mode", "manual:REDDIT", "--out",
        s(&dir.path().join("ft.ckpt")),
    ]);
    assert_eq!(code, 2);
    for name in ["WIKI", "BOOK", "NEWS"] {
        assert!(err.contains(name), "{err}");
    }
    let (code, _, err) = cli(&[
        "finetune", "--checkpoint", s(&ckpt), "--task", s(&task), "--sp-mode", "manual:BOOK", "--out",
        s(&dir.path().join("ft.ckpt")),
    ]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn inspect_reports_sources_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let (code, out, _) = cli(&["inspect", "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 0);
    assert!(out.contains("decoder_only") && out.contains("BOOK"), "{out}");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let (code, _, err) = cli(&["inspect", "--checkpoint", "/nonexistent/m.ckpt"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/m.ckpt"), "{err}");
}
