use std::path::Path;
use std::process::{Command, Output};

use gridattn::kv::KeyValues;

const BIN: &str = env!("CARGO_BIN_EXE_gridattn");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--n_i", "6", "--n_q", "10", "--n_c", "6", "--n_e", "6", "--conv_channels", "4",
];

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = ok(&["generate", "--seed", "5", "--size", "30,10", "--out_dir", s(d.path())]);
        assert!(out.contains("labels verified: 30/30"));
    }
    for f in ["train.svds", "test.svds", "train.manifest", "test.manifest"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let manifest = KeyValues::parse(&std::fs::read_to_string(a.path().join("train.manifest")).unwrap()).unwrap();
    assert_eq!(manifest.get("seed"), Some("5"));
}

#[test]
fn train_eval_infer_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let dir = s(d.path());
    ok(&["generate", "--seed", "1", "--size", "40,16", "--out_dir", dir]);
    let train = d.path().join("train.svds");
    let test = d.path().join("test.svds");
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "variant = MF-G2\nsteps = 3\nbatch_size = 8\nepochs = 2\nlr = 0.001\n").unwrap();
    let mut args = vec![
        "train", "--config", s(&cfg), "--seed", "2", "--train", s(&train), "--test", s(&test), "--out_dir", dir,
    ];
    args.extend_from_slice(TINY);
    let out = ok(&args);
    assert!(out.contains("query length"));
    let ckpt = d.path().join("model.svac");
    assert!(ckpt.exists() && d.path().join("model.cfg").exists());

    let metrics = KeyValues::parse(&std::fs::read_to_string(d.path().join("metrics.txt")).unwrap()).unwrap();
    let best: usize = metrics.require("lr0.001.best_epoch").unwrap();
    let logged: f64 = metrics.require(&format!("lr0.001.epoch{best}.train_accuracy")).unwrap();
    let l1: f64 = metrics.require("lr0.001.epoch1.train_loss").unwrap();
    assert!(l1.is_finite());

    let report = d.path().join("eval.txt");
    ok(&["eval", "--checkpoint", s(&ckpt), "--split", s(&train), "--report", s(&report)]);
    let r = KeyValues::parse(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.require::<f64>("accuracy").unwrap(), logged);
    let overall: f64 = r.require("accuracy").unwrap();
    let recombined: f64 = r.require("recombined_accuracy").unwrap();
    assert!((overall - recombined).abs() < 1e-6);
    let again = d.path().join("eval2.txt");
    ok(&["eval", "--checkpoint", s(&ckpt), "--split", s(&train), "--report", s(&again)]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());

    let out_dir = d.path().join("render");
    let out = ok(&["render-attention", "--checkpoint", s(&ckpt), "--split", s(&test), "--index", "3", "--out_dir", s(&out_dir)]);
    assert!(out.contains("answer:"));
    let input = out_dir.join("input.ppm");
    let infer_dir = d.path().join("infer");
    let out = ok(&[
        "infer", "--checkpoint", s(&ckpt), "--image", s(&input), "--query", "is red green", "--out_dir", s(&infer_dir),
    ]);
    assert!(out.contains("answer: "));
    let mut names: Vec<String> = std::fs::read_dir(&infer_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let expect: Vec<String> = (0..2).flat_map(|g| (0..4).map(move |t| format!("glimpse{g}_mf_step{t}.ppm"))).collect();
    assert_eq!(names, expect);

    let erf_dir = d.path().join("erf");
    let out = ok(&["erf", "--checkpoint", s(&ckpt), "--split", s(&test), "--images", "4", "--out_dir", s(&erf_dir)]);
    let kv = KeyValues::parse(&out).unwrap();
    assert_eq!(kv.require::<f64>("mass_inside_field").unwrap(), 1.0);
    assert_eq!(kv.require::<f64>("sigma").unwrap(), 4.0);
    for f in ["erf_raw.pgm", "erf_smooth.pgm", "erf_overlay.ppm", "erf.txt"] {
        assert!(erf_dir.join(f).exists(), "{f}");
    }

    // LBP checkpoints render unary and final maps instead of a trajectory
    let lbp = d.path().join("lbp");
    let mut args = vec![
        "train", "--seed", "2", "--variant", "LBP", "--train", s(&train), "--epochs", "1", "--lr", "0.001",
        "--eval_train", "false", "--out_dir", s(&lbp),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let lbp_out = d.path().join("lbp_render");
    ok(&[
        "infer", "--checkpoint", s(&lbp.join("model.svac")), "--image", s(&input), "--query", "is circle left_of blue",
        "--out_dir", s(&lbp_out),
    ]);
    assert!(lbp_out.join("glimpse0_lbp_unary.ppm").exists() && lbp_out.join("glimpse0_lbp_final.ppm").exists());

    // mismatched overrides are a data error, malformed queries a usage error
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--split", s(&test), "--n_c", "9"]).status.code(), Some(2));
    let bad_query = run(&["infer", "--checkpoint", s(&ckpt), "--image", s(&input), "--query", "is mauve red"]);
    assert_eq!(bad_query.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(1), "bare invocation is a usage error");
    assert_eq!(run(&["generate", "--bogus", "1"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["generate", "--size", "4,4"]).status.code(), Some(1), "seed is mandatory");
    assert_eq!(run(&["eval", "--checkpoint", "/nonexistent/m.svac", "--split", "/nonexistent/x.svds"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.cfg");
    std::fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(run(&["generate", "--config", s(&cfg)]).status.code(), Some(1));
    let junk = d.path().join("junk.svds");
    std::fs::write(&junk, b"not a split").unwrap();
    assert_eq!(run(&["train", "--seed", "1", "--train", s(&junk)]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--help"]).status.code(), Some(0));
}
