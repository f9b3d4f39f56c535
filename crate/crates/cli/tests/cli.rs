use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 12] = [
    "--set", "h=4", "--set", "w=4", "--set", "c=16", "--set", "c_text=8", "--set", "max_tokens=6", "--set", "vocab=24",
];

fn refseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg")).args(args).output().unwrap()
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend(TINY);
    v
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let mut args = with_tiny(&["train", "--out", run_s, "--epochs", "2", "--train-samples", "6", "--val-samples", "3", "--quiet"]);
    args.extend(["--batch-size", "2"]);
    let out = refseg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.txt", "loss.csv", "eval.csv", "metrics.csv", "model.ckpt", "model.ckpt.meta"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let loss = lines(&run.join("loss.csv"));
    assert_eq!(loss[0], "step,epoch,lr,total,focal,dice");
    assert_eq!(loss.len(), 1 + 6);

    let ev = dir.path().join("ev");
    let out = refseg(&[
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&ev.join("metrics.csv")), lines(&run.join("metrics.csv")));
    assert_eq!(lines(&ev.join("per_sample.csv")).len(), 4);
    let pgm = std::fs::read(ev.join("pred_00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn gen_data_then_dump_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = refseg(&with_tiny(&["gen-data", "--out", data.to_str().unwrap(), "--train-samples", "4", "--val-samples", "2"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&data.join("train/manifest.txt")).len(), 4);
    assert_eq!(lines(&data.join("val/manifest.txt")).len(), 2);

    let attn = dir.path().join("attn");
    let out = refseg(&with_tiny(&[
        "dump-attn",
        "--data",
        data.join("val").to_str().unwrap(),
        "--sample",
        "1",
        "--out",
        attn.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..2 {
        let rows = lines(&attn.join(format!("attention_block{k}.csv")));
        assert_eq!(rows[0], "pixel_index,token_index,score,relevance,kept,weight");
        assert_eq!(rows.len(), 1 + 16 * 6);
        assert_eq!(lines(&attn.join(format!("words_block{k}.csv")))[0], "token_index,word,mean_weight");
    }
    assert!(attn.join("prob.pgm").exists() && attn.join("gt.pgm").exists());
}

#[test]
fn ablate_writes_a_table_with_base_first() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ab");
    let out = refseg(&with_tiny(&[
        "ablate",
        "--variants",
        "no-fe,tau=0.2",
        "--epochs",
        "1",
        "--train-samples",
        "4",
        "--val-samples",
        "2",
        "--max-steps",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = lines(&out_dir.join("ablation.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("base,"));
    assert!(rows[2].starts_with("no-fe,"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "# tiny\nh = 4\nw = 4\nc = 16\nc_text = 8\nmax_tokens = 6\nvocab = 24\ntau = 0.2\nseed = 5\n").unwrap();
    let data = dir.path().join("d");
    let out = refseg(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--tau",
        "0.4",
        "--train-samples",
        "2",
        "--val-samples",
        "1",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = lines(&data.join("config.txt"));
    assert!(written.contains(&"tau = 0.4".to_string()));
    assert!(written.contains(&"seed = 5".to_string()));
    assert!(written.contains(&"h = 4".to_string()));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(refseg(&["gen-data", "--tau", "1.5", "--out", o]).status.code(), Some(2));
    assert_eq!(refseg(&["gen-data", "--set", "nonsense=1", "--out", o]).status.code(), Some(2));
    assert_eq!(refseg(&["ablate", "--variants", "bogus", "--out", o]).status.code(), Some(2));
    assert_eq!(refseg(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_tiny(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--train-samples",
        "2",
        "--val-samples",
        "1",
        "--epochs",
        "2",
        "--quiet",
    ]);
    args.extend(["--lr", "1e308", "--batch-size", "1"]);
    let out = refseg(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_a_plain_failure() {
    let out = refseg(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}
