mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{rng, write_corpus};
use rblb::blur_synth::{average_blur, CrfParams};
use rblb::image_io::{load_png, save_png};
use rblb::models::{init_params, save_checkpoint, Checkpoint, NetworkKind, NetworkSpec};
use rblb::numerics::{Shape, Tensor};

fn rblb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rblb"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_code(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["code"].as_str().unwrap().to_string()
}

#[test]
fn average_blur_command_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    let mut r = rng(1);
    let frames: Vec<Tensor> = (0..7)
        .map(|_| Tensor::uniform(Shape::new(1, 3, 10, 12), 0.0, 1.0, &mut r))
        .collect();
    for (i, f) in frames.iter().enumerate() {
        save_png(&seq.join(format!("{i:03}.png")), f).unwrap();
    }
    let out = dir.path().join("out");
    let o = rblb(&[
        "blur",
        "--mode",
        "average",
        "--input",
        p(&seq),
        "--output",
        p(&out),
        "--window",
        "7",
        "--gamma",
        "2.2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stored: Vec<Tensor> = (0..7)
        .map(|i| load_png(&seq.join(format!("{i:03}.png"))).unwrap())
        .collect();
    let oracle = average_blur(&stored, CrfParams::new(2.2).unwrap()).unwrap();
    let blurry = load_png(&out.join("blurry/seq_0000.png")).unwrap();
    assert!(blurry.max_abs_diff(&oracle) <= 0.5 / 255.0 + 1e-6);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn deblur_writes_one_image_per_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_corpus(&input, 3, 20, 2);
    let g = init_params(&NetworkSpec::desk(NetworkKind::DbganGenerator), 0);
    let ckpt_path = dir.path().join("g.rblb");
    let ckpt = Checkpoint {
        stores: [("dbgan_g".to_string(), g)].into(),
        ..Default::default()
    };
    save_checkpoint(&ckpt_path, &ckpt).unwrap();
    let out = dir.path().join("out");
    let o = rblb(&[
        "deblur",
        "--checkpoint",
        p(&ckpt_path),
        "--input",
        p(&input),
        "--output",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        let name = format!("img_{i:02}.png");
        assert_eq!(
            load_png(&out.join(&name)).unwrap().shape(),
            load_png(&input.join(&name)).unwrap().shape()
        );
    }

    // A checkpoint without a deblur generator is refused.
    let empty = dir.path().join("empty.rblb");
    save_checkpoint(&empty, &Checkpoint::default()).unwrap();
    let o = rblb(&[
        "deblur",
        "--checkpoint",
        p(&empty),
        "--input",
        p(&input),
        "--output",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_code(&o), "E_CKPT_CORRUPT");
}

#[test]
fn eval_of_identical_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    write_corpus(&imgs, 4, 16, 3);
    let csv = dir.path().join("m.csv");
    let o = rblb(&[
        "eval",
        "--pred",
        p(&imgs),
        "--target",
        p(&imgs),
        "--out",
        p(&csv),
    ]);
    assert!(o.status.success());
    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        assert_eq!(row[1].parse::<f64>().unwrap(), 100.0);
        assert!((row[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
    assert_eq!(&rows[4][0], "mean");
}

#[test]
fn exit_codes() {
    assert_eq!(rblb(&["--help"]).status.code(), Some(0));
    assert_eq!(rblb(&[]).status.code(), Some(2));
    assert_eq!(rblb(&["blur", "--bogus"]).status.code(), Some(2));
    assert_eq!(rblb(&["train", "--stage", "nope"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = rblb(&[
        "train",
        "--stage",
        "dbgan",
        "--paired-manifest",
        p(&missing.join("m.json")),
        "--out-dir",
        p(&missing),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_code(&o), "E_DATA");

    let o = rblb(&[
        "train",
        "--stage",
        "dbgan-plus",
        "--ablation",
        "dbgan-minus",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_code(&o), "E_ARG");

    let o = rblb(&["gradcheck", "--case", "no_such_case"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_single_case() {
    let o = rblb(&["gradcheck", "--case", "sigmoid", "--instances", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().next().unwrap().starts_with("sigmoid"));
    assert!(text.contains(" ok"));
}
