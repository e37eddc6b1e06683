use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn data(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/data")
        .join(sub)
}

fn ttdsr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttdsr"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("TTDSR_OUT_DIR")
        .output()
        .expect("spawn ttdsr")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// A directory with one small held-out image, to keep inference cheap.
fn one_image_dir() -> TempDir {
    let d = TempDir::new().unwrap();
    fs::copy(data("heldout/camera.png"), d.path().join("camera.png")).unwrap();
    d
}

const TINY: &[&str] = &[
    "--epochs",
    "1",
    "--limit-patches",
    "32",
    "--batch-size",
    "16",
    "--no-augment",
];

fn train_args<'a>(dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["train", "--train-dir", dir];
    a.extend_from_slice(TINY);
    a.extend_from_slice(extra);
    a
}

#[test]
fn gen_basis_writes_matrix_and_tiles() {
    let out = TempDir::new().unwrap();
    ok(&ttdsr(out.path(), &["gen-basis", "--n", "8"]));
    let txt = fs::read_to_string(out.path().join("basis_8.txt")).unwrap();
    let rows: Vec<Vec<f64>> = txt
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    // Row 0 is the constant polynomial.
    assert!(rows[0]
        .iter()
        .all(|v| (v - 8f64.sqrt().recip()).abs() < 1e-12));
    let png = image::open(out.path().join("kernels_8.png")).unwrap();
    assert_eq!((png.width(), png.height()), (71, 71));
    assert!(out.path().join("run-record.txt").exists());

    let again = TempDir::new().unwrap();
    ok(&ttdsr(again.path(), &["gen-basis", "--n", "8"]));
    assert_eq!(
        txt,
        fs::read_to_string(again.path().join("basis_8.txt")).unwrap()
    );
}

#[test]
fn analyze_freq_reports_sixty_four_channels() {
    let out = TempDir::new().unwrap();
    let img = data("heldout/coins.png");
    let o = ttdsr(
        out.path(),
        &[
            "analyze-freq",
            "--image",
            img.to_str().unwrap(),
            "--scale",
            "3",
        ],
    );
    ok(&o);
    let tsv = fs::read_to_string(out.path().join("freq_profile.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 64);
    assert!(rows[0].starts_with("0\t0\t0\t"));

    // Scale 1 leaves the image untouched, so nothing is lost.
    let o = ttdsr(
        out.path(),
        &[
            "analyze-freq",
            "--image",
            img.to_str().unwrap(),
            "--scale",
            "1",
        ],
    );
    ok(&o);
    let tsv = fs::read_to_string(out.path().join("freq_profile.tsv")).unwrap();
    for row in tsv.lines().skip(1) {
        let v: f64 = row.rsplit('\t').next().unwrap().parse().unwrap();
        assert!(v.abs() < 1e-12, "{row}");
    }
}

#[test]
fn training_is_reproducible_and_checkpoint_is_usable() {
    let train = data("train");
    let dir = train.to_str().unwrap();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    ok(&ttdsr(a.path(), &train_args(dir, &[])));
    ok(&ttdsr(b.path(), &train_args(dir, &[])));
    let log = fs::read_to_string(a.path().join("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(log, fs::read_to_string(b.path().join("loss.log")).unwrap());
    assert_eq!(
        fs::read(a.path().join("model.ckpt")).unwrap(),
        fs::read(b.path().join("model.ckpt")).unwrap()
    );
    let itcl = image::open(a.path().join("itcl_kernels.png")).unwrap();
    assert_eq!(itcl.width(), 71);
    let record = fs::read_to_string(a.path().join("run-record.txt")).unwrap();
    assert!(record.contains("epochs = 1"), "{record}");

    // Super-resolve a colour image with the fresh checkpoint.
    let model = a.path().join("model.ckpt");
    let input = data("heldout/chelsea.png");
    let src = image::open(&input).unwrap();
    let sr = a.path().join("chelsea_x2.png");
    ok(&ttdsr(
        a.path(),
        &[
            "sr",
            "--model",
            model.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--scale",
            "2",
            "--output",
            sr.to_str().unwrap(),
        ],
    ));
    let up = image::open(&sr).unwrap();
    assert_eq!(
        (up.width(), up.height()),
        (2 * src.width(), 2 * src.height())
    );
    assert!(up.color().has_color());

    let held = one_image_dir();
    ok(&ttdsr(
        a.path(),
        &[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--dir",
            held.path().to_str().unwrap(),
            "--scale",
            "3",
        ],
    ));
    let scores = fs::read_to_string(a.path().join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), 2, "{scores}");
}

#[test]
fn bicubic_eval_matches_its_own_baseline() {
    let out = TempDir::new().unwrap();
    let held = one_image_dir();
    ok(&ttdsr(
        out.path(),
        &[
            "eval",
            "--dir",
            held.path().to_str().unwrap(),
            "--scale",
            "3",
        ],
    ));
    let scores = fs::read_to_string(out.path().join("scores.tsv")).unwrap();
    let row: Vec<&str> = scores.lines().nth(1).unwrap().split('\t').collect();
    // path, psnr, ssim, bicubic psnr, bicubic ssim
    assert_eq!(row[1], row[3]);
    assert_eq!(row[2], row[4]);
    assert!(out.path().join("scores.txt").exists());
}

#[test]
fn sweep_tabulates_each_split_point() {
    let out = TempDir::new().unwrap();
    let held = one_image_dir();
    let train = data("train");
    let mut args = vec!["sweep-t", "--train-dir", train.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&[
        "--branch-width",
        "2",
        "--t-list",
        "2,9",
        "--eval-dir",
        held.path().to_str().unwrap(),
    ]);
    ok(&ttdsr(out.path(), &args));
    let tsv = fs::read_to_string(out.path().join("sweep.tsv")).unwrap();
    let ts: Vec<&str> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(ts, ["2", "9"]);
    for t in ["2", "9"] {
        assert!(out.path().join(format!("model_T{t}.ckpt")).exists());
        assert!(out.path().join(format!("loss_T{t}.log")).exists());
    }
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let out = TempDir::new().unwrap();
    let missing = out.path().join("nope.png");
    let o = ttdsr(
        out.path(),
        &["analyze-freq", "--image", missing.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(3));

    let cfg = out.path().join("bad.conf");
    fs::write(&cfg, "this line has no equals sign\n").unwrap();
    let o = ttdsr(
        out.path(),
        &["--config", cfg.to_str().unwrap(), "gen-basis"],
    );
    assert_eq!(o.status.code(), Some(2));

    let o = ttdsr(out.path(), &["gen-basis", "--n", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let train = data("train");
    let o = ttdsr(
        out.path(),
        &train_args(train.to_str().unwrap(), &["--split", "64"]),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_directory_from_environment_and_config() {
    let tmp = TempDir::new().unwrap();
    let env_out = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_ttdsr"))
        .args(["gen-basis", "--n", "4"])
        .env("TTDSR_OUT_DIR", &env_out)
        .output()
        .unwrap();
    ok(&o);
    assert!(env_out.join("basis_4.txt").exists());

    // A config file supplies defaults; the flag still wins.
    let cfg = tmp.path().join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# defaults\nn = 5\nout = {}\n",
            tmp.path().join("from-cfg").display()
        ),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ttdsr"))
        .args(["--config", cfg.to_str().unwrap(), "gen-basis"])
        .env_remove("TTDSR_OUT_DIR")
        .output()
        .unwrap();
    ok(&o);
    assert!(tmp.path().join("from-cfg/basis_5.txt").exists());
    let flag_out = tmp.path().join("from-flag");
    ok(&ttdsr(
        &flag_out,
        &["--config", cfg.to_str().unwrap(), "gen-basis", "--n", "6"],
    ));
    assert!(flag_out.join("basis_6.txt").exists());
}
