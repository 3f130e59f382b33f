//! End-to-end runs of the `hazeloop` binary on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hazeloop::ckpt::read_checkpoint;
use hazeloop::image_io::read_image;
use hazeloop::report::parse_report_csv;

const TINY: &str = "\
data.count = 4
data.size = 16
model.channels = 4,8,8
train.epochs = 1
train.lr = 1e-3
train.batch = 2
tasks.epochs = 1
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hazeloop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", o.status, stdout(o), String::from_utf8_lossy(&o.stderr));
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), format!("{TINY}data.out_dir = out\n{extra}")).unwrap();
    dir
}

fn train_both(dir: &Path) {
    ok(&run(dir, &["--config", "run.cfg", "train"]));
    ok(&run(dir, &["--config", "run.cfg", "--set", "train.stage=2", "train"]));
}

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let dir = setup("data.count = 10\n");
    let o = run(dir.path(), &["--config", "run.cfg", "synth"]);
    ok(&o);
    assert!(stdout(&o).contains("data.count = 10"), "resolved config is printed");
    let manifest = fs::read_to_string(dir.path().join("out/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    let first = fs::read(dir.path().join("out/hazy/train0003.png")).unwrap();
    ok(&run(dir.path(), &["--config", "run.cfg", "synth"]));
    assert_eq!(fs::read(dir.path().join("out/hazy/train0003.png")).unwrap(), first);
    assert!(dir.path().join("out/gt/train0003.boxes.csv").exists());
}

#[test]
fn zero_beta_synthesis_leaves_images_clear() {
    let dir = setup("haze.beta_min = 0\nhaze.beta_max = 0\n");
    ok(&run(dir.path(), &["--config", "run.cfg", "synth"]));
    for i in 0..4 {
        let clear = read_image(&dir.path().join(format!("out/clear/train{i:04}.png"))).unwrap();
        let hazy = read_image(&dir.path().join(format!("out/hazy/train{i:04}.png"))).unwrap();
        assert_eq!(clear, hazy);
    }
}

#[test]
fn training_stages_write_their_namespaces() {
    let dir = setup("");
    ok(&run(dir.path(), &["--config", "run.cfg", "train"]));
    let s1 = read_checkpoint(&dir.path().join("out/idn.ckpt")).unwrap();
    assert!(!s1.is_empty() && s1.iter().all(|(n, _)| n.starts_with("idn.")));
    let log = fs::read_to_string(dir.path().join("out/stage1.log")).unwrap();
    assert!(log.starts_with("epoch,split,l1,ratio,mcr,down,total,ordering_fraction\n"));

    ok(&run(dir.path(), &["--config", "run.cfg", "--set", "train.stage=2", "train"]));
    let s2 = read_checkpoint(&dir.path().join("out/stage2.ckpt")).unwrap();
    assert!(s2.iter().any(|(n, _)| n.starts_with("tfga.")));
    assert!(s2.iter().any(|(n, _)| n.starts_with("igm.")));
    let idn2: Vec<_> = s2.iter().filter(|(n, _)| n.starts_with("idn.")).cloned().collect();
    assert_eq!(idn2, s1, "stage 2 preserves the stage-1 tensors");
    let log = fs::read_to_string(dir.path().join("out/stage2.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("1,val,")));
}

#[test]
fn config_errors_exit_with_code_1() {
    let dir = setup("loss.beta1 = 0.3\nloss.beta2 = 0.3\n");
    let o = run(dir.path(), &["--config", "run.cfg", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out/idn.ckpt").exists(), "rejected before training");
    let o = run(dir.path(), &["--config", "run.cfg", "--set", "loss.delta=1", "train"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infer_routes_and_traces() {
    let dir = setup("");
    ok(&run(dir.path(), &["--config", "run.cfg", "synth"]));
    ok(&run(dir.path(), &["--config", "run.cfg", "train"]));

    let o = run(dir.path(), &["--config", "run.cfg", "infer", "out/hazy/train0000.png", "--instruction", "segment the scene", "-o", "open.png"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(dir.path().join("open.png").exists());

    ok(&run(dir.path(), &["--config", "run.cfg", "--set", "train.stage=2", "train"]));
    let o = run(dir.path(), &["--config", "run.cfg", "--set", "loop.k_max=2", "infer", "out/hazy/train0000.png", "--instruction", "segment the scene", "-o", "closed.png"]);
    ok(&o);
    let trace = fs::read_to_string(dir.path().join("closed.png.trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("seg")));

    let o = run(dir.path(), &["--config", "run.cfg", "infer", "out/hazy/train0000.png", "--instruction", "enhance the photo", "-o", "x.png"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_reports_every_entry_with_means() {
    let dir = setup("data.manifest = out/manifest.tsv\n");
    let o = run(dir.path(), &["--config", "run.cfg", "eval"]);
    assert_eq!(o.status.code(), Some(2), "missing manifest is an I/O error");

    ok(&run(dir.path(), &["--config", "run.cfg", "synth"]));
    ok(&run(dir.path(), &["--config", "run.cfg", "train"]));
    ok(&run(dir.path(), &["--config", "run.cfg", "eval"]));
    let text = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(text.starts_with("image_id,psnr,ssim,perceptual,"));
    let rep = parse_report_csv(&text).unwrap();
    assert_eq!(rep.rows.len(), 4);
    assert!(!rep.columns.iter().any(|c| c.starts_with("closed_")));
    let mean_line: Vec<f64> = text.lines().last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    for (c, m) in rep.columns.iter().zip(&mean_line) {
        assert!((rep.mean(c).unwrap() - m).abs() <= 1e-6, "{c}");
    }

    ok(&run(dir.path(), &["--config", "run.cfg", "--set", "train.stage=2", "train"]));
    ok(&run(dir.path(), &["--config", "run.cfg", "eval"]));
    let rep = parse_report_csv(&fs::read_to_string(dir.path().join("out/report.csv")).unwrap()).unwrap();
    assert!(rep.columns.iter().any(|c| c == "closed_seg_miou"));
}

#[test]
fn end_to_end_runs_are_byte_identical() {
    let a = setup("");
    let b = setup("");
    for d in [a.path(), b.path()] {
        ok(&run(d, &["--config", "run.cfg", "synth"]));
        train_both(d);
        ok(&run(d, &["--config", "run.cfg", "eval"]));
    }
    for f in ["idn.ckpt", "tasks.ckpt", "stage2.ckpt", "report.csv", "stage1.log", "stage2.log"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}
