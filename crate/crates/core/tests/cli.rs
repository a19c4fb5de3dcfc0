use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_spirit-sde");

fn config(dir: &Path, methods: &str, extra: &str) -> String {
    format!(
        r#"output_dir = "{}"
methods = [{methods}]

[phantom]
size = [32, 32]
kind = "shepp-logan"
seed = 1

[coils]
count = 4
seed = 2

[mask]
pattern = "variable-density-random"
acceleration = 3.0
acs = [10, 10]
seed = 3

[schedule]
beta_min = 0.01
beta_max = 20.0
n_steps = 60

[sampler]
lambda1 = 1.0
lambda2 = 1.0
r = 0.16
n_steps = 60
m_corrector = 1
seed = 4
{extra}"#,
        dir.display()
    )
}

const ALL: &str = r#""zero-filled", "cg-spirit", "gd-spirit", "spirit-diffusion", "ve-sde""#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn minimal_zero_filled_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &config(&out_dir, r#""zero-filled""#, ""));
    ok(&run(&["run", "--config", s(&cfg)]));
    assert!(out_dir.join("recon-zero-filled.cxt").exists());
    assert!(out_dir.join("recon-zero-filled.png").exists());
    let tsv = fs::read_to_string(out_dir.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("zero-filled\t3.0000\t"));
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(&tmp.path().join("unused"), ALL, ""));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&run(&["run", "--config", s(&cfg), "--output-dir", s(&a)]));
    ok(&run(&["run", "--config", s(&cfg), "--output-dir", s(&b)]));
    let ma = fs::read(a.join("metrics.tsv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.tsv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 6);
    for f in ["recon-spirit-diffusion.cxt", "recon-ve-sde.cxt", "recon-cg-spirit.cxt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn concurrent_runs_do_not_interfere() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config(&tmp.path().join("unused"), r#""zero-filled", "cg-spirit", "spirit-diffusion""#, ""));
    let dirs: Vec<_> = (0..3).map(|k| tmp.path().join(format!("run{k}"))).collect();
    let children: Vec<_> = dirs
        .iter()
        .map(|d| Command::new(BIN).args(["run", "--config", s(&cfg), "--output-dir", s(d)]).spawn().unwrap())
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    let first = fs::read(dirs[0].join("metrics.tsv")).unwrap();
    for d in &dirs[1..] {
        assert_eq!(fs::read(d.join("metrics.tsv")).unwrap(), first);
    }
}

#[test]
fn eval_of_reference_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &config(&out_dir, r#""zero-filled""#, ""));
    ok(&run(&["simulate", "--config", s(&cfg)]));
    let r = out_dir.join("reference.cxt");
    let eval_dir = tmp.path().join("eval");
    ok(&run(&["eval", "--reference", s(&r), "--test", s(&r), "--output-dir", s(&eval_dir)]));
    let tsv = fs::read_to_string(eval_dir.join("eval.tsv")).unwrap();
    let row: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 300.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 1.0);

    // complex tensors are not magnitude images
    let out = run(&["eval", "--reference", s(&out_dir.join("truth.cxt")), "--test", s(&r)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn staged_recon_is_bit_identical_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let cfg = write_config(tmp.path(), &config(&full, r#""cg-spirit", "spirit-diffusion""#, ""));
    ok(&run(&["run", "--config", s(&cfg)]));

    let staged = tmp.path().join("staged");
    ok(&run(&["simulate", "--config", s(&cfg), "--output-dir", s(&staged)]));
    ok(&run(&["calibrate", "--config", s(&cfg), "--output-dir", s(&staged)]));
    let meta = fs::read_to_string(staged.join("metadata.toml")).unwrap();
    assert!(meta.contains("calib_residual"));
    for m in ["cg-spirit", "spirit-diffusion"] {
        ok(&run(&["recon", "--config", s(&cfg), "--output-dir", s(&staged), "--method", m]));
        let f = format!("recon-{m}.cxt");
        assert_eq!(fs::read(full.join(&f)).unwrap(), fs::read(staged.join(&f)).unwrap(), "{m}");
    }
    for f in ["measurement.cxt", "kernel.cxt", "maps.cxt", "mask.cxt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(staged.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn metadata_reruns_the_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let cfg = write_config(tmp.path(), &config(&a, r#""zero-filled", "ve-sde""#, ""));
    ok(&run(&["run", "--config", s(&cfg), "--seed", "9"]));
    let b = tmp.path().join("b");
    ok(&run(&["run", "--config", s(&a.join("metadata.toml")), "--output-dir", s(&b)]));
    assert_eq!(fs::read(a.join("metrics.tsv")).unwrap(), fs::read(b.join("metrics.tsv")).unwrap());
    assert_eq!(fs::read(a.join("recon-ve-sde.cxt")).unwrap(), fs::read(b.join("recon-ve-sde.cxt")).unwrap());
}

#[test]
fn trace_plot_from_run_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &config(&out_dir, r#""cg-spirit", "spirit-diffusion""#, ""));
    ok(&run(&["run", "--config", s(&cfg), "--trace"]));
    for m in ["cg-spirit", "spirit-diffusion"] {
        let input = out_dir.join(format!("trace-{m}.tsv"));
        let png = tmp.path().join(format!("{m}.png"));
        ok(&run(&["trace-plot", "--input", s(&input), "--output", s(&png)]));
        assert!(fs::metadata(&png).unwrap().len() > 0);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");

    let bad = config(&out_dir, "", "");
    let cfg = write_config(tmp.path(), &bad);
    let out = run(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let typo = config(&out_dir, r#""zero-filled""#, "").replace("count = 4", "cont = 4");
    let cfg = write_config(tmp.path(), &typo);
    let out = run(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    let out = run(&["run", "--config", s(&tmp.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(4));

    let diverging = config(
        &out_dir,
        r#""gd-spirit""#,
        "\n[classic]\nlambda_dc = 1.0\nmax_iters = 50\ntol = 1e-9\nstep_eta = 50.0\nstep_lambda = 50.0\nauto_step = false\n",
    );
    let cfg = write_config(tmp.path(), &diverging);
    let out = run(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gd_spirit") && err.contains("step"), "{err}");

    let cfg = write_config(tmp.path(), &config(&out_dir, r#""zero-filled""#, ""));
    let out = run(&["recon", "--config", s(&cfg), "--method", "cg-spirit", "--input-dir", s(&tmp.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn high_acceleration_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let body = format!(
        r#"output_dir = "{}"
methods = ["zero-filled", "spirit-diffusion"]

[phantom]
size = [64, 64]
kind = "shepp-logan"
seed = 1

[coils]
count = 8
seed = 11

[mask]
pattern = "variable-density-random"
acceleration = 7.6
acs = [16, 16]
seed = 5

[schedule]
beta_min = 0.01
beta_max = 20.0
n_steps = 1000

[sampler]
lambda1 = 10.0
lambda2 = 1.0
r = 0.16
n_steps = 1000
m_corrector = 0
seed = 1
"#,
        out_dir.display()
    );
    let cfg = write_config(tmp.path(), &body);
    ok(&run(&["run", "--config", s(&cfg)]));
    let tsv = fs::read_to_string(out_dir.join("metrics.tsv")).unwrap();
    let psnr: Vec<f64> = tsv.lines().skip(1).map(|l| l.split('\t').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(psnr.len(), 2);
    assert!(psnr[0] < psnr[1], "{tsv}");
}
