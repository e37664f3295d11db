use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_SPEC: &str = "\
static_count = 1200
object_count = 1
gaussians_per_object = 60
frames = 12
width = 96
height = 72
focal = 80
max_tracks = 300
seed = 3
";

fn dynsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsplat")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn simulate_small(dir: &Path, frames: usize) -> String {
    let spec = dir.join("scene.txt");
    fs::write(&spec, SMALL_SPEC.replace("frames = 12", &format!("frames = {frames}"))).unwrap();
    let seq = dir.join("seq");
    let o = dynsplat(&["simulate", spec.to_str().unwrap(), seq.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    seq.to_str().unwrap().to_string()
}

#[test]
fn simulate_run_eval_render() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = simulate_small(tmp.path(), 12);
    for f in ["rgb.txt", "depth.txt", "groundtruth.txt", "labels.txt"] {
        assert!(Path::new(&seq).join(f).exists(), "{f}");
    }
    let out = tmp.path().join("out");
    let o = dynsplat(&["run", &seq, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.txt", "report.txt", "report.csv", "timing.csv", "map.txt", "loss_trace.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("ate_rmse"));

    let traj = out.join("trajectory.txt");
    let gt = Path::new(&seq).join("groundtruth.txt");
    let o = dynsplat(&["eval", traj.to_str().unwrap(), gt.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    let rmse: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("ate_rmse "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(rmse.is_finite() && rmse < 0.05, "{rmse}");

    for ext in ["ppm", "png"] {
        let img = tmp.path().join(format!("view.{ext}"));
        let o = dynsplat(&[
            "render",
            out.join("map.txt").to_str().unwrap(),
            gt.to_str().unwrap(),
            img.to_str().unwrap(),
            "--index",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(fs::metadata(&img).unwrap().len() > 0);
    }
}

#[test]
fn ablate_writes_both_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = simulate_small(tmp.path(), 12);
    let out = tmp.path().join("abl");
    let o = dynsplat(&["ablate", &seq, "--disable", "crf", "--disable", "flow", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("full") && stdout.contains("ablated"));
    assert!(out.join("full/report.txt").exists() && out.join("ablated/report.txt").exists());
    let abl = fs::read_to_string(out.join("ablated/report.txt")).unwrap();
    assert!(abl.contains("crf.enabled = false"), "{abl}");
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = dynsplat(&["run", "missing-seq", "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 1);

    let spec = tmp.path().join("bad_spec.txt");
    fs::write(&spec, "frames = many\n").unwrap();
    let o = dynsplat(&["simulate", spec.to_str().unwrap(), tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 1);

    let o = dynsplat(&["ablate", "seq", "--disable", "tracking"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dynsplat(&["run", tmp.path().join("nothing").to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 2);

    let seq = simulate_small(tmp.path(), 9);
    let o = dynsplat(&["run", &seq, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bootstrap"));

    let short = tmp.path().join("short.txt");
    fs::write(&short, "0.0 0 0 0 0 0 0 1\n").unwrap();
    let o = dynsplat(&["eval", short.to_str().unwrap(), short.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&dynsplat(&["--help"])), 0);
}
