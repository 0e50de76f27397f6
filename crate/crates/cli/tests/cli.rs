use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn pcomplete(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcomplete")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pcomplete(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = pcomplete(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize) {
    ok(&["synth", "--out", s(dir), "--count", &count.to_string(), "--seed", "7"]);
}

#[test]
fn synth_layout_and_repeatability() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, 8);
    synth(&b, 8);
    let files: Vec<_> = fs::read_dir(a.join("pairs")).unwrap().collect();
    assert_eq!(files.len(), 16);
    assert!(a.join("index.json").is_file());
    for name in ["index.json", "pairs/0003.partial.xyz", "pairs/0007.complete.xyz"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let (c, _) = code(&["synth", "--out", s(&t.path().join("c")), "--count", "0"]);
    assert_eq!(c, 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&["frobnicate"]).0, 1);
    assert_eq!(code(&["complete", "--input", "x.xyz", "--output", "y.xyz"]).0, 1);
    assert_eq!(code(&["eval", "--pred", ".", "--metrics", "mmd"]).0, 1);
    assert_eq!(code(&["gradcheck", "--inject", "nonsense"]).0, 1);
    assert!(pcomplete(&["--help"]).status.success());
}

#[test]
fn project_defaults_and_bad_input() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("d"), 1);
    let input = t.path().join("d/pairs/0000.partial.xyz");
    ok(&["project", "--input", s(&input), "--out", s(&t.path().join("desk"))]);
    ok(&["project", "--input", s(&input), "--out", s(&t.path().join("pcn")), "--profile", "pcn"]);
    for (dir, res) in [("desk", 64usize), ("pcn", 224)] {
        for v in 0..3 {
            let stem = t.path().join(dir).join(format!("view{v}"));
            let (map, view, fov) = pcomplete::selfview::read_depth(&stem).unwrap();
            assert_eq!((map.width, map.height), (res, res));
            assert!((view.distance() - 0.7).abs() < 1e-6);
            assert!(fov > 0.0);
        }
        assert!(!t.path().join(dir).join("view3.depth").exists());
    }
    let bad = t.path().join("bad.xyz");
    fs::write(&bad, "0 0 0\n# comment\n1 2\n").unwrap();
    let (c, err) = code(&["project", "--input", s(&bad), "--out", s(&t.path().join("x"))]);
    assert_eq!(c, 2);
    assert!(err.contains(":3:"), "{err}");
}

#[test]
fn train_complete_eval_round() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    let run = t.path().join("run");
    synth(&data, 2);

    let start = Instant::now();
    ok(&["train", "--data", s(&data), "--out", s(&run), "--steps", "1"]);
    assert!(start.elapsed().as_secs_f64() < 30.0);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    assert!(trace.starts_with("step,loss,lr\n0,"));
    ok(&["train", "--data", s(&data), "--out", s(&run), "--resume", s(&run), "--steps", "1"]);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().nth(2).unwrap().split(',').next(), Some("1"));

    let pred = t.path().join("pred");
    let input = data.join("pairs/0000.partial.xyz");
    let out = pred.join("0000.xyz");
    ok(&["complete", "--ckpt", s(&run), "--input", s(&input), "--output", s(&out), "--dump-stages"]);
    let first = fs::read(&out).unwrap();
    let p2 = pcomplete::PointCloud::<f32>::read_xyz(&out).unwrap();
    assert_eq!(p2.len(), 512);
    for (name, n) in [("coarse", 128), ("p0", 128), ("p1", 256)] {
        let c = pcomplete::PointCloud::<f32>::read_xyz(&pred.join(format!("0000.{name}.xyz"))).unwrap();
        assert_eq!(c.len(), n, "{name}");
    }
    ok(&["complete", "--ckpt", s(&run), "--input", s(&input), "--output", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), first);

    let report = ok(&["eval", "--pred", s(&pred), "--gt", s(&data)]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "id cd_l1 cd_l2 dcd f1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0000 "));
    assert!(lines[2].starts_with("MEAN "));
}

#[test]
fn numerical_blowup_exits_three() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    synth(&data, 1);
    let cfg = t.path().join("hot.toml");
    fs::write(&cfg, "profile = \"desk\"\n[train]\nlr = 1e30\n").unwrap();
    let (c, err) = code(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&t.path().join("r")), "--steps", "3"]);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn eval_identical_sets_and_mean_line() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    synth(&data, 3);
    let same = t.path().join("same");
    let shifted = t.path().join("shifted");
    fs::create_dir_all(&same).unwrap();
    fs::create_dir_all(&shifted).unwrap();
    for i in 0..3 {
        let gt = data.join(format!("pairs/{i:04}.complete.xyz"));
        fs::copy(&gt, same.join(format!("{i:04}.xyz"))).unwrap();
        let c = pcomplete::PointCloud::<f64>::read_xyz(&gt).unwrap();
        let d = 0.01 * (i + 1) as f64;
        c.map(|p| [p[0] + d, p[1], p[2]]).write_xyz(&shifted.join(format!("{i:04}.xyz"))).unwrap();
    }
    let report = ok(&["eval", "--pred", s(&same), "--gt", s(&data)]);
    for line in report.lines().skip(1) {
        let cols: Vec<&str> = line.split(' ').collect();
        assert_eq!(&cols[1..], &["0.000000", "0.000000", "0.000000", "1.000000"], "{line}");
    }

    let report = ok(&["eval", "--pred", s(&shifted), "--gt", s(&data)]);
    let rows: Vec<Vec<f64>> = report
        .lines()
        .skip(1)
        .map(|l| l.split(' ').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    for k in 0..4 {
        let mean = rows[..3].iter().map(|r| r[k]).sum::<f64>() / 3.0;
        assert!((rows[3][k] - mean).abs() <= 1.5e-6, "column {k}");
    }

    let only = ok(&["eval", "--pred", s(&same), "--gt", s(&data), "--metrics", "f1"]);
    assert!(only.starts_with("id f1\n"));
    let m = ok(&["eval", "--pred", s(&same), "--metrics", "mmd", "--refs", s(&same)]);
    assert_eq!(m.trim(), "mmd 0.000000");
}

#[test]
fn gradcheck_table_and_injected_fault() {
    let start = Instant::now();
    let table = ok(&["gradcheck"]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(table.lines().skip(1).all(|l| l.ends_with("PASS")));
    assert!(table.contains("conv_transpose_1d"));
    let (c, err) = code(&["gradcheck", "--inject", "matmul"]);
    assert_eq!(c, 3);
    assert!(err.contains("matmul"), "{err}");
}
