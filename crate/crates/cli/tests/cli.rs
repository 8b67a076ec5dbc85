use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const ROWS: usize = 28;

fn idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Ten learnable classes: label `c` lights rows `2c..2c+3`, plus a little
/// per-image texture.
fn write_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut pixels = Vec::with_capacity(n * ROWS * ROWS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 10;
            labels.push(c as u8);
            for r in 0..ROWS {
                for col in 0..ROWS {
                    let on = r >= 2 * c + 2 && r < 2 * c + 5 && (4..24).contains(&col);
                    let texture = ((i * 31 + r * 7 + col * 13) % 17) as u8;
                    pixels.push(if on { 200 + texture } else { texture });
                }
            }
        }
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx(0x803, &[n, ROWS, ROWS], &pixels)).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx(0x801, &[n], &labels)).unwrap();
    }
}

fn dropgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dropgate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_config(root: &Path, extra: &str) -> std::path::PathBuf {
    let path = root.join("tiny.txt");
    let text = format!(
        "dataset = permuted\ntasks = 2\nseeds = 0, 1\nhidden_width = 16\nmethods = sgd, sgd_dropout\n\
         data_dir = {}\nout_dir = {}\nsgd.epochs_per_task = 2\nsgd_dropout.epochs_per_task = 2\n{extra}",
        root.join("mnist").display(),
        root.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_summarize_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    write_mnist(&tmp.path().join("mnist"), 200, 50);
    let config = tiny_config(tmp.path(), "");
    let out = dropgate(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let exp = tmp.path().join("out/tiny");
    for name in ["sgd", "sgd_dropout"] {
        for seed in ["0", "1"] {
            let dir = exp.join(name).join(seed);
            for f in [
                "config.txt",
                "accuracy_matrix.csv",
                "curves.csv",
                "run.json",
                "profiles_after_task_1.csv",
                "profiles_after_task_2.csv",
                "heatmap_layer_0.csv",
                "heatmap_layer_1.csv",
            ] {
                assert!(dir.join(f).is_file(), "missing {}", dir.join(f).display());
            }
        }
    }
    let matrix = fs::read_to_string(exp.join("sgd/0/accuracy_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 3);
    let summary = fs::read_to_string(exp.join("summary.json")).unwrap();
    assert!(summary.contains("\"sgd_dropout\""));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sgd_dropout") && stdout.contains('±'), "{stdout}");

    let out = dropgate(&["summarize", "--out-dir", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    let run_dir = exp.join("sgd_dropout/0");
    let out = dropgate(&["analyze-gating", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(run_dir.join("gating.json")).unwrap();
    assert!(report.contains("\"consistency\"") && report.contains("\"overlap\""));
}

#[test]
fn identical_rerun_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    write_mnist(&tmp.path().join("mnist"), 100, 30);
    let config = tiny_config(tmp.path(), "");
    let args = ["run", "--config", config.to_str().unwrap(), "--seed-list", "3"];
    assert_eq!(code(&dropgate(&args)), 0);
    let matrix = tmp.path().join("out/tiny/sgd/3/accuracy_matrix.csv");
    let first = fs::metadata(&matrix).unwrap().modified().unwrap();
    let before = fs::read_to_string(&matrix).unwrap();
    assert_eq!(code(&dropgate(&args)), 0);
    assert_eq!(fs::metadata(&matrix).unwrap().modified().unwrap(), first);
    assert_eq!(fs::read_to_string(&matrix).unwrap(), before);
}

#[test]
fn same_seed_reproduces_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    write_mnist(&tmp.path().join("mnist"), 100, 30);
    let config = tiny_config(tmp.path(), "");
    let base = ["run", "--config", config.to_str().unwrap(), "--seed-list", "5"];
    assert_eq!(code(&dropgate(&base)), 0);
    let a = fs::read_to_string(tmp.path().join("out/tiny/sgd_dropout/5/accuracy_matrix.csv")).unwrap();
    let other = tmp.path().join("again");
    let out_dir = ["--out-dir", other.to_str().unwrap()];
    assert_eq!(code(&dropgate(&[&base[..], &out_dir[..]].concat())), 0);
    let b = fs::read_to_string(other.join("tiny/sgd_dropout/5/accuracy_matrix.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "sgd.lr = -1\nsgd.keep_prob = 2\n");
    let out = dropgate(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    // Every problem is reported, not just the first.
    assert!(err.contains("sgd.lr") && err.contains("sgd.keep_prob"), "{err}");

    assert_eq!(code(&dropgate(&["run", "--preset", "table9"])), 1);
    assert_eq!(code(&dropgate(&["run"])), 1);
    assert_eq!(code(&dropgate(&["run", "--config", "/nonexistent/x.txt"])), 1);
    assert_eq!(code(&dropgate(&["run", "--preset", "table1", "--seed-list", "a"])), 1);
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), "");
    let out = dropgate(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    // Header promises more images than the file holds.
    write_mnist(&tmp.path().join("mnist"), 20, 10);
    let images = tmp.path().join("mnist/train-images-idx3-ubyte");
    let bytes = fs::read(&images).unwrap();
    fs::write(&images, &bytes[..bytes.len() - 5]).unwrap();
    let out = dropgate(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&dropgate(&["summarize", "--out-dir", empty.to_str().unwrap()])), 2);
    assert_eq!(code(&dropgate(&["analyze-gating", "--run-dir", empty.to_str().unwrap()])), 2);
}

#[test]
fn inconsistent_task_counts_fail_to_summarize() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = tmp.path().join("exp");
    for (seed, csv) in [("0", "t,task_1\n1,0.9\n"), ("1", "t,task_1,task_2\n1,0.9,\n2,0.8,0.9\n")] {
        let dir = exp.join("sgd").join(seed);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("accuracy_matrix.csv"), csv).unwrap();
    }
    let out = dropgate(&["summarize", "--out-dir", exp.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("aggregation"));
}
