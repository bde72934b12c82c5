use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mmot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmot"))
        .args(args)
        .output()
        .expect("failed to launch mmot")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 8-bit binary PGM with a pixel function `f(x, y)`, top row first.
fn write_pgm(path: &Path, n: usize, f: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{n} {n}\n255\n").into_bytes();
    for y in 0..n {
        for x in 0..n {
            bytes.push(f(x, y));
        }
    }
    fs::write(path, bytes).unwrap();
}

fn disc(cx: f64, cy: f64, r: f64) -> impl Fn(usize, usize) -> u8 {
    move |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        if dx * dx + dy * dy <= r * r {
            255
        } else {
            0
        }
    }
}

fn blob(cx: f64, cy: f64, s: f64) -> impl Fn(usize, usize) -> u8 {
    move |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (255.0 * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()).round() as u8
    }
}

/// Reads an 8-bit P5 file written by the tool; returns pixels.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let (w, h) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    (w, h, bytes[pos + 1..].to_vec())
}

type Pixels = Box<dyn Fn(usize, usize) -> u8>;

fn normalized(pixels: &[u8]) -> Vec<f64> {
    let total: f64 = pixels.iter().map(|&p| p as f64).sum();
    pixels.iter().map(|&p| p as f64 / total).collect()
}

fn identical_config(dir: &Path) -> PathBuf {
    write_pgm(&dir.join("a.pgm"), 24, blob(12.0, 10.0, 3.0));
    fs::copy(dir.join("a.pgm"), dir.join("b.pgm")).unwrap();
    let cfg = dir.join("problem.cfg");
    fs::write(
        &cfg,
        "[graph]\nmarginal = 1 a.pgm\nmarginal = 2 b.pgm\nedge = 1 2\n\n[solver]\nmax_iters = 20\n\n[output]\ndir = out\n",
    )
    .unwrap();
    cfg
}

#[test]
fn solve_identical_marginals_costs_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = identical_config(tmp.path());
    let out = mmot(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let value: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("objective "))
        .expect("objective line")
        .parse()
        .unwrap();
    assert!(value.abs() < 1e-12, "{text}");
    let dir = tmp.path().join("out");
    assert!(dir.join("history.csv").is_file());
    for i in 1..=2 {
        let raw = fs::read(dir.join(format!("potential_{i}.f64"))).unwrap();
        assert_eq!(&raw[..8], b"MMOTF64\0");
        assert_eq!(raw.len(), 16 + 8 * 24 * 24);
    }
}

#[test]
fn solve_history_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    write_pgm(&tmp.path().join("a.pgm"), 24, blob(8.0, 9.0, 3.0));
    write_pgm(&tmp.path().join("b.pgm"), 24, blob(15.0, 13.0, 3.5));
    write_pgm(&tmp.path().join("c.pgm"), 24, blob(11.0, 16.0, 2.5));
    let cfg = tmp.path().join("p.cfg");
    fs::write(
        &cfg,
        "[graph]\nmarginal 1 a.pgm\nmarginal 2 b.pgm\nmarginal 3 c.pgm\nedge 1 2\nedge 2 3 0.5\nedge 3 1\n\
         [solver]\nmax_iters = 15\nroot = cycle\n[output]\nwrite_potentials = no\n",
    )
    .unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        let out = mmot(&["solve", "--config", cfg.to_str().unwrap(), "-o", dir.to_str().unwrap()]);
        assert!(matches!(out.status.code(), Some(0 | 3)), "{}", stderr(&out));
        runs.push(fs::read(dir.join("history.csv")).unwrap());
        assert!(!dir.join("potential_1.f64").exists());
    }
    assert!(runs[0].len() > 60);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn solve_not_converged_exits_3() {
    let tmp = TempDir::new().unwrap();
    write_pgm(&tmp.path().join("a.pgm"), 24, blob(6.0, 6.0, 2.5));
    write_pgm(&tmp.path().join("b.pgm"), 24, blob(17.0, 16.0, 2.5));
    let cfg = tmp.path().join("p.cfg");
    fs::write(&cfg, "[graph]\nmarginal = 1 a.pgm\nmarginal = 2 b.pgm\nedge = 1 2\n").unwrap();
    let out = mmot(&["solve", "--config", cfg.to_str().unwrap(), "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stdout(&out).contains("stop MaxIters"));
}

#[test]
fn missing_image_exits_2_with_path() {
    let tmp = TempDir::new().unwrap();
    write_pgm(&tmp.path().join("a.pgm"), 8, blob(4.0, 4.0, 2.0));
    let cfg = tmp.path().join("p.cfg");
    fs::write(&cfg, "[graph]\nmarginal = 1 a.pgm\nmarginal = 2 nowhere.pgm\nedge = 1 2\n").unwrap();
    let out = mmot(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.pgm"), "{}", stderr(&out));
}

#[test]
fn missing_config_exits_2() {
    let out = mmot(&["solve", "--config", "/nonexistent/problem.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn parse_errors_exit_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("p.cfg");
    fs::write(&cfg, "[graph]\nmarginal = 1 a.pgm\n[solver]\nmax_iters = lots\n").unwrap();
    let out = mmot(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
    assert_eq!(mmot(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mmot(&["--help"]).status.code(), Some(0));
}

#[test]
fn barycenter_rejects_bad_weights() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.pgm");
    write_pgm(&a, 8, blob(4.0, 4.0, 2.0));
    let a = a.to_str().unwrap();
    let o = tmp.path().join("o.pgm");
    let o = o.to_str().unwrap();
    let out = mmot(&["barycenter", "--weights", "0.5,0.6", a, a, "-o", o]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sum"), "{}", stderr(&out));
    let out = mmot(&["barycenter", "--weights", "0.2,0.3,0.5", a, a, "-o", o]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn barycenter_of_identical_images_is_the_image() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.pgm");
    write_pgm(&a, 32, blob(14.0, 18.0, 4.0));
    let o = tmp.path().join("o.pgm");
    let (a_s, o_s) = (a.to_str().unwrap(), o.to_str().unwrap());
    let out = mmot(&["barycenter", "--weights", "0.5,0.5", a_s, a_s, "-o", o_s]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (w, h, got) = read_pgm(&o);
    let (_, _, want) = read_pgm(&a);
    assert_eq!((w, h), (32, 32));
    let l1: f64 = normalized(&got).iter().zip(normalized(&want)).map(|(x, y)| (x - y).abs()).sum();
    assert!(l1 < 1e-3, "L1 {l1}");
}

#[test]
fn atlas_writes_tiles_and_keeps_corners() {
    let tmp = TempDir::new().unwrap();
    let n = 32;
    let shapes: [(&str, Pixels); 4] = [
        ("disc.pgm", Box::new(disc(16.0, 16.0, 7.0))),
        ("square.pgm", Box::new(|x, y| if (9..23).contains(&x) && (9..23).contains(&y) { 255 } else { 0 })),
        ("bar.pgm", Box::new(|x, y| if (6..26).contains(&x) && (13..19).contains(&y) { 255 } else { 0 })),
        ("ring.pgm", Box::new(|x, y| {
            let d = ((x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2)).sqrt();
            if (5.0..10.0).contains(&d) { 255 } else { 0 }
        })),
    ];
    let mut corners = Vec::new();
    for (name, f) in &shapes {
        let p = tmp.path().join(name);
        write_pgm(&p, n, f);
        corners.push(p.to_str().unwrap().to_string());
    }
    let dir = tmp.path().join("atlas");
    let mut args = vec!["--jobs", "2", "atlas", "--steps", "3", "--max-iters", "30"];
    args.extend(corners.iter().map(String::as_str));
    args.extend(["-o", dir.to_str().unwrap()]);
    let out = mmot(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let index = fs::read_to_string(dir.join("index.txt")).unwrap();
    assert_eq!(index.lines().filter(|l| !l.starts_with('#')).count(), 9);
    for r in 0..3 {
        for c in 0..3 {
            assert!(dir.join(format!("tile_{r}_{c}.pgm")).is_file());
        }
    }
    // (row, col) of each corner: weights (1,0,0,0) at u = v = 0 and so on.
    for (k, (r, c)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
        let (_, _, tile) = read_pgm(&dir.join(format!("tile_{r}_{c}.pgm")));
        let (_, _, input) = read_pgm(Path::new(&corners[k]));
        // Tiles are rescaled to a peak of 255, which these inputs already have.
        assert_eq!(tile, input, "corner {k}");
    }
}

#[test]
fn atlas_png_output() {
    let tmp = TempDir::new().unwrap();
    let mut corners = Vec::new();
    for (k, (x, y)) in [(5.0, 5.0), (10.0, 5.0), (5.0, 10.0), (10.0, 10.0)].into_iter().enumerate() {
        let p = tmp.path().join(format!("c{k}.pgm"));
        write_pgm(&p, 16, blob(x, y, 2.0));
        corners.push(p.to_str().unwrap().to_string());
    }
    let dir = tmp.path().join("tiles");
    let mut args = vec!["atlas", "--steps", "2", "--format", "png"];
    args.extend(corners.iter().map(String::as_str));
    args.extend(["-o", dir.to_str().unwrap()]);
    let out = mmot(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let png = fs::read(dir.join("tile_1_1.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn validate_reports_tap() {
    let out = mmot(&["validate", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    let out = mmot(&["validate", "oracle"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("# suite oracle"));
    assert!(text.lines().any(|l| l.starts_with("1..")));
    assert!(!text.contains("not ok"));
}
