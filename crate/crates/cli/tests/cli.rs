use std::path::Path;
use std::process::{Command, Output};

use posefield::diffusion::standard_normal;
use posefield::mesh::{icosahedron, load_obj, save_obj};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn posefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posefield"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = posefield(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

const CONFIG: &str =
    "steps=4\nlr=1e-3\nbatch_size=2\nseed=3\nroute=jacobian\nk=6\nd=8\nm_neighbors=4\nstages=1\n";

/// A 4-pose dataset and a config in a fresh directory.
fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--spec",
        "identity-a",
        "--n",
        "4",
        "--seed",
        "1",
        "--out",
        &s(&dir.path().join("data")),
    ]);
    std::fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

#[test]
fn gen_data_writes_poses_template_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&[
        "gen-data",
        "--spec",
        "identity-b",
        "--n",
        "8",
        "--seed",
        "4",
        "--out",
        &s(&out),
    ]);
    let poses = (0..8)
        .filter(|i| out.join(format!("pose_{i:04}.obj")).exists())
        .count();
    assert_eq!(poses, 8);
    assert!(!out.join("pose_0008.obj").exists());
    let template = load_obj(out.join("template.obj")).unwrap();
    assert_eq!(template.face_count(), 400);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(
        manifest.lines().filter(|l| l.starts_with("pose_")).count(),
        8
    );

    let empty = posefield(&[
        "gen-data",
        "--spec",
        "identity-a",
        "--n",
        "0",
        "--out",
        &s(&dir.path().join("e")),
    ]);
    assert_eq!(empty.status.code(), Some(2));
    let bad_spec = posefield(&[
        "gen-data",
        "--spec",
        "nope",
        "--n",
        "1",
        "--out",
        &s(&dir.path().join("f")),
    ]);
    assert_ne!(bad_spec.status.code(), Some(0));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = setup(&CONFIG.replace("lr=1e-3\n", ""));
    let p = dir.path();
    let out = posefield(&[
        "train",
        "--config",
        &s(&p.join("run.cfg")),
        "--data",
        &s(&p.join("data")),
        "--out",
        &s(&p.join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    std::fs::write(p.join("typo.cfg"), format!("{CONFIG}stpes=3\n")).unwrap();
    let out = posefield(&[
        "train",
        "--config",
        &s(&p.join("typo.cfg")),
        "--data",
        &s(&p.join("data")),
        "--out",
        &s(&p.join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpes"));
    assert!(!p.join("t").exists());
}

#[test]
fn resume_continues_the_step_count() {
    let dir = setup(&CONFIG.replace("steps=4", "steps=2"));
    let p = dir.path();
    let (cfg, data) = (s(&p.join("run.cfg")), s(&p.join("data")));
    ok(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &data,
        "--out",
        &s(&p.join("a")),
    ]);
    std::fs::write(p.join("full.cfg"), CONFIG).unwrap();
    let full = s(&p.join("full.cfg"));
    let resumed = ok(&[
        "train",
        "--config",
        &full,
        "--data",
        &data,
        "--out",
        &s(&p.join("b")),
        "--resume",
        &s(&p.join("a/autoencoder.ckpt")),
    ]);
    assert!(resumed.starts_with("step 4 "), "{resumed}");
    ok(&[
        "train",
        "--config",
        &full,
        "--data",
        &data,
        "--out",
        &s(&p.join("c")),
    ]);
    let read = |d: &str| std::fs::read(p.join(d).join("autoencoder.ckpt")).unwrap();
    assert_eq!(read("b"), read("c"));
    let history = std::fs::read_to_string(p.join("b/history.csv")).unwrap();
    let steps: Vec<&str> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["2", "3"]);
}

#[test]
fn transfer_and_zero_step_refiner() {
    let dir = setup(&format!("{CONFIG}refine_steps=0\n"));
    let p = dir.path();
    ok(&[
        "gen-data",
        "--spec",
        "identity-b",
        "--n",
        "1",
        "--out",
        &s(&p.join("b")),
    ]);
    ok(&[
        "train",
        "--config",
        &s(&p.join("run.cfg")),
        "--data",
        &s(&p.join("data")),
        "--out",
        &s(&p.join("t")),
    ]);
    let ckpt = s(&p.join("t/autoencoder.ckpt"));
    let (source, target) = (
        s(&p.join("data/pose_0002.obj")),
        s(&p.join("b/template.obj")),
    );
    ok(&[
        "transfer",
        "--checkpoint",
        &ckpt,
        "--source-pose",
        &source,
        "--target-template",
        &target,
        "--out",
        &s(&p.join("x.obj")),
    ]);
    let moved = load_obj(p.join("x.obj")).unwrap();
    assert_eq!(moved.faces(), load_obj(&target).unwrap().faces());

    ok(&[
        "refine",
        "--checkpoint",
        &ckpt,
        "--data",
        &s(&p.join("data")),
        "--target-template",
        &target,
        "--config",
        &s(&p.join("run.cfg")),
        "--out",
        &s(&p.join("r")),
    ]);
    let history = std::fs::read_to_string(p.join("r/refine_history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("step,total,lap,edge,reg"));
    ok(&[
        "transfer",
        "--checkpoint",
        &ckpt,
        "--source-pose",
        &source,
        "--target-template",
        &target,
        "--out",
        &s(&p.join("y.obj")),
        "--refiner",
        &s(&p.join("r/refiner.ckpt")),
    ]);
    assert_eq!(
        std::fs::read(p.join("x.obj")).unwrap(),
        std::fs::read(p.join("y.obj")).unwrap()
    );
}

#[test]
fn eval_pmd_reports_known_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&[
        "gen-data",
        "--spec",
        "identity-a",
        "--n",
        "1",
        "--out",
        &s(&p.join("d")),
    ]);
    let gt = load_obj(p.join("d/pose_0000.obj")).unwrap();
    let pmd_of = |name: &str| -> f64 {
        let out = ok(&[
            "eval-pmd",
            "--pred",
            &s(&p.join(name)),
            "--gt",
            &s(&p.join("d/pose_0000.obj")),
        ]);
        out.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(pmd_of("d/pose_0000.obj"), 0.0);

    let shifted: Vec<[f64; 3]> = gt
        .vertices()
        .iter()
        .map(|v| [v[0] + 0.1, v[1], v[2]])
        .collect();
    save_obj(&gt.with_vertices(shifted).unwrap(), p.join("shifted.obj")).unwrap();
    assert!((pmd_of("shifted.obj") - 0.01).abs() < 1e-9);

    // three coordinates of variance 1e-4 each
    let noise = standard_normal(&[gt.vertex_count(), 3], &mut ChaCha8Rng::seed_from_u64(5));
    let noisy: Vec<[f64; 3]> = gt
        .vertices()
        .iter()
        .zip(noise.data().chunks_exact(3))
        .map(|(v, n)| [v[0] + 0.01 * n[0], v[1] + 0.01 * n[1], v[2] + 0.01 * n[2]])
        .collect();
    save_obj(&gt.with_vertices(noisy).unwrap(), p.join("noisy.obj")).unwrap();
    let pmd = pmd_of("noisy.obj");
    assert!((pmd / 3e-4 - 1.0).abs() < 0.15, "{pmd}");

    save_obj(&icosahedron(), p.join("ico.obj")).unwrap();
    let mismatch = posefield(&[
        "eval-pmd",
        "--pred",
        &s(&p.join("ico.obj")),
        "--gt",
        &s(&p.join("d/pose_0000.obj")),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
}
