//! End-to-end checks of the command line: every subcommand against a tiny
//! config, plus exit code and override behavior.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const TINY_CFG: &str = "
[pipeline]
seed = 7
failure_cap = 0

[seeds]
count = 2

[task]
objects = 1

[expansion]
k = 1
max_resamples = 40

[render]
resolution = 8

[generator]
window = 4
overlap = 1
steps = 6
beta_end = 0.9
c1 = 2
c2 = 4
t_dim = 4
traj_dim = 4
lang_dim = 4
traj_samples = 4
epochs = 2
batch = 8

[policy]
c1 = 2
c2 = 4
hidden = 8
epochs = 2
batch = 8

[eval]
episodes = 2

[scaling]
seeds = 1

[ablation]
episodes = 2
seeds = 1
policy = false
";

fn run(root: &Path, args: &[&str]) -> Output {
    let cfg = root.join("toy.cfg");
    let out_dir = root.join("out");
    let seeds_dir = root.join("seeds");
    Command::new(env!("CARGO_BIN_EXE_demoforge"))
        .arg("--config")
        .arg(&cfg)
        .arg("--set")
        .arg(format!("pipeline.output={}", out_dir.display()))
        .arg("--set")
        .arg(format!("seeds.dir={}", seeds_dir.display()))
        .args(args)
        .env_remove("DEMOFORGE_OUT")
        .env_remove("DEMOFORGE_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_command_walkthrough() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("toy.cfg"), TINY_CFG).unwrap();

    let check = run(root, &["parse-check"]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
    assert!(stdout(&check).contains("config_hash = "));
    assert!(stdout(&check).contains("expansion.k = 1"));

    let seed = run(root, &["seed"]);
    assert!(seed.status.success(), "{}", String::from_utf8_lossy(&seed.stderr));
    assert!(root.join("seeds/demo_000.traj").is_file());
    assert!(root.join("seeds/demo_001.scene").is_file());

    let expand = run(root, &["expand", "--demo", "0", "--count", "1"]);
    assert!(expand.status.success(), "{}", String::from_utf8_lossy(&expand.stderr));
    assert!(root.join("out/expansions/demo_000/exp_01.traj").is_file());
    assert!(root.join("out/expansions/demo_000/exp_01.keys").is_file());

    let png_dir = root.join("png");
    let render = run(
        root,
        &["render", "--demo", "0", "--full", "--png", png_dir.to_str().unwrap()],
    );
    assert!(render.status.success(), "{}", String::from_utf8_lossy(&render.stderr));
    assert!(root.join("out/render/demo_000_full.fr32").is_file());
    assert!(png_dir.join("manifest.json").is_file());

    let synth = run(root, &["synthesize"]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    assert!(root.join("out/manifest.json").is_file());
    assert!(stdout(&synth).contains("2 seed + 2 generated"));

    // Training the generator again must reuse the checkpoint.
    let train_gen = run(root, &["train-gen"]);
    assert!(train_gen.status.success());
    assert!(stdout(&train_gen).contains("sha256 "));

    let train_policy = run(root, &["train-policy", "--generated", "2"]);
    assert!(
        train_policy.status.success(),
        "{}",
        String::from_utf8_lossy(&train_policy.stderr)
    );
    let policy_path = root.join("out/policy_2.ckpt");
    assert!(policy_path.is_file());

    let eval = run(root, &["evaluate", "--policy", policy_path.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("success_rate"));

    let scaling = run(root, &["scaling", "--sizes", "0,1"]);
    assert!(scaling.status.success(), "{}", String::from_utf8_lossy(&scaling.stderr));
    assert!(root.join("out/scaling.csv").is_file());
    assert!(root.join("out/scaling.svg").is_file());

    let plot = run(root, &["plot"]);
    assert!(plot.status.success(), "{}", String::from_utf8_lossy(&plot.stderr));

    let ablate = run(root, &["ablate", "--variant", "short_window"]);
    assert!(ablate.status.success(), "{}", String::from_utf8_lossy(&ablate.stderr));
    assert!(root.join("out/ablation_short_window.json").is_file());
    assert!(stdout(&ablate).contains("windows_per_clip"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("toy.cfg"), TINY_CFG).unwrap();

    let bad_value = run(root, &["--set", "expansion.k=0", "parse-check"]);
    assert_eq!(bad_value.status.code(), Some(1));

    let unknown_key = run(root, &["--set", "expansion.qq=1", "parse-check"]);
    assert_eq!(unknown_key.status.code(), Some(1));

    let missing_file = Command::new(env!("CARGO_BIN_EXE_demoforge"))
        .arg("--config")
        .arg(root.join("absent.cfg"))
        .arg("parse-check")
        .output()
        .unwrap();
    assert_eq!(missing_file.status.code(), Some(1));

    // Runtime failure: synthesize without any seed demonstrations.
    let no_seeds = run(root, &["synthesize"]);
    assert_eq!(no_seeds.status.code(), Some(1), "missing inputs are a config error");
}

#[test]
fn environment_overrides_apply_last() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("toy.cfg"), TINY_CFG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_demoforge"))
        .arg("--config")
        .arg(root.join("toy.cfg"))
        .arg("--set")
        .arg("pipeline.output=flag_wins_nothing")
        .arg("parse-check")
        .env("DEMOFORGE_OUT", "env_wins")
        .env("DEMOFORGE_WORKERS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("pipeline.output = env_wins"));
    assert!(text.contains("pipeline.workers = 3"));
}

#[test]
fn defaults_work_without_a_config_file() {
    let out = Command::new(env!("CARGO_BIN_EXE_demoforge"))
        .arg("parse-check")
        .env_remove("DEMOFORGE_OUT")
        .env_remove("DEMOFORGE_WORKERS")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("render.resolution = 24"));
}
