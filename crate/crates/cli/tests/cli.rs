//! End-to-end exercise of the command surface: synth-data -> train ->
//! invert (one-shot and streaming) -> animate -> eval -> ablate.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_avatar"))
}

fn run(args: &[&str]) -> String {
    let out = Command::new(bin())
        .args(args)
        .output()
        .expect("spawn avatar binary");
    assert!(
        out.status.success(),
        "`avatar {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
seed = 21

[model]
render_resolution = 16
samples_per_ray = 8
tex_resolutions = [4, 8, 16]
tex_channels = [32, 32, 16]
plane_resolution = 16
mesh_grid = 24

[training]
s1_steps = 2
s2_steps = 2
s3_steps = 2
batch_s1 = 1
batch_s2 = 1
seq_len = 2
rendered_frames = 1
train_identities = 2
frames_per_identity = 2
convfusion_steps = 1
convfusion_window = 2
prior_steps = 1

[eval]
eval_identities = 2
sequence_len = 5
source_window = 3
eval_frames = 2
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_command_round_trip() {
    let dir = std::env::temp_dir().join(format!("avatar_cli_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_small_config(&dir);
    let out = dir.join("out");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    // synthetic data + world checkpoint
    let text = run(&[
        "--config", cfg_s, "--out", out_s,
        "synth-data", "--identities", "2", "--frames", "5",
    ]);
    assert!(text.contains("world checkpoint"));
    let ckpt = out.join("world.ckpt");
    let manifest = out.join("identity_000").join("manifest.json");
    assert!(ckpt.exists() && manifest.exists());
    assert!(out.join("identity_000/frames/000.png").exists());

    // train s1 then s2 on the world
    let ckpt_s = ckpt.to_str().unwrap();
    run(&["--config", cfg_s, "--out", out_s, "train", "s1",
          "--ckpt", ckpt_s, "--ckpt-out", ckpt_s]);
    run(&["--config", cfg_s, "--out", out_s, "train", "s2",
          "--ckpt", ckpt_s, "--ckpt-out", ckpt_s]);
    assert!(out.join("loss_log.txt").exists());

    // one-shot and streaming inversion
    let manifest_s = manifest.to_str().unwrap();
    run(&["--config", cfg_s, "--out", out_s, "invert",
          "--ckpt", ckpt_s, "--manifest", manifest_s, "--one-shot"]);
    let avatar = out.join("avatar.bin");
    assert!(avatar.exists());
    let avatar_s = avatar.to_str().unwrap();
    run(&["--config", cfg_s, "--out", out_s, "invert",
          "--ckpt", ckpt_s, "--manifest", manifest_s, "--stream",
          "--fusion", "recurrent"]);
    run(&["--config", cfg_s, "--out", out_s, "invert",
          "--ckpt", ckpt_s, "--manifest", manifest_s, "--stream",
          "--fusion", "feature-average"]);

    // animation renders one image per manifest frame
    run(&["--config", cfg_s, "--out", out_s, "animate",
          "--ckpt", ckpt_s, "--avatar", avatar_s, "--manifest", manifest_s]);
    assert!(out.join("animated/004.png").exists());

    // evaluation emits a metrics report
    let text = run(&["--config", cfg_s, "--out", out_s, "eval",
                     "--ckpt", ckpt_s, "--avatar", avatar_s, "--manifest", manifest_s]);
    assert!(text.contains("psnr="));
    assert!(out.join("metrics.json").exists());

    // ablation table over trained variants
    let wo_nt = out.join("wo-nt.ckpt");
    let tri = out.join("tri.ckpt");
    run(&["--config", cfg_s, "--out", out_s, "train", "s1",
          "--variant", "wo-nt", "--ckpt-out", wo_nt.to_str().unwrap()]);
    run(&["--config", cfg_s, "--out", out_s, "train", "s2",
          "--ckpt", wo_nt.to_str().unwrap(), "--ckpt-out", wo_nt.to_str().unwrap()]);
    run(&["--config", cfg_s, "--out", out_s, "train", "s1",
          "--variant", "tri-offsets", "--ckpt-out", tri.to_str().unwrap()]);
    run(&["--config", cfg_s, "--out", out_s, "train", "s2",
          "--ckpt", tri.to_str().unwrap(), "--ckpt-out", tri.to_str().unwrap()]);
    let table = run(&["--config", cfg_s, "--out", out_s, "ablate",
                      "--ckpt", ckpt_s,
                      "--wo-nt", wo_nt.to_str().unwrap(),
                      "--tri-offsets", tri.to_str().unwrap()]);
    assert!(table.contains("ours"));
    assert!(table.contains("wo-both-enc"));
    assert!(table.contains("tri-offsets"));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_fusion_strategy_is_rejected() {
    let dir = std::env::temp_dir().join(format!("avatar_cli_err_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_small_config(&dir);
    let out = dir.join("out");
    run(&[
        "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "synth-data", "--identities", "1", "--frames", "3",
    ]);
    let status = Command::new(bin())
        .args([
            "--config", cfg.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "invert",
            "--ckpt", out.join("world.ckpt").to_str().unwrap(),
            "--manifest", out.join("identity_000/manifest.json").to_str().unwrap(),
            "--stream", "--fusion", "does-not-exist",
        ])
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("unknown fusion strategy"));
    std::fs::remove_dir_all(&dir).ok();
}
