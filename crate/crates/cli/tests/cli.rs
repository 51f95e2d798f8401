//! End-to-end subcommand checks on a miniature run: training stages, CSV
//! bookkeeping, deterministic sampling, scoring, and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentlm"))
}

fn write_mini_config(dir: &Path) -> std::path::PathBuf {
    // A corpus of paired-alternation lines; tiny model dims so the whole
    // pipeline runs in seconds.
    let corpus: String = (0..48)
        .map(|i| {
            let pair = match i % 4 {
                0 => "ab",
                1 => "ac",
                2 => "de",
                _ => "df",
            };
            pair.repeat(6)
        })
        .collect::<Vec<_>>()
        .join("\n");
    let corpus_path = dir.join("corpus.txt");
    std::fs::write(&corpus_path, corpus).unwrap();

    let out_dir = dir.join("run");
    let config = format!(
        r#"
[paths]
corpus = "{corpus}"
out_dir = "{out}"

[run]
seed = 66
stage1_steps = 30
stage2_steps = 8
log_every = 50

[vae]
d_latent = 4
patch = 1
beta = 0.001
lambda_mask = 0.1
mask_rate = 0.15
d_model = 16
enc_layers = 1
dec_layers = 1
heads = 2
max_len = 32

[prior]
d_latent = 4
d_model = 16
layers = 1
heads = 2
block_tokens = 4
cfg_drop = 0.1

[schedule]
mu = 1.0
sigma = 1.0
t_max = 1.0
beta_path = "Linear"

[stage2]
lambda_vae = 1.0
lambda_fm = 1.0
lambda_ref = 1.0

[optim]
lr_init = 0.000001
lr_peak = 0.003
lr_final = 0.0003
warmup_steps = 5
total_steps = 30
batch_size = 2
weight_decay = 0.01
clip = 1.0
beta1 = 0.9
beta2 = 0.95

[generation]
steps = 3
cfg_scale = 2.0
strategy = {{ kind = "clean_repaint" }}
max_blocks = 2
seed = 9
"#,
        corpus = corpus_path.display(),
        out = out_dir.display(),
    );
    let config_path = dir.join("run.toml");
    std::fs::write(&config_path, config).unwrap();
    config_path
}

#[test]
fn full_pipeline_train_sample_score() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_mini_config(dir.path());
    let out_dir = dir.path().join("run");

    // Stage 2 without a stage-1 checkpoint fails with a remediation hint.
    let out = bin()
        .args(["train", "--stage", "2", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--stage 1"), "hint missing: {stderr}");

    // Stage 1.
    let out = bin()
        .args(["train", "--stage", "1", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stage 1 failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("stage1.ckpt").exists());
    assert!(out_dir.join("config.resolved.toml").exists());
    assert!(out_dir.join("vocab.txt").exists());

    // Loss CSV bookkeeping: total = recon + β·kl + λ_mask·mask, rowwise
    // bit-exact through the shortest-round-trip float formatting.
    let csv = std::fs::read_to_string(out_dir.join("stage1_metrics.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        let (recon, kl, mask, total) = (cols[1], cols[2], cols[3], cols[4]);
        let want = recon + 0.001 * kl + 0.1 * mask;
        assert_eq!(total.to_bits(), want.to_bits(), "row {line}");
        rows += 1;
    }
    assert_eq!(rows, 30);

    // Stage 2 from the stage-1 checkpoint.
    let out = bin()
        .args(["train", "--stage", "2", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stage 2 failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("stage2_vae.ckpt").exists());
    assert!(out_dir.join("stage2_prior.ckpt").exists());
    let csv = std::fs::read_to_string(out_dir.join("stage2_metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        let (recon, entropy, mask, fm, ref_kl, total) =
            (cols[1], cols[2], cols[3], cols[4], cols[5], cols[6]);
        let vae_part = (recon + 0.001 * entropy) + 0.1 * mask;
        let want = (1.0 * vae_part + 1.0 * fm) + 1.0 * ref_kl;
        assert_eq!(total.to_bits(), want.to_bits(), "row {line}");
    }

    // Sampling twice with identical seeds is byte-identical.
    let run_sample = || {
        let out = bin()
            .args(["sample", "--prompt", "abab", "--seed", "4", "--config"])
            .arg(&config)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "sample failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(out_dir.join("samples.txt")).unwrap()
    };
    let first = run_sample();
    let second = run_sample();
    assert_eq!(first, second);

    // Scoring produces the JSON records and CSV summary.
    let out = bin()
        .args(["score", "--k", "2", "--items", "2", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "score failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let score: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("score.json")).unwrap())
            .unwrap();
    assert!(score["summary"]["ppl_elbo"].as_f64().unwrap().is_finite());
    let items = score["items"].as_array().unwrap();
    assert!(!items.is_empty());
    for item in items {
        assert!(item["iwae"].as_f64().unwrap() >= item["elbo"].as_f64().unwrap() - 1e-9);
        assert!(item["components"]["log_decoder"].is_f64());
    }
    assert!(out_dir.join("score_summary.csv").exists());

    // VAE diagnostics emit the noise curve.
    let out = bin()
        .args(["vae-diagnose", "--stage", "2", "--items", "2", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "vae-diagnose failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("vae_noise_curve.csv").exists());
}

#[test]
fn verify_passes_on_fresh_build() {
    let out = bin().arg("verify").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin()
        .args(["train", "--stage", "1", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn schedule_plot_shows_mass_shift() {
    let dir = tempfile::tempdir().unwrap();
    let mass_mean = |mu: &str, name: &str| -> f64 {
        let path = dir.path().join(name);
        let out = bin()
            .args(["schedule-plot", "--mu", mu, "--sigma", "1.0", "--out"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(out.status.success());
        let csv = std::fs::read_to_string(&path).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for line in csv.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            num += cols[0] * cols[1];
            den += cols[1];
        }
        num / den
    };
    let m0 = mass_mean("0.0", "mu0.csv");
    let m1 = mass_mean("1.0", "mu1.csv");
    assert!(
        m1 > m0 + 0.05,
        "mass did not shift later: mean {m0} -> {m1}"
    );
}

#[test]
fn calibrate_and_demo_emit_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "calibrate-shift",
            "--dims",
            "4,16,64",
            "--grid",
            "101",
            "--out-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("shift_scan.json")).unwrap(),
    )
    .unwrap();
    assert!(json["log_fit"]["r_squared"].as_f64().unwrap() > 0.9);
    let csv = std::fs::read_to_string(dir.path().join("shift_scan.csv")).unwrap();
    assert!(csv.starts_with("d,delta,objective"));

    let out = bin()
        .args(["mismatch-demo", "--samples", "2000", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("mismatch_demo.json")).unwrap(),
    )
    .unwrap();
    assert!(json["coverage"].as_f64().unwrap() >= 0.9);
    assert!(json["delta"].as_f64().unwrap() > 5.0);
}
