//! CLI behavior: exit codes, end-to-end determinism of emitted artifacts,
//! checkpoint resume, and pipeline/library equivalence.

use gpvlm::checkpoint::{fresh_gpvae, load_checkpoint, restore_gpvae, snapshot_gpvae};
use gpvlm::config::{ModelKind, RunConfig};
use gpvlm::gpvae::{train, TrainOpts};
use gpvlm::metrics::{consec_frac, rep_n};
use gpvlm::pipeline::{prepare_blocks, run_eval, run_train};
use rand_chacha::rand_core::SeedableRng;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gpvlm")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("gpvlm_cli_tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_corpus(dir: &Path) -> String {
    let words = ["red", "blue", "green", "tall", "short", "round", "flat", "warm"];
    let mut text = String::new();
    let mut state = 7u64;
    while text.len() < 6000 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        text.push_str(words[(state >> 33) as usize % words.len()]);
        text.push(' ');
    }
    let path = dir.join("corpus.txt");
    std::fs::write(&path, text.as_bytes()).unwrap();
    path.display().to_string()
}

fn small_config(dir: &Path, model: &str, steps: u64) -> PathBuf {
    let corpus = small_corpus(dir);
    let text = format!(
        "model = \"{model}\"\n\
         t_train = 32\n\
         d_z = 8\n\
         channels = 32\n\
         steps = {steps}\n\
         seed = 11\n\
         corpus = [\"{corpus}\"]\n\
         lgen_grid = [16, 32]\n\
         n_prompts = 2\n\
         prompt_len = 16\n\
         val_every = 0\n\
         checkpoint_every = 0\n\
         tf_layers = 2\n\
         tf_heads = 2\n\
         tf_d_model = 32\n\
         tf_d_ff = 64\n\
         n_multi = 2\n"
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_corpus_exits_2() {
    let dir = tmp("missing_corpus");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "corpus = [\"/nonexistent/nowhere.txt\"]\nsteps = 1\n").unwrap();
    let out = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tmp("invalid_config");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "kl_cap = -1.0\n").unwrap();
    let out = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_steps_checkpoints_initialization() {
    let dir = tmp("zero_steps");
    let cfg = small_config(&dir, "gpvae_ar", 0);
    let out = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ck = load_checkpoint(dir.join("run/checkpoint.gpvlm")).unwrap();
    assert_eq!(ck.step, 0);
}

#[test]
fn same_config_and_seed_give_byte_identical_artifacts() {
    let dir = tmp("determinism");
    let cfg = small_config(&dir, "gpvae_ar", 8);
    for run in ["a", "b"] {
        let out = Command::new(bin())
            .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.join(run))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let log_a = std::fs::read(dir.join("a/train_log.jsonl")).unwrap();
    let log_b = std::fs::read(dir.join("b/train_log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "training logs must be byte-identical");
    let ck_a = std::fs::read(dir.join("a/checkpoint.gpvlm")).unwrap();
    let ck_b = std::fs::read(dir.join("b/checkpoint.gpvlm")).unwrap();
    assert_eq!(ck_a, ck_b, "checkpoints must be byte-identical");
}

#[test]
fn generate_is_reproducible_and_respects_flags() {
    let dir = tmp("generate");
    let cfg = small_config(&dir, "gpvae_ar", 4);
    let status = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = dir.join("run/checkpoint.gpvlm");
    std::fs::write(dir.join("prompt.txt"), b"the red house ").unwrap();

    let gen = |extra: &[&str]| -> Vec<u8> {
        let out = Command::new(bin())
            .args(["generate", "--ckpt", ckpt.to_str().unwrap(), "--prompt"])
            .arg(dir.join("prompt.txt"))
            .args(["--lgen", "24", "--seed", "5"])
            .args(extra)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let a = gen(&[]);
    let b = gen(&[]);
    assert_eq!(a, b, "same seed must reproduce the continuation");
    assert_eq!(a.len(), 24);
    let nonar = gen(&["--mode", "nonar"]);
    assert_ne!(a, nonar, "latent mode must change the continuation");

    // empty prompt is a user error
    std::fs::write(dir.join("empty.txt"), b"").unwrap();
    let out = Command::new(bin())
        .args(["generate", "--ckpt", ckpt.to_str().unwrap(), "--prompt"])
        .arg(dir.join("empty.txt"))
        .args(["--lgen", "8"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // tf mode does not apply to a gpvae checkpoint
    let out = Command::new(bin())
        .args(["generate", "--ckpt", ckpt.to_str().unwrap(), "--prompt"])
        .arg(dir.join("prompt.txt"))
        .args(["--lgen", "8", "--mode", "tf"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_emits_one_record_per_model_and_length() {
    let dir = tmp("eval");
    let cfg = small_config(&dir, "gpvae_ar", 4);
    assert!(Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .status()
        .unwrap()
        .success());
    std::fs::write(dir.join("prompts.txt"), b"the red house\nblue round flat\n").unwrap();
    let out = Command::new(bin())
        .args(["eval", "--ckpt"])
        .arg(dir.join("run/checkpoint.gpvlm"))
        .args(["--prompts"])
        .arg(dir.join("prompts.txt"))
        .args(["--lgen", "16", "--seed", "3", "--out"])
        .arg(dir.join("evalout"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("evalout/eval.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 1, "grid {{16}} with one checkpoint means one record");
    assert_eq!(rows[0]["n_sequences"], 2);
    assert_eq!(rows[0]["model"], "gpvae_ar");
    assert_eq!(rows[0]["lgen"], 16);
    // schema: the metric families are present
    for field in ["rep2", "rep3", "consec", "loop_frac", "cat_frac"] {
        assert!(rows[0]["text"][field].is_number(), "missing field {field}");
    }
}

#[test]
fn inspect_prints_summary() {
    let dir = tmp("inspect");
    let cfg = small_config(&dir, "transformer", 2);
    assert!(Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .status()
        .unwrap()
        .success());
    let out = Command::new(bin())
        .args(["inspect", "--ckpt"])
        .arg(dir.join("run/checkpoint.gpvlm"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("model: transformer"));
    assert!(text.contains("step: 2"));
    assert!(text.contains("tok_embed"));
}

#[test]
fn truncated_checkpoint_is_a_user_error() {
    let dir = tmp("truncated");
    let cfg = small_config(&dir, "gpvae_ar", 1);
    assert!(Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .status()
        .unwrap()
        .success());
    let bytes = std::fs::read(dir.join("run/checkpoint.gpvlm")).unwrap();
    std::fs::write(dir.join("cut.gpvlm"), &bytes[..bytes.len() / 2]).unwrap();
    let out = Command::new(bin())
        .args(["inspect", "--ckpt"])
        .arg(dir.join("cut.gpvlm"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_3_and_checkpoints() {
    // an absurd learning rate overflows the weights after one update, so the
    // next forward pass goes non-finite and training must abort
    let dir = tmp("numeric_abort");
    let corpus = small_corpus(&dir);
    let cfg_text = format!(
        "model = \"gpvae_ar\"\nt_train = 32\nd_z = 8\nchannels = 32\nn_multi = 2\n\
         steps = 10\nseed = 2\nlr = 1e30\nval_every = 0\ncheckpoint_every = 0\n\
         corpus = [\"{corpus}\"]\n"
    );
    let cfg = dir.join("hot.toml");
    std::fs::write(&cfg, cfg_text).unwrap();
    let out = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint_abort.gpvlm"), "must report the rescue path: {stderr}");
    let ck = load_checkpoint(dir.join("run/checkpoint_abort.gpvlm")).unwrap();
    assert!(ck.step >= 1, "at least one step completed before the abort");
    // the partial training log is still written
    assert!(dir.join("run/train_log.jsonl").exists());
}

#[test]
fn checkpoint_resume_matches_uninterrupted_training() {
    // train 6 steps straight vs 3 + checkpoint + restore + 3
    let dir = tmp("resume");
    let corpus = small_corpus(&dir);
    let cfg = RunConfig {
        model: ModelKind::GpvaeAr,
        t_train: 32,
        d_z: 8,
        channels: 32,
        n_multi: 2,
        steps: 6,
        corpus: vec![corpus],
        ..RunConfig::default()
    };
    let (_, blocks) = prepare_blocks(&cfg).unwrap();
    let opts = TrainOpts {
        mode: cfg.model.latent_mode().unwrap(),
        lr: cfg.lr,
        adam_beta1: cfg.adam_beta1,
        adam_beta2: cfg.adam_beta2,
        adam_eps: cfg.adam_eps,
        val_every: 0,
        val_blocks: 1,
    };

    let (mut straight, mut s_state) = fresh_gpvae(&cfg).unwrap();
    train(&mut straight, &blocks, &opts, &mut s_state, 6).unwrap();

    let (mut half, mut h_state) = fresh_gpvae(&cfg).unwrap();
    train(&mut half, &blocks, &opts, &mut h_state, 3).unwrap();
    let ck_path = dir.join("half.gpvlm");
    gpvlm::checkpoint::save_checkpoint(&ck_path, &snapshot_gpvae(&cfg, &half, &h_state)).unwrap();
    let (_, mut resumed, mut r_state) = restore_gpvae(&load_checkpoint(&ck_path).unwrap()).unwrap();
    train(&mut resumed, &blocks, &opts, &mut r_state, 3).unwrap();

    assert_eq!(r_state.step, 6);
    for ((name, a), (_, b)) in straight.weights.named().iter().zip(resumed.weights.named()) {
        assert_eq!(a.data, b.data, "tensor {name} diverged after resume");
    }
    assert_eq!(straight.hyper.beta, resumed.hyper.beta);
}

#[test]
fn eval_records_match_direct_library_calls() {
    // every number in a report must be reproducible by direct library calls
    let dir = tmp("pipeline_equiv");
    let corpus = small_corpus(&dir);
    let cfg = RunConfig {
        model: ModelKind::GpvaeAr,
        t_train: 32,
        d_z: 8,
        channels: 32,
        n_multi: 2,
        steps: 3,
        corpus: vec![corpus],
        lgen_grid: vec![16],
        ..RunConfig::default()
    };
    let out_dir = dir.join("run");
    let outcome = run_train(&cfg, &out_dir).unwrap();
    let prompts: Vec<Vec<u32>> =
        vec![b"the red house ".map(|b| b as u32).to_vec(), b"blue round fla".map(|b| b as u32).to_vec()];
    let records = run_eval(
        &[outcome.checkpoint.display().to_string()],
        &prompts,
        &[16],
        None,
        99,
        &dir.join("eval.jsonl"),
    )
    .unwrap();
    assert_eq!(records.len(), 1);
    let record = &records[0];

    // direct route: restore the model, regenerate with the same derived
    // seeds, recompute each metric
    let ck = load_checkpoint(&outcome.checkpoint).unwrap();
    let (rcfg, model, _) = restore_gpvae(&ck).unwrap();
    let mut rep2 = 0.0;
    let mut consec = 0.0;
    let mut ppl_cont = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let seed = gpvlm::mix_seed(99, 16, i as u64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = model
            .generate(p, 16, gpvlm::gpvae::LatentMode::Ar, rcfg.window_opt(), rcfg.temperature, &mut rng)
            .unwrap();
        rep2 += rep_n(&g.tokens, 2).unwrap();
        consec += consec_frac(&g.tokens).unwrap();
        ppl_cont += model.continuation_ppl(p, &g.tokens).unwrap();
    }
    assert_eq!(record.text.rep2, rep2 / 2.0);
    assert_eq!(record.text.consec, consec / 2.0);
    assert_eq!(record.ppl_cont, ppl_cont / 2.0);
}

#[test]
fn eval_worker_fanout_is_order_stable() {
    let dir = tmp("workers");
    let cfg = small_config(&dir, "gpvae_ar", 2);
    assert!(Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.join("run"))
        .status()
        .unwrap()
        .success());
    std::fs::write(dir.join("prompts.txt"), b"one fish two\nred fish blue\nold hat new\n").unwrap();
    let run_with = |workers: &str, out: &str| -> Vec<u8> {
        let st = Command::new(bin())
            .env("GPVLM_WORKERS", workers)
            .args(["eval", "--ckpt"])
            .arg(dir.join("run/checkpoint.gpvlm"))
            .args(["--prompts"])
            .arg(dir.join("prompts.txt"))
            .args(["--lgen", "16,32", "--seed", "4", "--out"])
            .arg(dir.join(out))
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(dir.join(out).join("eval.jsonl")).unwrap()
    };
    let serial = run_with("1", "serial");
    let parallel = run_with("3", "parallel");
    assert_eq!(serial, parallel, "worker count must not change emitted bytes");
}
