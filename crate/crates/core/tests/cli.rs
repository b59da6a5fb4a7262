//! The command-line runner, driven in-process through `arcopo::cli::run`.

mod common;

use std::path::Path;

use arcopo::adapters::{effective_params, load_adapter, scale_sweep, select_scale, SweepRow};
use arcopo::cli::{exit_code, ExperimentConfig, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK};
use arcopo::numerics::RngStream;
use arcopo::toygen::{load_checkpoint, ModelParams};
use arcopo::Error;
use tempfile::TempDir;

const FAST: &str = "
schedule.pretrain_steps = 50
schedule.iterations = 3
schedule.semi_steps = 3
schedule.buffer_groups = 4
eval.samples_per_prompt = 2
entropy.plans = 2
entropy.trials = 2
";

fn config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let key = |l: &str| l.split('=').next().unwrap().trim().to_owned();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: String = FAST
        .lines()
        .filter(|l| !l.is_empty() && !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&path, base + extra).unwrap();
    path.to_str().unwrap().to_owned()
}

fn run(cfg: &str, out: &Path, verb: &[&str]) -> i32 {
    let mut args = vec!["arcopo", "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(verb);
    arcopo::cli::run(args)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn zero_step_pretraining_writes_the_initialization() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "schedule.pretrain_steps = 0\n");
    assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_OK);
    let (p, _) = load_checkpoint(&d.path().join("reference.ckpt"), None).unwrap();
    let dims = ExperimentConfig::default().pretrain.dims;
    assert_eq!(p, ModelParams::init(dims, &RngStream::at(0, "pretrain/init")).unwrap());
}

#[test]
fn pretraining_is_byte_reproducible() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(run(&cfg, &a, &["pretrain"]), EXIT_OK);
    assert_eq!(run(&cfg, &b, &["pretrain"]), EXIT_OK);
    for f in ["reference.ckpt", "pretrain.csv", "pretrain.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}

#[test]
fn default_pretraining_halves_the_error() {
    let d = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        out: d.path().to_owned(),
        ..ExperimentConfig::default()
    };
    let o = arcopo::cli::cmd_pretrain(&cfg).unwrap();
    assert!(o.final_mse < 0.5 * o.initial_mse);
    let csv = String::from_utf8(read(d.path().join("pretrain.csv"))).unwrap();
    let line = csv.lines().nth(1).unwrap();
    assert_eq!(
        line,
        format!("# initial_mse={:e} final_mse={:e}", o.initial_mse, o.final_mse)
    );
}

#[test]
fn text_artifacts_carry_hash_and_seed() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "seed = 9\n");
    let hash = ExperimentConfig::load(Path::new(&cfg)).unwrap().hash();
    for verb in [
        &["pretrain"][..],
        &["train", "--mode", "on"],
        &["train", "--mode", "semi"],
        &["entropy-study"],
        &["sweep"],
        &["eval"],
    ] {
        assert_eq!(run(&cfg, d.path(), verb), EXIT_OK, "{verb:?}");
    }
    let csv_head = format!("# config_hash={hash} seed=9");
    for f in ["pretrain.csv", "on/curves.csv", "semi/curves.csv", "sweep.csv"] {
        let text = String::from_utf8(read(d.path().join(f))).unwrap();
        assert_eq!(text.lines().next().unwrap(), csv_head, "{f}");
    }
    for f in [
        "on/curves.jsonl",
        "entropy.jsonl",
        "pretrain.json",
        "sweep.json",
        "eval.json",
        "semi/summary.json",
    ] {
        let text = String::from_utf8(read(d.path().join(f))).unwrap();
        let first: serde_json::Value = if f.ends_with(".jsonl") {
            serde_json::from_str(text.lines().next().unwrap()).unwrap()
        } else {
            serde_json::from_str(&text).unwrap()
        };
        assert_eq!(first["config_hash"], hash.as_str(), "{f}");
        assert_eq!(first["seed"], 9, "{f}");
    }
    let csv = String::from_utf8(read(d.path().join("on/curves.csv"))).unwrap();
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "iter,pivot,reward_mean,reward_std,objective,clip_frac"
    );
    assert_eq!(csv.lines().count(), 2 + 3);
}

#[test]
fn zero_iterations_leave_a_zero_delta() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "schedule.iterations = 0\n");
    assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_OK);
    assert_eq!(run(&cfg, d.path(), &["train", "--mode", "on"]), EXIT_OK);
    let (reference, _) = load_checkpoint(&d.path().join("reference.ckpt"), None).unwrap();
    let a = load_adapter(&d.path().join("on/adapter.bin")).unwrap();
    assert_eq!(effective_params(&reference, &[(&a, 1.0)]).unwrap(), reference);
}

#[test]
fn missing_artifacts_exit_three() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "");
    for verb in [&["train", "--mode", "sde"][..], &["entropy-study"], &["eval"]] {
        assert_eq!(run(&cfg, d.path(), verb), EXIT_MISSING, "{verb:?}");
    }
    assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_OK);
    assert_eq!(run(&cfg, d.path(), &["sweep"]), EXIT_MISSING);
}

#[test]
fn invalid_configs_exit_two() {
    let d = TempDir::new().unwrap();
    for extra in [
        "copo.clip_eps = -1.0\n",
        "copo.no_such_key = 1\n",
        "sweep.scales = []\n",
    ] {
        let cfg = config(d.path(), extra);
        assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_CONFIG, "{extra}");
    }
    let missing = d.path().join("nope.toml");
    assert_eq!(run(missing.to_str().unwrap(), d.path(), &["pretrain"]), EXIT_CONFIG);
    assert_eq!(arcopo::cli::run(["arcopo", "train", "--mode", "sideways"]), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::NumericFailure("x".into())), EXIT_NUMERIC);
}

#[test]
fn entropy_study_with_zero_trials_is_empty() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "entropy.trials = 0\n");
    assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_OK);
    assert_eq!(run(&cfg, d.path(), &["entropy-study"]), EXIT_OK);
    let text = String::from_utf8(read(d.path().join("entropy.jsonl"))).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for r in &records[1..] {
        assert_eq!(r["sites"].as_array().unwrap().len(), 0);
        assert!(r["dominance_ratio"].is_null());
    }
}

#[test]
fn entropy_study_is_reproducible() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "");
    assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_OK);
    assert_eq!(run(&cfg, d.path(), &["entropy-study"]), EXIT_OK);
    let first = read(d.path().join("entropy.jsonl"));
    assert_eq!(run(&cfg, d.path(), &["entropy-study"]), EXIT_OK);
    assert_eq!(read(d.path().join("entropy.jsonl")), first);
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 3);
}

#[test]
fn single_scale_sweep_has_one_row() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "sweep.scales = [0.0]\n");
    for verb in [
        &["pretrain"][..],
        &["train", "--mode", "semi"],
        &["train", "--mode", "on"],
        &["sweep"],
    ] {
        assert_eq!(run(&cfg, d.path(), verb), EXIT_OK, "{verb:?}");
    }
    let csv = String::from_utf8(read(d.path().join("sweep.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,") && rows[0].ends_with(",1"));
}

#[test]
fn identical_adapters_reduce_to_one_family() {
    let d = TempDir::new().unwrap();
    let cfg = config(d.path(), "schedule.iterations = 6\n");
    assert_eq!(run(&cfg, d.path(), &["pretrain"]), EXIT_OK);
    assert_eq!(run(&cfg, d.path(), &["train", "--mode", "on"]), EXIT_OK);
    let c = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    let (reference, _) = load_checkpoint(&d.path().join("reference.ckpt"), None).unwrap();
    let a = load_adapter(&d.path().join("on/adapter.bin")).unwrap();
    let suite = c.eval_suite().unwrap();
    let report = scale_sweep(&reference, &a, &a, &c.sweep.scales, &suite, c.sweep.held_out_tolerance).unwrap();
    // the same adapter at total scale 1 + s
    let family: Vec<SweepRow> = c
        .sweep
        .scales
        .iter()
        .map(|&s| SweepRow {
            scale: s,
            report: suite
                .evaluate(&effective_params(&reference, &[(&a, 1.0 + s)]).unwrap())
                .unwrap(),
        })
        .collect();
    let baseline = &family[0].report;
    for (got, want) in report.rows.iter().zip(&family) {
        assert!((got.report.in_domain - want.report.in_domain).abs() < 1e-9);
        assert!((got.report.held_out - want.report.held_out).abs() < 1e-9);
    }
    let (scale, improved) = select_scale(baseline, &family, c.sweep.held_out_tolerance);
    assert_eq!((report.selected_scale, report.improved), (scale, improved));
}
