//! The runnable stages. Each one reads its inputs from the output directory
//! and writes its artifacts back there. Text artifacts open with the config
//! hash and root seed; binary artifacts are listed by content id in the
//! stage's JSON summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::adapters::{
    load_adapter, save_adapter, scale_sweep, AdapterLearner, AdapterTag, LowRankAdapter, SweepReport,
};
use crate::copo::Learner;
use crate::error::{invalid, Error, Result};
use crate::neighborhood::{substitution_study, DivergenceReport, NoisePlan, Site, SiteDivergence};
use crate::numerics::RngStream;
use crate::rollout::{curves_csv, train_on_policy, train_sde, EvalReport, IterationRecord};
use crate::semipolicy::{collect_buffer, displacement, save_buffer, train_semi};
use crate::toygen::{load_checkpoint, save_checkpoint, ModelParams, PretrainOutcome};

pub const REFERENCE_FILE: &str = "reference.ckpt";
pub const BUFFER_FILE: &str = "buffer.bin";
pub const ADAPTER_FILE: &str = "adapter.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// On-policy forked rollouts.
    On,
    /// Clipped training on the frozen reference buffer.
    Semi,
    /// The same buffer training without the ratio clip.
    Off,
    /// Solver-noise exploration baseline.
    Sde,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::On => "on",
            TrainMode::Semi => "semi",
            TrainMode::Off => "off",
            TrainMode::Sde => "sde",
        }
    }

    pub const ALL: [TrainMode; 4] = [TrainMode::On, TrainMode::Semi, TrainMode::Off, TrainMode::Sde];
}

#[derive(Serialize)]
struct Header<'a> {
    kind: &'static str,
    config_hash: String,
    seed: u64,
    stage: &'a str,
}

fn header<'a>(cfg: &ExperimentConfig, stage: &'a str) -> Header<'a> {
    Header {
        kind: "header",
        config_hash: cfg.hash(),
        seed: cfg.seed,
        stage,
    }
}

fn csv_preamble(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

fn json_line<T: Serialize>(out: &mut String, value: &T) {
    out.push_str(&serde_json::to_string(value).expect("records serialize"));
    out.push('\n');
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_summary<T: Serialize>(path: &Path, cfg: &ExperimentConfig, stage: &str, body: &T) -> Result<()> {
    let mut v = serde_json::to_value(header(cfg, stage)).expect("header serializes");
    v["kind"] = "summary".into();
    v["result"] = serde_json::to_value(body).expect("summary serializes");
    write_file(
        path,
        serde_json::to_string_pretty(&v).expect("summary serializes") + "\n",
    )
}

fn file_id(path: &Path) -> Result<String> {
    Ok(crate::binio::content_id(&std::fs::read(path)?))
}

pub fn mode_dir(cfg: &ExperimentConfig, mode: TrainMode) -> PathBuf {
    cfg.out.join(mode.name())
}

pub fn load_reference(cfg: &ExperimentConfig) -> Result<ModelParams> {
    load_checkpoint(&cfg.out.join(REFERENCE_FILE), Some(cfg.pretrain.dims)).map(|(p, _)| p)
}

fn load_trained_adapter(cfg: &ExperimentConfig, mode: TrainMode, reference: &ModelParams) -> Result<LowRankAdapter> {
    let a = load_adapter(&mode_dir(cfg, mode).join(ADAPTER_FILE))?;
    if a.dims != reference.dims {
        return Err(invalid(format!(
            "{} adapter does not match the reference dimensions",
            mode.name()
        )));
    }
    Ok(a)
}

/// Pretrain the reference generator on the data process seeded by the root
/// seed. Writes `reference.ckpt`, `pretrain.csv` and `pretrain.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let outcome = crate::toygen::pretrain_reference(cfg.seed, cfg.schedule.pretrain_steps, &cfg.pretrain)?;
    std::fs::create_dir_all(&cfg.out)?;
    let ckpt = cfg.out.join(REFERENCE_FILE);
    let id = save_checkpoint(&outcome.params, &ckpt)?;
    let mut csv = csv_preamble(cfg);
    let _ = writeln!(
        csv,
        "# initial_mse={:e} final_mse={:e}",
        outcome.initial_mse, outcome.final_mse
    );
    csv.push_str("step,loss\n");
    for (step, loss) in &outcome.curve {
        let _ = writeln!(csv, "{step},{loss:e}");
    }
    write_file(&cfg.out.join("pretrain.csv"), csv)?;
    #[derive(Serialize)]
    struct Summary {
        checkpoint_id: String,
        steps: usize,
        initial_mse: f64,
        final_mse: f64,
    }
    let summary = Summary {
        checkpoint_id: id,
        steps: cfg.schedule.pretrain_steps,
        initial_mse: outcome.initial_mse,
        final_mse: outcome.final_mse,
    };
    write_summary(&cfg.out.join("pretrain.json"), cfg, "pretrain", &summary)?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub mode: TrainMode,
    #[serde(skip)]
    pub curve: Vec<IterationRecord>,
    #[serde(skip)]
    pub adapter: LowRankAdapter,
    /// Evaluation of reference plus trained adapter.
    pub report: EvalReport,
    /// Distance of the effective parameters from the reference.
    pub displacement: f64,
    pub adapter_id: String,
}

/// Train one adapter on top of the reference checkpoint. Semi and off modes
/// share the buffer (same stream), and on and SDE share the adapter
/// initialization and training stream, so paired modes differ only in the
/// algorithm.
pub fn cmd_train(cfg: &ExperimentConfig, mode: TrainMode) -> Result<TrainOutcome> {
    let reference = load_reference(cfg)?;
    let arcopo = cfg.arcopo();
    let prompts = cfg.train_prompts()?;
    let seed = cfg.seed;
    let (tag, init_label) = match mode {
        TrainMode::On | TrainMode::Sde => (AdapterTag::OnPolicy, "adapter.on"),
        TrainMode::Semi | TrainMode::Off => (AdapterTag::Semi, "adapter.semi"),
    };
    let adapter = LowRankAdapter::new(
        reference.dims,
        tag,
        cfg.adapters.rank,
        cfg.adapters.alpha,
        &RngStream::at(seed, init_label),
    )?;
    let mut learner = AdapterLearner::new(&reference, adapter);
    let curve = match mode {
        TrainMode::On => train_on_policy(
            &mut learner,
            &prompts,
            &arcopo,
            cfg.schedule.iterations,
            &RngStream::at(seed, "train"),
        )?,
        TrainMode::Sde => train_sde(
            &mut learner,
            &prompts,
            &arcopo,
            cfg.schedule.iterations,
            &RngStream::at(seed, "train"),
        )?,
        TrainMode::Semi | TrainMode::Off => {
            let buffer = collect_buffer(
                &reference,
                &prompts,
                &arcopo,
                cfg.schedule.buffer_groups,
                &RngStream::at(seed, "buffer"),
            )?;
            save_buffer(&buffer, &cfg.out.join(BUFFER_FILE))?;
            train_semi(
                &mut learner,
                &buffer,
                &arcopo,
                cfg.schedule.semi_steps,
                mode == TrainMode::Semi,
                &RngStream::at(seed, "semi"),
            )?
        }
    };
    let effective = learner.effective()?;
    let report = cfg.eval_suite()?.evaluate(&effective)?;
    let dir = mode_dir(cfg, mode);
    std::fs::create_dir_all(&dir)?;
    let adapter_path = dir.join(ADAPTER_FILE);
    save_adapter(&learner.adapter, &adapter_path)?;
    let mut jsonl = String::new();
    json_line(&mut jsonl, &header(cfg, mode.name()));
    for r in &curve {
        json_line(&mut jsonl, r);
    }
    write_file(&dir.join("curves.jsonl"), jsonl)?;
    write_file(&dir.join("curves.csv"), csv_preamble(cfg) + &curves_csv(&curve))?;
    let outcome = TrainOutcome {
        mode,
        curve,
        adapter: learner.adapter,
        report,
        displacement: displacement(&effective, &reference),
        adapter_id: file_id(&adapter_path)?,
    };
    write_summary(&dir.join("summary.json"), cfg, mode.name(), &outcome)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PivotStudy {
    pub pivot: usize,
    /// Site divergences averaged over every plan.
    pub sites: Vec<SiteDivergence>,
    /// Initial-noise divergence over the largest solver-noise divergence.
    pub dominance_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyStudy {
    pub plans: usize,
    pub trials: usize,
    pub pivots: Vec<PivotStudy>,
}

/// Substitute every initial and solver noise site of each configured pivot
/// chunk on `plans` frozen plans and average the divergences. Zero trials
/// yields empty per-site statistics.
pub fn entropy_study(reference: &ModelParams, cfg: &ExperimentConfig) -> Result<EntropyStudy> {
    let e = &cfg.entropy;
    let steps = cfg.sampler.steps();
    let sites: Vec<Site> = e.pivots.iter().flat_map(|&q| Site::all_for_chunk(q, steps)).collect();
    let prompts = cfg.train_prompts()?;
    let reports: Vec<DivergenceReport> = if e.trials == 0 || e.plans == 0 {
        Vec::new()
    } else {
        (1..=e.plans)
            .into_par_iter()
            .map(|j| {
                let plan = NoisePlan::generate(
                    &RngStream::at(cfg.seed, &format!("entropy/plan.{j}")),
                    cfg.chunks,
                    steps,
                    reference.dims.chunk_dim,
                )?;
                let prompt = &prompts[(j - 1) % prompts.len()];
                substitution_study(
                    reference,
                    prompt,
                    &plan,
                    &cfg.sampler,
                    &sites,
                    e.trials,
                    &RngStream::at(cfg.seed, &format!("entropy/subst.{j}")),
                )
            })
            .collect::<Result<_>>()?
    };
    let n = reports.len() as f64;
    let pivots = e
        .pivots
        .iter()
        .map(|&q| {
            let mean_sites: Vec<SiteDivergence> = if reports.is_empty() {
                Vec::new()
            } else {
                Site::all_for_chunk(q, steps)
                    .into_iter()
                    .map(|site| {
                        let mut per_chunk = vec![0.0; cfg.chunks];
                        let mut total = 0.0;
                        for r in &reports {
                            let s = r.get(site).expect("every plan covers every site");
                            for (a, b) in per_chunk.iter_mut().zip(&s.per_chunk) {
                                *a += b / n;
                            }
                            total += s.total / n;
                        }
                        SiteDivergence {
                            site,
                            trials: e.trials,
                            per_chunk,
                            total,
                        }
                    })
                    .collect()
            };
            let dominance_ratio = DivergenceReport {
                reference: Vec::new(),
                sites: mean_sites.clone(),
            }
            .dominance_ratio(q);
            PivotStudy {
                pivot: q,
                sites: mean_sites,
                dominance_ratio,
            }
        })
        .collect();
    Ok(EntropyStudy {
        plans: e.plans,
        trials: e.trials,
        pivots,
    })
}

/// Run [`entropy_study`] on the reference checkpoint and write
/// `entropy.jsonl`: a header, then one record per pivot.
pub fn cmd_entropy_study(cfg: &ExperimentConfig) -> Result<EntropyStudy> {
    let reference = load_reference(cfg)?;
    let study = entropy_study(&reference, cfg)?;
    let mut jsonl = String::new();
    let mut h = serde_json::to_value(header(cfg, "entropy-study")).expect("header serializes");
    h["plans"] = study.plans.into();
    h["trials"] = study.trials.into();
    json_line(&mut jsonl, &h);
    for p in &study.pivots {
        json_line(&mut jsonl, p);
    }
    write_file(&cfg.out.join("entropy.jsonl"), jsonl)?;
    Ok(study)
}

/// Merge the trained on-policy adapter into the semi model at every
/// configured scale. Writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let reference = load_reference(cfg)?;
    let semi = load_trained_adapter(cfg, TrainMode::Semi, &reference)?;
    let on = load_trained_adapter(cfg, TrainMode::On, &reference)?;
    let report = scale_sweep(
        &reference,
        &semi,
        &on,
        &cfg.sweep.scales,
        &cfg.eval_suite()?,
        cfg.sweep.held_out_tolerance,
    )?;
    write_file(
        &cfg.out.join("sweep.csv"),
        csv_preamble(cfg) + &report.to_csv(&cfg.monitor_names()),
    )?;
    write_summary(&cfg.out.join("sweep.json"), cfg, "sweep", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelEval {
    pub model: String,
    pub report: EvalReport,
}

/// Evaluate the reference and every trained adapter present in the output
/// directory. Writes `eval.json`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<ModelEval>> {
    let reference = load_reference(cfg)?;
    let suite = cfg.eval_suite()?;
    let mut rows = vec![ModelEval {
        model: "reference".into(),
        report: suite.evaluate(&reference)?,
    }];
    for mode in TrainMode::ALL {
        let adapter = match load_trained_adapter(cfg, mode, &reference) {
            Ok(a) => a,
            Err(Error::NotFound(_)) => continue,
            Err(e) => return Err(e),
        };
        let params = crate::adapters::effective_params(&reference, &[(&adapter, 1.0)])?;
        rows.push(ModelEval {
            model: mode.name().into(),
            report: suite.evaluate(&params)?,
        });
    }
    write_summary(&cfg.out.join("eval.json"), cfg, "eval", &rows)?;
    Ok(rows)
}
