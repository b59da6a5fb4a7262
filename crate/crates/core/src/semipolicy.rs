//! Semi-on-policy training over a frozen buffer of reference rollouts.
//!
//! The buffer is collected once under the reference parameters and never
//! refreshed. Training only re-scores stored inputs with the current
//! parameters; the ratio clip is what keeps it near the reference. The
//! off-policy ablation keeps the ratios and drops the clip.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::copo::{copo_update, resolve_temperature, select_anchors, Learner};
use crate::error::{invalid, numeric, Error, Result};
use crate::neighborhood::Provenance;
use crate::numerics::RngStream;
use crate::rewards::PromptSpec;
use crate::rollout::{arcopo_iteration, non_empty_prompts, ArcopoConfig, IterationRecord, ReplayEntry};
use crate::toygen::{ChunkTrajectory, ContextCache, ModelParams, SamplerConfig, SamplerKind, StepRecord};

pub const BUFFER_MAGIC: &str = "ARCOPO-BUF-1";
pub const DEFAULT_BUFFER_GROUPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub entries: Vec<ReplayEntry>,
    /// Checkpoint id of the parameters every entry was generated with.
    pub checkpoint_id: String,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `n_groups` forked groups under the reference parameters, prompts taken
/// round-robin; group `n` uses the stream `group.n`.
pub fn collect_buffer(
    ref_params: &ModelParams,
    prompts: &[PromptSpec],
    cfg: &ArcopoConfig,
    n_groups: usize,
    stream: &RngStream,
) -> Result<ReplayBuffer> {
    if n_groups == 0 {
        return Err(invalid("buffer needs at least one group"));
    }
    non_empty_prompts(prompts)?;
    let entries = (1..=n_groups)
        .map(|n| {
            let prompt = &prompts[(n - 1) % prompts.len()];
            arcopo_iteration(ref_params, ref_params, prompt, cfg, &stream.child(format!("group.{n}"))).map(|(e, _)| e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplayBuffer {
        entries,
        checkpoint_id: ref_params.checkpoint_id(),
    })
}

/// `steps` updates, each on one buffer entry drawn with replacement from
/// `step.n/batch`, anchors from `step.n/anchors`. No rollout noise is drawn.
pub fn train_semi<L: Learner + ?Sized>(
    learner: &mut L,
    buffer: &ReplayBuffer,
    cfg: &ArcopoConfig,
    steps: usize,
    clip_enabled: bool,
    stream: &RngStream,
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(invalid("replay buffer is empty"));
    }
    if steps == 0 {
        return Err(invalid("semi-on-policy training needs at least one step"));
    }
    let mut opt = cfg.copo.optimizer(learner.trainable().len());
    let mut curve = Vec::with_capacity(steps);
    for n in 1..=steps {
        let s = stream.child(format!("step.{n}"));
        let entry = &buffer.entries[s.child("batch").index(buffer.len())?];
        let mut rec = IterationRecord::new(
            n,
            entry.prompt.prompt_seed,
            entry.pivot,
            entry.rewards.clone(),
            &cfg.copo,
        )?;
        if !rec.advantages.iter().all(|a| *a == 0.0) {
            let tau = resolve_temperature(entry, &cfg.copo)?;
            let anchors = select_anchors(entry.candidates.len(), cfg.copo.anchor_batch, &s.child("anchors"))?;
            let stats = copo_update(learner, &mut opt, entry, &cfg.copo, tau, clip_enabled, &anchors)
                .map_err(|e| numeric(format!("buffer step {n}: {e}")))?;
            rec.absorb(&stats);
        }
        curve.push(rec);
    }
    Ok(curve)
}

/// Euclidean distance between two parameter vectors.
pub fn displacement(a: &ModelParams, b: &ModelParams) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn write_entry(w: &mut ByteWriter, e: &ReplayEntry) {
    w.u32(e.pivot);
    w.f64s(&e.context.h);
    w.u32(e.context.chunk_index);
    w.f64s(&e.base_noise);
    w.u32(e.member_noises.len());
    for m in &e.member_noises {
        w.f64s(m);
    }
    w.u32(e.candidates.len());
    for c in &e.candidates {
        w.u32(c.steps.len());
        for st in &c.steps {
            w.f64(st.t);
            w.f64s(&st.x_t);
            w.f64s(&st.x0_pred);
        }
        w.f64s(&c.clean);
    }
    w.f64s(&e.rewards);
    w.u64(e.prompt.prompt_seed);
    w.f64s(&e.prompt.target);
    w.u32(match e.sampler.kind {
        SamplerKind::Consistency => 0,
        SamplerKind::FlowOde => 1,
    });
    w.f64s(&e.sampler.timesteps);
    w.u64(e.provenance.root_seed);
    w.str(&e.provenance.label);
}

fn read_entry(r: &mut ByteReader) -> Result<ReplayEntry> {
    let pivot = r.u32()?;
    let context = ContextCache {
        h: r.f64s()?,
        chunk_index: r.u32()?,
    };
    let base_noise = r.f64s()?;
    let member_noises = (0..r.u32()?).map(|_| r.f64s()).collect::<Result<_>>()?;
    let n_cand = r.u32()?;
    let mut candidates = Vec::with_capacity(n_cand);
    for _ in 0..n_cand {
        let steps = (0..r.u32()?)
            .map(|_| {
                Ok(StepRecord {
                    t: r.f64()?,
                    x_t: r.f64s()?,
                    x0_pred: r.f64s()?,
                })
            })
            .collect::<Result<_>>()?;
        candidates.push(ChunkTrajectory {
            steps,
            clean: r.f64s()?,
        });
    }
    let rewards = r.f64s()?;
    let prompt = PromptSpec {
        prompt_seed: r.u64()?,
        target: r.f64s()?,
    };
    let kind = match r.u32()? {
        0 => SamplerKind::Consistency,
        1 => SamplerKind::FlowOde,
        k => return Err(Error::Format(format!("unknown sampler kind {k}"))),
    };
    let sampler = SamplerConfig {
        kind,
        timesteps: r.f64s()?,
    };
    let provenance = Provenance {
        root_seed: r.u64()?,
        label: r.str()?,
    };
    Ok(ReplayEntry {
        pivot,
        context,
        base_noise,
        member_noises,
        candidates,
        rewards,
        prompt,
        sampler,
        provenance,
    })
}

pub fn write_buffer(buffer: &ReplayBuffer) -> Vec<u8> {
    let mut w = ByteWriter::new(BUFFER_MAGIC);
    w.str(&buffer.checkpoint_id);
    w.u32(buffer.entries.len());
    for e in &buffer.entries {
        write_entry(&mut w, e);
    }
    w.buf
}

/// Parse a buffer; with `expected_checkpoint` set, a buffer collected under
/// different reference parameters is rejected.
pub fn read_buffer(bytes: &[u8], expected_checkpoint: Option<&str>) -> Result<ReplayBuffer> {
    let mut r = ByteReader::new(bytes, BUFFER_MAGIC)?;
    let checkpoint_id = r.str()?;
    if let Some(id) = expected_checkpoint {
        if id != checkpoint_id {
            return Err(invalid(format!(
                "buffer was collected under checkpoint {checkpoint_id}, expected {id}"
            )));
        }
    }
    let entries = (0..r.u32()?).map(|_| read_entry(&mut r)).collect::<Result<_>>()?;
    r.finish()?;
    Ok(ReplayBuffer { entries, checkpoint_id })
}

pub fn save_buffer(buffer: &ReplayBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, write_buffer(buffer))?;
    Ok(())
}

pub fn load_buffer(path: &Path, expected_checkpoint: Option<&str>) -> Result<ReplayBuffer> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("buffer {}", path.display())),
        _ => Error::Io(e),
    })?;
    read_buffer(&bytes, expected_checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copo::CopoConfig;

    fn setup() -> (ModelParams, Vec<PromptSpec>, ArcopoConfig) {
        let cfg = ArcopoConfig {
            chunks: 3,
            copo: CopoConfig {
                group_size: 4,
                anchor_batch: 2,
                learning_rate: 1e-3,
                ..CopoConfig::default()
            },
            ..ArcopoConfig::default()
        };
        let params = ModelParams::init(Default::default(), &RngStream::at(2, "init")).unwrap();
        (params, PromptSpec::set(10, 3, 8).unwrap(), cfg)
    }

    #[test]
    fn single_group_matches_direct_iteration() {
        let (p, prompts, cfg) = setup();
        let root = RngStream::new(9);
        let buf = collect_buffer(&p, &prompts, &cfg, 1, &root).unwrap();
        let (direct, _) = arcopo_iteration(&p, &p, &prompts[0], &cfg, &root.child("group.1")).unwrap();
        assert_eq!(buf.entries, vec![direct]);
        assert_eq!(buf.checkpoint_id, p.checkpoint_id());
    }

    #[test]
    fn buffer_round_trips_and_checks_id() {
        let (p, prompts, cfg) = setup();
        let buf = collect_buffer(&p, &prompts, &cfg, 3, &RngStream::new(1)).unwrap();
        let bytes = write_buffer(&buf);
        assert_eq!(read_buffer(&bytes, Some(&buf.checkpoint_id)).unwrap(), buf);
        assert!(read_buffer(&bytes, Some("0000")).is_err());
        assert!(read_buffer(&bytes[..bytes.len() - 1], None).is_err());
        assert_eq!(write_buffer(&read_buffer(&bytes, None).unwrap()), bytes);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (p, prompts, mut cfg) = setup();
        let buf = collect_buffer(&p, &prompts, &cfg, 2, &RngStream::new(1)).unwrap();
        cfg.copo.learning_rate = 0.0;
        let mut q = p.clone();
        train_semi(&mut q, &buf, &cfg, 5, true, &RngStream::new(4)).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn empty_buffer_and_zero_steps_rejected() {
        let (p, prompts, cfg) = setup();
        let empty = ReplayBuffer {
            entries: vec![],
            checkpoint_id: p.checkpoint_id(),
        };
        let mut q = p.clone();
        assert!(train_semi(&mut q, &empty, &cfg, 1, true, &RngStream::new(1)).is_err());
        let buf = collect_buffer(&p, &prompts, &cfg, 1, &RngStream::new(1)).unwrap();
        assert!(train_semi(&mut q, &buf, &cfg, 0, true, &RngStream::new(1)).is_err());
        assert!(collect_buffer(&p, &prompts, &cfg, 0, &RngStream::new(1)).is_err());
    }

    #[test]
    fn buffer_is_read_only_during_training() {
        let (p, prompts, cfg) = setup();
        let buf = collect_buffer(&p, &prompts, &cfg, 2, &RngStream::new(1)).unwrap();
        let before = write_buffer(&buf);
        let mut q = p.clone();
        train_semi(&mut q, &buf, &cfg, 4, false, &RngStream::new(4)).unwrap();
        assert_eq!(write_buffer(&buf), before);
        assert_ne!(q, p);
    }
}
