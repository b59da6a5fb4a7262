//! Low-rank adapters on every dense weight matrix, scaled merging, and the
//! scale sweep that picks a merge weight.
//!
//! An adapter stores, per matrix `W` (`rows × cols`), factors `U` (`rows × r`)
//! and `V` (`r × cols`); its delta is `(α/r)·U·V`. `U` starts at zero so a
//! fresh adapter is an exact no-op.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::copo::Learner;
use crate::error::{invalid, Error, Result};
use crate::numerics::RngStream;
use crate::rollout::{EvalReport, EvalSuite};
use crate::toygen::{ModelDims, ModelParams};

pub const ADAPTER_MAGIC: &str = "ARCOPO-LORA-1";
pub const DEFAULT_RANK: usize = 4;
/// Table-style default grid.
pub const DEFAULT_SCALES: [f64; 5] = [0.0, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTag {
    OnPolicy,
    Semi,
}

/// Where one matrix's factors live inside the adapter's flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSlot {
    pub block: String,
    pub rows: usize,
    pub cols: usize,
    /// `U` occupies `offset .. offset + rows·r`, `V` the following `r·cols`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub tag: AdapterTag,
    pub dims: ModelDims,
    pub rank: usize,
    pub alpha: f64,
    pub slots: Vec<FactorSlot>,
    /// All factors, flat; the trainable coordinates.
    pub values: Vec<f64>,
}

impl LowRankAdapter {
    /// Zero `U`, Gaussian `V` with std `1/sqrt(cols)`. `α = 2r` by default
    /// via [`LowRankAdapter::with_default_alpha`].
    pub fn new(dims: ModelDims, tag: AdapterTag, rank: usize, alpha: f64, stream: &RngStream) -> Result<Self> {
        dims.validate()?;
        if rank == 0 || !alpha.is_finite() {
            return Err(invalid("adapter rank must be positive and alpha finite"));
        }
        let mut slots = Vec::new();
        let mut values = Vec::new();
        for b in dims.layout().into_iter().filter(|b| b.is_matrix()) {
            slots.push(FactorSlot {
                block: b.name.to_string(),
                rows: b.rows,
                cols: b.cols,
                offset: values.len(),
            });
            values.extend(std::iter::repeat_n(0.0, b.rows * rank));
            let std = 1.0 / (b.cols as f64).sqrt();
            values.extend(
                stream
                    .child(b.name)
                    .gaussian(rank * b.cols)?
                    .into_iter()
                    .map(|z| std * z),
            );
        }
        Ok(Self {
            tag,
            dims,
            rank,
            alpha,
            slots,
            values,
        })
    }

    pub fn with_default_alpha(dims: ModelDims, tag: AdapterTag, rank: usize, stream: &RngStream) -> Result<Self> {
        Self::new(dims, tag, rank, 2.0 * rank as f64, stream)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn factors(&self, slot: &FactorSlot) -> (&[f64], &[f64]) {
        let nu = slot.rows * self.rank;
        let u = &self.values[slot.offset..slot.offset + nu];
        let v = &self.values[slot.offset + nu..slot.offset + nu + self.rank * slot.cols];
        (u, v)
    }

    /// Add `scale·(α/r)·U·V` into `out`, block by block.
    fn add_delta(&self, out: &mut ModelParams, scale: f64) {
        let coef = scale * self.scaling();
        let r = self.rank;
        for (slot, b) in self
            .slots
            .iter()
            .zip(out.dims.layout().into_iter().filter(|b| b.is_matrix()))
        {
            let (u, v) = self.factors(slot);
            let w = &mut out.values[b.range()];
            for i in 0..slot.rows {
                for j in 0..slot.cols {
                    let dot: f64 = (0..r).map(|k| u[i * r + k] * v[k * slot.cols + j]).sum();
                    w[i * slot.cols + j] += coef * dot;
                }
            }
        }
    }
}

/// `base + Σ scaleₖ·(α/r)·Uₖ·Vₖ`. Zero-scale adapters are skipped, so they
/// leave `base` bit-unchanged.
pub fn effective_params(base: &ModelParams, adapters: &[(&LowRankAdapter, f64)]) -> Result<ModelParams> {
    let mut out = base.clone();
    for (a, scale) in adapters {
        if a.dims != base.dims {
            return Err(invalid(format!(
                "adapter dimensions {:?} do not match model {:?}",
                a.dims, base.dims
            )));
        }
        if !scale.is_finite() {
            return Err(invalid("adapter scale must be finite"));
        }
        if *scale != 0.0 {
            a.add_delta(&mut out, *scale);
        }
    }
    Ok(out)
}

/// Trains one adapter on top of a frozen base (and optionally other frozen
/// adapters). Only the adapter's factors ever move.
pub struct AdapterLearner<'a> {
    pub base: &'a ModelParams,
    pub frozen: Vec<(&'a LowRankAdapter, f64)>,
    pub adapter: LowRankAdapter,
    pub scale: f64,
}

impl<'a> AdapterLearner<'a> {
    pub fn new(base: &'a ModelParams, adapter: LowRankAdapter) -> Self {
        Self {
            base,
            frozen: Vec::new(),
            adapter,
            scale: 1.0,
        }
    }
}

impl Learner for AdapterLearner<'_> {
    fn effective(&self) -> Result<ModelParams> {
        let mut all = self.frozen.clone();
        all.push((&self.adapter, self.scale));
        effective_params(self.base, &all)
    }

    fn trainable(&self) -> &[f64] {
        &self.adapter.values
    }

    fn trainable_mut(&mut self) -> &mut [f64] {
        &mut self.adapter.values
    }

    /// `gU = c·gW·Vᵀ`, `gV = c·Uᵀ·gW` with `c = scale·α/r`.
    fn pullback(&self, effective_grad: &[f64]) -> Result<Vec<f64>> {
        let a = &self.adapter;
        if effective_grad.len() != self.base.values.len() {
            return Err(invalid("gradient length does not match the model"));
        }
        let c = self.scale * a.scaling();
        let r = a.rank;
        let mut out = vec![0.0; a.values.len()];
        for (slot, b) in a
            .slots
            .iter()
            .zip(a.dims.layout().into_iter().filter(|b| b.is_matrix()))
        {
            let (u, v) = a.factors(slot);
            let gw = &effective_grad[b.range()];
            let (rows, cols) = (slot.rows, slot.cols);
            let (gu, gv) = out[slot.offset..slot.offset + r * (rows + cols)].split_at_mut(rows * r);
            for i in 0..rows {
                for k in 0..r {
                    gu[i * r + k] = c * (0..cols).map(|j| gw[i * cols + j] * v[k * cols + j]).sum::<f64>();
                }
            }
            for k in 0..r {
                for j in 0..cols {
                    gv[k * cols + j] = c * (0..rows).map(|i| u[i * r + k] * gw[i * cols + j]).sum::<f64>();
                }
            }
        }
        Ok(out)
    }
}

/// Scale on the on-policy adapter; the semi adapter always enters at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub scale: f64,
}

impl MergeSpec {
    pub fn merge(&self, base: &ModelParams, semi: &LowRankAdapter, on: &LowRankAdapter) -> Result<ModelParams> {
        if !(0.0..=1.0).contains(&self.scale) {
            return Err(invalid(format!("merge scale {} outside [0, 1]", self.scale)));
        }
        effective_params(base, &[(semi, 1.0), (on, self.scale)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// The semi-only model every scale is compared against.
    pub baseline: EvalReport,
    pub selected_scale: f64,
    /// False when no scale beat the baseline and the selection fell back to 0.
    pub improved: bool,
}

/// Largest scale whose in-domain reward beats the semi-only baseline while
/// the held-out metric stays within `held_out_tolerance·|baseline|` of it.
pub fn select_scale(baseline: &EvalReport, rows: &[SweepRow], held_out_tolerance: f64) -> (f64, bool) {
    let floor = baseline.held_out - held_out_tolerance * baseline.held_out.abs();
    rows.iter()
        .filter(|r| r.scale > 0.0 && r.report.in_domain > baseline.in_domain && r.report.held_out >= floor)
        .map(|r| r.scale)
        .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.max(s))))
        .map_or((0.0, false), |s| (s, true))
}

pub fn scale_sweep(
    base: &ModelParams,
    semi: &LowRankAdapter,
    on: &LowRankAdapter,
    scales: &[f64],
    suite: &EvalSuite,
    held_out_tolerance: f64,
) -> Result<SweepReport> {
    if scales.is_empty() {
        return Err(invalid("scale sweep needs at least one scale"));
    }
    let baseline = suite.evaluate(&MergeSpec { scale: 0.0 }.merge(base, semi, on)?)?;
    let rows = scales
        .iter()
        .map(|&scale| {
            let report = if scale == 0.0 {
                baseline.clone()
            } else {
                suite.evaluate(&MergeSpec { scale }.merge(base, semi, on)?)?
            };
            Ok(SweepRow { scale, report })
        })
        .collect::<Result<Vec<_>>>()?;
    let (selected_scale, improved) = select_scale(&baseline, &rows, held_out_tolerance);
    Ok(SweepReport {
        rows,
        baseline,
        selected_scale,
        improved,
    })
}

impl SweepReport {
    /// One row per scale: held-out columns, then in-domain, then whether the
    /// row was selected.
    pub fn to_csv(&self, monitor_names: &[String]) -> String {
        let mut out = String::from("scale,held_out,held_out_reward");
        for m in monitor_names {
            let _ = write!(out, ",held_out_{m}");
        }
        out.push_str(",in_domain,selected\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.scale, r.report.held_out, r.report.held_out_reward);
            for m in &r.report.held_out_monitors {
                let _ = write!(out, ",{m}");
            }
            let sel = u8::from(self.improved && r.scale == self.selected_scale || !self.improved && r.scale == 0.0);
            let _ = writeln!(out, ",{},{sel}", r.report.in_domain);
        }
        out
    }
}

pub fn write_adapter(a: &LowRankAdapter) -> Vec<u8> {
    let mut w = ByteWriter::new(ADAPTER_MAGIC);
    w.u32(match a.tag {
        AdapterTag::OnPolicy => 0,
        AdapterTag::Semi => 1,
    });
    for v in [
        a.dims.chunk_dim,
        a.dims.context_dim,
        a.dims.hidden1,
        a.dims.hidden2,
        a.rank,
    ] {
        w.u32(v);
    }
    w.f64(a.alpha);
    w.u32(a.slots.len());
    for s in &a.slots {
        w.str(&s.block);
        w.u32(s.rows);
        w.u32(s.cols);
        let n = a.rank * (s.rows + s.cols);
        w.f64s(&a.values[s.offset..s.offset + n]);
    }
    w.buf
}

pub fn read_adapter(bytes: &[u8]) -> Result<LowRankAdapter> {
    let mut r = ByteReader::new(bytes, ADAPTER_MAGIC)?;
    let tag = match r.u32()? {
        0 => AdapterTag::OnPolicy,
        1 => AdapterTag::Semi,
        t => return Err(Error::Format(format!("unknown adapter tag {t}"))),
    };
    let dims = ModelDims {
        chunk_dim: r.u32()?,
        context_dim: r.u32()?,
        hidden1: r.u32()?,
        hidden2: r.u32()?,
    };
    let rank = r.u32()?;
    let alpha = r.f64()?;
    // the layout is fixed by the dimensions; check the file agrees with it
    let mut out = LowRankAdapter::new(dims, tag, rank, alpha, &RngStream::new(0))?;
    if r.u32()? != out.slots.len() {
        return Err(Error::Format("unexpected adapter slot count".into()));
    }
    for s in &out.slots {
        let (name, rows, cols) = (r.str()?, r.u32()?, r.u32()?);
        if name != s.block || rows != s.rows || cols != s.cols {
            return Err(Error::Format(format!(
                "adapter slot `{name}` {rows}x{cols} does not match layout"
            )));
        }
        let vals = r.f64s()?;
        if vals.len() != rank * (rows + cols) {
            return Err(Error::Format(format!(
                "adapter slot `{name}` has {} values",
                vals.len()
            )));
        }
        out.values[s.offset..s.offset + vals.len()].copy_from_slice(&vals);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_adapter(a: &LowRankAdapter, path: &Path) -> Result<()> {
    std::fs::write(path, write_adapter(a))?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<LowRankAdapter> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("adapter {}", path.display())),
        _ => Error::Io(e),
    })?;
    read_adapter(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn base() -> ModelParams {
        ModelParams::init(ModelDims::default(), &RngStream::at(3, "base")).unwrap()
    }

    fn trained(tag: AdapterTag, seed: u64) -> LowRankAdapter {
        let mut a = LowRankAdapter::with_default_alpha(ModelDims::default(), tag, 4, &RngStream::new(seed)).unwrap();
        let noise = RngStream::at(seed, "u").gaussian(a.values.len()).unwrap();
        for (v, z) in a.values.iter_mut().zip(noise) {
            *v += 0.05 * z;
        }
        a
    }

    #[test]
    fn fresh_adapter_is_noop() {
        let b = base();
        let a = LowRankAdapter::with_default_alpha(b.dims, AdapterTag::Semi, 4, &RngStream::new(1)).unwrap();
        assert_eq!(a.scaling(), 2.0);
        for s in [0.0, 0.5, 1.0, 3.0] {
            assert_eq!(effective_params(&b, &[(&a, s)]).unwrap(), b);
        }
        assert_eq!(effective_params(&b, &[]).unwrap(), b);
    }

    #[test]
    fn delta_doubles_with_scale() {
        let zero = ModelParams::zeros(ModelDims::default());
        let a = trained(AdapterTag::OnPolicy, 2);
        let one = effective_params(&zero, &[(&a, 0.3)]).unwrap();
        let two = effective_params(&zero, &[(&a, 0.6)]).unwrap();
        for (x, y) in one.values.iter().zip(&two.values) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn zero_scale_merge_is_semi_model() {
        let b = base();
        let semi = trained(AdapterTag::Semi, 2);
        let on = trained(AdapterTag::OnPolicy, 3);
        let merged = MergeSpec { scale: 0.0 }.merge(&b, &semi, &on).unwrap();
        assert_eq!(merged, effective_params(&b, &[(&semi, 1.0)]).unwrap());
        assert!(MergeSpec { scale: 1.5 }.merge(&b, &semi, &on).is_err());
    }

    #[test]
    fn biases_are_untouched() {
        let b = base();
        let m = effective_params(&b, &[(&trained(AdapterTag::Semi, 5), 1.0)]).unwrap();
        for blk in b.dims.layout() {
            if blk.is_matrix() {
                assert_ne!(m.block(blk.name), b.block(blk.name));
            } else {
                assert_eq!(m.block(blk.name), b.block(blk.name));
            }
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let b = base();
        let adapter = trained(AdapterTag::OnPolicy, 7);
        let weights = RngStream::new(11).gaussian(b.values.len()).unwrap();
        // a linear functional of the effective parameters: gradient is `weights`
        let f = |vals: &[f64]| {
            let mut a = adapter.clone();
            a.values.copy_from_slice(vals);
            let e = effective_params(&b, &[(&a, 0.7)])?;
            Ok(e.values.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>())
        };
        let learner = AdapterLearner {
            scale: 0.7,
            ..AdapterLearner::new(&b, adapter.clone())
        };
        let analytic = learner.pullback(&weights).unwrap();
        let fd = finite_diff_grad(f, &adapter.values, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn adapter_round_trips() {
        let a = trained(AdapterTag::Semi, 4);
        let bytes = write_adapter(&a);
        assert_eq!(read_adapter(&bytes).unwrap(), a);
        assert!(read_adapter(&bytes[1..]).is_err());
    }

    fn report(in_domain: f64, held_out: f64) -> EvalReport {
        EvalReport {
            in_domain,
            held_out_reward: held_out,
            held_out_monitors: vec![],
            held_out,
        }
    }

    #[test]
    fn selection_takes_largest_non_degrading_scale() {
        let baseline = report(-1.0, -2.0);
        let rows: Vec<SweepRow> = [
            (0.0, -1.0, -2.0),
            (0.4, -0.9, -1.99),
            (0.6, -0.8, -2.0),
            (0.8, -0.7, -2.01),
            (1.0, -0.6, -2.5),
        ]
        .into_iter()
        .map(|(scale, i, h)| SweepRow {
            scale,
            report: report(i, h),
        })
        .collect();
        assert_eq!(select_scale(&baseline, &rows, 0.01), (0.8, true));
        assert_eq!(select_scale(&baseline, &rows, 0.0), (0.6, true));
        let flat: Vec<SweepRow> = rows
            .iter()
            .map(|r| SweepRow {
                scale: r.scale,
                report: baseline.clone(),
            })
            .collect();
        assert_eq!(select_scale(&baseline, &flat, 0.01), (0.0, false));
    }
}
