//! The denoiser `F(x_t, h, t) -> x0_hat` and the recurrent context encoder.
//!
//! Parameters live in one flat vector laid out block by block (row-major
//! weights followed by their bias). The same layout is used by the tape, the
//! checkpoint format, and the adapters.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{vecops, RngStream, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub chunk_dim: usize,
    pub context_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            chunk_dim: 8,
            context_dim: 16,
            hidden1: 32,
            hidden2: 32,
        }
    }
}

impl ModelDims {
    /// Denoiser input width: chunk, context and one raw timestep scalar.
    pub fn input_dim(&self) -> usize {
        self.chunk_dim + self.context_dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_dim == 0 || self.context_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(invalid(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Block> {
        let d = self;
        let shapes = [
            ("w1", d.hidden1, d.input_dim()),
            ("b1", d.hidden1, 1),
            ("w2", d.hidden2, d.hidden1),
            ("b2", d.hidden2, 1),
            ("w3", d.chunk_dim, d.hidden2),
            ("b3", d.chunk_dim, 1),
            ("we", d.context_dim, d.context_dim + d.chunk_dim),
            ("be", d.context_dim, 1),
        ];
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = Block {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                b
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(Block::len).sum()
    }
}

/// One named weight or bias block inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Dense weight matrices (as opposed to bias vectors).
    pub fn is_matrix(&self) -> bool {
        self.name.starts_with('w')
    }
}

/// Recurrent stand-in for a KV cache: the context vector after absorbing
/// `chunk_index` clean chunks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextCache {
    pub h: Vec<f64>,
    pub chunk_index: usize,
}

impl ContextCache {
    /// Initial context carrying the prompt: the target vector written into the
    /// leading coordinates, zero elsewhere.
    pub fn initial(prompt_target: &[f64], context_dim: usize) -> Self {
        let mut h = vec![0.0; context_dim];
        for (dst, src) in h.iter_mut().zip(prompt_target) {
            *dst = *src;
        }
        Self { h, chunk_index: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    /// Scaled-Gaussian weights (variance `1/fan_in`), zero biases.
    pub fn init(dims: ModelDims, stream: &RngStream) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        for block in dims.layout().iter().filter(|b| b.is_matrix()) {
            let mut s = stream.child(block.name);
            let draws = s.gaussian(block.len())?;
            let scale = 1.0 / (block.cols as f64).sqrt();
            for (dst, z) in p.values[block.range()].iter_mut().zip(draws) {
                *dst = z * scale;
            }
        }
        Ok(p)
    }

    pub fn from_values(dims: ModelDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(invalid(format!(
                "expected {} parameters for {dims:?}, got {}",
                dims.param_count(),
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let b = self
            .dims
            .layout()
            .into_iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("unknown block {name}"));
        &self.values[b.range()]
    }

    pub fn is_finite(&self) -> bool {
        vecops::all_finite(&self.values)
    }

    fn check_inputs(&self, x_t: &[f64], h: &[f64], t: f64) -> Result<()> {
        if x_t.len() != self.dims.chunk_dim {
            return Err(invalid(format!(
                "latent has length {}, model expects {}",
                x_t.len(),
                self.dims.chunk_dim
            )));
        }
        if h.len() != self.dims.context_dim {
            return Err(invalid(format!(
                "context has length {}, model expects {}",
                h.len(),
                self.dims.context_dim
            )));
        }
        if !(t > 0.0) {
            return Err(invalid(format!("timestep must be positive, got {t}")));
        }
        Ok(())
    }

    /// Clean-chunk prediction `x0_hat = F(x_t, h, t)`.
    pub fn predict_x0(&self, x_t: &[f64], ctx: &ContextCache, t: f64) -> Result<Vec<f64>> {
        self.check_inputs(x_t, &ctx.h, t)?;
        let d = self.dims;
        let layout = d.layout();
        let v = &self.values;
        let mut input = Vec::with_capacity(d.input_dim());
        input.extend_from_slice(x_t);
        input.extend_from_slice(&ctx.h);
        input.push(t);
        let a1: Vec<f64> = vecops::affine(
            &v[layout[0].range()],
            &v[layout[1].range()],
            &input,
            d.hidden1,
            d.input_dim(),
        )
        .into_iter()
        .map(f64::tanh)
        .collect();
        let a2: Vec<f64> = vecops::affine(&v[layout[2].range()], &v[layout[3].range()], &a1, d.hidden2, d.hidden1)
            .into_iter()
            .map(f64::tanh)
            .collect();
        Ok(vecops::affine(
            &v[layout[4].range()],
            &v[layout[5].range()],
            &a2,
            d.chunk_dim,
            d.hidden2,
        ))
    }

    /// Recorded version of [`predict_x0`](Self::predict_x0). `p` must hold the
    /// full flat parameter vector.
    pub fn predict_x0_tape(dims: &ModelDims, tape: &mut Tape, p: Var, x_t: Var, h: Var, t: f64) -> Result<Var> {
        if tape.value(x_t).len() != dims.chunk_dim || tape.value(h).len() != dims.context_dim {
            return Err(invalid("denoiser input dimension mismatch"));
        }
        let layout = dims.layout();
        let blk = |tape: &mut Tape, i: usize| tape.slice(p, layout[i].offset, layout[i].len());
        let tv = tape.constant(&[t]);
        let input = tape.concat(&[x_t, h, tv]);
        let (w1, b1) = (blk(tape, 0), blk(tape, 1));
        let z1 = tape.affine(w1, b1, input, dims.hidden1, dims.input_dim())?;
        let a1 = tape.tanh(z1);
        let (w2, b2) = (blk(tape, 2), blk(tape, 3));
        let z2 = tape.affine(w2, b2, a1, dims.hidden2, dims.hidden1)?;
        let a2 = tape.tanh(z2);
        let (w3, b3) = (blk(tape, 4), blk(tape, 5));
        tape.affine(w3, b3, a2, dims.chunk_dim, dims.hidden2)
    }

    /// `h' = tanh(W_e [h; chunk] + b_e)`.
    pub fn extend_context(&self, ctx: &ContextCache, clean_chunk: &[f64]) -> Result<ContextCache> {
        let d = self.dims;
        if clean_chunk.len() != d.chunk_dim || ctx.h.len() != d.context_dim {
            return Err(invalid("context update dimension mismatch"));
        }
        let layout = d.layout();
        let mut input = ctx.h.clone();
        input.extend_from_slice(clean_chunk);
        let h = vecops::affine(
            &self.values[layout[6].range()],
            &self.values[layout[7].range()],
            &input,
            d.context_dim,
            d.context_dim + d.chunk_dim,
        )
        .into_iter()
        .map(f64::tanh)
        .collect();
        Ok(ContextCache {
            h,
            chunk_index: ctx.chunk_index + 1,
        })
    }

    pub fn extend_context_tape(dims: &ModelDims, tape: &mut Tape, p: Var, h: Var, chunk: Var) -> Result<Var> {
        let layout = dims.layout();
        let we = tape.slice(p, layout[6].offset, layout[6].len());
        let be = tape.slice(p, layout[7].offset, layout[7].len());
        let input = tape.concat(&[h, chunk]);
        let z = tape.affine(we, be, input, dims.context_dim, dims.context_dim + dims.chunk_dim)?;
        Ok(tape.tanh(z))
    }
}
