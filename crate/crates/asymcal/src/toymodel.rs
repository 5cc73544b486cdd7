//! Deterministic toy networks and synthetic calibration data.
//!
//! Weights are drawn with an explicit singular spectrum — orthonormal
//! factors around a geometrically decaying diagonal — so the layer
//! Hessians downstream of a weight matrix can be made as ill-conditioned
//! as a test needs. Everything derives from the ToySpec's seed;
//! reconstruction is bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, LinearLayer, ModelGraph, Stage};
use crate::tensor::{dot, gen_correlated, Dtype, Matrix, Rng, Seed};

/// Calibration-set size matching the usual post-training setup.
pub const DEFAULT_SAMPLES: usize = 128;
/// Tokens per sample; also the attention window of the transformer toy.
pub const DEFAULT_TOKENS: usize = 16;

/// Channel-correlation decay of the synthetic calibration data.
const DATA_DECAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Mlp,
    TinyTransformer,
}

/// Recipe for a toy network. `decay` is the per-index singular-value
/// falloff of every weight matrix: 1.0 gives flat isotropic spectra,
/// smaller values concentrate each layer's output in fewer directions
/// and degrade the downstream Hessian conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub blocks: usize,
    pub width: usize,
    pub hidden_mult: usize,
    pub seed: u64,
    pub decay: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            kind: ToyKind::Mlp,
            blocks: 4,
            width: 32,
            hidden_mult: 2,
            seed: 0,
            decay: 0.9,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.blocks) {
            return Err(Error::InvalidConfig(format!(
                "toy models take 2..=6 blocks, got {}",
                self.blocks
            )));
        }
        if !(16..=128).contains(&self.width) {
            return Err(Error::InvalidConfig(format!(
                "toy widths stay within 16..=128, got {}",
                self.width
            )));
        }
        if !(1..=8).contains(&self.hidden_mult) {
            return Err(Error::InvalidConfig(format!(
                "hidden multiplier 1..=8, got {}",
                self.hidden_mult
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "weight spectrum decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// Orthonormal-column matrix (rows×cols, rows ≥ cols) from seeded
/// Gaussians by modified Gram–Schmidt with one re-orthogonalization
/// pass. Operates on the transpose so every vector is a contiguous row.
fn orthonormal_columns(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    debug_assert!(rows >= cols);
    let mut g = rng.normal_matrix(cols, rows, Dtype::F64);
    for j in 0..cols {
        for _pass in 0..2 {
            for i in 0..j {
                let (done, cur) = g.data_mut().split_at_mut(j * rows);
                let u = &done[i * rows..(i + 1) * rows];
                let v = &mut cur[..rows];
                let c = dot(u, v);
                for (vt, ut) in v.iter_mut().zip(u) {
                    *vt -= c * ut;
                }
            }
        }
        let norm = dot(g.row(j), g.row(j)).sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateInput(
                "rank collapse while orthonormalizing".into(),
            ));
        }
        let inv = 1.0 / norm;
        for v in g.row_mut(j) {
            *v *= inv;
        }
    }
    Ok(g.transpose())
}

/// out×in weight with singular values decay⁰, decay¹, …: U·diag(σ)·Vᵀ
/// with freshly drawn orthonormal U and V.
fn spectrum_weight(seed: Seed, salt: u64, out: usize, inp: usize, decay: f64) -> Result<Matrix> {
    let r = out.min(inp);
    let u = orthonormal_columns(&mut seed.stream(salt * 2 + 1), out, r)?;
    let v = orthonormal_columns(&mut seed.stream(salt * 2 + 2), inp, r)?;
    let mut us = u;
    let mut sigma = 1.0;
    for i in 0..r {
        for row in 0..out {
            let val = us.at(row, i) * sigma;
            us.set(row, i, val);
        }
        sigma *= decay;
    }
    us.matmul_nt(&v)
}

fn layer(name: &str, w: Matrix) -> LinearLayer {
    LinearLayer {
        name: name.into(),
        w,
    }
}

/// Builds the network described by the spec. Same spec, same bits.
pub fn build_model(spec: &ToySpec) -> Result<ModelGraph> {
    spec.validate()?;
    let n = spec.width;
    let h = n * spec.hidden_mult;
    let seed = Seed(spec.seed);
    let mut blocks = Vec::with_capacity(spec.blocks);
    for bi in 0..spec.blocks {
        let salt = |slot: usize| ((bi as u64) << 8) | slot as u64;
        let block = match spec.kind {
            ToyKind::Mlp => Block {
                stages: vec![
                    Stage::SaveResidual,
                    Stage::Norm,
                    Stage::Linear { layer: 0 },
                    Stage::Gelu,
                    Stage::Linear { layer: 1 },
                    Stage::AddResidual,
                ],
                layers: vec![
                    layer("fc1", spectrum_weight(seed, salt(0), h, n, spec.decay)?),
                    layer("fc2", spectrum_weight(seed, salt(1), n, h, spec.decay)?),
                ],
            },
            ToyKind::TinyTransformer => Block {
                stages: vec![
                    Stage::SaveResidual,
                    Stage::Norm,
                    Stage::Attention {
                        q: 0,
                        k: 1,
                        v: 2,
                        o: 3,
                        window: DEFAULT_TOKENS,
                    },
                    Stage::AddResidual,
                    Stage::SaveResidual,
                    Stage::Norm,
                    Stage::Linear { layer: 4 },
                    Stage::Gelu,
                    Stage::Linear { layer: 5 },
                    Stage::AddResidual,
                ],
                layers: vec![
                    layer("attn_q", spectrum_weight(seed, salt(0), n, n, spec.decay)?),
                    layer("attn_k", spectrum_weight(seed, salt(1), n, n, spec.decay)?),
                    layer("attn_v", spectrum_weight(seed, salt(2), n, n, spec.decay)?),
                    layer("attn_o", spectrum_weight(seed, salt(3), n, n, spec.decay)?),
                    layer("fc1", spectrum_weight(seed, salt(4), h, n, spec.decay)?),
                    layer("fc2", spectrum_weight(seed, salt(5), n, h, spec.decay)?),
                ],
            },
        };
        blocks.push(block);
    }
    let model = ModelGraph {
        kind: match spec.kind {
            ToyKind::Mlp => "mlp".into(),
            ToyKind::TinyTransformer => "tiny_transformer".into(),
        },
        seed: spec.seed,
        input_dim: n,
        blocks,
    };
    model.validate()?;
    Ok(model)
}

/// Synthetic calibration batch: `samples × tokens` correlated activation
/// columns over the model's input width. Drawn from a stream decoupled
/// from the weight seed so data and weights are independent draws.
pub fn gen_calib(spec: &ToySpec, samples: usize, tokens: usize) -> Result<Matrix> {
    spec.validate()?;
    if samples == 0 || tokens == 0 {
        return Err(Error::InvalidConfig(format!(
            "calibration needs samples, tokens >= 1 (got {samples}, {tokens})"
        )));
    }
    gen_correlated(
        Seed(spec.seed ^ 0xca11b0b1_u64),
        spec.width,
        samples * tokens,
        DATA_DECAY,
    )
}
