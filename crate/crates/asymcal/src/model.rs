//! Small feed-forward network graph for calibration experiments.
//!
//! A model is an ordered list of blocks; each block owns its linear
//! layers plus a recipe of stages (normalize, nonlinearity, residual
//! save/add, single-head attention) describing how activations flow
//! through them. Everything is deterministic and dtype-stable so two
//! forwards of the same model on the same input are bit-identical.
//!
//! On disk a model is a directory: `model.json` with the graph structure
//! and a `weights/` folder of tensor containers referenced by relative
//! path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::quantizer::{quantize_activations, ActQuantConfig};
use crate::tensor::Matrix;

const RMS_EPS: f64 = 1e-6;

/// One weight matrix (out×in), applied as W·x. No bias terms — the
/// calibration math is bias-free and biases would only dilute the toy
/// experiments.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub w: Matrix,
}

impl LinearLayer {
    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }
}

/// One step of a block's forward recipe. `Linear` and the four indices
/// of `Attention` refer into the owning block's layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Stage {
    /// RMS-normalize every column (token) over its channels.
    Norm,
    /// Elementwise GELU, rational sigmoid approximation.
    Gelu,
    Linear { layer: usize },
    /// Push the current activation onto the residual stack.
    SaveResidual,
    /// Pop the residual stack and add.
    AddResidual,
    /// Single-head dot-product attention over column windows: q/k/v
    /// project the stage input, the mixed context goes through o.
    Attention {
        q: usize,
        k: usize,
        v: usize,
        o: usize,
        window: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Block {
    pub stages: Vec<Stage>,
    pub layers: Vec<LinearLayer>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    /// Human-readable variant tag ("mlp", "tiny_transformer", …).
    pub kind: String,
    /// Seed the weights were drawn from; kept for report metadata.
    pub seed: u64,
    /// Channel count the first block expects.
    pub input_dim: usize,
    pub blocks: Vec<Block>,
}

/// Mean of |X̃ − X| over all elements.
pub fn block_mae(x_tilde: &Matrix, x: &Matrix) -> Result<f64> {
    Ok(x_tilde.mean_abs_diff(x)?)
}

/// Per-column RMS normalization: column c is scaled by
/// 1/√(mean(x²) + ε). Zero columns stay finite (and near zero).
pub fn rms_norm(x: &Matrix) -> Matrix {
    let (n, k) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(n, k, x.dtype());
    let mut inv = vec![0.0; k];
    for c in 0..k {
        let mut s = 0.0;
        for r in 0..n {
            let v = x.at(r, c);
            s += v * v;
        }
        inv[c] = 1.0 / (s / n as f64 + RMS_EPS).sqrt();
    }
    for r in 0..n {
        for c in 0..k {
            out.set(r, c, x.at(r, c) * inv[c]);
        }
    }
    out
}

/// GELU with the sigmoid form, where the sigmoid is the rational
/// approximation σ(u) ≈ 0.5 + 0.5·u/(1 + |u|): exactly reproducible on
/// every platform, no transcendental library calls.
pub fn gelu(x: f64) -> f64 {
    let u = 1.702 * x;
    x * (0.5 + 0.5 * u / (1.0 + u.abs()))
}

fn gelu_mat(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu(*v);
    }
    out
}

/// Softmax attention within each contiguous `window` of columns:
/// scores_ij = ⟨q_i, k_j⟩/√d, context column i = Σ_j softmax_j(scores_i·)·v_j.
fn attention_mix(qm: &Matrix, km: &Matrix, vm: &Matrix, window: usize) -> Result<Matrix> {
    let kc = qm.cols();
    if km.cols() != kc || vm.cols() != kc || km.rows() != qm.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention_mix",
            left: (qm.rows(), qm.cols()),
            right: (km.rows(), km.cols()),
        });
    }
    if window == 0 || kc % window != 0 {
        return Err(Error::InvalidConfig(format!(
            "attention window {window} does not divide {kc} columns"
        )));
    }
    let d = qm.rows();
    let dv = vm.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(dv, kc, vm.dtype());
    let mut scores = vec![0.0; window];
    for w0 in (0..kc).step_by(window) {
        for i in 0..window {
            let qi = w0 + i;
            let mut max_s = f64::NEG_INFINITY;
            for j in 0..window {
                let kj = w0 + j;
                let mut s = 0.0;
                for r in 0..d {
                    s += qm.at(r, qi) * km.at(r, kj);
                }
                scores[j] = s * scale;
                max_s = max_s.max(scores[j]);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max_s).exp();
                z += *s;
            }
            for r in 0..dv {
                let mut acc = 0.0;
                for j in 0..window {
                    acc += scores[j] * vm.at(r, w0 + j);
                }
                out.set(r, qi, acc / z);
            }
        }
    }
    Ok(out)
}

fn maybe_aq(x: Matrix, aq: Option<&ActQuantConfig>) -> Result<Matrix> {
    match aq {
        Some(cfg) => quantize_activations(&x, cfg),
        None => Ok(x),
    }
}

fn layer_at<'a>(
    layers: &'a [LinearLayer],
    idx: usize,
    block: Option<usize>,
) -> Result<&'a LinearLayer> {
    layers.get(idx).ok_or_else(|| match block {
        Some(b) => Error::InvalidConfig(format!(
            "block {b}: stage references missing layer {idx}"
        )),
        None => Error::InvalidConfig(format!("stage references missing layer {idx}")),
    })
}

impl Block {
    /// Plain forward pass. `aq` quantizes the input of every linear
    /// projection (including attention's q/k/v and o) when set.
    pub fn forward(&self, x: &Matrix, aq: Option<&ActQuantConfig>) -> Result<Matrix> {
        self.forward_with(x, aq, |_, _, _| Ok(None))
    }

    /// Forward pass with a per-layer hook. Before a layer is applied the
    /// hook sees (layer index, layer, the exact input it will consume —
    /// activation quantization already applied). If the hook returns
    /// replacement weights they are installed first and the replacement
    /// is what the stream runs through; this is how calibration swaps
    /// quantized weights into the live forward. The hook's own layer
    /// reference reflects earlier replacements. Stateless hooks make
    /// this an ordinary instrumented forward.
    pub fn forward_with<F>(&self, x: &Matrix, aq: Option<&ActQuantConfig>, mut hook: F) -> Result<Matrix>
    where
        F: FnMut(usize, &LinearLayer, &Matrix) -> Result<Option<Matrix>>,
    {
        // The hook may replace weights, so work on a local copy of the
        // layer list... which would clone every weight. Instead the
        // mutable variant below does the real work; a shared-ref forward
        // only ever passes a non-replacing hook, so route through a
        // scratch clone only when a replacement actually happens.
        let mut replaced: Vec<Option<Matrix>> = vec![None; self.layers.len()];
        let mut stack: Vec<Matrix> = Vec::new();
        let mut cur = x.clone();
        let apply = |replaced: &mut Vec<Option<Matrix>>,
                     hook: &mut F,
                     idx: usize,
                     input: Matrix,
                     layers: &[LinearLayer],
                     aq: Option<&ActQuantConfig>|
         -> Result<Matrix> {
            let base = layer_at(layers, idx, None)?;
            let input = maybe_aq(input, aq)?;
            let tmp;
            let current: &LinearLayer = match &replaced[idx] {
                Some(w) => {
                    tmp = LinearLayer {
                        name: base.name.clone(),
                        w: w.clone(),
                    };
                    &tmp
                }
                None => base,
            };
            if let Some(wq) = hook(idx, current, &input)? {
                replaced[idx] = Some(wq);
            }
            let w = replaced[idx].as_ref().unwrap_or(&base.w);
            w.matmul(&input)
        };
        for stage in &self.stages {
            cur = match stage {
                Stage::Norm => rms_norm(&cur),
                Stage::Gelu => gelu_mat(&cur),
                Stage::SaveResidual => {
                    stack.push(cur.clone());
                    cur
                }
                Stage::AddResidual => {
                    let mut top = stack.pop().ok_or_else(|| {
                        Error::InvalidConfig("residual add with empty stack".into())
                    })?;
                    top.add_assign(&cur)?;
                    top
                }
                Stage::Linear { layer } => {
                    apply(&mut replaced, &mut hook, *layer, cur, &self.layers, aq)?
                }
                Stage::Attention { q, k, v, o, window } => {
                    let qa = apply(&mut replaced, &mut hook, *q, cur.clone(), &self.layers, aq)?;
                    let ka = apply(&mut replaced, &mut hook, *k, cur.clone(), &self.layers, aq)?;
                    let va = apply(&mut replaced, &mut hook, *v, cur, &self.layers, aq)?;
                    let ctx = attention_mix(&qa, &ka, &va, *window)?;
                    apply(&mut replaced, &mut hook, *o, ctx, &self.layers, aq)?
                }
            };
        }
        if !stack.is_empty() {
            return Err(Error::InvalidConfig(
                "residual stack not empty at block exit".into(),
            ));
        }
        Ok(cur)
    }

    /// Install replacement weights produced during [`forward_with`].
    pub fn set_weights(&mut self, idx: usize, w: Matrix) -> Result<()> {
        let layer = self.layers.get_mut(idx).ok_or_else(|| {
            Error::InvalidConfig(format!("no layer {idx} to replace"))
        })?;
        if (layer.w.rows(), layer.w.cols()) != (w.rows(), w.cols()) {
            return Err(Error::ShapeMismatch {
                op: "set_weights",
                left: (layer.w.rows(), layer.w.cols()),
                right: (w.rows(), w.cols()),
            });
        }
        layer.w = w;
        Ok(())
    }

    /// Walks the stage recipe with symbolic dimensions, checking layer
    /// references, shape chaining, and residual-stack discipline.
    /// Returns the output channel count for `input_dim` channels in.
    fn check(&self, block_idx: usize, input_dim: usize) -> Result<usize> {
        let mut dim = input_dim;
        let mut stack: Vec<usize> = Vec::new();
        let mut seen = vec![false; self.layers.len()];
        let expect = |idx: usize, want_in: usize, seen: &mut Vec<bool>| -> Result<usize> {
            let l = layer_at(&self.layers, idx, Some(block_idx))?;
            if l.in_dim() != want_in {
                return Err(Error::ShapeMismatch {
                    op: "model_validate",
                    left: (l.out_dim(), l.in_dim()),
                    right: (want_in, 0),
                });
            }
            seen[idx] = true;
            Ok(l.out_dim())
        };
        for stage in &self.stages {
            match stage {
                Stage::Norm | Stage::Gelu => {}
                Stage::SaveResidual => stack.push(dim),
                Stage::AddResidual => {
                    let saved = stack.pop().ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "block {block_idx}: residual add with empty stack"
                        ))
                    })?;
                    if saved != dim {
                        return Err(Error::InvalidConfig(format!(
                            "block {block_idx}: residual dims {saved} vs {dim}"
                        )));
                    }
                }
                Stage::Linear { layer } => dim = expect(*layer, dim, &mut seen)?,
                Stage::Attention { q, k, v, o, window } => {
                    if *window == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "block {block_idx}: zero attention window"
                        )));
                    }
                    let dq = expect(*q, dim, &mut seen)?;
                    let dk = expect(*k, dim, &mut seen)?;
                    let dv = expect(*v, dim, &mut seen)?;
                    if dq != dk {
                        return Err(Error::InvalidConfig(format!(
                            "block {block_idx}: query dim {dq} vs key dim {dk}"
                        )));
                    }
                    dim = expect(*o, dv, &mut seen)?;
                }
            }
        }
        if !stack.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "block {block_idx}: {} unconsumed residual saves",
                stack.len()
            )));
        }
        if let Some(idx) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!(
                "block {block_idx}: layer {idx} is never used by any stage"
            )));
        }
        Ok(dim)
    }
}

impl ModelGraph {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("model has no blocks".into()));
        }
        let mut dim = self.input_dim;
        for (i, b) in self.blocks.iter().enumerate() {
            dim = b.check(i, dim)?;
        }
        Ok(())
    }

    /// Full forward: fold every block in order.
    pub fn forward(&self, x: &Matrix, aq: Option<&ActQuantConfig>) -> Result<Matrix> {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur, aq)?;
        }
        Ok(cur)
    }

    /// Combined content hash over every layer's weights; two models are
    /// equal-for-our-purposes iff this matches.
    pub fn weights_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in &self.blocks {
            for l in &b.layers {
                for byte in l.w.content_hash().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layers.len()).sum()
    }

    /// Writes `model.json` plus one tensor container per layer under
    /// `weights/` in the given directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let wdir = dir.join("weights");
        fs::create_dir_all(&wdir)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.iter().enumerate() {
            let mut layers = Vec::with_capacity(b.layers.len());
            for l in &b.layers {
                let rel = format!("weights/b{bi}_{}.gtaq", l.name);
                write_tensor(&dir.join(&rel), &l.w)?;
                layers.push(LayerDesc {
                    name: l.name.clone(),
                    rows: l.w.rows(),
                    cols: l.w.cols(),
                    path: rel,
                });
            }
            blocks.push(BlockDesc {
                stages: b.stages.clone(),
                layers,
            });
        }
        let desc = ModelDesc {
            kind: self.kind.clone(),
            seed: self.seed,
            input_dim: self.input_dim,
            blocks,
        };
        let json = serde_json::to_string_pretty(&desc)
            .map_err(|e| Error::Format(format!("model description: {e}")))?;
        fs::write(dir.join("model.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelGraph> {
        let desc_path = dir.join("model.json");
        let raw = fs::read_to_string(&desc_path)
            .map_err(|e| Error::from(e).annotate(desc_path.display().to_string()))?;
        let desc: ModelDesc = serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("model description: {e}")))?;
        let mut blocks = Vec::with_capacity(desc.blocks.len());
        for bd in desc.blocks {
            let mut layers = Vec::with_capacity(bd.layers.len());
            for ld in bd.layers {
                let w = read_tensor(&dir.join(&ld.path))?;
                if (w.rows(), w.cols()) != (ld.rows, ld.cols) {
                    return Err(Error::Format(format!(
                        "{}: container is {}x{}, description says {}x{}",
                        ld.path,
                        w.rows(),
                        w.cols(),
                        ld.rows,
                        ld.cols
                    )));
                }
                layers.push(LinearLayer { name: ld.name, w });
            }
            blocks.push(Block {
                stages: bd.stages,
                layers,
            });
        }
        let model = ModelGraph {
            kind: desc.kind,
            seed: desc.seed,
            input_dim: desc.input_dim,
            blocks,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDesc {
    kind: String,
    seed: u64,
    input_dim: usize,
    blocks: Vec<BlockDesc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDesc {
    stages: Vec<Stage>,
    layers: Vec<LayerDesc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDesc {
    name: String,
    rows: usize,
    cols: usize,
    path: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dtype, Seed};
    use tempfile::tempdir;

    fn tiny_mlp_block(seed: u64, n: usize, h: usize) -> Block {
        let mut rng = Seed(seed).stream(7);
        let mut fc1 = rng.normal_matrix(h, n, Dtype::F64);
        fc1.scale(1.0 / (n as f64).sqrt());
        let mut fc2 = rng.normal_matrix(n, h, Dtype::F64);
        fc2.scale(1.0 / (h as f64).sqrt());
        Block {
            stages: vec![
                Stage::SaveResidual,
                Stage::Norm,
                Stage::Linear { layer: 0 },
                Stage::Gelu,
                Stage::Linear { layer: 1 },
                Stage::AddResidual,
            ],
            layers: vec![
                LinearLayer { name: "fc1".into(), w: fc1 },
                LinearLayer { name: "fc2".into(), w: fc2 },
            ],
        }
    }

    fn tiny_model(seed: u64, n: usize) -> ModelGraph {
        ModelGraph {
            kind: "mlp".into(),
            seed,
            input_dim: n,
            blocks: vec![tiny_mlp_block(seed, n, 2 * n), tiny_mlp_block(seed + 1, n, 2 * n)],
        }
    }

    #[test]
    fn rms_norm_unit_columns() {
        let x = Matrix::from_vec(2, 3, Dtype::F64, vec![3.0, 0.0, 1.0, 4.0, 0.0, 1.0]).unwrap();
        let y = rms_norm(&x);
        for c in 0..3 {
            let ms: f64 = (0..2).map(|r| y.at(r, c) * y.at(r, c)).sum::<f64>() / 2.0;
            if c == 1 {
                assert!(ms.abs() < 1e-12, "zero column blew up: {ms}");
            } else {
                assert!((ms - 1.0).abs() < 1e-5, "column {c} mean square {ms}");
            }
        }
        assert!(y.all_finite());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        let v = gelu(1.0);
        assert!((v - (0.5 + 0.5 * 1.702 / 2.702)).abs() < 1e-15);
        assert!((gelu(30.0) - 30.0).abs() / 30.0 < 0.01);
        assert!(gelu(-30.0).abs() < 0.3);
        assert!(gelu(1.5) > gelu(1.0));
    }

    #[test]
    fn uniform_attention_averages_values_per_window() {
        // Constant q and k make every score equal, so softmax is uniform
        // and each context column is its window's mean value column.
        let d = 3;
        let kc = 8;
        let window = 4;
        let ones = Matrix::from_vec(d, kc, Dtype::F64, vec![1.0; d * kc]).unwrap();
        let v = Seed(4).stream(0).normal_matrix(d, kc, Dtype::F64);
        let ctx = attention_mix(&ones, &ones, &v, window).unwrap();
        for w0 in (0..kc).step_by(window) {
            for r in 0..d {
                let mean: f64 =
                    (0..window).map(|j| v.at(r, w0 + j)).sum::<f64>() / window as f64;
                for i in 0..window {
                    assert!(
                        (ctx.at(r, w0 + i) - mean).abs() < 1e-12,
                        "window {w0} row {r} col {i}"
                    );
                }
            }
        }
        // Window boundaries hold: the two windows have different means.
        assert!((ctx.at(0, 0) - ctx.at(0, 4)).abs() > 1e-6);
    }

    #[test]
    fn attention_rejects_bad_window() {
        let m = Matrix::identity(4);
        match attention_mix(&m, &m, &m, 3) {
            Err(Error::InvalidConfig(_)) => {}
            other => panic!("expected window error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let model = tiny_model(11, 8);
        model.validate().unwrap();
        let x = Seed(3).stream(1).normal_matrix(8, 24, Dtype::F64);
        let a = model.forward(&x, None).unwrap();
        let b = model.forward(&x, None).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert!(a.all_finite());
    }

    #[test]
    fn hook_sees_layers_in_order_with_their_inputs() {
        let model = tiny_model(5, 6);
        let x = Seed(9).stream(1).normal_matrix(6, 10, Dtype::F64);
        let mut seen: Vec<(usize, usize, usize)> = Vec::new();
        model.blocks[0]
            .forward_with(&x, None, |idx, layer, input| {
                assert_eq!(layer.in_dim(), input.rows());
                seen.push((idx, input.rows(), input.cols()));
                Ok(None)
            })
            .unwrap();
        assert_eq!(seen, vec![(0, 6, 10), (1, 12, 10)]);
    }

    #[test]
    fn hook_replacement_changes_the_stream() {
        let model = tiny_model(5, 6);
        let x = Seed(9).stream(1).normal_matrix(6, 10, Dtype::F64);
        let base = model.blocks[0].forward(&x, None).unwrap();
        let zeroed = model.blocks[0]
            .forward_with(&x, None, |idx, layer, _| {
                if idx == 1 {
                    Ok(Some(Matrix::zeros(layer.out_dim(), layer.in_dim(), Dtype::F64)))
                } else {
                    Ok(None)
                }
            })
            .unwrap();
        // fc2 zeroed → block output is just the residual input.
        assert_eq!(zeroed.data(), x.data());
        assert!(base.max_abs_diff(&zeroed).unwrap() > 1e-6);
    }

    #[test]
    fn activation_quantization_reaches_layer_inputs() {
        let model = tiny_model(5, 6);
        let x = Seed(9).stream(1).normal_matrix(6, 10, Dtype::F64);
        let aq = ActQuantConfig {
            bits: 3,
            clip_ratio: 1.0,
            enabled: true,
        };
        let mut plain = Vec::new();
        model.blocks[0]
            .forward_with(&x, None, |_, _, input| {
                plain.push(input.clone());
                Ok(None)
            })
            .unwrap();
        let mut quant = Vec::new();
        model.blocks[0]
            .forward_with(&x, Some(&aq), |_, _, input| {
                quant.push(input.clone());
                Ok(None)
            })
            .unwrap();
        assert!(plain[0].max_abs_diff(&quant[0]).unwrap() > 1e-9);
        let aq_ref = quantize_activations(&plain[0], &aq).unwrap();
        assert_eq!(aq_ref.data(), quant[0].data());
    }

    #[test]
    fn validate_rejects_broken_chains() {
        let mut model = tiny_model(2, 8);
        // Making fc2 expect the wrong input width breaks the chain.
        model.blocks[1].layers[1].w = Matrix::zeros(8, 17, Dtype::F64);
        match model.validate() {
            Err(Error::ShapeMismatch { op: "model_validate", .. }) => {}
            other => panic!("expected chain error, got {other:?}"),
        }
        let mut unbalanced = tiny_model(2, 8);
        unbalanced.blocks[0].stages.push(Stage::SaveResidual);
        match unbalanced.validate() {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("unconsumed")),
            other => panic!("expected stack error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_weights() {
        let dir = tempdir().unwrap();
        let model = tiny_model(21, 8);
        model.save(dir.path()).unwrap();
        let back = ModelGraph::load(dir.path()).unwrap();
        assert_eq!(back.weights_hash(), model.weights_hash());
        assert_eq!(back.kind, model.kind);
        assert_eq!(back.input_dim, 8);
        let x = Seed(1).stream(1).normal_matrix(8, 12, Dtype::F64);
        let a = model.forward(&x, None).unwrap();
        let b = back.forward(&x, None).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }
}
