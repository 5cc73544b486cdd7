//! Whole-model calibration: a block-at-a-time walk over two activation
//! streams.
//!
//! The full-precision stream X̃ runs the original weights with activation
//! quantization disabled; the quantized stream X runs through the layers
//! as they are quantized, optionally with live activation quantization.
//! Each block is processed in isolation: the FP pass captures every
//! layer's input, the quantized pass consumes those captures one layer at
//! a time, and both streams advance before the next block starts — so at
//! most one block's captures are ever resident.

use std::path::PathBuf;
use std::time::Instant;

use crate::engine::{calibrate_layer, AqOrder, QuantConfig};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::model::{block_mae, ModelGraph};
use crate::quantizer::ActQuantConfig;
use crate::report::{BlockReport, CalibReport, LayerReport, ReportMeta};
use crate::tensor::Matrix;

/// Knobs that affect how calibration runs, not what it computes.
#[derive(Debug, Clone, Default)]
pub struct PipelineOpts {
    /// Park captured layer inputs in tensor containers under this
    /// directory instead of holding them in memory, reloading each one
    /// when its layer calibrates. Simulates the constrained-memory setup
    /// where a block's activations are offloaded between passes.
    pub spill_dir: Option<PathBuf>,
}

enum Capture {
    Mem(Matrix),
    Disk(PathBuf),
}

/// Holds one block's captured full-precision layer inputs and counts
/// them, so the one-block residency bound is a measured quantity rather
/// than a hope.
struct CaptureStore {
    spill_dir: Option<PathBuf>,
    entries: Vec<Option<Capture>>,
    live: usize,
    live_bytes: usize,
    peak: usize,
    peak_bytes: usize,
    seq: usize,
}

impl CaptureStore {
    fn new(spill_dir: Option<PathBuf>) -> CaptureStore {
        CaptureStore {
            spill_dir,
            entries: Vec::new(),
            live: 0,
            live_bytes: 0,
            peak: 0,
            peak_bytes: 0,
            seq: 0,
        }
    }

    /// Starts a new block's capture set and resets the per-block peaks.
    /// Refuses to proceed while captures from the previous block are
    /// still alive — that would break the residency contract.
    fn begin_block(&mut self, layers: usize) -> Result<()> {
        if self.live != 0 {
            return Err(Error::DegenerateInput(format!(
                "{} capture(s) from the previous block still live",
                self.live
            )));
        }
        self.entries.clear();
        self.entries.resize_with(layers, || None);
        self.peak = 0;
        self.peak_bytes = 0;
        Ok(())
    }

    fn put(&mut self, idx: usize, m: Matrix) -> Result<()> {
        if self.entries[idx].is_some() {
            return Err(Error::InvalidConfig(format!(
                "layer {idx} captured twice; shared weights are unsupported"
            )));
        }
        let bytes = m.rows() * m.cols() * 8;
        let cap = match &self.spill_dir {
            Some(dir) => {
                let path = dir.join(format!("capture_{}.gtaq", self.seq));
                self.seq += 1;
                write_tensor(&path, &m)?;
                Capture::Disk(path)
            }
            None => {
                self.live_bytes += bytes;
                Capture::Mem(m)
            }
        };
        self.entries[idx] = Some(cap);
        self.live += 1;
        self.peak = self.peak.max(self.live);
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        Ok(())
    }

    fn take(&mut self, idx: usize) -> Result<Matrix> {
        let cap = self.entries[idx].take().ok_or_else(|| {
            Error::InvalidConfig(format!("no capture for layer {idx}"))
        })?;
        self.live -= 1;
        match cap {
            Capture::Mem(m) => {
                self.live_bytes -= m.rows() * m.cols() * 8;
                Ok(m)
            }
            Capture::Disk(path) => {
                let m = read_tensor(&path)?;
                std::fs::remove_file(&path)?;
                Ok(m)
            }
        }
    }
}

/// Quantizes every layer of the model against the calibration batch and
/// reports per-layer losses and per-block stream divergence. Returns the
/// quantized model alongside the report.
pub fn calibrate_model(
    model: &ModelGraph,
    calib: &Matrix,
    cfg: &QuantConfig,
) -> Result<(ModelGraph, CalibReport)> {
    calibrate_model_with(model, calib, cfg, &PipelineOpts::default())
}

pub fn calibrate_model_with(
    model: &ModelGraph,
    calib: &Matrix,
    cfg: &QuantConfig,
    opts: &PipelineOpts,
) -> Result<(ModelGraph, CalibReport)> {
    cfg.validate()?;
    model.validate()?;
    if calib.rows() != model.input_dim {
        return Err(Error::ShapeMismatch {
            op: "calibrate_model",
            left: (calib.rows(), calib.cols()),
            right: (model.input_dim, calib.cols()),
        });
    }
    if calib.cols() < model.input_dim {
        return Err(Error::DegenerateInput(format!(
            "calibration batch has {} columns but the model is {} wide; \
             need at least as many samples as channels",
            calib.cols(),
            model.input_dim
        )));
    }

    let t0 = Instant::now();
    let aq_live = cfg.act_cfg.enabled && cfg.aq_order == AqOrder::ActivationsThenWeights;
    let aq = if aq_live { Some(&cfg.act_cfg) } else { None };

    let mut q_model = model.clone();
    let mut store = CaptureStore::new(opts.spill_dir.clone());
    let mut x_tilde = calib.clone();
    let mut x = calib.clone();
    let mut block_reports = Vec::with_capacity(model.blocks.len());

    for (bi, block) in model.blocks.iter().enumerate() {
        store.begin_block(block.layers.len())?;

        // Full-precision pass: original weights, activation quantization
        // off, every layer input captured.
        let next_tilde = block
            .forward_with(&x_tilde, None, |idx, _, input| {
                store.put(idx, input.clone())?;
                Ok(None)
            })
            .map_err(|e| e.annotate(format!("block {bi}, full-precision pass")))?;

        // Quantized pass: calibrate each layer against its capture; the
        // returned grid weights replace the layer for the rest of the
        // walk, so later layers see the quantized stream.
        let mut layer_reports = Vec::with_capacity(block.layers.len());
        let mut quantized: Vec<Option<Matrix>> = vec![None; block.layers.len()];
        let next_x = block.forward_with(&x, aq, |idx, layer, input| {
            let captured = store.take(idx)?;
            let res = calibrate_layer(&layer.w, input, &captured, cfg).map_err(|e| {
                e.annotate(format!("block {bi}, layer {idx} ({})", layer.name))
            })?;
            layer_reports.push(LayerReport {
                name: layer.name.clone(),
                rows: res.q.rows(),
                cols: res.q.cols(),
                sym_loss: res.sym_loss,
                asym_loss: res.asym_loss,
                seconds: res.elapsed.as_secs_f64(),
                params: res.params.clone(),
            });
            quantized[idx] = Some(res.q.clone());
            Ok(Some(res.q))
        })?;

        for (idx, q) in quantized.into_iter().enumerate() {
            match q {
                Some(w) => q_model.blocks[bi].set_weights(idx, w)?,
                None => {
                    return Err(Error::DegenerateInput(format!(
                        "block {bi}, layer {idx} was never reached by the forward walk"
                    )))
                }
            }
        }

        block_reports.push(BlockReport {
            block_index: bi,
            mae: block_mae(&next_tilde, &next_x)?,
            layers: layer_reports,
            peak_live_captures: store.peak,
            peak_live_bytes: store.peak_bytes,
            fp_output_hash: next_tilde.content_hash(),
        });
        x_tilde = next_tilde;
        x = next_x;
    }

    let report = CalibReport {
        config: cfg.clone(),
        blocks: block_reports,
        total_seconds: t0.elapsed().as_secs_f64(),
        metadata: ReportMeta::default(),
    };
    Ok((q_model, report))
}

/// Per-block output divergence between a reference model (activation
/// quantization always off) and a candidate model forwarded with the
/// given activation settings. This is the post-calibration evaluation:
/// for weights-then-activations runs it is where activation quantization
/// finally applies.
pub fn eval_blockwise(
    reference: &ModelGraph,
    candidate: &ModelGraph,
    data: &Matrix,
    aq: Option<&ActQuantConfig>,
) -> Result<Vec<f64>> {
    if reference.blocks.len() != candidate.blocks.len() {
        return Err(Error::InvalidConfig(format!(
            "block count mismatch: {} vs {}",
            reference.blocks.len(),
            candidate.blocks.len()
        )));
    }
    let mut xt = data.clone();
    let mut x = data.clone();
    let mut maes = Vec::with_capacity(reference.blocks.len());
    for (bi, (rb, cb)) in reference.blocks.iter().zip(&candidate.blocks).enumerate() {
        xt = rb
            .forward(&xt, None)
            .map_err(|e| e.annotate(format!("block {bi}, reference pass")))?;
        x = cb
            .forward(&x, aq)
            .map_err(|e| e.annotate(format!("block {bi}, candidate pass")))?;
        maes.push(block_mae(&xt, &x)?);
    }
    Ok(maes)
}
