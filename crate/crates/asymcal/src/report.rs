//! Calibration report types and their JSON/CSV serialization.
//!
//! A report is the machine-readable record of one whole-model
//! calibration run: the configuration that produced it, per-layer losses
//! and timings, and per-block stream-divergence metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::QuantConfig;
use crate::error::{Error, Result};
use crate::quantizer::QuantParams;

/// Outcome summary for one calibrated layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// ‖ŴX − WX‖²: output error against the layer's own input stream.
    pub sym_loss: f64,
    /// ‖ŴX − WX̃‖²: output error against the full-precision stream.
    pub asym_loss: f64,
    pub seconds: f64,
    /// Fitted grid, absent for the 16-bit identity.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<QuantParams>,
}

/// Per-block record of how far the quantized stream has drifted from the
/// full-precision stream by the block's output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub block_index: usize,
    /// Mean |X̃ − X| over every element of the block output.
    pub mae: f64,
    pub layers: Vec<LayerReport>,
    /// Most captured layer inputs alive at once while this block ran.
    pub peak_live_captures: usize,
    /// Their in-memory footprint at that moment (0 when spilled to disk).
    pub peak_live_bytes: usize,
    /// Content hash of the full-precision stream at the block output;
    /// quantization settings must never change this.
    pub fp_output_hash: u64,
}

/// Reduction conventions baked into the metric definitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    /// How `mae` aggregates: mean of |X̃ − X| over all elements, not a
    /// per-token or per-channel mean.
    pub mae_reduction: String,
    /// Grid-group layout: groups tile the processing order, which is the
    /// permuted column order when activation ordering is on.
    pub group_layout: String,
}

impl Default for ReportMeta {
    fn default() -> Self {
        ReportMeta {
            mae_reduction: "mean_abs_over_all_elements".into(),
            group_layout: "groups_tile_processing_order".into(),
        }
    }
}

/// Whole-model calibration record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibReport {
    pub config: QuantConfig,
    pub blocks: Vec<BlockReport>,
    pub total_seconds: f64,
    pub metadata: ReportMeta,
}

impl CalibReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<CalibReport> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("report parse: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// One CSV row per calibrated layer, with the owning block's metrics
    /// repeated for context.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from(
            "block,layer,name,rows,cols,sym_loss,asym_loss,seconds,block_mae\n",
        );
        for b in &self.blocks {
            for (li, l) in b.layers.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.17e},{:.17e},{:.6},{:.17e}",
                    b.block_index, li, l.name, l.rows, l.cols, l.sym_loss, l.asym_loss,
                    l.seconds, b.mae
                );
            }
        }
        out
    }

    /// One CSV row per block.
    pub fn blocks_csv(&self) -> String {
        let mut out = String::from("block,mae,layers,peak_live_captures,peak_live_bytes\n");
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{},{:.17e},{},{},{}",
                b.block_index, b.mae, b.layers.len(), b.peak_live_captures, b.peak_live_bytes
            );
        }
        out
    }

    pub fn write_csv(&self, layers_path: &Path, blocks_path: &Path) -> Result<()> {
        fs::write(layers_path, self.layers_csv())?;
        fs::write(blocks_path, self.blocks_csv())?;
        Ok(())
    }
}
