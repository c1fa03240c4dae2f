//! The `mxfpq` command line. Every command reads and writes `.fpqt` tensor
//! files and emits JSON-lines records carrying the resolved configuration,
//! metrics and wall time.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fpcodec::FpFormat;
use crate::galt::{
    fuse_lambda_weight, optimize_galt, synth_calibration, AdamWConfig, CalibrationSet,
    GaltProblem, OutlierSpec, DEFAULT_EPOCHS, DEFAULT_SCHEDULE,
};
use crate::hadamard::{apply_ght, ght_flops, HadamardConfig, DEFAULT_GROUP_SIZE};
use crate::hwemu::{
    dfq_lut_quantize, emu_check, emu_gemm, lut_quantize, AddressMode, LutTables,
};
use crate::quant::{
    afpq_quantize, dfq_quantize, dfq_search_format, quant_mse, quantize, rtn_int_quantize,
    Codebook, Granularity, QuantizedTensor,
};
use crate::synth;
use crate::tensorio::{self, read_tensor, write_tensor, Tensor};
use config::{default, required, resolve, Common, CommandConfig};

#[derive(Parser, Debug)]
#[command(name = "mxfpq", version, about = "Micro floating-point quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scaled FP (or INT) quantization of one tensor
    Quantize(QuantizeArgs),
    /// Dual-format quantization of one activation tensor
    Dfq(DfqArgs),
    /// Exhaustive FP4 format-pair search over calibration tensors
    Search(SearchArgs),
    /// Group-wise Hadamard rotation, optionally dividing columns by a smoothing vector first
    Rotate(RotateArgs),
    /// Learn a per-channel smoothing vector for one linear layer
    Galt(GaltArgs),
    /// Exhaustive multiplier and quantizer-parity checks of the LUT datapath
    EmuCheck(EmuCheckArgs),
    /// Quantized matrix product on the LUT datapath
    EmuGemm(EmuGemmArgs),
    /// Summarize report files and tensor files
    Report(ReportArgs),
    /// Write seeded synthetic tensors
    Synth(SynthArgs),
}

macro_rules! common_impl {
    ($t:ty, |$s:ident| $finish:block) => {
        impl CommandConfig for $t {
            fn common(&self) -> &Common {
                &self.common
            }
            fn common_mut(&mut self) -> &mut Common {
                &mut self.common
            }
            fn finish(&mut self) -> Result<()> {
                let $s = self;
                default(&mut $s.common.seed, 0);
                $finish
                Ok(())
            }
        }
    };
}

/// Granularity flags shared by the quantizing commands.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct GranularityArgs {
    /// per_tensor, per_channel, per_token or per_group [default: per_group]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<String>,
    /// Elements per scale group [default: 128]
    #[arg(long, visible_alias = "group")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    /// Allow a shorter final group [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad: Option<bool>,
}

impl GranularityArgs {
    fn finish(&mut self) {
        default(&mut self.granularity, "per_group".into());
        default(&mut self.group_size, DEFAULT_GROUP_SIZE);
        default(&mut self.pad, false);
    }

    fn get(&self) -> Result<Granularity> {
        Granularity::parse(
            self.granularity.as_deref().unwrap_or("per_group"),
            self.group_size.unwrap_or(DEFAULT_GROUP_SIZE),
            self.pad.unwrap_or(false),
        )
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct QuantizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub gran: GranularityArgs,
    /// Input tensor (f32 or f64, 2-D)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// FP format name (E2M1, E4M3, ...) or INT4/INT6/INT8 [default: E2M1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Output code tensor
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_codes: Option<PathBuf>,
    /// Output scale tensor
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_scales: Option<PathBuf>,
    /// Output dequantized tensor
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dequant: Option<PathBuf>,
}

common_impl!(QuantizeArgs, |s| {
    s.gran.finish();
    default(&mut s.format, "E2M1".into());
    required(&s.input, "input")?;
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct DfqArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub gran: GranularityArgs,
    /// Input activation tensor
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Format for elements <= 0 [default: E1M2]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_format: Option<String>,
    /// Format for elements > 0 [default: E2M1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_format: Option<String>,
    /// Output combined code plane (sign bit selects the grid)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_codes: Option<PathBuf>,
    /// Output negative-branch scales
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_neg_scales: Option<PathBuf>,
    /// Output positive-branch scales
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_pos_scales: Option<PathBuf>,
    /// Output dequantized tensor
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dequant: Option<PathBuf>,
}

common_impl!(DfqArgs, |s| {
    s.gran.finish();
    default(&mut s.neg_format, "E1M2".into());
    default(&mut s.pos_format, "E2M1".into());
    required(&s.input, "input")?;
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct SearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub gran: GranularityArgs,
    /// Calibration tensors, comma separated or repeated
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib: Option<Vec<PathBuf>>,
    /// Output 3 x 3 MSE table (rows: negative format, columns: positive)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_mse: Option<PathBuf>,
}

common_impl!(SearchArgs, |s| {
    s.gran.finish();
    if required(&s.calib, "calib")?.is_empty() {
        return Err(Error::config("`calib` needs at least one tensor"));
    }
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct RotateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Input tensor, channels along columns
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Hadamard block size [default: 128]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    /// Smoothing vector to divide the columns by before rotating (weight side)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<PathBuf>,
    /// Output rotated tensor
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

common_impl!(RotateArgs, |s| {
    default(&mut s.group_size, DEFAULT_GROUP_SIZE);
    required(&s.input, "input")?;
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct GaltArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub gran: GranularityArgs,
    /// Per-step activation tensors in step order, each [samples * tokens, C]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib: Option<Vec<PathBuf>>,
    /// Weight tensor [O, C]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<PathBuf>,
    /// Tokens per step [default: 1,4,9,16,25,36,64,100,169,256]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    /// Quantizer format inside the loss, or "none" [default: E2M1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Hadamard block size [default: group_size]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hadamard_group: Option<usize>,
    /// Training epochs [default: 50]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// AdamW learning rate [default: 0.01]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Layer name used in loss records [default: layer0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    /// Output smoothing vector [C]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Output fused weight W diag(1/lambda) H_B
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_weight: Option<PathBuf>,
}

common_impl!(GaltArgs, |s| {
    s.gran.finish();
    default(&mut s.tokens, DEFAULT_SCHEDULE.to_vec());
    default(&mut s.format, "E2M1".into());
    let g = s.gran.group_size.unwrap_or(DEFAULT_GROUP_SIZE);
    default(&mut s.hadamard_group, g);
    default(&mut s.epochs, DEFAULT_EPOCHS);
    default(&mut s.lr, AdamWConfig::default().lr);
    default(&mut s.layer, "layer0".into());
    required(&s.calib, "calib")?;
    required(&s.weight, "weight")?;
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct EmuCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Random inputs for the quantizer-parity suite [default: 1000000]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// guarded or rounded [default: guarded]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address_mode: Option<String>,
    /// Output multiplier tables as code8 [2, 16, 16] (E2M1 x E2M1, E1M2 x E2M1)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

common_impl!(EmuCheckArgs, |s| {
    default(&mut s.samples, 1_000_000);
    default(&mut s.address_mode, "guarded".into());
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct EmuGemmArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub gran: GranularityArgs,
    /// Activation tensor [T, C]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act: Option<PathBuf>,
    /// Weight tensor [O, C]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<PathBuf>,
    /// Quantize activations with DFQ (E1M2 / E2M1) [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dfq: Option<bool>,
    /// guarded or rounded [default: guarded]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address_mode: Option<String>,
    /// Output [T, O]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

common_impl!(EmuGemmArgs, |s| {
    s.gran.finish();
    default(&mut s.dfq, false);
    default(&mut s.address_mode, "guarded".into());
    required(&s.act, "act")?;
    required(&s.weight, "weight")?;
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// JSON-lines report files or .fpqt tensor files
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<PathBuf>>,
}

common_impl!(ReportArgs, |s| {
    required(&s.inputs, "inputs")?;
});

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// gaussian, weights, gelu or galt
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Rows [default: 64]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    /// Columns [default: 256]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    /// Standard deviation for `gaussian` [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Per-row sigma range for `weights` [default: 0.01]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    /// Output tensor (gaussian, weights, gelu)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Output directory for `galt`: step_00.fpqt ... and weight.fpqt
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// galt: tokens per step [default: 1,4,9,16,25,36,64,100,169,256]
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    /// galt: samples per step [default: 2]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// galt: weight output rows [default: 128]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outputs: Option<usize>,
    /// galt: outlier channel pool [default: 32]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_pool: Option<usize>,
    /// galt: outlier channels per step [default: 4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_per_step: Option<usize>,
    /// galt: smallest outlier shift [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_min: Option<f64>,
    /// galt: largest outlier shift [default: 50]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_max: Option<f64>,
}

common_impl!(SynthArgs, |s| {
    let kind = required(&s.kind, "kind")?;
    default(&mut s.rows, 64);
    default(&mut s.cols, 256);
    match kind.as_str() {
        "gaussian" => {
            default(&mut s.sigma, 1.0);
            required(&s.out, "out")?;
        }
        "weights" => {
            default(&mut s.sigma_min, 0.01);
            default(&mut s.sigma_max, 0.1);
            required(&s.out, "out")?;
        }
        "gelu" => {
            required(&s.out, "out")?;
        }
        "galt" => {
            let o = OutlierSpec::default();
            default(&mut s.tokens, DEFAULT_SCHEDULE.to_vec());
            default(&mut s.samples, 2);
            default(&mut s.outputs, 128);
            default(&mut s.outlier_pool, o.pool);
            default(&mut s.outlier_per_step, o.per_step);
            default(&mut s.outlier_min, o.magnitude.0);
            default(&mut s.outlier_max, o.magnitude.1);
            required(&s.out_dir, "out_dir")?;
        }
        other => {
            return Err(Error::config(format!(
                "unknown synth kind {other:?}; expected gaussian, weights, gelu or galt"
            )))
        }
    }
});

/// Output of one command: its record fields and the files it wrote.
struct Outcome {
    metrics: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    extra_records: Vec<Value>,
    success: bool,
}

impl Outcome {
    fn new(metrics: Value) -> Self {
        Outcome {
            metrics,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra_records: Vec::new(),
            success: true,
        }
    }
}

struct Writer {
    outputs: Vec<PathBuf>,
}

impl Writer {
    fn new() -> Self {
        Writer { outputs: Vec::new() }
    }

    fn put(&mut self, path: &Option<PathBuf>, t: impl FnOnce() -> Tensor) -> Result<()> {
        if let Some(p) = path {
            write_tensor(p, &t())?;
            self.outputs.push(p.clone());
        }
        Ok(())
    }
}

fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    read_tensor(path)
        .and_then(|t| t.to_matrix())
        .map_err(|e| annotate(e, path))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn codes_tensor(q: &QuantizedTensor) -> Tensor {
    match q.codebook {
        Codebook::Fp { format } => Tensor::from_codes(q.codes.clone(), format.width()),
        Codebook::Int { .. } => Tensor::Code8(q.codes.clone().into_dyn()),
    }
}

fn parse_int_format(name: &str) -> Option<u8> {
    let upper = name.to_ascii_uppercase();
    upper.strip_prefix("INT").and_then(|b| b.parse().ok())
}

fn address_mode(name: &str) -> Result<AddressMode> {
    match name {
        "guarded" => Ok(AddressMode::Guarded),
        "rounded" => Ok(AddressMode::Rounded),
        other => Err(Error::config(format!(
            "unknown address mode {other:?}; expected guarded or rounded"
        ))),
    }
}

fn absmax(x: &Array2<f64>) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn rel_err(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let num = (got - want).iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn cmd_quantize(a: &QuantizeArgs) -> Result<Outcome> {
    let input = a.input.as_ref().unwrap();
    let x = load_matrix(input)?;
    let g = a.gran.get()?;
    let name = a.format.as_deref().unwrap();
    let q = match parse_int_format(name) {
        Some(bits) => rtn_int_quantize(x.view(), bits, g)?,
        None => quantize(x.view(), FpFormat::from_name(name)?, g)?,
    };
    let deq = q.dequantize();
    let mse = quant_mse(x.view(), deq.view())?;
    let mut w = Writer::new();
    w.put(&a.out_codes, || codes_tensor(&q))?;
    w.put(&a.out_scales, || Tensor::from_f64(q.scales.clone()))?;
    w.put(&a.out_dequant, || Tensor::from_f64(deq.clone()))?;
    let mut o = Outcome::new(json!({
        "shape": x.shape(),
        "codebook": q.codebook.name(),
        "granularity": g.to_string(),
        "scales": q.scales.len(),
        "absmax": absmax(&x),
        "mse": mse,
    }));
    o.inputs = vec![input.clone()];
    o.outputs = w.outputs;
    Ok(o)
}

fn cmd_dfq(a: &DfqArgs) -> Result<Outcome> {
    let input = a.input.clone().unwrap();
    let x = load_matrix(&input)?;
    let g = a.gran.get()?;
    let neg = FpFormat::from_name(a.neg_format.as_deref().unwrap())?;
    let pos = FpFormat::from_name(a.pos_format.as_deref().unwrap())?;
    let d = dfq_quantize(x.view(), neg, pos, g)?;
    let deq = d.dequantize();
    let mse = quant_mse(x.view(), deq.view())?;
    let afpq = afpq_quantize(x.view(), pos, g)?.dequantize();
    let mse_afpq = quant_mse(x.view(), afpq.view())?;
    let sym = quantize(x.view(), pos, g)?.dequantize();
    let mse_sym = quant_mse(x.view(), sym.view())?;
    let negatives = x.iter().filter(|v| **v <= 0.0).count();
    let mut w = Writer::new();
    w.put(&a.out_codes, || {
        Tensor::from_codes(d.combined_codes(), neg.width().max(pos.width()))
    })?;
    w.put(&a.out_neg_scales, || Tensor::from_f64(d.s_neg.clone()))?;
    w.put(&a.out_pos_scales, || Tensor::from_f64(d.s_pos.clone()))?;
    w.put(&a.out_dequant, || Tensor::from_f64(deq.clone()))?;
    let mut o = Outcome::new(json!({
        "shape": x.shape(),
        "neg_format": neg,
        "pos_format": pos,
        "granularity": g.to_string(),
        "negative_fraction": negatives as f64 / x.len() as f64,
        "mse": mse,
        "mse_afpq": mse_afpq,
        "mse_symmetric": mse_sym,
        "afpq_over_dfq": mse_afpq / mse,
    }));
    o.inputs = vec![input];
    o.outputs = w.outputs;
    Ok(o)
}

fn cmd_search(a: &SearchArgs) -> Result<Outcome> {
    let calib = a
        .calib
        .as_ref()
        .unwrap()
        .iter()
        .map(|p| load_matrix(p))
        .collect::<Result<Vec<_>>>()?;
    let g = a.gran.get()?;
    let s = dfq_search_format(&calib, g)?;
    let names: Vec<String> = FpFormat::FP4_CANDIDATES.iter().map(|f| f.name()).collect();
    let table = Array2::from_shape_fn((3, 3), |(i, j)| s.mse[i][j]);
    let mut w = Writer::new();
    w.put(&a.out_mse, || Tensor::from_f64(table.clone()))?;
    let mut o = Outcome::new(json!({
        "tensors": calib.len(),
        "granularity": g.to_string(),
        "neg_format": s.neg_format,
        "pos_format": s.pos_format,
        "best_mse": s.best_mse(),
        "candidates": names,
        "mse": s.mse,
    }));
    o.inputs = a.calib.clone().unwrap();
    o.outputs = w.outputs;
    Ok(o)
}

fn cmd_rotate(a: &RotateArgs) -> Result<Outcome> {
    let x = load_matrix(a.input.as_ref().unwrap())?;
    let h = HadamardConfig::new(x.ncols(), a.group_size.unwrap())?;
    let y = match &a.lambda {
        Some(p) => {
            let l = load_matrix(p)?;
            if l.nrows() != 1 {
                return Err(Error::input(format!(
                    "{}: smoothing vector must be 1-D, got {:?}",
                    p.display(),
                    l.shape()
                )));
            }
            fuse_lambda_weight(x.view(), l.row(0), &h)?
        }
        None => apply_ght(x.view(), &h)?,
    };
    let flops = ght_flops(x.ncols(), h.group_size)?;
    let mut w = Writer::new();
    w.put(&a.out, || Tensor::from_f64(y.clone()))?;
    let mut o = Outcome::new(json!({
        "shape": x.shape(),
        "absmax_before": absmax(&x),
        "absmax_after": absmax(&y),
        "flops": flops,
    }));
    o.inputs = a.input.iter().chain(&a.lambda).cloned().collect();
    o.outputs = w.outputs;
    Ok(o)
}

fn cmd_galt(a: &GaltArgs) -> Result<Outcome> {
    let steps = a
        .calib
        .as_ref()
        .unwrap()
        .iter()
        .map(|p| load_matrix(p))
        .collect::<Result<Vec<_>>>()?;
    let weight = load_matrix(a.weight.as_ref().unwrap())?;
    let tokens = a.tokens.clone().unwrap();
    let calib = CalibrationSet::from_steps(steps, tokens)?;
    let quant = match a.format.as_deref().unwrap() {
        "none" => None,
        name => Some(FpFormat::from_name(name)?),
    };
    let h = HadamardConfig::new(calib.dim(), a.hadamard_group.unwrap())?;
    let mut p = GaltProblem::new(calib, weight, h, quant, a.gran.get()?)?;
    let cfg = AdamWConfig {
        lr: a.lr.unwrap(),
        ..AdamWConfig::default()
    };
    let ones = Array1::ones(p.dim());
    let out = optimize_galt(&mut p, a.epochs.unwrap(), cfg)?;
    let base = p.total_loss(ones.view())?;
    let fin = p.total_loss(out.lambda.view())?;
    let layer = a.layer.clone().unwrap();
    let mut w = Writer::new();
    w.put(&a.out, || Tensor::F64(out.lambda.clone().into_dyn()))?;
    if a.out_weight.is_some() {
        let fused = fuse_lambda_weight(p.weight(), out.lambda.view(), &h)?;
        w.put(&a.out_weight, || Tensor::from_f64(fused))?;
    }
    let mut o = Outcome::new(json!({
        "layer": layer,
        "steps": p.steps(),
        "samples": p.calibration().samples(),
        "dim": p.dim(),
        "initial_loss": out.initial_loss,
        "best_loss": out.best_loss,
        "best_epoch": out.best_epoch,
        "total_loss_ones": base,
        "total_loss_best": fin,
        "reduction": if fin > 0.0 { base / fin } else { f64::INFINITY },
        "lambda_min": out.lambda.iter().copied().fold(f64::INFINITY, f64::min),
        "lambda_max": out.lambda.iter().copied().fold(0.0, f64::max),
    }));
    o.inputs = a.calib.clone().unwrap();
    o.inputs.extend(a.weight.clone());
    o.extra_records = out
        .history
        .iter()
        .map(|r| json!({"command": "galt", "layer": layer, "epoch": r.epoch, "loss": r.loss}))
        .collect();
    o.outputs = w.outputs;
    Ok(o)
}

fn cmd_emu_check(a: &EmuCheckArgs) -> Result<Outcome> {
    let luts = LutTables::new(address_mode(a.address_mode.as_deref().unwrap())?);
    let r = emu_check(&luts, a.samples.unwrap(), a.common.seed.unwrap())?;
    let mut w = Writer::new();
    w.put(&a.out, || {
        let mut t = Array3::zeros((2, 16, 16));
        for (k, m) in [&luts.mul, &luts.dfq_mul].into_iter().enumerate() {
            for (i, &c) in m.mul.iter().enumerate() {
                t[[k, i >> 4, i & 15]] = c;
            }
        }
        Tensor::Code8(t.into_dyn())
    })?;
    let parity_ok = r.parity_mismatches == 0
        && r.dfq_parity_mismatches == 0
        && r.quant_lut_mismatches == 0
        && r.dfq_lut_mismatches == 0;
    let mut o = Outcome::new(json!({
        "mul_lut_exact": format!("{}/{}", r.mul_pairs_checked - r.mul_mismatches, r.mul_pairs_checked),
        "dfq_mul_exact": format!("{}/{}", r.dfq_mul_pairs_checked - r.dfq_mul_mismatches, r.dfq_mul_pairs_checked),
        "quantizer_parity": if parity_ok { "pass" } else { "fail" },
        "mul_product_format": luts.mul.product_format,
        "dfq_mul_product_format": luts.dfq_mul.product_format,
        "detail": r,
    }));
    o.outputs = w.outputs;
    o.success = r.passed;
    Ok(o)
}

fn cmd_emu_gemm(a: &EmuGemmArgs) -> Result<Outcome> {
    let x = load_matrix(a.act.as_ref().unwrap())?;
    let wt = load_matrix(a.weight.as_ref().unwrap())?;
    let g = a.gran.get()?;
    let luts = LutTables::new(address_mode(a.address_mode.as_deref().unwrap())?);
    let wq = lut_quantize(wt.view(), g, &luts)?;
    let (y, oracle) = if a.dfq.unwrap() {
        let d = dfq_lut_quantize(x.view(), g, &luts)?;
        (emu_gemm(&d, &wq, &luts)?, d.dequantize().dot(&wq.dequantize().t()))
    } else {
        let q = lut_quantize(x.view(), g, &luts)?;
        (emu_gemm(&q, &wq, &luts)?, q.dequantize().dot(&wq.dequantize().t()))
    };
    let exact = x.dot(&wt.t());
    let mut w = Writer::new();
    w.put(&a.out, || Tensor::from_f64(y.clone()))?;
    let mut o = Outcome::new(json!({
        "shape": y.shape(),
        "rel_err_vs_dequant": rel_err(&y, &oracle),
        "rel_err_vs_full_precision": rel_err(&y, &exact),
    }));
    o.inputs = a.act.iter().chain(&a.weight).cloned().collect();
    o.outputs = w.outputs;
    Ok(o)
}

fn tensor_summary(path: &Path, t: &Tensor) -> Value {
    let vals: Vec<f64> = match t {
        Tensor::F32(a) => a.iter().map(|&v| f64::from(v)).collect(),
        Tensor::F64(a) => a.iter().copied().collect(),
        Tensor::Code4(a) | Tensor::Code8(a) => a.iter().map(|&v| f64::from(v)).collect(),
    };
    let n = vals.len().max(1) as f64;
    json!({
        "path": path,
        "kind": "tensor",
        "dtype": t.dtype(),
        "shape": t.shape(),
        "min": vals.iter().copied().fold(f64::INFINITY, f64::min),
        "max": vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "mean": vals.iter().sum::<f64>() / n,
        "rms": (vals.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
    })
}

fn report_summary(path: &Path, text: &str) -> Result<Value> {
    let mut commands: BTreeMap<String, usize> = BTreeMap::new();
    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut wall = 0.0;
    let mut records = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| {
            Error::input(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        records += 1;
        let cmd = v["command"].as_str().unwrap_or("?").to_owned();
        if let (Some(layer), Some(epoch), Some(loss)) =
            (v["layer"].as_str(), v["epoch"].as_u64(), v["loss"].as_f64())
        {
            let e = best.entry(layer.to_owned()).or_insert((epoch as usize, loss));
            if loss < e.1 {
                *e = (epoch as usize, loss);
            }
            continue;
        }
        *commands.entry(cmd).or_default() += 1;
        wall += v["wall_time_s"].as_f64().unwrap_or(0.0);
    }
    Ok(json!({
        "path": path,
        "kind": "report",
        "records": records,
        "commands": commands,
        "wall_time_s": wall,
        "galt_best_epoch": best
            .into_iter()
            .map(|(k, (e, l))| (k, json!({"epoch": e, "loss": l})))
            .collect::<BTreeMap<_, _>>(),
    }))
}

fn cmd_report(a: &ReportArgs) -> Result<Outcome> {
    let mut items = Vec::new();
    for p in a.inputs.as_ref().unwrap() {
        let bytes = fs::read(p).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
        })?;
        if bytes.starts_with(&tensorio::MAGIC) {
            let t = tensorio::decode(&bytes).map_err(|e| annotate(e, p))?;
            items.push(tensor_summary(p, &t));
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::input(format!("{}: neither a tensor nor UTF-8 text", p.display())))?;
            items.push(report_summary(p, &text)?);
        }
    }
    let mut o = Outcome::new(json!({ "inputs": items }));
    o.inputs = a.inputs.clone().unwrap();
    Ok(o)
}

fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    let seed = a.common.seed.unwrap();
    let (rows, cols) = (a.rows.unwrap(), a.cols.unwrap());
    let mut w = Writer::new();
    let metrics = match a.kind.as_deref().unwrap() {
        "gaussian" => {
            let x = synth::gaussian(rows, cols, a.sigma.unwrap(), seed);
            w.put(&a.out, || Tensor::from_f64(x))?;
            json!({"shape": [rows, cols]})
        }
        "weights" => {
            let x = synth::gaussian_weights(rows, cols, (a.sigma_min.unwrap(), a.sigma_max.unwrap()), seed);
            w.put(&a.out, || Tensor::from_f64(x))?;
            json!({"shape": [rows, cols]})
        }
        "gelu" => {
            let x = synth::gelu_activations(rows, cols, seed);
            let pos = x.iter().filter(|v| **v > 0.0).count() as f64 / x.len().max(1) as f64;
            w.put(&a.out, || Tensor::from_f64(x))?;
            json!({"shape": [rows, cols], "positive_fraction": pos})
        }
        _ => {
            let spec = OutlierSpec {
                pool: a.outlier_pool.unwrap(),
                per_step: a.outlier_per_step.unwrap(),
                magnitude: (a.outlier_min.unwrap(), a.outlier_max.unwrap()),
            };
            let tokens = a.tokens.clone().unwrap();
            let s = synth_calibration(seed, &tokens, a.samples.unwrap(), cols, &spec)?;
            let dir = a.out_dir.clone().unwrap();
            fs::create_dir_all(&dir)?;
            for (i, x) in s.calib.steps().iter().enumerate() {
                w.put(&Some(dir.join(format!("step_{i:02}.fpqt"))), || {
                    Tensor::from_f64(x.clone())
                })?;
            }
            let weight = synth::gaussian(
                a.outputs.unwrap(),
                cols,
                1.0 / (cols as f64).sqrt(),
                seed.wrapping_add(1),
            );
            w.put(&Some(dir.join("weight.fpqt")), || Tensor::from_f64(weight))?;
            json!({
                "steps": tokens.len(),
                "dim": cols,
                "samples": s.calib.samples(),
                "outlier_channels": s.outlier_channels,
            })
        }
    };
    let mut o = Outcome::new(metrics);
    o.outputs = w.outputs;
    Ok(o)
}

fn emit(report: Option<&Path>, records: &[Value]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("JSON values serialize"));
        text.push('\n');
    }
    match report {
        Some(p) => {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            f.write_all(text.as_bytes())?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn run_one<T: CommandConfig>(
    name: &str,
    args: T,
    body: fn(&T) -> Result<Outcome>,
) -> Result<bool> {
    let start = Instant::now();
    let args = resolve(args)?;
    if let Some(n) = args.common().threads {
        // fails only if a pool already exists, which keeps the first setting
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = body(&args)?;
    let mut records = outcome.extra_records;
    records.push(json!({
        "command": name,
        "config": args,
        "inputs": outcome.inputs,
        "metrics": outcome.metrics,
        "outputs": outcome.outputs,
        "passed": outcome.success,
        "wall_time_s": start.elapsed().as_secs_f64(),
    }));
    emit(args.common().report.as_deref(), &records)?;
    Ok(outcome.success)
}

/// Process exit code for an error kind.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Input(_) => 3,
        Error::Precision { .. } => 4,
        Error::Format { .. } => 5,
        Error::Overflow { .. } => 6,
        Error::Io(_) => 7,
    }
}

/// Runs a parsed command. `Ok(false)` means a check command ran and failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Quantize(a) => run_one("quantize", a, cmd_quantize),
        Command::Dfq(a) => run_one("dfq", a, cmd_dfq),
        Command::Search(a) => run_one("search", a, cmd_search),
        Command::Rotate(a) => run_one("rotate", a, cmd_rotate),
        Command::Galt(a) => run_one("galt", a, cmd_galt),
        Command::EmuCheck(a) => run_one("emu-check", a, cmd_emu_check),
        Command::EmuGemm(a) => run_one("emu-gemm", a, cmd_emu_gemm),
        Command::Report(a) => run_one("report", a, cmd_report),
        Command::Synth(a) => run_one("synth", a, cmd_synth),
    }
}

/// Entry point of the binary: errors go to stderr as one JSON object.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let rec = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{rec}");
            exit_code(&e)
        }
    }
}
