//! Analytic cost models: parameter counts, theoretical FLOPs, Wino MULs, peak activation
//! memory and implicit-ensemble size.
//!
//! A multiply-add counts as one FLOP. ReLU, batch norm, pooling and branch addition are free.
//! Wino MULs assume every stride-1 3x3 conv runs F(2x2,3x3) and charge only the
//! transform-domain elementwise multiplies.

use std::fmt::Write as _;

use num_bigint::BigUint;

use crate::arch::{LayerPlan, Mode, ModelSpec};
use crate::winograd::wino_mul_count;

/// Geometry of a single convolution as it runs at a given input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer_index: usize,
    pub stage: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub batch: usize,
    pub mode: Mode,
}

impl LayerCost {
    /// Bias-free kernel size.
    pub fn kernel_params(&self) -> u64 {
        (self.kernel * self.kernel * self.c_in / self.groups * self.c_out) as u64
    }

    /// Multiplies of a direct convolution: output elements times `k*k*c_in/groups`.
    pub fn direct_muls(&self) -> u64 {
        (self.batch * self.c_out * self.out_h * self.out_w) as u64
            * (self.kernel * self.kernel * self.c_in / self.groups) as u64
    }

    pub fn wino_muls(&self) -> u64 {
        wino_mul_count(self)
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Every convolution of `spec` at `input_res`, in execution order. Train mode lists the 3x3
/// and 1x1 branch of each block; deploy mode lists one fused 3x3 per block.
pub fn layer_costs(spec: &ModelSpec, input_res: usize, mode: Mode) -> Vec<LayerCost> {
    let mut out = Vec::new();
    let mut res = input_res;
    for l in spec.layer_plan() {
        res = conv_out(res, 3, l.stride, 1);
        let base = LayerCost {
            layer_index: l.index,
            stage: l.stage,
            c_in: l.c_in,
            c_out: l.c_out,
            kernel: 3,
            stride: l.stride,
            groups: l.groups,
            out_h: res,
            out_w: res,
            batch: 1,
            mode,
        };
        out.push(base);
        if mode == Mode::Train {
            out.push(LayerCost { kernel: 1, ..base });
        }
    }
    out
}

fn head_params(spec: &ModelSpec) -> u64 {
    (spec.feature_width() * spec.num_classes() + spec.num_classes()) as u64
}

fn head_flops(spec: &ModelSpec) -> u64 {
    (spec.feature_width() * spec.num_classes()) as u64
}

fn block_params(l: &LayerPlan, mode: Mode) -> u64 {
    let k3 = (9 * l.c_in / l.groups * l.c_out) as u64;
    match mode {
        Mode::Deploy => k3 + l.c_out as u64,
        Mode::Train => {
            let k1 = (l.c_in / l.groups * l.c_out) as u64;
            let bns = if l.has_identity { 3 } else { 2 };
            k3 + k1 + 4 * bns * l.c_out as u64
        }
    }
}

/// Stored scalars. Deploy: fused kernels and biases plus the head. Train: both branch kernels,
/// four vectors (mean, var, gamma, beta) per batch norm, and the head.
pub fn count_params(spec: &ModelSpec, mode: Mode) -> u64 {
    spec.layer_plan().iter().map(|l| block_params(l, mode)).sum::<u64>() + head_params(spec)
}

/// Theoretical FLOPs of the deploy-mode model for one `input_res x input_res` image.
pub fn count_flops(spec: &ModelSpec, input_res: usize) -> u64 {
    count_flops_in(spec, input_res, Mode::Deploy)
}

pub fn count_flops_in(spec: &ModelSpec, input_res: usize, mode: Mode) -> u64 {
    layer_costs(spec, input_res, mode)
        .iter()
        .map(LayerCost::direct_muls)
        .sum::<u64>()
        + head_flops(spec)
}

/// Wino MULs of the deploy-mode model for one image.
pub fn count_wino_muls(spec: &ModelSpec, input_res: usize) -> u64 {
    layer_costs(spec, input_res, Mode::Deploy)
        .iter()
        .map(LayerCost::wino_muls)
        .sum::<u64>()
        + head_flops(spec)
}

/// Peak bytes held while running a block whose input occupies `input` bytes.
///
/// Each branch is a sequence of ops given by the byte size of their outputs; an empty branch
/// is a bare shortcut that reuses the input. The input stays alive until the branch outputs
/// are summed, and every finished branch output stays alive until then too. Elementwise
/// ops (batch norm, ReLU) run in place and are folded into the op that precedes them.
pub fn block_peak_bytes(input: u64, branches: &[Vec<u64>]) -> u64 {
    let mut peak = input;
    let mut finished = 0;
    for branch in branches {
        let mut prev = 0;
        for &out in branch {
            peak = peak.max(input + finished + prev + out);
            prev = out;
        }
        finished += prev;
    }
    peak
}

/// Peak activation bytes beyond the block input.
pub fn block_extra_bytes(input: u64, branches: &[Vec<u64>]) -> u64 {
    block_peak_bytes(input, branches) - input
}

/// Peak activation memory of a whole model for `batch` images of `input_res`, with
/// `scalar_bytes` per element. Parameters are not counted.
pub fn peak_memory_with(spec: &ModelSpec, input_res: usize, mode: Mode, batch: usize, scalar_bytes: usize) -> u64 {
    let elem = (batch * scalar_bytes) as u64;
    let mut in_bytes = (spec.input_channels() * input_res * input_res) as u64 * elem;
    let mut peak = 0;
    for cost in layer_costs(spec, input_res, Mode::Deploy) {
        let out_bytes = (cost.c_out * cost.out_h * cost.out_w) as u64 * elem;
        let branches = match mode {
            Mode::Deploy => vec![vec![out_bytes]],
            Mode::Train => {
                let identity = cost.stride == 1 && cost.c_in == cost.c_out;
                let mut b = vec![vec![out_bytes], vec![out_bytes]];
                if identity {
                    b.push(vec![out_bytes]);
                }
                b
            }
        };
        peak = peak.max(block_peak_bytes(in_bytes, &branches));
        in_bytes = out_bytes;
    }
    peak
}

/// [`peak_memory_with`] for a single fp32 image.
pub fn peak_memory(spec: &ModelSpec, input_res: usize, mode: Mode) -> u64 {
    peak_memory_with(spec, input_res, mode, 1, 4)
}

/// Number of paths through the training-time model: each block contributes a factor of 3 when
/// it has an identity branch and 2 otherwise.
pub fn ensemble_size(spec: &ModelSpec) -> BigUint {
    ensemble_of(spec.layer_plan().iter())
}

/// [`ensemble_size`] restricted to one (1-based) stage.
pub fn stage_ensemble_size(spec: &ModelSpec, stage: usize) -> BigUint {
    ensemble_of(spec.layer_plan().iter().filter(|l| l.stage == stage))
}

fn ensemble_of<'a>(layers: impl Iterator<Item = &'a LayerPlan>) -> BigUint {
    layers.fold(BigUint::from(1u32), |acc, l| {
        acc * BigUint::from(if l.has_identity { 3u32 } else { 2u32 })
    })
}

/// One line of a [`CostReport`]: a block (train or deploy) or the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub stage: usize,
    pub layer_index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: String,
    pub stride: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub flops: u64,
    pub wino_muls: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub mode: Mode,
    pub input_res: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub total_wino_muls: u64,
    pub peak_memory_train: u64,
    pub peak_memory_deploy: u64,
    pub ensemble_size: BigUint,
}

pub const CSV_HEADER: &str =
    "name,stage,layer,c_in,c_out,kernel,stride,groups,out_h,out_w,params,flops,wino_muls";

impl CostReport {
    pub fn new(spec: &ModelSpec, input_res: usize, mode: Mode) -> Self {
        let plan = spec.layer_plan();
        let costs = layer_costs(spec, input_res, mode);
        let per_block = if mode == Mode::Train { 2 } else { 1 };
        let mut rows: Vec<CostRow> = plan
            .iter()
            .zip(costs.chunks(per_block))
            .map(|(l, convs)| CostRow {
                name: format!("stage{}.layer{}", l.stage, l.index),
                stage: l.stage,
                layer_index: l.index,
                c_in: l.c_in,
                c_out: l.c_out,
                kernel: if mode == Mode::Train { "3x3+1x1".into() } else { "3x3".into() },
                stride: l.stride,
                groups: l.groups,
                out_h: convs[0].out_h,
                out_w: convs[0].out_w,
                params: block_params(l, mode),
                flops: convs.iter().map(LayerCost::direct_muls).sum(),
                wino_muls: convs.iter().map(LayerCost::wino_muls).sum(),
            })
            .collect();
        rows.push(CostRow {
            name: "head.fc".into(),
            stage: spec.num_stages() + 1,
            layer_index: plan.len() + 1,
            c_in: spec.feature_width(),
            c_out: spec.num_classes(),
            kernel: "fc".into(),
            stride: 1,
            groups: 1,
            out_h: 1,
            out_w: 1,
            params: head_params(spec),
            flops: head_flops(spec),
            wino_muls: head_flops(spec),
        });
        CostReport {
            model: spec.name().to_string(),
            mode,
            input_res,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            total_wino_muls: rows.iter().map(|r| r.wino_muls).sum(),
            rows,
            peak_memory_train: peak_memory(spec, input_res, Mode::Train),
            peak_memory_deploy: peak_memory(spec, input_res, Mode::Deploy),
            ensemble_size: ensemble_size(spec),
        }
    }

    /// One row per layer, totals row last.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name, r.stage, r.layer_index, r.c_in, r.c_out, r.kernel, r.stride, r.groups,
                r.out_h, r.out_w, r.params, r.flops, r.wino_muls
            );
        }
        let _ = writeln!(
            s,
            "total,,,,,,,,,,{},{},{}",
            self.total_params, self.total_flops, self.total_wino_muls
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>6} {:>6} {:>8} {:>6} {:>6} {:>9} {:>12} {:>14} {:>14}",
            "layer", "stage", "c_in", "c_out", "kernel", "stride", "groups", "out", "params", "flops", "wino_muls"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>5} {:>6} {:>6} {:>8} {:>6} {:>6} {:>9} {:>12} {:>14} {:>14}",
                r.name,
                r.stage,
                r.c_in,
                r.c_out,
                r.kernel,
                r.stride,
                r.groups,
                format!("{}x{}", r.out_h, r.out_w),
                r.params,
                r.flops,
                r.wino_muls
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>6} {:>6} {:>8} {:>6} {:>6} {:>9} {:>12} {:>14} {:>14}",
            "total", "", "", "", "", "", "", "", self.total_params, self.total_flops, self.total_wino_muls
        );
        s
    }

    /// Headline figures in the units of the published tables.
    pub fn summary(&self) -> String {
        format!(
            "model: {}\nmode: {}\ninput: {}x{}\nparams: {:.2} M ({})\ntheoretical FLOPs: {:.2} B ({})\nWino MULs: {:.2} B ({})\npeak activation memory (train): {} bytes\npeak activation memory (deploy): {} bytes\nensemble size: {} ({})\n",
            self.model,
            self.mode,
            self.input_res,
            self.input_res,
            self.total_params as f64 / 1e6,
            self.total_params,
            self.total_flops as f64 / 1e9,
            self.total_flops,
            self.total_wino_muls as f64 / 1e9,
            self.total_wino_muls,
            self.peak_memory_train,
            self.peak_memory_deploy,
            self.ensemble_size,
            scientific(&self.ensemble_size),
        )
    }
}

/// `d.dd x 10^e` rendering of a big integer.
pub fn scientific(n: &BigUint) -> String {
    let digits = n.to_string();
    if digits.len() <= 3 {
        return digits;
    }
    let exp = digits.len() - 1;
    let mantissa: f64 = format!("{}.{}", &digits[..1], &digits[1..4]).parse().unwrap_or(0.0);
    format!("{mantissa:.1}e{exp}")
}
