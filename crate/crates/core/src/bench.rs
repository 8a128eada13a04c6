//! Cost accounting and wall-clock comparison of dense and
//! connectivity-masked convolution.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv_forward_with, Connectivity, ConvLayer, MacCounter};
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub conv: usize,
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel_size: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub active_kernels: usize,
    /// Size of the connectivity bitmap; independent of sparsity.
    pub flag_bits: usize,
    /// Per-sample MACs of the active connections.
    pub macs: u64,
    pub dense_macs: u64,
    /// Stored kernel weights (active only) at the network precision.
    pub weight_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub architecture: String,
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_flag_bits: usize,
    pub total_weight_bytes: u64,
}

pub fn cost_model<T: Scalar>(net: &Network<T>) -> Result<CostModel> {
    let mut layers = Vec::new();
    for c in 1..=net.conv_count() {
        let conv = net.conv(c)?.conv();
        let (h, w) = net.conv_output_hw(c)?;
        let k = conv.kernel_size();
        let per_conn = (h * w * k * k) as u64;
        layers.push(LayerCost {
            conv: c,
            in_maps: conv.in_maps(),
            out_maps: conv.out_maps(),
            kernel_size: k,
            out_h: h,
            out_w: w,
            active_kernels: conv.active_connections(),
            flag_bits: conv.connectivity().flag_bits(),
            macs: net.conv_macs(c)?,
            dense_macs: per_conn * (conv.in_maps() * conv.out_maps()) as u64,
            weight_bytes: (conv.active_connections() * k * k * std::mem::size_of::<T>()) as u64,
        });
    }
    Ok(CostModel {
        architecture: net.spec().render(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        total_flag_bits: layers.iter().map(|l| l.flag_bits).sum(),
        total_weight_bytes: layers.iter().map(|l| l.weight_bytes).sum(),
        layers,
    })
}

impl CostModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<6} {:>10} {:>8} {:>10} {:>10} {:>14} {:>14} {:>12}\n",
            "layer", "maps", "k", "active", "flags", "MACs", "dense MACs", "weight B"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<6} {:>10} {:>8} {:>10} {:>10} {:>14} {:>14} {:>12}",
                format!("C{}", l.conv),
                format!("{}x{}", l.in_maps, l.out_maps),
                l.kernel_size,
                l.active_kernels,
                l.flag_bits,
                l.macs,
                l.dense_macs,
                l.weight_bytes
            );
        }
        let _ = writeln!(
            out,
            "total: {} MACs/sample, {} flag bits, {} weight bytes",
            self.total_macs, self.total_flag_bits, self.total_weight_bytes
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBench {
    pub layer: String,
    /// Fraction of connections flagged off.
    pub sparsity: f64,
    pub mac_dense: u64,
    pub mac_masked: u64,
    pub dense_ms: f64,
    pub masked_ms: f64,
    pub dense_min_ms: f64,
    pub masked_min_ms: f64,
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: &str = "layer,sparsity,mac_dense,mac_masked,dense_ms,masked_ms";

impl ConvBench {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{},{},{:.4},{:.4}",
            self.layer, self.sparsity, self.mac_dense, self.mac_masked, self.dense_ms, self.masked_ms
        )
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_runs<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    conn: &Connectivity,
    reps: usize,
    warmup: usize,
) -> Result<(Vec<f64>, u64)> {
    for _ in 0..warmup {
        std::hint::black_box(conv_forward_with(input, layer, conn, None)?);
    }
    let counter = MacCounter::new();
    conv_forward_with(input, layer, conn, Some(&counter))?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(conv_forward_with(input, layer, conn, None)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((times, counter.get()))
}

/// Times `layer` with all connections enabled and with its own
/// connectivity. MAC counts are exact; the timings are informational.
pub fn bench_conv<T: Scalar>(name: &str, layer: &ConvLayer<T>, input: &Tensor<T>, reps: usize, warmup: usize) -> Result<ConvBench> {
    if reps < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 timed repetitions, got {reps}")));
    }
    let dense = Connectivity::dense(layer.out_maps(), layer.in_maps());
    let (mut dt, mac_dense) = time_runs(input, layer, &dense, reps, warmup)?;
    let (mut mt, mac_masked) = time_runs(input, layer, layer.connectivity(), reps, warmup)?;
    let dense_min_ms = dt.iter().cloned().fold(f64::INFINITY, f64::min);
    let masked_min_ms = mt.iter().cloned().fold(f64::INFINITY, f64::min);
    let (dense_ms, masked_ms) = (median(&mut dt), median(&mut mt));
    let flags = layer.connectivity().flag_bits() as f64;
    Ok(ConvBench {
        layer: name.to_string(),
        sparsity: 1.0 - layer.active_connections() as f64 / flags,
        mac_dense,
        mac_masked,
        dense_ms,
        masked_ms,
        dense_min_ms,
        masked_min_ms,
        speedup: if masked_ms > 0.0 { dense_ms / masked_ms } else { f64::INFINITY },
    })
}

/// Benchmarks every conv layer of `net` on `input`, feeding each layer the
/// activation of the previous ones.
pub fn bench_network<T: Scalar>(net: &Network<T>, input: &Tensor<T>, reps: usize, warmup: usize) -> Result<Vec<ConvBench>> {
    let mut rows = Vec::new();
    let positions = net.conv_positions();
    let mut act = input.clone();
    let mut at = 0;
    for (ci, &pos) in positions.iter().enumerate() {
        act = net.forward_segment(&act, at..pos, None, None)?;
        at = pos;
        let conv = net.conv(ci + 1)?.conv();
        rows.push(bench_conv(&format!("C{}", ci + 1), conv, &act, reps, warmup)?);
    }
    Ok(rows)
}
