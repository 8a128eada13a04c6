use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ConvRange, Network};
use crate::scalar::Scalar;

/// Before/after accounting of one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub conv: usize,
    pub kernel_size: usize,
    pub in_maps_before: usize,
    pub out_maps_before: usize,
    pub in_maps_after: usize,
    pub out_maps_after: usize,
    /// `100 (1 - out_after / out_before)`.
    pub fmap_pruned_pct: f64,
    /// Share of the original connection grid removed by thinning,
    /// `100 (1 - kernel_conn / (out_before * in_before))`.
    pub grid_pruned_pct: f64,
    /// Connection grid of the thinned layer, `out_after * in_after`.
    pub kernel_conn: usize,
    pub active_before: usize,
    pub active_after: usize,
    /// Connections of the thinned grid that are flagged off.
    pub pruned_kernels: usize,
    /// `100 pruned_kernels / kernel_conn`.
    pub kernel_prune_pct: f64,
    pub weights_before: u64,
    pub weights_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layer_range: ConvRange,
    pub architecture_before: String,
    pub architecture_after: String,
    pub layers: Vec<LayerReport>,
    pub weights_before: u64,
    pub weights_after: u64,
    /// Pruned conv kernel weights over original conv kernel weights, percent.
    pub weight_prune_pct: f64,
    pub connections_before: u64,
    pub connections_after: u64,
    pub connection_prune_pct: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub mac_reduction_pct: f64,
}

fn pct(part: f64, whole: f64) -> f64 {
    if whole == 0.0 {
        0.0
    } else {
        100.0 * part / whole
    }
}

/// Truncates a percentage to one decimal, absorbing representation error
/// (`26.6` must not print as `26.5`).
pub fn truncate_tenth(p: f64) -> f64 {
    ((p * 10.0) + 1e-9).floor() / 10.0
}

/// Compares an original network with its pruned descendant.
pub fn pruning_report<T: Scalar>(before: &Network<T>, after: &Network<T>, range: ConvRange) -> Result<PruneReport> {
    range.check(before)?;
    range.check(after)?;
    let incomparable = |why: String| Err(Error::Mask(format!("networks are not comparable: {why}")));
    if before.conv_count() != after.conv_count() {
        return incomparable(format!("{} vs {} conv layers", before.conv_count(), after.conv_count()));
    }
    if before.spec().input_shape() != after.spec().input_shape() {
        return incomparable("different input shapes".into());
    }
    let mut layers = Vec::new();
    for c in range.iter() {
        let (b, a) = (before.conv(c)?.conv(), after.conv(c)?.conv());
        if b.kernel_size() != a.kernel_size() {
            return incomparable(format!("Conv{c} kernel sizes differ"));
        }
        if a.out_maps() > b.out_maps() || a.in_maps() > b.in_maps() {
            return incomparable(format!("Conv{c} grew"));
        }
        if before.conv_output_hw(c)? != after.conv_output_hw(c)? {
            return incomparable(format!("Conv{c} output extents differ"));
        }
        let kk = (b.kernel_size() * b.kernel_size()) as u64;
        let kernel_conn = a.out_maps() * a.in_maps();
        let pruned_kernels = kernel_conn - a.active_connections();
        layers.push(LayerReport {
            conv: c,
            kernel_size: b.kernel_size(),
            in_maps_before: b.in_maps(),
            out_maps_before: b.out_maps(),
            in_maps_after: a.in_maps(),
            out_maps_after: a.out_maps(),
            fmap_pruned_pct: pct((b.out_maps() - a.out_maps()) as f64, b.out_maps() as f64),
            grid_pruned_pct: pct(
                (b.out_maps() * b.in_maps() - a.out_maps() * a.in_maps()) as f64,
                (b.out_maps() * b.in_maps()) as f64,
            ),
            kernel_conn,
            active_before: b.active_connections(),
            active_after: a.active_connections(),
            pruned_kernels,
            kernel_prune_pct: pct(pruned_kernels as f64, kernel_conn as f64),
            weights_before: b.active_connections() as u64 * kk,
            weights_after: a.active_connections() as u64 * kk,
            macs_before: before.conv_macs(c)?,
            macs_after: after.conv_macs(c)?,
        });
    }
    let sum = |f: fn(&LayerReport) -> u64| layers.iter().map(f).sum::<u64>();
    let (wb, wa) = (sum(|l| l.weights_before), sum(|l| l.weights_after));
    let (cb, ca) = (sum(|l| l.active_before as u64), sum(|l| l.active_after as u64));
    let (mb, ma) = (sum(|l| l.macs_before), sum(|l| l.macs_after));
    Ok(PruneReport {
        layer_range: range,
        architecture_before: before.spec().render(),
        architecture_after: after.spec().render(),
        weights_before: wb,
        weights_after: wa,
        weight_prune_pct: pct(wb.saturating_sub(wa) as f64, wb as f64),
        connections_before: cb,
        connections_after: ca,
        connection_prune_pct: pct(cb.saturating_sub(ca) as f64, cb as f64),
        macs_before: mb,
        macs_after: ma,
        mac_reduction_pct: pct(mb.saturating_sub(ma) as f64, mb as f64),
        layers,
    })
}

impl PruneReport {
    pub fn is_identity(&self) -> bool {
        self.weights_before == self.weights_after
            && self.layers.iter().all(|l| l.out_maps_before == l.out_maps_after && l.pruned_kernels == 0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table. The fmap column is the connection-grid reduction, rounded;
    /// kernel ratios are truncated to 0.1.
    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "Layer".to_string(),
            "Fmap Pruned To (%)".into(),
            "Pruned Kernels".into(),
            "Kernel Conn".into(),
            "Kernel Prune Ratio (%)".into(),
            "Weights".into(),
            "MACs".into(),
        ]];
        for l in &self.layers {
            rows.push([
                format!("C{} ({}x{})", l.conv, l.out_maps_before, l.out_maps_after),
                format!("{:.1}", l.grid_pruned_pct),
                l.pruned_kernels.to_string(),
                l.kernel_conn.to_string(),
                format!("{:.1}", truncate_tenth(l.kernel_prune_pct)),
                format!("{} -> {}", l.weights_before, l.weights_after),
                format!("{} -> {}", l.macs_before, l.macs_after),
            ]);
        }
        let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (ri, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if ri == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "conv kernel weights {} -> {} ({:.2}% pruned); connections {:.2}% pruned; MACs {:.2}% fewer",
            self.weights_before, self.weights_after, self.weight_prune_pct, self.connection_prune_pct, self.mac_reduction_pct
        );
        let _ = writeln!(out, "{} -> {}", self.architecture_before, self.architecture_after);
        out
    }
}
