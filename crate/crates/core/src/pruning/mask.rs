use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ConvRange, Network, Overlay};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    FeatureMap,
    Kernel,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::FeatureMap => "fmap",
            Granularity::Kernel => "kernel",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fmap" | "featuremap" | "map" => Ok(Granularity::FeatureMap),
            "kernel" | "kernels" | "connection" => Ok(Granularity::Kernel),
            _ => Err(format!("unknown granularity {s:?} (expected fmap or kernel)")),
        }
    }
}

/// Pruned units of one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    /// 1-based conv index.
    pub conv: usize,
    /// Requested fraction of this layer's candidates.
    pub ratio: f64,
    /// Candidates available when the mask was drawn.
    pub candidates: usize,
    /// Pruned output maps (feature-map masks), ascending.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maps: Vec<usize>,
    /// Pruned `(in_map, out_map)` connections (kernel masks), ascending by
    /// output then input.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kernels: Vec<(usize, usize)>,
}

impl LayerMask {
    pub fn pruned(&self) -> usize {
        self.maps.len() + self.kernels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningMask {
    pub granularity: Granularity,
    pub layer_range: ConvRange,
    /// The uniform ratio, when one was requested for every layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub layers: Vec<LayerMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Generation index within a best-of-N candidate list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    #[serde(default)]
    pub allow_orphans: bool,
}

impl PruningMask {
    /// Mask that prunes nothing.
    pub fn empty<T: Scalar>(net: &Network<T>, granularity: Granularity, range: ConvRange) -> Result<Self> {
        range.check(net)?;
        let layers = range
            .iter()
            .map(|c| {
                Ok(LayerMask {
                    conv: c,
                    ratio: 0.0,
                    candidates: layer_candidates(net, granularity, c)?,
                    maps: Vec::new(),
                    kernels: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PruningMask {
            granularity,
            layer_range: range,
            ratio: Some(0.0),
            layers,
            seed: None,
            candidate: None,
            allow_orphans: false,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.pruned() == 0)
    }

    pub fn pruned(&self) -> usize {
        self.layers.iter().map(LayerMask::pruned).sum()
    }

    pub fn layer(&self, conv: usize) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.conv == conv)
    }

    /// Checks indices, the layer range and the orphan rule against `net`.
    pub fn validate<T: Scalar>(&self, net: &Network<T>) -> Result<()> {
        self.layer_range.check(net)?;
        for l in &self.layers {
            if !self.layer_range.contains(l.conv) {
                return Err(Error::Mask(format!("Conv{} outside mask range {}", l.conv, self.layer_range)));
            }
            let conv = net.conv(l.conv)?.conv();
            match self.granularity {
                Granularity::FeatureMap => {
                    if !l.kernels.is_empty() {
                        return Err(Error::Mask("feature-map mask lists kernels".into()));
                    }
                    if l.maps.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Mask(format!("Conv{} map list not strictly ascending", l.conv)));
                    }
                    if let Some(&m) = l.maps.iter().find(|&&m| m >= conv.out_maps()) {
                        return Err(Error::Mask(format!("Conv{} has {} maps, mask prunes map {m}", l.conv, conv.out_maps())));
                    }
                }
                Granularity::Kernel => {
                    if !l.maps.is_empty() {
                        return Err(Error::Mask("kernel mask lists feature maps".into()));
                    }
                    let conn = conv.connectivity();
                    let mut remaining: Vec<usize> = (0..conv.out_maps()).map(|o| conn.active_in_row(o)).collect();
                    for w in l.kernels.windows(2) {
                        if (w[0].1, w[0].0) >= (w[1].1, w[1].0) {
                            return Err(Error::Mask(format!("Conv{} kernel list not strictly ascending", l.conv)));
                        }
                    }
                    for &(i, o) in &l.kernels {
                        if o >= conv.out_maps() || i >= conv.in_maps() {
                            return Err(Error::Mask(format!("Conv{} has no connection ({i} -> {o})", l.conv)));
                        }
                        if !conn.get(o, i) {
                            return Err(Error::Mask(format!("Conv{} connection ({i} -> {o}) is already pruned", l.conv)));
                        }
                        remaining[o] -= 1;
                    }
                    if !self.allow_orphans {
                        for l2 in &l.kernels {
                            let o = l2.1;
                            if remaining[o] == 0 && conn.active_in_row(o) > 0 {
                                return Err(Error::Mask(format!(
                                    "Conv{} mask removes every input of map {o} (allow orphans to permit)",
                                    l.conv
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Inference-time view of the mask.
    pub fn to_overlay(&self) -> Overlay {
        let mut ov = Overlay::new();
        for l in &self.layers {
            for &m in &l.maps {
                ov.kill_map(l.conv, m);
            }
            for &(i, o) in &l.kernels {
                ov.cut_connection(l.conv, o, i);
            }
        }
        ov
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// What to prune: granularity, layers and per-layer ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRequest {
    pub granularity: Granularity,
    pub range: ConvRange,
    /// One ratio per layer of `range`.
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub allow_orphans: bool,
}

impl MaskRequest {
    pub fn uniform(granularity: Granularity, ratio: f64, range: ConvRange) -> Self {
        MaskRequest {
            granularity,
            range,
            ratios: vec![ratio; range.len()],
            allow_orphans: false,
        }
    }

    pub fn per_layer(granularity: Granularity, ratios: Vec<f64>, range: ConvRange) -> Result<Self> {
        if ratios.len() != range.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ratios for the {} layers of {range}",
                ratios.len(),
                range.len()
            )));
        }
        Ok(MaskRequest {
            granularity,
            range,
            ratios,
            allow_orphans: false,
        })
    }

    pub fn allow_orphans(mut self, allow: bool) -> Self {
        self.allow_orphans = allow;
        self
    }

    pub fn uniform_ratio(&self) -> Option<f64> {
        let first = *self.ratios.first()?;
        self.ratios.iter().all(|&r| r == first).then_some(first)
    }

    pub fn validate<T: Scalar>(&self, net: &Network<T>) -> Result<()> {
        self.range.check(net)?;
        if self.ratios.len() != self.range.len() {
            return Err(Error::InvalidArgument("one ratio per layer of the range is required".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!("pruning ratio {r} outside [0, 1]")));
        }
        Ok(())
    }

    /// Units to prune per layer of the range.
    pub fn counts<T: Scalar>(&self, net: &Network<T>) -> Result<Vec<usize>> {
        self.validate(net)?;
        self.range
            .iter()
            .zip(&self.ratios)
            .map(|(c, &r)| Ok(round_half_up(r * layer_candidates(net, self.granularity, c)? as f64)))
            .collect()
    }
}

/// `floor(x + 1/2)`, tolerant of products like `0.15 * 10 = 1.4999...`.
pub fn round_half_up(x: f64) -> usize {
    let f = x.floor();
    if x - f >= 0.5 - 1e-9 {
        f as usize + 1
    } else {
        f as usize
    }
}

/// Candidates of one conv layer: output maps, or active connections.
pub fn layer_candidates<T: Scalar>(net: &Network<T>, granularity: Granularity, conv: usize) -> Result<usize> {
    let c = net.conv(conv)?.conv();
    Ok(match granularity {
        Granularity::FeatureMap => c.out_maps(),
        Granularity::Kernel => c.active_connections(),
    })
}

/// Total number `M` of pruning candidates over `range`.
pub fn enumerate_candidates<T: Scalar>(net: &Network<T>, granularity: Granularity, range: ConvRange) -> Result<u64> {
    range.check(net)?;
    range
        .iter()
        .map(|c| layer_candidates(net, granularity, c).map(|n| n as u64))
        .sum()
}

/// Draws one random mask: per layer, a uniform subset of the required size.
///
/// Kernel masks walk a random permutation of the active connections and
/// skip any connection that would leave its output map without inputs,
/// unless orphans are allowed. Without that constraint the first `count`
/// entries of a uniform permutation are a uniform subset.
pub fn sample_mask<T: Scalar, R: Rng>(net: &Network<T>, request: &MaskRequest, rng: &mut R) -> Result<PruningMask> {
    let counts = request.counts(net)?;
    sample_counts(net, request, &counts, rng)
}

/// As [`sample_mask`] with explicit per-layer counts.
pub fn sample_counts<T: Scalar, R: Rng>(
    net: &Network<T>,
    request: &MaskRequest,
    counts: &[usize],
    rng: &mut R,
) -> Result<PruningMask> {
    request.validate(net)?;
    let mut layers = Vec::with_capacity(counts.len());
    for ((c, &ratio), &count) in request.range.iter().zip(&request.ratios).zip(counts) {
        let conv = net.conv(c)?.conv();
        let candidates = layer_candidates(net, request.granularity, c)?;
        if count > candidates {
            return Err(Error::Mask(format!("Conv{c}: cannot prune {count} of {candidates} candidates")));
        }
        let mut lm = LayerMask {
            conv: c,
            ratio,
            candidates,
            maps: Vec::new(),
            kernels: Vec::new(),
        };
        match request.granularity {
            Granularity::FeatureMap => {
                let mut maps: Vec<usize> = rand::seq::index::sample(rng, candidates, count).into_vec();
                maps.sort_unstable();
                lm.maps = maps;
            }
            Granularity::Kernel => {
                let conn = conv.connectivity();
                let mut active: Vec<(usize, usize)> = (0..conv.out_maps())
                    .flat_map(|o| conn.inputs_of(o).map(move |i| (i, o)))
                    .collect();
                if !request.allow_orphans {
                    let protected = (0..conv.out_maps()).filter(|&o| conn.active_in_row(o) > 0).count();
                    if count > candidates - protected {
                        return Err(Error::Mask(format!(
                            "Conv{c}: pruning {count} of {candidates} connections must orphan a map (allow orphans to permit)"
                        )));
                    }
                }
                active.shuffle(rng);
                let mut left: Vec<usize> = (0..conv.out_maps()).map(|o| conn.active_in_row(o)).collect();
                let mut picked = Vec::with_capacity(count);
                for (i, o) in active {
                    if picked.len() == count {
                        break;
                    }
                    if !request.allow_orphans && left[o] == 1 {
                        continue;
                    }
                    left[o] -= 1;
                    picked.push((i, o));
                }
                picked.sort_unstable_by_key(|&(i, o)| (o, i));
                lm.kernels = picked;
            }
        }
        layers.push(lm);
    }
    Ok(PruningMask {
        granularity: request.granularity,
        layer_range: request.range,
        ratio: request.uniform_ratio(),
        layers,
        seed: None,
        candidate: None,
        allow_orphans: request.allow_orphans,
    })
}
