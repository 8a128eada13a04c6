use serde::{Deserialize, Serialize};

use super::apply::apply_mask;
use super::mask::{layer_candidates, round_half_up, Granularity, MaskRequest, PruningMask};
use super::report::{pruning_report, PruneReport};
use super::select::{evaluate_mask, select_best_of_n, weight_sum_select_with, SelectOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ConvRange, Network};
use crate::scalar::Scalar;
use crate::trainer::{retrain, ExperimentLog, LogRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    BestOfN,
    WeightSum,
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bestofn" | "random" | "best" => Ok(Criterion::BestOfN),
            "weightsum" | "l1" => Ok(Criterion::WeightSum),
            _ => Err(format!("unknown criterion {s:?} (expected best-of-n or weightsum)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Defaults to every conv layer but the first.
    pub range: Option<ConvRange>,
    pub criterion: Criterion,
    pub select: SelectOptions,
    pub allow_orphans: bool,
    /// Retraining after each pruning step; `epochs = 0` skips it.
    pub retrain: TrainConfig,
    /// 1 prunes in one shot; more splits the ratio into equal steps, each
    /// followed by retraining.
    pub steps: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            range: None,
            criterion: Criterion::BestOfN,
            select: SelectOptions::default(),
            allow_orphans: false,
            retrain: TrainConfig::default(),
            steps: 1,
        }
    }
}

impl PruneConfig {
    pub fn range_for<T: Scalar>(&self, net: &Network<T>) -> Result<ConvRange> {
        let r = match self.range {
            Some(r) => r,
            None => ConvRange::default_for(net)?,
        };
        r.check(net)?;
        Ok(r)
    }
}

/// Result of one prune(-retrain) stage.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub net: Network<T>,
    /// One mask per step, each relative to the network it was applied to.
    pub masks: Vec<PruningMask>,
    /// Validation MCR right after each pruning step, before retraining.
    pub pruned_mcrs: Vec<f64>,
    pub log: ExperimentLog,
}

/// Picks a mask by the configured criterion.
pub fn choose_mask<T: Scalar>(
    net: &Network<T>,
    val: &Dataset<T>,
    request: &MaskRequest,
    cfg: &PruneConfig,
) -> Result<(PruningMask, f64)> {
    match cfg.criterion {
        Criterion::BestOfN => {
            let s = select_best_of_n(net, val, request, &cfg.select)?;
            Ok((s.mask, s.evaluation.mcr))
        }
        Criterion::WeightSum => {
            let m = weight_sum_select_with(net, request)?;
            let mcr = evaluate_mask(net, &m, val)?.mcr;
            Ok((m, mcr))
        }
    }
}

/// Prunes `net` to the requested per-layer ratios (relative to `net`),
/// retraining after every step.
pub fn prune_stage<T: Scalar>(
    net: &Network<T>,
    request: &MaskRequest,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &PruneConfig,
    stage: &str,
) -> Result<StageOutcome<T>> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("pruning needs at least one step".into()));
    }
    request.validate(net)?;
    let original: Vec<usize> = request
        .range
        .iter()
        .map(|c| layer_candidates(net, request.granularity, c))
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = original
        .iter()
        .zip(&request.ratios)
        .map(|(&n, &r)| round_half_up(r * n as f64))
        .collect();
    let mut out = StageOutcome {
        net: net.clone(),
        masks: Vec::new(),
        pruned_mcrs: Vec::new(),
        log: ExperimentLog::new(),
    };
    if targets.iter().all(|&t| t == 0) {
        return Ok(out);
    }
    for step in 1..=cfg.steps {
        // cumulative per-layer target after this step, converted to a ratio
        // of what is still there
        let mut ratios = Vec::with_capacity(targets.len());
        for ((c, &orig), &target) in request.range.iter().zip(&original).zip(&targets) {
            let goal = round_half_up(target as f64 * step as f64 / cfg.steps as f64);
            let now = layer_candidates(&out.net, request.granularity, c)?;
            let done = orig - now;
            ratios.push(if now == 0 { 0.0 } else { goal.saturating_sub(done) as f64 / now as f64 });
        }
        let mut step_req = MaskRequest::per_layer(request.granularity, ratios, request.range)?.allow_orphans(request.allow_orphans);
        if cfg.steps == 1 {
            step_req.ratios.clone_from(&request.ratios);
        }
        let (mask, mcr) = choose_mask(&out.net, val_set, &step_req, cfg)?;
        let stage_name = if cfg.steps == 1 { stage.to_string() } else { format!("{stage}.{step}") };
        out.log.push(LogRecord::Prune {
            stage: stage_name.clone(),
            granularity: request.granularity.to_string(),
            // per-layer requests log their mean ratio
            ratio: request
                .uniform_ratio()
                .unwrap_or_else(|| request.ratios.iter().sum::<f64>() / request.ratios.len().max(1) as f64),
            candidates: match cfg.criterion {
                Criterion::BestOfN => cfg.select.candidates,
                Criterion::WeightSum => 1,
            },
            selected_mcr: mcr,
            mask_seed: cfg.select.seed,
        });
        ::log::info!("{stage_name}: pruned {} {} units, validation MCR {mcr:.2}%", mask.pruned(), request.granularity);
        out.net = apply_mask(&out.net, &mask)?;
        out.masks.push(mask);
        out.pruned_mcrs.push(mcr);
        if cfg.retrain.epochs > 0 {
            let (n, log) = retrain(&out.net, train_set, val_set, &TrainConfig {
                seed: cfg.retrain.seed.wrapping_add(step as u64),
                ..cfg.retrain.clone()
            })?;
            out.net = n;
            out.log.extend(rename_stage(log, &format!("{stage_name}.retrain")));
        }
    }
    Ok(out)
}

fn rename_stage(log: ExperimentLog, name: &str) -> ExperimentLog {
    let records = log
        .records
        .into_iter()
        .map(|mut r| {
            match &mut r {
                LogRecord::Config { stage, .. }
                | LogRecord::Epoch { stage, .. }
                | LogRecord::Prune { stage, .. }
                | LogRecord::Best { stage, .. }
                | LogRecord::Eval { stage, .. } => *stage = name.to_string(),
            }
            r
        })
        .collect();
    ExperimentLog { records }
}

/// Feature-map pruning, retraining, then kernel pruning of the thinner
/// network and retraining again. Zero ratios skip their stage.
pub fn combined_prune<T: Scalar>(
    net: &Network<T>,
    fmap_ratio: f64,
    kernel_ratio: f64,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &PruneConfig,
) -> Result<(Network<T>, PruneReport, ExperimentLog)> {
    let range = cfg.range_for(net)?;
    combined_prune_with(
        net,
        &MaskRequest::uniform(Granularity::FeatureMap, fmap_ratio, range),
        &MaskRequest::uniform(Granularity::Kernel, kernel_ratio, range).allow_orphans(cfg.allow_orphans),
        train_set,
        val_set,
        cfg,
    )
}

/// As [`combined_prune`] with explicit (possibly per-layer) requests.
pub fn combined_prune_with<T: Scalar>(
    net: &Network<T>,
    fmap: &MaskRequest,
    kernel: &MaskRequest,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &PruneConfig,
) -> Result<(Network<T>, PruneReport, ExperimentLog)> {
    if fmap.granularity != Granularity::FeatureMap || kernel.granularity != Granularity::Kernel {
        return Err(Error::InvalidArgument("combined pruning takes a feature-map then a kernel request".into()));
    }
    let first = prune_stage(net, fmap, train_set, val_set, cfg, "fmap")?;
    let kernel_cfg = PruneConfig {
        criterion: Criterion::BestOfN,
        ..cfg.clone()
    };
    let second = prune_stage(&first.net, kernel, train_set, val_set, &kernel_cfg, "kernel")?;
    let mut log = first.log;
    log.extend(second.log);
    let report = pruning_report(net, &second.net, fmap.range)?;
    Ok((second.net, report, log))
}
