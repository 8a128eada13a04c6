use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask::{round_half_up, sample_mask, Granularity, LayerMask, MaskRequest, PruningMask};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::argmax;
use crate::network::{ConvRange, Evaluation, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// MCR of `net` with `mask` applied as a temporary overlay.
pub fn evaluate_mask<T: Scalar>(net: &Network<T>, mask: &PruningMask, val: &Dataset<T>) -> Result<Evaluation> {
    mask.validate(net)?;
    let prepared = mask.to_overlay().prepare(net)?;
    net.evaluate_with(val, Some(&prepared))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    /// Number of random masks `N`.
    pub candidates: usize,
    pub seed: u64,
    /// Evaluation threads; `None` uses the global pool. Results do not
    /// depend on this.
    pub workers: Option<usize>,
    /// Redraw masks identical to an earlier candidate.
    pub dedup: bool,
    /// Evaluate the unpruned layers in front of the range once, not per mask
    /// (skipped when the cached activations would exceed this many values).
    pub prefix_cache_limit: usize,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            candidates: 100,
            seed: 0,
            workers: None,
            dedup: false,
            prefix_cache_limit: 64 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub mask: PruningMask,
    pub evaluation: Evaluation,
    /// Generation index of the winner.
    pub index: usize,
    /// Validation MCR of every candidate, in generation order.
    pub all_mcrs: Vec<f64>,
}

impl Selection {
    pub fn mcr(&self) -> f64 {
        self.evaluation.mcr
    }
}

/// Draws the candidate list: sequential and seeded, so it does not depend on
/// how the evaluation is scheduled.
pub fn generate_candidates<T: Scalar>(net: &Network<T>, request: &MaskRequest, opts: &SelectOptions) -> Result<Vec<PruningMask>> {
    if opts.candidates == 0 {
        return Err(Error::InvalidArgument("best-of-N needs N >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut masks = Vec::with_capacity(opts.candidates);
    let mut seen = HashSet::new();
    let mut attempts = 0usize;
    while masks.len() < opts.candidates {
        let mut m = sample_mask(net, request, &mut rng)?;
        attempts += 1;
        if opts.dedup && !seen.insert(format!("{:?}", m.layers)) {
            // the mask space may be smaller than N
            if attempts >= 1000 * opts.candidates {
                break;
            }
            continue;
        }
        m.seed = Some(opts.seed);
        m.candidate = Some(masks.len());
        masks.push(m);
    }
    Ok(masks)
}

/// Validation batches, advanced through the layers in front of `start`.
struct PreparedSet<T> {
    start: usize,
    batches: Vec<(Tensor<T>, Vec<usize>)>,
}

const SELECT_CHUNK: usize = 250;

fn prepare_set<T: Scalar>(net: &Network<T>, val: &Dataset<T>, first_conv: usize, limit: usize) -> Result<PreparedSet<T>> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    let pos = net.conv_position(first_conv)?;
    let cached_len = if pos == 0 {
        0
    } else {
        val.len() * net.spec().shapes()[pos - 1].iter().product::<usize>()
    };
    let start = if pos > 0 && cached_len <= limit { pos } else { 0 };
    let all: Vec<usize> = (0..val.len()).collect();
    let batches = all
        .chunks(SELECT_CHUNK)
        .map(|chunk| {
            let (x, labels) = val.gather(chunk);
            let x = if start > 0 {
                net.forward_segment(&x, 0..start, None, None)?
            } else {
                x
            };
            Ok((x, labels))
        })
        .collect::<Result<_>>()?;
    Ok(PreparedSet { start, batches })
}

fn count_errors<T: Scalar>(net: &Network<T>, set: &PreparedSet<T>, mask: &PruningMask) -> Result<usize> {
    let prepared = mask.to_overlay().prepare(net)?;
    let mut errors = 0;
    for (x, labels) in &set.batches {
        let logits = net.forward_segment(x, set.start..net.layers().len(), Some(&prepared), None)?;
        errors += (0..logits.outer())
            .filter(|&s| argmax(logits.outer_slice(s)) != labels[s])
            .count();
    }
    Ok(errors)
}

/// Evaluates every candidate and keeps the one with the fewest validation
/// errors; ties go to the lowest generation index.
pub fn select_from<T: Scalar>(
    net: &Network<T>,
    val: &Dataset<T>,
    masks: Vec<PruningMask>,
    opts: &SelectOptions,
) -> Result<Selection> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no candidate masks".into()))?;
    for m in &masks {
        m.validate(net)?;
    }
    let set = prepare_set(net, val, first.layer_range.first, opts.prefix_cache_limit)?;
    let run = || -> Result<Vec<usize>> { masks.par_iter().map(|m| count_errors(net, &set, m)).collect() };
    let errors = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let (best_errors, index) = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, i))
        .min()
        .expect("non-empty");
    let n = val.len();
    let all_mcrs = errors.iter().map(|&e| Evaluation::from_counts(n, e).mcr).collect();
    Ok(Selection {
        mask: masks.into_iter().nth(index).expect("index in range"),
        evaluation: Evaluation::from_counts(n, best_errors),
        index,
        all_mcrs,
    })
}

/// Best of `N` random masks by validation MCR.
pub fn select_best_of_n<T: Scalar>(
    net: &Network<T>,
    val: &Dataset<T>,
    request: &MaskRequest,
    opts: &SelectOptions,
) -> Result<Selection> {
    let masks = generate_candidates(net, request, opts)?;
    select_from(net, val, masks, opts)
}

/// `S_j = sum |w|` over the incoming kernels of every output map of `conv`.
pub fn weight_sums<T: Scalar>(net: &Network<T>, conv: usize) -> Result<Vec<f64>> {
    let c = net.conv(conv)?.conv();
    Ok((0..c.out_maps())
        .map(|o| (0..c.in_maps()).flat_map(|i| c.kernel(o, i)).map(|v| v.as_f64().abs()).sum())
        .collect())
}

/// Feature-map mask pruning the maps with the smallest absolute weight sums
/// (ties to the lower index).
pub fn weight_sum_select<T: Scalar>(net: &Network<T>, ratio: f64, range: ConvRange) -> Result<PruningMask> {
    weight_sum_select_with(net, &MaskRequest::uniform(Granularity::FeatureMap, ratio, range))
}

pub fn weight_sum_select_with<T: Scalar>(net: &Network<T>, request: &MaskRequest) -> Result<PruningMask> {
    if request.granularity != Granularity::FeatureMap {
        return Err(Error::InvalidArgument("weight-sum selection prunes feature maps".into()));
    }
    request.validate(net)?;
    let mut layers = Vec::new();
    for (c, &ratio) in request.range.iter().zip(&request.ratios) {
        let sums = weight_sums(net, c)?;
        let count = round_half_up(ratio * sums.len() as f64);
        let mut order: Vec<usize> = (0..sums.len()).collect();
        order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)));
        let mut maps = order[..count].to_vec();
        maps.sort_unstable();
        layers.push(LayerMask {
            conv: c,
            ratio,
            candidates: sums.len(),
            maps,
            kernels: Vec::new(),
        });
    }
    Ok(PruningMask {
        granularity: Granularity::FeatureMap,
        layer_range: request.range,
        ratio: request.uniform_ratio(),
        layers,
        seed: None,
        candidate: None,
        allow_orphans: false,
    })
}
