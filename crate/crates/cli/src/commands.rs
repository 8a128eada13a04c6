use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;
use structprune::arch::NetworkSpec;
use structprune::bench::{bench_network, cost_model, BENCH_CSV_HEADER};
use structprune::network::{load, load_any, save, AnyNetwork, ConvRange, Network};
use structprune::pruning::{
    apply_mask, choose_mask, combined_prune_with, evaluate_mask, prune_stage, pruning_report, select_best_of_n,
    weight_sum_select_with, Granularity, MaskRequest, PruneConfig, PruningMask, SelectOptions,
};
use structprune::trainer::{retrain as retrain_net, train as train_net, ExperimentLog, LogRecord};
use structprune::{Error, Precision, Result, Scalar, Tensor};

use crate::config::ExperimentConfig;
use crate::datasets::{self, Splits};

const SWEEP_RATIO_HEADER: &str = "granularity,ratio,pre_retrain_mcr,post_retrain_mcr,test_mcr";
const SWEEP_N_HEADER: &str = "ratio,n,seed,best_mcr";
const COMPARE_HEADER: &str = "ratio,seed,best_of_n_mcr,weight_sum_mcr";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.write(&dir)?;
    Ok(dir)
}

/// Runs `$body` with `$net` bound to the concrete network of a checkpoint.
macro_rules! with_net {
    ($any:expr, $net:ident => $body:expr) => {
        match $any {
            AnyNetwork::F32($net) => $body,
            AnyNetwork::F64($net) => $body,
        }
    };
}

fn build_net<T: Scalar>(cfg: &ExperimentConfig, data: &Splits<T>) -> Result<Network<T>> {
    let shape = cfg.input_shape.unwrap_or_else(|| data.train.sample_shape());
    let spec = NetworkSpec::parse_with_padding(&cfg.architecture, shape, cfg.padding)?;
    if spec.classes() != data.train.classes() {
        return Err(Error::InvalidArgument(format!(
            "architecture has {} outputs, dataset has {} classes",
            spec.classes(),
            data.train.classes()
        )));
    }
    Network::initialize(&spec, cfg.init_seed)
}

fn prune_config(cfg: &ExperimentConfig) -> PruneConfig {
    let p = &cfg.prune;
    PruneConfig {
        range: p.layer_range,
        criterion: p.criterion,
        select: SelectOptions {
            candidates: p.candidates,
            seed: p.seed,
            workers: p.workers,
            dedup: p.dedup,
            ..SelectOptions::default()
        },
        allow_orphans: p.allow_orphans,
        retrain: cfg.retrain_config(),
        steps: p.steps,
    }
}

fn request<T: Scalar>(cfg: &ExperimentConfig, net: &Network<T>, granularity: Granularity, ratio: f64) -> Result<MaskRequest> {
    let range = prune_config(cfg).range_for(net)?;
    let req = match &cfg.prune.ratios {
        Some(r) => MaskRequest::per_layer(granularity, r.clone(), range)?,
        None => MaskRequest::uniform(granularity, ratio, range),
    };
    Ok(req.allow_orphans(cfg.prune.allow_orphans))
}

fn eval_record<T: Scalar>(net: &Network<T>, stage: &str, name: &str, data: &structprune::data::Dataset<T>) -> Result<LogRecord> {
    let e = net.evaluate(data)?;
    Ok(LogRecord::Eval {
        stage: stage.into(),
        dataset: name.into(),
        n: e.n,
        errors: e.errors,
        mcr: e.mcr,
    })
}

fn finish_log<T: Scalar>(
    dir: &Path,
    file: &str,
    mut log: ExperimentLog,
    net: &Network<T>,
    stage: &str,
    data: &Splits<T>,
) -> Result<()> {
    let mut evals = vec![eval_record(net, stage, "val", &data.val)?];
    if let Some(t) = &data.test {
        evals.push(eval_record(net, stage, "test", t)?);
    }
    for r in &evals {
        if let LogRecord::Eval { dataset, mcr, .. } = r {
            println!("{stage}: {dataset} MCR {mcr:.2}%");
        }
    }
    write(&dir.join("eval.json"), serde_json::to_string_pretty(&evals)?)?;
    for r in evals {
        log.push(r);
    }
    write(&dir.join(file), log.to_json_lines()?)
}

fn check_precision(cfg: &ExperimentConfig, found: Precision) {
    if cfg.train.precision != found {
        log::warn!("checkpoint is {found}; using it instead of the configured {}", cfg.train.precision);
    }
}

// --- train ---------------------------------------------------------------

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, true)?;
    let mut net = build_net(cfg, &data)?;
    net.meta_mut().init_seed = cfg.init_seed;
    let (net, log) = train_net(&net, &data.train, &data.val, &cfg.train)?;
    save(&net, dir.join("model.ckpt"))?;
    finish_log(&dir, "train.log.jsonl", log, &net, "train", &data)
}

fn baseline<T: Scalar>(cfg: &ExperimentConfig, data: &Splits<T>, checkpoint: Option<&Path>, dir: &Path) -> Result<Network<T>> {
    match checkpoint {
        Some(p) => load::<T>(p),
        None => {
            let net = build_net(cfg, data)?;
            let (net, log) = train_net(&net, &data.train, &data.val, &cfg.train)?;
            save(&net, dir.join("model.ckpt"))?;
            write(&dir.join("train.log.jsonl"), log.to_json_lines()?)?;
            Ok(net)
        }
    }
}

/// Precision of an optional baseline checkpoint, else the configured one.
fn precision_of(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Precision> {
    match checkpoint {
        Some(p) => {
            let found = load_any(p)?.precision();
            check_precision(cfg, found);
            Ok(found)
        }
        None => Ok(cfg.train.precision),
    }
}

// --- prune / retrain -----------------------------------------------------

pub fn prune(cfg: &ExperimentConfig, checkpoint: &Path, mask: Option<&Path>) -> Result<()> {
    let any = load_any(checkpoint)?;
    check_precision(cfg, any.precision());
    with_net!(any, net => prune_as(cfg, net, mask))
}

fn prune_as<T: Scalar>(cfg: &ExperimentConfig, net: Network<T>, mask_path: Option<&Path>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, true)?;
    let pcfg = prune_config(cfg);
    let (mask, mcr, candidates) = match mask_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let m = PruningMask::from_json(&text)?;
            let mcr = evaluate_mask(&net, &m, &data.val)?.mcr;
            (m, mcr, 1)
        }
        None => {
            let req = request(cfg, &net, cfg.prune.granularity, cfg.prune.ratio)?;
            let (m, mcr) = choose_mask(&net, &data.val, &req, &pcfg)?;
            let n = match pcfg.criterion {
                structprune::pruning::Criterion::BestOfN => pcfg.select.candidates,
                structprune::pruning::Criterion::WeightSum => 1,
            };
            (m, mcr, n)
        }
    };
    let pruned = apply_mask(&net, &mask)?;
    let report = pruning_report(&net, &pruned, mask.layer_range)?;
    save(&pruned, dir.join("pruned.ckpt"))?;
    write(&dir.join("mask.json"), mask.to_json()?)?;
    write(&dir.join("report.json"), report.to_json()?)?;
    write(&dir.join("report.txt"), report.to_table())?;
    print!("{}", report.to_table());
    let mut log = ExperimentLog::new();
    log.push(LogRecord::Prune {
        stage: "prune".into(),
        granularity: mask.granularity.to_string(),
        ratio: mask.ratio.unwrap_or(cfg.prune.ratio),
        candidates,
        selected_mcr: mcr,
        mask_seed: mask.seed.unwrap_or(cfg.prune.seed),
    });
    finish_log(&dir, "prune.log.jsonl", log, &pruned, "prune", &data)
}

pub fn retrain(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let any = load_any(checkpoint)?;
    check_precision(cfg, any.precision());
    with_net!(any, net => retrain_as(cfg, net))
}

fn retrain_as<T: Scalar>(cfg: &ExperimentConfig, net: Network<T>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, true)?;
    let mut rcfg = cfg.retrain_config();
    rcfg.precision = T::PRECISION;
    let (net, log) = retrain_net(&net, &data.train, &data.val, &rcfg)?;
    save(&net, dir.join("retrained.ckpt"))?;
    finish_log(&dir, "retrain.log.jsonl", log, &net, "retrain", &data)
}

// --- sweeps --------------------------------------------------------------

fn csv_writer(path: &Path, comments: &[String], header: &str) -> Result<csv::Writer<std::fs::File>> {
    let mut text = String::new();
    for c in comments {
        let _ = writeln!(text, "# {c}");
    }
    let _ = writeln!(text, "{header}");
    write(path, text)?;
    let f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("csv {}: {other:?}", path.display())),
    }
}

fn fmt_mcr(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.4}"))
}

pub fn sweep_ratio(cfg: &ExperimentConfig, checkpoint: Option<&Path>, ratios: &[f64], granularities: &[Granularity]) -> Result<()> {
    match precision_of(cfg, checkpoint)? {
        Precision::F32 => sweep_ratio_as::<f32>(cfg, checkpoint, ratios, granularities),
        Precision::F64 => sweep_ratio_as::<f64>(cfg, checkpoint, ratios, granularities),
    }
}

fn sweep_ratio_as<T: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    ratios: &[f64],
    granularities: &[Granularity],
) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, true)?;
    let base = baseline(cfg, &data, checkpoint, &dir)?;
    let base_val = base.evaluate_mcr(&data.val)?;
    let pcfg = prune_config(cfg);
    let path = dir.join("sweep_ratio.csv");
    let comments = vec![
        "structprune sweep-ratio v1".to_string(),
        format!("architecture={}", base.spec().render()),
        format!("baseline_val_mcr={base_val:.4}"),
        format!("tolerance_mcr={:.4}", base_val + 1.0),
        format!("candidates={} seed={} retrain_epochs={}", pcfg.select.candidates, pcfg.select.seed, pcfg.retrain.epochs),
    ];
    let mut w = csv_writer(&path, &comments, SWEEP_RATIO_HEADER)?;
    let mut log = ExperimentLog::new();
    for &g in granularities {
        for &ratio in ratios {
            let req = request(cfg, &base, g, ratio)?;
            let stage = format!("{g}@{ratio}");
            let out = prune_stage(&base, &req, &data.train, &data.val, &pcfg, &stage)?;
            let post = out.net.evaluate_mcr(&data.val)?;
            let test = data.test.as_ref().map(|t| out.net.evaluate_mcr(t)).transpose()?;
            let pre = out.pruned_mcrs.last().copied().unwrap_or(base_val);
            println!("{g} {ratio:.3}: pruned {pre:.2}% -> retrained {post:.2}%");
            w.write_record([g.to_string(), format!("{ratio}"), format!("{pre:.4}"), format!("{post:.4}"), fmt_mcr(test)])
                .map_err(csv_err(&path))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            log.extend(out.log);
        }
    }
    write(&dir.join("sweep_ratio.log.jsonl"), log.to_json_lines()?)
}

pub fn sweep_n(cfg: &ExperimentConfig, checkpoint: Option<&Path>, ratios: &[f64], ns: &[usize], seeds: u64) -> Result<()> {
    match precision_of(cfg, checkpoint)? {
        Precision::F32 => sweep_n_as::<f32>(cfg, checkpoint, ratios, ns, seeds),
        Precision::F64 => sweep_n_as::<f64>(cfg, checkpoint, ratios, ns, seeds),
    }
}

fn sweep_n_as<T: Scalar>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, ratios: &[f64], ns: &[usize], seeds: u64) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, false)?;
    let base = baseline(cfg, &data, checkpoint, &dir)?;
    let base_val = base.evaluate_mcr(&data.val)?;
    let path = dir.join("sweep_n.csv");
    let comments = vec![
        "structprune sweep-n v1".to_string(),
        format!("architecture={}", base.spec().render()),
        format!("granularity={}", cfg.prune.granularity),
        format!("baseline_val_mcr={base_val:.4}"),
    ];
    let mut w = csv_writer(&path, &comments, SWEEP_N_HEADER)?;
    let select = prune_config(cfg).select;
    for &ratio in ratios {
        let req = request(cfg, &base, cfg.prune.granularity, ratio)?;
        for &n in ns {
            for s in 0..seeds {
                let opts = SelectOptions {
                    candidates: n,
                    seed: select.seed + s,
                    ..select.clone()
                };
                let best = select_best_of_n(&base, &data.val, &req, &opts)?;
                println!("ratio {ratio:.3} N={n} seed={}: {:.2}%", opts.seed, best.mcr());
                w.write_record([format!("{ratio}"), n.to_string(), opts.seed.to_string(), format!("{:.4}", best.mcr())])
                    .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn compare_criteria(cfg: &ExperimentConfig, checkpoint: Option<&Path>, ratios: &[f64], seeds: u64) -> Result<()> {
    match precision_of(cfg, checkpoint)? {
        Precision::F32 => compare_as::<f32>(cfg, checkpoint, ratios, seeds),
        Precision::F64 => compare_as::<f64>(cfg, checkpoint, ratios, seeds),
    }
}

fn compare_as<T: Scalar>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, ratios: &[f64], seeds: u64) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, false)?;
    let base = baseline(cfg, &data, checkpoint, &dir)?;
    let path = dir.join("compare_criteria.csv");
    let comments = vec![
        "structprune compare-criteria v1".to_string(),
        format!("architecture={}", base.spec().render()),
        format!("granularity={} candidates={}", cfg.prune.granularity, cfg.prune.candidates),
        format!("baseline_val_mcr={:.4}", base.evaluate_mcr(&data.val)?),
    ];
    let mut w = csv_writer(&path, &comments, COMPARE_HEADER)?;
    let select = prune_config(cfg).select;
    for &ratio in ratios {
        let req = request(cfg, &base, cfg.prune.granularity, ratio)?;
        // deterministic, so shared by every seed
        let ws = weight_sum_select_with(&base, &req)?;
        let ws_mcr = evaluate_mask(&base, &ws, &data.val)?.mcr;
        for s in 0..seeds {
            let opts = SelectOptions {
                seed: select.seed + s,
                ..select.clone()
            };
            let best = select_best_of_n(&base, &data.val, &req, &opts)?;
            println!("ratio {ratio:.3} seed {}: best-of-N {:.2}%, weight-sum {ws_mcr:.2}%", opts.seed, best.mcr());
            w.write_record([format!("{ratio}"), opts.seed.to_string(), format!("{:.4}", best.mcr()), format!("{ws_mcr:.4}")])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn combined(cfg: &ExperimentConfig, checkpoint: Option<&Path>, fmap_ratio: f64, kernel_ratio: f64) -> Result<()> {
    match precision_of(cfg, checkpoint)? {
        Precision::F32 => combined_as::<f32>(cfg, checkpoint, fmap_ratio, kernel_ratio),
        Precision::F64 => combined_as::<f64>(cfg, checkpoint, fmap_ratio, kernel_ratio),
    }
}

fn combined_as<T: Scalar>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, fmap_ratio: f64, kernel_ratio: f64) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = datasets::load::<T>(&cfg.dataset, true)?;
    let base = baseline(cfg, &data, checkpoint, &dir)?;
    let pcfg = prune_config(cfg);
    let range = pcfg.range_for(&base)?;
    let fmap = MaskRequest::uniform(Granularity::FeatureMap, fmap_ratio, range);
    let kernel = MaskRequest::uniform(Granularity::Kernel, kernel_ratio, range).allow_orphans(pcfg.allow_orphans);
    let (net, report, log) = combined_prune_with(&base, &fmap, &kernel, &data.train, &data.val, &pcfg)?;
    save(&net, dir.join("combined.ckpt"))?;
    write(&dir.join("report.json"), report.to_json()?)?;
    write(&dir.join("report.txt"), report.to_table())?;
    print!("{}", report.to_table());
    finish_log(&dir, "combined.log.jsonl", log, &net, "combined", &data)
}

// --- inspection ----------------------------------------------------------

pub fn report(before: &Path, after: &Path, range: Option<ConvRange>, out: Option<&Path>) -> Result<()> {
    let (a, b) = (load_any(before)?, load_any(after)?);
    let r = match (a, b) {
        (AnyNetwork::F32(a), AnyNetwork::F32(b)) => report_of(&a, &b, range),
        (AnyNetwork::F64(a), AnyNetwork::F64(b)) => report_of(&a, &b, range),
        (a, b) => Err(Error::Precision {
            found: b.precision().to_string(),
            requested: a.precision().to_string(),
        }),
    }?;
    print!("{}", r.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("report.json"), r.to_json()?)?;
        write(&dir.join("report.txt"), r.to_table())?;
    }
    Ok(())
}

fn report_of<T: Scalar>(a: &Network<T>, b: &Network<T>, range: Option<ConvRange>) -> Result<structprune::pruning::PruneReport> {
    let range = match range {
        Some(r) => r,
        None => ConvRange::default_for(a)?,
    };
    pruning_report(a, b, range)
}

pub fn bench(checkpoint: &Path, batch: usize, reps: usize, warmup: usize, out: Option<&Path>) -> Result<()> {
    with_net!(load_any(checkpoint)?, net => bench_as(&net, batch, reps, warmup, out))
}

fn bench_as<T: Scalar>(net: &Network<T>, batch: usize, reps: usize, warmup: usize, out: Option<&Path>) -> Result<()> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let [c, h, w] = net.spec().input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::from_fn(vec![batch, c, h, w], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::of(v)
    });
    let rows = bench_network(net, &input, reps, warmup)?;
    let cost = cost_model(net)?;
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    print!("{csv}");
    print!("{}", cost.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("bench.csv"), csv)?;
        write(&dir.join("cost.json"), cost.to_json()?)?;
    }
    Ok(())
}

pub fn info(checkpoint: &Path) -> Result<()> {
    with_net!(load_any(checkpoint)?, net => info_as(&net))
}

fn info_as<T: Scalar>(net: &Network<T>) -> Result<()> {
    let all = ConvRange::all(net);
    let summary = json!({
        "architecture": net.spec().render(),
        "input_shape": net.spec().input_shape(),
        "precision": T::PRECISION.to_string(),
        "conv_widths": net.spec().conv_widths(),
        "conv_weights": net.count_weights(all, false)?,
        "conv_macs": net.count_macs(all)?,
        "meta": net.meta(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    print!("{}", cost_model(net)?.to_table());
    Ok(())
}
