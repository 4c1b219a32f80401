use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dlvit::bench::{measure_throughput, Throughput, ThroughputOptions};
use dlvit::data::{write_dataset, Dataset, Image, Normalization, Raster, Sample};
use dlvit::dl::{self, DeltaLossRecord, PseudoLabel};
use dlvit::filter::{train_filter, FilterCorpus, FilterMeta, FilterMlp};
use dlvit::flops::{self, count_flops, params_count};
use dlvit::par::Parallelism;
use dlvit::pipeline::{
    calibrate_threshold, evaluate, finetune, infer, mask_average, pretrain, EvalOptions, EvalReport, ModelBundle,
    TokenSelector, TrainLog, TrainMode,
};
use dlvit::stats::{Grid, Histogram, DEFAULT_SIGMAS};
use dlvit::vit::{ModelConfig, Vit};
use dlvit::{rng, Error, Result};

use crate::config::{RunConfig, SelectorKind};
use crate::stage::{stage_key, write_header, Stages};
use crate::{Cmd, Preset};

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn note(msg: impl AsRef<str>) {
    eprintln!("[dlvit] {}", msg.as_ref());
}

pub fn run(cmd: &Cmd, cfg: &RunConfig, out: &Path) -> Result<()> {
    write_header(out, cmd.name(), cfg)?;
    match cmd {
        Cmd::GenData { .. } => {
            let (t, v) = gen_data(cfg, &out.join("data"))?;
            println!("{}\n{}", t.display(), v.display());
            Ok(())
        }
        Cmd::Pretrain { data, out: o, .. } => {
            let train = Dataset::open(data)?;
            let (vit, log) = run_pretrain(cfg, &train)?;
            let path = o.clone().unwrap_or_else(|| out.join("backbone.ckpt"));
            ModelBundle { vit, filter: None }.save(&path)?;
            write(&out.join("pretrain_log.csv"), &log_csv(&log))?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::ScoreDl { checkpoint, data, out: o } => {
            let bundle = ModelBundle::load(checkpoint)?;
            let train = Dataset::open(data)?;
            let records = score(cfg, &bundle.vit, &train)?;
            let path = o.clone().unwrap_or_else(|| out.join("dl_records.csv"));
            dl::write_records(&path, &records, None)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Label { records, out: o } => {
            let (records, _) = dl::read_records(records)?;
            let (labels, rho) = label(cfg, &records)?;
            let path = o.clone().unwrap_or_else(|| out.join("labels.csv"));
            dl::write_records(&path, &records, Some(&labels))?;
            println!("rho {rho:.6e} keep fraction {:.4}", dl::keep_fraction(&labels));
            println!("{}", path.display());
            Ok(())
        }
        Cmd::TrainFilter {
            checkpoint,
            data,
            labels,
            out: o,
        } => {
            let bundle = ModelBundle::load(checkpoint)?;
            let train = Dataset::open(data)?;
            let (records, labels) = dl::read_records(labels)?;
            let labels = labels.ok_or_else(|| Error::Config("records file has no label column; run label first".into()))?;
            let rho = effective_rho(cfg, &records)?;
            let (mlp, meta) = fit_filter(cfg, &bundle.vit, &train, &labels, rho)?;
            let path = o.clone().unwrap_or_else(|| out.join("filter.ckpt"));
            ModelBundle {
                vit: bundle.vit,
                filter: Some((mlp, meta)),
            }
            .save(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Finetune { checkpoint, data, out: o, .. } => {
            let bundle = ModelBundle::load(checkpoint)?;
            let train = Dataset::open(data)?;
            let sel = selector(cfg, &bundle, &train.samples, cfg.label.keep_ratio, true)?;
            let (bundle, log, _) = run_finetune(cfg, bundle, sel, &train)?;
            let path = o.clone().unwrap_or_else(|| out.join("model.ckpt"));
            bundle.save(&path)?;
            write(&out.join("finetune_log.csv"), &log_csv(&log))?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Infer { checkpoint, image } => {
            let bundle = ModelBundle::load(checkpoint)?;
            let img = Image::from_raster(&Raster::read(image)?, &Normalization::Unit)?;
            let sel = selector(cfg, &bundle, &[], cfg.label.keep_ratio, false)?;
            let r = infer(&bundle.vit, &sel, &img)?;
            println!("prediction {}", r.prediction);
            println!("kept {}/{} ({:.4})", r.kept.len(), r.num_tokens, r.keep_ratio());
            println!(
                "kept_indices {}",
                r.kept.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            );
            Ok(())
        }
        Cmd::Eval { checkpoint, data, .. } => {
            let bundle = ModelBundle::load(checkpoint)?;
            let ds = Dataset::open(data)?;
            let sel = selector(cfg, &bundle, &ds.samples, cfg.label.keep_ratio, false)?;
            let rep = eval(cfg, &bundle.vit, &sel, &ds)?;
            write_eval(out, &rep)?;
            print!("{rep}");
            Ok(())
        }
        Cmd::Bench { checkpoint, data } => {
            let bundle = ModelBundle::load(checkpoint)?;
            let ds = Dataset::open(data)?;
            let sel = selector(cfg, &bundle, &ds.samples, cfg.label.keep_ratio, false)?;
            let imgs: Vec<&Image> = ds.samples.iter().map(|s| &s.image).collect();
            let t = measure_throughput(&bundle.vit, &sel, &imgs, &throughput_opts(cfg))?;
            let (csv, md) = bench_tables(&bundle.vit.config, sel.name(), &t)?;
            write(&out.join("bench.csv"), &csv)?;
            write(&out.join("bench.md"), &md)?;
            print!("{md}");
            Ok(())
        }
        Cmd::Flops {
            preset,
            ratios,
            gradual,
            target_macs,
        } => {
            let mc = match preset {
                Preset::Desk => cfg.model.clone(),
                Preset::DeitTiny => ModelConfig::deit_tiny(),
                Preset::DeitSmall => ModelConfig::deit_small(),
            };
            let text = flops_report(&mc, ratios, gradual.as_deref(), *target_macs)?;
            write(&out.join("flops.csv"), &text)?;
            print!("{text}");
            Ok(())
        }
        Cmd::Stats {
            records,
            checkpoint,
            data,
            bins,
        } => stats(cfg, out, records.as_deref(), checkpoint.as_deref(), data.as_deref(), *bins),
        Cmd::Ablate {
            checkpoint,
            data,
            val,
            rhos,
        } => ablate(cfg, out, checkpoint, data, val, rhos),
        Cmd::Pipeline { data, val } => pipeline(cfg, out, data.as_deref(), val.as_deref()),
    }
}

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let train = dlvit::data::generate_synthetic(&cfg.synthetic(rng::derive(cfg.seed, 100)), cfg.data.train_per_class)?;
    let val = dlvit::data::generate_synthetic(&cfg.synthetic(rng::derive(cfg.seed, 101)), cfg.data.val_per_class)?;
    write_dataset(dir, "train", &train)?;
    write_dataset(dir, "val", &val)?;
    Ok((dir.join("train.csv"), dir.join("val.csv")))
}

fn check_classes(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.num_classes > cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model is configured for {}",
            ds.num_classes, cfg.model.num_classes
        )));
    }
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, train: &Dataset) -> Result<(Vit, TrainLog)> {
    check_classes(cfg, train)?;
    let vit = Vit::init(cfg.model.clone(), cfg.seed)?;
    note(format!("pretraining {} images for {} epochs", train.len(), cfg.train.pretrain_epochs));
    pretrain(vit, train, &cfg.schedule(TrainMode::Pretrain), &cfg.train_options())
}

fn score(cfg: &RunConfig, vit: &Vit, train: &Dataset) -> Result<Vec<DeltaLossRecord>> {
    note(format!("scoring {} images ({} dl sign)", train.len(), cfg.label.dl_sign.as_str()));
    dl::score_dataset(vit, &train.samples, cfg.label.dl_sign, Parallelism::default())
}

fn effective_rho(cfg: &RunConfig, records: &[DeltaLossRecord]) -> Result<f64> {
    match cfg.label.keep_ratio {
        Some(r) => dl::rho_for_keep_ratio(records, r),
        None => Ok(cfg.label.rho),
    }
}

fn label(cfg: &RunConfig, records: &[DeltaLossRecord]) -> Result<(Vec<PseudoLabel>, f64)> {
    let rho = effective_rho(cfg, records)?;
    Ok((dl::pseudo_label(records, rho)?, rho))
}

fn fit_filter(cfg: &RunConfig, vit: &Vit, train: &Dataset, labels: &[PseudoLabel], rho: f64) -> Result<(FilterMlp, FilterMeta)> {
    let f = &cfg.filter;
    let corpus = FilterCorpus::build(vit, &train.samples, labels, f.use_global, f.include_class, Parallelism::default())?;
    let mut mlp = FilterMlp::init(vit.config.dim, f.use_global, rng::derive(cfg.seed, 200));
    mlp.include_class = f.include_class;
    mlp.threshold = f.threshold;
    note(format!(
        "training filter on {} images, {:.1}% keep labels",
        corpus.len(),
        100.0 * corpus.positive_fraction()
    ));
    let mut tc = cfg.filter_train();
    let pos = corpus.positive_fraction();
    if tc.pos_weight.is_none() && f.balance_labels && pos > 0.0 {
        tc.pos_weight = Some(((1.0 - pos) / pos) as f32);
    }
    let (mlp, log) = train_filter(&corpus, mlp, &tc)?;
    note(format!(
        "filter stopped after {} epochs, loss {:.4}",
        log.epoch_loss.len(),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN)
    ));
    let meta = FilterMeta {
        use_global: f.use_global,
        threshold: f.threshold,
        dl_sign: cfg.label.dl_sign,
        rho,
        include_class: f.include_class,
    };
    Ok((mlp, meta))
}

/// The selector named by the configuration. `keep` is the target keep
/// ratio for the random variants.
fn selector(cfg: &RunConfig, bundle: &ModelBundle, samples: &[Sample], keep: Option<f64>, training: bool) -> Result<TokenSelector> {
    let need_keep = || {
        keep.ok_or_else(|| Error::Config("random selectors need a target keep ratio (--keep-ratio)".into()))
    };
    let trainable = training && cfg.train.filter_grad;
    match cfg.filter.selector {
        SelectorKind::AllKeep => Ok(TokenSelector::AllKeep),
        SelectorKind::Learned => match &bundle.filter {
            Some((mlp, _)) => Ok(TokenSelector::Filter {
                mlp: mlp.clone(),
                trainable,
            }),
            None if !training => {
                note("checkpoint has no filter; keeping every token");
                Ok(TokenSelector::AllKeep)
            }
            None => Err(Error::Config(
                "checkpoint has no filter; run train-filter first or pass --filter all-keep".into(),
            )),
        },
        SelectorKind::RandomDiscard => Ok(TokenSelector::RandomDiscard {
            ratio: need_keep()?,
            seed: rng::derive(cfg.seed, 300),
        }),
        SelectorKind::Random => {
            let ratio = need_keep()?;
            let mut mlp = FilterMlp::init(bundle.vit.config.dim, cfg.filter.use_global, rng::derive(cfg.seed, 400));
            mlp.include_class = cfg.filter.include_class;
            if samples.is_empty() {
                return Err(Error::Config("a random filter needs data to calibrate its threshold".into()));
            }
            mlp.threshold = calibrate_threshold(&bundle.vit, &mlp, samples, ratio, Parallelism::default())? as f32;
            Ok(TokenSelector::Filter { mlp, trainable })
        }
    }
}

fn run_finetune(
    cfg: &RunConfig,
    bundle: ModelBundle,
    sel: TokenSelector,
    train: &Dataset,
) -> Result<(ModelBundle, TrainLog, TokenSelector)> {
    check_classes(cfg, train)?;
    note(format!(
        "fine-tuning with {} selector for {} epochs",
        sel.name(),
        cfg.train.finetune_epochs
    ));
    let meta = bundle.filter.as_ref().map(|(_, m)| *m);
    let out = finetune(bundle.vit, sel, train, &cfg.schedule(TrainMode::Finetune), &cfg.train_options())?;
    let filter = match (&out.selector, meta) {
        (TokenSelector::Filter { mlp, .. }, Some(m)) => Some((
            mlp.clone(),
            FilterMeta {
                threshold: mlp.threshold,
                ..m
            },
        )),
        (TokenSelector::Filter { mlp, .. }, None) => Some((
            mlp.clone(),
            FilterMeta {
                use_global: mlp.use_global,
                threshold: mlp.threshold,
                dl_sign: cfg.label.dl_sign,
                rho: cfg.label.rho,
                include_class: mlp.include_class,
            },
        )),
        _ => None,
    };
    Ok((ModelBundle { vit: out.vit, filter }, out.log, out.selector))
}

fn throughput_opts(cfg: &RunConfig) -> ThroughputOptions {
    ThroughputOptions {
        batch_size: cfg.eval.batch_size,
        warmup: cfg.eval.warmup,
        repeats: cfg.eval.repeats,
        threads: cfg.threads,
        parallelism: Parallelism::default(),
    }
}

fn eval(cfg: &RunConfig, vit: &Vit, sel: &TokenSelector, ds: &Dataset) -> Result<EvalReport> {
    let opts = EvalOptions {
        batch_size: cfg.eval.batch_size,
        throughput: cfg.eval.throughput.then(|| throughput_opts(cfg)),
        ..EvalOptions::default()
    };
    evaluate(vit, sel, ds, &opts)
}

fn write_eval(out: &Path, rep: &EvalReport) -> Result<()> {
    write(&out.join("eval.csv"), &format!("{}\n{}\n", EvalReport::CSV_HEADER, rep.csv_row()))?;
    write(&out.join("eval.txt"), &rep.to_string())
}

fn log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,lr,loss,accuracy,kept_ratio\n");
    for e in 0..log.loss.len() {
        let _ = writeln!(
            s,
            "{},{:e},{:.6},{:.6},{:.6}",
            e, log.lr[e], log.loss[e], log.accuracy[e], log.kept_ratio[e]
        );
    }
    s
}

fn bench_tables(mc: &ModelConfig, name: &str, t: &Throughput) -> Result<(String, String)> {
    let n = mc.num_patches() as f64;
    let macs = count_flops(mc, 1 + ((t.kept_ratio.mean * n).round() as usize).max(1))?.total;
    let runs = t.runs.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(";");
    let csv = format!(
        "selector,threads,batch_size,images_per_sec,spread,kept_ratio_mean,kept_ratio_std,kept_ratio_min,kept_ratio_max,macs,runs\n\
         {name},{},{},{:.3},{:.4},{:.4},{:.4},{:.4},{:.4},{macs},{runs}\n",
        t.threads,
        t.batch_size,
        t.images_per_sec,
        t.spread(),
        t.kept_ratio.mean,
        t.kept_ratio.std,
        t.kept_ratio.min,
        t.kept_ratio.max
    );
    let md = format!(
        "| selector | threads | batch | images/s | spread | kept ratio (mean ± std, min–max) | MACs |\n\
         |---|---|---|---|---|---|---|\n\
         | {name} | {} | {} | {:.1} | {:.1}% | {:.3} ± {:.3}, {:.3}–{:.3} | {:.2}M |\n",
        t.threads,
        t.batch_size,
        t.images_per_sec,
        100.0 * t.spread(),
        t.kept_ratio.mean,
        t.kept_ratio.std,
        t.kept_ratio.min,
        t.kept_ratio.max,
        macs as f64 / 1e6
    );
    Ok((csv, md))
}

fn flops_report(mc: &ModelConfig, ratios: &[f64], gradual: Option<&[f64]>, target: Option<f64>) -> Result<String> {
    let full = count_flops(mc, mc.seq_len())?;
    let mut s = format!(
        "# params {} (+{} filter), full MACs {}, {}\n",
        params_count(mc),
        flops::filter_params_count(mc.dim, true),
        full.total,
        flops::CONVENTION
    );
    s.push_str("ratio,seq_len,macs,predicted_speedup\n");
    for r in flops::sweep_keep_ratio(mc, ratios)? {
        let _ = writeln!(s, "{},{},{},{:.4}", r.ratio, r.seq_len, r.macs, r.predicted_speedup);
    }
    if let Some(t) = target {
        match flops::ratio_for_macs(mc, t) {
            Some(r) => {
                let _ = writeln!(s, "# keep ratio for {t:.4e} MACs: {r:.4}");
            }
            None => {
                let _ = writeln!(s, "# no keep ratio reaches {t:.4e} MACs");
            }
        }
    }
    if let Some(g) = gradual {
        let one = ratios.iter().copied().find(|&r| r < 1.0).unwrap_or(1.0);
        let c = flops::compare_schedules(mc, one, g)?;
        let _ = writeln!(
            s,
            "# one-pass {:.3}: {} MACs; gradual {:?}: {} MACs; equal-cost one-pass ratio {}",
            c.one_pass_ratio,
            c.one_pass_macs,
            c.gradual_ratios,
            c.gradual_macs,
            c.equivalent_one_pass_ratio.map_or("none".into(), |r| format!("{r:.4}"))
        );
    }
    Ok(s)
}

pub fn hist_csv(h: &Histogram) -> String {
    let mut s = String::from("kind,lo,hi,count\n");
    let (lo, hi) = (h.edges[0], h.edges[h.bins()]);
    let _ = writeln!(s, "underflow,-inf,{lo:e},{}", h.underflow);
    for k in 0..h.bins() {
        let _ = writeln!(s, "bin,{:e},{:e},{}", h.edges[k], h.edges[k + 1], h.counts[k]);
    }
    let _ = writeln!(s, "overflow,{hi:e},inf,{}", h.overflow);
    s
}

/// `side` lines of `side` comma-separated cells, row-major; empty cells
/// had no data.
pub fn grid_csv(g: &Grid) -> String {
    let mut s = String::new();
    for r in 0..g.side {
        let row: Vec<String> = (0..g.side)
            .map(|c| g.get(r, c).map_or(String::new(), |v| format!("{v:.8e}")))
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn stats(
    cfg: &RunConfig,
    out: &Path,
    records: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    bins: usize,
) -> Result<()> {
    if records.is_none() && checkpoint.is_none() {
        return Err(Error::Config("stats needs --records and/or --checkpoint with --data".into()));
    }
    if let Some(r) = records {
        let (recs, _) = dl::read_records(r)?;
        let side = cfg.model.grid_side();
        let st = dl::dl_statistics(&recs, side, bins, DEFAULT_SIGMAS)?;
        write(&out.join("dl_hist.csv"), &hist_csv(&st.histogram))?;
        write(&out.join("dl_patch_grid.csv"), &grid_csv(&st.grid))?;
        println!("{}", out.join("dl_hist.csv").display());
        println!("{}", out.join("dl_patch_grid.csv").display());
    }
    if let Some(c) = checkpoint {
        let data = data.ok_or_else(|| Error::Config("mask statistics need --data".into()))?;
        let bundle = ModelBundle::load(c)?;
        let ds = Dataset::open(data)?;
        let sel = selector(cfg, &bundle, &ds.samples, cfg.label.keep_ratio, false)?;
        let g = mask_average(&bundle.vit, &sel, &ds.samples, &EvalOptions::default())?;
        write(&out.join("mask_avg_grid.csv"), &grid_csv(&g))?;
        println!("{}", out.join("mask_avg_grid.csv").display());
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, checkpoint: &Path, data: &Path, val: &Path, rhos: &[f64]) -> Result<()> {
    let backbone = ModelBundle::load(checkpoint)?;
    let train = Dataset::open(data)?;
    let valset = Dataset::open(val)?;
    let records = score(cfg, &backbone.vit, &train)?;
    let mut csv = String::from("filter,use_global,rho,label_keep_ratio,top1,top5,kept_ratio,macs_filtered,macs_full\n");
    let mut row = |name: &str, global: &str, rho: String, lk: String, rep: &EvalReport| {
        let _ = writeln!(
            csv,
            "{name},{global},{rho},{lk},{:.6},{:.6},{:.6},{},{}",
            rep.top1, rep.top5, rep.kept_ratio, rep.macs_filtered, rep.macs_full
        );
    };
    let base_cfg = RunConfig {
        filter: crate::config::FilterConfig {
            selector: SelectorKind::AllKeep,
            ..cfg.filter.clone()
        },
        ..cfg.clone()
    };
    let (b, _, sel) = run_finetune(&base_cfg, backbone.clone(), TokenSelector::AllKeep, &train)?;
    let rep = eval(&base_cfg, &b.vit, &sel, &valset)?;
    row("all-keep", "", String::new(), String::new(), &rep);
    for global in [true, false] {
        for &rho in rhos {
            let c = RunConfig {
                label: crate::config::LabelConfig {
                    rho,
                    keep_ratio: None,
                    ..cfg.label.clone()
                },
                filter: crate::config::FilterConfig {
                    use_global: global,
                    ..cfg.filter.clone()
                },
                ..cfg.clone()
            };
            let labels = dl::pseudo_label(&records, rho)?;
            let lk = dl::keep_fraction(&labels);
            let g = if global { "on" } else { "off" };
            let (mlp, meta) = match fit_filter(&c, &backbone.vit, &train, &labels, rho) {
                Ok(f) => f,
                Err(Error::Training(m)) => {
                    note(format!("skipping rho {rho}: {m}"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let with_filter = ModelBundle {
                vit: backbone.vit.clone(),
                filter: Some((mlp.clone(), meta)),
            };
            let sel = TokenSelector::Filter {
                mlp,
                trainable: c.train.filter_grad,
            };
            let (m, _, sel) = run_finetune(&c, with_filter, sel, &train)?;
            let learned = eval(&c, &m.vit, &sel, &valset)?;
            row("learned", g, format!("{rho}"), format!("{lk:.4}"), &learned);
            let matched = learned.kept_ratio.clamp(1.0 / cfg.model.num_patches() as f64, 1.0);
            for kind in [SelectorKind::Random, SelectorKind::RandomDiscard] {
                let rc = RunConfig {
                    filter: crate::config::FilterConfig {
                        selector: kind,
                        ..c.filter.clone()
                    },
                    ..c.clone()
                };
                let sel = selector(&rc, &backbone, &train.samples, Some(matched), true)?;
                let (m, _, sel) = run_finetune(&rc, backbone.clone(), sel, &train)?;
                let rep = eval(&rc, &m.vit, &sel, &valset)?;
                let name = if kind == SelectorKind::Random { "random-init" } else { "random-discard" };
                row(name, g, format!("{rho}"), format!("{lk:.4}"), &rep);
            }
        }
    }
    let path = out.join("ablation.csv");
    write(&path, &csv)?;
    print!("{csv}");
    Ok(())
}

fn pipeline(cfg: &RunConfig, out: &Path, data: Option<&Path>, val: Option<&Path>) -> Result<()> {
    let stages = Stages::new(out)?;
    let run_stage = |name: &str, key: &str, outputs: &[&Path], f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        if stages.is_done(name, key) {
            note(format!("stage {name}: up to date"));
            return Ok(());
        }
        note(format!("stage {name}: running"));
        f().map_err(|e| annotate(name, outputs, e))?;
        stages.mark_done(name, key, outputs)
    };

    let (train_path, val_path) = match (data, val) {
        (Some(d), Some(v)) => (d.to_path_buf(), v.to_path_buf()),
        _ => {
            let dir = out.join("data");
            let (t, v) = (dir.join("train.csv"), dir.join("val.csv"));
            let key = stage_key("data", &(cfg.seed, &cfg.model, &cfg.data), &[])?;
            run_stage("data", &key, &[&t, &v], &mut || gen_data(cfg, &dir).map(|_| ()))?;
            (t, v)
        }
    };

    let backbone = out.join("backbone.ckpt");
    let plog = out.join("pretrain_log.csv");
    let pre = crate::config::TrainConfig {
        finetune_epochs: 0,
        mask_mode: Default::default(),
        filter_grad: true,
        ..cfg.train.clone()
    };
    let key = stage_key("pretrain", &(cfg.seed, &cfg.model, &pre), &[&train_path])?;
    run_stage("pretrain", &key, &[&backbone, &plog], &mut || {
        let (vit, log) = run_pretrain(cfg, &Dataset::open(&train_path)?)?;
        ModelBundle { vit, filter: None }.save(&backbone)?;
        write(&plog, &log_csv(&log))
    })?;

    let records = out.join("dl_records.csv");
    let key = stage_key("score-dl", &cfg.label.dl_sign, &[&backbone, &train_path])?;
    run_stage("score-dl", &key, &[&records], &mut || {
        let b = ModelBundle::load(&backbone)?;
        let recs = score(cfg, &b.vit, &Dataset::open(&train_path)?)?;
        dl::write_records(&records, &recs, None)
    })?;

    let labels = out.join("labels.csv");
    let summary = out.join("label_summary.json");
    let key = stage_key("label", &cfg.label, &[&records])?;
    run_stage("label", &key, &[&labels, &summary], &mut || {
        let (recs, _) = dl::read_records(&records)?;
        let (l, rho) = label(cfg, &recs)?;
        dl::write_records(&labels, &recs, Some(&l))?;
        let s = serde_json::json!({
            "rho": rho,
            "keep_fraction": dl::keep_fraction(&l),
            "dl_sign": cfg.label.dl_sign.as_str(),
        });
        write(&summary, &format!("{s:#}\n"))
    })?;
    let label_keep = read_summary(&summary)?;

    let filter_ckpt = out.join("filter.ckpt");
    let learned = cfg.filter.selector == SelectorKind::Learned;
    if learned {
        let key = stage_key("train-filter", &(cfg.seed, &cfg.filter), &[&backbone, &train_path, &labels])?;
        run_stage("train-filter", &key, &[&filter_ckpt], &mut || {
            let b = ModelBundle::load(&backbone)?;
            let (recs, l) = dl::read_records(&labels)?;
            let l = l.ok_or_else(|| Error::Config("labels file lost its label column".into()))?;
            let rho = effective_rho(cfg, &recs)?;
            let (mlp, meta) = fit_filter(cfg, &b.vit, &Dataset::open(&train_path)?, &l, rho)?;
            ModelBundle {
                vit: b.vit,
                filter: Some((mlp, meta)),
            }
            .save(&filter_ckpt)
        })?;
    }

    let model = out.join("model.ckpt");
    let flog = out.join("finetune_log.csv");
    let start = if learned { &filter_ckpt } else { &backbone };
    let key = stage_key("finetune", &(cfg.seed, &cfg.train, &cfg.filter), &[start, &train_path, &summary])?;
    run_stage("finetune", &key, &[&model, &flog], &mut || {
        let b = ModelBundle::load(start)?;
        let train = Dataset::open(&train_path)?;
        let sel = selector(cfg, &b, &train.samples, Some(label_keep), true)?;
        let (m, log, _) = run_finetune(cfg, b, sel, &train)?;
        m.save(&model)?;
        write(&flog, &log_csv(&log))
    })?;

    let eval_csv = out.join("eval.csv");
    let key = stage_key("eval", &(cfg.seed, &cfg.eval, &cfg.filter), &[&model, &val_path, &summary])?;
    run_stage("eval", &key, &[&eval_csv, &out.join("eval.txt")], &mut || {
        let m = ModelBundle::load(&model)?;
        let ds = Dataset::open(&val_path)?;
        let sel = selector(cfg, &m, &ds.samples, Some(label_keep), false)?;
        let rep = eval(cfg, &m.vit, &sel, &ds)?;
        write_eval(out, &rep)?;
        print!("{rep}");
        Ok(())
    })?;

    let key = stage_key("stats", &(cfg.seed, &cfg.filter, &cfg.model), &[&records, &model, &val_path])?;
    let grids = [out.join("dl_hist.csv"), out.join("dl_patch_grid.csv"), out.join("mask_avg_grid.csv")];
    let grid_refs: Vec<&Path> = grids.iter().map(|p| p.as_path()).collect();
    run_stage("stats", &key, &grid_refs, &mut || {
        let c = RunConfig {
            label: crate::config::LabelConfig {
                keep_ratio: Some(label_keep),
                ..cfg.label.clone()
            },
            ..cfg.clone()
        };
        stats(&c, out, Some(&records), Some(&model), Some(&val_path), dlvit::stats::DEFAULT_BINS)
    })?;
    if let Ok(text) = fs::read_to_string(out.join("eval.txt")) {
        print!("{text}");
    }
    Ok(())
}

fn read_summary(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    v["keep_fraction"].as_f64().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "missing keep_fraction".into(),
    })
}

fn annotate(stage: &str, outputs: &[&Path], e: Error) -> Error {
    let paths = outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
    let msg = format!("stage {stage} (artifacts: {paths}): {e}");
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Training(_) => Error::Config(msg),
        Error::Divergence(_) | Error::Numeric(_) => Error::Divergence(msg),
        Error::Data { entry, reason } => Error::Data {
            entry,
            reason: format!("stage {stage}: {reason}"),
        },
        other => other,
    }
}
