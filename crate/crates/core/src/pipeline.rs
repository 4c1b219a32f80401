//! Backbone pretraining, filter-equipped fine-tuning, and token-dropping
//! inference and evaluation.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_checkpoint, save_checkpoint, Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::filter::{self, build_descriptors, descriptor_graph, mlp_logits, FilterMeta, FilterMlp};
use crate::flops::{count_flops, filter_macs};
use crate::optim::{Optimizer, OptimizerKind};
use crate::par::{self, Parallelism};
use crate::rng;
use crate::stats::{spatial_grid, Grid};
use crate::tensor::{SeqLayout, Tape, Tensor};
use crate::vit::{bind_vit, embed_graph, encode_graph, patch_rows, ForwardOptions, KeepMask, MaskMode, TokenMatrix, Vit};

pub const DEFAULT_LR: f32 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f32 = 1e-4;
pub const DEFAULT_DECAY_EVERY: usize = 40;
pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_WARMUP: usize = 64;
/// Images per gradient chunk; chunks are the unit of parallel work.
pub const DEFAULT_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub mode: TrainMode,
    pub epochs: usize,
    pub base_lr: f32,
    /// Step decay period in epochs; `None` keeps the rate constant.
    pub decay_every: Option<usize>,
    pub decay_factor: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl TrainSchedule {
    /// AdamW, used for training a backbone from scratch.
    pub fn pretrain(epochs: usize, seed: u64) -> Self {
        Self {
            mode: TrainMode::Pretrain,
            epochs,
            base_lr: DEFAULT_LR,
            decay_every: Some(DEFAULT_DECAY_EVERY),
            decay_factor: 0.1,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch_size: 32,
            seed,
            optimizer: OptimizerKind::adamw(),
        }
    }

    /// SGD with momentum 0.9.
    pub fn finetune(epochs: usize, seed: u64) -> Self {
        Self {
            mode: TrainMode::Finetune,
            optimizer: OptimizerKind::sgd(0.9),
            ..Self::pretrain(epochs, seed)
        }
    }

    pub fn with_batch(self, batch_size: usize) -> Self {
        Self { batch_size, ..self }
    }

    /// `base · factor^⌊epoch / period⌋`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let base = self.base_lr as f64;
        match self.decay_every {
            Some(k) if k > 0 => base * (self.decay_factor as f64).powi((epoch / k) as i32),
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// How patch tokens are chosen before the first block.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenSelector {
    AllKeep,
    /// The MLP decides with its own threshold. `trainable` lets fine-tuning
    /// update it through the straight-through gate.
    Filter { mlp: FilterMlp, trainable: bool },
    /// `round(ratio·N)` tokens kept uniformly at random per image.
    RandomDiscard { ratio: f64, seed: u64 },
}

impl TokenSelector {
    pub fn name(&self) -> &'static str {
        match self {
            TokenSelector::AllKeep => "all-keep",
            TokenSelector::Filter { .. } => "filter",
            TokenSelector::RandomDiscard { .. } => "random-discard",
        }
    }

    pub fn filter(&self) -> Option<&FilterMlp> {
        match self {
            TokenSelector::Filter { mlp, .. } => Some(mlp),
            _ => None,
        }
    }

    /// Masks for already embedded images, one per input.
    pub fn masks(&self, tokens: &[TokenMatrix]) -> Result<Vec<KeepMask>> {
        match self {
            TokenSelector::AllKeep => Ok(tokens.iter().map(|t| KeepMask::all(t.num_tokens())).collect()),
            TokenSelector::RandomDiscard { ratio, seed } => tokens
                .iter()
                .map(|t| random_keep_mask(t.num_tokens(), *ratio, rng::derive(*seed, t.image_id)))
                .collect(),
            TokenSelector::Filter { mlp, .. } => {
                if tokens.is_empty() {
                    return Ok(Vec::new());
                }
                let descs: Vec<Tensor> = tokens
                    .iter()
                    .map(|t| build_descriptors(t, mlp.use_global, mlp.include_class))
                    .collect();
                let refs: Vec<&Tensor> = descs.iter().collect();
                let probs = mlp.probabilities_for(&Tensor::vstack(&refs)?)?;
                let mut out = Vec::with_capacity(tokens.len());
                let mut at = 0;
                for t in tokens {
                    let n = t.num_tokens();
                    out.push(filter::mask_from_probs(&probs[at..at + n], mlp.threshold as f64));
                    at += n;
                }
                Ok(out)
            }
        }
    }
}

/// Exactly `max(1, round(ratio·n))` kept positions drawn from `seed`.
pub fn random_keep_mask(n: usize, ratio: f64, seed: u64) -> Result<KeepMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("random discard ratio must lie in (0, 1], got {ratio}")));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n.max(1));
    let perm = rng::permutation(n, seed);
    KeepMask::from_indices(n, &perm[..k])
}

/// Threshold at which `mlp` keeps about `ratio` of the tokens of `samples`.
pub fn calibrate_threshold(vit: &Vit, mlp: &FilterMlp, samples: &[Sample], ratio: f64, mode: Parallelism) -> Result<f64> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio must lie in (0, 1], got {ratio}")));
    }
    let probs = par::map(mode, samples, |_, s| -> Result<Vec<f64>> { mlp.probabilities(&vit.embed(&s.image, s.id)?) });
    let mut all = Vec::new();
    for p in probs {
        all.extend(p?);
    }
    if all.is_empty() {
        return Err(Error::Config("no samples to calibrate against".into()));
    }
    all.sort_by(|a, b| b.total_cmp(a));
    let k = ((ratio * all.len() as f64).round() as usize).clamp(1, all.len());
    Ok(all[k - 1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub mask_mode: MaskMode,
    pub parallelism: Parallelism,
    pub chunk: usize,
    /// Re-fit a filter's threshold on the training images before every epoch
    /// (and once after the last) so it keeps this fraction of tokens.
    pub hold_keep: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::Attn,
            parallelism: Parallelism::Rayon,
            chunk: DEFAULT_CHUNK,
            hold_keep: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub lr: Vec<f64>,
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub kept_ratio: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub vit: Vit,
    pub selector: TokenSelector,
    pub log: TrainLog,
}

/// Plain cross-entropy training of the backbone on full sequences.
pub fn pretrain(vit: Vit, data: &Dataset, sched: &TrainSchedule, opts: &TrainOptions) -> Result<(Vit, TrainLog)> {
    let out = train(vit, TokenSelector::AllKeep, data, sched, opts)?;
    Ok((out.vit, out.log))
}

/// End-to-end training of backbone and selector on masked sequences.
pub fn finetune(
    vit: Vit,
    selector: TokenSelector,
    data: &Dataset,
    sched: &TrainSchedule,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train(vit, selector, data, sched, opts)
}

struct ChunkOut {
    vit_grads: Vec<Tensor>,
    filter_grads: Option<Vec<Tensor>>,
    loss: f64,
    correct: usize,
    kept: usize,
}

fn train(
    mut vit: Vit,
    mut selector: TokenSelector,
    data: &Dataset,
    sched: &TrainSchedule,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if data.num_classes < 2 {
        return Err(Error::Config(format!("training needs at least 2 classes, got {}", data.num_classes)));
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.num_classes > vit.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, vit.config.num_classes
        )));
    }
    if opts.chunk == 0 {
        return Err(Error::Config("gradient chunk must be at least 1".into()));
    }
    let patches = par::map(opts.parallelism, &data.samples, |_, s| vit.patchify(&s.image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer::new(sched.optimizer, sched.weight_decay);
    let mut filter_opt = Optimizer::new(sched.optimizer, sched.weight_decay);
    let n = vit.config.num_patches();
    let mut log = TrainLog::default();
    for epoch in 0..sched.epochs {
        hold_threshold(&vit, &mut selector, data, opts)?;
        let lr = sched.lr(epoch);
        let order = rng::permutation(data.len(), rng::derive(sched.seed, epoch as u64));
        let (mut loss, mut correct, mut kept) = (0.0f64, 0usize, 0usize);
        for (bi, batch) in order.chunks(sched.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(opts.chunk).collect();
            let outs = par::map(opts.parallelism, &chunks, |_, idx| {
                chunk_step(&vit, &selector, data, &patches, idx, batch.len(), epoch, opts.mask_mode)
            });
            let mut vg: Option<Vec<Tensor>> = None;
            let mut fg: Option<Vec<Tensor>> = None;
            for o in outs {
                let o = o.map_err(|e| match e {
                    Error::Numeric(m) => Error::Divergence(format!(
                        "{m} at epoch {epoch} batch {bi} (seed {}, config {:?})",
                        sched.seed, vit.config
                    )),
                    e => e,
                })?;
                loss += o.loss;
                correct += o.correct;
                kept += o.kept;
                accumulate(&mut vg, o.vit_grads);
                if let Some(g) = o.filter_grads {
                    accumulate(&mut fg, g);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss {loss} at epoch {epoch} batch {bi} (seed {}, config {:?})",
                    sched.seed, vit.config
                )));
            }
            opt.step(vit.params.leaves_mut(), &vg.expect("non-empty batch"), lr as f32)?;
            if let (Some(g), TokenSelector::Filter { mlp, .. }) = (fg, &mut selector) {
                filter_opt.step(mlp.params.leaves_mut(), &g, lr as f32)?;
            }
            let bad = vit.params.leaves().iter().any(|t| !t.all_finite());
            if bad {
                return Err(Error::Divergence(format!(
                    "non-finite weights at epoch {epoch} batch {bi} (seed {}, config {:?})",
                    sched.seed, vit.config
                )));
            }
        }
        log.lr.push(lr);
        log.loss.push(loss / data.len() as f64);
        log.accuracy.push(correct as f64 / data.len() as f64);
        log.kept_ratio.push(kept as f64 / (data.len() * n) as f64);
    }
    if sched.epochs > 0 {
        hold_threshold(&vit, &mut selector, data, opts)?;
    }
    Ok(TrainOutcome { vit, selector, log })
}

fn hold_threshold(vit: &Vit, selector: &mut TokenSelector, data: &Dataset, opts: &TrainOptions) -> Result<()> {
    if let (Some(r), TokenSelector::Filter { mlp, .. }) = (opts.hold_keep, selector) {
        mlp.threshold = calibrate_threshold(vit, mlp, &data.samples, r, opts.parallelism)? as f32;
    }
    Ok(())
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (a, g) in a.iter_mut().zip(&grads) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn chunk_step(
    vit: &Vit,
    selector: &TokenSelector,
    data: &Dataset,
    patches: &[Tensor],
    idx: &[usize],
    batch_len: usize,
    epoch: usize,
    mode: MaskMode,
) -> Result<ChunkOut> {
    let cfg = &vit.config;
    let n = cfg.num_patches();
    let b = idx.len();
    let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &patches[i]).collect();
    let mut tape = Tape::new();
    let p = bind_vit(&mut tape, &vit.params, true);
    let x = tape.constant(Tensor::vstack(&refs)?);
    let mut seq = embed_graph(&mut tape, &p, x, b, n)?;
    let rows = patch_rows(b, n);
    let mut filter_vars = None;
    let keep: Option<Vec<bool>> = match selector {
        TokenSelector::AllKeep => None,
        TokenSelector::RandomDiscard { ratio, seed } => {
            let s = rng::derive(*seed, epoch as u64 + 1);
            let mut bits = Vec::with_capacity(b * n);
            for &i in idx {
                bits.extend_from_slice(random_keep_mask(n, *ratio, rng::derive(s, data.samples[i].id))?.bits());
            }
            let ones = tape.constant(Tensor::full([b * n, 1], 1.0));
            seq = tape.gate_rows(seq, ones, &rows, &bits)?;
            Some(bits)
        }
        TokenSelector::Filter { mlp, trainable } => {
            let fp = mlp.params.map(|t| if *trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) });
            let desc = descriptor_graph(&mut tape, seq, b, n, mlp.use_global, mlp.include_class)?;
            let z = mlp_logits(&mut tape, &fp, desc)?;
            let probs: Vec<f64> = tape.value(z).data().iter().map(|&z| filter::sigmoid(z)).collect();
            let mut bits = Vec::with_capacity(b * n);
            for img in probs.chunks(n) {
                bits.extend_from_slice(filter::mask_from_probs(img, mlp.threshold as f64).bits());
            }
            let gate = if *trainable {
                tape.sigmoid(z)
            } else {
                let v = tape.value(z).data().iter().map(|&z| filter::sigmoid(z) as f32).collect();
                tape.constant(Tensor::new([b * n, 1], v)?)
            };
            seq = tape.gate_rows(seq, gate, &rows, &bits)?;
            if *trainable {
                filter_vars = Some(fp);
            }
            Some(bits)
        }
    };
    let key_keep: Option<Vec<bool>> = match (&keep, mode) {
        (Some(bits), MaskMode::Attn) => Some(
            bits.chunks(n)
                .flat_map(|img| std::iter::once(true).chain(img.iter().copied()))
                .collect(),
        ),
        _ => None,
    };
    let layout = SeqLayout::uniform(b, n + 1);
    let logits = encode_graph(&mut tape, &p, cfg, seq, &layout, key_keep.as_deref())?;
    let correct = {
        let lv = tape.value(logits);
        (0..b).filter(|&r| argmax(lv.row(r)) == labels[r]).count()
    };
    let mean = tape.cross_entropy(logits, &labels)?;
    let loss = tape.value(mean).item() as f64 * b as f64;
    let scaled = tape.scale(mean, b as f32 / batch_len as f32);
    tape.backward(scaled)?;
    let vit_grads = p
        .leaves()
        .iter()
        .map(|&&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect();
    let filter_grads = filter_vars.map(|fp| {
        fp.leaves()
            .iter()
            .map(|&&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
            .collect()
    });
    let kept = keep.map_or(b * n, |k| k.iter().filter(|&&x| x).count());
    Ok(ChunkOut {
        vit_grads,
        filter_grads,
        loss,
        correct,
        kept,
    })
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Rank of the true class (0 = top-1) with ties broken against it.
fn rank_of(logits: &[f32], label: usize) -> usize {
    let t = logits[label];
    logits.iter().enumerate().filter(|&(i, &v)| i != label && v >= t).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub image_id: u64,
    pub logits: Vec<f32>,
    pub prediction: usize,
    pub kept: Vec<usize>,
    pub num_tokens: usize,
}

impl Inference {
    pub fn keep_ratio(&self) -> f64 {
        self.kept.len() as f64 / self.num_tokens as f64
    }
}

/// How the selected tokens are hidden during inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferMode {
    /// Dropped tokens are removed and sequences packed at their own length.
    #[default]
    Drop,
    /// Full-length sequences with the given masking.
    Mask(MaskMode),
}

/// Selector runs once on the embedded tokens; the resulting kept set is
/// used for every block.
pub fn infer_batch(vit: &Vit, selector: &TokenSelector, images: &[(&Image, u64)], mode: InferMode) -> Result<Vec<Inference>> {
    let tokens = vit.embed_batch(images)?;
    let masks = selector.masks(&tokens)?;
    let logits = match mode {
        InferMode::Drop => {
            let items: Vec<(&TokenMatrix, &KeepMask)> = tokens.iter().zip(&masks).collect();
            vit.forward_reduced(&items)?
        }
        InferMode::Mask(mask_mode) => {
            let items: Vec<(&TokenMatrix, Option<&KeepMask>)> = tokens.iter().zip(&masks).map(|(t, m)| (t, Some(m))).collect();
            vit.forward_batch(
                &items,
                ForwardOptions {
                    mask_mode,
                    mask_pre_pos: false,
                },
            )?
        }
    };
    Ok(tokens
        .iter()
        .zip(masks)
        .zip(logits)
        .map(|((t, m), l)| Inference {
            image_id: t.image_id,
            prediction: argmax(&l),
            logits: l,
            kept: m.kept_indices(),
            num_tokens: m.len(),
        })
        .collect())
}

pub fn infer(vit: &Vit, selector: &TokenSelector, image: &Image) -> Result<Inference> {
    Ok(infer_batch(vit, selector, &[(image, 0)], InferMode::Drop)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub mode: InferMode,
    pub parallelism: Parallelism,
    /// Timed throughput pass; `None` skips it.
    pub throughput: Option<crate::bench::ThroughputOptions>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            mode: InferMode::Drop,
            parallelism: Parallelism::Rayon,
            throughput: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub selector: String,
    pub images: usize,
    pub top1: f64,
    pub top5: f64,
    pub kept_ratio: f64,
    pub mean_kept_tokens: f64,
    pub macs_full: u64,
    pub macs_filtered: u64,
    pub macs_filter_overhead: u64,
    pub params: usize,
    pub throughput: Option<f64>,
    pub threads: usize,
    pub batch_size: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "selector,images,top1,top5,kept_ratio,mean_kept_tokens,macs_full,macs_filtered,macs_filter_overhead,params,throughput,threads,batch_size";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.4},{},{},{},{},{},{},{}",
            self.selector,
            self.images,
            self.top1,
            self.top5,
            self.kept_ratio,
            self.mean_kept_tokens,
            self.macs_full,
            self.macs_filtered,
            self.macs_filter_overhead,
            self.params,
            self.throughput.map_or(String::new(), |t| format!("{t:.2}")),
            self.threads,
            self.batch_size
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = |m: u64| m as f64 / 1e6;
        writeln!(f, "selector        {}", self.selector)?;
        writeln!(f, "images          {}", self.images)?;
        writeln!(f, "top-1           {:.2}%", 100.0 * self.top1)?;
        writeln!(f, "top-5           {:.2}%", 100.0 * self.top5)?;
        writeln!(f, "kept ratio      {:.4} ({:.2} tokens)", self.kept_ratio, self.mean_kept_tokens)?;
        writeln!(f, "MACs full       {:.3}M", g(self.macs_full))?;
        writeln!(f, "MACs filtered   {:.3}M (+{:.3}M filter)", g(self.macs_filtered), g(self.macs_filter_overhead))?;
        writeln!(f, "params          {}", self.params)?;
        match self.throughput {
            Some(t) => writeln!(f, "throughput      {t:.1} img/s ({} threads, batch {})", self.threads, self.batch_size),
            None => writeln!(f, "throughput      not measured"),
        }
    }
}

pub fn predict(vit: &Vit, selector: &TokenSelector, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<Inference>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let batches: Vec<&[Sample]> = samples.chunks(opts.batch_size).collect();
    let parts = par::map(opts.parallelism, &batches, |_, b| {
        let imgs: Vec<(&Image, u64)> = b.iter().map(|s| (&s.image, s.id)).collect();
        infer_batch(vit, selector, &imgs, opts.mode)
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(vit: &Vit, selector: &TokenSelector, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let preds = predict(vit, selector, &data.samples, opts)?;
    let cfg = &vit.config;
    let k5 = 5.min(cfg.num_classes);
    let (mut top1, mut top5, mut kept) = (0usize, 0usize, 0usize);
    for (p, s) in preds.iter().zip(&data.samples) {
        let r = rank_of(&p.logits, s.label);
        top1 += usize::from(r == 0);
        top5 += usize::from(r < k5);
        kept += p.kept.len();
    }
    let m = data.len() as f64;
    let mean_kept = kept as f64 / m;
    let full = count_flops(cfg, cfg.seq_len())?;
    let filtered = count_flops(cfg, 1 + (mean_kept.round() as usize).max(1))?;
    let overhead = selector.filter().map_or(0, |f| filter_macs(cfg, f.use_global));
    let throughput = match &opts.throughput {
        Some(t) => {
            let images: Vec<&Image> = data.samples.iter().map(|s| &s.image).collect();
            Some(crate::bench::measure_throughput(vit, selector, &images, t)?)
        }
        None => None,
    };
    Ok(EvalReport {
        selector: selector.name().into(),
        images: data.len(),
        top1: top1 as f64 / m,
        top5: top5 as f64 / m,
        kept_ratio: mean_kept / cfg.num_patches() as f64,
        mean_kept_tokens: mean_kept,
        macs_full: full.total,
        macs_filtered: filtered.total,
        macs_filter_overhead: overhead,
        params: vit.num_params() + selector.filter().map_or(0, |f| f.num_params()),
        threads: throughput.as_ref().map_or_else(par::current_threads, |t| t.threads),
        batch_size: throughput.as_ref().map_or(opts.batch_size, |t| t.batch_size),
        throughput: throughput.map(|t| t.images_per_sec),
    })
}

/// Per patch position, the fraction of `samples` in which it is kept.
pub fn mask_average(vit: &Vit, selector: &TokenSelector, samples: &[Sample], opts: &EvalOptions) -> Result<Grid> {
    let preds = predict(vit, selector, samples, opts)?;
    let n = vit.config.num_patches();
    let mut counts = vec![0usize; n];
    for p in &preds {
        for &i in &p.kept {
            counts[i] += 1;
        }
    }
    let m = preds.len().max(1) as f64;
    spatial_grid(counts.iter().enumerate().map(|(i, &c)| (i, c as f64 / m)), vit.config.grid_side())
}

/// Mean keep probability over patches marked relevant and over the rest,
/// for samples that carry a relevance grid.
pub fn relevance_split(vit: &Vit, mlp: &FilterMlp, samples: &[Sample], mode: Parallelism) -> Result<(f64, f64)> {
    let per = par::map(mode, samples, |_, s| -> Result<Option<(f64, usize, f64, usize)>> {
        let Some(rel) = &s.relevance else { return Ok(None) };
        let probs = mlp.probabilities(&vit.embed(&s.image, s.id)?)?;
        if rel.len() != probs.len() {
            return Err(Error::dims("relevance grid", &[probs.len()], &[rel.len()]));
        }
        let mut acc = (0.0, 0, 0.0, 0);
        for (&r, &p) in rel.iter().zip(&probs) {
            if r {
                acc.0 += p;
                acc.1 += 1;
            } else {
                acc.2 += p;
                acc.3 += 1;
            }
        }
        Ok(Some(acc))
    });
    let mut tot = (0.0, 0, 0.0, 0);
    for a in per.into_iter().filter_map(|r| r.transpose()) {
        let a = a?;
        tot = (tot.0 + a.0, tot.1 + a.1, tot.2 + a.2, tot.3 + a.3);
    }
    if tot.1 == 0 || tot.3 == 0 {
        return Err(Error::Config("no samples with both relevant and background patches".into()));
    }
    Ok((tot.0 / tot.1 as f64, tot.2 / tot.3 as f64))
}

/// A backbone and, after filter training, its token filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub vit: Vit,
    pub filter: Option<(FilterMlp, FilterMeta)>,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut m = self.vit.to_tensors();
        if let Some((f, meta)) = &self.filter {
            m.extend(f.to_tensors(meta));
        }
        save_checkpoint(path, &m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = load_checkpoint(path)?;
        let vit = Vit::from_tensors(&m)?;
        let filter = if m.contains_key("filter.meta") {
            let (f, meta) = FilterMlp::from_tensors(&m)?;
            if f.widths()[0] != if f.use_global { 2 } else { 1 } * vit.config.dim {
                return Err(Error::Config(format!(
                    "filter input width {} does not fit model dim {}",
                    f.widths()[0],
                    vit.config.dim
                )));
            }
            Some((f, meta))
        } else {
            None
        };
        Ok(Self { vit, filter })
    }
}

/// Runs `f` and also returns its wall-clock seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}
