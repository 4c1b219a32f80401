//! Wall-clock inference throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::pipeline::{infer_batch, InferMode, TokenSelector};
use crate::stats::Moments;
use crate::vit::Vit;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputOptions {
    pub batch_size: usize,
    /// Untimed batches before measuring.
    pub warmup: usize,
    /// Timed passes over the image set; the median is reported.
    pub repeats: usize,
    /// Worker threads (0 = all available).
    pub threads: usize,
    pub parallelism: Parallelism,
}

impl Default for ThroughputOptions {
    fn default() -> Self {
        Self {
            batch_size: crate::pipeline::DEFAULT_BATCH,
            warmup: crate::pipeline::DEFAULT_WARMUP,
            repeats: 5,
            threads: 0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub images_per_sec: f64,
    pub runs: Vec<f64>,
    pub threads: usize,
    pub batch_size: usize,
    /// Per-image keep ratios over the measured set.
    pub kept_ratio: Moments,
}

impl Throughput {
    /// `(max − min) / median` over the timed runs.
    pub fn spread(&self) -> f64 {
        let lo = self.runs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.runs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / self.images_per_sec
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Images per second of the full inference path (embed, select, reduced
/// forward) over `images`, batched and run in a pool of the requested size.
pub fn measure_throughput(vit: &Vit, selector: &TokenSelector, images: &[&Image], opts: &ThroughputOptions) -> Result<Throughput> {
    if images.is_empty() || opts.batch_size == 0 || opts.repeats == 0 {
        return Err(Error::Config("throughput needs images, a batch size and at least one run".into()));
    }
    par::with_threads(opts.threads, || {
        let tagged: Vec<(&Image, u64)> = images.iter().enumerate().map(|(i, &im)| (im, i as u64)).collect();
        let batches: Vec<&[(&Image, u64)]> = tagged.chunks(opts.batch_size).collect();
        let run = |b: &[(&Image, u64)]| infer_batch(vit, selector, b, InferMode::Drop).map(|r| r.len());
        let mut ratios = Vec::with_capacity(images.len());
        for b in &batches {
            ratios.extend(infer_batch(vit, selector, b, InferMode::Drop)?.iter().map(|i| i.keep_ratio()));
        }
        for k in 0..opts.warmup {
            run(batches[k % batches.len()])?;
        }
        let mut runs = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let t = Instant::now();
            let done = par::map(opts.parallelism, &batches, |_, b| run(b));
            let mut count = 0;
            for d in done {
                count += d?;
            }
            runs.push(count as f64 / t.elapsed().as_secs_f64().max(1e-9));
        }
        Ok(Throughput {
            images_per_sec: median(&runs),
            runs,
            threads: par::current_threads(),
            batch_size: opts.batch_size,
            kept_ratio: crate::stats::moments(&ratios)?,
        })
    })
}
