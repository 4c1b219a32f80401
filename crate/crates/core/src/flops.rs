//! Analytic cost model. All counts are multiply-accumulates (one
//! multiply-add = 1 MAC); raw FLOPs would be about twice as large.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vit::ModelConfig;

pub const CONVENTION: &str = "MACs (one multiply-add counts 1)";

/// Width of the filter's second hidden layer.
pub const FILTER_HIDDEN2: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockMacs {
    pub qkv: u64,
    pub scores: u64,
    pub weighted_values: u64,
    pub out_proj: u64,
    pub mlp: u64,
}

impl BlockMacs {
    pub fn at(cfg: &ModelConfig, s: usize) -> Self {
        let (s, d, h) = (s as u64, cfg.dim as u64, cfg.hidden_dim() as u64);
        Self {
            qkv: 3 * s * d * d,
            scores: s * s * d,
            weighted_values: s * s * d,
            out_proj: s * d * d,
            mlp: 2 * s * d * h,
        }
    }

    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.weighted_values + self.out_proj + self.mlp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub config: ModelConfig,
    /// Sequence length `S` (class token included).
    pub kept_tokens: usize,
    pub per_block: BlockMacs,
    pub per_block_full: BlockMacs,
    /// Patch projection, always over all `N` patches.
    pub embed: u64,
    pub head: u64,
    pub total: u64,
    pub total_full: u64,
    pub params: usize,
}

pub fn embed_macs(cfg: &ModelConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_dim() * cfg.dim) as u64
}

pub fn head_macs(cfg: &ModelConfig) -> u64 {
    (cfg.dim * cfg.num_classes) as u64
}

/// MACs of one forward pass with `kept_tokens` rows (`1 ≤ S ≤ N + 1`).
pub fn count_flops(cfg: &ModelConfig, kept_tokens: usize) -> Result<FlopsReport> {
    let full = cfg.seq_len();
    if kept_tokens == 0 || kept_tokens > full {
        return Err(Error::Contract(format!("kept_tokens {kept_tokens} outside [1, {full}]")));
    }
    let per_block = BlockMacs::at(cfg, kept_tokens);
    let per_block_full = BlockMacs::at(cfg, full);
    let fixed = embed_macs(cfg) + head_macs(cfg);
    let depth = cfg.depth as u64;
    Ok(FlopsReport {
        config: cfg.clone(),
        kept_tokens,
        per_block,
        per_block_full,
        embed: embed_macs(cfg),
        head: head_macs(cfg),
        total: fixed + depth * per_block.total(),
        total_full: fixed + depth * per_block_full.total(),
        params: params_count(cfg),
    })
}

/// Same polynomial as [`count_flops`] with a real-valued sequence length.
pub fn macs_continuous(cfg: &ModelConfig, s: f64) -> f64 {
    let (d, h) = (cfg.dim as f64, cfg.hidden_dim() as f64);
    let block = 4.0 * s * d * d + 2.0 * s * s * d + 2.0 * s * d * h;
    (embed_macs(cfg) + head_macs(cfg)) as f64 + cfg.depth as f64 * block
}

/// MACs when block `l` sees `lens[l]` rows.
pub fn macs_per_layer(cfg: &ModelConfig, lens: &[usize]) -> u64 {
    embed_macs(cfg) + head_macs(cfg) + lens.iter().map(|&s| BlockMacs::at(cfg, s).total()).sum::<u64>()
}

/// Sequence length for a keep ratio: `⌈r·N⌉ + 1`, at least 2.
pub fn seq_len_for_ratio(cfg: &ModelConfig, ratio: f64) -> usize {
    let n = cfg.num_patches();
    let kept = ((ratio * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    kept + 1
}

/// Learnable scalars in the backbone.
pub fn params_count(cfg: &ModelConfig) -> usize {
    let (d, h, c) = (cfg.dim, cfg.hidden_dim(), cfg.num_classes);
    let embed = cfg.patch_dim() * d + d + d + cfg.seq_len() * d;
    let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
    embed + cfg.depth * block + 2 * d + d * c + c
}

/// Learnable scalars in the token filter `[in → 2d → 100 → 1]`.
pub fn filter_params_count(dim: usize, use_global: bool) -> usize {
    let input = if use_global { 2 * dim } else { dim };
    let h1 = 2 * dim;
    input * h1 + h1 + h1 * FILTER_HIDDEN2 + FILTER_HIDDEN2 + FILTER_HIDDEN2 + 1
}

/// Filter cost for one image (all `N` tokens).
pub fn filter_macs(cfg: &ModelConfig, use_global: bool) -> u64 {
    let d = cfg.dim;
    let input = if use_global { 2 * d } else { d };
    let per_token = input * 2 * d + 2 * d * FILTER_HIDDEN2 + FILTER_HIDDEN2;
    let pool = if use_global { cfg.num_patches() * d } else { 0 };
    (cfg.num_patches() * per_token + pool) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seq_len: usize,
    pub macs: u64,
    /// Full MACs over filtered MACs.
    pub predicted_speedup: f64,
}

pub fn sweep_keep_ratio(cfg: &ModelConfig, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    let full = count_flops(cfg, cfg.seq_len())?.total;
    ratios
        .iter()
        .map(|&r| {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("keep ratio {r} outside (0, 1]")));
            }
            let s = seq_len_for_ratio(cfg, r);
            let macs = count_flops(cfg, s)?.total;
            Ok(SweepRow {
                ratio: r,
                seq_len: s,
                macs,
                predicted_speedup: full as f64 / macs as f64,
            })
        })
        .collect()
}

/// Keep ratio whose continuous cost `macs_continuous(r·N + 1)` equals
/// `target`, by bisection. `None` when the target is out of reach.
pub fn ratio_for_macs(cfg: &ModelConfig, target: f64) -> Option<f64> {
    let n = cfg.num_patches() as f64;
    let f = |r: f64| macs_continuous(cfg, r * n + 1.0) - target;
    let (mut lo, mut hi) = (0.0, 1.0);
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleComparison {
    pub one_pass_ratio: f64,
    pub one_pass_macs: u64,
    pub gradual_ratios: Vec<f64>,
    pub gradual_macs: u64,
    /// One-pass keep ratio with the same cost as the gradual schedule.
    pub equivalent_one_pass_ratio: Option<f64>,
}

/// One-pass filtering at `one_pass_ratio` against a schedule giving the keep
/// ratio of every block.
pub fn compare_schedules(cfg: &ModelConfig, one_pass_ratio: f64, gradual: &[f64]) -> Result<ScheduleComparison> {
    if gradual.len() != cfg.depth {
        return Err(Error::Config(format!(
            "gradual schedule has {} entries for {} blocks",
            gradual.len(),
            cfg.depth
        )));
    }
    if let Some(r) = gradual.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("keep ratio {r} outside (0, 1]")));
    }
    let s = seq_len_for_ratio(cfg, one_pass_ratio);
    let one_pass_macs = macs_per_layer(cfg, &vec![s; cfg.depth]);
    let lens: Vec<usize> = gradual.iter().map(|&r| seq_len_for_ratio(cfg, r)).collect();
    let gradual_macs = macs_per_layer(cfg, &lens);
    Ok(ScheduleComparison {
        one_pass_ratio,
        one_pass_macs,
        gradual_ratios: gradual.to_vec(),
        gradual_macs,
        equivalent_one_pass_ratio: ratio_for_macs(cfg, gradual_macs as f64),
    })
}

/// Per-block ratios of a 12-block model that keeps everything for blocks
/// 0-3 and then multiplies by 0.7 at blocks 4, 7 and 10.
pub fn staged_schedule(depth: usize) -> Vec<f64> {
    (0..depth)
        .map(|l| match l {
            0..=3 => 1.0,
            4..=6 => 0.7,
            7..=9 => 0.49,
            _ => 0.343,
        })
        .collect()
}
