//! Per-token delta loss against a frozen backbone, and pseudo-labels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::stats::{self, Grid, Histogram};
use crate::tensor::cross_entropy_value;
use crate::vit::{ForwardOptions, KeepMask, TokenMatrix, Vit};

/// Default ρ for desk-scale models.
pub const DEFAULT_RHO: f64 = 0.002;

/// How `dl` is formed from the base loss `L` and the masked loss `L_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DlSign {
    /// `dl = L_i − L`: large when hiding the token hurts.
    #[default]
    Importance,
    /// `dl = L − L_i`, keep when it exceeds ρ.
    Eq7Literal,
}

impl DlSign {
    pub fn apply(self, base: f64, masked: f64) -> f64 {
        match self {
            DlSign::Importance => masked - base,
            DlSign::Eq7Literal => base - masked,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DlSign::Importance => "importance",
            DlSign::Eq7Literal => "eq7-literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "importance" => Ok(DlSign::Importance),
            "eq7-literal" => Ok(DlSign::Eq7Literal),
            other => Err(Error::Config(format!("unknown dl sign {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLossRecord {
    pub image_id: u64,
    pub token_index: usize,
    pub base_loss: f64,
    pub masked_loss: f64,
    pub dl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: u64,
    pub token_index: usize,
    pub label: u8,
}

fn loss(logits: &[f32], label: usize, image_id: u64) -> Result<f64> {
    let l = cross_entropy_value(logits, label)
        .map_err(|e| Error::Numeric(format!("image {image_id}: {e}")))?;
    if !l.is_finite() {
        return Err(Error::Numeric(format!("image {image_id}: loss is {l}")));
    }
    Ok(l.max(0.0))
}

fn variant_masks(n: usize, base: Option<&KeepMask>) -> Result<Vec<KeepMask>> {
    (0..n)
        .map(|i| {
            let mut m = base.cloned().unwrap_or_else(|| KeepMask::all(n));
            m.set(i, false)?;
            Ok(m)
        })
        .collect()
}

fn records(
    tokens: &TokenMatrix,
    sign: DlSign,
    base_loss: f64,
    masked: impl Iterator<Item = f64>,
) -> Vec<DeltaLossRecord> {
    masked
        .enumerate()
        .map(|(i, masked_loss)| DeltaLossRecord {
            image_id: tokens.image_id,
            token_index: i,
            base_loss,
            masked_loss,
            dl: sign.apply(base_loss, masked_loss),
        })
        .collect()
}

/// Scores every patch token of one image: the base sequence and the `N`
/// single-token-masked variants go through the backbone as one batch of
/// `N + 1` sequences, `chunk` sequences at a time (0 = all at once).
///
/// With `base` given, tokens it already hides get `dl = 0` exactly.
pub fn score_image(
    vit: &Vit,
    tokens: &TokenMatrix,
    label: usize,
    sign: DlSign,
    base: Option<&KeepMask>,
    chunk: usize,
) -> Result<Vec<DeltaLossRecord>> {
    let n = tokens.num_tokens();
    let masks = variant_masks(n, base)?;
    let mut items: Vec<(&TokenMatrix, Option<&KeepMask>)> = Vec::with_capacity(n + 1);
    items.push((tokens, base));
    let todo: Vec<usize> = (0..n).filter(|&i| base.is_none_or(|b| b.is_kept(i))).collect();
    for &i in &todo {
        if masks[i].kept_count() == 0 {
            return Err(Error::Contract(format!(
                "image {}: masking token {i} would leave no tokens",
                tokens.image_id
            )));
        }
        items.push((tokens, Some(&masks[i])));
    }
    let step = if chunk == 0 { items.len() } else { chunk };
    let mut logits = Vec::with_capacity(items.len());
    for part in items.chunks(step) {
        logits.extend(vit.forward_batch(part, ForwardOptions::default())?);
    }
    let base_loss = loss(&logits[0], label, tokens.image_id)?;
    let mut masked = vec![base_loss; n];
    for (k, &i) in todo.iter().enumerate() {
        masked[i] = loss(&logits[1 + k], label, tokens.image_id)?;
    }
    Ok(records(tokens, sign, base_loss, masked.into_iter()))
}

/// The same quantities with one forward call per sequence.
pub fn score_image_naive(vit: &Vit, tokens: &TokenMatrix, label: usize, sign: DlSign) -> Result<Vec<DeltaLossRecord>> {
    let base_loss = loss(&vit.forward(tokens, None)?, label, tokens.image_id)?;
    let masked = (0..tokens.num_tokens())
        .map(|i| {
            let v = tokens.masked_variant(i)?;
            loss(&vit.forward(v.tokens, Some(&v.mask))?, label, tokens.image_id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records(tokens, sign, base_loss, masked.into_iter()))
}

/// Scores every sample, in parallel across images. Output is ordered by
/// `(image_id, token_index)`.
pub fn score_dataset(vit: &Vit, samples: &[Sample], sign: DlSign, mode: Parallelism) -> Result<Vec<DeltaLossRecord>> {
    let parts = par::map(mode, samples, |_, s| {
        let t = vit.embed(&s.image, s.id)?;
        score_image(vit, &t, s.label, sign, None, 0)
    });
    let mut out = Vec::with_capacity(samples.len() * vit.config.num_patches());
    for p in parts {
        out.extend(p?);
    }
    out.sort_by_key(|r| (r.image_id, r.token_index));
    Ok(out)
}

/// `label = 1` iff `dl > rho`.
pub fn pseudo_label(records: &[DeltaLossRecord], rho: f64) -> Result<Vec<PseudoLabel>> {
    if rho.is_nan() {
        return Err(Error::Config("rho is NaN".into()));
    }
    Ok(records
        .iter()
        .map(|r| PseudoLabel {
            image_id: r.image_id,
            token_index: r.token_index,
            label: (r.dl > rho) as u8,
        })
        .collect())
}

pub fn keep_fraction(labels: &[PseudoLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|l| l.label == 1).count() as f64 / labels.len() as f64
}

/// ρ that labels roughly `target` of the tokens as keep.
pub fn rho_for_keep_ratio(records: &[DeltaLossRecord], target: f64) -> Result<f64> {
    let dl: Vec<f64> = records.iter().map(|r| r.dl).collect();
    stats::quantile(&dl, 1.0 - target.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DlStatistics {
    pub histogram: Histogram,
    /// Mean dl per patch position.
    pub grid: Grid,
}

pub fn dl_statistics(records: &[DeltaLossRecord], grid_side: usize, bins: usize, sigmas: f64) -> Result<DlStatistics> {
    if records.is_empty() {
        return Err(Error::Contract("no delta-loss records".into()));
    }
    let dl: Vec<f64> = records.iter().map(|r| r.dl).collect();
    Ok(DlStatistics {
        histogram: stats::default_histogram(&dl, bins, sigmas)?,
        grid: stats::spatial_grid(records.iter().map(|r| (r.token_index, r.dl)), grid_side)?,
    })
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_records(path: &Path, records: &[DeltaLossRecord], labels: Option<&[PseudoLabel]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != records.len() {
            return Err(Error::dims("labels", &[records.len()], &[l.len()]));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "image_id,token_index,base_loss,masked_loss,dl,label").map_err(io)?;
    for (k, r) in records.iter().enumerate() {
        let label = labels.map(|l| l[k].label.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.image_id,
            r.token_index,
            fmt17(r.base_loss),
            fmt17(r.masked_loss),
            fmt17(r.dl),
            label
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Deserialize)]
struct Row {
    image_id: u64,
    token_index: usize,
    base_loss: f64,
    masked_loss: f64,
    dl: f64,
    label: Option<u8>,
}

/// Reads records and, when every row has one, the label column.
pub fn read_records(path: &Path) -> Result<(Vec<DeltaLossRecord>, Option<Vec<PseudoLabel>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path.display().to_string(), format!("{other:?}")),
    })?;
    let mut recs = Vec::new();
    let mut labels = Vec::new();
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let r = row.map_err(|e| Error::data(format!("{}:{}", path.display(), line + 2), e.to_string()))?;
        recs.push(DeltaLossRecord {
            image_id: r.image_id,
            token_index: r.token_index,
            base_loss: r.base_loss,
            masked_loss: r.masked_loss,
            dl: r.dl,
        });
        labels.push(r.label.map(|label| PseudoLabel {
            image_id: r.image_id,
            token_index: r.token_index,
            label,
        }));
    }
    let labels = labels.into_iter().collect::<Option<Vec<_>>>().filter(|l| !l.is_empty());
    Ok((recs, labels))
}
