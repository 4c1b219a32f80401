//! The token filter: a small MLP scoring each token from its own embedding
//! and the image's mean token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, TensorMap};
use crate::dl::{DlSign, PseudoLabel};
use crate::error::{Error, Result};
use crate::flops::FILTER_HIDDEN2;
use crate::optim::{Optimizer, OptimizerKind};
use crate::par::{self, Parallelism};
use crate::rng;
use crate::tensor::{SeqLayout, Tape, Tensor, Var};
use crate::vit::{LinearP, MlpParams, TokenMatrix, Vit};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
/// Fraction of tokens kept when nothing clears the threshold.
pub const FLOOR_FRACTION: f64 = 0.05;

/// Mean of the patch rows, optionally counting the class token as well.
pub fn global_feature(tokens: &TokenMatrix, include_class: bool) -> Vec<f32> {
    let d = tokens.dim();
    let mut sum = vec![0.0f64; d];
    let mut rows: Vec<&[f32]> = (0..tokens.num_tokens()).map(|i| tokens.patch_tokens.row(i)).collect();
    if include_class {
        rows.push(tokens.class_token.data());
    }
    for r in &rows {
        for (s, &v) in sum.iter_mut().zip(r.iter()) {
            *s += v as f64;
        }
    }
    let n = rows.len().max(1) as f64;
    sum.into_iter().map(|s| (s / n) as f32).collect()
}

/// `[N × 2d]` rows `[x_i ‖ x_global]`, or the bare `[N × d]` tokens.
pub fn build_descriptors(tokens: &TokenMatrix, use_global: bool, include_class: bool) -> Tensor {
    if !use_global {
        return tokens.patch_tokens.clone();
    }
    let g = global_feature(tokens, include_class);
    let (n, d) = (tokens.num_tokens(), tokens.dim());
    let mut out = Vec::with_capacity(n * 2 * d);
    for i in 0..n {
        out.extend_from_slice(tokens.patch_tokens.row(i));
        out.extend_from_slice(&g);
    }
    Tensor::new([n, 2 * d], out).expect("descriptor shape")
}

/// Descriptors on a tape from packed sequences `[B·(N+1) × d]` (class token
/// first in each), so gradients reach the token embeddings.
pub fn descriptor_graph(
    tape: &mut Tape<f32>,
    seq: Var,
    batch: usize,
    n: usize,
    use_global: bool,
    include_class: bool,
) -> Result<Var> {
    let patch_rows = crate::vit::patch_rows(batch, n);
    let patches = tape.gather_rows(seq, &patch_rows)?;
    if !use_global {
        return Ok(patches);
    }
    let global = if include_class {
        tape.group_mean_rows(seq, &SeqLayout::uniform(batch, n + 1))?
    } else {
        tape.group_mean_rows(patches, &SeqLayout::uniform(batch, n))?
    };
    let rep: Vec<usize> = (0..batch * n).map(|r| r / n).collect();
    let rep = tape.gather_rows(global, &rep)?;
    tape.concat_cols(patches, rep)
}

/// Pre-sigmoid scores `[rows × 1]`.
pub fn mlp_logits(tape: &mut Tape<f32>, p: &MlpParams<Var>, desc: Var) -> Result<Var> {
    let h = tape.linear(desc, p.l1.w, Some(p.l1.b))?;
    let h = tape.relu(h);
    let h = tape.linear(h, p.l2.w, Some(p.l2.b))?;
    let h = tape.relu(h);
    tape.linear(h, p.l3.w, Some(p.l3.b))
}

pub fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-(z as f64)).exp())
}

/// Keep bits `p ≥ threshold`; if none survive, the `⌈5%·N⌉` most probable
/// tokens are kept (lower index first on ties).
pub fn mask_from_probs(probs: &[f64], threshold: f64) -> crate::vit::KeepMask {
    let mut keep: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    if !probs.is_empty() && !keep.iter().any(|&k| k) {
        let k = ((FLOOR_FRACTION * probs.len() as f64).ceil() as usize).max(1);
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        for &i in order.iter().take(k) {
            keep[i] = true;
        }
    }
    crate::vit::KeepMask::from_bools(keep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterMlp {
    pub params: MlpParams<Tensor>,
    pub use_global: bool,
    /// Count the class token in the global mean.
    pub include_class: bool,
    pub threshold: f32,
}

fn he(r: &mut rng::Rng, fan_in: usize, fan_out: usize) -> LinearP<Tensor> {
    let std = (2.0 / fan_in as f32).sqrt();
    LinearP {
        w: Tensor::from_fn([fan_in, fan_out], |_| std * rng::normal(r)),
        b: Tensor::zeros([fan_out]),
    }
}

impl FilterMlp {
    /// He-initialised filter for tokens of width `dim`:
    /// `[2d or d] → 2d → 100 → 1`.
    pub fn init(dim: usize, use_global: bool, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let input = if use_global { 2 * dim } else { dim };
        Self {
            params: MlpParams {
                l1: he(&mut r, input, 2 * dim),
                l2: he(&mut r, 2 * dim, FILTER_HIDDEN2),
                l3: he(&mut r, FILTER_HIDDEN2, 1),
            },
            use_global,
            include_class: false,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Zeroes the output layer so every probability starts at 0.5.
    pub fn zero_output_layer(&mut self) {
        self.params.l3.w = Tensor::zeros(self.params.l3.w.shape().to_vec());
        self.params.l3.b = Tensor::zeros([1]);
    }

    pub fn widths(&self) -> [usize; 4] {
        let p = &self.params;
        [p.l1.w.rows(), p.l1.w.cols(), p.l2.w.cols(), p.l3.w.cols()]
    }

    pub fn num_params(&self) -> usize {
        self.params.leaves().iter().map(|t| t.len()).sum()
    }

    /// Keep probabilities for a descriptor matrix.
    pub fn probabilities_for(&self, desc: &Tensor) -> Result<Vec<f64>> {
        if desc.cols() != self.widths()[0] {
            return Err(Error::dims("filter input", desc.shape(), &[self.widths()[0]]));
        }
        let mut tape = Tape::no_grad();
        let p = self.params.map(|t| tape.constant(t.clone()));
        let x = tape.constant(desc.clone());
        let z = mlp_logits(&mut tape, &p, x)?;
        Ok(tape.value(z).data().iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn probabilities(&self, tokens: &TokenMatrix) -> Result<Vec<f64>> {
        self.probabilities_for(&build_descriptors(tokens, self.use_global, self.include_class))
    }

    pub fn predict_mask(&self, tokens: &TokenMatrix, threshold: f64) -> Result<crate::vit::KeepMask> {
        Ok(mask_from_probs(&self.probabilities(tokens)?, threshold))
    }

    pub fn to_tensors(&self, meta: &FilterMeta) -> TensorMap {
        let mut m: TensorMap = self.params.named().into_iter().map(|(k, v)| (k, v.clone())).collect();
        m.insert("filter.meta".into(), meta.to_tensor());
        m
    }

    pub fn from_tensors(map: &TensorMap) -> Result<(Self, FilterMeta)> {
        let meta = FilterMeta::from_tensor(
            map.get("filter.meta")
                .ok_or_else(|| Error::Config("checkpoint has no filter.meta".into()))?,
        )?;
        let mut params = MlpParams {
            l1: LinearP { w: Tensor::scalar(0.0), b: Tensor::scalar(0.0) },
            l2: LinearP { w: Tensor::scalar(0.0), b: Tensor::scalar(0.0) },
            l3: LinearP { w: Tensor::scalar(0.0), b: Tensor::scalar(0.0) },
        };
        for (name, slot) in params.named_mut() {
            *slot = map
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint is missing {name}")))?;
        }
        let f = Self {
            params,
            use_global: meta.use_global,
            include_class: meta.include_class,
            threshold: meta.threshold,
        };
        let [i, h1, h2, o] = f.widths();
        if f.params.l2.w.rows() != h1 || f.params.l3.w.rows() != h2 || o != 1 || i == 0 {
            return Err(Error::Config("filter layer shapes do not chain".into()));
        }
        Ok((f, meta))
    }
}

/// Settings stored next to the filter weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterMeta {
    pub use_global: bool,
    pub threshold: f32,
    pub dl_sign: DlSign,
    pub rho: f64,
    pub include_class: bool,
}

impl FilterMeta {
    fn to_tensor(self) -> Tensor {
        let sign = match self.dl_sign {
            DlSign::Importance => 0.0,
            DlSign::Eq7Literal => 1.0,
        };
        Tensor::new(
            [5],
            vec![self.use_global as u8 as f32, self.threshold, sign, self.rho as f32, self.include_class as u8 as f32],
        )
        .expect("meta shape")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() < 4 {
            return Err(Error::Config("filter.meta is too short".into()));
        }
        Ok(Self {
            use_global: v[0] != 0.0,
            threshold: v[1],
            dl_sign: if v[2] != 0.0 { DlSign::Eq7Literal } else { DlSign::Importance },
            rho: v[3] as f64,
            include_class: v.get(4).is_some_and(|&x| x != 0.0),
        })
    }
}

/// Per-image descriptor matrices and their 0/1 targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterCorpus {
    pub image_ids: Vec<u64>,
    pub descriptors: Vec<Tensor>,
    pub targets: Vec<Vec<f32>>,
}

impl FilterCorpus {
    /// Embeds every sample with the frozen backbone and attaches its labels.
    pub fn build(
        vit: &Vit,
        samples: &[Sample],
        labels: &[PseudoLabel],
        use_global: bool,
        include_class: bool,
        mode: Parallelism,
    ) -> Result<Self> {
        let n = vit.config.num_patches();
        let mut by_image: HashMap<u64, Vec<f32>> = HashMap::new();
        for l in labels {
            let slot = by_image.entry(l.image_id).or_insert_with(|| vec![f32::NAN; n]);
            if l.token_index >= n {
                return Err(Error::Index {
                    what: "labelled token",
                    index: l.token_index,
                    len: n,
                });
            }
            slot[l.token_index] = l.label as f32;
        }
        let descs = par::map(mode, samples, |_, s| {
            let t = vit.embed(&s.image, s.id)?;
            Ok::<_, Error>(build_descriptors(&t, use_global, include_class))
        });
        let mut corpus = FilterCorpus::default();
        for (s, d) in samples.iter().zip(descs) {
            let d: Tensor = d?;
            let t = by_image
                .remove(&s.id)
                .ok_or_else(|| Error::data(format!("image {}", s.id), "no pseudo-labels"))?;
            if t.iter().any(|v| v.is_nan()) {
                return Err(Error::data(format!("image {}", s.id), "some tokens have no pseudo-label"));
            }
            corpus.image_ids.push(s.id);
            corpus.descriptors.push(d);
            corpus.targets.push(t);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        let (mut pos, mut all) = (0usize, 0usize);
        for t in &self.targets {
            pos += t.iter().filter(|&&v| v > 0.5).count();
            all += t.len();
        }
        if all == 0 {
            0.0
        } else {
            pos as f64 / all as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Weight on positive targets; `None` means 1.
    pub pos_weight: Option<f32>,
    pub seed: u64,
}

impl Default for FilterTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-4,
            max_epochs: 200,
            patience: 5,
            min_delta: 1e-4,
            pos_weight: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FilterTrainLog {
    /// Mean per-image BCE of each epoch.
    pub epoch_loss: Vec<f64>,
    pub stopped_early: bool,
}

/// Plain SGD, one step per image on the mean BCE over its tokens, images in
/// a fresh seeded order every epoch.
pub fn train_filter(
    corpus: &FilterCorpus,
    mut mlp: FilterMlp,
    cfg: &FilterTrainConfig,
) -> Result<(FilterMlp, FilterTrainLog)> {
    let frac = corpus.positive_fraction();
    if corpus.is_empty() || frac == 0.0 || frac == 1.0 {
        return Err(Error::Training(format!(
            "pseudo-labels are all {}; adjust rho so both classes occur",
            if frac == 1.0 { "keep" } else { "drop" }
        )));
    }
    let width = mlp.widths()[0];
    if let Some(d) = corpus.descriptors.iter().find(|d| d.cols() != width) {
        return Err(Error::dims("filter input", d.shape(), &[width]));
    }
    let mut opt = Optimizer::new(OptimizerKind::sgd(0.0), cfg.weight_decay);
    let pw = cfg.pos_weight.unwrap_or(1.0);
    let mut log = FilterTrainLog::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let order = rng::permutation(corpus.len(), rng::derive(cfg.seed, epoch as u64));
        let mut total = 0.0f64;
        for &k in &order {
            let mut tape = Tape::new();
            let p = mlp.params.map(|t| tape.leaf(t.clone()));
            let x = tape.constant(corpus.descriptors[k].clone());
            let z = mlp_logits(&mut tape, &p, x)?;
            let loss = tape.bce_with_logits(z, &corpus.targets[k], pw)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("filter loss {lv} at epoch {epoch}")));
            }
            total += lv;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = p
                .leaves()
                .iter()
                .map(|&&v| tape.take_grad(v).expect("leaf grad"))
                .collect();
            opt.step(mlp.params.leaves_mut(), &grads, cfg.lr)?;
        }
        let mean = total / corpus.len() as f64;
        log.epoch_loss.push(mean);
        if mean < best - cfg.min_delta {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((mlp, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::KeepMask;
    use proptest::prelude::*;

    fn tm(rows: Vec<Vec<f32>>) -> TokenMatrix {
        let d = rows[0].len();
        let n = rows.len();
        TokenMatrix {
            patch_tokens: Tensor::new([n, d], rows.concat()).unwrap(),
            class_token: Tensor::full([1, d], 9.0),
            image_id: 0,
        }
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> TokenMatrix {
        let mut r = rng::seeded(seed);
        tm((0..n).map(|_| (0..d).map(|_| rng::normal(&mut r)).collect()).collect())
    }

    #[test]
    fn global_feature_examples() {
        let t = tm(vec![vec![1.0, 2.0]; 3]);
        assert_eq!(global_feature(&t, false), vec![1.0, 2.0]);
        let t = tm(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(global_feature(&t, false), vec![0.5, 0.5]);
        assert_eq!(global_feature(&t, true), vec![10.0 / 3.0, 10.0 / 3.0]);
        let t = random_tokens(7, 5, 1);
        let g = global_feature(&t, false);
        let centred = tm((0..7).map(|i| t.patch_tokens.row(i).iter().zip(&g).map(|(a, b)| a - b).collect()).collect());
        assert!(global_feature(&centred, false).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn descriptor_examples() {
        let t = tm(vec![vec![1.0, 2.0], vec![5.0, 6.0]]);
        let d = build_descriptors(&t, true, false);
        assert_eq!(d.row(0), &[1.0, 2.0, 3.0, 4.0]);
        let local = build_descriptors(&t, false, false);
        assert_eq!(local, t.patch_tokens);
        // same token, different image context
        let a = tm(vec![vec![1.0, 1.0], vec![0.0, 0.0]]);
        let b = tm(vec![vec![1.0, 1.0], vec![4.0, 4.0]]);
        assert_ne!(build_descriptors(&a, true, false).row(0), build_descriptors(&b, true, false).row(0));
        assert_eq!(build_descriptors(&a, false, false).row(0), build_descriptors(&b, false, false).row(0));
    }

    #[test]
    fn descriptor_graph_matches_direct_build() {
        let (n, d) = (4, 3);
        let ts: Vec<TokenMatrix> = (0..2).map(|s| random_tokens(n, d, s)).collect();
        let mut rows = Vec::new();
        for t in &ts {
            rows.extend_from_slice(t.class_token.data());
            rows.extend_from_slice(t.patch_tokens.data());
        }
        for (g, c) in [(true, false), (true, true), (false, false)] {
            let mut tape = Tape::no_grad();
            let seq = tape.constant(Tensor::new([2 * (n + 1), d], rows.clone()).unwrap());
            let out = descriptor_graph(&mut tape, seq, 2, n, g, c).unwrap();
            let want = Tensor::vstack(&[&build_descriptors(&ts[0], g, c), &build_descriptors(&ts[1], g, c)]).unwrap();
            for (a, b) in tape.value(out).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn widths_follow_token_width() {
        assert_eq!(FilterMlp::init(192, true, 0).widths(), [384, 384, 100, 1]);
        assert_eq!(FilterMlp::init(64, false, 0).widths(), [64, 128, 100, 1]);
        assert_eq!(FilterMlp::init(192, true, 0).num_params(), crate::flops::filter_params_count(192, true));
    }

    #[test]
    fn zero_output_layer_gives_one_half_and_keeps_all() {
        let mut f = FilterMlp::init(4, true, 3);
        f.zero_output_layer();
        let t = random_tokens(10, 4, 2);
        assert!(f.probabilities(&t).unwrap().iter().all(|&p| p == 0.5));
        assert!(f.predict_mask(&t, 0.5).unwrap().is_all());
    }

    #[test]
    fn threshold_bounds_and_floor() {
        let f = FilterMlp::init(4, true, 4);
        let t = random_tokens(30, 4, 5);
        assert!(f.predict_mask(&t, 0.0).unwrap().is_all());
        let probs = f.probabilities(&t).unwrap();
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        let m = f.predict_mask(&t, 1.5).unwrap();
        assert_eq!(m.kept_count(), 2); // ⌈0.05 · 30⌉
        let top = probs.iter().cloned().fold(f64::MIN, f64::max);
        assert!(m.kept_indices().iter().any(|&i| probs[i] == top));
        assert_eq!(mask_from_probs(&[0.1, 0.3, 0.3], 0.9), KeepMask::from_bools(vec![false, true, false]));
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let corpus = FilterCorpus {
            image_ids: vec![0],
            descriptors: vec![Tensor::zeros([3, 4])],
            targets: vec![vec![0.0; 3]],
        };
        let err = train_filter(&corpus, FilterMlp::init(2, true, 0), &FilterTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training(m) if m.contains("rho")));
    }

    fn separable(flip: bool) -> FilterCorpus {
        let mut r = rng::seeded(42);
        let mut c = FilterCorpus::default();
        for img in 0..20 {
            let mut rows = Vec::new();
            let mut t = Vec::new();
            for _ in 0..8 {
                let (x, y) = (rng::uniform(&mut r, -1.0, 1.0), rng::uniform(&mut r, -1.0, 1.0));
                let s = x + 0.5 * y;
                let s = if s.abs() < 0.2 { s.signum() * 0.2 + s } else { s };
                let (x, y) = (s - 0.5 * y, y);
                rows.extend([x, y]);
                t.push(((s > 0.0) != flip) as u8 as f32);
            }
            c.image_ids.push(img);
            c.descriptors.push(Tensor::new([8, 2], rows).unwrap());
            c.targets.push(t);
        }
        c
    }

    fn accuracy_and_preds(f: &FilterMlp, c: &FilterCorpus) -> (f64, Vec<bool>) {
        let mut preds = Vec::new();
        let mut hit = 0;
        for (d, t) in c.descriptors.iter().zip(&c.targets) {
            for (p, &y) in f.probabilities_for(d).unwrap().iter().zip(t) {
                let k = *p >= 0.5;
                hit += (k == (y > 0.5)) as usize;
                preds.push(k);
            }
        }
        (hit as f64 / preds.len() as f64, preds)
    }

    #[test]
    fn separable_corpus_is_learned_and_flipping_labels_flips_decisions() {
        let cfg = FilterTrainConfig::default();
        let a = separable(false);
        let b = separable(true);
        let (fa, la) = train_filter(&a, FilterMlp::init(2, false, 1), &cfg).unwrap();
        let (fb, _) = train_filter(&b, FilterMlp::init(2, false, 1), &cfg).unwrap();
        assert!(la.epoch_loss.len() <= 200);
        let (acc_a, pa) = accuracy_and_preds(&fa, &a);
        let (acc_b, pb) = accuracy_and_preds(&fb, &b);
        assert_eq!(acc_a, 1.0, "{:?}", la.epoch_loss.last());
        assert_eq!(acc_b, 1.0);
        assert!(pa.iter().zip(&pb).all(|(x, y)| x != y));
    }

    #[test]
    fn training_is_deterministic() {
        let a = separable(false);
        let cfg = FilterTrainConfig {
            max_epochs: 5,
            ..FilterTrainConfig::default()
        };
        let x = train_filter(&a, FilterMlp::init(2, false, 1), &cfg).unwrap();
        let y = train_filter(&a, FilterMlp::init(2, false, 1), &cfg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let f = FilterMlp::init(8, true, 9);
        let meta = FilterMeta {
            use_global: true,
            threshold: 0.5,
            dl_sign: DlSign::Eq7Literal,
            rho: 0.002,
            include_class: false,
        };
        let m = f.to_tensors(&meta);
        assert!(m.contains_key("filter.l1.w") && m.contains_key("filter.meta"));
        let (g, back) = FilterMlp::from_tensors(&m).unwrap();
        assert_eq!(g, f);
        assert_eq!(back.dl_sign, DlSign::Eq7Literal);
        assert!((back.rho - 0.002).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mask_invariants(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let f = FilterMlp::init(4, true, seed);
            let t = random_tokens(12, 4, seed ^ 1);
            let p = f.probabilities(&t).unwrap();
            prop_assert_eq!(&p, &f.probabilities(&t).unwrap());
            // raising the threshold never adds a kept token (before the floor)
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let (m_lo, m_hi) = (mask_from_probs(&p, lo), mask_from_probs(&p, hi));
            if p.iter().any(|&q| q >= hi) {
                for i in 0..12 {
                    prop_assert!(!m_hi.is_kept(i) || m_lo.is_kept(i));
                }
            }
            // permuting the other tokens leaves each token's probability
            let perm = rng::permutation(12, seed);
            let mut pt = t.clone();
            for (dst, &src) in perm.iter().enumerate() {
                pt.patch_tokens.row_mut(dst).copy_from_slice(t.patch_tokens.row(src));
            }
            let pp = f.probabilities(&pt).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((pp[dst] - p[src]).abs() < 1e-6);
            }
            // duplicating every token keeps the mean, hence every probability
            let mut rows: Vec<Vec<f32>> = (0..12).map(|i| t.patch_tokens.row(i).to_vec()).collect();
            rows.extend(rows.clone());
            let dup = f.probabilities(&tm(rows)).unwrap();
            for i in 0..12 {
                prop_assert!((dup[i] - p[i]).abs() < 1e-6);
                prop_assert!((dup[i + 12] - p[i]).abs() < 1e-6);
            }
        }
    }
}
