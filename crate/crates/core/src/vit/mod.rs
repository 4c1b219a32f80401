//! A small pre-norm vision transformer with per-token attention masking.
//!
//! Sequences are laid out class token first, then the `N` patch tokens in
//! row-major grid order. A [`KeepMask`] only ever covers patch tokens.

mod params;

use serde::{Deserialize, Serialize};

use crate::data::{Image, TensorMap};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{gradcheck, Scalar, SeqLayout, Tape, Tensor, Var};

pub use crate::flops::{count_flops, FlopsReport};
pub use params::{BlockP, LinearP, MlpParams, NormP, VitParams};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;
/// Pixels are standardized as `(p − INPUT_MEAN) / INPUT_STD` before the patch
/// embedding.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32×32 RGB, 4×4 patches (N = 64), d = 64, 4 blocks of 4 heads, 10 classes.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }

    /// DeiT-Tiny shape: 224², 16×16 patches, d = 192, 12 blocks × 3 heads.
    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            heads: 3,
            dim: 192,
            mlp_ratio: 4,
            num_classes: 1000,
        }
    }

    /// DeiT-Small shape: as tiny with d = 384 and 6 heads.
    pub fn deit_small() -> Self {
        Self {
            heads: 6,
            dim: 384,
            ..Self::deit_tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("channels, num_classes and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count `N`.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// `N + 1` (class token included).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.dim
    }
}

/// Keep/drop decision over the `N` patch tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KeepMask {
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn all(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    pub fn from_bools(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn from_indices(n: usize, kept: &[usize]) -> Result<Self> {
        let mut keep = vec![false; n];
        for &i in kept {
            if i >= n {
                return Err(Error::Index {
                    what: "kept token",
                    index: i,
                    len: n,
                });
            }
            keep[i] = true;
        }
        Ok(Self { keep })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn keep_ratio(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.kept_count() as f64 / self.keep.len() as f64
        }
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn set(&mut self, i: usize, keep: bool) -> Result<()> {
        let len = self.keep.len();
        let slot = self.keep.get_mut(i).ok_or(Error::Index {
            what: "token",
            index: i,
            len,
        })?;
        *slot = keep;
        Ok(())
    }

    pub fn is_all(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

/// How masked tokens are removed from a full-length sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Masked keys get zero attention weight and their values are never read;
    /// equivalent to deleting the tokens.
    #[default]
    Attn,
    /// Masked token embeddings are replaced by zeros and otherwise processed
    /// normally. Not equivalent to deleting them.
    ZeroEmbed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mask_mode: MaskMode,
    /// In `ZeroEmbed` mode, zero the token before the positional embedding is
    /// added (the row becomes the bare positional embedding). No effect in
    /// `Attn` mode.
    pub mask_pre_pos: bool,
}

/// Embedded tokens of one image: patch rows and class token, positional
/// embeddings already added.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub patch_tokens: Tensor,
    pub class_token: Tensor,
    pub image_id: u64,
}

impl TokenMatrix {
    pub fn num_tokens(&self) -> usize {
        self.patch_tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.patch_tokens.cols()
    }

    /// The tokens with token `i` masked out.
    pub fn masked_variant(&self, i: usize) -> Result<MaskedTokens<'_>> {
        let mut mask = KeepMask::all(self.num_tokens());
        mask.set(i, false)?;
        Ok(MaskedTokens { tokens: self, mask })
    }
}

#[derive(Clone, Debug)]
pub struct MaskedTokens<'a> {
    pub tokens: &'a TokenMatrix,
    pub mask: KeepMask,
}

impl MaskedTokens<'_> {
    pub fn mask_token(&mut self, i: usize) -> Result<()> {
        self.mask.set(i, false)
    }

    pub fn unmask(&mut self, i: usize) -> Result<()> {
        self.mask.set(i, true)
    }
}

/// Binds every parameter as a tape leaf (`trainable`) or constant.
pub fn bind_vit<F: Scalar>(tape: &mut Tape<F>, params: &VitParams<Tensor<F>>, trainable: bool) -> VitParams<Var> {
    params.map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
}

/// Row indices of the patch tokens inside a `[B·(N+1) × d]` sequence stack.
pub fn patch_rows(batch: usize, n: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (0..n).map(move |i| b * (n + 1) + 1 + i)).collect()
}

/// Patch pixels `[B·N × P]` → embedded sequences `[B·(N+1) × d]` with the
/// class token first and positional embeddings added.
pub fn embed_graph<F: Scalar>(
    tape: &mut Tape<F>,
    p: &VitParams<Var>,
    patches: Var,
    batch: usize,
    n: usize,
) -> Result<Var> {
    let lin = tape.linear(patches, p.patch.w, Some(p.patch.b))?;
    let stacked = tape.vstack(p.cls, lin)?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i)))
        .collect();
    let seq = tape.gather_rows(stacked, &order)?;
    tape.add_rows(seq, p.pos)
}

/// Runs the transformer blocks over packed sequences and returns class-token
/// logits `[count × C]`. Row 0 of each sequence must be the class token.
pub fn encode_graph<F: Scalar>(
    tape: &mut Tape<F>,
    p: &VitParams<Var>,
    cfg: &ModelConfig,
    seq: Var,
    layout: &SeqLayout,
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    let eps = F::of(LN_EPS);
    let mut x = seq;
    for b in &p.blocks {
        let h = tape.layernorm(x, b.ln1.gamma, b.ln1.beta, eps)?;
        let qkv = tape.linear(h, b.qkv.w, Some(b.qkv.b))?;
        let a = tape.attention(qkv, layout, cfg.heads, key_keep)?;
        let a = tape.linear(a, b.proj.w, Some(b.proj.b))?;
        x = tape.add(x, a)?;
        let h = tape.layernorm(x, b.ln2.gamma, b.ln2.beta, eps)?;
        let h = tape.linear(h, b.fc1.w, Some(b.fc1.b))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, b.fc2.w, Some(b.fc2.b))?;
        x = tape.add(x, h)?;
    }
    let cls_rows: Vec<usize> = (0..layout.count()).map(|s| layout.start(s)).collect();
    let cls = tape.gather_rows(x, &cls_rows)?;
    let cls = tape.layernorm(cls, p.norm.gamma, p.norm.beta, eps)?;
    tape.linear(cls, p.head.w, Some(p.head.b))
}

/// Mean cross-entropy over a batch of full-length sequences built from
/// patch pixels `[B·N × P]`.
pub fn classification_loss<F: Scalar>(
    tape: &mut Tape<F>,
    p: &VitParams<Var>,
    cfg: &ModelConfig,
    patches: Var,
    labels: &[usize],
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    let n = cfg.num_patches();
    let seq = embed_graph(tape, p, patches, labels.len(), n)?;
    let layout = SeqLayout::uniform(labels.len(), n + 1);
    let logits = encode_graph(tape, p, cfg, seq, &layout, key_keep)?;
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    pub config: ModelConfig,
    pub params: VitParams<Tensor>,
}

impl Vit {
    /// Truncated-normal (σ = 0.02) projections and embeddings, zero biases,
    /// unit LayerNorm.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let d = config.dim;
        let mut tn = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng::trunc_normal(&mut r, INIT_STD));
        let patch = LinearP {
            w: tn(&[config.patch_dim(), d]),
            b: Tensor::zeros([d]),
        };
        let cls = tn(&[1, d]);
        let pos = tn(&[config.seq_len(), d]);
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let h = config.hidden_dim();
            blocks.push(BlockP {
                ln1: unit_norm(d),
                qkv: LinearP {
                    w: tn(&[d, 3 * d]),
                    b: Tensor::zeros([3 * d]),
                },
                proj: LinearP {
                    w: tn(&[d, d]),
                    b: Tensor::zeros([d]),
                },
                ln2: unit_norm(d),
                fc1: LinearP {
                    w: tn(&[d, h]),
                    b: Tensor::zeros([h]),
                },
                fc2: LinearP {
                    w: tn(&[h, d]),
                    b: Tensor::zeros([d]),
                },
            });
        }
        let head = LinearP {
            w: tn(&[d, config.num_classes]),
            b: Tensor::zeros([config.num_classes]),
        };
        Ok(Self {
            params: VitParams {
                patch,
                cls,
                pos,
                blocks,
                norm: unit_norm(d),
                head,
            },
            config,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.leaves().iter().map(|t| t.len()).sum()
    }

    /// Named weights plus a `vit.config` record of the shape.
    pub fn to_tensors(&self) -> TensorMap {
        let c = &self.config;
        let shape = [c.image_size, c.patch_size, c.channels, c.depth, c.heads, c.dim, c.mlp_ratio, c.num_classes];
        let mut m: TensorMap = self.params.named().into_iter().map(|(k, v)| (k, v.clone())).collect();
        m.insert(
            "vit.config".into(),
            Tensor::new([8], shape.iter().map(|&x| x as f32).collect()).expect("config shape"),
        );
        m
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let c = map
            .get("vit.config")
            .ok_or_else(|| Error::Config("checkpoint has no vit.config".into()))?
            .data();
        if c.len() != 8 || c.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Config("vit.config record is malformed".into()));
        }
        let u = |i: usize| c[i] as usize;
        let config = ModelConfig {
            image_size: u(0),
            patch_size: u(1),
            channels: u(2),
            depth: u(3),
            heads: u(4),
            dim: u(5),
            mlp_ratio: u(6),
            num_classes: u(7),
        };
        let mut vit = Self::init(config, 0)?;
        for (name, slot) in vit.params.named_mut() {
            let t = map
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dims("checkpoint tensor", t.shape(), slot.shape()));
            }
            *slot = t.clone();
        }
        Ok(vit)
    }


    /// Flattens non-overlapping patches into rows of `[N × C·p·p]`, patches in
    /// row-major grid order, each patch channel-major.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        patchify(&self.config, image)
    }

    pub fn embed(&self, image: &Image, image_id: u64) -> Result<TokenMatrix> {
        Ok(self.embed_batch(&[(image, image_id)])?.remove(0))
    }

    pub fn embed_batch(&self, images: &[(&Image, u64)]) -> Result<Vec<TokenMatrix>> {
        let cfg = &self.config;
        let n = cfg.num_patches();
        let parts = images.iter().map(|(img, _)| self.patchify(img)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        let mut tape = Tape::no_grad();
        let p = bind_vit(&mut tape, &self.params, false);
        let x = tape.constant(Tensor::vstack(&refs)?);
        let seq = embed_graph(&mut tape, &p, x, images.len(), n)?;
        let seq = tape.value(seq);
        let s = n + 1;
        let d = cfg.dim;
        Ok(images
            .iter()
            .enumerate()
            .map(|(b, &(_, id))| {
                let rows = &seq.data()[b * s * d..(b + 1) * s * d];
                TokenMatrix {
                    class_token: Tensor::new([1, d], rows[..d].to_vec()).expect("shape"),
                    patch_tokens: Tensor::new([n, d], rows[d..].to_vec()).expect("shape"),
                    image_id: id,
                }
            })
            .collect())
    }

    /// Logits for one image, masked tokens hidden from attention.
    pub fn forward(&self, tokens: &TokenMatrix, mask: Option<&KeepMask>) -> Result<Vec<f32>> {
        Ok(self
            .forward_batch(&[(tokens, mask)], ForwardOptions::default())?
            .remove(0))
    }

    /// Logits for a batch of full-length sequences, each with an optional mask.
    pub fn forward_batch(
        &self,
        items: &[(&TokenMatrix, Option<&KeepMask>)],
        opts: ForwardOptions,
    ) -> Result<Vec<Vec<f32>>> {
        let n = self.config.num_patches();
        let d = self.config.dim;
        let s = n + 1;
        let mut data = Vec::with_capacity(items.len() * s * d);
        let any_mask = items.iter().any(|(_, m)| m.is_some_and(|m| !m.is_all()));
        let mut key_keep = Vec::new();
        for (tokens, mask) in items {
            self.check_tokens(tokens)?;
            if let Some(m) = mask {
                if m.len() != n {
                    return Err(Error::dims("keep mask", &[n], &[m.len()]));
                }
                if m.kept_count() == 0 {
                    return Err(Error::Contract("every patch token is masked".into()));
                }
            }
            data.extend_from_slice(tokens.class_token.data());
            for i in 0..n {
                let kept = mask.is_none_or(|m| m.is_kept(i));
                if kept || opts.mask_mode == MaskMode::Attn {
                    data.extend_from_slice(tokens.patch_tokens.row(i));
                } else if opts.mask_pre_pos {
                    data.extend_from_slice(self.params.pos.row(1 + i));
                } else {
                    data.extend(std::iter::repeat_n(0.0, d));
                }
            }
            if any_mask {
                key_keep.push(true);
                key_keep.extend((0..n).map(|i| mask.is_none_or(|m| m.is_kept(i))));
            }
        }
        let keys = (any_mask && opts.mask_mode == MaskMode::Attn).then_some(key_keep.as_slice());
        let seq = Tensor::new([items.len() * s, d], data)?;
        self.run_encoder(seq, &SeqLayout::uniform(items.len(), s), keys)
    }

    /// Logits after physically removing the dropped tokens, so each
    /// sequence is `1 + kept_count` rows long.
    pub fn forward_reduced(&self, items: &[(&TokenMatrix, &KeepMask)]) -> Result<Vec<Vec<f32>>> {
        let d = self.config.dim;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(items.len());
        for (tokens, mask) in items {
            self.check_tokens(tokens)?;
            if mask.len() != tokens.num_tokens() {
                return Err(Error::dims("keep mask", &[tokens.num_tokens()], &[mask.len()]));
            }
            let kept = mask.kept_indices();
            if kept.is_empty() {
                return Err(Error::Contract("every patch token is dropped".into()));
            }
            data.extend_from_slice(tokens.class_token.data());
            for &i in &kept {
                data.extend_from_slice(tokens.patch_tokens.row(i));
            }
            lens.push(1 + kept.len());
        }
        let layout = SeqLayout::ragged(lens);
        let seq = Tensor::new([layout.total_rows(), d], data)?;
        self.run_encoder(seq, &layout, None)
    }

    fn run_encoder(&self, seq: Tensor, layout: &SeqLayout, keys: Option<&[bool]>) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::no_grad();
        let p = bind_vit(&mut tape, &self.params, false);
        let x = tape.constant(seq);
        let logits = encode_graph(&mut tape, &p, &self.config, x, layout, keys)?;
        let out = tape.value(logits);
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }

    fn check_tokens(&self, t: &TokenMatrix) -> Result<()> {
        let (n, d) = (self.config.num_patches(), self.config.dim);
        if t.patch_tokens.shape() != [n, d] || t.class_token.len() != d {
            return Err(Error::dims("token matrix", t.patch_tokens.shape(), &[n, d]));
        }
        Ok(())
    }
}

fn unit_norm(d: usize) -> NormP<Tensor> {
    NormP {
        gamma: Tensor::full([d], 1.0),
        beta: Tensor::zeros([d]),
    }
}

/// Worst relative error between tape gradients and central differences of
/// the classification loss of a random depth-2, d = 8, N = 4 model, over
/// every weight tensor. One patch token is masked on most seeds. With
/// `sample = Some(k)` only `k` elements per tensor are perturbed.
pub fn model_gradient_error(seed: u64, sample: Option<usize>) -> Result<f64> {
    let c = ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        depth: 2,
        heads: 2,
        dim: 8,
        mlp_ratio: 4,
        num_classes: 3,
    };
    let mut vit = Vit::init(c.clone(), seed)?;
    let mut r = rng::seeded(seed ^ 0x5555);
    for t in vit.params.leaves_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng::normal(&mut r);
        }
    }
    let mut patches = Vec::new();
    for i in 0..2 {
        let mut ri = rng::seeded(seed * 7 + i);
        let img = Image {
            height: 4,
            width: 4,
            channels: 1,
            pixels: (0..16).map(|_| rng::uniform(&mut ri, 0.0, 1.0)).collect(),
        };
        patches.push(patchify(&c, &img)?);
    }
    let refs: Vec<&Tensor> = patches.iter().collect();
    let x = Tensor::vstack(&refs)?.cast::<f64>();
    let labels = [(seed % 3) as usize, ((seed + 1) % 3) as usize];
    let mut keep = vec![true; 10];
    keep[2 + (seed % 4) as usize] = !seed.is_multiple_of(3);
    let leaves: Vec<Tensor<f64>> = vit.params.leaves().iter().map(|t| t.cast()).collect();
    let template = vit.params.clone();
    let build = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut it = vars.iter().copied();
        let p = template.map(|_| it.next().expect("leaf count"));
        let xv = tape.constant(x.clone());
        classification_loss(tape, &p, &c, xv, &labels, Some(&keep))
    };
    gradcheck::max_relative_error(&leaves, &build, gradcheck::DEFAULT_STEP, sample.map(|k| (k, seed)))
}

pub fn patchify(cfg: &ModelConfig, image: &Image) -> Result<Tensor> {
    if image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.channels {
        return Err(Error::Config(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.channels, image.height, image.width, cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    let (ps, g, c) = (cfg.patch_size, cfg.grid_side(), cfg.channels);
    let (h, w) = (image.height, image.width);
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for py in 0..ps {
                    let y = gy * ps + py;
                    let start = ch * h * w + y * w + gx * ps;
                    out.extend(image.pixels[start..start + ps].iter().map(|&p| (p - INPUT_MEAN) / INPUT_STD));
                }
            }
        }
    }
    Tensor::new([cfg.num_patches(), cfg.patch_dim()], out)
}

#[cfg(test)]
mod tests;
