use super::*;

fn cfg(image: usize, patch: usize, channels: usize, depth: usize, heads: usize, dim: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: image,
        patch_size: patch,
        channels,
        depth,
        heads,
        dim,
        mlp_ratio: 4,
        num_classes: classes,
    }
}

fn random_image(c: &ModelConfig, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    Image {
        height: c.image_size,
        width: c.image_size,
        channels: c.channels,
        pixels: (0..c.channels * c.image_size * c.image_size)
            .map(|_| rng::uniform(&mut r, 0.0, 1.0))
            .collect(),
    }
}

/// Gives biases and LayerNorm affine parameters random values too, so no
/// parameter sits at a special point.
fn perturbed(c: ModelConfig, seed: u64) -> Vit {
    let mut vit = Vit::init(c, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0x5555);
    for t in vit.params.leaves_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng::normal(&mut r);
        }
    }
    vit
}

fn random_mask(n: usize, r: &mut rng::Rng) -> KeepMask {
    let p = rng::uniform(r, 0.05, 1.0);
    let mut keep: Vec<bool> = (0..n).map(|_| rng::uniform(r, 0.0, 1.0) < p).collect();
    if !keep.iter().any(|&k| k) {
        keep[(rng::uniform(r, 0.0, n as f32) as usize).min(n - 1)] = true;
    }
    KeepMask::from_bools(keep)
}

fn rel_close(a: &[f32], b: &[f32], tol: f32) -> bool {
    let scale = a.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

// Plain nested-loop transformer used as an independent oracle.
mod scalar {
    use super::*;

    pub type M = Vec<Vec<f64>>;

    fn t(x: &Tensor) -> M {
        (0..x.rows()).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect()
    }

    fn vecf(x: &Tensor) -> Vec<f64> {
        x.data().iter().map(|&v| v as f64).collect()
    }

    pub fn linear(x: &M, w: &Tensor, b: &Tensor) -> M {
        let (w, b) = (t(w), vecf(b));
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layernorm(x: &M, g: &Tensor, b: &Tensor) -> M {
        let (g, b) = (vecf(g), vecf(b));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                row.iter().enumerate().map(|(i, v)| (v - mu) * rs * g[i] + b[i]).collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn attention(qkv: &M, heads: usize) -> M {
        let d = qkv[0].len() / 3;
        let dh = d / heads;
        let s = qkv.len();
        let mut out = vec![vec![0.0; d]; s];
        for h in 0..heads {
            for i in 0..s {
                let score: Vec<f64> = (0..s)
                    .map(|j| (0..dh).map(|e| qkv[i][h * dh + e] * qkv[j][d + h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = score.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = score.iter().map(|v| (v - m).exp()).sum();
                for j in 0..s {
                    let p = (score[j] - m).exp() / z;
                    for e in 0..dh {
                        out[i][h * dh + e] += p * qkv[j][2 * d + h * dh + e];
                    }
                }
            }
        }
        out
    }

    fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
    }

    /// Logits from the class token and the kept patch rows.
    pub fn logits(vit: &Vit, tokens: &TokenMatrix, keep: &[bool]) -> Vec<f64> {
        let p = &vit.params;
        let mut x: M = vec![vecf(&tokens.class_token)];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                x.push(tokens.patch_tokens.row(i).iter().map(|&v| v as f64).collect());
            }
        }
        for b in &p.blocks {
            let h = layernorm(&x, &b.ln1.gamma, &b.ln1.beta);
            let a = attention(&linear(&h, &b.qkv.w, &b.qkv.b), vit.config.heads);
            x = add(&x, &linear(&a, &b.proj.w, &b.proj.b));
            let h = layernorm(&x, &b.ln2.gamma, &b.ln2.beta);
            let h: M = linear(&h, &b.fc1.w, &b.fc1.b)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            x = add(&x, &linear(&h, &b.fc2.w, &b.fc2.b));
        }
        let cls = layernorm(&vec![x[0].clone()], &p.norm.gamma, &p.norm.beta);
        linear(&cls, &p.head.w, &p.head.b).remove(0)
    }
}

#[test]
fn config_arithmetic_and_validation() {
    assert_eq!(cfg(32, 8, 3, 1, 1, 8, 2).num_patches(), 16);
    assert_eq!(ModelConfig::desk().num_patches(), 64);
    assert_eq!(ModelConfig::deit_tiny().num_patches(), 196);
    assert!(cfg(30, 8, 3, 1, 1, 8, 2).validate().is_err());
    assert!(cfg(32, 8, 3, 1, 3, 8, 2).validate().is_err());
    assert!(Vit::init(cfg(30, 8, 3, 1, 1, 8, 2), 0).is_err());
}

#[test]
fn mean_gray_image_embeds_to_positional_rows() {
    let c = cfg(8, 4, 3, 1, 2, 8, 3);
    let vit = Vit::init(c.clone(), 3).unwrap();
    let img = Image {
        height: 8,
        width: 8,
        channels: 3,
        pixels: vec![INPUT_MEAN; 192],
    };
    let t = vit.embed(&img, 9).unwrap();
    assert_eq!(t.image_id, 9);
    assert_eq!(t.patch_tokens.data(), &vit.params.pos.data()[c.dim..]);
    let cls: Vec<f32> = (0..c.dim)
        .map(|j| vit.params.cls.data()[j] + vit.params.pos.data()[j])
        .collect();
    assert_eq!(t.class_token.data(), &cls[..]);
}

#[test]
fn mismatched_image_is_a_config_error() {
    let vit = Vit::init(cfg(8, 4, 3, 1, 2, 8, 3), 0).unwrap();
    let img = Image {
        height: 8,
        width: 8,
        channels: 1,
        pixels: vec![0.0; 64],
    };
    assert!(matches!(vit.embed(&img, 0), Err(Error::Config(_))));
}

#[test]
fn patchify_layout() {
    let c = cfg(4, 2, 2, 1, 1, 4, 2);
    // pixel value encodes (channel, y, x)
    let pixels = (0..2 * 16).map(|i| INPUT_MEAN + INPUT_STD * i as f32).collect();
    let img = Image {
        height: 4,
        width: 4,
        channels: 2,
        pixels,
    };
    let p = patchify(&c, &img).unwrap();
    assert_eq!(p.shape(), &[4, 8]);
    // patch 1 is grid (0, 1): x in 2..4, y in 0..2
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
}

#[test]
fn single_patch_change_moves_one_row() {
    let c = cfg(16, 4, 3, 1, 2, 8, 3);
    let vit = perturbed(c.clone(), 1);
    let img = random_image(&c, 2);
    let mut other = img.clone();
    // a pixel inside patch (1, 2)
    other.pixels[16 * 16 + 5 * 16 + 9] += 0.5;
    let a = vit.embed(&img, 0).unwrap();
    let b = vit.embed(&other, 0).unwrap();
    let changed: Vec<usize> = (0..c.num_patches()).filter(|&i| a.patch_tokens.row(i) != b.patch_tokens.row(i)).collect();
    assert_eq!(changed, vec![4 + 2]);
    assert_eq!(a.class_token, b.class_token);
}

#[test]
fn all_keep_mask_is_bit_identical_to_no_mask() {
    let c = ModelConfig::desk();
    let vit = perturbed(c.clone(), 4);
    let t = vit.embed(&random_image(&c, 5), 0).unwrap();
    let plain = vit.forward(&t, None).unwrap();
    let all = vit.forward(&t, Some(&KeepMask::all(64))).unwrap();
    assert_eq!(plain, all);
    let dropped = vit.forward_reduced(&[(&t, &KeepMask::all(64))]).unwrap().remove(0);
    assert_eq!(plain, dropped);
}

#[test]
fn masking_equals_dropping() {
    let mut r = rng::seeded(77);
    for seed in 0..20 {
        let c = if seed % 2 == 0 {
            ModelConfig {
                depth: 2,
                ..ModelConfig::desk()
            }
        } else {
            cfg(16, 4, 3, 3, 2, 16, 5)
        };
        let vit = perturbed(c.clone(), seed);
        let n = c.num_patches();
        let toks: Vec<TokenMatrix> = (0..3)
            .map(|i| vit.embed(&random_image(&c, seed * 10 + i), i).unwrap())
            .collect();
        let masks: Vec<KeepMask> = (0..3).map(|_| random_mask(n, &mut r)).collect();
        let items: Vec<_> = toks.iter().zip(&masks).map(|(t, m)| (t, Some(m))).collect();
        let masked = vit.forward_batch(&items, ForwardOptions::default()).unwrap();
        let pairs: Vec<_> = toks.iter().zip(&masks).collect();
        let dropped = vit.forward_reduced(&pairs).unwrap();
        for (a, b) in masked.iter().zip(&dropped) {
            assert!(rel_close(a, b, 1e-5), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn tiny_instance_matches_scalar_trace() {
    // depth 1, one head, d = 4; a square grid cannot give N = 2, so N = 1 and N = 4
    let c1 = cfg(2, 2, 2, 1, 1, 4, 3);
    let c4 = cfg(2, 1, 2, 1, 1, 4, 3);
    for c in [c1, c4] {
        for seed in 0..5 {
            let vit = perturbed(c.clone(), seed);
            let t = vit.embed(&random_image(&c, seed), 0).unwrap();
            let n = c.num_patches();
            let keep = vec![true; n];
            let got = vit.forward(&t, None).unwrap();
            let want = scalar::logits(&vit, &t, &keep);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5, "{got:?} vs {want:?}");
            }
            if n > 1 {
                let mut keep = keep;
                keep[0] = false;
                let got = vit.forward(&t, Some(&KeepMask::from_bools(keep.clone()))).unwrap();
                let want = scalar::logits(&vit, &t, &keep);
                for (g, w) in got.iter().zip(&want) {
                    assert!((*g as f64 - w).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn two_token_attention_by_hand() {
    // d = 4, one head, N = 1 patch + class token. Identity-like projections
    // so every intermediate can be written down.
    let c = cfg(1, 1, 1, 1, 1, 4, 2);
    let mut vit = Vit::init(c, 0).unwrap();
    let b = &mut vit.params.blocks[0];
    // q = k = 0 → uniform attention over the 2 rows; v = LN(x)
    let mut qkv = vec![0.0f32; 4 * 12];
    for i in 0..4 {
        qkv[i * 12 + 8 + i] = 1.0;
    }
    b.qkv.w = Tensor::new([4, 12], qkv).unwrap();
    b.proj.w = Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    b.fc1.w = Tensor::zeros([4, 16]);
    b.fc2.w = Tensor::zeros([16, 4]);
    vit.params.head.w = Tensor::new([4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let tokens = TokenMatrix {
        class_token: Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        patch_tokens: Tensor::new([1, 4], vec![4.0, 3.0, 2.0, 1.0]).unwrap(),
        image_id: 0,
    };
    // LN(cls) = (-a, -b, b, a) and LN(patch) = (a, b, -b, -a) with
    // a = 1.5/sqrt(1.25+eps), b = 0.5/sqrt(1.25+eps); their mean is zero, so
    // the attention output vanishes and the class row stays (1, 2, 3, 4).
    // Final LN gives (-a, -b, b, a); the head reads the first two entries.
    let rs = 1.0 / (1.25f64 + LN_EPS).sqrt();
    let want = [-1.5 * rs, -0.5 * rs];
    let got = vit.forward(&tokens, None).unwrap();
    for (g, w) in got.iter().zip(want) {
        assert!((*g as f64 - w).abs() < 1e-6, "{got:?}");
    }
}

#[test]
fn masking_then_unmasking_restores_logits() {
    let c = ModelConfig {
        depth: 2,
        ..ModelConfig::desk()
    };
    let vit = perturbed(c.clone(), 8);
    let t = vit.embed(&random_image(&c, 8), 0).unwrap();
    let base = vit.forward(&t, None).unwrap();
    let mut v = t.masked_variant(10).unwrap();
    let masked = vit.forward(&t, Some(&v.mask)).unwrap();
    assert_ne!(masked, base);
    v.mask_token(10).unwrap();
    assert_eq!(vit.forward(&t, Some(&v.mask)).unwrap(), masked);
    v.unmask(10).unwrap();
    assert_eq!(vit.forward(&t, Some(&v.mask)).unwrap(), base);
    assert!(t.masked_variant(64).is_err());
}

#[test]
fn masked_token_contents_are_never_read() {
    let c = ModelConfig {
        depth: 2,
        ..ModelConfig::desk()
    };
    let vit = perturbed(c.clone(), 9);
    let t = vit.embed(&random_image(&c, 9), 0).unwrap();
    let mut junk = t.clone();
    for v in junk.patch_tokens.row_mut(3) {
        *v = 1e3;
    }
    let m = t.masked_variant(3).unwrap().mask;
    assert_eq!(vit.forward(&t, Some(&m)).unwrap(), vit.forward(&junk, Some(&m)).unwrap());
}

#[test]
fn four_single_token_variants_give_distinct_losses() {
    let c = cfg(8, 4, 3, 2, 2, 8, 4);
    let vit = perturbed(c.clone(), 10);
    let t = vit.embed(&random_image(&c, 10), 0).unwrap();
    let losses: Vec<f64> = (0..4)
        .map(|i| {
            let m = t.masked_variant(i).unwrap().mask;
            cross_entropy_value_f32(&vit.forward(&t, Some(&m)).unwrap(), 1)
        })
        .collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(losses[i], losses[j]);
        }
    }
}

fn cross_entropy_value_f32(logits: &[f32], label: usize) -> f64 {
    crate::tensor::cross_entropy_value(logits, label).unwrap()
}

#[test]
fn permuting_kept_tokens_keeps_logits() {
    let c = ModelConfig {
        depth: 2,
        ..ModelConfig::desk()
    };
    let vit = perturbed(c.clone(), 12);
    let n = c.num_patches();
    let mut r = rng::seeded(12);
    for s in 0..5 {
        let t = vit.embed(&random_image(&c, s), 0).unwrap();
        let mask = random_mask(n, &mut r);
        let perm = rng::permutation(n, s);
        let mut pt = t.clone();
        let mut keep = vec![false; n];
        for (dst, &src) in perm.iter().enumerate() {
            pt.patch_tokens.row_mut(dst).copy_from_slice(t.patch_tokens.row(src));
            keep[dst] = mask.is_kept(src);
        }
        let a = vit.forward(&t, Some(&mask)).unwrap();
        let b = vit.forward(&pt, Some(&KeepMask::from_bools(keep))).unwrap();
        assert!(rel_close(&a, &b, 1e-5));
    }
}

#[test]
fn empty_mask_is_a_contract_error() {
    let c = cfg(8, 4, 3, 1, 2, 8, 3);
    let vit = Vit::init(c.clone(), 0).unwrap();
    let t = vit.embed(&random_image(&c, 0), 0).unwrap();
    let none = KeepMask::from_bools(vec![false; 4]);
    assert!(matches!(vit.forward(&t, Some(&none)), Err(Error::Contract(_))));
    assert!(matches!(vit.forward_reduced(&[(&t, &none)]), Err(Error::Contract(_))));
    assert!(vit.forward(&t, Some(&KeepMask::all(5))).is_err());
}

#[test]
fn zero_embedding_mode_is_not_deletion() {
    let c = ModelConfig {
        depth: 2,
        ..ModelConfig::desk()
    };
    let vit = perturbed(c.clone(), 13);
    let t = vit.embed(&random_image(&c, 13), 0).unwrap();
    let m = KeepMask::from_indices(64, &(0..32).collect::<Vec<_>>()).unwrap();
    let attn = vit.forward(&t, Some(&m)).unwrap();
    let zero = |pre_pos| {
        vit.forward_batch(
            &[(&t, Some(&m))],
            ForwardOptions {
                mask_mode: MaskMode::ZeroEmbed,
                mask_pre_pos: pre_pos,
            },
        )
        .unwrap()
        .remove(0)
    };
    let (post, pre) = (zero(false), zero(true));
    assert!(!rel_close(&attn, &post, 1e-3));
    assert_ne!(post, pre);
    // with nothing masked both modes agree
    let full = vit
        .forward_batch(
            &[(&t, None)],
            ForwardOptions {
                mask_mode: MaskMode::ZeroEmbed,
                mask_pre_pos: false,
            },
        )
        .unwrap();
    assert_eq!(full[0], vit.forward(&t, None).unwrap());
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let e = model_gradient_error(seed, None).unwrap();
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}
