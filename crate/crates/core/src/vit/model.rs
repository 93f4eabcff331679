//! Forward pass: patch embedding, pre-norm transformer blocks, class-token head.

use super::config::VitConfig;
use super::params::{BlockWeights, VitParams, VitWeights};
use crate::autograd::{Tape, Var};
use crate::tensor::{softmax_last, Result, Scalar, Tensor, TensorError, LAYER_NORM_EPS};

/// Rearranges a `[C × H × W]` image into `[num_patches × C·P·P]`. Patches are
/// taken row-major over the grid; each patch is flattened channel first, then
/// row, then column, matching a `[D, C, P, P]` convolution kernel.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, config: &VitConfig) -> Result<Tensor<T>> {
    let s = config.image_size;
    let c = config.in_channels;
    if image.shape() != [c, s, s] {
        return Err(TensorError::Dimension {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: vec![c, s, s],
        });
    }
    let p = config.patch_size;
    let grid = config.grid_size();
    let src = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for py in 0..p {
                    let row = (ch * s + gy * p + py) * s + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![config.num_patches(), config.patch_dim()], out)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, weight)?;
    tape.add_row(y, bias)
}

/// Token sequence `[(N+1) × D]`: class token followed by projected patches,
/// plus positional embeddings.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    w: &VitWeights<Var>,
    config: &VitConfig,
    image: &Tensor<T>,
) -> Result<Var> {
    let patches = tape.constant(extract_patches(image, config)?);
    let tokens = linear(tape, patches, w.patch_weight, w.patch_bias)?;
    let cls = tape.reshape(w.cls_token, vec![1, config.embed_dim])?;
    let seq = tape.concat_rows(&[cls, tokens])?;
    tape.add(seq, w.pos_embed)
}

/// One pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`. When
/// `attention` is given, each head's attention matrix is appended to it.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    b: &BlockWeights<Var>,
    config: &VitConfig,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = config.embed_dim;
    let (_, width) = tape.value(x).dims2()?;
    if width != d {
        return Err(TensorError::Dimension {
            op: "block_forward",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![d],
        });
    }
    let eps = T::of_f64(LAYER_NORM_EPS);
    let hd = config.head_dim();
    let scale = T::of_f64(1.0 / (hd as f64).sqrt());

    let h = tape.layer_norm(x, b.norm1_weight, b.norm1_bias, eps)?;
    let qkv = linear(tape, h, b.qkv_weight, b.qkv_bias)?;
    let mut heads = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let q = tape.slice_cols(qkv, head * hd, hd)?;
        let k = tape.slice_cols(qkv, d + head * hd, hd)?;
        let v = tape.slice_cols(qkv, 2 * d + head * hd, hd)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        if let Some(out) = attention.as_deref_mut() {
            out.push(weights);
        }
        heads.push(tape.matmul(weights, v)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn_out = linear(tape, merged, b.proj_weight, b.proj_bias)?;
    let x = tape.add(x, attn_out)?;

    let h = tape.layer_norm(x, b.norm2_weight, b.norm2_bias, eps)?;
    let h = linear(tape, h, b.fc1_weight, b.fc1_bias)?;
    let h = tape.gelu(h, config.gelu);
    let h = linear(tape, h, b.fc2_weight, b.fc2_bias)?;
    tape.add(x, h)
}

/// Logits `[1 × num_classes]` for one preprocessed image.
pub fn forward_logits<T: Scalar>(
    tape: &mut Tape<T>,
    w: &VitWeights<Var>,
    config: &VitConfig,
    image: &Tensor<T>,
) -> Result<Var> {
    forward_inner(tape, w, config, image, None)
}

fn forward_inner<T: Scalar>(
    tape: &mut Tape<T>,
    w: &VitWeights<Var>,
    config: &VitConfig,
    image: &Tensor<T>,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut x = patch_embed(tape, w, config, image)?;
    for block in &w.blocks {
        x = block_forward(tape, x, block, config, attention.as_deref_mut())?;
    }
    let cls = tape.row(x, 0)?;
    let cls = tape.layer_norm(cls, w.norm_weight, w.norm_bias, T::of_f64(LAYER_NORM_EPS))?;
    linear(tape, cls, w.head_weight, w.head_bias)
}

/// Logits `[B × num_classes]` for a batch of images.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    w: &VitWeights<Var>,
    config: &VitConfig,
    images: &[Tensor<T>],
) -> Result<Var> {
    let rows = images
        .iter()
        .map(|img| forward_logits(tape, w, config, img))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// A configuration together with its parameters, for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct VitModel<T> {
    pub config: VitConfig,
    pub params: VitParams<T>,
}

impl<T: Scalar> VitModel<T> {
    pub fn new(config: VitConfig, params: VitParams<T>) -> Self {
        Self { config, params }
    }

    fn frozen(&self, tape: &mut Tape<T>) -> VitWeights<Var> {
        self.params.register(tape, |_| false)
    }

    /// Logits as a vector of length `num_classes`.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = self.frozen(&mut tape);
        let out = forward_logits(&mut tape, &w, &self.config, image)?;
        tape.value(out).reshape(vec![self.config.num_classes])
    }

    pub fn probabilities(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax_last(&self.logits(image)?))
    }

    /// Output of the patch embedding stage, `[(N+1) × D]`.
    pub fn tokens(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = self.frozen(&mut tape);
        let out = patch_embed(&mut tape, &w, &self.config, image)?;
        Ok(tape.value(out).clone())
    }

    /// Attention matrices of every head, layer by layer.
    pub fn attention_maps(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let w = self.frozen(&mut tape);
        let mut maps = Vec::new();
        forward_inner(&mut tape, &w, &self.config, image, Some(&mut maps))?;
        Ok(maps.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(cfg: &VitConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Tensor::from_fn(vec![cfg.in_channels, s, s], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn perturbed(cfg: &VitConfig, seed: u64) -> VitParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VitParams::<f64>::init(cfg, seed)
            .unwrap()
            .map(|_, t| {
                let noise: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect();
                Tensor::new(t.shape().to_vec(), t.data().iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap()
            })
    }

    #[test]
    fn toy_patch_count() {
        let cfg = VitConfig {
            image_size: 4,
            patch_size: 2,
            embed_dim: 8,
            num_heads: 2,
            ..VitConfig::toy()
        };
        let model = VitModel::new(cfg, VitParams::<f64>::init(&cfg, 1).unwrap());
        let tokens = model.tokens(&random_image(&cfg, 2)).unwrap();
        assert_eq!(tokens.shape(), &[5, 8]);
    }

    #[test]
    fn patch_layout_is_channel_row_column() {
        let cfg = VitConfig {
            image_size: 4,
            patch_size: 2,
            in_channels: 2,
            ..VitConfig::toy()
        };
        let img = Tensor::<f64>::from_fn(vec![2, 4, 4], |i| i as f64).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        // second patch: top row of the grid, right column
        assert_eq!(&p.data()[8..16], &[2., 3., 6., 7., 18., 19., 22., 23.]);
    }

    #[test]
    fn zero_image_tokens_equal_projection_bias() {
        let cfg = VitConfig::toy();
        let mut params = VitParams::<f64>::init(&cfg, 3).unwrap();
        params.patch_bias = Tensor::from_fn(vec![cfg.embed_dim], |i| i as f64 * 0.1).unwrap();
        let model = VitModel::new(cfg, params.clone());
        let img = Tensor::zeros(vec![3, 16, 16]).unwrap();
        let tokens = model.tokens(&img).unwrap();
        for row in tokens.data().chunks(cfg.embed_dim).skip(1) {
            assert_eq!(row, params.patch_bias.data());
        }
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let cfg = VitConfig::toy();
        let model = VitModel::new(cfg, VitParams::<f32>::init(&cfg, 0).unwrap());
        let img = Tensor::zeros(vec![3, 8, 8]).unwrap();
        assert!(matches!(model.logits(&img), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = VitConfig::toy();
        let params = perturbed(&cfg, 5);
        let zero_block = params.blocks[0].try_map("", &mut |_, t: &Tensor<f64>| Tensor::zeros(t.shape().to_vec())).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_image(&cfg, 9).reshape(vec![16, 48]).unwrap().cast::<f64>());
        let x = tape.slice_cols(x, 0, cfg.embed_dim).unwrap();
        let bw = zero_block.try_map("", &mut |_, t: &Tensor<f64>| Ok::<_, ()>(tape.constant(t.clone()))).unwrap();
        let y = block_forward(&mut tape, x, &bw, &cfg, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn block_preserves_shape_and_single_token_attends_to_itself() {
        let cfg = VitConfig::toy();
        let params = perturbed(&cfg, 6);
        for tokens in [1usize, 3, 17] {
            let mut tape = Tape::new();
            let w = params.register(&mut tape, |_| false);
            let x = tape.constant(Tensor::from_fn(vec![tokens, cfg.embed_dim], |i| (i as f64).cos()).unwrap());
            let mut maps = Vec::new();
            let y = block_forward(&mut tape, x, &w.blocks[0], &cfg, Some(&mut maps)).unwrap();
            assert_eq!(tape.value(y).shape(), &[tokens, cfg.embed_dim]);
            assert_eq!(maps.len(), cfg.num_heads);
            if tokens == 1 {
                for m in maps {
                    assert_eq!(tape.value(m).data(), &[1.0]);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = VitConfig::toy();
        let model = VitModel::new(cfg, perturbed(&cfg, 11));
        let maps = model.attention_maps(&random_image(&cfg, 12)).unwrap();
        assert_eq!(maps.len(), cfg.depth * cfg.num_heads);
        for m in maps {
            assert_eq!(m.shape(), &[17, 17]);
            for row in m.data().chunks(17) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn swapping_patches_with_their_positions_keeps_logits() {
        let cfg = VitConfig::toy();
        let params = perturbed(&cfg, 21);
        let image = random_image(&cfg, 22);
        let base = VitModel::new(cfg, params.clone()).logits(&image).unwrap();

        // swap patch (0,0) with patch (2,3) and positional rows 1 and 1+11
        let (a, b) = ((0usize, 0usize), (2usize, 3usize));
        let p = cfg.patch_size;
        let s = cfg.image_size;
        let mut img = image.clone();
        let d = img.data_mut();
        for ch in 0..3 {
            for y in 0..p {
                for x in 0..p {
                    let i = (ch * s + a.0 * p + y) * s + a.1 * p + x;
                    let j = (ch * s + b.0 * p + y) * s + b.1 * p + x;
                    d.swap(i, j);
                }
            }
        }
        let mut swapped = params.clone();
        let e = cfg.embed_dim;
        let (ra, rb) = (1 + a.0 * 4 + a.1, 1 + b.0 * 4 + b.1);
        let pos = swapped.pos_embed.data_mut();
        for k in 0..e {
            pos.swap(ra * e + k, rb * e + k);
        }
        let out = VitModel::new(cfg, swapped).logits(&img).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-5);
    }

    #[test]
    fn batch_forward_stacks_single_forwards() {
        let cfg = VitConfig::toy();
        let params = perturbed(&cfg, 31);
        let model = VitModel::new(cfg, params.clone());
        let images = [random_image(&cfg, 1), random_image(&cfg, 2)];
        let mut tape = Tape::new();
        let w = params.register(&mut tape, |_| false);
        let out = forward_batch(&mut tape, &w, &cfg, &images).unwrap();
        let out = tape.value(out);
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(&out.data()[2..], model.logits(&images[1]).unwrap().data());
    }
}
