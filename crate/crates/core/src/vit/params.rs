//! Named parameter sets.
//!
//! [`VitWeights`] is generic over what it stores per parameter: tensors for a
//! model, tape handles during a forward pass, shapes when describing a config,
//! optional gradients after a backward pass. Names follow the usual
//! `blocks.{i}.attn.qkv.weight` layout and weights are stored `[out × in]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ConfigError, VitConfig};
use crate::autograd::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<P> {
    pub norm1_weight: P,
    pub norm1_bias: P,
    pub qkv_weight: P,
    pub qkv_bias: P,
    pub proj_weight: P,
    pub proj_bias: P,
    pub norm2_weight: P,
    pub norm2_bias: P,
    pub fc1_weight: P,
    pub fc1_bias: P,
    pub fc2_weight: P,
    pub fc2_bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights<P> {
    pub patch_weight: P,
    pub patch_bias: P,
    pub cls_token: P,
    pub pos_embed: P,
    pub blocks: Vec<BlockWeights<P>>,
    pub norm_weight: P,
    pub norm_bias: P,
    pub head_weight: P,
    pub head_bias: P,
}

pub type VitParams<T> = VitWeights<Tensor<T>>;
pub type BlockParams<T> = BlockWeights<Tensor<T>>;

/// Role of a parameter, used by initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    Embedding,
}

impl<P> BlockWeights<P> {
    fn entries(&self) -> [(&'static str, &P); 12] {
        [
            ("norm1.weight", &self.norm1_weight),
            ("norm1.bias", &self.norm1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("norm2.weight", &self.norm2_weight),
            ("norm2.bias", &self.norm2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut P); 12] {
        [
            ("norm1.weight", &mut self.norm1_weight),
            ("norm1.bias", &mut self.norm1_bias),
            ("attn.qkv.weight", &mut self.qkv_weight),
            ("attn.qkv.bias", &mut self.qkv_bias),
            ("attn.proj.weight", &mut self.proj_weight),
            ("attn.proj.bias", &mut self.proj_bias),
            ("norm2.weight", &mut self.norm2_weight),
            ("norm2.bias", &mut self.norm2_bias),
            ("mlp.fc1.weight", &mut self.fc1_weight),
            ("mlp.fc1.bias", &mut self.fc1_bias),
            ("mlp.fc2.weight", &mut self.fc2_weight),
            ("mlp.fc2.bias", &mut self.fc2_bias),
        ]
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<BlockWeights<Q>, E> {
        let mut g = |suffix: &str, p: &P| f(&format!("{prefix}{suffix}"), p);
        Ok(BlockWeights {
            norm1_weight: g("norm1.weight", &self.norm1_weight)?,
            norm1_bias: g("norm1.bias", &self.norm1_bias)?,
            qkv_weight: g("attn.qkv.weight", &self.qkv_weight)?,
            qkv_bias: g("attn.qkv.bias", &self.qkv_bias)?,
            proj_weight: g("attn.proj.weight", &self.proj_weight)?,
            proj_bias: g("attn.proj.bias", &self.proj_bias)?,
            norm2_weight: g("norm2.weight", &self.norm2_weight)?,
            norm2_bias: g("norm2.bias", &self.norm2_bias)?,
            fc1_weight: g("mlp.fc1.weight", &self.fc1_weight)?,
            fc1_bias: g("mlp.fc1.bias", &self.fc1_bias)?,
            fc2_weight: g("mlp.fc2.weight", &self.fc2_weight)?,
            fc2_bias: g("mlp.fc2.bias", &self.fc2_bias)?,
        })
    }
}

impl<P> VitWeights<P> {
    /// All parameters in canonical order with their dotted names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("patch_embed.proj.weight".to_string(), &self.patch_weight),
            ("patch_embed.proj.bias".to_string(), &self.patch_bias),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.entries().into_iter().map(|(n, p)| (format!("blocks.{i}.{n}"), p)));
        }
        out.extend([
            ("norm.weight".to_string(), &self.norm_weight),
            ("norm.bias".to_string(), &self.norm_bias),
            ("head.weight".to_string(), &self.head_weight),
            ("head.bias".to_string(), &self.head_bias),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![
            ("patch_embed.proj.weight".to_string(), &mut self.patch_weight),
            ("patch_embed.proj.bias".to_string(), &mut self.patch_bias),
            ("cls_token".to_string(), &mut self.cls_token),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.entries_mut()
                    .into_iter()
                    .map(|(n, p)| (format!("blocks.{i}.{n}"), p)),
            );
        }
        out.extend([
            ("norm.weight".to_string(), &mut self.norm_weight),
            ("norm.bias".to_string(), &mut self.norm_bias),
            ("head.weight".to_string(), &mut self.head_weight),
            ("head.bias".to_string(), &mut self.head_bias),
        ]);
        out
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<VitWeights<Q>, E> {
        Ok(VitWeights {
            patch_weight: f("patch_embed.proj.weight", &self.patch_weight)?,
            patch_bias: f("patch_embed.proj.bias", &self.patch_bias)?,
            cls_token: f("cls_token", &self.cls_token)?,
            pos_embed: f("pos_embed", &self.pos_embed)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}."), &mut f))
                .collect::<Result<_, E>>()?,
            norm_weight: f("norm.weight", &self.norm_weight)?,
            norm_bias: f("norm.bias", &self.norm_bias)?,
            head_weight: f("head.weight", &self.head_weight)?,
            head_bias: f("head.bias", &self.head_bias)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> VitWeights<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn len(&self) -> usize {
        8 + 12 * self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// True for parameters of the classification head, the only ones trained
/// when the backbone is frozen.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn param_kind(name: &str) -> ParamKind {
    if name == "cls_token" || name == "pos_embed" {
        ParamKind::Embedding
    } else if name.contains("norm") && name.ends_with(".weight") {
        ParamKind::NormScale
    } else if name.ends_with(".bias") {
        ParamKind::Bias
    } else {
        ParamKind::Weight
    }
}

impl VitWeights<Vec<usize>> {
    /// Shape of every parameter implied by `config`.
    pub fn shapes(config: &VitConfig) -> Self {
        let d = config.embed_dim;
        let h = config.mlp_hidden();
        let block = BlockWeights {
            norm1_weight: vec![d],
            norm1_bias: vec![d],
            qkv_weight: vec![3 * d, d],
            qkv_bias: vec![3 * d],
            proj_weight: vec![d, d],
            proj_bias: vec![d],
            norm2_weight: vec![d],
            norm2_bias: vec![d],
            fc1_weight: vec![h, d],
            fc1_bias: vec![h],
            fc2_weight: vec![d, h],
            fc2_bias: vec![d],
        };
        VitWeights {
            patch_weight: vec![d, config.patch_dim()],
            patch_bias: vec![d],
            cls_token: vec![d],
            pos_embed: vec![config.num_tokens(), d],
            blocks: vec![block; config.depth],
            norm_weight: vec![d],
            norm_bias: vec![d],
            head_weight: vec![config.num_classes, d],
            head_bias: vec![config.num_classes],
        }
    }
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> VitParams<T> {
    /// Deterministic initialization: weights from a normal(0, 0.02) truncated
    /// at two standard deviations, zero biases, zero class token and
    /// positional embeddings, unit layer-norm scales.
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Ok(VitWeights::shapes(config).map(|name, shape| {
            let shape = shape.clone();
            match param_kind(name) {
                ParamKind::Weight => Tensor::from_fn(shape, |_| T::of_f64(truncated(&normal, &mut rng))),
                ParamKind::NormScale => Tensor::ones(shape),
                ParamKind::Bias | ParamKind::Embedding => Tensor::zeros(shape),
            }
            .expect("shapes derived from a validated config are non-empty")
        }))
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> VitParams<U> {
        self.map(|_, t| t.cast())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Puts every parameter on `tape`; `trainable(name)` decides which ones
    /// collect gradients.
    pub fn register(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> VitWeights<Var> {
        self.map(|name, t| tape.leaf(t.clone(), trainable(name)))
    }
}

fn truncated(normal: &Normal<f64>, rng: &mut impl Rng) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}
