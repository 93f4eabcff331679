use serde::{Deserialize, Serialize};

use crate::tensor::GeluKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("image_size {image_size} is not divisible by patch_size {patch_size}")]
    PatchGrid { image_size: usize, patch_size: usize },
    #[error("embed_dim {embed_dim} is not divisible by num_heads {num_heads}")]
    HeadSplit { embed_dim: usize, num_heads: usize },
    #[error("num_classes must be 2 (COVID / non-COVID), got {0}")]
    NumClasses(usize),
    #[error("{0} must be at least 1")]
    Zero(&'static str),
}

/// Architectural dimensions of the vision transformer.
///
/// `Default` is `vit_base_patch16_224` with a two-class head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub gelu: GeluKind,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl VitConfig {
    pub fn base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes: 2,
            gelu: GeluKind::Tanh,
        }
    }

    /// Small configuration used for finite-difference checks and desk-scale training.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 2,
            num_classes: 2,
            gelu: GeluKind::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ConfigError::PatchGrid {
                image_size: self.image_size,
                patch_size: self.patch_size,
            });
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ConfigError::HeadSplit {
                embed_dim: self.embed_dim,
                num_heads: self.num_heads,
            });
        }
        if self.num_classes != 2 {
            return Err(ConfigError::NumClasses(self.num_classes));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        VitConfig::base().validate().unwrap();
        VitConfig::toy().validate().unwrap();
        assert_eq!(VitConfig::base().num_tokens(), 197);
        assert_eq!(VitConfig::toy().num_tokens(), 17);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = VitConfig::toy();
        c.patch_size = 5;
        assert!(matches!(c.validate(), Err(ConfigError::PatchGrid { .. })));
        let mut c = VitConfig::toy();
        c.num_heads = 5;
        assert!(matches!(c.validate(), Err(ConfigError::HeadSplit { .. })));
        let mut c = VitConfig::toy();
        c.num_classes = 3;
        assert_eq!(c.validate(), Err(ConfigError::NumClasses(3)));
        let mut c = VitConfig::toy();
        c.depth = 0;
        assert_eq!(c.validate(), Err(ConfigError::Zero("depth")));
    }
}
