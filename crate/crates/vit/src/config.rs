use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structure of the final transformer block.
///
/// | variant          | MSA residual | LN before MLP | MLP residual |
/// |------------------|--------------|---------------|--------------|
/// | `Standard`       | yes          | yes           | yes          |
/// | `NoMsaSkip`      | no           | yes           | yes          |
/// | `NoMsaSkipNoLn`  | no           | no            | yes          |
/// | `NoAllSkips`     | no           | no            | no           |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LastBlockVariant {
    #[serde(alias = "a", alias = "A")]
    Standard,
    #[serde(alias = "b", alias = "B")]
    NoMsaSkip,
    #[serde(alias = "c", alias = "C")]
    NoMsaSkipNoLn,
    #[serde(alias = "d", alias = "D")]
    NoAllSkips,
}

impl LastBlockVariant {
    pub const ALL: [LastBlockVariant; 4] =
        [Self::Standard, Self::NoMsaSkip, Self::NoMsaSkipNoLn, Self::NoAllSkips];

    pub fn msa_skip(self) -> bool {
        self == Self::Standard
    }

    pub fn mlp_norm(self) -> bool {
        matches!(self, Self::Standard | Self::NoMsaSkip)
    }

    pub fn mlp_skip(self) -> bool {
        self != Self::NoAllSkips
    }

    /// Row letter used in ablation tables.
    pub fn letter(self) -> char {
        match self {
            Self::Standard => 'A',
            Self::NoMsaSkip => 'B',
            Self::NoMsaSkipNoLn => 'C',
            Self::NoAllSkips => 'D',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    /// Side of the square grayscale input, in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub last_block: LastBlockVariant,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4.0,
            num_classes: 3,
            last_block: LastBlockVariant::Standard,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.grid_side() < 2 {
            return bad(format!("patch grid side must be at least 2, got {}", self.grid_side()));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Patches per side, `k`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size.max(1)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patch tokens plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ViTConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid_side(), 14);
        assert_eq!(c.num_tokens(), 197);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn rejects_bad_shapes() {
        let base = ViTConfig::default();
        for c in [
            ViTConfig { image_size: 30, ..base.clone() },
            ViTConfig { heads: 3, ..base.clone() },
            ViTConfig { blocks: 0, ..base.clone() },
            ViTConfig { patch_size: 56, ..base.clone() },
            ViTConfig { num_classes: 1, ..base.clone() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn variant_flags() {
        use LastBlockVariant::*;
        assert!(Standard.msa_skip() && Standard.mlp_norm() && Standard.mlp_skip());
        assert!(!NoMsaSkip.msa_skip() && NoMsaSkip.mlp_norm());
        assert!(!NoMsaSkipNoLn.mlp_norm() && NoMsaSkipNoLn.mlp_skip());
        assert!(!NoAllSkips.mlp_skip());
        let v: LastBlockVariant = serde_json::from_str("\"C\"").unwrap();
        assert_eq!(v, NoMsaSkipNoLn);
    }
}
