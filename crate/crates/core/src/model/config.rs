use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Micro-ViT hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Adapter bottleneck width `r`.
    pub bottleneck: usize,
    /// Text embedding width `d_t`.
    pub text_dim: usize,
    pub decoder_dim: usize,
    /// Inner width of the decoder's cross-attention projections.
    pub decoder_attn_dim: usize,
    pub decoder_heads: usize,
    /// Number of 2× upsampling steps applied to the mask before the loss.
    pub num_mask_upsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            bottleneck: 4,
            text_dim: 32,
            decoder_dim: 64,
            decoder_attn_dim: 16,
            decoder_heads: 2,
            num_mask_upsample: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.grid() < 2 {
            return bad("token grid must be at least 2x2");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be divisible by heads");
        }
        if self.decoder_heads == 0 || !self.decoder_attn_dim.is_multiple_of(self.decoder_heads) {
            return bad("decoder_attn_dim must be divisible by decoder_heads");
        }
        if self.bottleneck == 0 || self.bottleneck >= self.embed_dim {
            return bad("bottleneck must satisfy 0 < r < embed_dim");
        }
        if !self.decoder_dim.is_multiple_of(4) {
            return bad("decoder_dim must be a multiple of 4 for positional features");
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.text_dim == 0 {
            return bad("depth, channels, mlp_ratio and text_dim must be positive");
        }
        if self.num_mask_upsample != 1 {
            return bad("exactly one 2x mask upsampling step is supported");
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side length of the logit map the loss is computed on.
    pub fn mask_size(&self) -> usize {
        self.grid() << self.num_mask_upsample
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSite {
    None,
    ImageEncoder,
    PromptEncoder,
    MaskDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPlacement {
    MlpOnly,
    MlpAndMhsa,
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub injection_site: InjectionSite,
    pub text_placement: TextPlacement,
    pub adapters_enabled: bool,
    pub decoder_trainable: bool,
}

/// Stable variant vocabulary of the command line.
pub const VARIANT_NAMES: [&str; 7] = [
    "none",
    "decoder_only",
    "parallel",
    "parallel_text",
    "inject_prompt",
    "inject_decoder",
    "text_mlp_mhsa",
];

impl VariantSpec {
    pub const fn new(site: InjectionSite, placement: TextPlacement, adapters: bool, decoder: bool) -> Self {
        VariantSpec {
            injection_site: site,
            text_placement: placement,
            adapters_enabled: adapters,
            decoder_trainable: decoder,
        }
    }

    pub fn none() -> Self {
        Self::new(InjectionSite::None, TextPlacement::MlpOnly, false, false)
    }

    pub fn decoder_only() -> Self {
        Self::new(InjectionSite::None, TextPlacement::MlpOnly, false, true)
    }

    pub fn parallel() -> Self {
        Self::new(InjectionSite::None, TextPlacement::MlpOnly, true, true)
    }

    pub fn parallel_text() -> Self {
        Self::new(InjectionSite::ImageEncoder, TextPlacement::MlpOnly, true, true)
    }

    pub fn inject_prompt() -> Self {
        Self::new(InjectionSite::PromptEncoder, TextPlacement::MlpOnly, true, true)
    }

    pub fn inject_decoder() -> Self {
        Self::new(InjectionSite::MaskDecoder, TextPlacement::MlpOnly, true, true)
    }

    pub fn text_mlp_mhsa() -> Self {
        Self::new(InjectionSite::ImageEncoder, TextPlacement::MlpAndMhsa, true, true)
    }

    pub fn uses_text(&self) -> bool {
        self.injection_site != InjectionSite::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_placement == TextPlacement::MlpAndMhsa && self.injection_site != InjectionSite::ImageEncoder {
            return Err(Error::config(
                "text_placement mlp_and_mhsa requires injection_site image_encoder",
            ));
        }
        if self.injection_site == InjectionSite::ImageEncoder && !self.adapters_enabled {
            return Err(Error::config("image encoder text injection needs adapters"));
        }
        Ok(())
    }

    /// Canonical CLI name, if this spec is one of the named variants.
    pub fn name(&self) -> Option<&'static str> {
        VARIANT_NAMES
            .iter()
            .find(|n| n.parse::<VariantSpec>().ok().as_ref() == Some(self))
            .copied()
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::none(),
            "decoder_only" => Self::decoder_only(),
            "parallel" => Self::parallel(),
            "parallel_text" => Self::parallel_text(),
            "inject_prompt" => Self::inject_prompt(),
            "inject_decoder" => Self::inject_decoder(),
            "text_mlp_mhsa" => Self::text_mlp_mhsa(),
            other => {
                return Err(Error::config(format!(
                    "unknown variant {other:?}; expected one of {VARIANT_NAMES:?}"
                )))
            }
        })
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "{self:?}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in VARIANT_NAMES {
            let v: VariantSpec = n.parse().unwrap();
            v.validate().unwrap();
            assert_eq!(v.name(), Some(n));
        }
        assert!("bogus".parse::<VariantSpec>().is_err());
    }

    #[test]
    fn placement_requires_encoder_site() {
        let v = VariantSpec::new(InjectionSite::MaskDecoder, TextPlacement::MlpAndMhsa, true, true);
        assert!(v.validate().is_err());
    }

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(), 8);
        assert_eq!(c.mask_size(), 16);
        let bad = ModelConfig {
            patch_size: 7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
