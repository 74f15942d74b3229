use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 64,
            max_text_len: 32,
            vocab_size: super::Tokenizer::new().vocab_size(),
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.layers", self.layers),
            ("encoder.heads", self.heads),
            ("encoder.mlp_ratio", self.mlp_ratio),
            ("encoder.patch_size", self.patch_size),
            ("encoder.image_size", self.image_size),
            ("encoder.max_text_len", self.max_text_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config("encoder.heads", "must divide embed_dim"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config("encoder.patch_size", "must divide image_size"));
        }
        let vocab = super::Tokenizer::new().vocab_size();
        if self.vocab_size != vocab {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("tokenizer vocabulary has {vocab} entries"),
            ));
        }
        Ok(())
    }
}
