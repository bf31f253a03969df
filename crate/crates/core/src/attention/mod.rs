//! Spatial attention building blocks: sliding-window dilated attention,
//! multi-scale dilated attention (MSDA), dense multi-head self-attention
//! (MHSA), conditional position embedding, the overlapping tokenizer and
//! strided downsampling.

mod kernels;

pub use kernels::{dense_attention, dilated_attention, dilated_attention_weights, swda};

use crate::params::{Bound, Conv2d, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{invalid, Result, Stride, Var};

/// Default neighbourhood side for dilated attention.
pub const DEFAULT_WINDOW: usize = 3;
/// Hidden width of the block MLP relative to the model width.
pub const MLP_RATIO: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub window: usize,
    /// One dilation rate per head.
    pub dilation_rates: Vec<usize>,
}

impl AttentionConfig {
    /// `heads` heads over `channels` channels with rates grouped over
    /// `[1, 2, 3]` (3 heads -> `[1, 2, 3]`, 6 heads -> `[1, 1, 2, 2, 3, 3]`).
    pub fn multi_scale(channels: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(invalid(
                "attention_config",
                format!("{channels} channels not divisible into {heads} heads"),
            ));
        }
        let cfg = Self {
            heads,
            head_dim: channels / heads,
            window,
            dilation_rates: default_rates(heads),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(invalid("attention_config", "heads and head_dim must be positive"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(invalid("attention_config", format!("window must be odd, got {}", self.window)));
        }
        if self.dilation_rates.len() != self.heads {
            return Err(invalid(
                "attention_config",
                format!("{} rates for {} heads", self.dilation_rates.len(), self.heads),
            ));
        }
        if self.dilation_rates.iter().any(|&r| r == 0) {
            return Err(invalid("attention_config", "dilation rates must be at least 1"));
        }
        Ok(())
    }
}

/// Rates `1..=3` assigned to consecutive, equal-sized groups of heads.
pub fn default_rates(heads: usize) -> Vec<usize> {
    (0..heads).map(|i| 1 + i * 3 / heads.max(1)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mixer {
    /// Sliding-window dilated attention with per-head rates.
    Dilated { rates: Vec<usize>, window: usize },
    /// Dense attention over every position.
    Dense { heads: usize },
}

impl Mixer {
    fn heads(&self) -> usize {
        match self {
            Mixer::Dilated { rates, .. } => rates.len(),
            Mixer::Dense { heads } => *heads,
        }
    }
}

/// Query/key/value projection, per-head attention and output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub mixer: Mixer,
    channels: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, mixer: Mixer) -> Result<Self> {
        let heads = mixer.heads();
        if heads == 0 || channels % heads != 0 {
            return Err(invalid(
                "attention",
                format!("{channels} channels not divisible into {heads} heads"),
            ));
        }
        Ok(Self {
            qkv: Linear::new(init, &format!("{name}.qkv"), channels, 3 * channels),
            proj: Linear::new(init, &format!("{name}.proj"), channels, channels),
            mixer,
            channels,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c = self.channels;
        let qkv = self.qkv.forward(p, x)?;
        let (q, k, v) = (qkv.slice_last(0, c)?, qkv.slice_last(c, c)?, qkv.slice_last(2 * c, c)?);
        let heads = match &self.mixer {
            Mixer::Dilated { rates, window } => dilated_attention(q, k, v, rates, *window)?,
            Mixer::Dense { heads } => dense_attention(q, k, v, *heads)?,
        };
        self.proj.forward(p, heads)
    }
}

/// Multi-scale dilated attention: per-head dilation rates, heads
/// concatenated and mixed by the output projection.
pub fn msda<'t>(p: &Bound<'t>, x: Var<'t>, cfg: &AttentionConfig, attn: &MultiHeadAttention) -> Result<Var<'t>> {
    cfg.validate()?;
    let c = x.shape().last().copied().unwrap_or(0);
    if c != cfg.channels() {
        return Err(invalid("msda", format!("{c} channels, config expects {}", cfg.channels())));
    }
    match &attn.mixer {
        Mixer::Dilated { rates, window } if *rates == cfg.dilation_rates && *window == cfg.window => {
            attn.forward(p, x)
        }
        _ => Err(invalid("msda", "attention layer does not match the config")),
    }
}

/// Conditional position embedding: `x + depthwise_conv3x3(x)`.
#[derive(Debug, Clone, Copy)]
pub struct PositionEmbedding {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl PositionEmbedding {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            kernel: init.uniform(&format!("{name}.kernel"), &[3, 3, channels], 9),
            bias: init.uniform(&format!("{name}.bias"), &[channels], 9),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let conv = x.depthwise_conv2d(p[self.kernel])?.add_bias(p[self.bias])?;
        x.add(conv)
    }
}

/// Pre-norm transformer block:
///
/// ```text
/// x1 = x + attn(norm1(cpe(x)))
/// x2 = x1 + fc2(gelu(fc1(norm2(x1))))
/// ```
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub cpe: PositionEmbedding,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, mixer: Mixer) -> Result<Self> {
        let hidden = channels * MLP_RATIO;
        Ok(Self {
            cpe: PositionEmbedding::new(init, &format!("{name}.cpe"), channels),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), channels),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), channels, mixer)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), channels),
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels),
        })
    }

    /// Block with multi-scale dilated attention.
    pub fn msda(init: &mut Init, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let mixer = Mixer::Dilated {
            rates: cfg.dilation_rates.clone(),
            window: cfg.window,
        };
        Self::new(init, name, cfg.channels(), mixer)
    }

    /// Block with dense multi-head self-attention.
    pub fn mhsa(init: &mut Init, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Self::new(init, name, channels, Mixer::Dense { heads })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let pos = self.cpe.forward(p, x)?;
        let attended = self.attn.forward(p, self.norm1.forward(p, pos)?)?;
        let x1 = x.add(attended)?;
        let hidden = self.fc1.forward(p, self.norm2.forward(p, x1)?)?.gelu()?;
        x1.add(self.fc2.forward(p, hidden)?)
    }
}

/// Two zero-padded 3x3 convolutions with a GELU between, mapping `L`
/// bands to `C` channels at full resolution. The middle width is `C / 2`.
#[derive(Debug, Clone, Copy)]
pub struct OverlappingTokenizer {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl OverlappingTokenizer {
    pub fn new(init: &mut Init, name: &str, bands: usize, channels: usize) -> Self {
        let mid = channels.div_ceil(2);
        Self {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), 3, bands, mid, Stride::ONE),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), 3, mid, channels, Stride::ONE),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, y)?.gelu()?;
        self.conv2.forward(p, h)
    }
}

/// 3x3 stride-2 convolution with zero padding 1: halves the spatial
/// extents (rounding up) and doubles the channels.
#[derive(Debug, Clone, Copy)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl Downsample {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(init, &format!("{name}.conv"), 3, channels, 2 * channels, Stride::TWO),
            norm: LayerNorm::new(init, &format!("{name}.norm"), 2 * channels),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] < 2 || shape[1] < 2 {
            return Err(invalid("downsample", format!("input {shape:?} smaller than 2x2")));
        }
        self.norm.forward(p, self.conv.forward(p, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_grouping() {
        assert_eq!(default_rates(3), vec![1, 2, 3]);
        assert_eq!(default_rates(6), vec![1, 1, 2, 2, 3, 3]);
        assert_eq!(default_rates(1), vec![1]);
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::multi_scale(12, 3, 3).is_ok());
        assert!(AttentionConfig::multi_scale(10, 3, 3).is_err());
        assert!(AttentionConfig::multi_scale(12, 3, 4).is_err());
        let mut cfg = AttentionConfig::multi_scale(12, 3, 3).unwrap();
        cfg.dilation_rates = vec![1, 2];
        assert!(cfg.validate().is_err());
    }
}
