//! Dual-branch abundance encoder: a spatial pyramid of dilated and global
//! attention stages, a spectral branch of 3-D convolutions with channel
//! attention, and a fusion head ending in a sharpened softmax.

mod spatial;
mod spectral;

pub use spatial::{resize_matrix, SpatialBranch};
pub use spectral::{default_spectral_stages, SpectralBranch};

use crate::params::{Bound, Conv2d, Init, Linear};
use crate::tensor::{invalid, Result, Stride, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Embedding width `C` of the spatial branch; a multiple of 3.
    pub channels: usize,
    /// Softmax sharpness, at least 1.
    pub gamma: f32,
    /// Spectral stage count; `None` derives it from the band count.
    pub spectral_stages: Option<usize>,
    pub spectral_channels: usize,
    pub ca_reduction: usize,
    /// Dilated-attention window side.
    pub window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 108,
            gamma: 1.0,
            spectral_stages: None,
            spectral_channels: 16,
            ca_reduction: 4,
            window: crate::attention::DEFAULT_WINDOW,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 3 != 0 {
            return Err(invalid("encoder", format!("channels must be a positive multiple of 3, got {}", self.channels)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 1.0) {
            return Err(invalid("encoder", format!("gamma must be at least 1, got {}", self.gamma)));
        }
        if self.spectral_channels == 0 || self.ca_reduction == 0 {
            return Err(invalid("encoder", "spectral width and reduction must be positive"));
        }
        if self.spectral_channels < self.ca_reduction {
            return Err(invalid("encoder", "spectral width smaller than the attention reduction"));
        }
        Ok(())
    }
}

/// Which branch, if any, is replaced by zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    NoSpatial,
    NoSpectral,
}

/// Channel attention with a shared two-layer MLP over the average- and
/// max-pooled descriptors.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(invalid(
                "channel_attention",
                format!("{channels} channels with reduction {reduction}"),
            ));
        }
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels),
        })
    }

    fn mlp<'t>(&self, p: &Bound<'t>, v: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(p, self.fc1.forward(p, v)?.relu()?)
    }

    /// Per-channel weights in `(0, 1)`, pooling over every leading axis.
    pub fn weights<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let avg = self.mlp(p, x.mean_rows()?)?;
        let max = self.mlp(p, x.max_rows()?)?;
        avg.add(max)?.sigmoid()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.weights(p, x)?;
        x.scale_channels(w)
    }
}

/// Concatenation, residual channel attention, 3x3 projection to `R`
/// channels and the sharpened softmax.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub attention: ChannelAttention,
    pub conv: Conv2d,
    pub gamma: f32,
}

impl Fusion {
    pub fn new(init: &mut Init, name: &str, endmembers: usize, reduction: usize, gamma: f32) -> Result<Self> {
        let width = 2 * endmembers;
        Ok(Self {
            attention: ChannelAttention::new(init, &format!("{name}.ca"), width, reduction.min(width))?,
            conv: Conv2d::new(init, &format!("{name}.conv"), 3, width, endmembers, Stride::ONE),
            gamma,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, spatial: Var<'t>, spectral: Var<'t>) -> Result<Var<'t>> {
        if spatial.shape() != spectral.shape() {
            return Err(crate::tensor::mismatch("fuse", &spatial.shape(), &spectral.shape()));
        }
        let fused = Var::concat_last(&[spatial, spectral])?;
        let refined = fused.add(self.attention.forward(p, fused)?)?;
        self.conv.forward(p, refined)?.scaled_softmax(self.gamma)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub spatial: SpatialBranch,
    pub spectral: SpectralBranch,
    pub fusion: Fusion,
    pub ablation: Ablation,
    endmembers: usize,
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig, bands: usize, endmembers: usize) -> Result<Self> {
        cfg.validate()?;
        if endmembers == 0 {
            return Err(invalid("encoder", "need at least one endmember"));
        }
        let stages = cfg.spectral_stages.unwrap_or_else(|| default_spectral_stages(bands));
        Ok(Self {
            spatial: SpatialBranch::new(init, "spatial", bands, cfg.channels, endmembers, cfg.window)?,
            spectral: SpectralBranch::new(
                init,
                "spectral",
                bands,
                endmembers,
                stages,
                cfg.spectral_channels,
                cfg.ca_reduction,
            )?,
            fusion: Fusion::new(init, "fusion", endmembers, cfg.ca_reduction, cfg.gamma)?,
            ablation: Ablation::None,
            endmembers,
        })
    }

    /// Abundance estimate `(rows, cols, R)` for a `(rows, cols, L)` cube.
    pub fn forward<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let shape = y.shape();
        if shape.len() != 3 {
            return Err(invalid("encoder", format!("expected (rows, cols, L), got {shape:?}")));
        }
        let zeros = || y.tape().constant(Tensor::zeros(&[shape[0], shape[1], self.endmembers]));
        let spatial = match self.ablation {
            Ablation::NoSpatial => zeros(),
            _ => self.spatial.forward(p, y)?,
        };
        let spectral = match self.ablation {
            Ablation::NoSpectral => zeros(),
            _ => self.spectral.forward(p, y)?,
        };
        self.fusion.forward(p, spatial, spectral)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;

    #[test]
    fn zero_mlp_halves_input() {
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut Init::new(&mut store, 1), "ca", 8, 4).unwrap();
        for (_, p) in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::from_fn(&[3, 2, 8], |i| i as f32 * 0.1 - 1.0);
        let tape = Tape::new();
        let out = ca.forward(&store.bind(&tape), tape.constant(x.clone())).unwrap();
        assert_eq!(out.value().as_ref(), &x.map(|v| v * 0.5));
        assert!(ChannelAttention::new(&mut Init::new(&mut store, 1), "ca", 3, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            channels: 10,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            gamma: 0.5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
