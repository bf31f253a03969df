use super::ChannelAttention;
use crate::params::{Bound, Conv2d, Conv3d, Init};
use crate::tensor::{invalid, Activation, Result, Stride, Var};

/// `floor(log2 L) - 3`, at least 1 when two or more bands are available.
pub fn default_spectral_stages(bands: usize) -> usize {
    if bands < 2 {
        return 0;
    }
    (bands.ilog2() as usize).saturating_sub(3).max(1)
}

#[derive(Debug, Clone, Copy)]
struct SpectralStage {
    conv: Conv3d,
    attention: ChannelAttention,
}

/// Bands as depth with one input channel: a stem of `3x1x1` convolution,
/// leaky ReLU and channel attention, then `N` stages that also halve the
/// depth, and a 3x3 convolution over the collapsed depth-channel axis.
#[derive(Debug, Clone)]
pub struct SpectralBranch {
    stem: SpectralStage,
    stages: Vec<SpectralStage>,
    pub head: Conv2d,
    bands: usize,
}

impl SpectralBranch {
    pub fn new(
        init: &mut Init,
        name: &str,
        bands: usize,
        endmembers: usize,
        stage_count: usize,
        width: usize,
        reduction: usize,
    ) -> Result<Self> {
        if stage_count >= usize::BITS as usize || bands >> stage_count == 0 {
            return Err(invalid(
                "spectral_branch",
                format!("{bands} bands cannot be halved {stage_count} times"),
            ));
        }
        let stage = |init: &mut Init, n: String, cin: usize| -> Result<SpectralStage> {
            Ok(SpectralStage {
                conv: Conv3d::new(init, &format!("{n}.conv"), 3, cin, width),
                attention: ChannelAttention::new(init, &format!("{n}.ca"), width, reduction)?,
            })
        };
        let stem = stage(init, format!("{name}.stem"), 1)?;
        let stages = (0..stage_count)
            .map(|i| stage(init, format!("{name}.stage{i}"), width))
            .collect::<Result<_>>()?;
        let depth = bands >> stage_count;
        let head = Conv2d::new(init, &format!("{name}.head"), 3, depth * width, endmembers, Stride::ONE);
        Ok(Self {
            stem,
            stages,
            head,
            bands,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Depth left after the pooling stages.
    pub fn residual_depth(&self) -> usize {
        self.bands >> self.stages.len()
    }

    fn apply<'t>(p: &Bound<'t>, stage: &SpectralStage, x: Var<'t>, pool: bool) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = stage.conv.forward(p, x)?.activation(Activation::LEAKY_RELU)?;
        if pool {
            h = h.maxpool3d(2)?;
        }
        let w = stage.attention.weights(p, h)?;
        Ok((h.scale_channels(w)?, w))
    }

    /// Depth-major features before the final projection, with the channel
    /// attention weights of the stem and of every stage.
    pub fn features<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let shape = y.shape();
        if shape.len() != 3 || shape[2] != self.bands {
            return Err(invalid(
                "spectral_branch",
                format!("expected (rows, cols, {}), got {shape:?}", self.bands),
            ));
        }
        let x = y.permute(&[2, 0, 1])?.reshape(&[shape[2], shape[0], shape[1], 1])?;
        let (mut x, w) = Self::apply(p, &self.stem, x, false)?;
        let mut weights = vec![w];
        for stage in &self.stages {
            let (next, w) = Self::apply(p, stage, x, true)?;
            x = next;
            weights.push(w);
        }
        Ok((x, weights))
    }

    /// `(rows, cols, R)` spectral features.
    pub fn forward<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let (x, _) = self.features(p, y)?;
        let s = x.shape();
        let collapsed = x.permute(&[1, 2, 0, 3])?.reshape(&[s[1], s[2], s[0] * s[3]])?;
        self.head.forward(p, collapsed)
    }
}
