use crate::attention::{AttentionConfig, Downsample, OverlappingTokenizer, TransformerBlock};
use crate::params::{Bound, Init, LayerNorm, Linear};
use crate::tensor::{invalid, Result, Tensor, Var};

/// Smallest input side that leaves at least 2 pixels before every
/// halving.
const MIN_SIDE: usize = 5;

/// Row-stochastic `(out, input)` matrix of adaptive average pooling along
/// one axis: bin `i` averages `[floor(i n / m), ceil((i + 1) n / m))`.
/// With `m > n` this upsamples by replication.
fn adaptive_pool_1d(n: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let start = i * n / m;
        let end = ((i + 1) * n).div_ceil(m);
        let w = 1.0 / (end - start) as f32;
        for j in start..end {
            out[i * n + j] = w;
        }
    }
    out
}

/// `(out_rows * out_cols, in_rows * in_cols)` adaptive average pooling on
/// row-major pixel indices. Rows sum to one.
pub fn resize_matrix(in_rows: usize, in_cols: usize, out_rows: usize, out_cols: usize) -> Tensor {
    let a = adaptive_pool_1d(in_rows, out_rows);
    let b = adaptive_pool_1d(in_cols, out_cols);
    let n_in = in_rows * in_cols;
    Tensor::from_fn(&[out_rows * out_cols, n_in], |idx| {
        let (o, i) = (idx / n_in, idx % n_in);
        a[(o / out_cols) * in_rows + i / in_cols] * b[(o % out_cols) * in_cols + i % in_cols]
    })
}

/// Four-stage pyramid: two MSDA blocks at full resolution, one after the
/// first halving, two global-attention blocks after the second and one
/// after the third. Channels double and head counts go 3, 6, 12, 24.
#[derive(Debug, Clone)]
pub struct SpatialBranch {
    pub tokenizer: OverlappingTokenizer,
    pub stage1: Vec<TransformerBlock>,
    pub down1: Downsample,
    pub stage2: Vec<TransformerBlock>,
    pub down2: Downsample,
    pub stage3: Vec<TransformerBlock>,
    pub down3: Downsample,
    pub stage4: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl SpatialBranch {
    pub fn new(init: &mut Init, name: &str, bands: usize, channels: usize, endmembers: usize, window: usize) -> Result<Self> {
        let c = channels;
        let msda = |init: &mut Init, n: String, width: usize, heads: usize| -> Result<TransformerBlock> {
            TransformerBlock::msda(init, &n, &AttentionConfig::multi_scale(width, heads, window)?)
        };
        let tokenizer = OverlappingTokenizer::new(init, &format!("{name}.tok"), bands, c);
        let stage1 = (0..2)
            .map(|i| msda(init, format!("{name}.s1.{i}"), c, 3))
            .collect::<Result<_>>()?;
        let down1 = Downsample::new(init, &format!("{name}.down1"), c);
        let stage2 = vec![msda(init, format!("{name}.s2.0"), 2 * c, 6)?];
        let down2 = Downsample::new(init, &format!("{name}.down2"), 2 * c);
        let stage3 = (0..2)
            .map(|i| TransformerBlock::mhsa(init, &format!("{name}.s3.{i}"), 4 * c, 12))
            .collect::<Result<_>>()?;
        let down3 = Downsample::new(init, &format!("{name}.down3"), 4 * c);
        let stage4 = vec![TransformerBlock::mhsa(init, &format!("{name}.s4.0"), 8 * c, 24)?];
        let norm = LayerNorm::new(init, &format!("{name}.norm"), 8 * c);
        let head = Linear::new(init, &format!("{name}.head"), 8 * c, endmembers);
        Ok(Self {
            tokenizer,
            stage1,
            down1,
            stage2,
            down2,
            stage3,
            down3,
            stage4,
            norm,
            head,
        })
    }

    /// Output of the tokenizer and of each stage, in order.
    pub fn stages<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<Vec<Var<'t>>> {
        let shape = y.shape();
        if shape.len() != 3 || shape[0] < MIN_SIDE || shape[1] < MIN_SIDE {
            return Err(invalid(
                "spatial_branch",
                format!("image {shape:?} smaller than {MIN_SIDE}x{MIN_SIDE}"),
            ));
        }
        let run = |blocks: &[TransformerBlock], x: Var<'t>| blocks.iter().try_fold(x, |x, b| b.forward(p, x));
        let x = run(&self.stage1, self.tokenizer.forward(p, y)?)?;
        let x2 = run(&self.stage2, self.down1.forward(p, x)?)?;
        let x3 = run(&self.stage3, self.down2.forward(p, x2)?)?;
        let x4 = run(&self.stage4, self.down3.forward(p, x3)?)?;
        Ok(vec![x, x2, x3, x4])
    }

    /// `(rows, cols, R)` spatial features.
    pub fn forward<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let (rows, cols) = (y.shape()[0], y.shape()[1]);
        let last = self.norm.forward(p, *self.stages(p, y)?.last().expect("four stages"))?;
        let s = last.shape();
        // the per-pixel head commutes with resizing, so it runs on the
        // small grid
        let projected = self.head.forward(p, last.reshape(&[s[0] * s[1], s[2]])?)?;
        projected.left_apply(&resize_matrix(s[0], s[1], rows, cols), &[rows, cols])
    }
}
