use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{global_avg_pool, max_pool_padded, Activation, ConvBn, ConvOpts};
use super::Network;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Depth {
    R18,
    R50,
}

#[derive(Debug, Clone)]
enum Block {
    Basic { a: ConvBn, b: ConvBn, down: Option<ConvBn> },
    Bottleneck { a: ConvBn, b: ConvBn, c: ConvBn, down: Option<ConvBn> },
}

fn conv_bn(c_in: usize, c_out: usize, opts: ConvOpts, act: Activation, vb: &VarBuilder, idx: &str) -> Result<ConvBn> {
    ConvBn::new(c_in, c_out, opts, EPS, act, vb, &format!("conv{idx}"), &format!("bn{idx}"))
}

fn downsample(c_in: usize, c_out: usize, stride: usize, vb: &VarBuilder) -> Result<Option<ConvBn>> {
    if stride == 1 && c_in == c_out {
        return Ok(None);
    }
    let vb = vb.pp("downsample");
    Ok(Some(ConvBn::new(c_in, c_out, ConvOpts::square(1, stride, 0), EPS, Activation::None, &vb, "0", "1")?))
}

impl Block {
    fn basic(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Block::Basic {
            a: conv_bn(c_in, c_out, ConvOpts::square(3, stride, 1), Activation::Relu, &vb, "1")?,
            b: conv_bn(c_out, c_out, ConvOpts::square(3, 1, 1), Activation::None, &vb, "2")?,
            down: downsample(c_in, c_out, stride, &vb)?,
        })
    }

    fn bottleneck(c_in: usize, width: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let c_out = width * 4;
        Ok(Block::Bottleneck {
            a: conv_bn(c_in, width, ConvOpts::square(1, 1, 0), Activation::Relu, &vb, "1")?,
            b: conv_bn(width, width, ConvOpts::square(3, stride, 1), Activation::Relu, &vb, "2")?,
            c: conv_bn(width, c_out, ConvOpts::square(1, 1, 0), Activation::None, &vb, "3")?,
            down: downsample(c_in, c_out, stride, &vb)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (y, down) = match self {
            Block::Basic { a, b, down } => (b.forward_t(&a.forward_t(x, train)?, train)?, down),
            Block::Bottleneck { a, b, c, down } => {
                (c.forward_t(&b.forward_t(&a.forward_t(x, train)?, train)?, train)?, down)
            }
        };
        let shortcut = match down {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

/// ResNet-18 / ResNet-50 (torchvision layout, stride on the 3×3 convolution).
#[derive(Debug, Clone)]
pub struct ResNet {
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    width: usize,
}

impl ResNet {
    pub fn new(depth: Depth, vb: VarBuilder) -> Result<Self> {
        let stem = ConvBn::new(3, 64, ConvOpts::square(7, 2, 3), EPS, Activation::Relu, &vb, "conv1", "bn1")?;
        let (blocks, expansion) = match depth {
            Depth::R18 => ([2, 2, 2, 2], 1),
            Depth::R50 => ([3, 4, 6, 3], 4),
        };
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 64;
        for (s, &n) in blocks.iter().enumerate() {
            let width = 64 << s;
            let vbs = vb.pp(format!("layer{}", s + 1));
            let mut stage = Vec::with_capacity(n);
            for i in 0..n {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let block = match depth {
                    Depth::R18 => Block::basic(c_in, width, stride, vbs.pp(i))?,
                    Depth::R50 => Block::bottleneck(c_in, width, stride, vbs.pp(i))?,
                };
                c_in = width * expansion;
                stage.push(block);
            }
            stages.push(stage);
        }
        Ok(ResNet { stem, stages, width: c_in })
    }
}

impl Network for ResNet {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = max_pool_padded(&self.stem.forward_t(x, train)?, 3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward_t(&x, train)?;
            }
        }
        Ok(x)
    }

    fn embed(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        global_avg_pool(&self.features(x, train)?)
    }

    fn feature_dim(&self) -> usize {
        self.width
    }

    fn embed_dim(&self) -> usize {
        self.width
    }

    fn head_name(&self) -> &'static str {
        "fc"
    }
}
