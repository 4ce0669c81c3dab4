use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{global_avg_pool, Activation, Conv, ConvBn, ConvOpts, DropoutRng, SeededDropout};
use super::Network;

const EPS: f64 = 1e-5;

fn cna(c_in: usize, c_out: usize, opts: ConvOpts, act: Activation, vb: &VarBuilder) -> Result<ConvBn> {
    ConvBn::new(c_in, c_out, opts, EPS, act, vb, "0", "1")
}

#[derive(Debug, Clone)]
struct SqueezeExcite {
    fc1: Conv,
    fc2: Conv,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_core::Module;
        let s = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let s = candle_nn::ops::silu(&self.fc1.forward(&s)?)?;
        let s = candle_nn::ops::sigmoid(&self.fc2.forward(&s)?)?;
        x.broadcast_mul(&s)
    }
}

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn new(c_in: usize, c_out: usize, expand_ratio: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp("block");
        let hidden = c_in * expand_ratio;
        let mut idx = 0;
        let expand = if expand_ratio != 1 {
            idx += 1;
            Some(cna(c_in, hidden, ConvOpts::square(1, 1, 0), Activation::Silu, &vb.pp(0))?)
        } else {
            None
        };
        let depthwise =
            cna(hidden, hidden, ConvOpts::square(kernel, stride, (kernel - 1) / 2).depthwise(), Activation::Silu, &vb.pp(idx))?;
        let squeeze = (c_in / 4).max(1);
        let se_vb = vb.pp(idx + 1);
        let se = SqueezeExcite {
            fc1: Conv::new(hidden, squeeze, ConvOpts::square(1, 1, 0).with_bias(), se_vb.pp("fc1"))?,
            fc2: Conv::new(squeeze, hidden, ConvOpts::square(1, 1, 0).with_bias(), se_vb.pp("fc2"))?,
        };
        let project = cna(hidden, c_out, ConvOpts::square(1, 1, 0), Activation::None, &vb.pp(idx + 2))?;
        Ok(MbConv { expand, depthwise, se, project, residual: stride == 1 && c_in == c_out })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        if let Some(e) = &self.expand {
            y = e.forward_t(&y, train)?;
        }
        let y = self.depthwise.forward_t(&y, train)?;
        let y = self.se.forward(&y)?;
        let y = self.project.forward_t(&y, train)?;
        // stochastic depth is not applied; residual blocks always keep their branch
        if self.residual {
            y + x
        } else {
            Ok(y)
        }
    }
}

/// EfficientNet-B0 in the torchvision layout.
#[derive(Debug, Clone)]
pub struct EfficientNetB0 {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    top: ConvBn,
    dropout: SeededDropout,
}

impl EfficientNetB0 {
    pub fn new(vb: VarBuilder, dropout_rng: DropoutRng) -> Result<Self> {
        let f = vb.pp("features");
        let stem = cna(3, 32, ConvOpts::square(3, 2, 1), Activation::Silu, &f.pp(0))?;
        // (expand ratio, kernel, stride, out channels, repeats)
        let stages = [(1, 3, 1, 16, 1), (6, 3, 2, 24, 2), (6, 5, 2, 40, 2), (6, 3, 2, 80, 3), (6, 5, 1, 112, 3), (6, 5, 2, 192, 4), (6, 3, 1, 320, 1)];
        let mut blocks = Vec::new();
        let mut c_in = 32;
        for (s, &(expand, kernel, stride, c_out, repeats)) in stages.iter().enumerate() {
            let stage_vb = f.pp(s + 1);
            for i in 0..repeats {
                let stride = if i == 0 { stride } else { 1 };
                blocks.push(MbConv::new(c_in, c_out, expand, kernel, stride, stage_vb.pp(i))?);
                c_in = c_out;
            }
        }
        let top = cna(320, 1280, ConvOpts::square(1, 1, 0), Activation::Silu, &f.pp(8))?;
        Ok(EfficientNetB0 { stem, blocks, top, dropout: SeededDropout::new(0.2, dropout_rng) })
    }
}

impl Network for EfficientNetB0 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.stem.forward_t(x, train)?;
        for b in &self.blocks {
            x = b.forward_t(&x, train)?;
        }
        self.top.forward_t(&x, train)
    }

    fn embed(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.dropout.forward_t(&global_avg_pool(&self.features(x, train)?)?, train)
    }

    fn feature_dim(&self) -> usize {
        1280
    }

    fn embed_dim(&self) -> usize {
        1280
    }

    fn head_name(&self) -> &'static str {
        "classifier.1"
    }
}
