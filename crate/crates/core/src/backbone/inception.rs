use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{avg_pool_3x3_same, global_avg_pool, max_pool, Activation, ConvBn, ConvOpts, DropoutRng, SeededDropout};
use super::Network;

const EPS: f64 = 1e-3;

/// torchvision `BasicConv2d`: bias-free conv, BatchNorm (eps 1e-3), ReLU.
fn basic(c_in: usize, c_out: usize, opts: ConvOpts, vb: VarBuilder) -> Result<ConvBn> {
    ConvBn::new(c_in, c_out, opts, EPS, Activation::Relu, &vb, "conv", "bn")
}

fn k1(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<ConvBn> {
    basic(c_in, c_out, ConvOpts::square(1, 1, 0), vb)
}

fn k1x7(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<ConvBn> {
    basic(c_in, c_out, ConvOpts::rect((1, 7), (0, 3)), vb)
}

fn k7x1(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<ConvBn> {
    basic(c_in, c_out, ConvOpts::rect((7, 1), (3, 0)), vb)
}

fn chain(layers: &[ConvBn], x: &Tensor, train: bool) -> Result<Tensor> {
    let mut x = x.clone();
    for l in layers {
        x = l.forward_t(&x, train)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
enum Mixed {
    A { b1: ConvBn, b5: Vec<ConvBn>, b3: Vec<ConvBn>, pool: ConvBn },
    B { b3: ConvBn, b3dbl: Vec<ConvBn> },
    C { b1: ConvBn, b7: Vec<ConvBn>, b7dbl: Vec<ConvBn>, pool: ConvBn },
    D { b3: Vec<ConvBn>, b7x3: Vec<ConvBn> },
    E { b1: ConvBn, b3_1: ConvBn, b3_2a: ConvBn, b3_2b: ConvBn, d1: ConvBn, d2: ConvBn, d3a: ConvBn, d3b: ConvBn, pool: ConvBn },
}

impl Mixed {
    fn a(c_in: usize, pool_features: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Mixed::A {
            b1: k1(c_in, 64, vb.pp("branch1x1"))?,
            b5: vec![k1(c_in, 48, vb.pp("branch5x5_1"))?, basic(48, 64, ConvOpts::square(5, 1, 2), vb.pp("branch5x5_2"))?],
            b3: vec![
                k1(c_in, 64, vb.pp("branch3x3dbl_1"))?,
                basic(64, 96, ConvOpts::square(3, 1, 1), vb.pp("branch3x3dbl_2"))?,
                basic(96, 96, ConvOpts::square(3, 1, 1), vb.pp("branch3x3dbl_3"))?,
            ],
            pool: k1(c_in, pool_features, vb.pp("branch_pool"))?,
        })
    }

    fn b(c_in: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Mixed::B {
            b3: basic(c_in, 384, ConvOpts::square(3, 2, 0), vb.pp("branch3x3"))?,
            b3dbl: vec![
                k1(c_in, 64, vb.pp("branch3x3dbl_1"))?,
                basic(64, 96, ConvOpts::square(3, 1, 1), vb.pp("branch3x3dbl_2"))?,
                basic(96, 96, ConvOpts::square(3, 2, 0), vb.pp("branch3x3dbl_3"))?,
            ],
        })
    }

    fn c(c_in: usize, c7: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Mixed::C {
            b1: k1(c_in, 192, vb.pp("branch1x1"))?,
            b7: vec![k1(c_in, c7, vb.pp("branch7x7_1"))?, k1x7(c7, c7, vb.pp("branch7x7_2"))?, k7x1(c7, 192, vb.pp("branch7x7_3"))?],
            b7dbl: vec![
                k1(c_in, c7, vb.pp("branch7x7dbl_1"))?,
                k7x1(c7, c7, vb.pp("branch7x7dbl_2"))?,
                k1x7(c7, c7, vb.pp("branch7x7dbl_3"))?,
                k7x1(c7, c7, vb.pp("branch7x7dbl_4"))?,
                k1x7(c7, 192, vb.pp("branch7x7dbl_5"))?,
            ],
            pool: k1(c_in, 192, vb.pp("branch_pool"))?,
        })
    }

    fn d(c_in: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Mixed::D {
            b3: vec![k1(c_in, 192, vb.pp("branch3x3_1"))?, basic(192, 320, ConvOpts::square(3, 2, 0), vb.pp("branch3x3_2"))?],
            b7x3: vec![
                k1(c_in, 192, vb.pp("branch7x7x3_1"))?,
                k1x7(192, 192, vb.pp("branch7x7x3_2"))?,
                k7x1(192, 192, vb.pp("branch7x7x3_3"))?,
                basic(192, 192, ConvOpts::square(3, 2, 0), vb.pp("branch7x7x3_4"))?,
            ],
        })
    }

    fn e(c_in: usize, vb: VarBuilder) -> Result<Self> {
        let k1x3 = ConvOpts::rect((1, 3), (0, 1));
        let k3x1 = ConvOpts::rect((3, 1), (1, 0));
        Ok(Mixed::E {
            b1: k1(c_in, 320, vb.pp("branch1x1"))?,
            b3_1: k1(c_in, 384, vb.pp("branch3x3_1"))?,
            b3_2a: basic(384, 384, k1x3, vb.pp("branch3x3_2a"))?,
            b3_2b: basic(384, 384, k3x1, vb.pp("branch3x3_2b"))?,
            d1: k1(c_in, 448, vb.pp("branch3x3dbl_1"))?,
            d2: basic(448, 384, ConvOpts::square(3, 1, 1), vb.pp("branch3x3dbl_2"))?,
            d3a: basic(384, 384, k1x3, vb.pp("branch3x3dbl_3a"))?,
            d3b: basic(384, 384, k3x1, vb.pp("branch3x3dbl_3b"))?,
            pool: k1(c_in, 192, vb.pp("branch_pool"))?,
        })
    }

    fn forward_t(&self, x: &Tensor, t: bool) -> Result<Tensor> {
        let parts = match self {
            Mixed::A { b1, b5, b3, pool } => vec![
                b1.forward_t(x, t)?,
                chain(b5, x, t)?,
                chain(b3, x, t)?,
                pool.forward_t(&avg_pool_3x3_same(x)?, t)?,
            ],
            Mixed::B { b3, b3dbl } => {
                vec![b3.forward_t(x, t)?, chain(b3dbl, x, t)?, max_pool(x, 3, 2)?]
            }
            Mixed::C { b1, b7, b7dbl, pool } => vec![
                b1.forward_t(x, t)?,
                chain(b7, x, t)?,
                chain(b7dbl, x, t)?,
                pool.forward_t(&avg_pool_3x3_same(x)?, t)?,
            ],
            Mixed::D { b3, b7x3 } => vec![chain(b3, x, t)?, chain(b7x3, x, t)?, max_pool(x, 3, 2)?],
            Mixed::E { b1, b3_1, b3_2a, b3_2b, d1, d2, d3a, d3b, pool } => {
                let s = b3_1.forward_t(x, t)?;
                let d = d2.forward_t(&d1.forward_t(x, t)?, t)?;
                vec![
                    b1.forward_t(x, t)?,
                    b3_2a.forward_t(&s, t)?,
                    b3_2b.forward_t(&s, t)?,
                    d3a.forward_t(&d, t)?,
                    d3b.forward_t(&d, t)?,
                    pool.forward_t(&avg_pool_3x3_same(x)?, t)?,
                ]
            }
        };
        Tensor::cat(&parts, 1)
    }
}

/// Inception-v3 without the auxiliary classifier. Minimum input side is 75.
#[derive(Debug, Clone)]
pub struct InceptionV3 {
    stem: Vec<ConvBn>,
    stem2: Vec<ConvBn>,
    mixed: Vec<Mixed>,
    dropout: SeededDropout,
}

impl InceptionV3 {
    pub fn new(vb: VarBuilder, dropout_rng: DropoutRng) -> Result<Self> {
        let stem = vec![
            basic(3, 32, ConvOpts::square(3, 2, 0), vb.pp("Conv2d_1a_3x3"))?,
            basic(32, 32, ConvOpts::square(3, 1, 0), vb.pp("Conv2d_2a_3x3"))?,
            basic(32, 64, ConvOpts::square(3, 1, 1), vb.pp("Conv2d_2b_3x3"))?,
        ];
        let stem2 = vec![
            k1(64, 80, vb.pp("Conv2d_3b_1x1"))?,
            basic(80, 192, ConvOpts::square(3, 1, 0), vb.pp("Conv2d_4a_3x3"))?,
        ];
        let mixed = vec![
            Mixed::a(192, 32, vb.pp("Mixed_5b"))?,
            Mixed::a(256, 64, vb.pp("Mixed_5c"))?,
            Mixed::a(288, 64, vb.pp("Mixed_5d"))?,
            Mixed::b(288, vb.pp("Mixed_6a"))?,
            Mixed::c(768, 128, vb.pp("Mixed_6b"))?,
            Mixed::c(768, 160, vb.pp("Mixed_6c"))?,
            Mixed::c(768, 160, vb.pp("Mixed_6d"))?,
            Mixed::c(768, 192, vb.pp("Mixed_6e"))?,
            Mixed::d(768, vb.pp("Mixed_7a"))?,
            Mixed::e(1280, vb.pp("Mixed_7b"))?,
            Mixed::e(2048, vb.pp("Mixed_7c"))?,
        ];
        Ok(InceptionV3 { stem, stem2, mixed, dropout: SeededDropout::new(0.5, dropout_rng) })
    }
}

impl Network for InceptionV3 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = max_pool(&chain(&self.stem, x, train)?, 3, 2)?;
        let mut x = max_pool(&chain(&self.stem2, &x, train)?, 3, 2)?;
        for m in &self.mixed {
            x = m.forward_t(&x, train)?;
        }
        Ok(x)
    }

    fn embed(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.dropout.forward_t(&global_avg_pool(&self.features(x, train)?)?, train)
    }

    fn feature_dim(&self) -> usize {
        2048
    }

    fn embed_dim(&self) -> usize {
        2048
    }

    fn head_name(&self) -> &'static str {
        "fc"
    }

    fn min_input(&self) -> usize {
        75
    }
}
