use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{adaptive_avg_pool, global_avg_pool, max_pool, Conv, ConvOpts, Dense, DropoutRng, SeededDropout};
use super::Network;

/// AlexNet in the torchvision single-tower layout (64-192-384-256-256).
///
/// The classifier keeps fc6/fc7; only the final 1000-way layer is the head.
#[derive(Debug, Clone)]
pub struct AlexNet {
    convs: Vec<Conv>,
    fc6: Dense,
    fc7: Dense,
    dropout: SeededDropout,
}

impl AlexNet {
    pub fn new(vb: VarBuilder, dropout_rng: DropoutRng) -> Result<Self> {
        let f = vb.pp("features");
        let spec = [
            (0, 3, 64, ConvOpts::square(11, 4, 2)),
            (3, 64, 192, ConvOpts::square(5, 1, 2)),
            (6, 192, 384, ConvOpts::square(3, 1, 1)),
            (8, 384, 256, ConvOpts::square(3, 1, 1)),
            (10, 256, 256, ConvOpts::square(3, 1, 1)),
        ];
        let convs = spec
            .into_iter()
            .map(|(idx, c_in, c_out, opts)| Conv::new(c_in, c_out, opts.with_bias(), f.pp(idx)))
            .collect::<Result<Vec<_>>>()?;
        let c = vb.pp("classifier");
        Ok(AlexNet {
            convs,
            fc6: Dense::new(256 * 6 * 6, 4096, c.pp(1))?,
            fc7: Dense::new(4096, 4096, c.pp(4))?,
            dropout: SeededDropout::new(0.5, dropout_rng),
        })
    }
}

impl Network for AlexNet {
    fn features(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        use candle_core::Module;
        let mut x = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?.relu()?;
            if matches!(i, 0 | 1 | 4) {
                x = max_pool(&x, 3, 2)?;
            }
        }
        Ok(x)
    }

    fn embed(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = adaptive_avg_pool(&self.features(x, train)?, 6)?.flatten_from(1)?;
        let x = self.fc6.forward(&self.dropout.forward_t(&x, train)?)?.relu()?;
        self.fc7.forward(&self.dropout.forward_t(&x, train)?)?.relu()
    }

    fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        global_avg_pool(&self.features(x, false)?)
    }

    fn feature_dim(&self) -> usize {
        256
    }

    fn embed_dim(&self) -> usize {
        4096
    }

    fn head_name(&self) -> &'static str {
        "classifier.6"
    }
}
