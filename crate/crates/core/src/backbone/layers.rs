//! Building blocks shared by the backbone definitions.

use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::{BatchNorm, BatchNormConfig, Init, ModuleT, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Parameter storage with creation-order bookkeeping and seeded initialisation.
///
/// Candle's `VarMap` draws initial values from a thread-local generator; this
/// store samples every fresh tensor from a ChaCha stream so that a given seed
/// always yields the same network.
pub struct ParamStore {
    inner: Mutex<StoreState>,
    varmap: VarMap,
}

struct StoreState {
    order: Vec<String>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Arc<Self> {
        Arc::new(ParamStore {
            inner: Mutex::new(StoreState { order: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }),
            varmap: VarMap::new(),
        })
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Variable names in creation order.
    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().order.clone()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().unwrap().get(name).cloned()
    }

    /// Drops every variable whose name starts with `prefix`.
    pub fn remove_prefix(&self, prefix: &str) {
        let dotted = format!("{prefix}.");
        self.varmap.data().lock().unwrap().retain(|k, _| !k.starts_with(&dotted));
        self.inner.lock().unwrap().order.retain(|k| !k.starts_with(&dotted));
    }

    pub fn reseed(&self, seed: u64) {
        self.inner.lock().unwrap().rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn builder(self: &Arc<Self>) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(StoreHandle(Arc::clone(self))), DType::F32, Device::Cpu)
    }
}

struct StoreHandle(Arc<ParamStore>);

fn sample_init(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = shape.elem_count();
    match init {
        Init::Const(v) => vec![v as f32; n],
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up) as f32).collect(),
        Init::Randn { mean, stdev } => (0..n)
            .map(|_| (mean + stdev * Distribution::<f64>::sample(&StandardNormal, rng)) as f32)
            .collect(),
        Init::Kaiming { dist, fan, non_linearity } => {
            let fan = fan.for_shape(shape).max(1) as f64;
            let std = non_linearity.gain() / fan.sqrt();
            match dist {
                NormalOrUniform::Normal => {
                    (0..n).map(|_| (std * Distribution::<f64>::sample(&StandardNormal, rng)) as f32).collect()
                }
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                }
            }
        }
    }
}

impl candle_nn::var_builder::SimpleBackend for StoreHandle {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let store = &self.0;
        let mut data = store.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", var.shape(), s);
            }
            return Ok(var.as_tensor().clone());
        }
        let values = {
            let mut state = store.inner.lock().unwrap();
            state.order.push(name.to_string());
            sample_init(h, &s, &mut state.rng)
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let tensor = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(tensor)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.0.varmap.data().lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no variable named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.0.varmap.data().lock().unwrap().contains_key(name)
    }
}

/// True for BatchNorm running statistics, which are state but not learnable.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

const CONV_INIT: Init = Init::Kaiming {
    dist: NormalOrUniform::Normal,
    fan: FanInOut::FanOut,
    non_linearity: candle_nn::init::NonLinearity::ReLU,
};

/// 2-d convolution with independent vertical/horizontal kernel size and padding.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: (usize, usize),
    depthwise: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub bias: bool,
    pub depthwise: bool,
}

impl ConvOpts {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvOpts { kernel: (kernel, kernel), stride, padding: (padding, padding), bias: false, depthwise: false }
    }

    pub fn rect(kernel: (usize, usize), padding: (usize, usize)) -> Self {
        ConvOpts { kernel, stride: 1, padding, bias: false, depthwise: false }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.depthwise = true;
        self
    }
}

impl Conv {
    pub fn new(c_in: usize, c_out: usize, opts: ConvOpts, vb: VarBuilder) -> candle_core::Result<Self> {
        let in_per_group = if opts.depthwise { 1 } else { c_in };
        let weight = vb.get_with_hints((c_out, in_per_group, opts.kernel.0, opts.kernel.1), "weight", CONV_INIT)?;
        let bias = if opts.bias {
            let bound = 1.0 / ((in_per_group * opts.kernel.0 * opts.kernel.1) as f64).sqrt();
            Some(vb.get_with_hints(c_out, "bias", Init::Uniform { lo: -bound, up: bound })?)
        } else {
            None
        };
        Ok(Conv { weight, bias, stride: opts.stride, padding: opts.padding, depthwise: opts.depthwise })
    }

    fn forward_depthwise(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // shifted multiply-accumulate; candle's grouped conv splits into one conv per channel
        let (_, c, h, w) = x.dims4()?;
        let (kh, kw) = (self.weight.dim(2)?, self.weight.dim(3)?);
        let (ph, pw) = self.padding;
        let xp = x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?;
        let out_h = h + 2 * ph - kh + 1;
        let out_w = w + 2 * pw - kw + 1;
        let mut acc: Option<Tensor> = None;
        for i in 0..kh {
            for j in 0..kw {
                let tap = self.weight.narrow(2, i, 1)?.narrow(3, j, 1)?.reshape((1, c, 1, 1))?;
                let term = xp.narrow(2, i, out_h)?.narrow(3, j, out_w)?.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
        }
        let y = acc.expect("kernel has at least one tap");
        if self.stride == 1 {
            return Ok(y);
        }
        subsample(&y, self.stride)
    }
}

/// Keeps every `stride`-th row and column starting at 0.
fn subsample(x: &Tensor, stride: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let x = x.pad_with_zeros(2, 0, oh * stride - h)?.pad_with_zeros(3, 0, ow * stride - w)?;
    x.reshape((n, c, oh, stride, ow, stride))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((n, c, oh, ow))
}

impl candle_core::Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = if self.depthwise {
            self.forward_depthwise(x)?
        } else {
            let (ph, pw) = self.padding;
            if ph == pw {
                x.conv2d(&self.weight, ph, self.stride, 1, 1)?
            } else {
                x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?.conv2d(&self.weight, 0, self.stride, 1, 1)?
            }
        };
        match &self.bias {
            None => Ok(y),
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
        }
    }
}

pub fn batch_norm(channels: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<BatchNorm> {
    candle_nn::batch_norm(channels, BatchNormConfig { eps, ..Default::default() }, vb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => x.relu(),
            Activation::Silu => candle_nn::ops::silu(&x),
        }
    }
}

/// Convolution → BatchNorm → activation, the unit most backbones are made of.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    act: Activation,
}

impl ConvBn {
    /// `conv_name`/`bn_name` are the sub-paths used for the two layers.
    pub fn new(
        c_in: usize,
        c_out: usize,
        opts: ConvOpts,
        eps: f64,
        act: Activation,
        vb: &VarBuilder,
        conv_name: &str,
        bn_name: &str,
    ) -> candle_core::Result<Self> {
        let conv = Conv::new(c_in, c_out, opts, vb.pp(conv_name))?;
        let bn = batch_norm(c_out, eps, vb.pp(bn_name))?;
        Ok(ConvBn { conv, bn, act })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = candle_core::Module::forward(&self.conv, x)?;
        let y = self.bn.forward_t(&y, train)?;
        self.act.apply(y)
    }
}

/// Linear layer stored as (out, in) like torch.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = vb.get_with_hints((c_out, c_in), "weight", Init::Uniform { lo: -bound, up: bound })?;
        let bias = vb.get_with_hints(c_out, "bias", Init::Uniform { lo: -bound, up: bound })?;
        Ok(Dense { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Dropout whose masks come from a shared seeded stream.
#[derive(Debug, Clone)]
pub struct SeededDropout {
    p: f32,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

pub type DropoutRng = Arc<Mutex<ChaCha8Rng>>;

impl SeededDropout {
    pub fn new(p: f32, rng: DropoutRng) -> Self {
        SeededDropout { p, rng }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        if !train || self.p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f32> = {
            let mut rng = self.rng.lock().unwrap();
            (0..x.elem_count()).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect()
        };
        x.mul(&Tensor::from_vec(mask, x.shape(), x.device())?)
    }
}

/// Global average pooling, (N, C, H, W) → (N, C).
pub fn global_avg_pool(x: &Tensor) -> candle_core::Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

/// Adaptive average pooling with torch's bin boundaries.
pub fn adaptive_avg_pool(x: &Tensor, out: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out && w == out {
        return Ok(x.clone());
    }
    let bins = |len: usize| -> Vec<(usize, usize)> {
        (0..out).map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out))).collect()
    };
    let (rows, cols) = (bins(h), bins(w));
    let mut row_tensors = Vec::with_capacity(out);
    for &(r0, r1) in &rows {
        let band = x.narrow(2, r0, r1 - r0)?;
        let mut cells = Vec::with_capacity(out);
        for &(c0, c1) in &cols {
            cells.push(band.narrow(3, c0, c1 - c0)?.mean_keepdim(2)?.mean_keepdim(3)?);
        }
        row_tensors.push(Tensor::cat(&cells, 3)?);
    }
    Tensor::cat(&row_tensors, 2)
}

/// Max pooling with symmetric zero padding. Only valid after a ReLU, where
/// zero padding and -inf padding coincide.
pub fn max_pool_padded(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let x = if padding > 0 { x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)? } else { x.clone() };
    max_pool(&x, kernel, stride)
}

/// Max pooling without padding. candle only differentiates pooling when the
/// kernel equals the stride, so tracked tensors take the max over shifted
/// strided views instead.
pub fn max_pool(x: &Tensor, kernel: usize, stride: usize) -> candle_core::Result<Tensor> {
    if kernel == stride || !x.track_op() {
        return x.max_pool2d_with_stride(kernel, stride);
    }
    let views = window_views(x, kernel, stride)?;
    views[1..].iter().try_fold(views[0].clone(), |acc, v| acc.maximum(v))
}

/// 3×3 stride-1 average pooling with one pixel of zero padding, counting pads.
pub fn avg_pool_3x3_same(x: &Tensor) -> candle_core::Result<Tensor> {
    let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    if !x.track_op() {
        return x.avg_pool2d_with_stride(3, 1);
    }
    let views = window_views(&x, 3, 1)?;
    let sum = views[1..].iter().try_fold(views[0].clone(), |acc, v| acc + v)?;
    sum / 9.0
}

/// Every kernel offset of a pooling window as a tensor of output shape.
fn window_views(x: &Tensor, kernel: usize, stride: usize) -> candle_core::Result<Vec<Tensor>> {
    let (b, c, h, w) = x.dims4()?;
    if h < kernel || w < kernel {
        candle_core::bail!("pooling window {kernel} larger than input {h}x{w}");
    }
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    // pad the far edges so every offset can take a full oh*stride slice
    let x = x.pad_with_zeros(2, 0, stride)?.pad_with_zeros(3, 0, stride)?;
    let mut views = Vec::with_capacity(kernel * kernel);
    for dy in 0..kernel {
        let rows = x.narrow(2, dy, oh * stride)?;
        let rows = if stride > 1 { rows.reshape((b, c, oh, stride, w + stride))?.narrow(3, 0, 1)?.squeeze(3)? } else { rows };
        for dx in 0..kernel {
            let v = rows.narrow(3, dx, ow * stride)?;
            let v = if stride > 1 { v.reshape((b, c, oh, ow, stride))?.narrow(4, 0, 1)?.squeeze(4)? } else { v };
            views.push(v.contiguous()?);
        }
    }
    Ok(views)
}
