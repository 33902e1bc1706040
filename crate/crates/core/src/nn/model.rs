//! Encoder-decoder segmenters with a shared encoder and three independent
//! decoder heads.
//!
//! Encoder: `stages` × (conv-norm-relu ×2, 2×2 max-pool), channels doubling
//! from `base_channels`. Each head mirrors it: per level a 2×2 stride-2
//! transposed convolution followed by conv-norm-relu ×2, then a 1×1
//! convolution to two class logits. The unet-style variant concatenates the
//! matching encoder feature map before every decoder conv block; the
//! segnet-style variant has no skip connections.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    conv3x3_backward, conv3x3_forward, maxpool_backward, maxpool_forward, norm_backward,
    norm_eval_forward, norm_train_forward, pointwise_backward, pointwise_forward, relu_backward,
    relu_inplace, upconv_backward, upconv_forward, NormCache,
};
use super::tensor::Tensor;
use super::{ModelError, Scalar};
use crate::corpus::MaskTriple;
use crate::grid::{Grid, Image, Mask};
use crate::seeds::{rng_for, tag};

/// Probabilities are clamped to `[LOSS_EPS, 1 − LOSS_EPS]` inside the loss.
pub const LOSS_EPS: f64 = 1e-7;

/// Number of decoder heads (one per contour).
pub const HEADS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "segnet-style")]
    SegnetStyle,
    #[serde(rename = "unet-style")]
    UnetStyle,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::SegnetStyle, Architecture::UnetStyle];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::SegnetStyle => "segnet-style",
            Architecture::UnetStyle => "unet-style",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "segnet-style" | "segnet" => Ok(Architecture::SegnetStyle),
            "unet-style" | "unet" => Ok(Architecture::UnetStyle),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

fn default_stages() -> usize {
    3
}
fn default_base_channels() -> usize {
    16
}
fn default_kernel_size() -> usize {
    3
}
fn default_pool_factor() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Architecture,
    pub input_width: usize,
    pub input_height: usize,
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_pool_factor")]
    pub pool_factor: usize,
    #[serde(default)]
    pub seed: u64,
    /// Reflect-pad inputs up to the next multiple of `pool_factor^stages`
    /// and crop predictions back, instead of rejecting such dims.
    #[serde(default)]
    pub auto_pad: bool,
}

impl ModelConfig {
    pub fn new(variant: Architecture, input_width: usize, input_height: usize) -> Self {
        Self {
            variant,
            input_width,
            input_height,
            stages: default_stages(),
            base_channels: default_base_channels(),
            kernel_size: default_kernel_size(),
            pool_factor: default_pool_factor(),
            seed: 0,
            auto_pad: false,
        }
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn granularity(&self) -> usize {
        self.pool_factor.pow(self.stages as u32)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.kernel_size != 3 {
            return bad(format!("kernel_size must be 3, got {}", self.kernel_size));
        }
        if self.pool_factor != 2 {
            return bad(format!("pool_factor must be 2, got {}", self.pool_factor));
        }
        if !(2..=5).contains(&self.stages) {
            return bad(format!("stages must be in [2, 5], got {}", self.stages));
        }
        if self.base_channels < 4 {
            return bad(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            ));
        }
        if self.input_width == 0 || self.input_height == 0 {
            return bad("input dims must be positive".into());
        }
        let g = self.granularity();
        if !self.auto_pad
            && (!self.input_width.is_multiple_of(g) || !self.input_height.is_multiple_of(g))
        {
            return bad(format!(
                "input {}x{} not divisible by {g} (pool_factor^stages); enable auto_pad or use fewer stages",
                self.input_width, self.input_height
            ));
        }
        let (pw, ph) = self.padded_dims();
        if pw - self.input_width >= self.input_width || ph - self.input_height >= self.input_height
        {
            return bad("input too small to reflect-pad".into());
        }
        Ok(())
    }

    /// Network input dims after optional padding.
    pub fn padded_dims(&self) -> (usize, usize) {
        let g = self.granularity().max(1);
        if self.auto_pad {
            (
                self.input_width.div_ceil(g) * g,
                self.input_height.div_ceil(g) * g,
            )
        } else {
            (self.input_width, self.input_height)
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Parameter categories, used to group coordinates in gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    ConvKernel,
    NormScale,
    NormShift,
    UpKernel,
    UpBias,
    OutKernel,
    OutBias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    cout: usize,
    w: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    c: usize,
    /// Scales then shifts, `2c` values.
    gb: usize,
    rmean: usize,
    rvar: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockP {
    conv1: ConvP,
    norm1: NormP,
    conv2: ConvP,
    norm2: NormP,
}

#[derive(Debug, Clone, Copy)]
struct UpP {
    cin: usize,
    cout: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct HeadP {
    /// Decode steps from the deepest level upward.
    ups: Vec<UpP>,
    blocks: Vec<BlockP>,
    out_cin: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    enc: Vec<BlockP>,
    heads: Vec<HeadP>,
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
    plen: usize,
    blen: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        let len = shape.iter().product();
        let offset = self.plen;
        self.params.push(ParamSpec {
            name,
            shape,
            offset,
            len,
            kind,
        });
        self.plen += len;
        offset
    }

    fn buffer(&mut self, name: String, len: usize) -> usize {
        let offset = self.blen;
        self.buffers.push(ParamSpec {
            name,
            shape: vec![len],
            offset,
            len,
            kind: ParamKind::NormScale,
        });
        self.blen += len;
        offset
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize) -> ConvP {
        let w = self.param(
            format!("{name}.weight"),
            vec![cout, cin, 3, 3],
            ParamKind::ConvKernel,
        );
        ConvP {
            cout,
            w,
            len: cout * cin * 9,
        }
    }

    fn norm(&mut self, name: String, c: usize) -> NormP {
        let gb = self.param(format!("{name}.scale"), vec![c], ParamKind::NormScale);
        self.param(format!("{name}.shift"), vec![c], ParamKind::NormShift);
        let rmean = self.buffer(format!("{name}.running_mean"), c);
        let rvar = self.buffer(format!("{name}.running_var"), c);
        NormP { c, gb, rmean, rvar }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> BlockP {
        BlockP {
            conv1: self.conv(format!("{name}.conv1"), cin, cout),
            norm1: self.norm(format!("{name}.norm1"), cout),
            conv2: self.conv(format!("{name}.conv2"), cout, cout),
            norm2: self.norm(format!("{name}.norm2"), cout),
        }
    }
}

fn build_plan(config: &ModelConfig) -> (Plan, LayoutBuilder) {
    let mut lb = LayoutBuilder::default();
    let s = config.stages;
    let ch: Vec<usize> = (0..s).map(|l| config.base_channels << l).collect();
    let enc = (0..s)
        .map(|l| {
            let cin = if l == 0 { 1 } else { ch[l - 1] };
            lb.block(&format!("enc{l}"), cin, ch[l])
        })
        .collect();
    let unet = config.variant == Architecture::UnetStyle;
    let heads = (0..HEADS)
        .map(|h| {
            let mut cur = ch[s - 1];
            let (mut ups, mut blocks) = (Vec::new(), Vec::new());
            for level in (0..s).rev() {
                let name = format!("head{}.up{level}", h + 1);
                let w = lb.param(
                    format!("{name}.weight"),
                    vec![cur, ch[level], 2, 2],
                    ParamKind::UpKernel,
                );
                let b = lb.param(format!("{name}.bias"), vec![ch[level]], ParamKind::UpBias);
                ups.push(UpP {
                    cin: cur,
                    cout: ch[level],
                    w,
                    b,
                });
                let cin = if unet { 2 * ch[level] } else { ch[level] };
                blocks.push(lb.block(&format!("head{}.dec{level}", h + 1), cin, ch[level]));
                cur = ch[level];
            }
            let out_w = lb.param(
                format!("head{}.out.weight", h + 1),
                vec![2, cur, 1, 1],
                ParamKind::OutKernel,
            );
            let out_b = lb.param(
                format!("head{}.out.bias", h + 1),
                vec![2],
                ParamKind::OutBias,
            );
            HeadP {
                ups,
                blocks,
                out_cin: cur,
                out_w,
                out_b,
            }
        })
        .collect();
    (Plan { enc, heads }, lb)
}

/// Per-pixel class-1 (tissue) probabilities for the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriple {
    pub p1: Grid<f32>,
    pub p2: Grid<f32>,
    pub p3: Grid<f32>,
}

impl PredictionTriple {
    pub fn as_array(&self) -> [&Grid<f32>; 3] {
        [&self.p1, &self.p2, &self.p3]
    }

    /// Class decision per head: tissue iff `p ≥ 0.5`.
    pub fn threshold(&self) -> MaskTriple {
        let t = |p: &Grid<f32>| p.map(|&v| u8::from(v >= 0.5));
        MaskTriple {
            m1: t(&self.p1),
            m2: t(&self.p2),
            m3: t(&self.p3),
        }
    }
}

/// Gradients laid out exactly like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub data: Vec<T>,
    specs: std::sync::Arc<Vec<ParamSpec>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        let s = self.specs.iter().find(|s| s.name == name)?;
        Some(&self.data[s.offset..s.offset + s.len])
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Batch statistics gathered during a training-mode pass, to be folded
/// into the running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    entries: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

struct BlockTape<T> {
    input: Tensor<T>,
    n1: NormCache<T>,
    a1: Tensor<T>,
    n2: NormCache<T>,
    out: Tensor<T>,
}

struct Tape<T> {
    enc: Vec<BlockTape<T>>,
    pool_args: Vec<Vec<u8>>,
    bottleneck: Tensor<T>,
    heads: Vec<Vec<BlockTape<T>>>,
}

/// Loss and gradients of one training-mode pass.
pub struct TrainPass<T> {
    pub loss: f64,
    pub grads: Gradients<T>,
    pub stats: BatchStats,
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Scalar = f32> {
    config: ModelConfig,
    specs: std::sync::Arc<Vec<ParamSpec>>,
    buffer_specs: std::sync::Arc<Vec<ParamSpec>>,
    plan: Plan,
    params: Vec<T>,
    buffers: Vec<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Build and initialize: He-uniform kernels (bound `sqrt(6 / fan_in)`),
    /// zero biases and shifts, unit scales, running mean 0 and variance 1.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (plan, lb) = build_plan(&config);
        let mut rng = rng_for(&[tag("model-init"), config.seed]);
        let mut params = vec![T::zero(); lb.plen];
        for spec in &lb.params {
            let slot = &mut params[spec.offset..spec.offset + spec.len];
            match spec.kind {
                ParamKind::ConvKernel | ParamKind::OutKernel | ParamKind::UpKernel => {
                    let fan_in = match spec.kind {
                        ParamKind::UpKernel => spec.shape[0],
                        _ => spec.shape[1..].iter().product(),
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for v in slot {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                }
                ParamKind::NormScale => slot.fill(T::one()),
                ParamKind::NormShift | ParamKind::UpBias | ParamKind::OutBias => {}
            }
        }
        let mut buffers = vec![T::zero(); lb.blen];
        for spec in &lb.buffers {
            if spec.name.ends_with("running_var") {
                buffers[spec.offset..spec.offset + spec.len].fill(T::one());
            }
        }
        Ok(Self {
            config,
            specs: std::sync::Arc::new(lb.params),
            buffer_specs: std::sync::Arc::new(lb.buffers),
            plan,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn buffer_specs(&self) -> &[ParamSpec] {
        &self.buffer_specs
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[T] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [T] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        let s = self.specs.iter().find(|s| s.name == name)?;
        Some(&self.params[s.offset..s.offset + s.len])
    }

    /// The same network in another precision.
    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        SegModel {
            config: self.config.clone(),
            specs: self.specs.clone(),
            buffer_specs: self.buffer_specs.clone(),
            plan: self.plan.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<T>,
        buffers: Vec<T>,
    ) -> Result<Self, ModelError> {
        let mut m = Self::new(config)?;
        if params.len() != m.params.len() || buffers.len() != m.buffers.len() {
            return Err(ModelError::Checkpoint(format!(
                "weights hold {}+{} values, config expects {}+{}",
                params.len(),
                buffers.len(),
                m.params.len(),
                m.buffers.len()
            )));
        }
        m.params = params;
        m.buffers = buffers;
        Ok(m)
    }

    fn check_frames(&self, frames: &[Image]) -> Result<(), ModelError> {
        let want = (self.config.input_width, self.config.input_height);
        if let Some(f) = frames.iter().find(|f| f.dims() != want) {
            return Err(ModelError::Shape(format!(
                "frame {}x{} does not match model input {}x{}",
                f.width(),
                f.height(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    fn pad_offsets(&self) -> (usize, usize) {
        let (pw, ph) = self.config.padded_dims();
        (
            (pw - self.config.input_width) / 2,
            (ph - self.config.input_height) / 2,
        )
    }

    /// Stack frames into a `1×N×H×W` tensor, reflect-padding when enabled.
    fn input_tensor(&self, frames: &[Image]) -> Tensor<T> {
        let (pw, ph) = self.config.padded_dims();
        let (ox, oy) = self.pad_offsets();
        let (w, h) = (
            self.config.input_width as isize,
            self.config.input_height as isize,
        );
        let reflect = |v: isize, n: isize| -> usize {
            let r = if v < 0 {
                -v
            } else if v >= n {
                2 * (n - 1) - v
            } else {
                v
            };
            r as usize
        };
        let mut t = Tensor::zeros(1, frames.len(), ph, pw);
        for (b, f) in frames.iter().enumerate() {
            for y in 0..ph {
                let sy = reflect(y as isize - oy as isize, h);
                for x in 0..pw {
                    let sx = reflect(x as isize - ox as isize, w);
                    let i = t.idx(0, b, y, x);
                    t.data[i] = T::of(f64::from(f.at(sx, sy)));
                }
            }
        }
        t
    }

    fn slice(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn block_train(&self, b: &BlockP, input: Tensor<T>) -> BlockTape<T> {
        let z1 = conv3x3_forward(&input, self.slice(b.conv1.w, b.conv1.len), b.conv1.cout);
        let (mut a1, n1) = norm_train_forward(
            z1,
            self.slice(b.norm1.gb, 2 * b.norm1.c),
            (b.norm1.rmean, b.norm1.rvar),
        );
        relu_inplace(&mut a1);
        let z2 = conv3x3_forward(&a1, self.slice(b.conv2.w, b.conv2.len), b.conv2.cout);
        let (mut out, n2) = norm_train_forward(
            z2,
            self.slice(b.norm2.gb, 2 * b.norm2.c),
            (b.norm2.rmean, b.norm2.rvar),
        );
        relu_inplace(&mut out);
        BlockTape {
            input,
            n1,
            a1,
            n2,
            out,
        }
    }

    fn norm_eval(&self, z: &mut Tensor<T>, n: &NormP) {
        norm_eval_forward(
            z,
            self.slice(n.gb, 2 * n.c),
            &self.buffers[n.rmean..n.rmean + n.c],
            &self.buffers[n.rvar..n.rvar + n.c],
        );
    }

    fn block_eval(&self, b: &BlockP, input: &Tensor<T>) -> Tensor<T> {
        let mut z = conv3x3_forward(input, self.slice(b.conv1.w, b.conv1.len), b.conv1.cout);
        self.norm_eval(&mut z, &b.norm1);
        relu_inplace(&mut z);
        let mut out = conv3x3_forward(&z, self.slice(b.conv2.w, b.conv2.len), b.conv2.cout);
        self.norm_eval(&mut out, &b.norm2);
        relu_inplace(&mut out);
        out
    }

    fn block_backward(
        &self,
        b: &BlockP,
        tape: &BlockTape<T>,
        mut dout: Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        relu_backward(&mut dout, &tape.out);
        let n2 = &b.norm2;
        let dz2 = norm_backward(
            dout,
            &tape.n2,
            self.slice(n2.gb, 2 * n2.c),
            &mut grads[n2.gb..n2.gb + 2 * n2.c],
        );
        let w2 = b.conv2.w..b.conv2.w + b.conv2.len;
        let mut da1 = conv3x3_backward(
            &tape.a1,
            &self.params[w2.clone()],
            &dz2,
            &mut grads[w2],
            true,
        )
        .expect("input gradient requested");
        relu_backward(&mut da1, &tape.a1);
        let n1 = &b.norm1;
        let dz1 = norm_backward(
            da1,
            &tape.n1,
            self.slice(n1.gb, 2 * n1.c),
            &mut grads[n1.gb..n1.gb + 2 * n1.c],
        );
        let w1 = b.conv1.w..b.conv1.w + b.conv1.len;
        conv3x3_backward(
            &tape.input,
            &self.params[w1.clone()],
            &dz1,
            &mut grads[w1],
            need_dx,
        )
    }

    fn up_forward(&self, u: &UpP, x: &Tensor<T>) -> Tensor<T> {
        upconv_forward(
            x,
            self.slice(u.w, u.cin * u.cout * 4),
            self.slice(u.b, u.cout),
            u.cout,
        )
    }

    fn out_forward(&self, head: &HeadP, x: &Tensor<T>) -> Tensor<T> {
        pointwise_forward(
            x,
            self.slice(head.out_w, 2 * head.out_cin),
            self.slice(head.out_b, 2),
            2,
        )
    }

    fn unet(&self) -> bool {
        self.config.variant == Architecture::UnetStyle
    }

    /// Training-mode pass (batch statistics); returns per-head logits.
    fn forward_train(&self, input: Tensor<T>) -> (Tape<T>, Vec<Tensor<T>>) {
        let mut enc = Vec::with_capacity(self.plan.enc.len());
        let mut pool_args = Vec::new();
        let mut x = input;
        for b in &self.plan.enc {
            let tape = self.block_train(b, x);
            let (pooled, arg) = maxpool_forward(&tape.out);
            pool_args.push(arg);
            enc.push(tape);
            x = pooled;
        }
        let bottleneck = x;
        let s = self.plan.enc.len();
        let mut heads = Vec::with_capacity(HEADS);
        let mut logits = Vec::with_capacity(HEADS);
        for head in &self.plan.heads {
            let mut blocks: Vec<BlockTape<T>> = Vec::with_capacity(s);
            for (i, (up, bp)) in head.ups.iter().zip(&head.blocks).enumerate() {
                let level = s - 1 - i;
                let src = if i == 0 {
                    &bottleneck
                } else {
                    &blocks[i - 1].out
                };
                let u = self.up_forward(up, src);
                let input = if self.unet() {
                    Tensor::concat(&enc[level].out, &u)
                } else {
                    u
                };
                blocks.push(self.block_train(bp, input));
            }
            logits.push(self.out_forward(head, &blocks[s - 1].out));
            heads.push(blocks);
        }
        (
            Tape {
                enc,
                pool_args,
                bottleneck,
                heads,
            },
            logits,
        )
    }

    fn backward(&self, tape: &Tape<T>, dlogits: Vec<Tensor<T>>) -> Vec<T> {
        let mut grads = vec![T::zero(); self.params.len()];
        let s = self.plan.enc.len();
        let bn = &tape.bottleneck;
        let mut d_bottleneck = Tensor::zeros(bn.c, bn.n, bn.h, bn.w);
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..s).map(|_| None).collect();
        for ((head, blocks), dl) in self.plan.heads.iter().zip(&tape.heads).zip(dlogits) {
            let (ow, ob) = (head.out_w, head.out_b);
            let (gw, gb) = grads.split_at_mut(ob);
            let mut d = pointwise_backward(
                &blocks[s - 1].out,
                self.slice(ow, 2 * head.out_cin),
                &dl,
                &mut gw[ow..ow + 2 * head.out_cin],
                &mut gb[..2],
            );
            for i in (0..s).rev() {
                let level = s - 1 - i;
                let d_in = self
                    .block_backward(&head.blocks[i], &blocks[i], d, &mut grads, true)
                    .expect("input gradient requested");
                let d_up = if self.unet() {
                    let (d_skip, d_up) = d_in.split(tape.enc[level].out.c);
                    match &mut d_skips[level] {
                        Some(acc) => acc.add_assign(&d_skip),
                        slot => *slot = Some(d_skip),
                    }
                    d_up
                } else {
                    d_in
                };
                let up = &head.ups[i];
                let src = if i == 0 { bn } else { &blocks[i - 1].out };
                let wl = up.cin * up.cout * 4;
                let (gw, gb) = grads.split_at_mut(up.b);
                d = upconv_backward(
                    src,
                    self.slice(up.w, wl),
                    &d_up,
                    &mut gw[up.w..up.w + wl],
                    &mut gb[..up.cout],
                );
                if i == 0 {
                    d_bottleneck.add_assign(&d);
                    break;
                }
            }
        }
        let mut d = d_bottleneck;
        for l in (0..s).rev() {
            let out = &tape.enc[l].out;
            let mut d_e = maxpool_backward(&d, &tape.pool_args[l], out.h, out.w);
            if let Some(skip) = &d_skips[l] {
                d_e.add_assign(skip);
            }
            match self.block_backward(&self.plan.enc[l], &tape.enc[l], d_e, &mut grads, l > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
        grads
    }

    /// Inference-mode logits (running statistics).
    fn forward_eval(&self, input: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut skips = Vec::with_capacity(self.plan.enc.len());
        let mut x = None::<Tensor<T>>;
        for b in &self.plan.enc {
            let out = self.block_eval(b, x.as_ref().unwrap_or(input));
            x = Some(maxpool_forward(&out).0);
            skips.push(out);
        }
        let bottleneck = x.expect("at least one stage");
        let s = skips.len();
        self.plan
            .heads
            .iter()
            .map(|head| {
                let mut cur = None::<Tensor<T>>;
                for (i, (up, bp)) in head.ups.iter().zip(&head.blocks).enumerate() {
                    let u = self.up_forward(up, cur.as_ref().unwrap_or(&bottleneck));
                    let input = if self.unet() {
                        Tensor::concat(&skips[s - 1 - i], &u)
                    } else {
                        u
                    };
                    cur = Some(self.block_eval(bp, &input));
                }
                self.out_forward(head, cur.as_ref().expect("decoder ran"))
            })
            .collect()
    }

    fn crop_rect(&self) -> (usize, usize, usize, usize) {
        let (ox, oy) = self.pad_offsets();
        (ox, oy, self.config.input_width, self.config.input_height)
    }

    /// Inference on a batch of frames. Deterministic; batch elements are
    /// independent of each other.
    pub fn forward(&self, frames: &[Image]) -> Result<Vec<PredictionTriple>, ModelError> {
        self.check_frames(frames)?;
        let mut out = Vec::with_capacity(frames.len());
        let (ox, oy, w, h) = self.crop_rect();
        for chunk in frames.chunks(8) {
            let logits = self.forward_eval(&self.input_tensor(chunk));
            for b in 0..chunk.len() {
                let grid = |z: &Tensor<T>| {
                    Grid::from_fn(w, h, |x, y| {
                        let i0 = z.idx(0, b, y + oy, x + ox);
                        let i1 = z.idx(1, b, y + oy, x + ox);
                        sigmoid(z.data[i1].f64() - z.data[i0].f64()) as f32
                    })
                };
                out.push(PredictionTriple {
                    p1: grid(&logits[0]),
                    p2: grid(&logits[1]),
                    p3: grid(&logits[2]),
                });
            }
        }
        Ok(out)
    }

    pub fn predict_masks(&self, frame: &Image) -> Result<MaskTriple, ModelError> {
        Ok(self
            .forward(std::slice::from_ref(frame))?
            .remove(0)
            .threshold())
    }

    /// Training-mode loss, exact gradients and batch statistics.
    pub fn train_pass(
        &self,
        frames: &[Image],
        targets: &[MaskTriple],
    ) -> Result<TrainPass<T>, ModelError> {
        self.check_frames(frames)?;
        check_targets(
            frames.len(),
            targets,
            (self.config.input_width, self.config.input_height),
        )?;
        let (tape, logits) = self.forward_train(self.input_tensor(frames));
        let crop = self.crop_rect();
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(HEADS);
        for (h, z) in logits.iter().enumerate() {
            let masks: Vec<&Mask> = targets.iter().map(|t| t.as_array()[h]).collect();
            let (l, dz) = head_loss_grad(z, &masks, crop);
            loss += l;
            dlogits.push(dz);
        }
        let grads = self.backward(&tape, dlogits);
        let stats = BatchStats {
            entries: tape
                .enc
                .iter()
                .chain(tape.heads.iter().flatten())
                .flat_map(|b| [&b.n1, &b.n2])
                .map(|n| {
                    let m = n.count as f64;
                    let unbiased = n.var.iter().map(|v| v * m / (m - 1.0).max(1.0)).collect();
                    (n.running.0, n.running.1, n.mean.clone(), unbiased)
                })
                .collect(),
        };
        Ok(TrainPass {
            loss,
            grads: Gradients {
                data: grads,
                specs: self.specs.clone(),
            },
            stats,
        })
    }

    /// Training-mode loss only.
    pub fn train_loss(&self, frames: &[Image], targets: &[MaskTriple]) -> Result<f64, ModelError> {
        self.check_frames(frames)?;
        check_targets(
            frames.len(),
            targets,
            (self.config.input_width, self.config.input_height),
        )?;
        let (_, logits) = self.forward_train(self.input_tensor(frames));
        let crop = self.crop_rect();
        Ok(logits
            .iter()
            .enumerate()
            .map(|(h, z)| {
                let masks: Vec<&Mask> = targets.iter().map(|t| t.as_array()[h]).collect();
                head_loss_grad(z, &masks, crop).0
            })
            .sum())
    }

    /// Which ReLUs pass and which max-pool inputs win, over a training-mode
    /// pass. The loss is smooth in any parameter perturbation that leaves
    /// this pattern unchanged.
    pub fn activation_pattern(&self, frames: &[Image]) -> Result<Vec<u8>, ModelError> {
        self.check_frames(frames)?;
        let (tape, _) = self.forward_train(self.input_tensor(frames));
        let blocks = tape.enc.iter().chain(tape.heads.iter().flatten());
        let mut out: Vec<u8> = blocks
            .flat_map(|b| b.a1.data.iter().chain(&b.out.data))
            .map(|v| u8::from(*v > T::zero()))
            .collect();
        for arg in &tape.pool_args {
            out.extend_from_slice(arg);
        }
        Ok(out)
    }

    /// Exact gradient of the training-mode loss.
    pub fn gradient(
        &self,
        frames: &[Image],
        targets: &[MaskTriple],
    ) -> Result<Gradients<T>, ModelError> {
        Ok(self.train_pass(frames, targets)?.grads)
    }

    /// `running ← (1 − momentum)·running + momentum·batch`, with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        for (rm, rv, mean, var) in &stats.entries {
            for (i, (&m, &v)) in mean.iter().zip(var).enumerate() {
                let a = &mut self.buffers[rm + i];
                *a = T::of((1.0 - momentum) * a.f64() + momentum * m);
                let b = &mut self.buffers[rv + i];
                *b = T::of((1.0 - momentum) * b.f64() + momentum * v);
            }
        }
    }
}

fn check_targets(n: usize, targets: &[MaskTriple], dims: (usize, usize)) -> Result<(), ModelError> {
    if targets.len() != n {
        return Err(ModelError::Shape(format!(
            "{n} frames but {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.dims() != dims) {
        let (w, h) = t.dims();
        return Err(ModelError::Shape(format!(
            "target {w}x{h} does not match model input {}x{}",
            dims.0, dims.1
        )));
    }
    Ok(())
}

fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Mean clamped BCE of one head over the crop region, and its gradient with
/// respect to both logits. Inside the clamp range the gradient is
/// `(p − y)/M` on the tissue logit and its negative on the air logit; where
/// the clamp is active it is zero.
fn head_loss_grad<T: Scalar>(
    z: &Tensor<T>,
    masks: &[&Mask],
    crop: (usize, usize, usize, usize),
) -> (f64, Tensor<T>) {
    let (ox, oy, w, h) = crop;
    let m = (masks.len() * w * h) as f64;
    let mut dz = Tensor::zeros(2, z.n, z.h, z.w);
    let mut loss = 0.0;
    for (b, mask) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let i0 = z.idx(0, b, y + oy, x + ox);
                let i1 = z.idx(1, b, y + oy, x + ox);
                let p = sigmoid(z.data[i1].f64() - z.data[i0].f64());
                let target = f64::from(mask.at(x, y));
                let c = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
                loss -= target * c.ln() + (1.0 - target) * (1.0 - c).ln();
                if p > LOSS_EPS && p < 1.0 - LOSS_EPS {
                    let g = (p - target) / m;
                    dz.data[i1] = T::of(g);
                    dz.data[i0] = T::of(-g);
                }
            }
        }
    }
    (loss / m, dz)
}

/// Summed-over-heads mean binary cross-entropy between probability maps and
/// binary targets, probabilities clamped to `[ε, 1 − ε]`.
pub fn bce_loss(
    predictions: &[PredictionTriple],
    targets: &[MaskTriple],
) -> Result<f64, ModelError> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(ModelError::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for h in 0..HEADS {
        let (mut sum, mut count) = (0.0, 0usize);
        for (p, t) in predictions.iter().zip(targets) {
            let (pg, tg) = (p.as_array()[h], t.as_array()[h]);
            if pg.dims() != tg.dims() {
                return Err(ModelError::Shape(
                    "prediction and target dims differ".into(),
                ));
            }
            for (&pv, &tv) in pg.as_slice().iter().zip(tg.as_slice()) {
                let c = f64::from(pv).clamp(LOSS_EPS, 1.0 - LOSS_EPS);
                let y = f64::from(tv);
                sum -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
            }
            count += pg.len();
        }
        total += sum / count as f64;
    }
    Ok(total)
}
