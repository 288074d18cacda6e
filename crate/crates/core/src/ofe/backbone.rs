use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};

use crate::config::BackboneKind;
use crate::error::{Error, Result};

fn conv(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    bias: bool,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(if bias {
        candle_nn::conv2d(in_c, out_c, kernel, cfg, vb)?
    } else {
        candle_nn::conv2d_no_bias(in_c, out_c, kernel, cfg, vb)?
    })
}

/// Kernel for a stage of the given stride: wide enough that strided
/// windows overlap.
fn tiny_kernel(stride: usize) -> usize {
    if stride > 1 {
        2 * stride - 1
    } else {
        3
    }
}

/// Three conv + ReLU stages widening to `channels`.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    stages: Vec<Conv2d>,
}

impl TinyBackbone {
    pub fn new(channels: usize, strides: [usize; 3], bias: bool, vb: VarBuilder) -> Result<Self> {
        let widths = [3, channels / 4, channels / 2, channels];
        let stages = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                conv(
                    widths[i],
                    widths[i + 1],
                    tiny_kernel(s),
                    s,
                    bias,
                    vb.pp(format!("conv{}", i + 1)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?.relu()?;
        }
        Ok(h)
    }
}

/// Per-channel scale and shift standing in for batch norm with frozen
/// statistics.
#[derive(Clone, Debug)]
struct ChannelAffine {
    gamma: Tensor,
    beta: Option<Tensor>,
}

impl ChannelAffine {
    fn new(channels: usize, shift: bool, vb: VarBuilder) -> Result<Self> {
        let gamma = vb.get_with_hints((1, channels, 1, 1), "gamma", Init::Const(1.0))?;
        let beta = if shift {
            Some(vb.get_with_hints((1, channels, 1, 1), "beta", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { gamma, beta })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let y = xs.broadcast_mul(&self.gamma)?;
        Ok(match &self.beta {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: ChannelAffine,
    conv2: Conv2d,
    bn2: ChannelAffine,
    downsample: Option<(Conv2d, ChannelAffine)>,
}

impl BasicBlock {
    fn new(in_c: usize, out_c: usize, stride: usize, shift: bool, vb: VarBuilder) -> Result<Self> {
        let downsample = if stride != 1 || in_c != out_c {
            let cfg = Conv2dConfig {
                stride,
                ..Default::default()
            };
            Some((
                candle_nn::conv2d_no_bias(in_c, out_c, 1, cfg, vb.pp("downsample.0"))?,
                ChannelAffine::new(out_c, shift, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(in_c, out_c, 3, stride, false, vb.pp("conv1"))?,
            bn1: ChannelAffine::new(out_c, shift, vb.pp("bn1"))?,
            conv2: conv(out_c, out_c, 3, 1, false, vb.pp("conv2"))?,
            bn2: ChannelAffine::new(out_c, shift, vb.pp("bn2"))?,
            downsample,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(xs)?)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(xs)?)?,
            None => xs.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet18 trunk (stem and four stages, classifier removed) with widths
/// scaled so the last stage emits `channels` maps (512 at full width).
#[derive(Clone, Debug)]
pub struct ResNet18 {
    stem: Conv2d,
    stem_bn: ChannelAffine,
    blocks: Vec<BasicBlock>,
}

impl ResNet18 {
    pub fn new(channels: usize, shift: bool, vb: VarBuilder) -> Result<Self> {
        if channels % 8 != 0 {
            return Err(Error::Config(format!(
                "resnet18 needs channels divisible by 8, got {channels}"
            )));
        }
        let base = channels / 8;
        let widths = [base, 2 * base, 4 * base, 8 * base];
        let mut blocks = Vec::with_capacity(8);
        let mut in_c = base;
        for (stage, &w) in widths.iter().enumerate() {
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let vb_block = vb.pp(format!("layer{}.{b}", stage + 1));
                blocks.push(BasicBlock::new(in_c, w, stride, shift, vb_block)?);
                in_c = w;
            }
        }
        Ok(Self {
            stem: conv(3, base, 7, 2, false, vb.pp("conv1"))?,
            stem_bn: ChannelAffine::new(base, shift, vb.pp("bn1"))?,
            blocks,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = self.stem_bn.forward(&self.stem.forward(xs)?)?.relu()?;
        // post-ReLU values are >= 0, so zero padding matches -inf padding
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = h.max_pool2d_with_stride(3, 2)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Tiny(TinyBackbone),
    Resnet18(ResNet18),
}

impl Backbone {
    pub fn new(
        kind: BackboneKind,
        channels: usize,
        tiny_strides: [usize; 3],
        bias: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(match kind {
            BackboneKind::Tiny => Backbone::Tiny(TinyBackbone::new(channels, tiny_strides, bias, vb)?),
            BackboneKind::Resnet18 => Backbone::Resnet18(ResNet18::new(channels, bias, vb)?),
        })
    }

    /// `(B, 3, H, W)` images to `(B, C, H', W')` maps.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Tiny(b) => b.forward(xs),
            Backbone::Resnet18(b) => b.forward(xs),
        }
    }
}

/// Side of the feature map a backbone produces from a square input.
pub fn feature_side(kind: BackboneKind, tiny_strides: [usize; 3], input: usize) -> usize {
    let conv_out = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
    match kind {
        BackboneKind::Tiny => tiny_strides
            .iter()
            .fold(input, |n, &s| conv_out(n, tiny_kernel(s), s)),
        BackboneKind::Resnet18 => {
            let mut n = conv_out(input, 7, 2);
            n = (n + 2 - 3) / 2 + 1;
            for _ in 0..3 {
                n = conv_out(n, 3, 2);
            }
            n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_parameters;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn build(kind: BackboneKind, channels: usize, bias: bool) -> Backbone {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let b = Backbone::new(kind, channels, [2, 2, 1], bias, vb).unwrap();
        init_parameters(&vm, 1).unwrap();
        b
    }

    #[test]
    fn feature_sides_match_forward() {
        for (kind, size) in [(BackboneKind::Tiny, 64), (BackboneKind::Resnet18, 64)] {
            let b = build(kind, 16, true);
            let x = Tensor::ones((1, 3, size, size), DType::F32, &Device::Cpu).unwrap();
            let y = b.forward(&x).unwrap();
            let side = feature_side(kind, [2, 2, 1], size);
            assert_eq!(y.dims(), &[1, 16, side, side], "{kind:?}");
        }
        assert_eq!(feature_side(BackboneKind::Resnet18, [4, 4, 2], 320), 10);
        assert_eq!(feature_side(BackboneKind::Tiny, [4, 4, 2], 320), 10);
        assert_eq!(feature_side(BackboneKind::Tiny, [2, 2, 1], 64), 16);
    }

    #[test]
    fn bias_free_backbones_map_zero_to_zero() {
        for kind in [BackboneKind::Tiny, BackboneKind::Resnet18] {
            let b = build(kind, 16, false);
            let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
            let y = b.forward(&x).unwrap();
            assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }
}
