//! Construction of the ICC network and its building blocks.
//!
//! The front end is the Inception-V3 prefix up to and including the first
//! 17×17-grid block (`Mixed_6b` in the reference implementation): seven stem
//! layers, three Inception-A blocks, the grid-reduction block and one
//! Inception-C block with 7-factorized kernels. All 3×3 convolutions and
//! pooling windows are zero-padded so that every downsampling step halves the
//! extent exactly, which makes the output stride 8 for inputs divisible by 32.

use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, PoolGeometry, UpsampleMethod};

use super::config::{FusionInput, ModelConfig};
use super::graph::{GraphBuilder, GraphDescription, LayerKind, Tap};

/// Weight normalization guard of the contextual module.
pub const CONTEXT_EPS: f64 = 1e-6;

fn same(k: (usize, usize)) -> ConvGeometry {
    ConvGeometry::same(k.0, k.1)
}

fn strided(k: usize) -> ConvGeometry {
    ConvGeometry::new((2, 2), ((k - 1) / 2, (k - 1) / 2))
}

fn expect_channels(b: &GraphBuilder, x: usize, block: &str, allowed: &[usize]) -> Result<()> {
    let got = b.channels(x);
    if allowed.contains(&got) {
        Ok(())
    } else {
        Err(Error::Shape(format!("{block} expects {allowed:?} input channels, got {got}")))
    }
}

/// Stem through the second max-pool. Returns `Feature1` (192 channels, stride 8).
pub fn stem(b: &mut GraphBuilder, cfg: &ModelConfig, x: usize) -> usize {
    let ch = |c| cfg.channels(c);
    b.set_block("stem.conv1a");
    let x = b.basic_conv("stem.conv1a", x, ch(32), (3, 3), strided(3));
    b.set_block("stem.conv2a");
    let x = b.basic_conv("stem.conv2a", x, ch(32), (3, 3), same((3, 3)));
    b.set_block("stem.conv2b");
    let x = b.basic_conv("stem.conv2b", x, ch(64), (3, 3), same((3, 3)));
    b.set_block("stem.pool1");
    let x = b.unary("stem.pool1", LayerKind::MaxPool(PoolGeometry::square(3, 2, 1)), x);
    b.set_block("stem.conv3b");
    let x = b.basic_conv("stem.conv3b", x, ch(80), (1, 1), ConvGeometry::UNIT);
    b.set_block("stem.conv4a");
    let x = b.basic_conv("stem.conv4a", x, ch(192), (3, 3), same((3, 3)));
    b.set_block("stem.pool2");
    let f1 = b.unary("stem.pool2", LayerKind::MaxPool(PoolGeometry::square(3, 2, 1)), x);
    b.tag(f1, Tap::Feature1);
    f1
}

/// Inception-A: 1×1 | 1×1→5×5 | 1×1→3×3→3×3 | avgpool→1×1.
/// Accepts 192, 256 or 288 (width-scaled) channels; 192 inputs get a 32-wide
/// pooling branch, the others 64, giving 256 / 288 / 288 outputs.
pub fn inception_a(b: &mut GraphBuilder, cfg: &ModelConfig, name: &str, x: usize) -> Result<usize> {
    let ch = |c| cfg.channels(c);
    let a_out = |pool| ch(64) + ch(64) + ch(96) + ch(pool);
    expect_channels(b, x, "inception_a", &[ch(192), a_out(32), a_out(64)])?;
    let pool_features = if b.channels(x) == ch(192) { 32 } else { 64 };
    b.set_block(name);
    let b1 = b.basic_conv(&format!("{name}.branch1x1"), x, ch(64), (1, 1), ConvGeometry::UNIT);
    let b5 = b.basic_conv(&format!("{name}.branch5x5_1"), x, ch(48), (1, 1), ConvGeometry::UNIT);
    let b5 = b.basic_conv(&format!("{name}.branch5x5_2"), b5, ch(64), (5, 5), same((5, 5)));
    let b3 = b.basic_conv(&format!("{name}.branch3x3dbl_1"), x, ch(64), (1, 1), ConvGeometry::UNIT);
    let b3 = b.basic_conv(&format!("{name}.branch3x3dbl_2"), b3, ch(96), (3, 3), same((3, 3)));
    let b3 = b.basic_conv(&format!("{name}.branch3x3dbl_3"), b3, ch(96), (3, 3), same((3, 3)));
    let bp = b.unary(&format!("{name}.branch_pool.avg"), LayerKind::AvgPool(PoolGeometry::square(3, 1, 1)), x);
    let bp = b.basic_conv(&format!("{name}.branch_pool"), bp, ch(pool_features), (1, 1), ConvGeometry::UNIT);
    Ok(b.concat(&format!("{name}.concat"), &[b1, b5, b3, bp]))
}

/// Grid reduction: stride-2 3×3 | 1×1→3×3→stride-2 3×3 | stride-2 max-pool.
pub fn inception_b_reduction(b: &mut GraphBuilder, cfg: &ModelConfig, name: &str, x: usize) -> Result<usize> {
    let ch = |c| cfg.channels(c);
    let a_out = ch(64) + ch(64) + ch(96) + ch(64);
    expect_channels(b, x, "inception_b_reduction", &[a_out])?;
    b.set_block(name);
    let b3 = b.basic_conv(&format!("{name}.branch3x3"), x, ch(384), (3, 3), strided(3));
    let bd = b.basic_conv(&format!("{name}.branch3x3dbl_1"), x, ch(64), (1, 1), ConvGeometry::UNIT);
    let bd = b.basic_conv(&format!("{name}.branch3x3dbl_2"), bd, ch(96), (3, 3), same((3, 3)));
    let bd = b.basic_conv(&format!("{name}.branch3x3dbl_3"), bd, ch(96), (3, 3), strided(3));
    let bp = b.unary(&format!("{name}.branch_pool"), LayerKind::MaxPool(PoolGeometry::square(3, 2, 1)), x);
    Ok(b.concat(&format!("{name}.concat"), &[b3, bd, bp]))
}

/// Inception-C with 7-factorized branches (128-wide bottleneck).
pub fn inception_c(b: &mut GraphBuilder, cfg: &ModelConfig, name: &str, x: usize) -> Result<usize> {
    let ch = |c| cfg.channels(c);
    let b_out = ch(384) + ch(96) + (ch(64) + ch(64) + ch(96) + ch(64));
    expect_channels(b, x, "inception_c", &[b_out])?;
    let c7 = ch(128);
    b.set_block(name);
    let b1 = b.basic_conv(&format!("{name}.branch1x1"), x, ch(192), (1, 1), ConvGeometry::UNIT);
    let s = b.basic_conv(&format!("{name}.branch7x7_1"), x, c7, (1, 1), ConvGeometry::UNIT);
    let s = b.basic_conv(&format!("{name}.branch7x7_2"), s, c7, (1, 7), same((1, 7)));
    let s = b.basic_conv(&format!("{name}.branch7x7_3"), s, ch(192), (7, 1), same((7, 1)));
    let d = b.basic_conv(&format!("{name}.branch7x7dbl_1"), x, c7, (1, 1), ConvGeometry::UNIT);
    let d = b.basic_conv(&format!("{name}.branch7x7dbl_2"), d, c7, (7, 1), same((7, 1)));
    let d = b.basic_conv(&format!("{name}.branch7x7dbl_3"), d, c7, (1, 7), same((1, 7)));
    let d = b.basic_conv(&format!("{name}.branch7x7dbl_4"), d, c7, (7, 1), same((7, 1)));
    let d = b.basic_conv(&format!("{name}.branch7x7dbl_5"), d, ch(192), (1, 7), same((1, 7)));
    let bp = b.unary(&format!("{name}.branch_pool.avg"), LayerKind::AvgPool(PoolGeometry::square(3, 1, 1)), x);
    let bp = b.basic_conv(&format!("{name}.branch_pool"), bp, ch(192), (1, 1), ConvGeometry::UNIT);
    Ok(b.concat(&format!("{name}.concat"), &[b1, s, d, bp]))
}

/// Multi-scale contextual module on `base` (C channels) producing `2C` channels.
///
/// For every scale `s`: average-pool to `s×s`, 1×1 conv, bilinear resize back
/// (`s_j`); contrast `c_j = s_j − base`; weight `w_j = σ(conv1×1(c_j))` with
/// the weight convolution shared across scales. The fused feature
/// `Σ w_j s_j / (Σ w_j + ε)` is concatenated after `base`.
pub fn contextual_module(b: &mut GraphBuilder, scales: &[usize], base: usize) -> usize {
    let c = b.channels(base);
    b.set_block("context");
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for &s in scales {
        let p = b.unary(&format!("context.scale{s}.pool"), LayerKind::AdaptiveAvgPool { size: s }, base);
        let p = b.conv(&format!("context.scale{s}.conv"), p, c, (1, 1), ConvGeometry::UNIT, false);
        let up = b.binary(&format!("context.scale{s}.resize"), LayerKind::ResizeLike, p, base);
        let contrast = b.binary(&format!("context.scale{s}.contrast"), LayerKind::Sub, up, base);
        values.push((up, contrast));
    }
    let mut owner = None;
    for (i, &(_, contrast)) in values.iter().enumerate() {
        let s = scales[i];
        let name = format!("context.scale{s}.weight");
        // One weight convolution shared by every scale.
        let w = match owner {
            None => {
                let id = b.conv(&name, contrast, c, (1, 1), ConvGeometry::UNIT, true);
                owner = Some(id);
                id
            }
            Some(o) => b.conv_shared(&name, o, contrast),
        };
        let w = b.unary(&format!("context.scale{s}.sigmoid"), LayerKind::Sigmoid, w);
        weights.push(w);
    }
    let vals: Vec<usize> = values.iter().map(|v| v.0).collect();
    let fused = b.fuse("context.fuse", &vals, &weights, CONTEXT_EPS);
    b.concat("context.concat", &[base, fused])
}

/// 1×1 bottleneck then 3×3 convolutions, all ReLU-activated, then channel sum.
pub fn decoder(b: &mut GraphBuilder, cfg: &ModelConfig, x: usize) -> usize {
    b.set_block("decoder");
    let mut x = x;
    for (i, &full) in cfg.decoder_channels.iter().enumerate() {
        let k = if i == 0 { 1 } else { 3 };
        let c = b.conv(&format!("decoder.conv{i}"), x, cfg.channels(full), (k, k), ConvGeometry::same(k, k), true);
        x = b.unary(&format!("decoder.relu{i}"), LayerKind::Relu, c);
    }
    b.channel_sum("decoder.channel_sum", x)
}

/// The full ICC graph for `config` (ablations included).
pub fn build_icc(config: &ModelConfig) -> Result<GraphDescription> {
    config.validate()?;
    let (mut b, input) = GraphBuilder::new(config.input_channels);
    let f1 = stem(&mut b, config, input);
    let mut features = (None, None);
    if config.use_inception_blocks {
        let x = inception_a(&mut b, config, "mixed_5b", f1)?;
        let x = inception_a(&mut b, config, "mixed_5c", x)?;
        let f2 = inception_a(&mut b, config, "mixed_5d", x)?;
        b.tag(f2, Tap::Feature2);
        let x = inception_b_reduction(&mut b, config, "mixed_6a", f2)?;
        let f3 = inception_c(&mut b, config, "mixed_6b", x)?;
        b.tag(f3, Tap::Feature3);
        features = (Some(f2), Some(f3));
    }
    let context = config.use_contextual_module.then(|| contextual_module(&mut b, &config.contextual_scales, f1));
    b.set_block("fusion");
    let mut fusion = Vec::new();
    for input in config.active_fusion_inputs() {
        match input {
            FusionInput::Context => fusion.extend(context),
            FusionInput::Feature2 => fusion.extend(features.0),
            FusionInput::Feature3 => {
                let f3 = features.1.expect("feature3 present when inception blocks are on");
                let up = b.unary(
                    "fusion.feature3_up",
                    LayerKind::Upsample { factor: 2, method: config.feature3_upsample },
                    f3,
                );
                fusion.push(up);
            }
        }
    }
    if fusion.is_empty() {
        return Err(Error::Config("no fusion inputs remain for the decoder".into()));
    }
    let fused = b.concat("fusion.concat", &fusion);
    let out = decoder(&mut b, config, fused);
    Ok(b.finish(out))
}

/// Stand-alone graph of one named block applied to an input of `in_channels`.
pub fn block_graph(config: &ModelConfig, block: &str, in_channels: usize) -> Result<GraphDescription> {
    let (mut b, x) = GraphBuilder::new(in_channels);
    let out = match block {
        "inception_a" => inception_a(&mut b, config, "block", x)?,
        "inception_b_reduction" => inception_b_reduction(&mut b, config, "block", x)?,
        "inception_c" => inception_c(&mut b, config, "block", x)?,
        "contextual_module" => contextual_module(&mut b, &config.contextual_scales, x),
        "decoder" => decoder(&mut b, config, x),
        "upsample" => b.unary("block.upsample", LayerKind::Upsample { factor: 2, method: UpsampleMethod::Bilinear }, x),
        other => return Err(Error::InvalidArgument(format!("unknown block {other}"))),
    };
    Ok(b.finish(out))
}

/// Thirteen 3×3 convolutions of a 16-layer VGG front end, for cost comparison.
pub fn vgg16_front_end(config: &ModelConfig) -> GraphDescription {
    let (mut b, mut x) = GraphBuilder::new(config.input_channels);
    let plan: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    for (stage, widths) in plan.iter().enumerate() {
        b.set_block(format!("vgg.stage{stage}"));
        for (i, &c) in widths.iter().enumerate() {
            let conv = b.conv(&format!("vgg.conv{stage}_{i}"), x, config.channels(c), (3, 3), same((3, 3)), true);
            x = b.unary(&format!("vgg.relu{stage}_{i}"), LayerKind::Relu, conv);
        }
        if stage < 4 {
            x = b.unary(&format!("vgg.pool{stage}"), LayerKind::MaxPool(PoolGeometry::square(2, 2, 0)), x);
        }
    }
    b.finish(x)
}
