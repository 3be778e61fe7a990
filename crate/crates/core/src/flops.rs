//! Analytic operation counts for a [`GraphDescription`].
//!
//! An inner product of length `k` costs `k` multiplies and `k − 1` adds, a
//! bias one more add. Under this convention a valid 3×3 convolution from 3 to
//! 64 channels on a 4×4 image costs 13,568 operations, and replacing it by a
//! 1×1 reduction to one channel followed by a 3×3 expansion costs 4,432.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::graph::{GraphDescription, LayerKind, Shape4};
use crate::model::icc::build_icc;
use crate::model::network::INPUT_MULTIPLE;
use crate::ops::pool::adaptive_bin;
use crate::ops::UpsampleMethod;

pub const CONVENTION: &str = "mul+add: k multiplies and k-1 adds per length-k inner product (+1 add for bias)";

/// Operations per output element of a bilinear interpolation.
pub const BILINEAR_OPS: u64 = 7;

/// `(multiplies, adds)` of one convolution layer.
pub fn count_conv(cin: u64, cout: u64, kh: u64, kw: u64, hout: u64, wout: u64, bias: bool) -> (u64, u64) {
    let outputs = hout * wout * cout;
    let k = kh * kw * cin;
    (outputs * k, outputs * (k - 1 + bias as u64))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub block: String,
    pub kind: String,
    pub output_shape: Shape4,
    pub multiplies: u64,
    pub adds: u64,
    /// Comparisons, activations and interpolation arithmetic.
    pub other: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub convention: String,
    pub input_shape: Shape4,
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

fn giga(v: u64) -> String {
    format!("{:.2} G", v as f64 / 1e9)
}

impl FlopReport {
    pub fn total_multiplies(&self) -> u64 {
        self.layers.iter().map(|l| l.multiplies).sum()
    }

    pub fn total_g(&self) -> String {
        giga(self.total)
    }

    /// Sum of totals over layers of one block.
    pub fn block_total(&self, block: &str) -> u64 {
        self.layers.iter().filter(|l| l.block == block).map(|l| l.total).sum()
    }

    pub fn to_table(&self) -> String {
        let name_w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        writeln!(
            s,
            "{:<name_w$}  {:<16}  {:<22}  {:>16}  {:>16}  {:>14}  {:>16}",
            "layer", "kind", "output", "multiplies", "adds", "other", "total"
        )
        .unwrap();
        for l in &self.layers {
            let shape = format!("{}x{}x{}x{}", l.output_shape[0], l.output_shape[1], l.output_shape[2], l.output_shape[3]);
            writeln!(
                s,
                "{:<name_w$}  {:<16}  {:<22}  {:>16}  {:>16}  {:>14}  {:>16}",
                l.name, l.kind, shape, l.multiplies, l.adds, l.other, l.total
            )
            .unwrap();
        }
        writeln!(s, "convention: {}", self.convention).unwrap();
        let [n, c, h, w] = self.input_shape;
        writeln!(s, "input: {n}x{c}x{h}x{w}").unwrap();
        writeln!(s, "multiplies only: {} ({})", self.total_multiplies(), giga(self.total_multiplies())).unwrap();
        writeln!(s, "total: {} ({})", self.total, self.total_g()).unwrap();
        s
    }

    /// One JSON object per layer, then a summary object.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&serde_json::to_string(l).expect("serializable"));
            s.push('\n');
        }
        let summary = serde_json::json!({
            "total": self.total,
            "total_g": self.total_g(),
            "multiplies": self.total_multiplies(),
            "input_shape": self.input_shape,
            "convention": self.convention,
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        s
    }
}

fn elements(s: &Shape4) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

/// Counts every layer of `graph` for an input of shape `input`.
pub fn count_graph(graph: &GraphDescription, input: Shape4) -> Result<FlopReport> {
    let shapes = graph.infer_shapes(input)?;
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (layer, out) in graph.layers.iter().zip(&shapes) {
        let ins: Vec<Shape4> = layer.inputs.iter().map(|&i| shapes[i]).collect();
        let n_out = elements(out);
        let (multiplies, adds, other) = match &layer.kind {
            LayerKind::Input { .. } | LayerKind::Concat => (0, 0, 0),
            LayerKind::Conv { in_channels, out_channels, kernel, bias, .. } => {
                let (m, a) = count_conv(
                    *in_channels as u64,
                    *out_channels as u64,
                    kernel.0 as u64,
                    kernel.1 as u64,
                    out[2] as u64,
                    out[3] as u64,
                    *bias,
                );
                (m * out[0] as u64, a * out[0] as u64, 0)
            }
            LayerKind::BatchNorm { .. } => (n_out, n_out, 0),
            LayerKind::Relu | LayerKind::Sigmoid => (0, 0, n_out),
            LayerKind::MaxPool(g) => (0, 0, n_out * (g.window.0 * g.window.1 - 1) as u64),
            LayerKind::AvgPool(g) => (0, n_out * (g.window.0 * g.window.1 - 1) as u64, 0),
            LayerKind::AdaptiveAvgPool { size } => {
                let [n, c, h, w] = ins[0];
                let mut per_plane = 0u64;
                for i in 0..*size {
                    let (r0, r1) = adaptive_bin(i, *size, h);
                    for j in 0..*size {
                        let (c0, c1) = adaptive_bin(j, *size, w);
                        per_plane += ((r1 - r0) * (c1 - c0)) as u64 - 1;
                    }
                }
                (0, per_plane * (n * c) as u64, 0)
            }
            LayerKind::Upsample { method: UpsampleMethod::Bilinear, .. } | LayerKind::ResizeLike => {
                (0, 0, n_out * BILINEAR_OPS)
            }
            LayerKind::Upsample { method: UpsampleMethod::Nearest, .. } => (0, 0, 0),
            LayerKind::ChannelSum => (0, n_out * (ins[0][1] as u64 - 1), 0),
            LayerKind::Sub => (0, n_out, 0),
            LayerKind::WeightedFuse { .. } => {
                let k = (ins.len() / 2) as u64;
                // k products and the division; (k − 1) + k adds for numerator and guarded denominator.
                (n_out * (k + 1), n_out * (2 * k - 1), 0)
            }
        };
        layers.push(LayerFlops {
            name: layer.name.clone(),
            block: layer.block.clone(),
            kind: layer.kind.label().to_string(),
            output_shape: *out,
            multiplies,
            adds,
            other,
            total: multiplies + adds + other,
        });
    }
    let total = layers.iter().map(|l| l.total).sum();
    Ok(FlopReport { convention: CONVENTION.to_string(), input_shape: input, layers, total })
}

/// Cost of inferring one `h × w` image with the model of `config`.
///
/// The input is padded to multiples of 32 first, exactly as inference does,
/// so a 1080×1920 image is counted at 1088×1920.
pub fn model_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("image extents must be positive, got {h}x{w}")));
    }
    let graph = build_icc(config)?;
    let pad = |d: usize| d.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    count_graph(&graph, [1, config.input_channels, pad(h), pad(w)])
}

/// How a convolution is factorized in [`factorization_savings`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factorization {
    /// 1×1 reduction to a single channel, then an n×n expansion to `cout`.
    Bottleneck,
    /// n×1 convolution to `cout` channels, then 1×n from `cout` to `cout`.
    Spatial,
}

/// `1 − cost(factorized) / cost(standard)` for a valid n×n convolution from
/// `cin` to `cout` channels on an `h × w` input.
pub fn factorization_savings(scheme: Factorization, n: u64, cin: u64, cout: u64, h: u64, w: u64) -> Result<f64> {
    if n == 0 || n % 2 == 0 || n > h || n > w || cin == 0 || cout == 0 {
        return Err(Error::InvalidArgument(format!("need an odd kernel 1 <= n <= {h}x{w} and positive channels, got n={n}")));
    }
    let total = |(m, a): (u64, u64)| m + a;
    let (ho, wo) = (h - n + 1, w - n + 1);
    let standard = total(count_conv(cin, cout, n, n, ho, wo, false));
    let factorized = match scheme {
        Factorization::Bottleneck => total(count_conv(cin, 1, 1, 1, h, w, false)) + total(count_conv(1, cout, n, n, ho, wo, false)),
        Factorization::Spatial => total(count_conv(cin, cout, n, 1, ho, w, false)) + total(count_conv(cout, cout, 1, n, ho, wo, false)),
    };
    Ok(1.0 - factorized as f64 / standard as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Ablation;
    use crate::model::graph::GraphBuilder;
    use crate::model::icc::vgg16_front_end;
    use crate::ops::ConvGeometry;

    #[test]
    fn worked_example() {
        let (m, a) = count_conv(3, 64, 3, 3, 2, 2, false);
        assert_eq!(m + a, 13_568);
        let (m1, a1) = count_conv(3, 1, 1, 1, 4, 4, false);
        let (m2, a2) = count_conv(1, 64, 3, 3, 2, 2, false);
        assert_eq!(m1 + a1, 80);
        assert_eq!(m2 + a2, 4_352);
        let r = factorization_savings(Factorization::Bottleneck, 3, 3, 64, 4, 4).unwrap();
        assert!((r - (1.0 - 4432.0 / 13568.0)).abs() < 1e-12);
    }

    #[test]
    fn pointwise_unit_case() {
        assert_eq!(count_conv(1, 1, 1, 1, 1, 1, false), (1, 0));
        assert_eq!(count_conv(1, 1, 1, 1, 1, 1, true), (1, 1));
    }

    #[test]
    fn degenerate_and_monotone_savings() {
        assert!(factorization_savings(Factorization::Spatial, 1, 8, 8, 16, 16).unwrap() <= 0.0);
        for scheme in [Factorization::Bottleneck, Factorization::Spatial] {
            let mut prev = f64::NEG_INFINITY;
            for cin in 1..64 {
                let r = factorization_savings(scheme, 7, cin, 32, 20, 20).unwrap();
                assert!(r > prev);
                prev = r;
            }
        }
        assert!(factorization_savings(Factorization::Spatial, 2, 8, 8, 16, 16).is_err());
    }

    #[test]
    fn single_conv_graph_matches_count_conv() {
        let (mut b, x) = GraphBuilder::new(3);
        let c = b.conv("c", x, 64, (3, 3), ConvGeometry::UNIT, true);
        let g = b.finish(c);
        let r = count_graph(&g, [1, 3, 4, 4]).unwrap();
        let (m, a) = count_conv(3, 64, 3, 3, 2, 2, true);
        assert_eq!(r.total, m + a);
        assert_eq!(r.total, r.layers.iter().map(|l| l.total).sum::<u64>());
    }

    #[test]
    fn input_only_graph_costs_nothing() {
        let (b, x) = GraphBuilder::new(3);
        assert_eq!(count_graph(&b.finish(x), [1, 3, 8, 8]).unwrap().total, 0);
    }

    #[test]
    fn stem_conv_counts_scale_by_four() {
        let cfg = ModelConfig::default();
        let graph = build_icc(&cfg).unwrap();
        let small = count_graph(&graph, [1, 3, 128, 160]).unwrap();
        let large = count_graph(&graph, [1, 3, 256, 320]).unwrap();
        let mut convs = 0;
        for (a, b) in small.layers.iter().zip(&large.layers) {
            if a.block.starts_with("stem.") && a.kind == "conv" {
                assert_eq!(4 * a.total, b.total, "{}", a.name);
                convs += 1;
            }
        }
        assert!(convs >= 5);
    }

    #[test]
    fn efficiency_ordering() {
        let cfg = ModelConfig::default();
        let input = [1, 3, 512, 512];
        let full = count_graph(&build_icc(&cfg).unwrap(), input).unwrap().total;
        let lean = count_graph(&build_icc(&cfg.clone().with_ablation(Some(Ablation::NoInception))).unwrap(), input)
            .unwrap()
            .total;
        let vgg = count_graph(&vgg16_front_end(&cfg), input).unwrap().total;
        assert!(lean < full && full < vgg, "{lean} {full} {vgg}");
        let no_context = model_flops(&cfg.clone().with_ablation(Some(Ablation::NoContext)), 512, 512).unwrap().total;
        assert!(no_context < full);
    }

    #[test]
    fn totals_ignore_layer_order() {
        let r = model_flops(&ModelConfig::default(), 256, 256).unwrap();
        let mut layers = r.layers.clone();
        layers.reverse();
        assert_eq!(layers.iter().map(|l| l.total).sum::<u64>(), r.total);
        assert_eq!(r, model_flops(&ModelConfig::default(), 256, 256).unwrap());
    }

    #[test]
    fn report_formats() {
        let r = model_flops(&ModelConfig::default(), 100, 90).unwrap();
        assert_eq!(r.input_shape, [1, 3, 128, 96]);
        let lines = r.to_json_lines();
        assert_eq!(lines.lines().count(), r.layers.len() + 1);
        let table = r.to_table();
        assert!(table.contains(&r.total_g()));
        assert!(r.total_g().ends_with(" G"));
    }

    #[test]
    fn unresolvable_shape_names_layer() {
        let (mut b, x) = GraphBuilder::new(3);
        let c = b.conv("too_big", x, 4, (9, 9), ConvGeometry::UNIT, false);
        let err = count_graph(&b.finish(c), [1, 3, 4, 4]).unwrap_err();
        assert!(err.to_string().contains("too_big"));
    }
}
