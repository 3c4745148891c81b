//! Convolutional trunks of the supported ImageNet backbones.
//!
//! Layer names follow the Keras application models, so a converted
//! checkpoint maps one-to-one onto these parameters. Each trunk ends in a
//! global average pool and yields `[N, feature_dim]`.

use crate::nn::{BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, Padding, Relu, Relu6, Residual, Scalar, Sequential};

use super::Backbone;

const RESNET_BN_EPS: f64 = 1.001e-5;
const MOBILENET_BN_EPS: f64 = 1e-3;

/// Name prefix of every backbone parameter.
pub const PREFIX: &str = "backbone";

fn name(layer: &str) -> String {
    format!("{PREFIX}.{layer}")
}

pub fn build<T: Scalar>(backbone: Backbone, seed: u64) -> Sequential<T> {
    match backbone {
        Backbone::Resnet50 => resnet50(seed),
        Backbone::Mobilenet => mobilenet(seed),
        Backbone::Vgg16 => vgg16(seed),
    }
}

fn conv_bn<T: Scalar>(
    seq: &mut Sequential<T>,
    layer: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: Padding,
    seed: u64,
) {
    seq.push(Conv2d::new(&name(&format!("{layer}_conv")), cin, cout, kernel, stride, pad, 1, true, seed));
    seq.push(BatchNorm2d::new(&name(&format!("{layer}_bn")), cout, RESNET_BN_EPS));
}

/// ResNet50 v1 bottleneck: 1×1 (strided) → 3×3 → 1×1 with a projection
/// shortcut on the first block of each stage.
fn bottleneck<T: Scalar>(
    stage: usize,
    block: usize,
    cin: usize,
    filters: usize,
    stride: usize,
    seed: u64,
) -> Residual<T> {
    let prefix = format!("conv{stage}_block{block}");
    let mut main = Sequential::new();
    conv_bn(&mut main, &format!("{prefix}_1"), cin, filters, 1, stride, Padding::NONE, seed);
    main.push(Relu::new());
    conv_bn(&mut main, &format!("{prefix}_2"), filters, filters, 3, 1, Padding::uniform(1), seed);
    main.push(Relu::new());
    conv_bn(&mut main, &format!("{prefix}_3"), filters, 4 * filters, 1, 1, Padding::NONE, seed);
    let mut shortcut = Sequential::new();
    if block == 1 {
        conv_bn(&mut shortcut, &format!("{prefix}_0"), cin, 4 * filters, 1, stride, Padding::NONE, seed);
    }
    Residual::new(main, shortcut)
}

fn resnet50<T: Scalar>(seed: u64) -> Sequential<T> {
    let mut net = Sequential::new();
    conv_bn(&mut net, "conv1", 3, 64, 7, 2, Padding::uniform(3), seed);
    net.push(Relu::new());
    net.push(MaxPool2d::new(3, 2, 1));
    let mut cin = 64;
    for (stage, filters, blocks, stride) in [(2, 64, 3, 1), (3, 128, 4, 2), (4, 256, 6, 2), (5, 512, 3, 2)] {
        for block in 1..=blocks {
            let s = if block == 1 { stride } else { 1 };
            net.push(bottleneck(stage, block, cin, filters, s, seed));
            cin = 4 * filters;
        }
    }
    net.push(GlobalAvgPool::new());
    net
}

fn mobilenet<T: Scalar>(seed: u64) -> Sequential<T> {
    let mut net = Sequential::new();
    net.push(Conv2d::new(&name("conv1"), 3, 32, 3, 2, Padding::bottom_right(1), 1, false, seed));
    net.push(BatchNorm2d::new(&name("conv1_bn"), 32, MOBILENET_BN_EPS));
    net.push(Relu6::new());
    let plan = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let mut cin = 32;
    for (i, &(cout, stride)) in plan.iter().enumerate() {
        let id = i + 1;
        let pad = if stride == 1 {
            Padding::uniform(1)
        } else {
            Padding::bottom_right(1)
        };
        net.push(Conv2d::new(&name(&format!("conv_dw_{id}")), cin, cin, 3, stride, pad, cin, false, seed));
        net.push(BatchNorm2d::new(&name(&format!("conv_dw_{id}_bn")), cin, MOBILENET_BN_EPS));
        net.push(Relu6::new());
        net.push(Conv2d::new(&name(&format!("conv_pw_{id}")), cin, cout, 1, 1, Padding::NONE, 1, false, seed));
        net.push(BatchNorm2d::new(&name(&format!("conv_pw_{id}_bn")), cout, MOBILENET_BN_EPS));
        net.push(Relu6::new());
        cin = cout;
    }
    net.push(GlobalAvgPool::new());
    net
}

fn vgg16<T: Scalar>(seed: u64) -> Sequential<T> {
    let mut net = Sequential::new();
    let mut cin = 3;
    for (block, (filters, convs)) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)].into_iter().enumerate() {
        for c in 1..=convs {
            let layer = name(&format!("block{}_conv{c}", block + 1));
            net.push(Conv2d::new(&layer, cin, filters, 3, 1, Padding::uniform(1), 1, true, seed));
            net.push(Relu::new());
            cin = filters;
        }
        net.push(MaxPool2d::new(2, 2, 0));
    }
    net.push(GlobalAvgPool::new());
    net
}

/// Random-init convention for residual trunks: the last BN of every residual
/// branch starts at zero scale so each block begins as the identity map.
pub fn zero_init_residual_branches<T: Scalar>(net: &mut Sequential<T>) {
    use crate::nn::Layer;
    for p in net.params_mut() {
        if p.name.contains("_block") && p.name.ends_with("_3_bn.gamma") {
            p.value.fill(T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn zeroed_gammas(backbone: Backbone) -> Vec<String> {
        let mut net = build::<f32>(backbone, 0);
        zero_init_residual_branches(&mut net);
        net.params()
            .into_iter()
            .filter(|p| p.name.ends_with(".gamma") && p.value.data().iter().all(|&v| v == 0.0))
            .map(|p| p.name.clone())
            .collect()
    }

    #[test]
    fn only_residual_branch_ends_are_zeroed() {
        let resnet = zeroed_gammas(Backbone::Resnet50);
        assert_eq!(resnet.len(), 16);
        assert!(resnet.iter().all(|n| n.contains("_block") && n.ends_with("_3_bn.gamma")));
        assert!(zeroed_gammas(Backbone::Mobilenet).is_empty());
    }
}

