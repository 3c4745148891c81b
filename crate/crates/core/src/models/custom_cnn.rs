use crate::nn::{Conv2d, GlobalAvgPool, MaxPool2d, Padding, Relu, Scalar, Sequential};

/// Filters per conv block; each block halves the spatial size.
pub const CUSTOM_CNN_FILTERS: [usize; 4] = [32, 64, 128, 256];

pub(super) fn conv_blocks<T: Scalar>(seed: u64) -> Sequential<T> {
    let mut net = Sequential::new();
    let mut cin = 3;
    for (i, &filters) in CUSTOM_CNN_FILTERS.iter().enumerate() {
        let name = format!("features.block{}_conv", i + 1);
        net.push(Conv2d::new(&name, cin, filters, 3, 1, Padding::uniform(1), 1, true, seed));
        net.push(Relu::new());
        net.push(MaxPool2d::new(2, 2, 0));
        cin = filters;
    }
    net
}

pub(super) fn features<T: Scalar>(seed: u64) -> Sequential<T> {
    conv_blocks(seed).with(GlobalAvgPool::new())
}
