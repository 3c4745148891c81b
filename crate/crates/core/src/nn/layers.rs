use super::conv::output_extent;
use super::{matmul, uniform_init, Layer, Param, Scalar, Tensor};

/// Ordered chain of layers.
#[derive(Default)]
pub struct Sequential<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut iter = self.layers.iter();
        let Some(first) = iter.next() else {
            return x.clone();
        };
        iter.fold(first.forward(x), |h, layer| layer.forward(&h))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut iter = self.layers.iter_mut();
        let Some(first) = iter.next() else {
            return x.clone();
        };
        let h = first.forward_train(x);
        iter.fold(h, |h, layer| layer.forward_train(&h))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut iter = self.layers.iter_mut().rev();
        let Some(last) = iter.next() else {
            return grad_out.clone();
        };
        let g = last.backward(grad_out);
        iter.fold(g, |g, layer| layer.backward(&g))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }
}

/// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
pub struct Residual<T: Scalar> {
    main: Sequential<T>,
    shortcut: Sequential<T>,
    cached_output: Option<Tensor<T>>,
}

impl<T: Scalar> Residual<T> {
    pub fn new(main: Sequential<T>, shortcut: Sequential<T>) -> Self {
        Self {
            main,
            shortcut,
            cached_output: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Residual<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.main.forward(x);
        y.add_assign(&self.shortcut.forward(x));
        y.map(|v| v.max(T::zero()))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.main.forward_train(x);
        y.add_assign(&self.shortcut.forward_train(x));
        let y = y.map(|v| v.max(T::zero()));
        self.cached_output = Some(y.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let y = self
            .cached_output
            .take()
            .expect("Residual::backward called without forward_train");
        let mut g = grad_out.clone();
        g.data_mut()
            .iter_mut()
            .zip(y.data())
            .for_each(|(g, &y)| {
                if y <= T::zero() {
                    *g = T::zero()
                }
            });
        let mut dx = self.main.backward(&g);
        dx.add_assign(&self.shortcut.backward(&g));
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.main.params();
        v.extend(self.shortcut.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.main.params_mut();
        v.extend(self.shortcut.params_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.cached_output = None;
        self.main.clear_cache();
        self.shortcut.clear_cache();
    }
}

/// Batch normalization in inference form: fixed running statistics, learnable
/// affine `gamma`/`beta`.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: f64,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize, eps: f64) -> Self {
        Self {
            gamma: Param::trainable(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::trainable(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.moving_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.moving_variance"), Tensor::full(&[channels], T::one())),
            eps,
            cached_input: None,
        }
    }

    /// Per-channel `(scale, shift)` such that `y = scale * x + shift`.
    fn affine(&self) -> Vec<(T, T)> {
        let eps = T::from_f64_lossy(self.eps);
        self.gamma
            .value
            .data()
            .iter()
            .zip(self.beta.value.data())
            .zip(self.running_mean.value.data().iter().zip(self.running_var.value.data()))
            .map(|((&g, &b), (&m, &v))| {
                let scale = g / (v + eps).sqrt();
                (scale, b - m * scale)
            })
            .collect()
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.gamma.value.len();
        assert_eq!(x.shape()[1], c, "{}: channel mismatch", self.gamma.name);
        let plane: usize = x.shape()[2..].iter().product();
        let coeffs = self.affine();
        let mut y = x.clone();
        // chunks enumerate (batch, channel) planes in order
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let (s, t) = coeffs[i % c];
            chunk.iter_mut().for_each(|v| *v = *v * s + t);
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.cached_input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self
            .cached_input
            .take()
            .expect("BatchNorm2d::backward called without forward_train");
        let c = self.gamma.value.len();
        let plane: usize = x.shape()[2..].iter().product();
        let eps = T::from_f64_lossy(self.eps);
        let inv_std: Vec<T> = self
            .running_var
            .value
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mean = self.running_mean.value.data().to_vec();
        let gamma = self.gamma.value.data().to_vec();
        let mut dx = grad_out.clone();
        let dgamma = self.gamma.grad.data_mut();
        let dbeta = self.beta.grad.data_mut();
        for (i, (gchunk, xchunk)) in dx
            .data_mut()
            .chunks_mut(plane)
            .zip(x.data().chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for (g, &xv) in gchunk.iter_mut().zip(xchunk) {
                sg += *g;
                sgx += *g * (xv - mean[ch]) * inv_std[ch];
                *g *= gamma[ch] * inv_std[ch];
            }
            dbeta[ch] += sg;
            dgamma[ch] += sgx;
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

/// `min(max(x, 0), cap)`; `cap = ∞` gives a plain ReLU.
struct ClampedRelu<T: Scalar> {
    cap: T,
    cached_output: Option<Tensor<T>>,
}

impl<T: Scalar> ClampedRelu<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.max(T::zero()).min(self.cap))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let y = self
            .cached_output
            .take()
            .expect("ReLU backward called without forward_train");
        let mut g = grad_out.clone();
        for (g, &y) in g.data_mut().iter_mut().zip(y.data()) {
            if y <= T::zero() || y >= self.cap {
                *g = T::zero();
            }
        }
        g
    }
}

macro_rules! relu_layer {
    ($name:ident, $doc:literal, $cap:expr) => {
        #[doc = $doc]
        pub struct $name<T: Scalar>(ClampedRelu<T>);

        impl<T: Scalar> $name<T> {
            pub fn new() -> Self {
                Self(ClampedRelu {
                    cap: $cap,
                    cached_output: None,
                })
            }
        }

        impl<T: Scalar> Default for $name<T> {
            fn default() -> Self {
                Self::new()
            }
        }

        impl<T: Scalar> Layer<T> for $name<T> {
            fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
                self.0.forward(x)
            }
            fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
                let y = self.0.forward(x);
                self.0.cached_output = Some(y.clone());
                y
            }
            fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
                self.0.backward(grad_out)
            }
            fn clear_cache(&mut self) {
                self.0.cached_output = None;
            }
        }
    };
}

relu_layer!(Relu, "Rectified linear unit.", T::infinity());
relu_layer!(Relu6, "ReLU clipped at 6.", T::from_f64_lossy(6.0));

/// Max pooling; padded positions never win the max.
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(pad < kernel, "padding must be smaller than the window");
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, record: bool) -> (Tensor<T>, Vec<u32>) {
        assert_eq!(x.rank(), 4, "pool input must be NCHW");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let oh = output_extent(h, self.pad, self.pad, self.kernel, self.stride);
        let ow = output_extent(w, self.pad, self.pad, self.kernel, self.stride);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = if record { vec![0u32; n * c * oh * ow] } else { Vec::new() };
        let src_planes = x.data().chunks(h * w);
        let dst_planes = out.data_mut().chunks_mut(oh * ow);
        for (p, (src, dst)) in src_planes.zip(dst_planes).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    if record {
                        argmax[p * oh * ow + oy * ow + ox] = best_idx as u32;
                    }
                }
            }
        }
        (out, argmax)
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false).0
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, argmax) = self.run(x, true);
        self.cache = Some((x.shape().to_vec(), argmax));
        y
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let (shape, argmax) = self
            .cache
            .take()
            .expect("MaxPool2d::backward called without forward_train");
        let plane = shape[2] * shape[3];
        let out_plane: usize = grad_out.shape()[2..].iter().product();
        let mut dx = Tensor::zeros(&shape);
        for (p, (dst, g)) in dx
            .data_mut()
            .chunks_mut(plane)
            .zip(grad_out.data().chunks(out_plane))
            .enumerate()
        {
            for (j, &gv) in g.iter().enumerate() {
                dst[argmax[p * out_plane + j] as usize] += gv;
            }
        }
        dx
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean over the spatial axes: `[N, C, H, W] → [N, C]`.
#[derive(Default)]
pub struct GlobalAvgPool {
    cached_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.rank(), 4, "global pool input must be NCHW");
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane: usize = x.shape()[2..].iter().product();
        let inv = T::one() / T::from_f64_lossy(plane as f64);
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Tensor::from_vec(&[n, c], data)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.cached_shape = Some(x.shape().to_vec());
        Layer::<T>::forward(self, x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let shape = self
            .cached_shape
            .take()
            .expect("GlobalAvgPool::backward called without forward_train");
        let plane: usize = shape[2..].iter().product();
        let inv = T::one() / T::from_f64_lossy(plane as f64);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &g in grad_out.data() {
            data.extend(std::iter::repeat_n(g * inv, plane));
        }
        Tensor::from_vec(&shape, data)
    }

    fn clear_cache(&mut self) {
        self.cached_shape = None;
    }
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W: [out, in]`.
pub struct Dense<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    /// Weights uniform in `±init_bound`, zero bias.
    pub fn new(name: &str, inputs: usize, outputs: usize, init_bound: f64, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        Self {
            weight: Param::trainable(
                wname.clone(),
                uniform_init(&[outputs, inputs], init_bound, seed, &wname),
            ),
            bias: Param::trainable(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            cached_input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.rank(), 2, "dense input must be [N, F]");
        assert_eq!(x.shape()[1], self.inputs(), "{}: feature mismatch", self.weight.name);
        let (n, fi, fo) = (x.shape()[0], self.inputs(), self.outputs());
        let mut y = Tensor::zeros(&[n, fo]);
        for row in y.data_mut().chunks_mut(fo) {
            row.copy_from_slice(self.bias.value.data());
        }
        matmul(n, fi, fo, x.data(), false, self.weight.value.data(), true, y.data_mut(), true);
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = Layer::forward(self, x);
        self.cached_input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self
            .cached_input
            .take()
            .expect("Dense::backward called without forward_train");
        let (n, fi, fo) = (x.shape()[0], self.inputs(), self.outputs());
        matmul(fo, n, fi, grad_out.data(), true, x.data(), false, self.weight.grad.data_mut(), true);
        let db = self.bias.grad.data_mut();
        for row in grad_out.data().chunks(fo) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        let mut dx = Tensor::zeros(&[n, fi]);
        matmul(n, fo, fi, grad_out.data(), false, self.weight.value.data(), false, dx.data_mut(), false);
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}
