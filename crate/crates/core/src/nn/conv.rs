//! 2-D convolution via im2col + GEMM, with direct kernels for depthwise and
//! pointwise cases.

use super::{he_bound, matmul, uniform_init, Layer, Param, Scalar, Tensor};

/// Zero padding applied around each spatial plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Pads one extra row/column at the bottom/right only, as TensorFlow's
    /// "same" does for stride-2 3×3 kernels on even inputs.
    pub fn bottom_right(p: usize) -> Self {
        Self {
            top: 0,
            bottom: p,
            left: 0,
            right: p,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Spatial output size of a windowed op; panics if the window does not fit.
pub(crate) fn output_extent(input: usize, before: usize, after: usize, kernel: usize, stride: usize) -> usize {
    let padded = input + before + after;
    assert!(
        padded >= kernel,
        "window of {kernel} does not fit padded extent {padded}"
    );
    (padded - kernel) / stride + 1
}

fn im2col<T: Scalar>(input: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &input[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut out[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution over NCHW input.
///
/// Weight layout is `[out_channels, in_channels / groups, kh, kw]`.
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    stride: usize,
    padding: Padding,
    groups: usize,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights from `(seed, name)`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        assert!(groups >= 1 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        assert!(stride >= 1 && kernel >= 1);
        let fan_in = in_channels / groups * kernel * kernel;
        let wname = format!("{name}.weight");
        let weight = Param::trainable(
            wname.clone(),
            uniform_init(
                &[out_channels, in_channels / groups, kernel, kernel],
                he_bound(fan_in),
                seed,
                &wname,
            ),
        );
        let bias = bias.then(|| Param::trainable(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            stride,
            padding,
            groups,
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1] * self.groups
    }

    fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        assert_eq!(x.rank(), 4, "conv input must be NCHW");
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(
            c,
            self.in_channels(),
            "{}: expected {} input channels, got {c}",
            self.weight.name,
            self.in_channels()
        );
        let (kh, kw) = self.kernel();
        let p = self.padding;
        Geometry {
            c: c / self.groups,
            h,
            w,
            kh,
            kw,
            stride: self.stride,
            pad: p,
            oh: output_extent(h, p.top, p.bottom, kh, self.stride),
            ow: output_extent(w, p.left, p.right, kw, self.stride),
        }
    }

    fn is_pointwise(&self, g: &Geometry) -> bool {
        g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == Padding::NONE
    }

    fn is_depthwise(&self) -> bool {
        let s = self.weight.value.shape();
        s[1] == 1 && s[0] == self.groups
    }

    fn depthwise_forward(&self, x: &[T], g: &Geometry, out: &mut [T]) {
        let w = self.weight.value.data();
        let k = g.kh * g.kw;
        for ch in 0..self.groups {
            let src = &x[ch * g.in_plane()..(ch + 1) * g.in_plane()];
            let dst = &mut out[ch * g.out_plane()..(ch + 1) * g.out_plane()];
            let kern = &w[ch * k..(ch + 1) * k];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += kern[ky * g.kw + kx] * src[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }

    fn depthwise_backward(&mut self, x: &[T], dy: &[T], g: &Geometry, dx: &mut [T]) {
        let k = g.kh * g.kw;
        for ch in 0..self.groups {
            let src = &x[ch * g.in_plane()..(ch + 1) * g.in_plane()];
            let dsrc = &mut dx[ch * g.in_plane()..(ch + 1) * g.in_plane()];
            let go = &dy[ch * g.out_plane()..(ch + 1) * g.out_plane()];
            let kern: Vec<T> = self.weight.value.data()[ch * k..(ch + 1) * k].to_vec();
            let dkern = &mut self.weight.grad.data_mut()[ch * k..(ch + 1) * k];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gval = go[oy * g.ow + ox];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let idx = iy as usize * g.w + ix as usize;
                                dkern[ky * g.kw + kx] += gval * src[idx];
                                dsrc[idx] += gval * kern[ky * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run_forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let n = x.batch();
        let cout = self.out_channels();
        let cout_g = cout / self.groups;
        let kdim = g.c * g.kh * g.kw;
        let plane = g.out_plane();
        let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
        let pointwise = self.is_pointwise(&g);
        let depthwise = self.is_depthwise() && !pointwise;
        let mut cols = if pointwise || depthwise {
            Vec::new()
        } else {
            vec![T::zero(); kdim * plane]
        };
        let w = self.weight.value.data();
        for b in 0..n {
            let xin = x.item(b);
            let yout = out.item_mut(b);
            if depthwise {
                self.depthwise_forward(xin, &g, yout);
            } else {
                for grp in 0..self.groups {
                    let xg = &xin[grp * g.c * g.in_plane()..(grp + 1) * g.c * g.in_plane()];
                    let src: &[T] = if pointwise {
                        xg
                    } else {
                        im2col(xg, &g, &mut cols);
                        &cols
                    };
                    matmul(
                        cout_g,
                        kdim,
                        plane,
                        &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                        false,
                        src,
                        false,
                        &mut yout[grp * cout_g * plane..(grp + 1) * cout_g * plane],
                        false,
                    );
                }
            }
            if let Some(bias) = &self.bias {
                for (co, &bv) in bias.value.data().iter().enumerate() {
                    yout[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run_forward(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.run_forward(x);
        self.cached_input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let x = self
            .cached_input
            .take()
            .expect("Conv2d::backward called without forward_train");
        let g = self.geometry(&x);
        let n = x.batch();
        let cout = self.out_channels();
        let cout_g = cout / self.groups;
        let kdim = g.c * g.kh * g.kw;
        let plane = g.out_plane();
        assert_eq!(grad_out.shape(), &[n, cout, g.oh, g.ow], "conv grad shape");

        let mut dx = Tensor::zeros(x.shape());
        let pointwise = self.is_pointwise(&g);
        let depthwise = self.is_depthwise() && !pointwise;

        if let Some(bias) = &mut self.bias {
            let db = bias.grad.data_mut();
            for b in 0..n {
                let go = grad_out.item(b);
                for (co, d) in db.iter_mut().enumerate() {
                    *d += go[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                }
            }
        }

        if depthwise {
            for b in 0..n {
                self.depthwise_backward(x.item(b), grad_out.item(b), &g, dx.item_mut(b));
            }
            return dx;
        }

        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * plane] };
        let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * plane] };
        for b in 0..n {
            let xin = x.item(b);
            let go = grad_out.item(b);
            let dxb = dx.item_mut(b);
            for grp in 0..self.groups {
                let xg = &xin[grp * g.c * g.in_plane()..(grp + 1) * g.c * g.in_plane()];
                let gog = &go[grp * cout_g * plane..(grp + 1) * cout_g * plane];
                let wrange = grp * cout_g * kdim..(grp + 1) * cout_g * kdim;
                let src: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, &g, &mut cols);
                    &cols
                };
                // dW_g += dY_g · colsᵀ
                matmul(
                    cout_g,
                    plane,
                    kdim,
                    gog,
                    false,
                    src,
                    true,
                    &mut self.weight.grad.data_mut()[wrange.clone()],
                    true,
                );
                let wg = &self.weight.value.data()[wrange];
                let dxg = &mut dxb[grp * g.c * g.in_plane()..(grp + 1) * g.c * g.in_plane()];
                if pointwise {
                    matmul(kdim, cout_g, plane, wg, true, gog, false, dxg, true);
                } else {
                    matmul(kdim, cout_g, plane, wg, true, gog, false, &mut dcols, false);
                    col2im(&dcols, &g, dxg);
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}
