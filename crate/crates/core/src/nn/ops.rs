//! Stateless forward/backward kernels.

use super::{Real, Tensor};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a forward convolution over `n` input pixels.
    pub fn out_size(&self, n: usize) -> usize {
        let padded = n + 2 * self.pad;
        assert!(padded >= self.kernel, "input {n} smaller than kernel");
        (padded - self.kernel) / self.stride + 1
    }

    /// Output extent of a transposed convolution over `n` input pixels.
    pub fn transposed_out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `src` (C×H×W) into `col` ((C·k·k)×(Ho·Wo)).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for c in 0..channels {
        let img = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` back into `dst` (C×H×W).
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for c in 0..channels {
        let img = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is O×C×k×k.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, g: ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let out_c = weight.batch();
    assert_eq!(weight.channels(), c, "conv2d channel mismatch");
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let ckk = c * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut y = Tensor::zeros([n, out_c, ho, wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * plane]
    };
    for i in 0..n {
        let xi = x.item(i);
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, c, h, w, g, ho, wo, &mut col);
            &col
        };
        let yi = y.item_mut(i);
        T::gemm(out_c, ckk, plane, T::one(), weight.data(), (ckk, 1), cols, (plane, 1), T::zero(), yi);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                yi[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    y
}

/// Gradients of [`conv2d`]. Weight/bias gradients are accumulated into the
/// provided buffers; the input gradient is returned when `need_dx`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let out_c = weight.batch();
    let (ho, wo) = (dy.height(), dy.width());
    let ckk = c * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut col = vec![T::zero(); ckk * plane];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        let dyi = dy.item(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (o, b) in db.iter_mut().enumerate() {
                *b += dyi[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, g, ho, wo, &mut col);
                &col
            };
            // dW[O×Ckk] += dY[O×P] · colᵀ[P×Ckk]
            T::gemm(out_c, plane, ckk, T::one(), dyi, (plane, 1), cols, (1, plane), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.item_mut(i);
            if g.is_pointwise() {
                T::gemm(ckk, out_c, plane, T::one(), weight.data(), (1, ckk), dyi, (plane, 1), T::zero(), dxi);
            } else {
                // dcol[Ckk×P] = Wᵀ[Ckk×O] · dY[O×P]
                T::gemm(ckk, out_c, plane, T::one(), weight.data(), (1, ckk), dyi, (plane, 1), T::zero(), &mut col);
                col2im(&col, c, h, w, g, ho, wo, dxi);
            }
        }
    }
    dx
}

/// Transposed convolution. `weight` is Ci×Co×k×k (the layout of the adjoint conv).
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Tensor<T> {
    let [n, ci, h, w] = x.shape();
    assert_eq!(weight.batch(), ci, "conv_transpose2d channel mismatch");
    let co = weight.channels();
    let (ho, wo) = (g.transposed_out_size(h), g.transposed_out_size(w));
    let cokk = co * g.kernel * g.kernel;
    let plane = h * w;
    let mut col = vec![T::zero(); cokk * plane];
    let mut y = Tensor::zeros([n, co, ho, wo]);
    for i in 0..n {
        // col[Cokk×P] = Wᵀ[Cokk×Ci] · x[Ci×P]
        T::gemm(cokk, ci, plane, T::one(), weight.data(), (1, cokk), x.item(i), (plane, 1), T::zero(), &mut col);
        let yi = y.item_mut(i);
        col2im(&col, co, ho, wo, g, h, w, yi);
        if let Some(b) = bias {
            let oplane = ho * wo;
            for (o, &bo) in b.iter().enumerate() {
                yi[o * oplane..(o + 1) * oplane].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    y
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, ci, h, w] = x.shape();
    let co = weight.channels();
    let (ho, wo) = (dy.height(), dy.width());
    let cokk = co * g.kernel * g.kernel;
    let plane = h * w;
    let oplane = ho * wo;
    let mut col = vec![T::zero(); cokk * plane];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        let dyi = dy.item(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (o, b) in db.iter_mut().enumerate() {
                *b += dyi[o * oplane..(o + 1) * oplane].iter().copied().sum::<T>();
            }
        }
        im2col(dyi, co, ho, wo, g, h, w, &mut col);
        if let Some(dw) = dweight.as_deref_mut() {
            // dW[Ci×Cokk] += x[Ci×P] · colᵀ[P×Cokk]
            T::gemm(ci, plane, cokk, T::one(), x.item(i), (plane, 1), &col, (1, plane), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dx[Ci×P] = W[Ci×Cokk] · col[Cokk×P]
            T::gemm(ci, cokk, plane, T::one(), weight.data(), (cokk, 1), &col, (plane, 1), T::zero(), dx.item_mut(i));
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| if v > T::zero() { d } else { d * slope })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, T::zero())
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    leaky_relu_backward(x, dy, T::zero())
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward of sigmoid expressed through its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &d)| d * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// 2×2 stride-2 max pooling. Returns the output and the flat argmax index of each
/// output element within its channel plane.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let (src, dst) = (x.data(), y.data_mut());
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if s[idx] > s[best] {
                        best = idx;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                dst[o] = s[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<T: Real>(input_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input_shape;
    let plane_out = dy.height() * dy.width();
    let mut dx = Tensor::zeros(input_shape);
    let dst = dx.data_mut();
    for (o, (&a, &g)) in arg.iter().zip(dy.data()).enumerate() {
        let plane = o / plane_out;
        dst[plane * h * w + a as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (src, dst) = (x.data(), y.data_mut());
    for plane in 0..n * c {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[plane * 4 * h * w + yy * 2 * w + xx] = src[plane * h * w + (yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let (src, dst) = (dy.data(), dx.data_mut());
    for plane in 0..n * c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[plane * h * w + (yy / 2) * w + xx / 2] += src[plane * h2 * w2 + yy * w2 + xx];
            }
        }
    }
    dx
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    assert_eq!([n, h, w], [b.batch(), b.height(), b.width()], "concat shape mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + b.channels(), h, w], data)
}

/// Splits a gradient of a concatenation back into its `a` and `b` parts.
pub fn split_channels<T: Real>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = d.shape();
    let cut = ca * h * w;
    let mut da = Vec::with_capacity(n * cut);
    let mut db = Vec::with_capacity(n * (c - ca) * h * w);
    for i in 0..n {
        let item = d.item(i);
        da.extend_from_slice(&item[..cut]);
        db.extend_from_slice(&item[cut..]);
    }
    (
        Tensor::from_vec([n, ca, h, w], da),
        Tensor::from_vec([n, c - ca, h, w], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct-loop convolution used as an independent reference.
    fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let o = w.batch();
        let (ho, wo) = (g.out_size(h), g.out_size(wd));
        let k = g.kernel;
        let mut y = Tensor::zeros([n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [ConvGeom::new(4, 2, 1), ConvGeom::new(3, 1, 1), ConvGeom::new(1, 1, 0)] {
            let x = random([2, 3, 8, 6], &mut rng);
            let w = random([5, 3, g.kernel, g.kernel], &mut rng);
            let fast = conv2d(&x, &w, None, g);
            let slow = conv2d_naive(&x, &w, g);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoint_identities() {
        // <conv(x), y> == <x, convᵀ(y)> for both conv and transposed conv.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [ConvGeom::new(4, 2, 1), ConvGeom::new(3, 1, 1), ConvGeom::new(1, 1, 0)] {
            let x = random([2, 3, 8, 8], &mut rng);
            let w = random([4, 3, g.kernel, g.kernel], &mut rng);
            let y = conv2d(&x, &w, None, g);
            let r = random(y.shape(), &mut rng);
            let dx = conv2d_backward(&x, &w, &r, g, None, None, true).unwrap();
            assert!((dot(&y, &r) - dot(&x, &dx)).abs() < 1e-10);

            // transposed conv with weight laid out Ci×Co×k×k is the adjoint of conv
            let xt = random([2, 4, y.height(), y.width()], &mut rng);
            let yt = conv_transpose2d(&xt, &w, None, g);
            assert_eq!(yt.shape(), [2, 3, 8, 8]);
            let conv_of_x = conv2d(&x, &w, None, g);
            assert!((dot(&yt, &x) - dot(&xt, &conv_of_x)).abs() < 1e-10);
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom::new(4, 2, 1);
        let x = random([2, 2, 6, 6], &mut rng);
        let w = random([3, 2, 4, 4], &mut rng);
        let r = random([2, 3, 3, 3], &mut rng);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        conv2d_backward(&x, &w, &r, g, Some(&mut dw), Some(&mut db), false);
        let loss = |w: &Tensor<f64>, b: &[f64]| dot(&conv2d(&x, w, Some(b), g), &r);
        let b0 = vec![0.1, -0.2, 0.3];
        for i in [0, 7, 31, 95] {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += 1e-6;
            wm.data_mut()[i] -= 1e-6;
            let fd = (loss(&wp, &b0) - loss(&wm, &b0)) / 2e-6;
            assert!((fd - dw[i]).abs() < 1e-6, "{fd} vs {}", dw[i]);
        }
        let r_sum: f64 = r.item(0)[..9].iter().chain(&r.item(1)[..9]).sum();
        assert!((db[0] - r_sum).abs() < 1e-12);

        // transposed conv weight gradient
        let xt = random([2, 3, 3, 3], &mut rng);
        let rt = random([2, 2, 6, 6], &mut rng);
        let mut dwt = vec![0.0; w.len()];
        conv_transpose2d_backward(&xt, &w, &rt, g, Some(&mut dwt), None, false);
        let loss_t = |w: &Tensor<f64>| dot(&conv_transpose2d(&xt, w, None, g), &rt);
        for i in [0, 11, 50, 95] {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += 1e-6;
            wm.data_mut()[i] -= 1e-6;
            let fd = (loss_t(&wp) - loss_t(&wm)) / 2e-6;
            assert!((fd - dwt[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([2, 3, 6, 4], &mut rng);
        let up = upsample_nearest2(&x);
        let r = random(up.shape(), &mut rng);
        assert!((dot(&up, &r) - dot(&x, &upsample_nearest2_backward(&r))).abs() < 1e-12);

        let (p, arg) = max_pool2(&x);
        assert_eq!(p.shape(), [2, 3, 3, 2]);
        let rp = random(p.shape(), &mut rng);
        let dx = max_pool2_backward(x.shape(), &arg, &rp);
        assert!((dot(&p, &rp) - dot(&x, &dx)).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random([2, 2, 3, 3], &mut rng);
        let b = random([2, 5, 3, 3], &mut rng);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 2);
        assert_eq!((a, b), (a2, b2));
    }
}
