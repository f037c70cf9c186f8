//! Forward and backward kernels for each supported layer.
//!
//! Every function here is a pure computation over tensors; the tape in
//! `graph` decides what to keep for the backward pass.

use super::{Scalar, Tensor};
use crate::error::{IdrError, Result};

/// Lowers one `c×h×w` image into a `(c·k·k) × (h·w)` matrix for a "same"
/// zero-padded convolution with an odd `k×k` kernel.
pub fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                // valid output columns for this horizontal shift
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    out[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Validates conv operand shapes, returning `(n, c_in, h, w, c_out, k)`.
pub fn conv2d_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (oc, ic, kh, kw) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => {
            return Err(IdrError::shape(format!(
                "conv kernel must be (out_ch, in_ch, k, k), got {s:?}"
            )))
        }
    };
    if kh != kw || kh % 2 == 0 {
        return Err(IdrError::shape(format!(
            "conv kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if ic != c {
        return Err(IdrError::shape(format!(
            "conv input has {c} channels but kernel expects {ic}"
        )));
    }
    if bias.shape() != [oc] {
        return Err(IdrError::shape(format!(
            "conv bias must have shape [{oc}], got {:?}",
            bias.shape()
        )));
    }
    Ok((n, c, h, w, oc, kh))
}

/// Same-padded 2D convolution (cross-correlation, as in deep-learning
/// frameworks). Returns the output and the lowered input columns, which the
/// backward pass reuses. For 1×1 kernels no columns are materialized.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w, oc, k) = conv2d_dims(input, kernel, bias)?;
    let hw = h * w;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&[n, oc, h, w]);
    let mut cols = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); n * kk * hw]
    };
    let x = input.data();
    let wt = kernel.data();
    let b = bias.data();
    let y = out.data_mut();
    for bi in 0..n {
        let img = &x[bi * c * hw..(bi + 1) * c * hw];
        let lowered: &[T] = if k == 1 {
            img
        } else {
            let dst = &mut cols[bi * kk * hw..(bi + 1) * kk * hw];
            im2col(img, c, h, w, k, dst);
            dst
        };
        let dst = &mut y[bi * oc * hw..(bi + 1) * oc * hw];
        for (o, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(b[o]);
        }
        unsafe {
            T::gemm(
                oc,
                kk,
                hw,
                T::one(),
                wt.as_ptr(),
                kk as isize,
                1,
                lowered.as_ptr(),
                hw as isize,
                1,
                T::one(),
                dst.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Ok((out, cols))
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    cols: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = input.dims4().expect("conv input is rank 4");
    let (oc, k) = (kernel.shape()[0], kernel.shape()[2]);
    let hw = h * w;
    let kk = c * k * k;
    let x = input.data();
    let wt = kernel.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); oc];
    let mut gcols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for bi in 0..n {
        let go = &grad_out[bi * oc * hw..(bi + 1) * oc * hw];
        for (o, plane) in go.chunks(hw).enumerate() {
            gb[o] += plane.iter().copied().sum::<T>();
        }
        let lowered: &[T] = if k == 1 {
            &x[bi * c * hw..(bi + 1) * c * hw]
        } else {
            &cols[bi * kk * hw..(bi + 1) * kk * hw]
        };
        // dW += dY · colsᵀ
        unsafe {
            T::gemm(
                oc,
                hw,
                kk,
                T::one(),
                go.as_ptr(),
                hw as isize,
                1,
                lowered.as_ptr(),
                1,
                hw as isize,
                T::one(),
                gw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        // dcols = Wᵀ · dY
        let gimg = &mut gx[bi * c * hw..(bi + 1) * c * hw];
        let target: &mut [T] = if k == 1 { gimg } else { &mut gcols };
        unsafe {
            T::gemm(
                kk,
                oc,
                hw,
                T::one(),
                wt.as_ptr(),
                1,
                kk as isize,
                go.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                target.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        if k != 1 {
            col2im(&gcols, c, h, w, k, &mut gx[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    (gx, gw, gb)
}

pub fn leaky_relu_forward<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { v * slope })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn leaky_relu_backward<T: Scalar>(grad_out: &[T], input: &Tensor<T>, slope: T) -> Vec<T> {
    grad_out
        .iter()
        .zip(input.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
        .collect()
}

/// 2×2 non-overlapping max pooling. The second return value holds, for each
/// output element, the flat input index that won; ties go to the first
/// element in row-major order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(IdrError::shape(format!(
            "maxpool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                y[o] = x[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        gx[i] += g;
    }
    gx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
        for yy in 0..oh {
            let srow = &src[(yy / 2) * w..(yy / 2 + 1) * w];
            let drow = &mut dst[yy * ow..(yy + 1) * ow];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(grad_out: &[T], input_shape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let ow = 2 * w;
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for yy in 0..2 * h {
            let srow = &src[yy * ow..(yy + 1) * ow];
            let drow = &mut dst[(yy / 2) * w..(yy / 2 + 1) * w];
            for (xx, &g) in srow.iter().enumerate() {
                drow[xx / 2] += g;
            }
        }
    }
    gx
}

/// Concatenates along the channel axis.
pub fn concat_channels_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(IdrError::shape(format!(
            "concat needs matching batch and spatial extents, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for bi in 0..na {
        data.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Tensor::from_vec(&[na, ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into the two operands' gradients.
pub fn concat_channels_backward<T: Scalar>(
    grad_out: &[T],
    a_shape: &[usize],
    b_shape: &[usize],
) -> (Vec<T>, Vec<T>) {
    let (n, ca, h, w) = (a_shape[0], a_shape[1], a_shape[2], a_shape[3]);
    let cb = b_shape[1];
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for bi in 0..n {
        let item = &grad_out[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
        ga.extend_from_slice(&item[..ca * hw]);
        gb.extend_from_slice(&item[ca * hw..]);
    }
    (ga, gb)
}

fn ensure_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(IdrError::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    ensure_same_shape(pred, target, "l1_loss")?;
    if pred.is_empty() {
        return Err(IdrError::shape("l1_loss of empty tensors"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs().as_f64())
        .sum();
    Ok(T::of_f64(sum / pred.len() as f64))
}

/// Subgradient of [`l1_loss`] with respect to `pred`, using sign(0) = 0.
pub fn l1_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Vec<T> {
    let inv = T::one() / T::of_f64(pred.len() as f64);
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p > t {
                inv
            } else if p < t {
                -inv
            } else {
                T::zero()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct-summation convolution used as the reference for im2col+gemm.
    fn reference_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (oc, ks) = (k.shape()[0], k.shape()[2]);
        let p = (ks / 2) as isize;
        let mut out = Tensor::zeros(&[n, oc, h, w]);
        for bi in 0..n {
            for o in 0..oc {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ky in 0..ks as isize {
                                for kx in 0..ks as isize {
                                    let (sy, sx) = (y + ky - p, xx + kx - p);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * c + ci) * h + sy as usize) * w + sx as usize;
                                    let ki = ((o * c + ci) * ks + ky as usize) * ks + kx as usize;
                                    acc += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                        out.data_mut()[((bi * oc + o) * h + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t(&[1, 1, 3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let (y, _) = conv2d_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = t(&[2, 2, 4, 4], (0..64).map(|v| v as f64).collect());
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let (y, _) = conv2d_forward(&x, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_kernel_center_sum() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let (y, _) = conv2d_forward(&x, &k, &b).unwrap();
        let reference = reference_conv(&x, &k, &b);
        // hand-computed: the center sees all nine values
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(reference.data()[4], 45.0);
        // corner (0,0) sees 1+2+4+5
        assert_eq!(y.data()[0], 12.0);
        assert_eq!(y.data(), reference.data());
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut state = 17u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(n, c, h, w, oc, k) in &[(1, 1, 5, 7, 2, 3), (2, 3, 4, 4, 5, 5), (1, 2, 6, 3, 1, 1)] {
            let x = t(&[n, c, h, w], (0..n * c * h * w).map(|_| next()).collect());
            let kt = t(&[oc, c, k, k], (0..oc * c * k * k).map(|_| next()).collect());
            let b = t(&[oc], (0..oc).map(|_| next()).collect());
            let (y, _) = conv2d_forward(&x, &kt, &b).unwrap();
            let r = reference_conv(&x, &kt, &b);
            for (a, e) in y.data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            conv2d_forward(&x, &even, &Tensor::zeros(&[1])),
            Err(IdrError::Shape(_))
        ));
        let wrong_in = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &wrong_in, &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("2 channels"));
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let x = t(&[4], vec![-2.0, -1.0, 0.0, 3.0]);
        assert_eq!(leaky_relu_forward(&x, 0.1).data(), &[-0.2, -0.1, 0.0, 3.0]);
        assert_eq!(leaky_relu_forward(&x, 0.0).data()[1], 0.0);
        let pos = t(&[3], vec![0.0, 1.0, 2.5]);
        assert_eq!(leaky_relu_forward(&pos, 0.3).data(), pos.data());
        let g = leaky_relu_backward(&[1.0, 1.0, 1.0, 1.0], &x, 0.1);
        assert_eq!(g, vec![0.1, 0.1, 0.1, 1.0]);
    }

    #[test]
    fn maxpool_values_and_ties() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let tie = t(&[1, 1, 2, 2], vec![5.0; 4]);
        let (y, arg) = maxpool2_forward(&tie).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(maxpool2_backward(&[1.0], &arg, 4), vec![1.0, 0.0, 0.0, 0.0]);

        let c = Tensor::filled(&[1, 2, 4, 6], 0.7f64);
        let (y, _) = maxpool2_forward(&c).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.7));

        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2_forward(&odd), Err(IdrError::Shape(_))));
    }

    #[test]
    fn upsample_values_and_gradient() {
        let one = t(&[1, 1, 1, 1], vec![3.0]);
        assert_eq!(upsample2_forward(&one).unwrap().data(), &[3.0; 4]);

        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
        let g = upsample2_backward(&[1.0; 16], &[1, 1, 2, 2]);
        assert_eq!(g, vec![4.0; 4]);
    }

    #[test]
    fn pool_after_upsample_is_identity_on_constant() {
        let c = Tensor::filled(&[2, 3, 4, 4], -1.25f64);
        let up = upsample2_forward(&c).unwrap();
        let (down, _) = maxpool2_forward(&up).unwrap();
        assert_eq!(down, c);
    }

    #[test]
    fn concat_shapes_and_split() {
        let a = t(&[2, 3, 2, 2], (0..24).map(|v| v as f64).collect());
        let b = t(&[2, 5, 2, 2], (0..40).map(|v| -(v as f64)).collect());
        let y = concat_channels_forward(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 8, 2, 2]);
        let (ga, gb) = concat_channels_backward(y.data(), a.shape(), b.shape());
        assert_eq!(ga, a.data());
        assert_eq!(gb, b.data());

        let empty = Tensor::<f64>::zeros(&[2, 0, 2, 2]);
        assert_eq!(concat_channels_forward(&a, &empty).unwrap(), a);

        let bad = Tensor::<f64>::zeros(&[2, 1, 3, 2]);
        assert!(matches!(concat_channels_forward(&a, &bad), Err(IdrError::Shape(_))));
    }

    #[test]
    fn l1_values() {
        let p = t(&[2], vec![1.0, 2.0]);
        let q = t(&[2], vec![1.0, 3.0]);
        assert_eq!(l1_loss(&p, &q).unwrap(), 0.5);
        assert_eq!(l1_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(l1_loss_grad(&p, &p), vec![0.0, 0.0]);
        assert_eq!(l1_loss_grad(&p, &q), vec![0.0, -0.5]);
        assert!(l1_loss(&p, &t(&[1], vec![0.0])).is_err());
    }
}
