//! Forward numerical kernels behind the graph ops. Shapes are validated when
//! nodes are built, so these functions assume consistent inputs.

use crate::tensor::Tensor;

/// Geometry of a 2-D cross-correlation over `[batch, channels, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// `op(a) * op(b)` where `op` optionally transposes a 2-D operand.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let p = if tb { br } else { bc };
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = if ta { ad[kk * ac + i] } else { ad[i * ac + kk] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + kk];
                }
            } else {
                let brow = &bd[kk * bc..(kk + 1) * bc];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::from_raw(vec![n, p], out)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Direct cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, k: &Tensor, g: ConvGeom) -> Tensor {
    let (nb, ci, h, w) = dims4(x);
    let (co, _, kh, kw) = dims4(k);
    let ho = g.out_len(h, kh).unwrap();
    let wo = g.out_len(w, kw).unwrap();
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; nb * co * ho * wo];
    for b in 0..nb {
        for o in 0..co {
            let obase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = kd[((o * ci + c) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let orow = obase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[orow + ox] += kv * xd[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![nb, co, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv_back_input(dy: &Tensor, k: &Tensor, g: ConvGeom, in_hw: (usize, usize)) -> Tensor {
    let (nb, co, ho, wo) = dims4(dy);
    let (_, ci, kh, kw) = dims4(k);
    let (h, w) = in_hw;
    let dd = dy.data();
    let kd = k.data();
    let mut out = vec![0.0; nb * ci * h * w];
    for b in 0..nb {
        for o in 0..co {
            let dbase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = kd[((o * ci + c) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let drow = dbase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[xrow + ix as usize] += kv * dd[drow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![nb, ci, h, w], out)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv_back_kernel(x: &Tensor, dy: &Tensor, g: ConvGeom, k_hw: (usize, usize)) -> Tensor {
    let (nb, ci, h, w) = dims4(x);
    let (_, co, ho, wo) = dims4(dy);
    let (kh, kw) = k_hw;
    let xd = x.data();
    let dd = dy.data();
    let mut out = vec![0.0; co * ci * kh * kw];
    for b in 0..nb {
        for o in 0..co {
            let dbase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let drow = dbase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[xrow + ix as usize] * dd[drow + ox];
                            }
                        }
                        out[((o * ci + c) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![co, ci, kh, kw], out)
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (nb, c, h, w) = dims4(x);
    let xd = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; nb * c * h2 * w2];
    for p in 0..nb * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = xd[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_raw(vec![nb, c, h2, w2], out)
}

/// 2x2 sum pooling, the adjoint of [`upsample2x`].
pub fn sumpool2x(x: &Tensor) -> Tensor {
    let (nb, c, h2, w2) = dims4(x);
    let (h, w) = (h2 / 2, w2 / 2);
    let xd = x.data();
    let mut out = vec![0.0; nb * c * h * w];
    for p in 0..nb * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h + y / 2) * w + xx / 2] += xd[(p * h2 + y) * w2 + xx];
            }
        }
    }
    Tensor::from_raw(vec![nb, c, h, w], out)
}

/// Views `x` as `[outer, mid, inner]` and sums over the outer and inner axes.
pub fn sum_keep(x: &Tensor, outer: usize, mid: usize, inner: usize) -> Tensor {
    let xd = x.data();
    let mut out = vec![0.0; mid];
    for o in 0..outer {
        for (m, acc) in out.iter_mut().enumerate() {
            let base = (o * mid + m) * inner;
            *acc += xd[base..base + inner].iter().sum::<f64>();
        }
    }
    Tensor::from_raw(vec![mid], out)
}

/// Broadcasts a `[mid]` vector over the outer and inner axes of `shape`.
pub fn expand(v: &Tensor, outer: usize, mid: usize, inner: usize, shape: &[usize]) -> Tensor {
    let vd = v.data();
    let mut out = Vec::with_capacity(outer * mid * inner);
    for _ in 0..outer {
        for &val in vd.iter().take(mid) {
            out.extend(std::iter::repeat_n(val, inner));
        }
    }
    Tensor::from_raw(shape.to_vec(), out)
}

/// Row-wise log-sum-exp of a 2-D tensor.
pub fn logsumexp_rows(x: &Tensor) -> Tensor {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let out = (0..n)
        .map(|i| {
            let row = &x.data()[i * p..(i + 1) * p];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Tensor::from_raw(vec![n], out)
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        let row = &x.data()[i * p..(i + 1) * p];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Tensor::from_raw(vec![n, p], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_transpose_flags_agree() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let ab = matmul(&a, &b, false, false);
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        let at = t(&[3, 2], &[1., 4., 2., 5., 3., 6.]);
        let bt = t(&[2, 3], &[7., 9., 11., 8., 10., 12.]);
        assert_eq!(matmul(&at, &b, true, false).data(), ab.data());
        assert_eq!(matmul(&a, &bt, false, true).data(), ab.data());
        assert_eq!(matmul(&at, &bt, true, true).data(), ab.data());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let y = conv2d(&x, &k, ConvGeom { stride: 1, pad: 1 });
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <dy, conv(x,k)> == <conv_back_input(dy,k), x> == <conv_back_kernel(x,dy), k>
        let g = ConvGeom { stride: 2, pad: 1 };
        let x = Tensor::from_raw(vec![2, 2, 5, 5], (0..100).map(|i| ((i * 37 % 11) as f64) - 5.0).collect());
        let k = Tensor::from_raw(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 13 % 7) as f64) - 3.0).collect());
        let y = conv2d(&x, &k, g);
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        let dy = Tensor::from_raw(y.shape().to_vec(), (0..y.numel()).map(|i| ((i * 5 % 9) as f64) - 4.0).collect());
        let lhs = dy.dot(&y);
        let dx = conv_back_input(&dy, &k, g, (5, 5));
        let dk = conv_back_kernel(&x, &dy, g, (3, 3));
        assert_eq!(lhs, dx.dot(&x));
        assert_eq!(lhs, dk.dot(&k));
    }

    #[test]
    fn upsample_and_sumpool_are_adjoint() {
        let x = Tensor::from_raw(vec![1, 2, 2, 3], (0..12).map(|i| i as f64).collect());
        let u = upsample2x(&x);
        let y = Tensor::from_raw(u.shape().to_vec(), (0..u.numel()).map(|i| (i % 5) as f64).collect());
        assert_eq!(y.dot(&u), sumpool2x(&y).dot(&x));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = t(&[1, 3], &[1000., 0., -1000.]);
        let s = softmax_rows(&x);
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        let l = logsumexp_rows(&x);
        assert!((l.item() - 1000.0).abs() < 1e-12);
    }
}
