//! 2-D cross-correlation via im2col + gemm, and the per-token 1×1 map.

use super::{gemm, Function, Graph, Scalar, Tensor, Tr, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], col: &mut [F]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(g: &ConvGeom, col: &[F], dx: &mut [F]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: ConvGeom,
}

impl<F: Scalar> Function<F> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>> {
        let geom = &self.geom;
        let (k, p) = (geom.k(), geom.p());
        let in_sz = geom.cin * geom.h * geom.w;
        let out_sz = geom.cout * p;
        let (input, weight) = (x[0].data(), x[1].data());
        let mut dw = needs[1].then(|| vec![F::zero(); geom.cout * k]);
        let mut dx = needs[0].then(|| vec![F::zero(); input.len()]);
        let mut col = if geom.pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
        let mut dcol = if geom.pointwise() || dx.is_none() {
            Vec::new()
        } else {
            vec![F::zero(); k * p]
        };

        for b in 0..geom.batch {
            let gout = &g[b * out_sz..(b + 1) * out_sz];
            let xin = &input[b * in_sz..(b + 1) * in_sz];
            if let Some(dw) = dw.as_mut() {
                let colv: &[F] = if geom.pointwise() {
                    xin
                } else {
                    im2col(geom, xin, &mut col);
                    &col
                };
                // dW[cout×k] += gout[cout×p] · colᵀ
                gemm(geom.cout, p, k, gout, Tr::N, colv, Tr::T, F::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
                if geom.pointwise() {
                    gemm(k, geom.cout, p, weight, Tr::T, gout, Tr::N, F::one(), dxb);
                } else {
                    gemm(k, geom.cout, p, weight, Tr::T, gout, Tr::N, F::zero(), &mut dcol);
                    col2im(geom, &dcol, dxb);
                }
            }
        }
        vec![dx, dw]
    }
}

impl<F: Scalar> Graph<F> {
    /// Cross-correlation `[B,Cin,H,W] ⋆ [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]`
    /// with `Ho = (H + 2·pad - kh)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return shape_err("conv2d", format!("input {sx:?}, weight {sw:?}, stride {stride}"));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{wd}"));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let out = Tensor::new(vec![batch, cout, geom.ho, geom.wo], out)?;
        Ok(self.apply(&[x, w], out, Conv2d { geom }))
    }

    /// Per-token linear map `[M,C,N] -> [M,C',N]` with weight `[C',C]`,
    /// i.e. a 1×1 convolution over flattened tokens.
    pub fn conv1x1_tokens(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[1] {
            return shape_err("conv1x1_tokens", format!("input {sx:?}, weight {sw:?}"));
        }
        let (m, cin, n) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let geom = ConvGeom {
            batch: m,
            cin,
            h: 1,
            w: n,
            cout,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            ho: 1,
            wo: n,
        };
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let out = Tensor::new(vec![m, cout, n], out)?;
        Ok(self.apply(&[x, w], out, Conv2d { geom }))
    }
}

fn conv_forward<F: Scalar>(geom: &ConvGeom, x: &[F], w: &[F]) -> Vec<F> {
    let (k, p) = (geom.k(), geom.p());
    let in_sz = geom.cin * geom.h * geom.w;
    let out_sz = geom.cout * p;
    let mut out = vec![F::zero(); geom.batch * out_sz];
    let mut col = if geom.pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
    for b in 0..geom.batch {
        let xin = &x[b * in_sz..(b + 1) * in_sz];
        let colv: &[F] = if geom.pointwise() {
            xin
        } else {
            im2col(geom, xin, &mut col);
            &col
        };
        gemm(geom.cout, k, p, w, Tr::N, colv, Tr::N, F::zero(), &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops, straight from the definition.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(&[n, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[n, co, oy, ox]);
                        out.data_mut()[off] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        // per-channel identity: w[c, c] = 1
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w));
        let y = g.conv2d(xv, wv, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ones_kernel_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(x, w, 1, 0).is_err());
        let w = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, w, 1, 0).is_err());
        assert!(g.conv2d(x, w, 1, 1).is_ok());
    }

    #[test]
    fn real_valued_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 4, 9, 9]);
        let w = rand_tensor(&mut rng, &[3, 4, 3, 3]);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let expect = naive_conv(&x, &w, 2, 1);
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        gradcheck::check(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1).unwrap(), 1e-5);
        gradcheck::check(&[x.clone(), w], |g, v| g.conv2d(v[0], v[1], 2, 0).unwrap(), 1e-5);
        let w1 = rand_tensor(&mut rng, &[3, 2, 1, 1]);
        gradcheck::check(&[x, w1], |g, v| g.conv2d(v[0], v[1], 1, 0).unwrap(), 1e-5);
    }

    #[test]
    fn tokens_map_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2, 5]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let eye = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv1x1_tokens(xv, eye).unwrap();
        assert_eq!(g.value(y), &x);

        let x1 = g.constant(Tensor::from_f64(&[1, 1, 3], &[1.0, -2.0, 0.5]).unwrap());
        let two = g.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
        let y = g.conv1x1_tokens(x1, two).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -4.0, 1.0]);
        assert!(g.conv1x1_tokens(xv, two).is_err());
    }

    #[test]
    fn tokens_map_equals_per_step_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, cin, cout, n) = (4, 3, 5, 6);
        let x = rand_tensor(&mut rng, &[t, cin, n]);
        let w = rand_tensor(&mut rng, &[cout, cin]);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1x1_tokens(xv, wv).unwrap();
        for step in 0..t {
            let xs = g.index_axis0(xv, step).unwrap();
            let ys = g.matmul(wv, xs).unwrap();
            let got = &g.value(y).data()[step * cout * n..(step + 1) * cout * n];
            for (a, b) in got.iter().zip(g.value(ys).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        gradcheck::check(&[x, w], |g, v| g.conv1x1_tokens(v[0], v[1]).unwrap(), 1e-6);
    }

    proptest! {
        #[test]
        fn integer_conv_matches_naive(
            (b, cin, cout, h, wd) in (1usize..=2, 1usize..=4, 1usize..=4, 3usize..=9, 3usize..=9),
            k in prop::sample::select(vec![1usize, 3]),
            stride in 1usize..=2,
            pad in 0usize..=1,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // integer-valued inputs make every summation order exact
            let x = Tensor::from_fn(&[b, cin, h, wd], |_| rng.random_range(-4..=4) as f64);
            let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-4..=4) as f64);
            let mut g = Graph::<f64>::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            prop_assert_eq!(g.value(y), &naive_conv(&x, &w, stride, pad));
        }
    }
}
