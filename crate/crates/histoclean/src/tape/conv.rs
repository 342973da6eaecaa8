//! Convolution, transposed convolution and reflection padding.
//!
//! Both convolution directions share one pair of patch helpers: `gather`
//! (im2col) walks a position grid and copies receptive-field patches into a
//! matrix, `scatter_add` plays the same indexing backwards. Convolutions are
//! then single matrix products per sample, which keeps the arithmetic inside
//! the BLAS-style kernel of `ndarray`.

use ndarray::{
    Array1, Array2, Array4, ArrayD, ArrayView3, ArrayViewMut3, Axis, Ix1, Ix4, NdFloat,
};

use super::{Op, Tape, Var};

/// Output size of a convolution along one axis.
pub fn conv_out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

fn reflect(t: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if t < 0 {
        -t
    } else if t >= n {
        2 * n - 2 - t
    } else {
        t
    };
    debug_assert!(r >= 0 && r < n, "reflection pad wider than the input");
    r as usize
}

/// Copies `k×k` patches at every grid position into a `(C·k·k, gh·gw)` matrix.
/// Positions map to plane coordinates `py·stride − pad + i`; out-of-bounds
/// reads are zero.
fn gather<T: NdFloat>(
    plane: &ArrayView3<T>,
    k: usize,
    stride: usize,
    pad: isize,
    gh: usize,
    gw: usize,
) -> Array2<T> {
    let (c, ph, pw) = plane.dim();
    let mut cols = Array2::zeros((c * k * k, gh * gw));
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let r = (ci * k + i) * k + j;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("cols row contiguous");
                for py in 0..gh {
                    let sy = (py * stride) as isize - pad + i as isize;
                    if sy < 0 || sy >= ph as isize {
                        continue;
                    }
                    let base = py * gw;
                    for px in 0..gw {
                        let sx = (px * stride) as isize - pad + j as isize;
                        if sx >= 0 && sx < pw as isize {
                            row[base + px] = plane[(ci, sy as usize, sx as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`gather`]: accumulates matrix columns back onto the plane.
fn scatter_add<T: NdFloat>(
    cols: &Array2<T>,
    plane: &mut ArrayViewMut3<T>,
    k: usize,
    stride: usize,
    pad: isize,
    gh: usize,
    gw: usize,
) {
    let (c, ph, pw) = plane.dim();
    for ci in 0..c {
        for i in 0..k {
            for j in 0..k {
                let r = (ci * k + i) * k + j;
                let row = cols.row(r);
                let row = row.as_slice().expect("cols row contiguous");
                for py in 0..gh {
                    let sy = (py * stride) as isize - pad + i as isize;
                    if sy < 0 || sy >= ph as isize {
                        continue;
                    }
                    let base = py * gw;
                    for px in 0..gw {
                        let sx = (px * stride) as isize - pad + j as isize;
                        if sx >= 0 && sx < pw as isize {
                            plane[(ci, sy as usize, sx as usize)] += row[base + px];
                        }
                    }
                }
            }
        }
    }
}

impl<T: NdFloat> Tape<T> {
    /// Reflection padding of `p` pixels on both spatial axes of `(N,C,H,W)`.
    pub fn pad_reflect(&mut self, x: Var, p: usize) -> Var {
        if p == 0 {
            return x;
        }
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("pad_reflect: 4-d input");
        let (n, ch, h, w) = xv.dim();
        assert!(p < h && p < w, "pad_reflect: pad wider than input");
        let mut out = Array4::<T>::zeros((n, ch, h + 2 * p, w + 2 * p));
        for ni in 0..n {
            for ci in 0..ch {
                for oy in 0..h + 2 * p {
                    let sy = reflect(oy as isize - p as isize, h);
                    for ox in 0..w + 2 * p {
                        let sx = reflect(ox as isize - p as isize, w);
                        out[(ni, ci, oy, ox)] = xv[(ni, ci, sy, sx)];
                    }
                }
            }
        }
        let req = self.nodes[x.0].requires_grad;
        self.push(out.into_dyn(), req, Op::PadReflect(x, p))
    }

    pub(super) fn backward_pad_reflect(
        &self,
        x: Var,
        p: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, ch, oh, ow) = gv.dim();
        let (h, w) = (oh - 2 * p, ow - 2 * p);
        let mut dx = Array4::<T>::zeros((n, ch, h, w));
        for ni in 0..n {
            for ci in 0..ch {
                for oy in 0..oh {
                    let sy = reflect(oy as isize - p as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - p as isize, w);
                        dx[(ni, ci, sy, sx)] += gv[(ni, ci, oy, ox)];
                    }
                }
            }
        }
        self.accumulate(grads, x, dx.into_dyn());
    }

    /// Valid 2-d convolution. `x: (N,Cin,H,W)`, `w: (Cout,Cin,k,k)`,
    /// `b: (Cout)`. Padding is applied separately via [`Tape::pad_reflect`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: 4-d input");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: 4-d weight");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv2d: 1-d bias");
        let (nb, cin, h, wd) = xv.dim();
        let (cout, wcin, k, k2) = wv.dim();
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert!(h >= k && wd >= k, "conv2d: input smaller than kernel");
        let (oh, ow) = (
            conv_out_size(h, k, stride, 0),
            conv_out_size(wd, k, stride, 0),
        );
        let r = cin * k * k;
        let w2 = wv.to_shape((cout, r)).expect("weights contiguous");
        let mut out = Array4::<T>::zeros((nb, cout, oh, ow));
        for n in 0..nb {
            let cols = gather(&xv.index_axis(Axis(0), n), k, stride, 0, oh, ow);
            let prod = w2.dot(&cols);
            let mut out_n = out.index_axis_mut(Axis(0), n);
            for co in 0..cout {
                let bias = bv[co];
                let mut plane = out_n.index_axis_mut(Axis(0), co);
                let dst = plane.as_slice_mut().unwrap();
                let src = prod.row(co);
                let src = src.as_slice().unwrap();
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias;
                }
            }
        }
        let req = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(out.into_dyn(), req, Op::Conv2d { x, w, b, stride })
    }

    pub(super) fn backward_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let (nb, cin, _h, _wd) = xv.dim();
        let (cout, _, k, _) = wv.dim();
        let (_, _, oh, ow) = gv.dim();
        let r = cin * k * k;
        let w2 = wv.to_shape((cout, r)).unwrap();
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let mut dx = need_x.then(|| Array4::<T>::zeros(xv.dim()));
        let mut dw2 = need_w.then(|| Array2::<T>::zeros((cout, r)));
        let mut db = need_b.then(|| Array1::<T>::zeros(cout));
        for n in 0..nb {
            let g_n = gv.index_axis(Axis(0), n);
            let g2 = g_n.to_shape((cout, oh * ow)).unwrap();
            if let Some(dw2) = dw2.as_mut() {
                let cols = gather(&xv.index_axis(Axis(0), n), k, stride, 0, oh, ow);
                *dw2 += &g2.dot(&cols.t());
            }
            if let Some(db) = db.as_mut() {
                *db += &g2.sum_axis(Axis(1));
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = w2.t().dot(&g2);
                scatter_add(
                    &dcols,
                    &mut dx.index_axis_mut(Axis(0), n),
                    k,
                    stride,
                    0,
                    oh,
                    ow,
                );
            }
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx.into_dyn());
        }
        if let Some(dw2) = dw2 {
            let dw = dw2.into_shape_with_order((cout, cin, k, k)).unwrap();
            self.accumulate(grads, w, dw.into_dyn());
        }
        if let Some(db) = db {
            self.accumulate(grads, b, db.into_dyn());
        }
    }

    /// Transposed 2-d convolution (fractionally-strided upsampling).
    /// `x: (N,Cin,H,W)`, `w: (Cin,Cout,k,k)`, `b: (Cout)`; output spatial
    /// size is `(H−1)·stride + k − 2·pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2d: 4-d input");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2d: 4-d weight");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv_transpose2d: 1-d bias");
        let (nb, cin, h, wd) = xv.dim();
        let (wcin, cout, k, k2) = wv.dim();
        assert_eq!(k, k2, "conv_transpose2d: square kernels only");
        assert_eq!(cin, wcin, "conv_transpose2d: channel mismatch");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let r = cout * k * k;
        let w2 = wv.to_shape((cin, r)).expect("weights contiguous");
        let mut out = Array4::<T>::zeros((nb, cout, oh, ow));
        for n in 0..nb {
            let x_n = xv.index_axis(Axis(0), n);
            let x2 = x_n.to_shape((cin, h * wd)).unwrap();
            let cols = w2.t().dot(&x2);
            let mut out_n = out.index_axis_mut(Axis(0), n);
            scatter_add(&cols, &mut out_n, k, stride, pad as isize, h, wd);
            for co in 0..cout {
                let bias = bv[co];
                out_n.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + bias);
            }
        }
        let req = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(
            out.into_dyn(),
            req,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    pub(super) fn backward_conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let (nb, cin, h, wd) = xv.dim();
        let (_, cout, k, _) = wv.dim();
        let r = cout * k * k;
        let w2 = wv.to_shape((cin, r)).unwrap();
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let mut dx = need_x.then(|| Array4::<T>::zeros(xv.dim()));
        let mut dw2 = need_w.then(|| Array2::<T>::zeros((cin, r)));
        let mut db = need_b.then(|| Array1::<T>::zeros(cout));
        for n in 0..nb {
            let g_n = gv.index_axis(Axis(0), n);
            let dcols = gather(&g_n, k, stride, pad as isize, h, wd);
            if let Some(dx) = dx.as_mut() {
                let dx2 = w2.dot(&dcols);
                let dx2 = dx2.into_shape_with_order((cin, h, wd)).unwrap();
                dx.index_axis_mut(Axis(0), n).assign(&dx2);
            }
            if let Some(dw2) = dw2.as_mut() {
                let x_n = xv.index_axis(Axis(0), n);
                let x2 = x_n.to_shape((cin, h * wd)).unwrap();
                *dw2 += &x2.dot(&dcols.t());
            }
            if let Some(db) = db.as_mut() {
                for co in 0..cout {
                    let mut sum = T::zero();
                    for &v in g_n.index_axis(Axis(0), co).iter() {
                        sum = sum + v;
                    }
                    db[co] += sum;
                }
            }
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx.into_dyn());
        }
        if let Some(dw2) = dw2 {
            let dw = dw2.into_shape_with_order((cin, cout, k, k)).unwrap();
            self.accumulate(grads, w, dw.into_dyn());
        }
        if let Some(db) = db {
            self.accumulate(grads, b, db.into_dyn());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution by definition; the independent oracle for the
    /// matmul-based implementation.
    fn conv_reference(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
    ) -> ArrayD<f64> {
        let (nb, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h - k) / stride + 1;
        let ow = (wd - k) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[nb, cout, oh, ow]));
        for n in 0..nb {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[[co]];
                        for ci in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    acc += x[[n, ci, oy * stride + i, ox * stride + j]]
                                        * w[[co, ci, i, j]];
                                }
                            }
                        }
                        out[[n, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &stride in &[1usize, 2] {
            let x = random_array(&mut rng, &[2, 3, 7, 7]);
            let w = random_array(&mut rng, &[4, 3, 3, 3]);
            let b = random_array(&mut rng, &[4]);
            let mut tape = Tape::<f64>::new();
            let (xv, wv, bv) = (
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
            );
            let y = tape.conv2d(xv, wv, bv, stride);
            let expect = conv_reference(&x, &w, &b, stride);
            let got = tape.value(y);
            assert_eq!(got.shape(), expect.shape());
            for (a, e) in got.iter().zip(expect.iter()) {
                assert!((a - e).abs() < 1e-10, "stride {stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_array(&mut rng, &[2, 2, 6, 6]);
        let w = random_array(&mut rng, &[3, 2, 3, 3]);
        let b = random_array(&mut rng, &[3]);
        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let mut t = Tape::<f64>::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(xv, wv, bv, 2);
            let l = t.mean_all(y);
            t.scalar(l)
        };
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, bv, 2);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        for (var, arr, name) in [(xv, &x, "x"), (wv, &w, "w"), (bv, &b, "b")] {
            let analytic = tape.grad(var).unwrap().clone();
            let numeric = match name {
                "x" => finite_difference(arr, 1e-6, |p| run(p, &w, &b)),
                "w" => finite_difference(arr, 1e-6, |p| run(&x, p, &b)),
                _ => finite_difference(arr, 1e-6, |p| run(&x, &w, p)),
            };
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-5, "conv2d d{name}: rel err {err}");
        }
    }

    #[test]
    fn conv_transpose2d_doubles_spatial_size_and_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_array(&mut rng, &[1, 2, 4, 4]);
        let w = random_array(&mut rng, &[2, 3, 4, 4]);
        let b = random_array(&mut rng, &[3]);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv_transpose2d(xv, wv, bv, 2, 1);
        assert_eq!(tape.value(y).shape(), &[1, 3, 8, 8]);

        // Scatter definition: every input pixel stamps a weighted kernel.
        let mut expect = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 8, 8]));
        for co in 0..3 {
            for oy in 0..8 {
                for ox in 0..8 {
                    expect[[0, co, oy, ox]] = b[[co]];
                }
            }
        }
        for ci in 0..2 {
            for y0 in 0..4 {
                for x0 in 0..4 {
                    for co in 0..3 {
                        for i in 0..4 {
                            for j in 0..4 {
                                let oy = (y0 * 2 + i) as isize - 1;
                                let ox = (x0 * 2 + j) as isize - 1;
                                if (0..8).contains(&oy) && (0..8).contains(&ox) {
                                    expect[[0, co, oy as usize, ox as usize]] +=
                                        x[[0, ci, y0, x0]] * w[[ci, co, i, j]];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, e) in tape.value(y).iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_transpose2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_array(&mut rng, &[2, 2, 3, 3]);
        let w = random_array(&mut rng, &[2, 2, 4, 4]);
        let b = random_array(&mut rng, &[2]);
        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let mut t = Tape::<f64>::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv_transpose2d(xv, wv, bv, 2, 1);
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv_transpose2d(xv, wv, bv, 2, 1);
        let sq = tape.square(y);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        for (var, name) in [(xv, "x"), (wv, "w"), (bv, "b")] {
            let analytic = tape.grad(var).unwrap().clone();
            let numeric = match name {
                "x" => finite_difference(&x, 1e-6, |p| run(p, &w, &b)),
                "w" => finite_difference(&w, 1e-6, |p| run(&x, p, &b)),
                _ => finite_difference(&b, 1e-6, |p| run(&x, &w, p)),
            };
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-5, "conv_transpose2d d{name}: rel err {err}");
        }
    }

    #[test]
    fn pad_reflect_mirrors_without_repeating_the_edge() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        // Height 1 cannot be padded; widen height first via a 3-row input.
        let x2 = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let xv2 = tape.constant(x2);
        let y = tape.pad_reflect(xv2, 1);
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[1, 1, 5, 5]);
        // Row 0 mirrors row 2 of the source (padded row 1 → source row 1).
        assert_eq!(yv[[0, 0, 0, 1]], 4.0);
        assert_eq!(yv[[0, 0, 1, 0]], 2.0);
        assert_eq!(yv[[0, 0, 4, 4]], 5.0);
        let _ = tape.value(xv);
    }

    #[test]
    fn pad_reflect_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_array(&mut rng, &[1, 2, 4, 4]);
        let run = |x: &ArrayD<f64>| -> f64 {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let y = t.pad_reflect(xv, 2);
            let sq = t.square(y);
            let l = t.mean_all(sq);
            t.scalar(l)
        };
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let y = tape.pad_reflect(xv, 2);
        let sq = tape.square(y);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        let numeric = finite_difference(&x, 1e-6, run);
        let err = max_rel_err(tape.grad(xv).unwrap(), &numeric);
        assert!(err < 1e-6, "pad_reflect: rel err {err}");
    }
}
