//! Network-level tape operations: normalisation, pooling, concatenation,
//! masked products, the classifier head and the mask regularisers.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn, NdFloat};

use super::{c, Op, Tape, Var};

const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<T: NdFloat> Tape<T> {
    /// Channel-wise concatenation of `(N,Cᵢ,H,W)` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                self.nodes[p.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("concat_channels: 4-d inputs")
            })
            .collect();
        let (n, _, h, w) = views[0].dim();
        let total_c: usize = views.iter().map(|v| v.dim().1).sum();
        for v in &views {
            let (vn, _, vh, vw) = v.dim();
            assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: spatial mismatch");
        }
        let mut out = Array4::<T>::zeros((n, total_c, h, w));
        let mut offset = 0;
        for v in &views {
            let ch = v.dim().1;
            out.slice_mut(ndarray::s![.., offset..offset + ch, .., ..])
                .assign(v);
            offset += ch;
        }
        let req = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(out.into_dyn(), req, Op::ConcatChannels(parts.to_vec()))
    }

    pub(super) fn backward_concat_channels(
        &self,
        parts: &[Var],
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut offset = 0;
        for &p in parts {
            let ch = self.nodes[p.0].value.shape()[1];
            if self.nodes[p.0].requires_grad {
                let slice = gv
                    .slice(ndarray::s![.., offset..offset + ch, .., ..])
                    .to_owned();
                self.accumulate(grads, p, slice.into_dyn());
            }
            offset += ch;
        }
    }

    /// `x ⊙ m` with the single-channel mask broadcast over `x`'s channels.
    pub fn mul_broadcast_channel(&mut self, x: Var, m: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("mul_broadcast_channel: 4-d input");
        let mv = self.nodes[m.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("mul_broadcast_channel: 4-d mask");
        let (n, ch, h, w) = xv.dim();
        assert_eq!(mv.dim(), (n, 1, h, w), "mul_broadcast_channel: mask shape");
        let mut out = Array4::<T>::zeros((n, ch, h, w));
        for ni in 0..n {
            let mask = mv.index_axis(Axis(0), ni);
            let mask = mask.index_axis(Axis(0), 0);
            for ci in 0..ch {
                for hi in 0..h {
                    for wi in 0..w {
                        out[(ni, ci, hi, wi)] = xv[(ni, ci, hi, wi)] * mask[(hi, wi)];
                    }
                }
            }
        }
        let req = self.nodes[x.0].requires_grad || self.nodes[m.0].requires_grad;
        self.push(out.into_dyn(), req, Op::MulBroadcastChannel(x, m))
    }

    pub(super) fn backward_mul_broadcast(
        &self,
        x: Var,
        m: Var,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let mv = self.nodes[m.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, ch, h, w) = xv.dim();
        if self.nodes[x.0].requires_grad {
            let mut dx = Array4::<T>::zeros((n, ch, h, w));
            for ni in 0..n {
                for ci in 0..ch {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[(ni, ci, hi, wi)] = gv[(ni, ci, hi, wi)] * mv[(ni, 0, hi, wi)];
                        }
                    }
                }
            }
            self.accumulate(grads, x, dx.into_dyn());
        }
        if self.nodes[m.0].requires_grad {
            let mut dm = Array4::<T>::zeros((n, 1, h, w));
            for ni in 0..n {
                for ci in 0..ch {
                    for hi in 0..h {
                        for wi in 0..w {
                            dm[(ni, 0, hi, wi)] += gv[(ni, ci, hi, wi)] * xv[(ni, ci, hi, wi)];
                        }
                    }
                }
            }
            self.accumulate(grads, m, dm.into_dyn());
        }
    }

    /// Spatial mean per (sample, channel): `(N,C,H,W) → (N,C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("global_avg_pool: 4-d input");
        let (n, ch, h, w) = xv.dim();
        let scale = c::<T>(1.0 / (h * w) as f64);
        let mut out = Array2::<T>::zeros((n, ch));
        for ni in 0..n {
            for ci in 0..ch {
                let mut sum = T::zero();
                for &v in xv.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    sum = sum + v;
                }
                out[(ni, ci)] = sum * scale;
            }
        }
        let req = self.nodes[x.0].requires_grad;
        self.push(out.into_dyn(), req, Op::GlobalAvgPool(x))
    }

    pub(super) fn backward_global_avg_pool(
        &self,
        x: Var,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        let shape = self.nodes[x.0].value.shape();
        let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let scale = c::<T>(1.0 / (h * w) as f64);
        let mut dx = Array4::<T>::zeros((n, ch, h, w));
        for ni in 0..n {
            for ci in 0..ch {
                let v = gv[(ni, ci)] * scale;
                dx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(v);
            }
        }
        self.accumulate(grads, x, dx.into_dyn());
    }

    /// Affine map `x·wᵀ + b` with `x: (N,Cin)`, `w: (K,Cin)`, `b: (K)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear: 2-d input");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear: 2-d weight");
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.dim().1, wv.dim().1, "linear: feature size mismatch");
        let mut out = xv.dot(&wv.t());
        for (mut row, _) in out.outer_iter_mut().zip(0..) {
            for (o, bb) in row.iter_mut().zip(bv.iter()) {
                *o = *o + *bb;
            }
        }
        let req = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push(out.into_dyn(), req, Op::Linear { x, w, b })
    }

    pub(super) fn backward_linear(
        &self,
        x: Var,
        w: Var,
        b: Var,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        if self.nodes[x.0].requires_grad {
            self.accumulate(grads, x, gv.dot(&wv).into_dyn());
        }
        if self.nodes[w.0].requires_grad {
            self.accumulate(grads, w, gv.t().dot(&xv).into_dyn());
        }
        if self.nodes[b.0].requires_grad {
            self.accumulate(grads, b, gv.sum_axis(Axis(0)).into_dyn());
        }
    }

    /// Instance normalisation with learnable per-channel scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("instance_norm: 4-d input");
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let (n, ch, h, w) = xv.dim();
        assert_eq!(gv.len(), ch, "instance_norm: gamma length");
        assert_eq!(bv.len(), ch, "instance_norm: beta length");
        let count = c::<T>((h * w) as f64);
        let eps = c::<T>(INSTANCE_NORM_EPS);
        let mut xhat = Array4::<T>::zeros((n, ch, h, w));
        let mut istd = Array2::<T>::zeros((n, ch));
        let mut out = Array4::<T>::zeros((n, ch, h, w));
        for ni in 0..n {
            for ci in 0..ch {
                let plane = xv.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mut mean = T::zero();
                for &v in plane.iter() {
                    mean = mean + v;
                }
                mean = mean / count;
                let mut var = T::zero();
                for &v in plane.iter() {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / count;
                let inv = T::one() / (var + eps).sqrt();
                istd[(ni, ci)] = inv;
                let gamma_c = gv[ci];
                let beta_c = bv[ci];
                for hi in 0..h {
                    for wi in 0..w {
                        let xh = (plane[(hi, wi)] - mean) * inv;
                        xhat[(ni, ci, hi, wi)] = xh;
                        out[(ni, ci, hi, wi)] = gamma_c * xh + beta_c;
                    }
                }
            }
        }
        let req = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(
            out.into_dyn(),
            req,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat: xhat.into_dyn(),
                istd,
            },
        )
    }

    pub(super) fn backward_instance_norm(
        &self,
        id: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            istd,
        } = &self.nodes[id].op
        else {
            unreachable!()
        };
        let (x, gamma, beta) = (*x, *gamma, *beta);
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
        let (n, ch, h, w) = gv.dim();
        let count = c::<T>((h * w) as f64);
        let gammav = &self.nodes[gamma.0].value;
        if self.nodes[gamma.0].requires_grad {
            let mut dgamma = Array1::<T>::zeros(ch);
            for ni in 0..n {
                for ci in 0..ch {
                    let mut sum = T::zero();
                    for hi in 0..h {
                        for wi in 0..w {
                            sum = sum + gv[(ni, ci, hi, wi)] * xh[(ni, ci, hi, wi)];
                        }
                    }
                    dgamma[ci] += sum;
                }
            }
            self.accumulate(grads, gamma, dgamma.into_dyn());
        }
        if self.nodes[beta.0].requires_grad {
            let mut dbeta = Array1::<T>::zeros(ch);
            for ni in 0..n {
                for ci in 0..ch {
                    let mut sum = T::zero();
                    for hi in 0..h {
                        for wi in 0..w {
                            sum = sum + gv[(ni, ci, hi, wi)];
                        }
                    }
                    dbeta[ci] += sum;
                }
            }
            self.accumulate(grads, beta, dbeta.into_dyn());
        }
        if self.nodes[x.0].requires_grad {
            let mut dx = Array4::<T>::zeros((n, ch, h, w));
            for ni in 0..n {
                for ci in 0..ch {
                    let gamma_c = gammav[ci];
                    let inv = istd[(ni, ci)];
                    // Means of dxhat and dxhat·xhat over the plane.
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for hi in 0..h {
                        for wi in 0..w {
                            let dxh = gv[(ni, ci, hi, wi)] * gamma_c;
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[(ni, ci, hi, wi)];
                        }
                    }
                    m1 = m1 / count;
                    m2 = m2 / count;
                    for hi in 0..h {
                        for wi in 0..w {
                            let dxh = gv[(ni, ci, hi, wi)] * gamma_c;
                            dx[(ni, ci, hi, wi)] =
                                inv * (dxh - m1 - xh[(ni, ci, hi, wi)] * m2);
                        }
                    }
                }
            }
            self.accumulate(grads, x, dx.into_dyn());
        }
    }

    /// Mean softmax cross-entropy over a batch of logits `(N,K)`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.nodes[logits.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("cross_entropy_mean: 2-d logits");
        let (n, k) = lv.dim();
        assert_eq!(labels.len(), n, "cross_entropy_mean: label count");
        assert!(labels.iter().all(|&l| l < k), "cross_entropy_mean: label range");
        let mut probs = Array2::<T>::zeros((n, k));
        let mut total = T::zero();
        for (i, row) in lv.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(row[0], |a, b| a.max(b));
            let mut denom = T::zero();
            for &v in row.iter() {
                denom = denom + (v - max).exp();
            }
            let log_denom = denom.ln() + max;
            for (j, &v) in row.iter().enumerate() {
                probs[(i, j)] = (v - log_denom).exp();
            }
            total = total + (log_denom - row[labels[i]]);
        }
        let mean = total / c::<T>(n as f64);
        let value = ArrayD::from_elem(IxDyn(&[1]), mean);
        let req = self.nodes[logits.0].requires_grad;
        self.push(
            value,
            req,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub(super) fn backward_cross_entropy(
        &self,
        id: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let Op::CrossEntropyMean {
            logits,
            labels,
            probs,
        } = &self.nodes[id].op
        else {
            unreachable!()
        };
        let logits = *logits;
        let (n, _k) = probs.dim();
        let scale = g[[0]] / c::<T>(n as f64);
        let mut dl = probs.clone();
        for (i, &label) in labels.iter().enumerate() {
            dl[(i, label)] = dl[(i, label)] - T::one();
        }
        dl.mapv_inplace(|v| v * scale);
        self.accumulate(grads, logits, dl.into_dyn());
    }

    /// Anisotropic total variation of a single-channel map `(N,1,H,W)`:
    /// per sample, `mean|m[i+1,j]−m[i,j]| + mean|m[i,j+1]−m[i,j]|`,
    /// averaged over the batch.
    pub fn tv_mean(&mut self, m: Var) -> Var {
        let mv = self.nodes[m.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("tv_mean: 4-d mask");
        let (n, ch, h, w) = mv.dim();
        assert_eq!(ch, 1, "tv_mean: single-channel mask");
        assert!(h >= 2 && w >= 2, "tv_mean: mask must be at least 2×2");
        let rows = c::<T>(((h - 1) * w) as f64);
        let cols = c::<T>((h * (w - 1)) as f64);
        let mut total = T::zero();
        for ni in 0..n {
            let plane = mv.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), 0);
            let mut dr = T::zero();
            for hi in 0..h - 1 {
                for wi in 0..w {
                    dr = dr + (plane[(hi + 1, wi)] - plane[(hi, wi)]).abs();
                }
            }
            let mut dc = T::zero();
            for hi in 0..h {
                for wi in 0..w - 1 {
                    dc = dc + (plane[(hi, wi + 1)] - plane[(hi, wi)]).abs();
                }
            }
            total = total + dr / rows + dc / cols;
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), total / c::<T>(n as f64));
        let req = self.nodes[m.0].requires_grad;
        self.push(value, req, Op::TvMean(m))
    }

    pub(super) fn backward_tv_mean(
        &self,
        m: Var,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let mv = self.nodes[m.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, _, h, w) = mv.dim();
        let g0 = g[[0]] / c::<T>(n as f64);
        let row_scale = g0 / c::<T>(((h - 1) * w) as f64);
        let col_scale = g0 / c::<T>((h * (w - 1)) as f64);
        let sign = |d: T| {
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        };
        let mut dm = Array4::<T>::zeros((n, 1, h, w));
        for ni in 0..n {
            for hi in 0..h - 1 {
                for wi in 0..w {
                    let s = sign(mv[(ni, 0, hi + 1, wi)] - mv[(ni, 0, hi, wi)]) * row_scale;
                    dm[(ni, 0, hi + 1, wi)] += s;
                    dm[(ni, 0, hi, wi)] -= s;
                }
            }
            for hi in 0..h {
                for wi in 0..w - 1 {
                    let s = sign(mv[(ni, 0, hi, wi + 1)] - mv[(ni, 0, hi, wi)]) * col_scale;
                    dm[(ni, 0, hi, wi + 1)] += s;
                    dm[(ni, 0, hi, wi)] -= s;
                }
            }
        }
        self.accumulate(grads, m, dm.into_dyn());
    }
}
