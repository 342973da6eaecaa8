//! Reverse-mode automatic differentiation over dynamic-shape arrays.
//!
//! A [`Tape`] is an eagerly evaluated computation graph: every operation
//! immediately computes its value and records enough context to replay the
//! chain rule backwards. Graphs are rebuilt per training step; parameters
//! enter as leaves and their gradients are read back after [`Tape::backward`].
//!
//! The engine is generic over `f32`/`f64`. Training runs in single
//! precision; gradient checks against central finite differences run the
//! exact same operations in double precision.
//!
//! Scalars (losses) are represented as arrays of shape `[1]`.

mod conv;
mod nn;

pub use conv::conv_out_size;

use ndarray::{ArrayD, IxDyn, NdFloat};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Converts an `f64` constant to the tape's element type.
pub(crate) fn c<T: NdFloat>(x: f64) -> T {
    T::from(x).expect("constant representable in float type")
}

pub(crate) enum Op<T> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    MeanAll(Var),
    ConcatChannels(Vec<Var>),
    /// Broadcast multiply of `x: (N,C,H,W)` by a single-channel `m: (N,1,H,W)`.
    MulBroadcastChannel(Var, Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalised activations, saved for the backward pass.
        xhat: ArrayD<T>,
        /// Per-(sample, channel) inverse standard deviation.
        istd: ndarray::Array2<T>,
    },
    CrossEntropyMean {
        logits: Var,
        labels: Vec<usize>,
        probs: ndarray::Array2<T>,
    },
    TvMean(Var),
    PadReflect(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
}

pub(crate) struct Node<T> {
    pub value: ArrayD<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Eager computation graph with reverse-mode gradients.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: NdFloat> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: NdFloat> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Inserts a non-differentiable constant (data, noise, frozen weights).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, Op::Const)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// First element of a node's value; the conventional scalar readout.
    pub fn scalar(&self, v: Var) -> T {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar readout of empty array")
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        self.push(value, req, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "sub: shape mismatch"
        );
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        self.push(value, req, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "mul: shape mismatch"
        );
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        self.push(value, req, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + s);
        let req = self.requires(a);
        self.push(value, req, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * s);
        let req = self.requires(a);
        self.push(value, req, Op::MulScalar(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * x);
        let req = self.requires(a);
        self.push(value, req, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.abs());
        let req = self.requires(a);
        self.push(value, req, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(T::zero()));
        let req = self.requires(a);
        self.push(value, req, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        let req = self.requires(a);
        self.push(value, req, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.tanh());
        let req = self.requires(a);
        self.push(value, req, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|x| T::one() / (T::one() + (-x).exp()));
        let req = self.requires(a);
        self.push(value, req, Op::Sigmoid(a))
    }

    /// Mean over every element, producing a `[1]`-shaped scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "mean_all: empty array");
        let mut sum = T::zero();
        for &x in self.nodes[a.0].value.iter() {
            sum = sum + x;
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), sum / c::<T>(n as f64));
        let req = self.requires(a);
        self.push(value, req, Op::MeanAll(a))
    }

    /// Weighted sum of `[1]`-shaped scalars: `Σ wᵢ·termᵢ`.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum: no terms");
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let scaled = if w == T::one() {
                v
            } else {
                self.mul_scalar(v, w)
            };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap()
    }

    /// Runs the chain rule from `root` (any shape; seeded with ones).
    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            T::one(),
        ));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.step_backward(id, g, &mut grads);
        }
        self.grads = grads;
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn step_backward(&mut self, id: usize, g: ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        // Leaf gradients stay in `grads`; internal ops fan out below.
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {
                grads[id] = Some(g);
            }
            &Op::Add(a, b) => {
                if self.requires(b) {
                    self.accumulate(grads, b, g.clone());
                }
                self.accumulate(grads, a, g);
            }
            &Op::Sub(a, b) => {
                if self.requires(b) {
                    self.accumulate(grads, b, g.mapv(|x| -x));
                }
                self.accumulate(grads, a, g);
            }
            &Op::Mul(a, b) => {
                if self.requires(b) {
                    let gb = &g * &self.nodes[a.0].value;
                    self.accumulate(grads, b, gb);
                }
                if self.requires(a) {
                    let ga = &g * &self.nodes[b.0].value;
                    self.accumulate(grads, a, ga);
                }
            }
            &Op::AddScalar(a) => self.accumulate(grads, a, g),
            &Op::MulScalar(a, s) => self.accumulate(grads, a, g.mapv(|x| x * s)),
            &Op::Square(a) => {
                let two = c::<T>(2.0);
                let ga = &g * &self.nodes[a.0].value.mapv(|x| x * two);
                self.accumulate(grads, a, ga);
            }
            &Op::Abs(a) => {
                let ga = &g
                    * &self.nodes[a.0].value.mapv(|x| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                self.accumulate(grads, a, ga);
            }
            &Op::Relu(a) => {
                let ga = &g
                    * &self.nodes[a.0]
                        .value
                        .mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                self.accumulate(grads, a, ga);
            }
            &Op::LeakyRelu(a, slope) => {
                let ga = &g
                    * &self.nodes[a.0]
                        .value
                        .mapv(|x| if x > T::zero() { T::one() } else { slope });
                self.accumulate(grads, a, ga);
            }
            &Op::Tanh(a) => {
                let ga = &g * &self.nodes[id].value.mapv(|y| T::one() - y * y);
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = &g * &self.nodes[id].value.mapv(|y| y * (T::one() - y));
                self.accumulate(grads, a, ga);
            }
            &Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                let scale = g[[0]] / c::<T>(n as f64);
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), scale);
                self.accumulate(grads, a, ga);
            }
            Op::ConcatChannels(parts) => {
                let parts = parts.clone();
                self.backward_concat_channels(&parts, &g, grads);
            }
            &Op::MulBroadcastChannel(x, m) => self.backward_mul_broadcast(x, m, &g, grads),
            &Op::GlobalAvgPool(a) => self.backward_global_avg_pool(a, &g, grads),
            &Op::Linear { x, w, b } => self.backward_linear(x, w, b, &g, grads),
            Op::InstanceNorm { .. } => self.backward_instance_norm(id, &g, grads),
            Op::CrossEntropyMean { .. } => self.backward_cross_entropy(id, &g, grads),
            &Op::TvMean(a) => self.backward_tv_mean(a, &g, grads),
            &Op::PadReflect(a, p) => self.backward_pad_reflect(a, p, &g, grads),
            &Op::Conv2d { x, w, b, stride } => self.backward_conv2d(x, w, b, stride, &g, grads),
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backward_conv_transpose2d(x, w, b, stride, pad, &g, grads),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_unary<B, F>(shape: &[usize], mut build: B, mut eval: F)
    where
        B: FnMut(&mut Tape<f64>, Var) -> Var,
        F: FnMut(&ArrayD<f64>) -> f64,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_array(&mut rng, shape);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&mut tape, xv);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let analytic = tape.grad(xv).unwrap().clone();
        let numeric = finite_difference(&x, 1e-6, &mut eval);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mean = |a: &ArrayD<f64>| a.iter().sum::<f64>() / a.len() as f64;
        check_unary(&[3, 4], |t, v| t.tanh(v), |x| mean(&x.mapv(f64::tanh)));
        check_unary(
            &[3, 4],
            |t, v| t.sigmoid(v),
            |x| mean(&x.mapv(|u| 1.0 / (1.0 + (-u).exp()))),
        );
        check_unary(&[2, 5], |t, v| t.square(v), |x| mean(&x.mapv(|u| u * u)));
        check_unary(
            &[2, 5],
            |t, v| t.leaky_relu(v, 0.2),
            |x| mean(&x.mapv(|u| if u > 0.0 { u } else { 0.2 * u })),
        );
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // y = x·x + 3x ⇒ dy/dx = 2x + 3 at every element, scaled by 1/n.
        let mut tape = Tape::<f64>::new();
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.5, -0.5]).unwrap();
        let xv = tape.leaf(x.clone());
        let sq = tape.mul(xv, xv);
        let lin = tape.mul_scalar(xv, 3.0);
        let sum = tape.add(sq, lin);
        let loss = tape.mean_all(sum);
        tape.backward(loss);
        let g = tape.grad(xv).unwrap();
        for (gi, xi) in g.iter().zip(x.iter()) {
            let expect = (2.0 * xi + 3.0) / 2.0;
            assert!((gi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let k = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let prod = tape.mul(a, k);
        let loss = tape.mean_all(prod);
        tape.backward(loss);
        assert!(tape.grad(k).is_none());
        assert!(tape.grad(a).is_some());
    }

    #[test]
    fn weighted_sum_matches_manual_composition() {
        let mut tape = Tape::<f64>::new();
        let terms: Vec<(f64, Var)> = [(1.0, 2.0), (5.0, 0.5), (0.1, 3.0)]
            .iter()
            .map(|&(w, v)| (w, tape.leaf(ArrayD::from_elem(IxDyn(&[1]), v))))
            .collect();
        let total = tape.weighted_sum(&terms);
        assert!((tape.scalar(total) - (2.0 + 2.5 + 0.3)).abs() < 1e-12);
    }
}
