//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. `backward` walks the nodes in exact reverse recording order.
//! Intermediate gradients live only for the duration of one `backward` call;
//! leaf gradients accumulate across calls until `zero_grad`.

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeom, Padding};
use crate::numerics::{Shape, Tensor};

/// Gradient cap for `x^p` at `x = 0`, `p < 1`.
pub const DEFAULT_POW_GRAD_CAP: f32 = 1e6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanOver {
    /// Every element, giving a scalar.
    All,
    /// Across the batch axis, giving 1×C×H×W.
    Batch,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Affine(Var, f32),
    Pow {
        x: Var,
        exponent: f32,
        cap: f32,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Box<ConvGeom>,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Log {
        x: Var,
        floor: f32,
    },
    Mean(Var, MeanOver),
    MeanSpatial(Var),
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are kept for it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn item(&self, v: Var) -> Result<f32> {
        self.value(v).item()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Sign pattern of every ReLU and abs input on the tape, one bit per
    /// element. Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut word = 0u64;
        let mut used = 0;
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) | Op::Abs(x) => x,
                _ => continue,
            };
            for &v in self.nodes[x.0].value.data() {
                word = (word << 1) | u64::from(v > 0.0);
                used += 1;
                if used == 64 {
                    bits.push(word);
                    word = 0;
                    used = 0;
                }
            }
        }
        bits.push(word);
        bits.push(used);
        bits
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(src.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb && !sb.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: match kind {
                    Elementwise::Add => "add",
                    Elementwise::Sub => "sub",
                    Elementwise::Mul => "mul",
                },
                left: sa,
                right: sb,
            });
        }
        let f: fn(f32, f32) -> f32 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f32> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let y = bv[0];
            av.iter().map(|&x| f(x, y)).collect()
        };
        let out = Tensor::from_vec(sa, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary(kind, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn pow_scalar(&mut self, x: Var, exponent: f32) -> Result<Var> {
        self.pow_scalar_capped(x, exponent, DEFAULT_POW_GRAD_CAP)
    }

    /// `x^exponent`; the derivative is clamped to `±cap` where it blows up at zero.
    pub fn pow_scalar_capped(&mut self, x: Var, exponent: f32, cap: f32) -> Result<Var> {
        if exponent.fract() != 0.0 {
            if let Some(&bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
                return Err(Error::OutOfRange {
                    op: "pow_scalar (fractional exponent)",
                    value: bad,
                    lo: 0.0,
                    hi: f32::INFINITY,
                });
            }
        }
        Ok(self.unary(x, Op::Pow { x, exponent, cap }, |v| v.powf(exponent)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f32) -> Var {
        self.unary(x, Op::Log { x, floor }, |v| v.max(floor).ln())
    }

    pub fn reduce_mean(&mut self, x: Var, over: MeanOver) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.numel() == 0 {
            return Err(Error::invalid("reduce_mean", "empty tensor"));
        }
        let out = match over {
            MeanOver::All => {
                let sum: f64 = t.data().iter().map(|&v| v as f64).sum();
                Tensor::scalar((sum / s.numel() as f64) as f32)
            }
            MeanOver::Batch => {
                let len = s.item_len();
                let mut acc = vec![0.0f32; len];
                for item in t.data().chunks_exact(len) {
                    acc.iter_mut().zip(item).for_each(|(a, &v)| *a += v);
                }
                let inv = 1.0 / s.n as f32;
                acc.iter_mut().for_each(|a| *a *= inv);
                Tensor::from_vec(Shape::new(1, s.c, s.h, s.w), acc)?
            }
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Mean(x, over), needs))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce_mean(x, MeanOver::All)
    }

    /// Global average over H×W, giving N×C×1×1.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.plane() == 0 {
            return Err(Error::invalid("mean_spatial", "empty plane"));
        }
        let data = t
            .data()
            .chunks_exact(s.plane())
            .map(|p| p.iter().sum::<f32>() / s.plane() as f32)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanSpatial(x), needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: sa,
                right: sb,
            });
        }
        let (la, lb) = (sa.item_len(), sb.item_len());
        let mut data = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&self.value(a).data()[n * la..(n + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[n * lb..(n + 1) * lb]);
        }
        let out = Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    /// Same-padded 2-D convolution. `weight` is Cout×Cin×k×k, `bias` has Cout values.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        conv::check_conv_shapes(sx, sw, b.map(|b| self.shape(b)))?;
        let geom = ConvGeom::new(sx.h, sx.w, sw.h, stride, padding)?;
        let out = conv::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                geom: Box::new(geom),
            },
            needs,
        ))
    }

    /// Populates `dLoss/dLeaf` on every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got {ls}"),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (target, contribution) in self.node_backward(i, &g) {
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut res = Vec::with_capacity(3);
        let mut emit = |v: Var, grad: Vec<f32>| {
            if self.needs(v) {
                res.push((v, grad));
            }
        };
        let map1 = |x: Var, f: &dyn Fn(usize) -> f32| -> Vec<f32> {
            (0..self.nodes[x.0].value.numel()).map(f).collect()
        };

        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let broadcast = self.shape(a) != self.shape(b);
                let (av, bv) = (val(a), val(b));
                let bx = |k: usize| if broadcast { bv[0] } else { bv[k] };
                let (ga, gb): (Vec<f32>, Vec<f32>) = match kind {
                    Elementwise::Add => (g.to_vec(), g.to_vec()),
                    Elementwise::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Elementwise::Mul => (
                        g.iter().enumerate().map(|(k, gk)| gk * bx(k)).collect(),
                        g.iter().zip(av).map(|(gk, ak)| gk * ak).collect(),
                    ),
                };
                let gb = if broadcast {
                    vec![gb.iter().sum::<f32>()]
                } else {
                    gb
                };
                emit(a, ga);
                emit(b, gb);
            }
            &Op::Affine(x, s) => emit(x, g.iter().map(|v| v * s).collect()),
            &Op::Pow { x, exponent, cap } => {
                let xv = val(x);
                emit(
                    x,
                    map1(x, &|k| {
                        let d = exponent * xv[k].powf(exponent - 1.0);
                        let d = if d.is_nan() { cap } else { d.clamp(-cap, cap) };
                        g[k] * d
                    }),
                );
            }
            &Op::Relu(x) => {
                let xv = val(x);
                emit(x, map1(x, &|k| if xv[k] > 0.0 { g[k] } else { 0.0 }));
            }
            &Op::Sigmoid(x) => emit(x, map1(x, &|k| g[k] * out[k] * (1.0 - out[k]))),
            &Op::Abs(x) => {
                let xv = val(x);
                emit(x, map1(x, &|k| g[k] * sign(xv[k])));
            }
            &Op::Log { x, floor } => {
                let xv = val(x);
                emit(
                    x,
                    map1(x, &|k| if xv[k] > floor { g[k] / xv[k] } else { 0.0 }),
                );
            }
            &Op::Mean(x, over) => {
                let s = self.shape(x);
                match over {
                    MeanOver::All => {
                        let d = g[0] / s.numel() as f32;
                        emit(x, vec![d; s.numel()]);
                    }
                    MeanOver::Batch => {
                        let inv = 1.0 / s.n as f32;
                        let len = s.item_len();
                        emit(x, map1(x, &|k| g[k % len] * inv));
                    }
                }
            }
            &Op::MeanSpatial(x) => {
                let plane = self.shape(x).plane();
                let inv = 1.0 / plane as f32;
                emit(x, map1(x, &|k| g[k / plane] * inv));
            }
            &Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (la, lb) = (sa.item_len(), sb.item_len());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for item in g.chunks_exact(la + lb) {
                    ga.extend_from_slice(&item[..la]);
                    gb.extend_from_slice(&item[la..]);
                }
                emit(a, ga);
                emit(b, gb);
            }
            Op::Conv { x, w, b, geom } => {
                let want = (
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                let grads = conv::conv_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    geom,
                    g,
                    want,
                );
                if let Some(gx) = grads.input {
                    emit(*x, gx);
                }
                if let Some(gw) = grads.weight {
                    emit(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    emit(*b, gb);
                }
            }
        }
        res
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(tape: &mut Tape, v: &[f32], grad: bool) -> Var {
        let t = Tensor::from_column(v);
        tape.leaf(if grad { t.with_grad() } else { t })
    }

    #[test]
    fn add_componentwise() {
        let mut t = Tape::new();
        let a = col(&mut t, &[1.0, 2.0], false);
        let b = col(&mut t, &[3.0, 4.0], false);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_scalar_annihilates_value_and_grad() {
        let mut t = Tape::new();
        let x = col(&mut t, &[1.5, -2.0, 3.0], true);
        let z = t.constant(Tensor::scalar(0.0));
        let y = t.mul(x, z).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let m = t.mean_all(y).unwrap();
        t.backward(m).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = col(&mut t, &[1.0, 2.0], false);
        let b = col(&mut t, &[1.0, 2.0, 3.0], false);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("[2x1x1x1]") && err.contains("[3x1x1x1]"),
            "{err}"
        );
    }

    #[test]
    fn pow_examples() {
        let mut t = Tape::new();
        let x = col(&mut t, &[0.25], true);
        let y = t.pow_scalar(x, 0.5).unwrap();
        assert_eq!(t.item(y).unwrap(), 0.5);

        let x1 = col(&mut t, &[0.7, 0.3], true);
        let y1 = t.pow_scalar(x1, 1.0).unwrap();
        assert_eq!(t.value(y1).data(), &[0.7, 0.3]);
        let s = t.mean_all(y1).unwrap();
        let s = t.scale(s, 2.0);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x1).unwrap(), &[1.0, 1.0]);

        let z = col(&mut t, &[0.8], false);
        let p = t.pow_scalar(z, 2.2).unwrap();
        let oracle = (2.2f64 * 0.8f64.ln()).exp() as f32;
        assert!((t.item(p).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn pow_rejects_negative_base_with_fractional_exponent() {
        let mut t = Tape::new();
        let x = col(&mut t, &[-0.5], false);
        assert!(t.pow_scalar(x, 0.5).is_err());
        assert!(t.pow_scalar(x, 2.0).is_ok());
    }

    #[test]
    fn pow_grad_at_zero_is_capped() {
        let mut t = Tape::new();
        let x = col(&mut t, &[0.0, 0.5], true);
        let y = t.pow_scalar_capped(x, 1.0 / 2.2, 1e3).unwrap();
        let m = t.mean_all(y).unwrap();
        t.backward(m).unwrap();
        let g = t.grad(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert_eq!(g[0], 1e3 / 2.0);
    }

    #[test]
    fn relu_and_sigmoid_points() {
        let mut t = Tape::new();
        let x = col(&mut t, &[-1.0, 0.0, 2.0], true);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let m = t.mean_all(r).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap()[1], 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-100.0).is_finite() && sigmoid(100.0) == 1.0);
    }

    #[test]
    fn mean_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(Shape::new(2, 3, 4, 5), 5.0).with_grad());
        let m = t.mean_all(x).unwrap();
        assert_eq!(t.item(m).unwrap(), 5.0);
        t.backward(m).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0 / 120.0));

        let single = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.constant(single.clone());
        let mb = t.reduce_mean(y, MeanOver::Batch).unwrap();
        assert_eq!(t.value(mb).data(), single.data());

        let logits = [0.3f32, -1.2, 2.5, 0.7];
        let l = col(&mut t, &logits, false);
        let lm = t.reduce_mean(l, MeanOver::Batch).unwrap();
        let hand = (0.3f32 + -1.2 + 2.5 + 0.7) / 4.0;
        assert!((t.item(lm).unwrap() - hand).abs() < 1e-7);
    }

    #[test]
    fn concat_with_empty_channel_tensor_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(Shape::new(2, 3, 2, 2), 0.25));
        let e = t.constant(Tensor::zeros(Shape::new(2, 0, 2, 2)));
        let y = t.concat_channels(x, e).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let noise = t.constant(Tensor::zeros(Shape::new(2, 4, 2, 2)));
        let z = t.concat_channels(x, noise).unwrap();
        assert_eq!(t.shape(z).c, 7);
        let bad = t.constant(Tensor::zeros(Shape::new(2, 4, 3, 2)));
        assert!(t.concat_channels(x, bad).is_err());
    }

    #[test]
    fn backward_needs_scalar_and_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0).with_grad());
        assert!(t.backward(x).is_err());
        let m = t.mean_all(x).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.5; 4]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
        assert!(Tape::new().backward(Var(0)).is_err());
    }
}
