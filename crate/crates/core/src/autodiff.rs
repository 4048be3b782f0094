//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every primitive in execution order together with its
//! output value; [`Tape::backward`] replays the record in reverse. Training runs
//! on `Tape<f32>`; gradient checking uses `Tape<f64>`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    self, concat_channels, conv3d_backward, conv3d_raw, maxpool3d_backward, maxpool3d_with_argmax,
    split_channels, transpose_conv3d_backward, transpose_conv3d_raw, ConvGeometry, Element, Tensor,
};
use crate::training::loss::{self, LossKind};

/// Caller-chosen identifier of a parameter leaf.
pub type ParamId = usize;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { id: ParamId, trainable: bool },
    Conv3d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    TransposeConv3d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { a: Var, b: Var },
    Sum(Var),
    Loss { pred: Var, target: Var, kind: LossKind },
    /// Recorded without a backward rule; differentiating through it fails.
    Opaque { name: &'static str },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by parameter id. Frozen parameters have no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet<T = f32> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Element> GradientSet<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
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

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a parameter leaf. Frozen (`trainable == false`) leaves receive no gradient.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Param { id, trainable }, trainable)
    }

    fn bias_slice(&self, bias: Var) -> &[T] {
        self.nodes[bias.0].value.data()
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let y = conv3d_raw(self.value(input), self.value(kernel), self.bias_slice(bias), &geom)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(y, Op::Conv3d { input, kernel, bias, geom }, needs))
    }

    /// Transposed convolution; `geom.stride` is the upsampling factor.
    pub fn transpose_conv3d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let y = transpose_conv3d_raw(self.value(input), self.value(kernel), self.bias_slice(bias), &geom)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(y, Op::TransposeConv3d { input, kernel, bias, geom }, needs))
    }

    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let (y, argmax) = maxpool3d_with_argmax(self.value(input), window, stride)?;
        let needs = self.needs(input);
        Ok(self.push(y, Op::MaxPool { input, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::activation(self.value(x), tensor::Activation::Relu);
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::activation(self.value(x), tensor::Activation::Sigmoid);
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let y = self.value(x).map(|v| v * f);
        let needs = self.needs(x);
        self.push(y, Op::Scale(x, factor), needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Concat { a, b }, needs))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(T::from_f64(self.value(x).sum()));
        let needs = self.needs(x);
        self.push(y, Op::Sum(x), needs)
    }

    /// Segmentation loss of probabilities `pred` against a constant `target`.
    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        if self.needs(target) {
            return Err(Error::Contract("loss target must not require gradients".into()));
        }
        let value = loss::loss_value(self.value(pred), self.value(target), kind)?;
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(T::from_f64(value)), Op::Loss { pred, target, kind }, needs))
    }

    /// Hard threshold `x >= level`. Has no backward rule.
    pub fn threshold(&mut self, x: Var, level: f64) -> Var {
        let level = T::from_f64(level);
        let y = self
            .value(x)
            .map(|v| if v >= level { T::one() } else { T::zero() });
        let needs = self.needs(x);
        self.push(y, Op::Opaque { name: "threshold" }, needs)
    }

    /// Back-propagates `seed` from the last recorded value.
    pub fn backward(&self, seed: Tensor<T>) -> Result<GradientSet<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        self.backward_from(Var(self.nodes.len() - 1), seed)
    }

    /// Back-propagates `seed` from `output`, visiting operations in exact reverse order.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<GradientSet<T>> {
        self.value(output).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        let mut result = BTreeMap::new();
        for node in &self.nodes[..=output.0] {
            if let Op::Param { id, trainable: true } = node.op {
                result.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param { id, trainable } => {
                    if *trainable {
                        result.insert(*id, g);
                    }
                }
                Op::Conv3d { input, kernel, bias, geom } | Op::TransposeConv3d { input, kernel, bias, geom } => {
                    let wants = [self.needs(*input), self.needs(*kernel), self.needs(*bias)];
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let cg = if matches!(node.op, Op::Conv3d { .. }) {
                        conv3d_backward(x, k, geom, &g, wants)?
                    } else {
                        transpose_conv3d_backward(x, k, geom, &g, wants)?
                    };
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads[input.0], gi);
                    }
                    if let Some(gk) = cg.kernel {
                        accumulate(&mut grads[kernel.0], gk);
                    }
                    if let Some(gb) = cg.bias {
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads[bias.0], gb.reshape(&shape)?);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let gi = maxpool3d_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Relu(x) => {
                    let gi = self.value(*x).zip_map(&g, |v, d| if v > T::zero() { d } else { T::zero() })?;
                    accumulate(&mut grads[x.0], gi);
                }
                Op::Sigmoid(x) => {
                    let gi = node.value.zip_map(&g, |s, d| d * s * (T::one() - s))?;
                    accumulate(&mut grads[x.0], gi);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.zip_map(self.value(*b), |d, v| d * v)?);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.zip_map(self.value(*a), |d, v| d * v)?);
                    }
                }
                Op::Scale(x, factor) => {
                    let f = T::from_f64(*factor);
                    accumulate(&mut grads[x.0], g.map(|d| d * f));
                }
                Op::Concat { a, b } => {
                    let at = self.value(*a).shape()[1];
                    let (ga, gb) = split_channels(&g, at)?;
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), d));
                }
                Op::Loss { pred, target, kind } => {
                    let d = g.data()[0];
                    let (p, t) = (self.value(*pred), self.value(*target));
                    // On a sigmoid output, differentiate the composition with respect to the
                    // logits directly: saturated probabilities keep a usable gradient.
                    if let Op::Sigmoid(logits) = self.nodes[pred.0].op {
                        let gz = loss::loss_grad_logits(p, t, *kind)?;
                        accumulate(&mut grads[logits.0], gz.map(|v| v * d));
                    } else {
                        let gp = loss::loss_grad(p, t, *kind)?;
                        accumulate(&mut grads[pred.0], gp.map(|v| v * d));
                    }
                }
                Op::Opaque { name, .. } => return Err(Error::Unsupported((*name).to_string())),
            }
        }
        Ok(GradientSet { grads: result })
    }
}

/// Compares reverse-mode gradients of a scalar graph against central differences.
///
/// `build` records the graph on a fresh `f64` tape from parameter leaves holding
/// `point`. Returns the largest elementwise relative error
/// `|a - b| / max(|a|, |b|, 1e-8)` over all parameter elements.
pub fn grad_check<F>(build: F, point: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone(), true))
            .collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar output, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok((tape, out))
    };

    let (tape, out) = eval(point)?;
    let seed = Tensor::full(tape.value(out).shape(), 1.0);
    let analytic = tape.backward_from(out, seed)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (p, param) in point.iter().enumerate() {
        let grad = analytic
            .get(p)
            .ok_or_else(|| Error::Contract(format!("parameter {p} received no gradient")))?;
        for e in 0..param.numel() {
            let base = param.data()[e];
            probe[p].data_mut()[e] = base + eps;
            let (t_plus, o_plus) = eval(&probe)?;
            probe[p].data_mut()[e] = base - eps;
            let (t_minus, o_minus) = eval(&probe)?;
            probe[p].data_mut()[e] = base;
            let numeric = (t_plus.value(o_plus).data()[0] - t_minus.value(o_minus).data()[0]) / (2.0 * eps);
            let a = grad.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, Tensor::scalar(0.0), true);
        tape.sigmoid(x);
        let g = tape.backward(Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[0.25]);
    }

    #[test]
    fn conv_sum_input_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(0, Tensor::from_fn(&[1, 1, 2, 3, 3], |i| i as f32), true);
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, k, b, ConvGeometry::default()).unwrap();
        tape.sum(y);
        let g = tape.backward(Tensor::scalar(1.0)).unwrap();
        assert!(g.get(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_parameter_absent() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(7, Tensor::full(&[3], 2.0), false);
        let x = tape.param(1, Tensor::full(&[3], 1.0), true);
        let y = tape.mul(w, x).unwrap();
        tape.sum(y);
        let g = tape.backward(Tensor::scalar(1.0)).unwrap();
        assert!(!g.contains(7));
        assert_eq!(g.get(1).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut tape = Tape::<f32>::new();
        let _unused = tape.param(3, Tensor::full(&[2], 5.0), true);
        let x = tape.param(1, Tensor::full(&[2], 1.0), true);
        tape.sum(x);
        let g = tape.backward(Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(3).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn threshold_has_no_backward_rule() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(0, Tensor::full(&[2], 0.7), true);
        let t = tape.threshold(x, 0.5);
        tape.sum(t);
        assert!(matches!(tape.backward(Tensor::scalar(1.0)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(0, Tensor::full(&[2], 0.7), true);
        tape.relu(x);
        assert!(tape.backward(Tensor::scalar(1.0)).is_err());
        assert!(Tape::<f32>::new().backward(Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn loss_through_sigmoid_matches_differences() {
        let logits = Tensor::<f64>::from_fn(&[1, 1, 1, 3, 4], |i| (i as f64 * 0.7).sin() * 2.0);
        let target = Tensor::from_fn(&[1, 1, 1, 3, 4], |i| ((i % 3) == 0) as u8 as f64);
        for kind in [LossKind::BceDice, LossKind::Bce, LossKind::Dice, LossKind::Focal] {
            let err = grad_check(
                |tape, v| {
                    let p = tape.sigmoid(v[0]);
                    let t = tape.constant(target.clone());
                    tape.loss(p, t, kind)
                },
                std::slice::from_ref(&logits),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn quadratic_grad_check() {
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_vector_output_and_bad_eps() {
        let f = |tape: &mut Tape<f64>, v: &[Var]| Ok(tape.relu(v[0]));
        let p = [Tensor::full(&[2], 1.0)];
        assert!(matches!(grad_check(f, &p, 1e-4), Err(Error::Contract(_))));
        assert!(matches!(grad_check(f, &p, 1e-1), Err(Error::Contract(_))));
    }
}
