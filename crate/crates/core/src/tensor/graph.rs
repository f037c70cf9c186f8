use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{IdrError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<T>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    Dot {
        input: Var,
        coeffs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations supporting one reverse sweep.
///
/// Nodes are evaluated eagerly as they are recorded, so `value` is available
/// immediately. `backward` fills gradients for every node that depends on a
/// parameter.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    kernel_grad_fault: Option<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            kernel_grad_fault: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Param, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (out, cols) = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
        )?;
        let rg = self.needs(&[input, kernel, bias]);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(IdrError::param(format!(
                "leaky relu slope must lie in [0, 1), got {slope}"
            )));
        }
        let out = kernels::leaky_relu_forward(self.value(input), slope);
        let rg = self.needs(&[input]);
        self.push(out, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.needs(&[input]);
        self.push(out, Op::MaxPool2 { input, argmax }, rg)
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2_forward(self.value(input))?;
        let rg = self.needs(&[input]);
        self.push(out, Op::Upsample2 { input }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Concat { a, b }, rg)
    }

    /// Mean absolute error; a scalar node.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = kernels::l1_loss(self.value(pred), self.value(target))?;
        let rg = self.needs(&[pred, target]);
        self.push(Tensor::scalar(loss), Op::L1 { pred, target }, rg)
    }

    /// `Σ coeffs ⊙ input` as a scalar node. Projects a tensor-valued output
    /// to a scalar for gradient checks.
    pub fn dot_const(&mut self, input: Var, coeffs: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.len() != coeffs.len() {
            return Err(IdrError::shape(format!(
                "dot_const: tensor {:?} vs coefficients {:?}",
                x.shape(),
                coeffs.shape()
            )));
        }
        let s: T = x.data().iter().zip(coeffs.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.needs(&[input]);
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                coeffs: coeffs.data().to_vec(),
            },
            rg,
        )
    }

    /// Scales every conv kernel gradient by `factor`. Exists to verify that
    /// the gradient checker detects a broken backward pass.
    #[doc(hidden)]
    pub fn inject_kernel_grad_fault(&mut self, factor: T) {
        self.kernel_grad_fault = Some(factor);
    }

    /// Piecewise-linear regime of the recorded graph: the sign pattern of
    /// every leaky-relu input and L1 residual plus every pooling argmax.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => pattern.extend(
                    self.value(*input)
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > T::zero())),
                ),
                Op::MaxPool2 { argmax, .. } => pattern.extend_from_slice(argmax),
                Op::L1 { pred, target } => pattern.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&p, &t)| if p > t { 2 } else if p < t { 0 } else { 1 }),
                ),
                _ => {}
            }
        }
        pattern
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(IdrError::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let updates: Vec<(Var, Vec<T>)> = {
                let node = &self.nodes[i];
                match &node.op {
                    Op::Input | Op::Param => Vec::new(),
                    Op::Conv2d {
                        input,
                        kernel,
                        bias,
                        cols,
                    } => {
                        let (gx, mut gw, gb) = kernels::conv2d_backward(
                            &g,
                            self.value(*input),
                            self.value(*kernel),
                            cols,
                        );
                        if let Some(f) = self.kernel_grad_fault {
                            gw.iter_mut().for_each(|v| *v *= f);
                        }
                        vec![(*input, gx), (*kernel, gw), (*bias, gb)]
                    }
                    Op::LeakyRelu { input, slope } => vec![(
                        *input,
                        kernels::leaky_relu_backward(&g, self.value(*input), *slope),
                    )],
                    Op::MaxPool2 { input, argmax } => vec![(
                        *input,
                        kernels::maxpool2_backward(&g, argmax, self.value(*input).len()),
                    )],
                    Op::Upsample2 { input } => vec![(
                        *input,
                        kernels::upsample2_backward(&g, self.value(*input).shape()),
                    )],
                    Op::Concat { a, b } => {
                        let (ga, gb) = kernels::concat_channels_backward(
                            &g,
                            self.value(*a).shape(),
                            self.value(*b).shape(),
                        );
                        vec![(*a, ga), (*b, gb)]
                    }
                    Op::L1 { pred, target } => {
                        let up = g[0];
                        let gp: Vec<T> =
                            kernels::l1_loss_grad(self.value(*pred), self.value(*target))
                                .into_iter()
                                .map(|v| v * up)
                                .collect();
                        let gt = gp.iter().map(|&v| -v).collect();
                        vec![(*pred, gp), (*target, gt)]
                    }
                    Op::Dot { input, coeffs } => {
                        let up = g[0];
                        vec![(*input, coeffs.iter().map(|&c| c * up).collect())]
                    }
                }
            };
            for (v, gv) in updates {
                self.accumulate(v, gv);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::MaxPool2 { .. } => "maxpool2",
        Op::Upsample2 { .. } => "upsample2",
        Op::Concat { .. } => "concat_channels",
        Op::L1 { .. } => "l1_loss",
        Op::Dot { .. } => "dot_const",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_input_is_numeric_error() {
        let mut g = Graph::<f32>::new();
        let err = g.input(Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap());
        assert!(matches!(err, Err(IdrError::Numeric(_))));
    }

    #[test]
    fn gradient_flows_only_to_params() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::filled(&[1, 1, 2, 2], 1.0)).unwrap();
        let k = g.param(Tensor::filled(&[1, 1, 1, 1], 2.0)).unwrap();
        let b = g.param(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, k, b).unwrap();
        let t = g.input(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let loss = g.l1_loss(y, t).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(k).unwrap(), &[1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::filled(&[1, 1, 2, 2], 1.0)).unwrap();
        let c = g.concat_channels(a, a).unwrap();
        let coeffs = Tensor::from_vec(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let s = g.dot_const(c, &coeffs).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn slope_out_of_range_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1])).unwrap();
        assert!(g.leaky_relu(x, 1.0).is_err());
        assert!(g.leaky_relu(x, -0.1).is_err());
    }
}
