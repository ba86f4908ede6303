//! Tape-based reverse-mode differentiation over the op set in [`crate::ops`].

use crate::exec::ExecMode;
use crate::ops;
use crate::tensor::{ConvParams, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Tanh(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Mse {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    mode: ExecMode,
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new(mode: ExecMode) -> Self {
        Self {
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// Add an input or parameter. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn params(&self, kernel: Var, bias: Var, stride: usize, pad: usize) -> ConvParams {
        ConvParams::new(
            self.value(kernel).clone(),
            self.value(bias).clone(),
            stride,
            pad,
        )
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let p = self.params(kernel, bias, stride, pad);
        let out = ops::conv2d(self.mode, self.value(x), &p)?;
        let ng = self.needs(&[x, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn deconv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let p = self.params(kernel, bias, stride, pad);
        let out = ops::deconv2d(self.mode, self.value(x), &p)?;
        let ng = self.needs(&[x, kernel, bias]);
        Ok(self.push(
            out,
            Op::Deconv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = ops::tanh_act(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        let out = ops::channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        let ng = self.needs(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let l = ops::mse(self.value(pred), self.value(target))?;
        let ng = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(l), Op::Mse { pred, target }, ng))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                expected: vec![1],
                got: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let send = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            };
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let p = self.params(kernel, bias, stride, pad);
                    let dout = Tensor::new(node.value.shape().to_vec(), g)?;
                    let cg = ops::conv2d_backward(self.mode, self.value(x), &p, &dout)?;
                    send(x, cg.input.into_data(), &mut grads);
                    send(kernel, cg.kernel.into_data(), &mut grads);
                    send(bias, cg.bias.into_data(), &mut grads);
                }
                Op::Deconv2d {
                    x,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let p = self.params(kernel, bias, stride, pad);
                    let dout = Tensor::new(node.value.shape().to_vec(), g)?;
                    let cg = ops::deconv2d_backward(self.mode, self.value(x), &p, &dout)?;
                    send(x, cg.input.into_data(), &mut grads);
                    send(kernel, cg.kernel.into_data(), &mut grads);
                    send(bias, cg.bias.into_data(), &mut grads);
                }
                Op::Relu(x) => {
                    let d = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(x, d, &mut grads);
                }
                Op::Tanh(x) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * (1.0 - y * y))
                        .collect();
                    send(x, d, &mut grads);
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xt = self.value(x);
                    let [_, c, h, w] = xt.dims4("channel_affine")?;
                    let plane = h * w;
                    let sc = self.value(scale).data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    for (i, (gp, xp)) in g.chunks(plane).zip(xt.data().chunks(plane)).enumerate() {
                        let ch = i % c;
                        let dst = &mut dx[i * plane..(i + 1) * plane];
                        for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                            *d = gv * sc[ch];
                            dscale[ch] += gv * xv;
                            dshift[ch] += gv;
                        }
                    }
                    send(x, dx, &mut grads);
                    send(scale, dscale, &mut grads);
                    send(shift, dshift, &mut grads);
                }
                Op::Add(a, b) => {
                    send(a, g.clone(), &mut grads);
                    send(b, g, &mut grads);
                }
                Op::Scale(x, f) => {
                    send(x, g.iter().map(|v| v * f).collect(), &mut grads);
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(pred), self.value(target));
                    let k = 2.0 * g[0] / p.len() as f64;
                    let d: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| k * (a - b))
                        .collect();
                    if self.nodes[target.0].needs_grad {
                        send(target, d.iter().map(|v| -v).collect(), &mut grads);
                    }
                    send(pred, d, &mut grads);
                }
            }
        }
        Ok(Gradients(grads))
    }
}
