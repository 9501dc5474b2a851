//! Minimal reverse-mode differentiation for the small convolutional score
//! network.
//!
//! The tape records every intermediate `Tensor` and the op that produced it.
//! `backward` walks the tape in reverse, producing the cotangent of every
//! node and, optionally, accumulating parameter gradients into a flat buffer
//! laid out like the parameter vector.

/// A `channels x rows x cols` activation, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    fn same_dims(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols
    }
}

/// Location of one convolution's weights and bias inside the flat
/// parameter vector. Weights are `[cout][cin][k][k]`, then `[cout]` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayout {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayout {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: NodeId,
        layer: ConvLayout,
        /// im2col matrix, kept only when parameter gradients are wanted.
        cols: Option<Vec<f64>>,
    },
    Silu {
        input: NodeId,
    },
    AppendConst {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        a: NodeId,
        ca: f64,
        b: NodeId,
        cb: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    keep_cols: bool,
}

/// `cols[(ci*k*k + ky*k + kx), (r*w + c)] = x[ci, r+ky-p, c+kx-p]`, zero outside.
fn im2col(x: &Tensor, k: usize, out: &mut [f64]) {
    let (h, w) = (x.rows, x.cols);
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..x.channels {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * hw..(row + 1) * hw];
                for r in 0..h {
                    let sr = r as isize + ky as isize - pad as isize;
                    let drow = &mut dst[r * w..(r + 1) * w];
                    if sr < 0 || sr >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[sr as usize * w..(sr as usize + 1) * w];
                    for (c, d) in drow.iter_mut().enumerate() {
                        let sc = c as isize + kx as isize - pad as isize;
                        *d = if sc < 0 || sc >= w as isize {
                            0.0
                        } else {
                            srow[sc as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = k / 2;
    let hw = h * w;
    let mut out = Tensor::zeros(channels, h, w);
    for ci in 0..channels {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for r in 0..h {
                    let sr = r as isize + ky as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sr as usize * w..(sr as usize + 1) * w];
                    let srow = &src[r * w..(r + 1) * w];
                    for (c, &g) in srow.iter().enumerate() {
                        let sc = c as isize + kx as isize - pad as isize;
                        if sc >= 0 && sc < w as isize {
                            drow[sc as usize] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where the
/// transposes are expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    // a is m x k (or k x m when transposed), b is k x n (or n x k)
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64], keep_cols: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            keep_cols,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, input: NodeId, layer: ConvLayout) -> NodeId {
        let x = &self.nodes[input].value;
        assert_eq!(x.channels, layer.cin, "conv input channel mismatch");
        let (h, w) = (x.rows, x.cols);
        let hw = h * w;
        let kk = layer.cin * layer.kernel * layer.kernel;
        let mut cols = vec![0.0; kk * hw];
        im2col(x, layer.kernel, &mut cols);
        let mut out = Tensor::zeros(layer.cout, h, w);
        let bias = &self.params[layer.bias_offset..layer.bias_offset + layer.cout];
        for (co, b) in bias.iter().enumerate() {
            out.data[co * hw..(co + 1) * hw].fill(*b);
        }
        let weights = &self.params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
        gemm(
            layer.cout,
            kk,
            hw,
            weights,
            false,
            &cols,
            false,
            1.0,
            &mut out.data,
        );
        let cols = self.keep_cols.then_some(cols);
        self.push(out, Op::Conv { input, layer, cols })
    }

    pub fn silu(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input].value;
        let out = Tensor {
            data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
            ..*x
        };
        self.push(out, Op::Silu { input })
    }

    /// Appends one constant-valued channel.
    pub fn append_const(&mut self, input: NodeId, value: f64) -> NodeId {
        let x = &self.nodes[input].value;
        let mut data = x.data.clone();
        data.extend(std::iter::repeat(value).take(x.plane()));
        let out = Tensor {
            channels: x.channels + 1,
            rows: x.rows,
            cols: x.cols,
            data,
        };
        self.push(out, Op::AppendConst { input })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let x = &self.nodes[input].value;
        let out = Tensor {
            data: x.data.iter().map(|&v| factor * v).collect(),
            ..*x
        };
        self.push(out, Op::Scale { input, factor })
    }

    /// `ca * a + cb * b`.
    pub fn sum(&mut self, a: NodeId, ca: f64, b: NodeId, cb: f64) -> NodeId {
        let (xa, xb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert!(xa.same_dims(xb), "sum operands differ in shape");
        let out = Tensor {
            data: xa
                .data
                .iter()
                .zip(&xb.data)
                .map(|(u, v)| ca * u + cb * v)
                .collect(),
            ..*xa
        };
        self.push(out, Op::Sum { a, ca, b, cb })
    }

    /// Propagates `seed` (the cotangent of `output`) back through the tape.
    ///
    /// Returns the cotangent of every node (`None` for nodes that do not
    /// reach `output`). When `param_grad` is given, parameter gradients are
    /// accumulated into it; that requires a tape built with `keep_cols`.
    pub fn backward(
        &self,
        output: NodeId,
        seed: Tensor,
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<Option<Tensor>> {
        assert!(
            self.nodes[output].value.same_dims(&seed),
            "seed shape mismatch"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed);

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv { input, layer, cols } => {
                    let x = &self.nodes[*input].value;
                    let hw = x.plane();
                    let kk = layer.cin * layer.kernel * layer.kernel;
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let cols = cols
                            .as_ref()
                            .expect("parameter gradients need a tape with keep_cols");
                        let dw =
                            &mut pg[layer.weight_offset..layer.weight_offset + layer.weight_len()];
                        gemm(layer.cout, hw, kk, &g.data, false, cols, true, 1.0, dw);
                        let db = &mut pg[layer.bias_offset..layer.bias_offset + layer.cout];
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += g.data[co * hw..(co + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    let weights =
                        &self.params[layer.weight_offset..layer.weight_offset + layer.weight_len()];
                    let mut dcols = vec![0.0; kk * hw];
                    gemm(
                        kk, layer.cout, hw, weights, true, &g.data, false, 0.0, &mut dcols,
                    );
                    let dx = col2im(&dcols, layer.cin, x.rows, x.cols, layer.kernel);
                    accumulate(&mut grads[*input], dx);
                }
                Op::Silu { input } => {
                    let x = &self.nodes[*input].value;
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    accumulate(&mut grads[*input], dx);
                }
                Op::AppendConst { input } => {
                    let x = &self.nodes[*input].value;
                    let mut dx = g;
                    dx.data.truncate(x.data.len());
                    dx.channels = x.channels;
                    accumulate(&mut grads[*input], dx);
                }
                Op::Scale { input, factor } => {
                    let mut dx = g;
                    dx.data.iter_mut().for_each(|d| *d *= factor);
                    accumulate(&mut grads[*input], dx);
                }
                Op::Sum { a, ca, b, cb } => {
                    let mut da = g.clone();
                    da.data.iter_mut().for_each(|d| *d *= ca);
                    let mut db = g;
                    db.data.iter_mut().for_each(|d| *d *= cb);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
            }
        }
        grads
    }
}
