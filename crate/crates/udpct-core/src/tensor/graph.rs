use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{Scalar, TArray, TensorError, NORM_EPS};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics reported by a train-mode batch norm, used by
/// the caller to update running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        normed: TArray<T>,
        inv_std: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: TArray<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
    },
    ConvT3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_broadcast: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogitsMean {
        logits: Var,
        target_one: bool,
    },
}

struct Node<T: Scalar> {
    value: TArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, which is already
/// a topological order, so backward is a single reverse sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`]. Intermediate gradients
/// are consumed during the sweep; leaf gradients remain readable.
pub struct Gradients<T> {
    grads: Vec<Option<TArray<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&TArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(msg: alloc::string::String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: TArray<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: TArray<T>, track: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, track)
    }

    pub fn constant(&mut self, value: TArray<T>) -> Var {
        self.leaf(value, false)
    }

    /// Inserts a parameter's current value as a leaf; its gradient can later
    /// be pushed back into the store with [`Graph::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, track: bool) -> Var {
        self.push(
            store.value(id).clone(),
            Op::Leaf { param: Some(id) },
            track,
        )
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "add")?;
        let mut v = self.nodes[a.0].value.clone();
        v.add_assign(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = TArray::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = TArray::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.nodes[x.0].value.data().iter().map(|&v| v * c).collect();
        let v = TArray::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].value.data().iter().map(|&v| v.abs()).collect();
        let v = TArray::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(v, Op::Abs(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let z = T::zero();
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v > z { v } else { z })
            .collect();
        let v = TArray::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let z = T::zero();
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v > z { v } else { slope * v })
            .collect();
        let v = TArray::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(v, Op::LeakyRelu(x, slope), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let v = TArray::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| gelu(v))
            .collect();
        let v = TArray::from_vec(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(v, Op::Gelu(x), needs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = lane_dims(&shape, axis);
        let mut out = self.nodes[x.0].value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(out.data()[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (out.data()[base + j * inner] - mx).exp();
                    out.data_mut()[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out.data_mut()[base + j * inner] = out.data()[base + j * inner] / sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x, axis }, needs))
    }

    /// Normalizes along `axis` with per-position affine parameters.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!(
                "layer_norm axis {axis} for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(mismatch(format!(
                "layer_norm affine params must have shape [{len}]"
            )));
        }
        let (outer, _, inner) = lane_dims(&shape, axis);
        let eps = T::from_f64(NORM_EPS);
        let nf = T::from_f64(len as f64);
        let mut normed = TArray::zeros(&shape);
        let mut out = TArray::zeros(&shape);
        let mut inv_stds = Vec::with_capacity(outer * inner);
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean = mean + xv[base + j * inner];
                }
                mean = mean / nf;
                let mut var = T::zero();
                for j in 0..len {
                    let d = xv[base + j * inner] - mean;
                    var = var + d * d;
                }
                var = var / nf;
                let inv_std = T::one() / (var + eps).sqrt();
                inv_stds.push(inv_std);
                for j in 0..len {
                    let nrm = (xv[base + j * inner] - mean) * inv_std;
                    normed.data_mut()[base + j * inner] = nrm;
                    out.data_mut()[base + j * inner] = nrm * gv[j] + bv[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                normed,
                inv_std: inv_stds,
            },
            needs,
        ))
    }

    /// Train-mode batch norm over `(batch, channel, spatial...)` input;
    /// normalizes each channel across batch and spatial dims and reports the
    /// batch statistics for running-buffer updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch(format!("batchnorm input rank {} < 2", shape.len())));
        }
        let (nb, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(format!("batchnorm affine params must be [{c}]")));
        }
        let count = nb * spatial;
        let nf = T::from_f64(count as f64);
        let eps = T::from_f64(NORM_EPS);
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for n in 0..nb {
                let base = (n * c + ch) * spatial;
                for &v in &xv[base..base + spatial] {
                    s = s + v;
                }
            }
            let mean = s / nf;
            let mut vsum = T::zero();
            for n in 0..nb {
                let base = (n * c + ch) * spatial;
                for &v in &xv[base..base + spatial] {
                    let d = v - mean;
                    vsum = vsum + d * d;
                }
            }
            means[ch] = mean;
            vars[ch] = vsum / nf;
        }
        let mut normed = TArray::zeros(&shape);
        let mut out = TArray::zeros(&shape);
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            inv_std[ch] = T::one() / (vars[ch] + eps).sqrt();
        }
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                let (m, is, g, b) = (means[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in base..base + spatial {
                    let nrm = (xv[i] - m) * is;
                    normed.data_mut()[i] = nrm;
                    out.data_mut()[i] = nrm * g + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats {
            mean: means,
            var: vars,
        };
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch(format!("batchnorm input rank {} < 2", shape.len())));
        }
        let (nb, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch(format!("running stats must have {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(format!("batchnorm affine params must be [{c}]")));
        }
        let eps = T::from_f64(NORM_EPS);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = TArray::zeros(&shape);
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                let (m, is, g, b) = (running_mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in base..base + spatial {
                    out.data_mut()[i] = (xv[i] - m) * is * g + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            needs,
        ))
    }

    /// Cross-correlation with bias: input `(n, cin, d, h, w)`, weight
    /// `(cout, cin, k, k, k)`, bias `(cout)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(mismatch(format!("conv3d wants 5-d x and w: {xs:?}, {ws:?}")));
        }
        if ws[2] != ws[3] || ws[2] != ws[4] {
            return Err(mismatch(format!("conv3d kernel must be cubic: {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(mismatch(format!(
                "conv3d channels: input {} vs weight {}",
                xs[1], ws[1]
            )));
        }
        if self.shape(b) != [ws[0]] {
            return Err(mismatch(format!("conv3d bias must be [{}]", ws[0])));
        }
        let geom = ConvGeom::forward(xs[1], ws[0], ws[2], stride, pad, [xs[2], xs[3], xs[4]])
            .ok_or_else(|| {
                mismatch(format!(
                    "conv3d kernel {} stride {stride} pad {pad} does not fit input {:?}",
                    ws[2],
                    &xs[2..]
                ))
            })?;
        let batch = xs[0];
        let mut y = TArray::zeros(&[
            batch,
            geom.cout,
            geom.out_sp[0],
            geom.out_sp[1],
            geom.out_sp[2],
        ]);
        kernels::conv3d_fwd(
            self.nodes[x.0].value.data(),
            batch,
            &geom,
            self.nodes[w.0].value.data(),
            Some(self.nodes[b.0].value.data()),
            y.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Conv3d { x, w, b, geom, batch }, needs))
    }

    /// Transposed conv (exact adjoint of [`Graph::conv3d`]): input
    /// `(n, cin_here, d, h, w)`, weight `(cin_here, cout_here, k, k, k)`,
    /// bias `(cout_here)`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(mismatch(format!(
                "conv_transpose3d wants 5-d x and w: {xs:?}, {ws:?}"
            )));
        }
        if ws[2] != ws[3] || ws[2] != ws[4] {
            return Err(mismatch(format!("kernel must be cubic: {ws:?}")));
        }
        if ws[0] != xs[1] {
            return Err(mismatch(format!(
                "conv_transpose3d channels: input {} vs weight {}",
                xs[1], ws[0]
            )));
        }
        if self.shape(b) != [ws[1]] {
            return Err(mismatch(format!("bias must be [{}]", ws[1])));
        }
        let geom = ConvGeom::transposed(ws[1], ws[0], ws[2], stride, pad, [xs[2], xs[3], xs[4]])
            .ok_or_else(|| {
                mismatch(format!(
                    "conv_transpose3d kernel {} stride {stride} pad {pad} invalid for {:?}",
                    ws[2],
                    &xs[2..]
                ))
            })?;
        let batch = xs[0];
        let mut y = TArray::zeros(&[
            batch,
            geom.cin,
            geom.in_sp[0],
            geom.in_sp[1],
            geom.in_sp[2],
        ]);
        kernels::convt3d_fwd(
            self.nodes[x.0].value.data(),
            batch,
            &geom,
            self.nodes[w.0].value.data(),
            Some(self.nodes[b.0].value.data()),
            y.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::ConvT3d { x, w, b, geom, batch }, needs))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; a 2-d right operand
    /// broadcasts across the left batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch(format!("matmul wants rank >= 2: {ash:?}, {bsh:?}")));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(mismatch(format!("matmul inner dims: {ash:?} x {bsh:?}")));
        }
        let abatch: usize = ash[..ash.len() - 2].iter().product();
        let b_broadcast = bsh.len() == 2 && ash.len() > 2;
        if !b_broadcast && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(mismatch(format!("matmul batch dims: {ash:?} x {bsh:?}")));
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut y = TArray::zeros(&out_shape);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        for nb in 0..abatch {
            let boff = if b_broadcast { 0 } else { nb * k * n };
            kernels::gemm_nn(
                m,
                k,
                n,
                &av[nb * m * k..(nb + 1) * m * k],
                &bv[boff..boff + k * n],
                &mut y.data_mut()[nb * m * n..(nb + 1) * m * n],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            y,
            Op::MatMul {
                a,
                b,
                batch: abatch,
                m,
                k,
                n,
                b_broadcast,
            },
            needs,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(mismatch(format!("permute {perm:?} on shape {shape:?}")));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(mismatch(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out = permute_array(&self.nodes[x.0].value, perm);
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != bsh.len() || axis >= ash.len() {
            return Err(mismatch(format!("concat {ash:?} + {bsh:?} axis {axis}")));
        }
        for (i, (x, y)) in ash.iter().zip(&bsh).enumerate() {
            if i != axis && x != y {
                return Err(mismatch(format!("concat {ash:?} + {bsh:?} axis {axis}")));
            }
        }
        let outer: usize = ash[..axis].iter().product();
        let a_block: usize = ash[axis..].iter().product();
        let b_block: usize = bsh[axis..].iter().product();
        let mut shape = ash.clone();
        shape[axis] += bsh[axis];
        let mut data = Vec::with_capacity(outer * (a_block + b_block));
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        for o in 0..outer {
            data.extend_from_slice(&av[o * a_block..(o + 1) * a_block]);
            data.extend_from_slice(&bv[o * b_block..(o + 1) * b_block]);
        }
        let v = TArray::from_vec(&shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Concat { a, b, axis }, needs))
    }

    /// Adds a `[n]` bias to the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| mismatch("add_bias on scalar".into()))?;
        if self.shape(b) != [n] {
            return Err(mismatch(format!("add_bias wants [{n}] bias")));
        }
        let bv = self.nodes[b.0].value.data().to_vec();
        let mut v = self.nodes[x.0].value.clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&bv) {
                *x = *x + y;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(v, Op::AddBias { x, b }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.nodes[x.0].value.data() {
            s = s + v;
        }
        let needs = self.needs(x);
        self.push(TArray::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let mut s = T::zero();
        for &v in self.nodes[x.0].value.data() {
            s = s + v;
        }
        let needs = self.needs(x);
        self.push(
            TArray::scalar(s / T::from_f64(n as f64)),
            Op::Mean(x),
            needs,
        )
    }

    /// Mean binary cross-entropy against an all-ones or all-zeros target,
    /// evaluated in the overflow-safe logits form
    /// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target_one: bool) -> Var {
        let z = self.nodes[logits.0].value.data();
        let n = T::from_f64(z.len() as f64);
        let mut s = T::zero();
        let t = if target_one { T::one() } else { T::zero() };
        for &v in z {
            let relu = if v > T::zero() { v } else { T::zero() };
            s = s + relu - v * t + (T::one() + (-v.abs()).exp()).ln();
        }
        let needs = self.needs(logits);
        self.push(
            TArray::scalar(s / n),
            Op::BceWithLogitsMean {
                logits,
                target_one,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<TArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TArray::from_vec(self.shape(loss), vec![T::one()]).unwrap());
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.step_backward(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates leaf gradients into their parameter slots.
    pub fn write_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads.grads[i].as_ref() {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<TArray<T>>], v: Var, delta: TArray<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, i: usize, g: &TArray<T>, grads: &mut [Option<TArray<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = TArray::from_vec(
                    g.shape(),
                    g.data().iter().map(|&v| -v).collect(),
                )
                .unwrap();
                self.acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let da = TArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv).map(|(&gv, &x)| gv * x).collect(),
                )
                .unwrap();
                let db = TArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(av).map(|(&gv, &x)| gv * x).collect(),
                )
                .unwrap();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let d = TArray::from_vec(
                    g.shape(),
                    g.data().iter().map(|&v| v * *c).collect(),
                )
                .unwrap();
                self.acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = self.nodes[x.0].value.data();
                let d = TArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| {
                            if v > T::zero() {
                                gv
                            } else if v < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )
                .unwrap();
                self.acc(grads, *x, d);
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let d = TArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                )
                .unwrap();
                self.acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.nodes[x.0].value.data();
                let d = TArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * *slope })
                        .collect(),
                )
                .unwrap();
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[i].value.data();
                let d = TArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(yv)
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect(),
                )
                .unwrap();
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                let d = TArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| gv * gelu_deriv(v))
                        .collect(),
                )
                .unwrap();
                self.acc(grads, *x, d);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, len, inner) = lane_dims(y.shape(), *axis);
                let mut d = TArray::zeros(y.shape());
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot = dot + g.data()[base + j * inner] * y.data()[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            d.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                normed,
                inv_std,
            } => {
                let shape = normed.shape();
                let (outer, len, inner) = lane_dims(shape, *axis);
                let gv = self.nodes[gamma.0].value.data();
                let nf = T::from_f64(len as f64);
                let mut dx = TArray::zeros(shape);
                let mut dgamma = vec![T::zero(); len];
                let mut dbeta = vec![T::zero(); len];
                let mut lane = 0;
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let is = inv_std[lane];
                        lane += 1;
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for j in 0..len {
                            let idx = base + j * inner;
                            let ga = g.data()[idx] * gv[j];
                            sum_g = sum_g + ga;
                            sum_gx = sum_gx + ga * normed.data()[idx];
                            dgamma[j] = dgamma[j] + g.data()[idx] * normed.data()[idx];
                            dbeta[j] = dbeta[j] + g.data()[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            let ga = g.data()[idx] * gv[j];
                            dx.data_mut()[idx] =
                                is * (nf * ga - sum_g - normed.data()[idx] * sum_gx) / nf;
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, TArray::from_vec(&[len], dgamma).unwrap());
                self.acc(grads, *beta, TArray::from_vec(&[len], dbeta).unwrap());
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let shape = normed.shape().to_vec();
                let (nb, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let count = nb * spatial;
                let nf = T::from_f64(count as f64);
                let gv = self.nodes[gamma.0].value.data();
                let mut dx = TArray::zeros(&shape);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for n in 0..nb {
                        let base = (n * c + ch) * spatial;
                        for o in base..base + spatial {
                            let ga = g.data()[o] * gv[ch];
                            sum_g = sum_g + ga;
                            sum_gx = sum_gx + ga * normed.data()[o];
                            dgamma[ch] = dgamma[ch] + g.data()[o] * normed.data()[o];
                            dbeta[ch] = dbeta[ch] + g.data()[o];
                        }
                    }
                    let is = inv_std[ch];
                    for n in 0..nb {
                        let base = (n * c + ch) * spatial;
                        for o in base..base + spatial {
                            let ga = g.data()[o] * gv[ch];
                            dx.data_mut()[o] =
                                is * (nf * ga - sum_g - normed.data()[o] * sum_gx) / nf;
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, TArray::from_vec(&[c], dgamma).unwrap());
                self.acc(grads, *beta, TArray::from_vec(&[c], dbeta).unwrap());
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (nb, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gv = self.nodes[gamma.0].value.data();
                let xv = self.nodes[x.0].value.data();
                let mut dx = TArray::zeros(&shape);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..nb {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        for o in base..base + spatial {
                            let xn = (xv[o] - mean[ch]) * inv_std[ch];
                            dx.data_mut()[o] = g.data()[o] * gv[ch] * inv_std[ch];
                            dgamma[ch] = dgamma[ch] + g.data()[o] * xn;
                            dbeta[ch] = dbeta[ch] + g.data()[o];
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, TArray::from_vec(&[c], dgamma).unwrap());
                self.acc(grads, *beta, TArray::from_vec(&[c], dbeta).unwrap());
            }
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                batch,
            } => {
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let need_b = self.needs(*b);
                let mut dx = need_x.then(|| TArray::zeros(self.nodes[x.0].value.shape()));
                let mut dw = need_w.then(|| TArray::zeros(self.nodes[w.0].value.shape()));
                let mut db = need_b.then(|| TArray::zeros(self.nodes[b.0].value.shape()));
                kernels::conv3d_bwd(
                    self.nodes[x.0].value.data(),
                    *batch,
                    geom,
                    self.nodes[w.0].value.data(),
                    g.data(),
                    dx.as_mut().map(|d| d.data_mut()),
                    dw.as_mut().map(|d| d.data_mut()),
                    db.as_mut().map(|d| d.data_mut()),
                );
                if let Some(d) = dx {
                    self.acc(grads, *x, d);
                }
                if let Some(d) = dw {
                    self.acc(grads, *w, d);
                }
                if let Some(d) = db {
                    self.acc(grads, *b, d);
                }
            }
            Op::ConvT3d {
                x,
                w,
                b,
                geom,
                batch,
            } => {
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let need_b = self.needs(*b);
                let mut dx = need_x.then(|| TArray::zeros(self.nodes[x.0].value.shape()));
                let mut dw = need_w.then(|| TArray::zeros(self.nodes[w.0].value.shape()));
                let mut db = need_b.then(|| TArray::zeros(self.nodes[b.0].value.shape()));
                kernels::convt3d_bwd(
                    self.nodes[x.0].value.data(),
                    *batch,
                    geom,
                    self.nodes[w.0].value.data(),
                    g.data(),
                    dx.as_mut().map(|d| d.data_mut()),
                    dw.as_mut().map(|d| d.data_mut()),
                    db.as_mut().map(|d| d.data_mut()),
                );
                if let Some(d) = dx {
                    self.acc(grads, *x, d);
                }
                if let Some(d) = dw {
                    self.acc(grads, *w, d);
                }
                if let Some(d) = db {
                    self.acc(grads, *b, d);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_broadcast,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.needs(*a) {
                    let mut da = TArray::zeros(self.nodes[a.0].value.shape());
                    for nb in 0..*batch {
                        let boff = if *b_broadcast { 0 } else { nb * k * n };
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g.data()[nb * m * n..(nb + 1) * m * n],
                            &bv[boff..boff + k * n],
                            &mut da.data_mut()[nb * m * k..(nb + 1) * m * k],
                        );
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = TArray::zeros(self.nodes[b.0].value.shape());
                    for nb in 0..*batch {
                        let boff = if *b_broadcast { 0 } else { nb * k * n };
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &av[nb * m * k..(nb + 1) * m * k],
                            &g.data()[nb * m * n..(nb + 1) * m * n],
                            &mut db.data_mut()[boff..boff + k * n],
                        );
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_array(g, &inv);
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g
                    .reshaped(self.nodes[x.0].value.shape())
                    .expect("reshape grad");
                self.acc(grads, *x, d);
            }
            Op::Concat { a, b, axis } => {
                let ash = self.nodes[a.0].value.shape().to_vec();
                let bsh = self.nodes[b.0].value.shape().to_vec();
                let outer: usize = ash[..*axis].iter().product();
                let a_block: usize = ash[*axis..].iter().product();
                let b_block: usize = bsh[*axis..].iter().product();
                let mut da = TArray::zeros(&ash);
                let mut db = TArray::zeros(&bsh);
                for o in 0..outer {
                    let src = &g.data()[o * (a_block + b_block)..(o + 1) * (a_block + b_block)];
                    da.data_mut()[o * a_block..(o + 1) * a_block]
                        .copy_from_slice(&src[..a_block]);
                    db.data_mut()[o * b_block..(o + 1) * b_block]
                        .copy_from_slice(&src[a_block..]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::AddBias { x, b } => {
                let n = self.nodes[b.0].value.numel();
                self.acc(grads, *x, g.clone());
                let mut db = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d = *d + gv;
                    }
                }
                self.acc(grads, *b, TArray::from_vec(&[n], db).unwrap());
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.nodes[x.0].value.shape();
                self.acc(grads, *x, TArray::full(shape, gv));
            }
            Op::Mean(x) => {
                let shape = self.nodes[x.0].value.shape();
                let n = self.nodes[x.0].value.numel();
                let gv = g.data()[0] / T::from_f64(n as f64);
                self.acc(grads, *x, TArray::full(shape, gv));
            }
            Op::BceWithLogitsMean { logits, target_one } => {
                let z = self.nodes[logits.0].value.data();
                let n = T::from_f64(z.len() as f64);
                let t = if *target_one { T::one() } else { T::zero() };
                let gv = g.data()[0];
                let d = TArray::from_vec(
                    self.nodes[logits.0].value.shape(),
                    z.iter().map(|&v| gv * (sigmoid(v) - t) / n).collect(),
                )
                .unwrap();
                self.acc(grads, *logits, d);
            }
        }
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_array<T: Scalar>(x: &TArray<T>, perm: &[usize]) -> TArray<T> {
    let shape = x.shape();
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = TArray::zeros(&out_shape);
    let mut idx = vec![0usize; nd];
    let total = x.numel();
    for flat in 0..total {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        out.data_mut()[flat] = x.data()[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// tanh-form GELU.
#[inline]
fn gelu<T: Scalar>(v: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

#[inline]
fn gelu_deriv<T: Scalar>(v: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * v * sech2 * c * (T::one() + three * a * v * v)
}
