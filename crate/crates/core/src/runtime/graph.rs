//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers and a single sweep yields every
//! gradient. Parameters are pulled from a borrowed [`ParamStore`] and their
//! gradients are returned indexed by parameter id.
//!
//! Atom-axis operations work on 4-D tensors laid out as `[B, C, N, W]`
//! (batch, channel, atom, trailing feature). Padded atoms are described by
//! per-molecule sizes: atom `i` of molecule `b` is real iff
//! `i < sizes[b]`.

use super::params::{Gradients, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry;
use crate::transform::RigidTransform;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttnCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
}

struct MdsCache {
    n: usize,
    // full decomposition, eigenvalues descending, column-major vectors
    values: Vec<f64>,
    vectors: Vec<f64>,
    signs: [f64; 3],
}

enum Op<T> {
    Input,
    Param(usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    AtomMask {
        x: Var,
        sizes: Vec<usize>,
    },
    Attention {
        x: Var,
        w: [Var; 6],
        sizes: Vec<usize>,
        cache: Vec<AttnCache<T>>,
    },
    MaskedMeanPool {
        x: Var,
        sizes: Vec<usize>,
    },
    DistanceAggregate {
        x: Var,
        sizes: Vec<usize>,
        mean: bool,
    },
    Rigid {
        x: Var,
        linear: Vec<[[f64; 3]; 3]>,
        sizes: Vec<usize>,
    },
    Mds {
        x: Var,
        sizes: Vec<usize>,
        cache: Vec<MdsCache>,
    },
    EncoderLoss {
        p: Var,
        p_prime: Var,
        sizes: Vec<usize>,
        argmax: Vec<usize>,
    },
    MseLoss {
        x: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn check_4d<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, n, w] => Ok([b, c, n, w]),
        _ => Err(shape_err(format!("{what} expects a 4-D tensor, got {:?}", t.shape()))),
    }
}

fn check_sizes(sizes: &[usize], b: usize, n: usize) -> Result<()> {
    if sizes.len() != b || sizes.iter().any(|&s| s > n) {
        return Err(shape_err(format!(
            "atom sizes {sizes:?} inconsistent with batch {b} x {n} atoms"
        )));
    }
    Ok(())
}

/// `c[m,n] (+)= a[m,k] · b[k,n]`, all row-major contiguous.
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[m,n] (+)= a[k,m]ᵀ · b[k,n]`.
fn matmul_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[m,n] (+)= a[m,k] · b[n,k]ᵀ`.
fn matmul_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// im2col for a 3x3 kernel with zero padding 1 over a [ci, h, w] image.
// cols is [ci*9, stride] and this image occupies columns offset..offset+h*w.
fn im2col<T: Real>(x: &[T], ci: usize, h: usize, w: usize, cols: &mut [T], stride: usize, offset: usize) {
    for c in 0..ci {
        let img = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * stride + offset;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        cols[row + y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[sy as usize * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], ci: usize, h: usize, w: usize, gx: &mut [T], stride: usize, offset: usize) {
    for c in 0..ci {
        let img = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * stride + offset;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            img[sy as usize * w + sx as usize] += cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is wanted (see [`Graph::backward_with_inputs`]).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param_id(id))
    }

    pub fn param_id(&mut self, id: usize) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| shape_err("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Affine map on the trailing axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (fin, fout) = match ws[..] {
            [i, o] => (i, o),
            _ => return Err(shape_err(format!("linear weight must be 2-D, got {ws:?}"))),
        };
        if xs.last() != Some(&fin) || self.value(b).shape() != [fout] {
            return Err(shape_err(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {:?}",
                self.value(b).shape()
            )));
        }
        let m = self.value(x).len() / fin;
        let mut out = vec![T::zero(); m * fout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bias);
        }
        matmul(m, fin, fout, self.value(x).data(), self.value(w).data(), &mut out, true);
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// 3x3 convolution, stride 1, zero padding 1, over `[B, Ci, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [bs, ci, h, wd] = check_4d(self.value(x), "conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let co = match ws[..] {
            [o, i, 3, 3] if i == ci => o,
            _ => {
                return Err(shape_err(format!(
                    "conv2d kernel {ws:?} incompatible with {ci} input channels"
                )))
            }
        };
        if self.value(b).shape() != [co] {
            return Err(shape_err("conv2d bias length must equal output channels"));
        }
        let hw = h * wd;
        let cols_len = bs * hw;
        let mut cols = vec![T::zero(); ci * 9 * cols_len];
        let xd = self.value(x).data();
        for bi in 0..bs {
            im2col(&xd[bi * ci * hw..(bi + 1) * ci * hw], ci, h, wd, &mut cols, cols_len, bi * hw);
        }
        let mut tmp = vec![T::zero(); co * cols_len];
        let bias = self.value(b).data();
        for (o, row) in tmp.chunks_mut(cols_len).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        matmul(co, ci * 9, cols_len, self.value(w).data(), &cols, &mut tmp, true);
        let mut out = vec![T::zero(); bs * co * hw];
        for bi in 0..bs {
            for o in 0..co {
                out[(bi * co + o) * hw..(bi * co + o + 1) * hw]
                    .copy_from_slice(&tmp[o * cols_len + bi * hw..o * cols_len + (bi + 1) * hw]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[bs, co, h, wd], out)?, Op::Conv2d { x, w, b }, rg))
    }

    /// Normalizes the trailing axis to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let f = self.value(x).last_dim();
        if self.value(gain).shape() != [f] || self.value(bias).shape() != [f] {
            return Err(shape_err("layer_norm affine parameters must match the feature axis"));
        }
        let xv = self.value(x);
        let rows = xv.len() / f;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let nf = T::of(f as f64);
        for r in 0..rows {
            let row = &xv.data()[r * f..(r + 1) * f];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..f {
                let xh = (row[j] - mean) * is;
                xhat[r * f + j] = xh;
                out[r * f + j] = xh * g[j] + bb[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Zeroes padded atoms of a `[B, C, N, W]` tensor.
    pub fn atom_mask(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        let [bs, c, n, w] = check_4d(self.value(x), "atom_mask")?;
        check_sizes(sizes, bs, n)?;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for (bi, &s) in sizes.iter().enumerate() {
            for ch in 0..c {
                let base = ((bi * c + ch) * n) * w;
                d[base + s * w..base + n * w].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::AtomMask {
                x,
                sizes: sizes.to_vec(),
            },
            rg,
        ))
    }

    /// Single-head scaled dot-product self-attention over the atom axis of
    /// a `[B, C, N, W]` tensor, followed by a sigmoid. Each atom is a token
    /// whose features are its `C*W` channel values; padded atoms neither
    /// attend nor are attended to and come out as zero.
    ///
    /// `w` holds `[wq, bq, wk, bk, wv, bv]` with weights `[D, D]` and
    /// biases `[D]`, `D = C*W`.
    pub fn self_attention(&mut self, x: Var, w: [Var; 6], sizes: &[usize]) -> Result<Var> {
        let [bs, c, n, wd] = check_4d(self.value(x), "self_attention")?;
        check_sizes(sizes, bs, n)?;
        let d = c * wd;
        for (i, &p) in w.iter().enumerate() {
            let expect: &[usize] = if i % 2 == 0 { &[d, d] } else { &[d] };
            if self.value(p).shape() != expect {
                return Err(shape_err(format!(
                    "attention parameter {i} has shape {:?}, expected {expect:?}",
                    self.value(p).shape()
                )));
            }
        }
        let scale = T::one() / T::of(d as f64).sqrt();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bs * c * n * wd];
        let mut cache = Vec::with_capacity(bs);
        for (bi, &s) in sizes.iter().enumerate() {
            // gather tokens [s, d]
            let mut tok = vec![T::zero(); s * d];
            for ch in 0..c {
                for i in 0..s {
                    for k in 0..wd {
                        tok[i * d + ch * wd + k] = xd[((bi * c + ch) * n + i) * wd + k];
                    }
                }
            }
            let project = |wi: usize| {
                let mut r = vec![T::zero(); s * d];
                let bias = self.value(w[wi + 1]).data();
                for row in r.chunks_mut(d) {
                    row.copy_from_slice(bias);
                }
                matmul(s, d, d, &tok, self.value(w[wi]).data(), &mut r, true);
                r
            };
            let q = project(0);
            let k = project(2);
            let v = project(4);
            let mut p = vec![T::zero(); s * s];
            matmul_nt(s, d, s, &q, &k, &mut p, false);
            for row in p.chunks_mut(s.max(1)) {
                let mut mx = T::neg_infinity();
                for v in row.iter_mut() {
                    *v *= scale;
                    mx = mx.max(*v);
                }
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v = *v / z);
            }
            let mut o = vec![T::zero(); s * d];
            matmul(s, s, d, &p, &v, &mut o, false);
            for ch in 0..c {
                for i in 0..s {
                    for kk in 0..wd {
                        out[((bi * c + ch) * n + i) * wd + kk] = sigmoid(o[i * d + ch * wd + kk]);
                    }
                }
            }
            cache.push(AttnCache { x: tok, q, k, v, p });
        }
        let rg = self.rg(x) || w.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(&[bs, c, n, wd], out)?,
            Op::Attention {
                x,
                w,
                sizes: sizes.to_vec(),
                cache,
            },
            rg,
        ))
    }

    /// Mean over the atom and trailing axes of `[B, C, N, W]`, counting only
    /// real atoms. Output is `[B, C, 1, 1]`.
    pub fn masked_mean_pool(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        let [bs, c, n, w] = check_4d(self.value(x), "adaptive_avg_pool")?;
        check_sizes(sizes, bs, n)?;
        if sizes.contains(&0) {
            return Err(shape_err("adaptive_avg_pool over a fully masked molecule"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bs * c];
        for (bi, &s) in sizes.iter().enumerate() {
            let cnt = T::of((s * w) as f64);
            for ch in 0..c {
                let base = ((bi * c + ch) * n) * w;
                out[bi * c + ch] = xd[base..base + s * w].iter().copied().sum::<T>() / cnt;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[bs, c, 1, 1], out)?,
            Op::MaskedMeanPool {
                x,
                sizes: sizes.to_vec(),
            },
            rg,
        ))
    }

    /// Per-atom sum (or mean) of Euclidean distances to every other real
    /// atom. Input `[B, 1, N, 3]`, output `[B, 1, N, 1]`.
    pub fn distance_aggregate(&mut self, x: Var, sizes: &[usize], mean: bool) -> Result<Var> {
        let [bs, c, n, w] = check_4d(self.value(x), "distance_aggregate")?;
        if c != 1 || w != 3 {
            return Err(shape_err("distance_aggregate expects [B, 1, N, 3]"));
        }
        check_sizes(sizes, bs, n)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bs * n];
        for (bi, &s) in sizes.iter().enumerate() {
            let pos = &xd[bi * n * 3..(bi + 1) * n * 3];
            for i in 0..s {
                let mut acc = T::zero();
                for j in 0..s {
                    if i != j {
                        acc += dist3(&pos[i * 3..i * 3 + 3], &pos[j * 3..j * 3 + 3]);
                    }
                }
                if mean && s > 1 {
                    acc = acc / T::of((s - 1) as f64);
                }
                out[bi * n + i] = acc;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[bs, 1, n, 1], out)?,
            Op::DistanceAggregate {
                x,
                sizes: sizes.to_vec(),
                mean,
            },
            rg,
        ))
    }

    /// Per-molecule rigid motion `y = x·A + t` of `[B, 1, N, 3]` positions;
    /// padded atoms stay zero.
    pub fn rigid_transform(&mut self, x: Var, transforms: &[RigidTransform], sizes: &[usize]) -> Result<Var> {
        let [bs, c, n, w] = check_4d(self.value(x), "rigid_transform")?;
        if c != 1 || w != 3 || transforms.len() != bs {
            return Err(shape_err("rigid_transform expects [B, 1, N, 3] and one transform per molecule"));
        }
        check_sizes(sizes, bs, n)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bs * n * 3];
        for (bi, (tr, &s)) in transforms.iter().zip(sizes).enumerate() {
            for i in 0..s {
                let o = (bi * n + i) * 3;
                let y = tr.apply_point([xd[o].f64(), xd[o + 1].f64(), xd[o + 2].f64()]);
                for k in 0..3 {
                    out[o + k] = T::of(y[k]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[bs, 1, n, 3], out)?,
            Op::Rigid {
                x,
                linear: transforms.iter().map(|t| t.a).collect(),
                sizes: sizes.to_vec(),
            },
            rg,
        ))
    }

    /// Distance matrix → classical MDS → canonical pose, per molecule, in
    /// double precision. Input and output are `[B, 1, N, 3]`.
    pub fn mds_recover(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        let [bs, c, n, w] = check_4d(self.value(x), "mds_recover")?;
        if c != 1 || w != 3 {
            return Err(shape_err("mds_recover expects [B, 1, N, 3]"));
        }
        check_sizes(sizes, bs, n)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bs * n * 3];
        let mut cache = Vec::with_capacity(bs);
        for (bi, &s) in sizes.iter().enumerate() {
            let pos: Vec<[f64; 3]> = (0..s)
                .map(|i| {
                    let o = (bi * n + i) * 3;
                    [xd[o].f64(), xd[o + 1].f64(), xd[o + 2].f64()]
                })
                .collect();
            let dm = geometry::DistanceMatrix::from_positions(&pos);
            let full = geometry::full_eigen(&geometry::double_center(&dm))?;
            let (p_hat, _) = geometry::embed_from_eigen(&full, s);
            let signs = geometry::canonical_signs(&p_hat);
            for (i, row) in p_hat.iter().enumerate() {
                for k in 0..3 {
                    out[(bi * n + i) * 3 + k] = T::of(signs[k] * row[k]);
                }
            }
            cache.push(MdsCache {
                n: s,
                values: full.values,
                vectors: full.vectors,
                signs,
            });
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[bs, 1, n, 3], out)?,
            Op::Mds {
                x,
                sizes: sizes.to_vec(),
                cache,
            },
            rg,
        ))
    }

    /// Batch mean of the per-molecule displacement loss: largest squared
    /// coordinate change plus mean squared atom displacement.
    pub fn encoder_loss(&mut self, p: Var, p_prime: Var, sizes: &[usize]) -> Result<Var> {
        self.same_shape(p, p_prime, "encoder_loss")?;
        let [bs, c, n, w] = check_4d(self.value(p), "encoder_loss")?;
        if c != 1 {
            return Err(shape_err("encoder_loss expects [B, 1, N, W]"));
        }
        check_sizes(sizes, bs, n)?;
        let a = self.value(p).data();
        let b = self.value(p_prime).data();
        let mut total = T::zero();
        let mut argmax = Vec::with_capacity(bs);
        for (bi, &s) in sizes.iter().enumerate() {
            let base = bi * n * w;
            let mut best = T::neg_infinity();
            let mut best_i = base;
            let mut sq = T::zero();
            for idx in base..base + s * w {
                let d = b[idx] - a[idx];
                let d2 = d * d;
                if d2 > best {
                    best = d2;
                    best_i = idx;
                }
                sq += d2;
            }
            argmax.push(best_i);
            if s > 0 {
                total += best + sq / T::of(s as f64);
            }
        }
        let loss = total / T::of(bs as f64);
        let rg = self.rg(p) || self.rg(p_prime);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::EncoderLoss {
                p,
                p_prime,
                sizes: sizes.to_vec(),
                argmax,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse_loss(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(shape_err(format!(
                "mse_loss: {} predictions vs {} targets",
                self.value(x).len(),
                target.len()
            )));
        }
        let nv = T::of(target.len() as f64);
        let loss = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum::<T>()
            / nv;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseLoss {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        Ok(self.backward_with_inputs(loss, &[])?.0)
    }

    /// Like [`Graph::backward`], additionally returning gradients for the
    /// given input nodes (zero when the loss does not depend on them).
    pub fn backward_with_inputs(
        &self,
        loss: Var,
        inputs: &[Var],
    ) -> Result<(Gradients<T>, Vec<Tensor<T>>)> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(id) = node.op {
                accumulate(&mut param_grads[id], g);
                continue;
            }
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
        }
        let input_grads = inputs
            .iter()
            .map(|&v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
            })
            .collect();
        Ok((Gradients::new(param_grads), input_grads))
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (o, &y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= y;
                    }
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = g.clone();
                    for (o, &y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= y;
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.map(|v| v * *s)),
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= y * (T::one() - y);
                }
                self.send(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.send(grads, p, Tensor::from_vec(&ps, gp)?);
                    }
                    offset += chunk;
                }
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (fin, fout) = (wv.dim(0), wv.dim(1));
                let m = g.len() / fout;
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); fin * fout];
                    matmul_tn(fin, m, fout, self.value(*x).data(), g.data(), &mut gw, false);
                    self.send(grads, *w, Tensor::from_vec(&[fin, fout], gw)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.send(grads, *b, Tensor::from_vec(&[fout], gb)?);
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); m * fin];
                    matmul_nt(m, fout, fin, g.data(), wv.data(), &mut gx, false);
                    self.send(grads, *x, Tensor::from_vec(self.value(*x).shape(), gx)?);
                }
            }
            Op::Conv2d { x, w, b } => {
                let [bs, ci, h, wd] = check_4d(self.value(*x), "conv2d")?;
                let co = self.value(*w).dim(0);
                let hw = h * wd;
                let cols_len = bs * hw;
                // gradient laid out as [co, bs*hw]
                let mut gt = vec![T::zero(); co * cols_len];
                for bi in 0..bs {
                    for o in 0..co {
                        gt[o * cols_len + bi * hw..o * cols_len + (bi + 1) * hw]
                            .copy_from_slice(&g.data()[(bi * co + o) * hw..(bi * co + o + 1) * hw]);
                    }
                }
                if self.rg(*b) {
                    let gb: Vec<T> = gt.chunks(cols_len).map(|r| r.iter().copied().sum()).collect();
                    self.send(grads, *b, Tensor::from_vec(&[co], gb)?);
                }
                if self.rg(*w) {
                    let mut cols = vec![T::zero(); ci * 9 * cols_len];
                    let xd = self.value(*x).data();
                    for bi in 0..bs {
                        im2col(&xd[bi * ci * hw..(bi + 1) * ci * hw], ci, h, wd, &mut cols, cols_len, bi * hw);
                    }
                    let mut gw = vec![T::zero(); co * ci * 9];
                    matmul_nt(co, cols_len, ci * 9, &gt, &cols, &mut gw, false);
                    self.send(grads, *w, Tensor::from_vec(&[co, ci, 3, 3], gw)?);
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); ci * 9 * cols_len];
                    matmul_tn(ci * 9, co, cols_len, self.value(*w).data(), &gt, &mut gcols, false);
                    let mut gx = vec![T::zero(); bs * ci * hw];
                    for bi in 0..bs {
                        col2im(&gcols, ci, h, wd, &mut gx[bi * ci * hw..(bi + 1) * ci * hw], cols_len, bi * hw);
                    }
                    self.send(grads, *x, Tensor::from_vec(&[bs, ci, h, wd], gx)?);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let f = self.value(*gain).len();
                let gd = self.value(*gain).data();
                let rows = g.len() / f;
                if self.rg(*gain) || self.rg(*bias) {
                    let mut gg = vec![T::zero(); f];
                    let mut gb = vec![T::zero(); f];
                    for r in 0..rows {
                        for j in 0..f {
                            gg[j] += g.data()[r * f + j] * xhat[r * f + j];
                            gb[j] += g.data()[r * f + j];
                        }
                    }
                    self.send(grads, *gain, Tensor::from_vec(&[f], gg)?);
                    self.send(grads, *bias, Tensor::from_vec(&[f], gb)?);
                }
                if self.rg(*x) {
                    let nf = T::of(f as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..f {
                            let gy = g.data()[r * f + j] * gd[j];
                            s1 += gy;
                            s2 += gy * xhat[r * f + j];
                        }
                        for j in 0..f {
                            let gy = g.data()[r * f + j] * gd[j];
                            gx[r * f + j] = inv_std[r] * (gy - s1 / nf - xhat[r * f + j] * s2 / nf);
                        }
                    }
                    self.send(grads, *x, Tensor::from_vec(self.value(*x).shape(), gx)?);
                }
            }
            Op::Rigid { x, linear, sizes } => {
                let n = g.dim(2);
                let mut gx = vec![T::zero(); g.len()];
                for (bi, (a, &s)) in linear.iter().zip(sizes).enumerate() {
                    for i in 0..s {
                        let o = (bi * n + i) * 3;
                        for r in 0..3 {
                            gx[o + r] = (0..3).map(|c| g.data()[o + c] * T::of(a[r][c])).sum();
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_vec(g.shape(), gx)?);
            }
            Op::AtomMask { x, sizes } => {
                let [_, c, n, w] = check_4d(g, "atom_mask")?;
                let mut gx = g.clone();
                let d = gx.data_mut();
                for (bi, &s) in sizes.iter().enumerate() {
                    for ch in 0..c {
                        let base = ((bi * c + ch) * n) * w;
                        d[base + s * w..base + n * w].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Attention { x, w, sizes, cache } => {
                self.attention_backward(node, *x, w, sizes, cache, g, grads)?;
            }
            Op::MaskedMeanPool { x, sizes } => {
                let [bs, c, n, w] = check_4d(self.value(*x), "adaptive_avg_pool")?;
                let mut gx = vec![T::zero(); bs * c * n * w];
                for (bi, &s) in sizes.iter().enumerate() {
                    let cnt = T::of((s * w) as f64);
                    for ch in 0..c {
                        let gv = g.data()[bi * c + ch] / cnt;
                        let base = ((bi * c + ch) * n) * w;
                        gx[base..base + s * w].iter_mut().for_each(|v| *v = gv);
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&[bs, c, n, w], gx)?);
            }
            Op::DistanceAggregate { x, sizes, mean } => {
                let [bs, _, n, _] = check_4d(self.value(*x), "distance_aggregate")?;
                let xd = self.value(*x).data();
                let mut gx = vec![T::zero(); bs * n * 3];
                for (bi, &s) in sizes.iter().enumerate() {
                    let pos = &xd[bi * n * 3..(bi + 1) * n * 3];
                    let norm = if *mean && s > 1 {
                        T::one() / T::of((s - 1) as f64)
                    } else {
                        T::one()
                    };
                    for i in 0..s {
                        let gi = g.data()[bi * n + i] * norm;
                        for j in 0..s {
                            if i == j {
                                continue;
                            }
                            let d = dist3(&pos[i * 3..i * 3 + 3], &pos[j * 3..j * 3 + 3]);
                            if d <= T::zero() {
                                continue;
                            }
                            for k in 0..3 {
                                let u = (pos[i * 3 + k] - pos[j * 3 + k]) / d * gi;
                                gx[(bi * n + i) * 3 + k] += u;
                                gx[(bi * n + j) * 3 + k] -= u;
                            }
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&[bs, 1, n, 3], gx)?);
            }
            Op::Mds { x, sizes, cache } => {
                let [bs, _, n, _] = check_4d(self.value(*x), "mds_recover")?;
                let xd = self.value(*x).data();
                let mut gx = vec![T::zero(); bs * n * 3];
                for (bi, (&s, mc)) in sizes.iter().zip(cache).enumerate() {
                    debug_assert_eq!(s, mc.n);
                    let pos: Vec<f64> = (0..s * 3).map(|i| xd[bi * n * 3 + i].f64()).collect();
                    let gy: Vec<f64> = (0..s * 3).map(|i| g.data()[bi * n * 3 + i].f64()).collect();
                    let gp = mds_backward(mc, &pos, &gy);
                    for (i, v) in gp.into_iter().enumerate() {
                        gx[bi * n * 3 + i] = T::of(v);
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&[bs, 1, n, 3], gx)?);
            }
            Op::EncoderLoss {
                p,
                p_prime,
                sizes,
                argmax,
            } => {
                let [bs, _, n, w] = check_4d(self.value(*p), "encoder_loss")?;
                let a = self.value(*p).data();
                let b = self.value(*p_prime).data();
                let scale = g.data()[0] / T::of(bs as f64);
                let two = T::of(2.0);
                let mut gpp = vec![T::zero(); a.len()];
                for (bi, &s) in sizes.iter().enumerate() {
                    if s == 0 {
                        continue;
                    }
                    let base = bi * n * w;
                    let per = scale * two / T::of(s as f64);
                    for idx in base..base + s * w {
                        gpp[idx] = per * (b[idx] - a[idx]);
                    }
                    let am = argmax[bi];
                    gpp[am] += scale * two * (b[am] - a[am]);
                }
                if self.rg(*p) {
                    let neg: Vec<T> = gpp.iter().map(|&v| -v).collect();
                    self.send(grads, *p, Tensor::from_vec(self.value(*p).shape(), neg)?);
                }
                self.send(grads, *p_prime, Tensor::from_vec(self.value(*p_prime).shape(), gpp)?);
            }
            Op::MseLoss { x, target } => {
                let scale = g.data()[0] * T::of(2.0) / T::of(target.len() as f64);
                let gx: Vec<T> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&a, &t)| scale * (a - t))
                    .collect();
                self.send(grads, *x, Tensor::from_vec(self.value(*x).shape(), gx)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<T>,
        x: Var,
        w: &[Var; 6],
        sizes: &[usize],
        cache: &[AttnCache<T>],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let [bs, c, n, wd] = check_4d(&node.value, "self_attention")?;
        let d = c * wd;
        let scale = T::one() / T::of(d as f64).sqrt();
        let y = node.value.data();
        let mut gw: Vec<Vec<T>> = (0..6)
            .map(|i| vec![T::zero(); if i % 2 == 0 { d * d } else { d }])
            .collect();
        let mut gx = vec![T::zero(); bs * c * n * wd];
        for (bi, (&s, cc)) in sizes.iter().zip(cache).enumerate() {
            if s == 0 {
                continue;
            }
            // dO = dY * y * (1 - y), gathered to token layout
            let mut go = vec![T::zero(); s * d];
            for ch in 0..c {
                for i in 0..s {
                    for k in 0..wd {
                        let idx = ((bi * c + ch) * n + i) * wd + k;
                        let yy = y[idx];
                        go[i * d + ch * wd + k] = g.data()[idx] * yy * (T::one() - yy);
                    }
                }
            }
            let mut gp = vec![T::zero(); s * s];
            matmul_nt(s, d, s, &go, &cc.v, &mut gp, false);
            let mut gv = vec![T::zero(); s * d];
            matmul_tn(s, s, d, &cc.p, &go, &mut gv, false);
            // softmax backward, then the 1/sqrt(d) scale
            let mut gs = vec![T::zero(); s * s];
            for i in 0..s {
                let row_p = &cc.p[i * s..(i + 1) * s];
                let row_g = &gp[i * s..(i + 1) * s];
                let dot: T = row_p.iter().zip(row_g).map(|(&a, &b)| a * b).sum();
                for j in 0..s {
                    gs[i * s + j] = row_p[j] * (row_g[j] - dot) * scale;
                }
            }
            let mut gq = vec![T::zero(); s * d];
            matmul(s, s, d, &gs, &cc.k, &mut gq, false);
            let mut gk = vec![T::zero(); s * d];
            matmul_tn(s, s, d, &gs, &cc.q, &mut gk, false);

            let mut gtok = vec![T::zero(); s * d];
            for (slot, gproj) in [(0usize, &gq), (2, &gk), (4, &gv)] {
                matmul_tn(d, s, d, &cc.x, gproj, &mut gw[slot], true);
                for row in gproj.chunks(d) {
                    for (a, &v) in gw[slot + 1].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                matmul_nt(s, d, d, gproj, self.value(w[slot]).data(), &mut gtok, true);
            }
            for ch in 0..c {
                for i in 0..s {
                    for k in 0..wd {
                        gx[((bi * c + ch) * n + i) * wd + k] = gtok[i * d + ch * wd + k];
                    }
                }
            }
        }
        for (i, gwi) in gw.into_iter().enumerate() {
            let shape: Vec<usize> = if i % 2 == 0 { vec![d, d] } else { vec![d] };
            self.send(grads, w[i], Tensor::from_vec(&shape, gwi)?);
        }
        self.send(grads, x, Tensor::from_vec(&[bs, c, n, wd], gx)?);
        Ok(())
    }
}

fn dist3<T: Real>(a: &[T], b: &[T]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

// Gradient of p ↦ canonical MDS coordinates. The recovered column k is
// s_k sqrt(λ_k) v_k of B = J p pᵀ J, so first-order eigen perturbation gives
// the gradient with respect to B, and B̄ ↦ p̄ = J (B̄ + B̄ᵀ) J p.
fn mds_backward(mc: &MdsCache, pos: &[f64], gy: &[f64]) -> Vec<f64> {
    let n = mc.n;
    let vec_at = |k: usize, i: usize| mc.vectors[k * n + i];
    let kmax = n.min(3);
    // m[j][k] for the retained columns k
    let mut m = vec![0.0; n * kmax];
    let scale = mc.values.first().copied().unwrap_or(0.0).abs().max(1.0);
    for k in 0..kmax {
        let lam = mc.values[k];
        if lam <= 1e-12 * scale {
            continue;
        }
        let r = lam.sqrt();
        let s = mc.signs[k];
        let gyk: Vec<f64> = (0..n).map(|i| gy[i * 3 + k]).collect();
        let dot_vk: f64 = (0..n).map(|i| vec_at(k, i) * gyk[i]).sum();
        m[k * kmax + k] = s * dot_vk / (2.0 * r);
        for j in 0..n {
            if j == k {
                continue;
            }
            let gap = lam - mc.values[j];
            if gap.abs() <= 1e-12 * scale {
                continue;
            }
            let dot: f64 = (0..n).map(|i| vec_at(j, i) * gyk[i]).sum();
            m[j * kmax + k] = s * r * dot / gap;
        }
    }
    // A = V M V_kᵀ
    let mut a = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..kmax {
            let c = m[j * kmax + k];
            if c == 0.0 {
                continue;
            }
            for r in 0..n {
                let vr = vec_at(j, r) * c;
                for col in 0..n {
                    a[r * n + col] += vr * vec_at(k, col);
                }
            }
        }
    }
    // S = A + Aᵀ, centered on both sides
    let mut sym = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            sym[r * n + c] = a[r * n + c] + a[c * n + r];
        }
    }
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n).map(|r| sym[r * n..(r + 1) * n].iter().sum::<f64>() / nf).collect();
    let col_mean: Vec<f64> = (0..n).map(|c| (0..n).map(|r| sym[r * n + c]).sum::<f64>() / nf).collect();
    let all_mean = row_mean.iter().sum::<f64>() / nf;
    for r in 0..n {
        for c in 0..n {
            sym[r * n + c] += all_mean - row_mean[r] - col_mean[c];
        }
    }
    let mut centroid = [0.0; 3];
    for i in 0..n {
        for k in 0..3 {
            centroid[k] += pos[i * 3 + k] / nf;
        }
    }
    let mut out = vec![0.0; n * 3];
    for r in 0..n {
        for c in 0..n {
            let w = sym[r * n + c];
            for k in 0..3 {
                out[r * 3 + k] += w * (pos[c * 3 + k] - centroid[k]);
            }
        }
    }
    out
}
