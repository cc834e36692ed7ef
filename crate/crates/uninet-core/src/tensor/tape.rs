use super::gemm::{gemm, gemm_at, gemm_bt};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    back: Option<BackFn>,
}

/// Reverse-mode tape. One tape per forward pass; `backward` walks the
/// recorded graph once and returns per-node gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the leaf never influenced the root.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, back: Option<BackFn>) -> VarId {
        self.nodes.push(Node { value, parents, back });
        VarId(self.nodes.len() - 1)
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<VarId>,
        back: Box<dyn Fn(&Tensor) -> Vec<Tensor>>,
    ) -> VarId {
        self.push(value, parents, Some(back))
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, vec![], None)
    }

    pub fn val(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn backward(&self, root: VarId) -> Grads {
        let seed = Tensor::full(self.val(root).shape(), 1.0);
        self.backward_with_seed(root, seed)
    }

    pub fn backward_with_seed(&self, root: VarId, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.val(root).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[pid.0] {
                        Some(acc) => acc.add_scaled(1.0, &pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // leaves keep their gradient
            if node.back.is_none() {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape());
        let out = va.axpy(1.0, vb);
        self.push(out, vec![a, b], Some(Box::new(|g: &Tensor| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape());
        let out = va.axpy(-1.0, vb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let da = g.data().iter().zip(vb.data().iter()).map(|(&gv, &y)| gv * y).collect();
                let db = g.data().iter().zip(va.data().iter()).map(|(&gv, &x)| gv * x).collect();
                vec![
                    Tensor::new(g.shape().to_vec(), da),
                    Tensor::new(g.shape().to_vec(), db),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let out = self.val(a).map(|v| v * s);
        self.push(out, vec![a], Some(Box::new(move |g: &Tensor| vec![g.map(|v| v * s)])))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.val(a).map(|v| v + c);
        self.push(out, vec![a], Some(Box::new(|g: &Tensor| vec![g.clone()])))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.scale(a, -1.0)
    }

    /// Elementwise affine map: out = mul * x + add.
    pub fn map_affine(&mut self, a: VarId, mul: f64, add: f64) -> VarId {
        let out = self.val(a).map(|v| mul * v + add);
        self.push(out, vec![a], Some(Box::new(move |g: &Tensor| vec![g.map(|v| v * mul)])))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.val(a).map(sigmoid_scalar);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data().iter())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let out = self.val(a).map(f64::exp);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g.data().iter().zip(y.data().iter()).map(|(&gv, &e)| gv * e).collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(f64::ln);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g.data().iter().zip(va.data().iter()).map(|(&gv, &x)| gv / x).collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    /// sqrt(max(x, 0)); gradient defined 0 at and below zero.
    pub fn sqrt_floor(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(|v| if v > 0.0 { v.sqrt() } else { 0.0 });
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data().iter())
                    .zip(va.data().iter())
                    .map(|((&gv, &s), &x)| if x > 0.0 { gv / (2.0 * s) } else { 0.0 })
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(|v| v * v);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .map(|(&gv, &x)| gv * 2.0 * x)
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(f64::abs);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .map(|(&gv, &x)| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    /// Elementwise reciprocal; caller keeps inputs away from zero.
    pub fn recip(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(|v| 1.0 / v);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .map(|(&gv, &x)| -gv / (x * x))
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let out = va.map(softplus_scalar);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .map(|(&gv, &x)| gv * sigmoid_scalar(x))
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), d)]
            })),
        )
    }

    // ---- reductions & shaping ----

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        let s: f64 = va.data().iter().sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![Tensor::full(&shape, g.item())])),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.val(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let out = self.val(a).reshaped(shape);
        let orig = self.val(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![g.reshaped(orig.clone())])),
        )
    }

    /// Row selection on the leading axis: out[i] = a[idx[i]].
    pub fn select_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let va = self.val(a).clone();
        let shape = va.shape().to_vec();
        assert!(!shape.is_empty());
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < shape[0]);
            data.extend_from_slice(&va.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let idx_owned: Vec<usize> = idx.to_vec();
        self.push(
            Tensor::new(out_shape, data),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut d = vec![0.0; shape.iter().product()];
                for (k, &i) in idx_owned.iter().enumerate() {
                    for j in 0..row {
                        d[i * row + j] += g.data()[k * row + j];
                    }
                }
                vec![Tensor::new(shape.clone(), d)]
            })),
        )
    }

    /// Concatenate two matrices along columns: [m,p] ++ [m,q] -> [m,p+q].
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, p) = (va.shape()[0], va.shape()[1]);
        let q = vb.shape()[1];
        assert_eq!(vb.shape()[0], m);
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&vb.data()[i * q..(i + 1) * q]);
        }
        self.push(
            Tensor::new(vec![m, p + q], data),
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let mut da = vec![0.0; m * p];
                let mut db = vec![0.0; m * q];
                for i in 0..m {
                    da[i * p..(i + 1) * p].copy_from_slice(&g.data()[i * (p + q)..i * (p + q) + p]);
                    db[i * q..(i + 1) * q]
                        .copy_from_slice(&g.data()[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                vec![Tensor::new(vec![m, p], da), Tensor::new(vec![m, q], db)]
            })),
        )
    }

    /// Column slice of a matrix: out = a[:, from..to].
    pub fn slice_cols(&mut self, a: VarId, from: usize, to: usize) -> VarId {
        let va = self.val(a).clone();
        assert_eq!(va.shape().len(), 2);
        let (m, d) = (va.shape()[0], va.shape()[1]);
        assert!(from < to && to <= d);
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * d + from..i * d + to]);
        }
        self.push(
            Tensor::new(vec![m, w], data),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut da = vec![0.0; m * d];
                for i in 0..m {
                    da[i * d + from..i * d + to].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Tensor::new(vec![m, d], da)]
            })),
        )
    }

    /// Matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a).clone(), self.val(b).clone());
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        assert_eq!(vb.shape()[0], k, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), vb.data(), &mut out, 1.0, 0.0);
        self.push(
            Tensor::new(vec![m, n], out),
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let mut da = vec![0.0; m * k];
                gemm_bt(m, n, k, g.data(), vb.data(), &mut da, 1.0, 0.0);
                let mut db = vec![0.0; k * n];
                gemm_at(k, m, n, va.data(), g.data(), &mut db, 1.0, 0.0);
                vec![Tensor::new(vec![m, k], da), Tensor::new(vec![k, n], db)]
            })),
        )
    }

    /// Add a row vector [n] to every row of [m,n].
    pub fn add_row_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let (va, vb) = (self.val(a).clone(), self.val(bias).clone());
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        assert_eq!(vb.shape(), &[n]);
        let mut data = va.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += vb.data()[j];
            }
        }
        self.push(
            Tensor::new(vec![m, n], data),
            vec![a, bias],
            Some(Box::new(move |g: &Tensor| {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.data()[i * n + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![n], db)]
            })),
        )
    }

    /// Row-wise softmax of [m,n].
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_slice(&va.data()[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let y = Tensor::new(vec![m, n], data);
        let yc = y.clone();
        self.push(
            y,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let ys = &yc.data()[i * n..(i + 1) * n];
                    let gs = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = ys.iter().zip(gs.iter()).map(|(&y, &gv)| y * gv).sum();
                    for j in 0..n {
                        d[i * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Tensor::new(vec![m, n], d)]
            })),
        )
    }

    /// Row-wise log-softmax of [m,n].
    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; m * n];
        let mut soft = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
                soft[i * n + j] = (row[j] - lse).exp();
            }
        }
        let soft = Tensor::new(vec![m, n], soft);
        self.push(
            Tensor::new(vec![m, n], data),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let gs = &g.data()[i * n..(i + 1) * n];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..n {
                        d[i * n + j] = gs[j] - soft.data()[i * n + j] * gsum;
                    }
                }
                vec![Tensor::new(vec![m, n], d)]
            })),
        )
    }

    /// Sum each row of [m,n] -> [m].
    pub fn sum_rows(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let data: Vec<f64> = (0..m).map(|i| va.data()[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(
            Tensor::new(vec![m], data),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g.data()[i];
                    }
                }
                vec![Tensor::new(vec![m, n], d)]
            })),
        )
    }

    /// Scale row i of a [m,n] matrix by s[i].
    pub fn mul_rows(&mut self, a: VarId, s: VarId) -> VarId {
        let (va, vs) = (self.val(a).clone(), self.val(s).clone());
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        assert_eq!(vs.shape(), &[m]);
        let mut data = va.data().to_vec();
        for i in 0..m {
            let f = vs.data()[i];
            for v in &mut data[i * n..(i + 1) * n] {
                *v *= f;
            }
        }
        self.push(
            Tensor::new(vec![m, n], data),
            vec![a, s],
            Some(Box::new(move |g: &Tensor| {
                let mut da = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for i in 0..m {
                    let f = vs.data()[i];
                    for j in 0..n {
                        da[i * n + j] = g.data()[i * n + j] * f;
                        ds[i] += g.data()[i * n + j] * va.data()[i * n + j];
                    }
                }
                vec![Tensor::new(vec![m, n], da), Tensor::new(vec![m], ds)]
            })),
        )
    }

    /// Matrix transpose [m,n] -> [n,m].
    pub fn transpose(&mut self, a: VarId) -> VarId {
        let va = self.val(a).clone();
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], data),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut d = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        d[i * n + j] = g.data()[j * m + i];
                    }
                }
                vec![Tensor::new(vec![m, n], d)]
            })),
        )
    }

    /// Bin centers from normalized widths: c_k = lo + span*(w_k/2 + sum_{j<k} w_j).
    pub fn bin_centers(&mut self, widths: VarId, lo: f64, hi: f64) -> VarId {
        let w = self.val(widths).clone();
        assert_eq!(w.shape().len(), 1);
        let k = w.shape()[0];
        let span = hi - lo;
        let mut cum = 0.0;
        let mut centers = Vec::with_capacity(k);
        for &wi in w.data() {
            centers.push(lo + span * (cum + 0.5 * wi));
            cum += wi;
        }
        self.push(
            Tensor::new(vec![k], centers),
            vec![widths],
            Some(Box::new(move |g: &Tensor| {
                // dc_k/dw_j = span * (1 if j<k else 0.5 if j==k else 0)
                let mut d = vec![0.0; k];
                let mut suffix = 0.0;
                for j in (0..k).rev() {
                    d[j] = span * (0.5 * g.data()[j] + suffix);
                    suffix += g.data()[j];
                }
                vec![Tensor::new(vec![k], d)]
            })),
        )
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
