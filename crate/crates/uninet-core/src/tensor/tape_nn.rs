//! Convolution, pooling, resampling, normalization and projective feature
//! sampling as tape ops. Layouts: feature maps are [C, H, W]; weights are
//! [O, C, kh, kw]; query matrices are [N, D].

use super::gemm::{gemm, gemm_at, gemm_bt};
use super::tape::{Tape, VarId};
use super::Tensor;

/// Pinhole intrinsics plus the fixed vehicle->camera extrinsic
/// (x_cam = -y_veh, y_cam = -z_veh, z_cam = x_veh).
#[derive(Clone, Copy, Debug)]
pub struct PinholeProj {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

pub(crate) const BEHIND_EPS: f64 = 1e-6;

impl PinholeProj {
    /// Returns (u, v, depth) or None when the point is behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let (xc, yc, zc) = (-p[1], -p[2], p[0]);
        if zc <= BEHIND_EPS {
            return None;
        }
        Some((self.fx * xc / zc + self.cx, self.fy * yc / zc + self.cy, zc))
    }

    fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let ow = ho * wo;
    debug_assert_eq!(col.len(), c * kh * kw * ow);
    let mut r = 0usize;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[r * ow..(r + 1) * ow];
                r += 1;
                let mut idx = 0usize;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..wo {
                            dst[idx] = 0.0;
                            idx += 1;
                        }
                        continue;
                    }
                    let row = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[idx] = if ix < 0 || ix >= w as isize { 0.0 } else { row[ix as usize] };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let ow = ho * wo;
    let mut r = 0usize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[r * ow..(r + 1) * ow];
                r += 1;
                let mut idx = 0usize;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += wo;
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2D convolution: x [C,H,W], w [O,C,kh,kw], b [O] -> [O,Ho,Wo].
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let vx = self.val(x).clone();
        let vw = self.val(w).clone();
        let vb = self.val(b).clone();
        let (c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (o, cin, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(c, cin, "conv2d channel mismatch");
        assert_eq!(vb.shape(), &[o]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let ckk = c * kh * kw;
        let ow = ho * wo;
        let mut col = vec![0.0; ckk * ow];
        im2col(vx.data(), c, h, wd, kh, kw, stride, pad, &mut col);
        let mut out = vec![0.0; o * ow];
        gemm(o, ckk, ow, vw.data(), &col, &mut out, 1.0, 0.0);
        for oc in 0..o {
            let bias = vb.data()[oc];
            for v in &mut out[oc * ow..(oc + 1) * ow] {
                *v += bias;
            }
        }
        drop(col); // recomputed in backward to keep tapes small
        self.push_nn(
            Tensor::new(vec![o, ho, wo], out),
            vec![x, w, b],
            Box::new(move |g: &Tensor| {
                let mut col = vec![0.0; ckk * ow];
                im2col(vx.data(), c, h, wd, kh, kw, stride, pad, &mut col);
                // dW = g [o,ow] * col^T [ow,ckk]
                let mut dw = vec![0.0; o * ckk];
                gemm_bt(o, ow, ckk, g.data(), &col, &mut dw, 1.0, 0.0);
                // dcol = W^T [ckk,o] * g [o,ow]
                let mut dcol = vec![0.0; ckk * ow];
                gemm_at(ckk, o, ow, vw.data(), g.data(), &mut dcol, 1.0, 0.0);
                let mut dx = vec![0.0; c * h * wd];
                col2im(&dcol, c, h, wd, kh, kw, stride, pad, &mut dx);
                let mut db = vec![0.0; o];
                for oc in 0..o {
                    db[oc] = g.data()[oc * ow..(oc + 1) * ow].iter().sum();
                }
                vec![
                    Tensor::new(vec![c, h, wd], dx),
                    Tensor::new(vec![o, cin, kh, kw], dw),
                    Tensor::new(vec![o], db),
                ]
            }),
        )
    }

    /// 2x2 max pooling with stride 2 (even H, W required).
    pub fn maxpool2(&mut self, x: VarId) -> VarId {
        let vx = self.val(x).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0u32; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if vx.data()[idx] > best {
                                best = vx.data()[idx];
                                bi = idx as u32;
                            }
                        }
                    }
                    out[ci * ho * wo + oy * wo + ox] = best;
                    arg[ci * ho * wo + oy * wo + ox] = bi;
                }
            }
        }
        self.push_nn(
            Tensor::new(vec![c, ho, wo], out),
            vec![x],
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; c * h * w];
                for (gi, &ai) in g.data().iter().zip(arg.iter()) {
                    dx[ai as usize] += gi;
                }
                vec![Tensor::new(vec![c, h, w], dx)]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: VarId) -> VarId {
        let vx = self.val(x).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xk in 0..wo {
                    out[ci * ho * wo + y * wo + xk] = vx.data()[ci * h * w + (y / 2) * w + xk / 2];
                }
            }
        }
        self.push_nn(
            Tensor::new(vec![c, ho, wo], out),
            vec![x],
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..ho {
                        for xk in 0..wo {
                            dx[ci * h * w + (y / 2) * w + xk / 2] +=
                                g.data()[ci * ho * wo + y * wo + xk];
                        }
                    }
                }
                vec![Tensor::new(vec![c, h, w], dx)]
            }),
        )
    }

    /// Bilinear resize of [C,h,w] to [C,H,W] (half-pixel-centres convention).
    pub fn upsample_bilinear(&mut self, x: VarId, out_h: usize, out_w: usize) -> VarId {
        let vx = self.val(x).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let ys = axis_table(h, out_h);
        let xs = axis_table(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            let src = &vx.data()[ci * h * w..(ci + 1) * h * w];
            let dst = &mut out[ci * out_h * out_w..(ci + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let a = src[y0 * w + x0];
                    let b = src[y0 * w + x1];
                    let cc = src[y1 * w + x0];
                    let d = src[y1 * w + x1];
                    dst[oy * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * a + fx * b)
                        + fy * ((1.0 - fx) * cc + fx * d);
                }
            }
        }
        let (ys2, xs2) = (ys, xs);
        self.push_nn(
            Tensor::new(vec![c, out_h, out_w], out),
            vec![x],
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    let gsrc = &g.data()[ci * out_h * out_w..(ci + 1) * out_h * out_w];
                    let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys2.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs2.iter().enumerate() {
                            let gv = gsrc[oy * out_w + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Tensor::new(vec![c, h, w], dx)]
            }),
        )
    }

    /// Layer norm over the channel axis of [C,H,W], per spatial position.
    pub fn layernorm_channels(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let vx = self.val(x).clone();
        let vg = self.val(gamma).clone();
        let vb = self.val(beta).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(vg.shape(), &[c]);
        assert_eq!(vb.shape(), &[c]);
        let s = h * w;
        let eps = 1e-6;
        let mut out = vec![0.0; c * s];
        let mut xhat = vec![0.0; c * s];
        let mut inv_std = vec![0.0; s];
        for p in 0..s {
            let mut mean = 0.0;
            for ci in 0..c {
                mean += vx.data()[ci * s + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = vx.data()[ci * s + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[p] = istd;
            for ci in 0..c {
                let xh = (vx.data()[ci * s + p] - mean) * istd;
                xhat[ci * s + p] = xh;
                out[ci * s + p] = vg.data()[ci] * xh + vb.data()[ci];
            }
        }
        let xhat = Tensor::new(vec![c, s], xhat);
        self.push_nn(
            Tensor::new(vec![c, h, w], out),
            vec![x, gamma, beta],
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; c * s];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for p in 0..s {
                    let mut m1 = 0.0; // mean of gamma*g
                    let mut m2 = 0.0; // mean of gamma*g*xhat
                    for ci in 0..c {
                        let gg = vg.data()[ci] * g.data()[ci * s + p];
                        m1 += gg;
                        m2 += gg * xhat.data()[ci * s + p];
                        dgamma[ci] += g.data()[ci * s + p] * xhat.data()[ci * s + p];
                        dbeta[ci] += g.data()[ci * s + p];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for ci in 0..c {
                        let gg = vg.data()[ci] * g.data()[ci * s + p];
                        dx[ci * s + p] = (gg - m1 - xhat.data()[ci * s + p] * m2) * inv_std[p];
                    }
                }
                vec![
                    Tensor::new(vec![c, h, w], dx),
                    Tensor::new(vec![c], dgamma),
                    Tensor::new(vec![c], dbeta),
                ]
            }),
        )
    }

    /// Layer norm over the last axis of [N,D], per row.
    pub fn layernorm_rows(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let vx = self.val(x).clone();
        let vg = self.val(gamma).clone();
        let vb = self.val(beta).clone();
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vg.shape(), &[d]);
        assert_eq!(vb.shape(), &[d]);
        let eps = 1e-6;
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let xhat = Tensor::new(vec![n, d], xhat);
        self.push_nn(
            Tensor::new(vec![n, d], out),
            vec![x, gamma, beta],
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let gg = vg.data()[j] * g.data()[i * d + j];
                        m1 += gg;
                        m2 += gg * xhat.data()[i * d + j];
                        dgamma[j] += g.data()[i * d + j] * xhat.data()[i * d + j];
                        dbeta[j] += g.data()[i * d + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let gg = vg.data()[j] * g.data()[i * d + j];
                        dx[i * d + j] = (gg - m1 - xhat.data()[i * d + j] * m2) * inv_std[i];
                    }
                }
                vec![
                    Tensor::new(vec![n, d], dx),
                    Tensor::new(vec![d], dgamma),
                    Tensor::new(vec![d], dbeta),
                ]
            }),
        )
    }

    /// DETR3D-style projective sampling: project each vehicle-frame point,
    /// bilinearly sample every pyramid level at the projected position and
    /// sum over levels. Out-of-view points contribute zero (and receive no
    /// gradient). levels: four [C,Hl,Wl] maps; points: [N,3]; strides in
    /// image pixels per level cell.
    pub fn sample_pyramid(
        &mut self,
        levels: [VarId; 4],
        points: VarId,
        proj: PinholeProj,
        strides: [usize; 4],
    ) -> VarId {
        let lv: Vec<Tensor> = levels.iter().map(|&l| self.val(l).clone()).collect();
        let vp = self.val(points).clone();
        assert_eq!(vp.shape().len(), 2);
        assert_eq!(vp.shape()[1], 3);
        let n = vp.shape()[0];
        let c = lv[0].shape()[0];
        for l in &lv {
            assert_eq!(l.shape()[0], c);
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let p = [vp.data()[i * 3], vp.data()[i * 3 + 1], vp.data()[i * 3 + 2]];
            let Some((u, v, _)) = proj.project(p) else { continue };
            if !proj.in_image(u, v) {
                continue;
            }
            for (li, lt) in lv.iter().enumerate() {
                let (hl, wl) = (lt.shape()[1], lt.shape()[2]);
                let (iy, fy) = clamp_cell(v / strides[li] as f64, hl);
                let (ix, fx) = clamp_cell(u / strides[li] as f64, wl);
                let (y0, y1) = (iy, (iy + 1).min(hl - 1));
                let (x0, x1) = (ix, (ix + 1).min(wl - 1));
                for ch in 0..c {
                    let base = ch * hl * wl;
                    let a = lt.data()[base + y0 * wl + x0];
                    let b = lt.data()[base + y0 * wl + x1];
                    let cc = lt.data()[base + y1 * wl + x0];
                    let d = lt.data()[base + y1 * wl + x1];
                    out[i * c + ch] +=
                        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d);
                }
            }
        }
        let mut parents = levels.to_vec();
        parents.push(points);
        self.push_nn(
            Tensor::new(vec![n, c], out),
            parents,
            Box::new(move |g: &Tensor| {
                let mut dl: Vec<Vec<f64>> = lv.iter().map(|l| vec![0.0; l.numel()]).collect();
                let mut dp = vec![0.0; n * 3];
                for i in 0..n {
                    let p = [vp.data()[i * 3], vp.data()[i * 3 + 1], vp.data()[i * 3 + 2]];
                    let Some((u, v, _)) = proj.project(p) else { continue };
                    if !proj.in_image(u, v) {
                        continue;
                    }
                    let zc = p[0];
                    // du/d(x,y,z)_veh and dv/d(x,y,z)_veh
                    let du = [proj.fx * p[1] / (zc * zc), -proj.fx / zc, 0.0];
                    let dv = [proj.fy * p[2] / (zc * zc), 0.0, -proj.fy / zc];
                    for (li, lt) in lv.iter().enumerate() {
                        let (hl, wl) = (lt.shape()[1], lt.shape()[2]);
                        let inv_s = 1.0 / strides[li] as f64;
                        let (iy, fy) = clamp_cell(v * inv_s, hl);
                        let (ix, fx) = clamp_cell(u * inv_s, wl);
                        let (y0, y1) = (iy, (iy + 1).min(hl - 1));
                        let (x0, x1) = (ix, (ix + 1).min(wl - 1));
                        let mut dval_dfx = 0.0;
                        let mut dval_dfy = 0.0;
                        for ch in 0..c {
                            let gv = g.data()[i * c + ch];
                            let base = ch * hl * wl;
                            let a = lt.data()[base + y0 * wl + x0];
                            let b = lt.data()[base + y0 * wl + x1];
                            let cc = lt.data()[base + y1 * wl + x0];
                            let d = lt.data()[base + y1 * wl + x1];
                            dl[li][base + y0 * wl + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dl[li][base + y0 * wl + x1] += gv * (1.0 - fy) * fx;
                            dl[li][base + y1 * wl + x0] += gv * fy * (1.0 - fx);
                            dl[li][base + y1 * wl + x1] += gv * fy * fx;
                            dval_dfx += gv * ((1.0 - fy) * (b - a) + fy * (d - cc));
                            dval_dfy += gv * ((1.0 - fx) * (cc - a) + fx * (d - b));
                        }
                        for ax in 0..3 {
                            dp[i * 3 + ax] +=
                                dval_dfx * inv_s * du[ax] + dval_dfy * inv_s * dv[ax];
                        }
                    }
                }
                let mut grads: Vec<Tensor> = dl
                    .into_iter()
                    .zip(lv.iter())
                    .map(|(d, l)| Tensor::new(l.shape().to_vec(), d))
                    .collect();
                grads.push(Tensor::new(vec![n, 3], dp));
                grads
            }),
        )
    }

    fn push_nn(
        &mut self,
        value: Tensor,
        parents: Vec<VarId>,
        back: Box<dyn Fn(&Tensor) -> Vec<Tensor>>,
    ) -> VarId {
        // route through the canonical constructor in tape.rs
        self.push_node(value, parents, back)
    }
}

/// Clamp a continuous grid coordinate to a bilinear cell (i0, frac). Past
/// the last cell centre both corners collapse to the border cell, which makes
/// the sampled value constant there (zero gradient w.r.t. position).
fn clamp_cell(pos: f64, len: usize) -> (usize, f64) {
    if pos <= 0.0 {
        return (0, 0.0);
    }
    let max = (len - 1) as f64;
    if pos >= max {
        return (len - 1, 0.0);
    }
    let i = pos.floor() as usize;
    (i, pos - i as f64)
}

/// Source index/weight table for a bilinear resize along one axis
/// (half-pixel-centres, clamped).
pub(crate) fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            if pos <= 0.0 {
                (0, 0, 0.0)
            } else if pos >= (src - 1) as f64 {
                (src - 1, src - 1, 0.0)
            } else {
                let i0 = pos.floor() as usize;
                (i0, i0 + 1, pos - i0 as f64)
            }
        })
        .collect()
}
