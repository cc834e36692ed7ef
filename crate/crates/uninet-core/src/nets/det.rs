//! DETR3D-style detection head: learned queries carry 3D reference points,
//! gather pyramid features at their projections, and iteratively refine.

use serde::{Deserialize, Serialize};

use super::backbone::Pyramid;
use super::{ArchConfig, Net, ParamBuilder};
use crate::error::Result;
use crate::scenegen::{Box3D, CameraModel};
use crate::tensor::{Tensor, VarId};

/// Scale applied to the sigmoid-centred refinement delta in logit space.
const REFINE_SCALE: f64 = 2.0;

pub struct DetForward {
    /// [N_q, C] sigmoid-semantics class logits.
    pub cls_logits: VarId,
    /// [N_q, 8]: normalized center (3), log-dims (3), sin/cos yaw (2).
    pub box_params: VarId,
    /// [N_q, 3] final normalized reference points (values, for tests).
    pub final_refs: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection3D {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub class_id: usize,
}

pub(super) fn init_head(b: &mut ParamBuilder, arch: &ArchConfig) {
    let d = arch.embed_dim;
    b.embedding("head.det.query", arch.det_queries, d, 0.02);
    b.uniform_logits("head.det.ref_logit", arch.det_queries, 3);
    for l in 0..arch.decoder_layers {
        b.linear(&format!("head.det.layer{l}.mlp1"), d + arch.fpn_channels, d);
        b.linear(&format!("head.det.layer{l}.mlp2"), d, d);
        b.layernorm(&format!("head.det.layer{l}.ln"), d);
        b.linear(&format!("head.det.layer{l}.refine"), d, 3);
    }
    b.linear_with_bias("head.det.cls", d, arch.class_count, -2.0);
    b.linear("head.det.center", d, 3);
    b.linear("head.det.dims", d, 3);
    b.linear("head.det.yaw", d, 2);
}

fn range_tensors(arch: &ArchConfig, n: usize) -> (Tensor, Tensor) {
    let r = &arch.det_range;
    let lo = [r.x.0, r.y.0, r.z.0];
    let span = [r.x.1 - r.x.0, r.y.1 - r.y.0, r.z.1 - r.z.0];
    let mut lo_data = Vec::with_capacity(n * 3);
    let mut span_data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        lo_data.extend_from_slice(&lo);
        span_data.extend_from_slice(&span);
    }
    (Tensor::new(vec![n, 3], lo_data), Tensor::new(vec![n, 3], span_data))
}

pub fn det_head_forward(net: &mut Net, pyramid: &Pyramid, camera: &CameraModel) -> Result<DetForward> {
    let arch = net.arch().clone();
    let nq = arch.det_queries;
    let (lo_t, span_t) = range_tensors(&arch, nq);
    let lo = net.leaf(lo_t);
    let span = net.leaf(span_t);
    let proj = camera.proj();

    let mut q = net.p("head.det.query");
    let mut ref_logit = net.p("head.det.ref_logit");
    for l in 0..arch.decoder_layers {
        let r = net.tape.sigmoid(ref_logit);
        let scaled = net.tape.mul(r, span);
        let pts = net.tape.add(scaled, lo);
        let feat = net.tape.sample_pyramid(pyramid.levels, pts, proj, pyramid.strides);
        let cat = net.tape.concat_cols(q, feat);
        let h = net.linear(cat, &format!("head.det.layer{l}.mlp1"));
        let h = net.tape.relu(h);
        let h = net.linear(h, &format!("head.det.layer{l}.mlp2"));
        let sum = net.tape.add(q, h);
        q = net.ln_rows(sum, &format!("head.det.layer{l}.ln"));
        let raw = net.linear(q, &format!("head.det.layer{l}.refine"));
        let sig = net.tape.sigmoid(raw);
        let centered = net.tape.add_scalar(sig, -0.5);
        let delta = net.tape.scale(centered, REFINE_SCALE);
        ref_logit = net.tape.add(ref_logit, delta);
    }

    let cls_logits = net.linear(q, "head.det.cls");
    let center_off = net.linear(q, "head.det.center");
    let center_logit = net.tape.add(ref_logit, center_off);
    let center_norm = net.tape.sigmoid(center_logit);
    let dims = net.linear(q, "head.det.dims");
    let yaw = net.linear(q, "head.det.yaw");
    let cd = net.tape.concat_cols(center_norm, dims);
    let box_params = net.tape.concat_cols(cd, yaw);
    let final_refs = {
        let t = net.tape.sigmoid(ref_logit);
        net.tape.val(t).clone()
    };
    Ok(DetForward { cls_logits, box_params, final_refs })
}

/// Decode raw head outputs into world-frame scored boxes (one per query).
pub fn decode_detections(arch: &ArchConfig, cls_logits: &Tensor, box_params: &Tensor) -> Vec<Detection3D> {
    let nq = arch.det_queries;
    let c = arch.class_count;
    assert_eq!(cls_logits.shape(), &[nq, c]);
    assert_eq!(box_params.shape(), &[nq, 8]);
    let r = &arch.det_range;
    let lo = [r.x.0, r.y.0, r.z.0];
    let span = [r.x.1 - r.x.0, r.y.1 - r.y.0, r.z.1 - r.z.0];
    let mut out = Vec::with_capacity(nq);
    for i in 0..nq {
        let logits = &cls_logits.data()[i * c..(i + 1) * c];
        let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (k, &z) in logits.iter().enumerate() {
            if z > best_p {
                best_p = z;
                best = k;
            }
        }
        let score = crate::tensor::sigmoid_scalar(best_p);
        let b = &box_params.data()[i * 8..(i + 1) * 8];
        let center = [
            lo[0] + b[0] * span[0],
            lo[1] + b[1] * span[1],
            lo[2] + b[2] * span[2],
        ];
        let size = [b[3].exp(), b[4].exp(), b[5].exp()];
        let yaw = b[6].atan2(b[7]);
        out.push(Detection3D {
            bbox: Box3D { center, size, yaw, class_id: best },
            score,
            class_id: best,
        });
    }
    out
}

/// Encode a GT box into the 8-dim regression target layout.
pub fn encode_box_target(arch: &ArchConfig, b: &Box3D) -> [f64; 8] {
    let r = &arch.det_range;
    let lo = [r.x.0, r.y.0, r.z.0];
    let span = [r.x.1 - r.x.0, r.y.1 - r.y.0, r.z.1 - r.z.0];
    [
        (b.center[0] - lo[0]) / span[0],
        (b.center[1] - lo[1]) / span[1],
        (b.center[2] - lo[2]) / span[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}
