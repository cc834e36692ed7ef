//! Mask2Former-flavoured instance segmentation head, simplified: queries
//! cross-attend to the finest pyramid level only and emit masks as inner
//! products with a per-pixel embedding.

use super::backbone::Pyramid;
use super::{blocks, ArchConfig, Net, ParamBuilder};
use crate::error::Result;
use crate::scenegen::Mask;
use crate::tensor::{Tensor, VarId};

pub struct SegForward {
    /// [N_q, C+1] class logits; last column is "no object".
    pub cls_logits: VarId,
    /// [N_q, S] mask logits over the quarter-resolution grid.
    pub mask_logits: VarId,
    /// Quarter-resolution grid size (h, w).
    pub grid: (usize, usize),
    /// Attention maps per decoder layer, [N_q, S] each (values, for tests).
    pub attn: Vec<Tensor>,
}

/// One decoded instance prediction.
#[derive(Clone, Debug)]
pub struct SegPrediction {
    pub class_id: usize,
    pub score: f64,
    /// Soft mask in [0,1] at full image resolution.
    pub mask: Vec<f32>,
    pub width: usize,
    pub height: usize,
}

impl SegPrediction {
    pub fn binarized(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.mask.iter().map(|&v| v >= 0.5).collect(),
        }
    }
}

pub(super) fn init_head(b: &mut ParamBuilder, arch: &ArchConfig) {
    let d = arch.embed_dim;
    b.embedding("head.seg.query", arch.seg_queries, d, 0.02);
    blocks::init_embed_stack(b, "head.seg.", arch);
    blocks::init_decoder_layers(b, "head.seg.", arch);
    b.linear("head.seg.cls", d, arch.class_count + 1);
}

pub fn seg_head_forward(net: &mut Net, pyramid: &Pyramid) -> Result<SegForward> {
    let arch = net.arch().clone();
    let finest = pyramid.levels[0];
    let (embed, gh, gw) = blocks::embed_stack(net, "head.seg.", finest);
    let kv = blocks::flatten_kv(net, finest);
    let mut q = net.p("head.seg.query");
    let mut attn_maps = Vec::with_capacity(arch.decoder_layers);
    for l in 0..arch.decoder_layers {
        let (q2, attn) = blocks::decoder_layer(net, "head.seg.", l, q, kv);
        q = q2;
        attn_maps.push(net.tape.val(attn).clone());
    }
    let cls_logits = net.linear(q, "head.seg.cls");
    let mask_logits = net.tape.matmul(q, embed);
    Ok(SegForward { cls_logits, mask_logits, grid: (gh, gw), attn: attn_maps })
}

/// Decode head outputs into scored per-instance soft masks at full
/// resolution. Queries whose best class is "no object" or whose confidence
/// falls below `min_score` are dropped.
pub fn decode_segmentation(
    arch: &ArchConfig,
    cls_logits: &Tensor,
    mask_logits: &Tensor,
    grid: (usize, usize),
    out_size: (usize, usize),
    min_score: f64,
) -> Vec<SegPrediction> {
    let nq = arch.seg_queries;
    let ncls = arch.class_count + 1;
    assert_eq!(cls_logits.shape(), &[nq, ncls]);
    let (gh, gw) = grid;
    let (w, h) = out_size;
    let mut out = Vec::new();
    for i in 0..nq {
        let mut probs = vec![0.0; ncls];
        crate::tensor::softmax_slice(&cls_logits.data()[i * ncls..(i + 1) * ncls], &mut probs);
        let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (k, &p) in probs.iter().enumerate() {
            if p > best_p {
                best_p = p;
                best = k;
            }
        }
        if best == arch.class_count || best_p < min_score {
            continue;
        }
        let logits = &mask_logits.data()[i * gh * gw..(i + 1) * gh * gw];
        let low: Vec<f64> = logits.iter().map(|&z| crate::tensor::sigmoid_scalar(z)).collect();
        let up = crate::resize::resize_f64(&low, gw, gh, w, h);
        out.push(SegPrediction {
            class_id: best,
            score: best_p,
            mask: up.iter().map(|&v| v as f32).collect(),
            width: w,
            height: h,
        });
    }
    out
}
