//! Adaptive-bins depth head: bin queries cross-attend to the finest pyramid
//! level, emit normalized bin widths, and per-pixel bin probabilities turn
//! centres into a dense metric depth map.

use super::backbone::Pyramid;
use super::{blocks, ArchConfig, Net, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::VarId;

pub struct DepthForward {
    /// [K] normalized bin widths (softmax output).
    pub widths: VarId,
    /// [K] bin centres in metres, strictly increasing.
    pub centers: VarId,
    /// [S, K] per-pixel bin probabilities over the quarter-res grid.
    pub probs: VarId,
    /// [1, H, W] metric depth map at full resolution.
    pub depth_map: VarId,
    /// Quarter-resolution grid size (h, w).
    pub grid: (usize, usize),
}

/// Decoded depth prediction.
#[derive(Clone, Debug)]
pub struct DepthPrediction {
    pub widths: Vec<f64>,
    pub centers: Vec<f64>,
    /// Full-resolution metric depth, row-major.
    pub depth: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

pub(super) fn init_head(b: &mut ParamBuilder, arch: &ArchConfig) {
    let d = arch.embed_dim;
    b.embedding("head.depth.query", arch.depth_bins, d, 0.02);
    blocks::init_embed_stack(b, "head.depth.", arch);
    blocks::init_decoder_layers(b, "head.depth.", arch);
    b.linear("head.depth.width", d, 1);
}

/// Cumulative bin-centre formula: c_k = d_min + (d_max-d_min)*(w_k/2 + sum_{j<k} w_j).
/// Validates that widths are non-negative and sum to 1 within 1e-6.
pub fn bins_to_centers(widths: &[f64], d_min: f64, d_max: f64) -> Result<Vec<f64>> {
    if widths.is_empty() {
        return Err(Error::validation("no bins"));
    }
    let sum: f64 = widths.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!("bin widths sum to {sum}, expected 1")));
    }
    if widths.iter().any(|&w| w < 0.0) {
        return Err(Error::validation("negative bin width"));
    }
    let span = d_max - d_min;
    let mut cum = 0.0;
    Ok(widths
        .iter()
        .map(|&w| {
            let c = d_min + span * (cum + 0.5 * w);
            cum += w;
            c
        })
        .collect())
}

pub fn depth_head_forward(net: &mut Net, pyramid: &Pyramid, out_size: (usize, usize)) -> Result<DepthForward> {
    let arch = net.arch().clone();
    let (d_min, d_max) = arch.depth_range;
    let k = arch.depth_bins;
    let finest = pyramid.levels[0];
    let (embed, gh, gw) = blocks::embed_stack(net, "head.depth.", finest);
    let kv = blocks::flatten_kv(net, finest);
    let mut q = net.p("head.depth.query");
    for l in 0..arch.decoder_layers {
        let (q2, _) = blocks::decoder_layer(net, "head.depth.", l, q, kv);
        q = q2;
    }
    // widths: [K,1] logits -> softmax over K
    let w_logit = net.linear(q, "head.depth.width");
    let w_row = net.tape.transpose(w_logit);
    let w_soft = net.tape.softmax_rows(w_row);
    let widths = net.tape.reshape(w_soft, vec![k]);
    let centers = net.tape.bin_centers(widths, d_min, d_max);

    // per-pixel probabilities over bins
    let pix_logits = net.tape.matmul(q, embed); // [K, S]
    let pix_t = net.tape.transpose(pix_logits); // [S, K]
    let probs = net.tape.softmax_rows(pix_t); // [S, K]
    let centers_col = net.tape.reshape(centers, vec![k, 1]);
    let low = net.tape.matmul(probs, centers_col); // [S, 1]
    let low_map = net.tape.reshape(low, vec![1, gh, gw]);
    let (out_w, out_h) = out_size;
    let depth_map = net.tape.upsample_bilinear(low_map, out_h, out_w);
    Ok(DepthForward { widths, centers, probs, depth_map, grid: (gh, gw) })
}

pub fn decode_depth(net: &Net, fwd: &DepthForward, out_size: (usize, usize)) -> DepthPrediction {
    let (w, h) = out_size;
    DepthPrediction {
        widths: net.tape.val(fwd.widths).data().to_vec(),
        centers: net.tape.val(fwd.centers).data().to_vec(),
        depth: net.tape.val(fwd.depth_map).data().to_vec(),
        width: w,
        height: h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_even_bins() {
        let c = bins_to_centers(&[0.5, 0.5], 0.0, 120.0).unwrap();
        assert_eq!(c, vec![30.0, 90.0]);
    }

    #[test]
    fn single_bin() {
        let c = bins_to_centers(&[1.0], 0.0, 120.0).unwrap();
        assert_eq!(c, vec![60.0]);
    }

    #[test]
    fn widths_must_normalize() {
        assert!(bins_to_centers(&[0.9, 0.9], 0.0, 120.0).is_err());
    }

    #[test]
    fn strictly_increasing_for_positive_widths() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let c = bins_to_centers(&w, 0.1, 130.0).unwrap();
        for i in 1..c.len() {
            assert!(c[i] > c[i - 1]);
        }
        assert!(c[0] > 0.1 && *c.last().unwrap() < 130.0);
    }
}
