use super::{ArchConfig, FpnLevels, Net, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::VarId;

/// Four multi-scale feature maps, finest first, strides halving per level.
pub struct Pyramid {
    pub levels: [VarId; 4],
    pub strides: [usize; 4],
}

pub(super) fn init_trunk(b: &mut ParamBuilder, arch: &ArchConfig) {
    let w = arch.widths;
    b.conv("backbone.stem.conv1", w[0], 3, 3);
    b.layernorm("backbone.stem.ln1", w[0]);
    b.conv("backbone.stem.conv2", w[0], w[0], 3);
    b.layernorm("backbone.stem.ln2", w[0]);
    for i in 1..4 {
        b.conv(&format!("backbone.stage{i}.down"), w[i], w[i - 1], 3);
        b.layernorm(&format!("backbone.stage{i}.ln_down"), w[i]);
        b.conv(&format!("backbone.stage{i}.conv"), w[i], w[i], 3);
        b.layernorm(&format!("backbone.stage{i}.ln_conv"), w[i]);
    }
    let lat_from = match arch.fpn_levels {
        FpnLevels::P2P5 => 0,
        FpnLevels::P3P6 => 1,
    };
    for (ci, &cw) in w.iter().enumerate().skip(lat_from) {
        b.conv(&format!("fpn.lateral{}", ci + 2), arch.fpn_channels, cw, 1);
        b.conv(&format!("fpn.smooth{}", ci + 2), arch.fpn_channels, arch.fpn_channels, 3);
    }
}

/// Backbone stages C2..C5 at strides 4..32, then an FPN top-down pathway with
/// 1x1 laterals and 3x3 smoothing. In P3P6 mode the extra P6 level is a
/// stride-2 max-pool of P5.
pub fn backbone_fpn_forward(net: &mut Net, image: VarId) -> Result<Pyramid> {
    let shape = net.tape.val(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("expected [3,H,W] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::shape(format!("image {w}x{h} not divisible by 64")));
    }

    let x = net.conv(image, "backbone.stem.conv1", 2, 1);
    let x = net.ln_channels(x, "backbone.stem.ln1");
    let x = net.tape.relu(x);
    let x = net.conv(x, "backbone.stem.conv2", 2, 1);
    let x = net.ln_channels(x, "backbone.stem.ln2");
    let c2 = net.tape.relu(x);

    let mut stages = [c2; 4];
    let mut cur = c2;
    for i in 1..4 {
        let y = net.conv(cur, &format!("backbone.stage{i}.down"), 2, 1);
        let y = net.ln_channels(y, &format!("backbone.stage{i}.ln_down"));
        let y = net.tape.relu(y);
        let z = net.conv(y, &format!("backbone.stage{i}.conv"), 1, 1);
        let z = net.ln_channels(z, &format!("backbone.stage{i}.ln_conv"));
        let z = net.tape.relu(z);
        cur = net.tape.add(y, z);
        stages[i] = cur;
    }

    let levels = match net.arch().fpn_levels {
        FpnLevels::P2P5 => {
            let p = top_down(net, &stages, 0);
            [p[0], p[1], p[2], p[3]]
        }
        FpnLevels::P3P6 => {
            let p = top_down(net, &stages[1..], 1);
            let p6 = net.tape.maxpool2(p[2]);
            [p[0], p[1], p[2], p6]
        }
    };
    Ok(Pyramid { levels, strides: net.arch().fpn_levels.strides() })
}

/// Lateral + top-down + smoothing over the given backbone stages; `offset`
/// shifts the P-level naming (0 => P2.., 1 => P3..).
fn top_down(net: &mut Net, stages: &[VarId], offset: usize) -> Vec<VarId> {
    let n = stages.len();
    let mut laterals: Vec<VarId> = stages
        .iter()
        .enumerate()
        .map(|(i, &s)| net.conv(s, &format!("fpn.lateral{}", i + 2 + offset), 1, 0))
        .collect();
    for i in (0..n - 1).rev() {
        let up = net.tape.upsample_nearest2(laterals[i + 1]);
        laterals[i] = net.tape.add(laterals[i], up);
    }
    laterals
        .iter()
        .enumerate()
        .map(|(i, &l)| net.conv(l, &format!("fpn.smooth{}", i + 2 + offset), 1, 1))
        .collect()
}
