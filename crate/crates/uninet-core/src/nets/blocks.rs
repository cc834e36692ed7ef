//! Building blocks shared by the seg and depth heads: a per-pixel embedding
//! stack over the finest pyramid level and single-head cross-attention
//! decoder layers.

use super::{ArchConfig, Net, ParamBuilder};
use crate::tensor::VarId;

pub(super) fn init_embed_stack(b: &mut ParamBuilder, ns: &str, arch: &ArchConfig) {
    let d = arch.embed_dim;
    b.conv(&format!("{ns}embed1"), d, arch.fpn_channels, 3);
    b.layernorm(&format!("{ns}embed_ln1"), d);
    b.conv(&format!("{ns}embed2"), d, d, 1);
    b.layernorm(&format!("{ns}embed_ln2"), d);
    b.conv(&format!("{ns}embed3"), d, d, 1);
}

pub(super) fn init_decoder_layers(b: &mut ParamBuilder, ns: &str, arch: &ArchConfig) {
    let d = arch.embed_dim;
    for l in 0..arch.decoder_layers {
        b.linear(&format!("{ns}layer{l}.q_proj"), d, d);
        b.linear(&format!("{ns}layer{l}.k_proj"), arch.fpn_channels, d);
        b.linear(&format!("{ns}layer{l}.v_proj"), arch.fpn_channels, d);
        b.layernorm(&format!("{ns}layer{l}.ln_attn"), d);
        b.linear(&format!("{ns}layer{l}.ffn1"), d, d);
        b.linear(&format!("{ns}layer{l}.ffn2"), d, d);
        b.layernorm(&format!("{ns}layer{l}.ln_ffn"), d);
    }
}

/// 3-layer conv stack over the finest level -> per-pixel embedding [d, S]
/// (flattened), plus its spatial size.
pub(super) fn embed_stack(net: &mut Net, ns: &str, finest: VarId) -> (VarId, usize, usize) {
    let shape = net.tape.val(finest).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let d = net.arch().embed_dim;
    let x = net.conv(finest, &format!("{ns}embed1"), 1, 1);
    let x = net.ln_channels(x, &format!("{ns}embed_ln1"));
    let x = net.tape.relu(x);
    let x = net.conv(x, &format!("{ns}embed2"), 1, 0);
    let x = net.ln_channels(x, &format!("{ns}embed_ln2"));
    let x = net.tape.relu(x);
    let x = net.conv(x, &format!("{ns}embed3"), 1, 0);
    let flat = net.tape.reshape(x, vec![d, h * w]);
    (flat, h, w)
}

/// One cross-attention + feed-forward decoder layer. `kv` is the flattened
/// feature matrix [S, c_fpn]; queries are [N, d]. Returns (queries,
/// attention weights [N, S]).
pub(super) fn decoder_layer(net: &mut Net, ns: &str, l: usize, queries: VarId, kv: VarId) -> (VarId, VarId) {
    let d = net.arch().embed_dim;
    let q = net.linear(queries, &format!("{ns}layer{l}.q_proj"));
    let k = net.linear(kv, &format!("{ns}layer{l}.k_proj"));
    let v = net.linear(kv, &format!("{ns}layer{l}.v_proj"));
    let kt = net.tape.transpose(k);
    let scores = net.tape.matmul(q, kt);
    let scores = net.tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = net.tape.softmax_rows(scores);
    let ctx = net.tape.matmul(attn, v);
    let sum = net.tape.add(queries, ctx);
    let queries = net.ln_rows(sum, &format!("{ns}layer{l}.ln_attn"));
    let h = net.linear(queries, &format!("{ns}layer{l}.ffn1"));
    let h = net.tape.relu(h);
    let h = net.linear(h, &format!("{ns}layer{l}.ffn2"));
    let sum = net.tape.add(queries, h);
    let queries = net.ln_rows(sum, &format!("{ns}layer{l}.ln_ffn"));
    (queries, attn)
}

/// Flatten the finest pyramid level to a [S, c_fpn] key/value matrix.
pub(super) fn flatten_kv(net: &mut Net, finest: VarId) -> VarId {
    let shape = net.tape.val(finest).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let m = net.tape.reshape(finest, vec![c, h * w]);
    net.tape.transpose(m)
}
