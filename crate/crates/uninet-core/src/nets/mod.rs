//! Shared convolutional backbone, FPN with a selectable level range, and the
//! three query-based task heads that together form a [`ModelBundle`].

mod backbone;
mod blocks;
mod depth;
mod det;
mod seg;
#[cfg(test)]
mod tests;

pub use backbone::{backbone_fpn_forward, Pyramid};
pub use depth::{bins_to_centers, decode_depth, depth_head_forward, DepthForward, DepthPrediction};
pub use det::{decode_detections, det_head_forward, encode_box_target, DetForward, Detection3D};
pub use seg::{decode_segmentation, seg_head_forward, SegForward, SegPrediction};

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenegen::RangeBounds;
use crate::tensor::{Grads, Tape, Tensor, VarId};

/// Which four pyramid levels the FPN emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpnLevels {
    P2P5,
    P3P6,
}

impl FpnLevels {
    pub fn strides(self) -> [usize; 4] {
        match self {
            FpnLevels::P2P5 => [4, 8, 16, 32],
            FpnLevels::P3P6 => [8, 16, 32, 64],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Seg,
    Depth,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Det, Task::Seg, Task::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Seg => "seg",
            Task::Depth => "depth",
        }
    }

    pub fn namespace(self) -> &'static str {
        match self {
            Task::Det => "head.det.",
            Task::Seg => "head.seg.",
            Task::Depth => "head.depth.",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Backbone channel widths at strides 4, 8, 16, 32.
    pub widths: [usize; 4],
    pub fpn_channels: usize,
    pub fpn_levels: FpnLevels,
    pub det_queries: usize,
    pub seg_queries: usize,
    pub depth_bins: usize,
    pub decoder_layers: usize,
    pub embed_dim: usize,
    pub class_count: usize,
    pub depth_range: (f64, f64),
    pub det_range: RangeBounds,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: [16, 32, 64, 128],
            fpn_channels: 64,
            fpn_levels: FpnLevels::P2P5,
            det_queries: 30,
            seg_queries: 20,
            depth_bins: 16,
            decoder_layers: 2,
            embed_dim: 64,
            class_count: 3,
            depth_range: (0.1, 130.0),
            det_range: RangeBounds::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_bins < 2 {
            return Err(Error::validation("depth_bins must be >= 2"));
        }
        if self.det_queries == 0 || self.seg_queries == 0 {
            return Err(Error::validation("query counts must be >= 1"));
        }
        if self.decoder_layers == 0 || self.embed_dim == 0 || self.fpn_channels == 0 {
            return Err(Error::validation("zero-sized architecture"));
        }
        if self.class_count == 0 {
            return Err(Error::validation("class_count must be >= 1"));
        }
        if !(self.depth_range.0 > 0.0 && self.depth_range.0 < self.depth_range.1) {
            return Err(Error::validation("bad depth range"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("arch serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        crate::scenegen::hex_string(&h.finalize())
    }
}

/// Named parameter tensors. Iteration order is insertion order; consumers
/// that need a canonical order sort by name.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    pub fn remove_namespace(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Copy every tensor under `prefix` from `src`, requiring matching shapes.
    pub fn copy_namespace_from(&mut self, src: &ParamSet, prefix: &str) -> Result<()> {
        for (name, tensor) in src.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            match self.map.get_mut(name) {
                Some(dst) => {
                    if dst.shape() != tensor.shape() {
                        return Err(Error::shape(format!(
                            "{name}: {:?} vs {:?}",
                            dst.shape(),
                            tensor.shape()
                        )));
                    }
                    *dst = tensor.clone();
                }
                None => {
                    return Err(Error::shape(format!("unexpected tensor {name}")));
                }
            }
        }
        Ok(())
    }
}

/// Model = architecture + named parameters + provenance metadata.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub params: ParamSet,
    pub meta: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn has_head(&self, task: Task) -> bool {
        let ns = task.namespace();
        self.params.names().any(|n| n.starts_with(ns))
    }

    pub fn tasks(&self) -> Vec<Task> {
        Task::ALL.iter().copied().filter(|&t| self.has_head(t)).collect()
    }

    pub fn require_head(&self, task: Task) -> Result<()> {
        if self.has_head(task) {
            Ok(())
        } else {
            Err(Error::HeadAbsent(task.name()))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, t)| t.is_finite())
    }
}

/// Binds bundle parameters onto a tape once per forward pass.
pub struct Net<'a> {
    pub tape: Tape,
    bundle: &'a ModelBundle,
    bound: HashMap<String, VarId>,
}

impl<'a> Net<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Self {
        Net { tape: Tape::new(), bundle, bound: HashMap::new() }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.bundle.arch
    }

    /// Bind (or reuse) the leaf for a named parameter.
    pub fn p(&mut self, name: &str) -> VarId {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .bundle
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.tape.leaf(t)
    }

    /// y = x W + b with W stored [d_in, d_out].
    pub fn linear(&mut self, x: VarId, name: &str) -> VarId {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row_bias(y, b)
    }

    pub fn conv(&mut self, x: VarId, name: &str, stride: usize, pad: usize) -> VarId {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn ln_channels(&mut self, x: VarId, name: &str) -> VarId {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layernorm_channels(x, g, b)
    }

    pub fn ln_rows(&mut self, x: VarId, name: &str) -> VarId {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layernorm_rows(x, g, b)
    }

    /// Gradients of all bound parameters, by name (missing => zeros).
    pub fn param_grads(&self, grads: &Grads) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        let mut names: Vec<&String> = self.bound.keys().collect();
        names.sort();
        for name in names {
            let var = self.bound[name];
            let shape = self.tape.val(var).shape().to_vec();
            out.insert(name.clone(), grads.get_or_zeros(var, &shape));
        }
        out
    }
}

/// Deterministic parameter construction.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut h = Sha256::new();
        h.update(b"param-init");
        h.update(seed.to_le_bytes());
        key.copy_from_slice(&h.finalize());
        ParamBuilder { rng: ChaCha8Rng::from_seed(key), params: ParamSet::default() }
    }

    fn normal(&mut self, std: f64) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let data: Vec<f64> = (0..cout * cin * k * k).map(|_| self.normal(std)).collect();
        self.params.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], data));
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.linear_with_bias(name, din, dout, 0.0);
    }

    pub fn linear_with_bias(&mut self, name: &str, din: usize, dout: usize, bias: f64) {
        let std = (1.0 / din as f64).sqrt();
        let data: Vec<f64> = (0..din * dout).map(|_| self.normal(std)).collect();
        self.params.insert(format!("{name}.w"), Tensor::new(vec![din, dout], data));
        self.params.insert(format!("{name}.b"), Tensor::full(&[dout], bias));
    }

    pub fn layernorm(&mut self, name: &str, dim: usize) {
        self.params.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    pub fn embedding(&mut self, name: &str, n: usize, d: usize, std: f64) {
        let data: Vec<f64> = (0..n * d).map(|_| self.normal(std)).collect();
        self.params.insert(name.to_string(), Tensor::new(vec![n, d], data));
    }

    pub fn uniform_logits(&mut self, name: &str, n: usize, d: usize) {
        // store logits whose sigmoid is uniform in [0.02, 0.98]
        let data: Vec<f64> = (0..n * d)
            .map(|_| {
                let u: f64 = self.rng.gen_range(0.02..0.98);
                (u / (1.0 - u)).ln()
            })
            .collect();
        self.params.insert(name.to_string(), Tensor::new(vec![n, d], data));
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

/// Fresh bundle with the shared trunk plus the requested task heads.
/// Deterministic in (arch, tasks, seed).
pub fn init_bundle(arch: &ArchConfig, tasks: &[Task], seed: u64) -> Result<ModelBundle> {
    arch.validate()?;
    let mut b = ParamBuilder::new(seed);
    backbone::init_trunk(&mut b, arch);
    for task in Task::ALL {
        if tasks.contains(&task) {
            match task {
                Task::Det => det::init_head(&mut b, arch),
                Task::Seg => seg::init_head(&mut b, arch),
                Task::Depth => depth::init_head(&mut b, arch),
            }
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("arch_hash".to_string(), arch.hash());
    meta.insert(
        "tasks".to_string(),
        tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(","),
    );
    Ok(ModelBundle { arch: arch.clone(), params: b.finish(), meta })
}

/// Convert an interleaved HWC f32 image to a [3,H,W] f64 tensor.
pub fn image_to_tensor(image: &[f32], width: usize, height: usize) -> Tensor {
    assert_eq!(image.len(), width * height * 3);
    let mut data = vec![0.0f64; 3 * width * height];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[c * width * height + y * width + x] = image[(y * width + x) * 3 + c] as f64;
            }
        }
    }
    Tensor::new(vec![3, height, width], data)
}
