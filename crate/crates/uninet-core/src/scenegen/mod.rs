//! Procedural generation of driving-like scenes with mutually consistent
//! 3D-box, instance-mask and depth annotations, plus on-disk dataset IO.

mod camera;
mod generate;
mod io;
pub mod rle;

pub use camera::{back_project, project_point, CameraModel};
pub use generate::{generate_scene, surface_depth, GROUND_CAMERA_HEIGHT};
pub use io::{read_dataset, write_dataset, DatasetManifest};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Detection range bounds per vehicle-frame axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for RangeBounds {
    fn default() -> Self {
        RangeBounds { x: (0.0, 120.0), y: (-60.0, 60.0), z: (-3.0, 3.0) }
    }
}

impl RangeBounds {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= self.x.0
            && p[0] <= self.x.1
            && p[1] >= self.y.0
            && p[1] <= self.y.1
            && p[2] >= self.z.0
            && p[2] <= self.z.1
    }
}

/// Upright 3D box in the vehicle frame (x forward, y left, z up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// (x, y, z) of the box centre, metres.
    pub center: [f64; 3],
    /// (l, w, h), metres.
    pub size: [f64; 3],
    /// Heading about +z, radians in (-pi, pi].
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if !(self.size.iter().all(|&s| s > 0.0)) {
            return Err(Error::validation("box dimensions must be positive"));
        }
        if !(self.yaw > -std::f64::consts::PI - 1e-12 && self.yaw <= std::f64::consts::PI + 1e-12)
        {
            return Err(Error::validation("yaw outside (-pi, pi]"));
        }
        if self.center.iter().chain(self.size.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite box field"));
        }
        Ok(())
    }

    /// The 8 corners in the vehicle frame.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw, hh) = (self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0);
        let mut out = [[0.0; 3]; 8];
        let mut k = 0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let (dx, dy) = (sx * hl, sy * hw);
                    out[k] = [
                        self.center[0] + dx * c - dy * s,
                        self.center[1] + dx * s + dy * c,
                        self.center[2] + sz * hh,
                    ];
                    k += 1;
                }
            }
        }
        out
    }
}

/// Binary instance mask sized like the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, bits: vec![false; width * height] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub mask: Mask,
}

/// One synthetic frame with image, dense depth, instance masks and 3D boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    /// H*W*3 interleaved RGB in [0,1].
    pub image: Vec<f32>,
    /// H*W metres, row-major.
    pub depth: Vec<f32>,
    /// Visible instances; `instances[i]` annotates `boxes[i]`.
    pub instances: Vec<Instance>,
    pub boxes: Vec<Box3D>,
    pub camera: CameraModel,
}

impl SceneSample {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    /// Zero-tolerance consistency validation: mask/box pairing, disjoint
    /// nonempty masks, exact per-instance depth, occlusion ordering and
    /// analytic background depth.
    pub fn validate(&self, d_max: f64) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        self.camera.validate()?;
        if self.image.len() != w * h * 3 {
            return Err(Error::validation("image size mismatch"));
        }
        if self.depth.len() != w * h {
            return Err(Error::validation("depth size mismatch"));
        }
        if self.instances.len() != self.boxes.len() {
            return Err(Error::validation("instance/box count mismatch"));
        }
        for v in &self.image {
            if !(*v >= 0.0 && *v <= 1.0) {
                return Err(Error::validation("image value outside [0,1]"));
            }
        }
        for d in &self.depth {
            if !(*d > 0.0 && *d as f64 <= d_max) {
                return Err(Error::validation(format!("depth value {d} outside (0, {d_max}]")));
            }
        }
        // ownership map; also checks disjointness
        let mut owner: Vec<i32> = vec![-1; w * h];
        for (i, inst) in self.instances.iter().enumerate() {
            inst.mask_shape_check(w, h)?;
            if inst.class_id != self.boxes[i].class_id {
                return Err(Error::validation("instance/box class mismatch"));
            }
            self.boxes[i].validate()?;
            let mut any = false;
            for (p, &b) in inst.mask.bits.iter().enumerate() {
                if b {
                    any = true;
                    if owner[p] != -1 {
                        return Err(Error::validation(format!(
                            "masks {} and {} overlap",
                            owner[p], i
                        )));
                    }
                    owner[p] = i as i32;
                }
            }
            if !any {
                return Err(Error::validation(format!("instance {i} mask is empty")));
            }
        }
        // exact depth at mask pixels
        let surfaces: Vec<f32> = self.boxes.iter().map(|b| surface_depth(b) as f32).collect();
        for (p, &o) in owner.iter().enumerate() {
            if o >= 0 && self.depth[p] != surfaces[o as usize] {
                return Err(Error::validation(format!(
                    "depth {} at pixel {} != surface {} of instance {}",
                    self.depth[p], p, surfaces[o as usize], o
                )));
            }
        }
        // occlusion ordering and background depth need re-rendered coverage
        generate::check_coverage(self, &surfaces, &owner, d_max)
    }
}

impl Instance {
    fn mask_shape_check(&self, w: usize, h: usize) -> Result<()> {
        if self.mask.width != w || self.mask.height != h {
            return Err(Error::validation("mask shape mismatch"));
        }
        Ok(())
    }
}

/// Generation parameters. The camera is derived from the image size with the
/// same focal-to-width ratio as the reference geometry (fx = 0.625 * width).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_boxes_range: (usize, usize),
    pub class_count: usize,
    pub range: RangeBounds,
    /// Background depth cap, metres.
    pub d_max: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_boxes_range: (2, 6),
            class_count: 3,
            range: RangeBounds::default(),
            d_max: 130.0,
            width: 128,
            height: 64,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boxes_range.0 > self.n_boxes_range.1 {
            return Err(Error::validation("empty n_boxes_range"));
        }
        if self.class_count == 0 {
            return Err(Error::validation("class_count must be >= 1"));
        }
        for (lo, hi) in [self.range.x, self.range.y, self.range.z] {
            if !(lo < hi) {
                return Err(Error::validation("empty detection range"));
            }
        }
        if self.d_max < self.range.x.1 {
            return Err(Error::validation("d_max must cover the far x bound"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::validation("image too small"));
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel {
            fx: 0.625 * self.width as f64,
            fy: 0.625 * self.width as f64,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
