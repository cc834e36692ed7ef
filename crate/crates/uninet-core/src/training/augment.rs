//! Per-task data augmentation. Geometric transforms stay projectively
//! consistent by updating the camera intrinsics: scaling/cropping the image
//! is equivalent to scaling focal lengths and shifting the principal point,
//! which leaves 3D boxes and per-pixel depth values valid as-is.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nets::Task;
use crate::resize;
use crate::scenegen::{Instance, Mask, SceneSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugPolicy {
    /// Per-task specialist policy: seg gets large-scale resize+crop and flip,
    /// det gets flip plus photometric noise, depth gets flip only.
    Strong,
    /// Flip only, every task (the fine-tuning regime).
    Weak,
    /// No augmentation.
    None,
}

const SEG_SCALE_RANGE: (f64, f64) = (0.5, 2.0);
const DET_NOISE_SIGMA: f64 = 0.02;
const CROP_RETRIES: usize = 10;

pub fn augment_sample(
    task: Task,
    sample: &SceneSample,
    policy: AugPolicy,
    rng: &mut ChaCha8Rng,
) -> SceneSample {
    match policy {
        AugPolicy::None => sample.clone(),
        AugPolicy::Weak => maybe_flip(sample, rng),
        AugPolicy::Strong => match task {
            Task::Seg => {
                let scaled = scale_and_crop(sample, rng);
                maybe_flip(&scaled, rng)
            }
            Task::Det => {
                let flipped = maybe_flip(sample, rng);
                photometric_noise(&flipped, rng)
            }
            Task::Depth => maybe_flip(sample, rng),
        },
    }
}

fn maybe_flip(sample: &SceneSample, rng: &mut ChaCha8Rng) -> SceneSample {
    if rng.gen_bool(0.5) {
        flip_sample(sample)
    } else {
        sample.clone()
    }
}

/// Mirror the image plane. Boxes reflect as y -> -y, yaw -> -yaw; depth
/// values are unchanged (camera depth is invariant under the reflection).
pub fn flip_sample(sample: &SceneSample) -> SceneSample {
    let (w, h) = (sample.width(), sample.height());
    let mut camera = sample.camera;
    camera.cx = (w - 1) as f64 - camera.cx;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| {
            let mut nb = *b;
            nb.center[1] = -nb.center[1];
            nb.yaw = -nb.yaw;
            if nb.yaw == -std::f64::consts::PI {
                nb.yaw = std::f64::consts::PI;
            }
            nb
        })
        .collect();
    let instances = sample
        .instances
        .iter()
        .map(|inst| Instance {
            class_id: inst.class_id,
            mask: Mask {
                width: w,
                height: h,
                bits: resize::flip_horizontal(&inst.mask.bits, w, h, 1),
            },
        })
        .collect();
    SceneSample {
        sample_id: sample.sample_id.clone(),
        image: resize::flip_horizontal(&sample.image, w, h, 3),
        depth: resize::flip_horizontal(&sample.depth, w, h, 1),
        instances,
        boxes,
        camera,
    }
}

fn photometric_noise(sample: &SceneSample, rng: &mut ChaCha8Rng) -> SceneSample {
    let mut out = sample.clone();
    for v in &mut out.image {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v = (*v as f64 + DET_NOISE_SIGMA * n).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Random scale in [0.5, 2], then crop (scale >= 1) or pad (scale < 1) back
/// to the native size. Depth and masks move by nearest-neighbour transport so
/// annotation values stay exact; the camera absorbs the geometry change.
fn scale_and_crop(sample: &SceneSample, rng: &mut ChaCha8Rng) -> SceneSample {
    let (w, h) = (sample.width(), sample.height());
    for _ in 0..CROP_RETRIES {
        let s = rng.gen_range(SEG_SCALE_RANGE.0..SEG_SCALE_RANGE.1);
        let sw = ((w as f64 * s).round() as usize).max(1);
        let sh = ((h as f64 * s).round() as usize).max(1);
        // effective per-axis scale after rounding
        let sx = sw as f64 / w as f64;
        let sy = sh as f64 / h as f64;
        // offset of the native window inside the scaled plane (negative =>
        // padding); rounding can land the two axes on different sides of 1
        let off_x: isize = if sw >= w {
            rng.gen_range(0..=sw - w) as isize
        } else {
            -(rng.gen_range(0..=w - sw) as isize)
        };
        let off_y: isize = if sh >= h {
            rng.gen_range(0..=sh - h) as isize
        } else {
            -(rng.gen_range(0..=h - sh) as isize)
        };

        let image_s = resize::resize_channels_f32(&sample.image, w, h, 3, sw, sh);
        let depth_s = resize::resize_nearest(&sample.depth, w, h, sw, sh);

        let mut image = vec![0.5f32; w * h * 3];
        let mut depth = vec![f32::MAX; w * h];
        for y in 0..h {
            for x in 0..w {
                let sxp = x as isize + off_x;
                let syp = y as isize + off_y;
                if sxp >= 0 && (sxp as usize) < sw && syp >= 0 && (syp as usize) < sh {
                    let sp = syp as usize * sw + sxp as usize;
                    depth[y * w + x] = depth_s[sp];
                    for c in 0..3 {
                        image[(y * w + x) * 3 + c] = image_s[sp * 3 + c];
                    }
                } else {
                    depth[y * w + x] = f32::MAX; // padded region: no geometry
                }
            }
        }
        // cap padded depth at something sane for the loss
        let pad_depth = sample.depth.iter().cloned().fold(0.0f32, f32::max);
        for d in depth.iter_mut() {
            if *d == f32::MAX {
                *d = pad_depth;
            }
        }

        let mut instances = Vec::new();
        let mut boxes = Vec::new();
        for (inst, b) in sample.instances.iter().zip(sample.boxes.iter()) {
            let bits_s = resize::resize_nearest(&inst.mask.bits, w, h, sw, sh);
            let mut bits = vec![false; w * h];
            let mut any = false;
            for y in 0..h {
                for x in 0..w {
                    let sxp = x as isize + off_x;
                    let syp = y as isize + off_y;
                    if sxp >= 0 && (sxp as usize) < sw && syp >= 0 && (syp as usize) < sh
                        && bits_s[syp as usize * sw + sxp as usize]
                    {
                        bits[y * w + x] = true;
                        any = true;
                    }
                }
            }
            if any {
                instances.push(Instance {
                    class_id: inst.class_id,
                    mask: Mask { width: w, height: h, bits },
                });
                boxes.push(*b);
            }
        }
        if instances.is_empty() && !sample.instances.is_empty() {
            continue; // crop removed every annotation; retry
        }

        let mut camera = sample.camera;
        camera.fx *= sx;
        camera.fy *= sy;
        camera.cx = camera.cx * sx - off_x as f64;
        camera.cy = camera.cy * sy - off_y as f64;
        return SceneSample {
            sample_id: sample.sample_id.clone(),
            image,
            depth,
            instances,
            boxes,
            camera,
        };
    }
    sample.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};
    use rand_chacha::rand_core::SeedableRng;

    fn sample() -> SceneSample {
        let config = SceneConfig { n_boxes_range: (3, 3), seed: 9, ..SceneConfig::default() };
        generate_scene(&config, 1).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let once = flip_sample(&s);
        let twice = flip_sample(&once);
        assert_eq!(s, twice);
    }

    #[test]
    fn flip_transforms_boxes_by_reflection() {
        let mut s = sample();
        s.boxes[0].center = [10.0, 3.0, 0.0];
        s.boxes[0].yaw = 0.4;
        let f = flip_sample(&s);
        assert_eq!(f.boxes[0].center, [10.0, -3.0, 0.0]);
        assert_eq!(f.boxes[0].yaw, -0.4);
    }

    #[test]
    fn flip_keeps_projection_consistent() {
        let s = sample();
        let f = flip_sample(&s);
        // a box centre visible in the original projects to the mirrored u
        for (b, fb) in s.boxes.iter().zip(f.boxes.iter()) {
            if let (Ok((u, v, d)), Ok((fu, fv, fd))) = (
                crate::scenegen::project_point(&s.camera, b.center),
                crate::scenegen::project_point(&f.camera, fb.center),
            ) {
                assert!((fu - ((s.width() - 1) as f64 - u)).abs() < 1e-9);
                assert!((fv - v).abs() < 1e-9);
                assert!((fd - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seg_scale_preserves_output_size_and_grows_masks() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = augment_sample(Task::Seg, &s, AugPolicy::Strong, &mut rng);
            assert_eq!(a.image.len(), s.image.len());
            assert_eq!(a.depth.len(), s.depth.len());
            assert_eq!(a.instances.len(), a.boxes.len());
            for inst in &a.instances {
                assert!(inst.mask.count() > 0);
            }
        }
    }

    #[test]
    fn weak_policy_flips_only() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..8 {
            let a = augment_sample(Task::Det, &s, AugPolicy::Weak, &mut rng);
            // weak aug never changes pixel multisets beyond mirroring
            let mut orig: Vec<u32> = s.image.iter().map(|v| v.to_bits()).collect();
            let mut got: Vec<u32> = a.image.iter().map(|v| v.to_bits()).collect();
            orig.sort_unstable();
            got.sort_unstable();
            assert_eq!(orig, got);
        }
    }
}
