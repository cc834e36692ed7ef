use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PinholeProj;

/// Pinhole camera. The vehicle frame is x-forward / y-left / z-up; the fixed
/// vehicle->camera extrinsic is x_cam = -y_veh, y_cam = -z_veh, z_cam = x_veh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("camera focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::validation("camera cx out of image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::validation("camera cy out of image"));
        }
        Ok(())
    }

    pub fn proj(&self) -> PinholeProj {
        PinholeProj {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }
}

/// Project a vehicle-frame point to pixel coordinates and camera depth.
/// Points at or behind the image plane yield `Error::BehindCamera`.
pub fn project_point(camera: &CameraModel, p: [f64; 3]) -> Result<(f64, f64, f64)> {
    camera.proj().project(p).ok_or(Error::BehindCamera)
}

/// Analytic inverse of `project_point`.
pub fn back_project(camera: &CameraModel, u: f64, v: f64, depth: f64) -> [f64; 3] {
    let xc = (u - camera.cx) * depth / camera.fx;
    let yc = (v - camera.cy) * depth / camera.fy;
    // invert x_cam=-y, y_cam=-z, z_cam=x
    [depth, -xc, -yc]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel { fx: 100.0, fy: 100.0, cx: 160.0, cy: 120.0, width: 320, height: 240 }
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let (u, v, d) = project_point(&cam(), [10.0, 0.0, 0.0]).unwrap();
        assert_eq!((u, v, d), (160.0, 120.0, 10.0));
    }

    #[test]
    fn off_axis_point() {
        // p=(10,-1,0): x_cam = 1 -> u = 100*1/10 + 160 = 170
        let (u, v, d) = project_point(&cam(), [10.0, -1.0, 0.0]).unwrap();
        assert_eq!((u, v, d), (170.0, 120.0, 10.0));
    }

    #[test]
    fn behind_camera() {
        let err = project_point(&cam(), [0.0, 5.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::BehindCamera));
    }

    #[test]
    fn backprojection_roundtrip() {
        let c = cam();
        for p in [[12.0, 3.0, -1.0], [55.5, -20.0, 2.5], [0.5, 0.1, 0.05]] {
            let (u, v, d) = project_point(&c, p).unwrap();
            let q = back_project(&c, u, v, d);
            for ax in 0..3 {
                assert!((p[ax] - q[ax]).abs() <= 1e-6, "axis {ax}: {} vs {}", p[ax], q[ax]);
            }
        }
    }
}
