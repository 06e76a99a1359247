//! Pinhole cameras orbiting the world origin.
//!
//! World frame is right-handed with +y up. Camera space looks down -z with
//! +x right and +y up. Azimuth 0 / elevation 0 places the camera on +z.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Projection of a world point into continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Column coordinate; pixel `c` has its center at `c + 0.5`.
    pub x: f64,
    /// Row coordinate, growing downward.
    pub y: f64,
    /// Positive distance along the viewing axis.
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation (`p_cam = R p + t`).
    pub translation: Vec3,
    pub fov_deg: f64,
    pub distance: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera on a sphere of radius `distance` looking at the origin.
    pub fn orbit(
        elevation_deg: f64,
        azimuth_deg: f64,
        distance: f64,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
        let center = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * distance;
        let forward = -center.normalize();
        let mut right = forward.cross(&Vec3::y());
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::new(0.0, 0.0, -1.0));
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            up.transpose(),
            (-forward).transpose(),
        ]);
        let cam = Self {
            rotation,
            translation: -(rotation * center),
            fov_deg,
            distance,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "camera rotation is not orthonormal (error {ortho:e})"
            )));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidArgument(format!("fov {} out of (0,180)", self.fov_deg)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera resolution must be >= 1".into()));
        }
        if self.distance <= 0.0 {
            return Err(Error::InvalidArgument("camera distance must be positive".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn elevation_deg(&self) -> f64 {
        let c = self.center();
        (c.y / c.norm()).clamp(-1.0, 1.0).asin().to_degrees()
    }

    pub fn azimuth_deg(&self) -> f64 {
        let c = self.center();
        c.x.atan2(c.z).to_degrees()
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }

    /// Same distance and fov, rotated 180 degrees in azimuth.
    pub fn back_view(&self) -> Self {
        Self::orbit(
            self.elevation_deg(),
            self.azimuth_deg() + 180.0,
            self.distance,
            self.fov_deg,
            self.width,
            self.height,
        )
        .expect("rotating a valid camera keeps it valid")
    }

    fn tan_half(&self) -> f64 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotates a world direction into camera space.
    pub fn dir_to_camera(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    /// Ray through the center of pixel (`row`, `col`).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Ray {
        self.ray_at(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Ray through a continuous pixel position.
    pub fn ray_at(&self, x: f64, y: f64) -> Ray {
        let th = self.tan_half();
        let u = (x / self.width as f64 * 2.0 - 1.0) * th * self.aspect();
        let v = (1.0 - y / self.height as f64 * 2.0) * th;
        let d_cam = Vec3::new(u, v, -1.0).normalize();
        Ray {
            origin: self.center(),
            dir: self.rotation.transpose() * d_cam,
        }
    }

    /// Projects a world point; `None` if it is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<Projection> {
        let pc = self.to_camera(p);
        let w = -pc.z;
        if w <= 1e-9 {
            return None;
        }
        let th = self.tan_half();
        Some(Projection {
            x: (pc.x / w / (th * self.aspect()) + 1.0) * 0.5 * self.width as f64,
            y: (1.0 - pc.y / w / th) * 0.5 * self.height as f64,
            w,
        })
    }

    /// Jacobian of the projected (x, y) w.r.t. the world point.
    pub fn project_jacobian(&self, p: &Vec3) -> Option<[Vec3; 2]> {
        let pc = self.to_camera(p);
        let w = -pc.z;
        if w <= 1e-9 {
            return None;
        }
        let th = self.tan_half();
        let sx = 0.5 * self.width as f64 / (th * self.aspect());
        let sy = -0.5 * self.height as f64 / th;
        // d(pc.x / w)/d(pc) = (1/w, 0, pc.x / w^2) because w = -pc.z
        let dx_cam = Vec3::new(sx / w, 0.0, sx * pc.x / (w * w));
        let dy_cam = Vec3::new(0.0, sy / w, sy * pc.y / (w * w));
        let rt = self.rotation.transpose();
        Some([rt * dx_cam, rt * dy_cam])
    }

    /// Half-height of the view frustum on the plane through the origin.
    pub fn frustum_half_height_at_origin(&self) -> f64 {
        self.distance * self.tan_half()
    }

    /// Pose of `self` relative to `reference`: `(R_rel, T_rel)` with
    /// `p_self = R_rel p_ref + T_rel` for camera-space points.
    pub fn relative_to(&self, reference: &Camera) -> (Matrix3<f64>, Vec3) {
        let r_rel = self.rotation * reference.rotation.transpose();
        let t_rel = self.translation - r_rel * reference.translation;
        (r_rel, t_rel)
    }
}

/// One ray per pixel through the pixel center, row-major from the top-left.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for r in 0..camera.height {
        for c in 0..camera.width {
            rays.push(camera.pixel_ray(r, c));
        }
    }
    rays
}
