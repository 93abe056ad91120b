//! Weak-perspective camera.
//!
//! Image coordinates: x to the right, y down, origin at the top-left corner
//! of the crop the camera was estimated for.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Vec3;

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakPerspectiveCamera {
    /// Pixels per model unit.
    pub scale: f64,
    /// Pixels.
    pub translation: Vec2,
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, translation: Vec2) -> Result<Self> {
        let cam = Self { scale, translation };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "camera scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidInput("camera translation is not finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn project_point(&self, p: &Vec3) -> Vec2 {
        self.scale * Vec2::new(p.x, p.y) + self.translation
    }

    pub fn project(&self, points: &[Vec3]) -> Vec<Vec2> {
        points.iter().map(|p| self.project_point(p)).collect()
    }
}
