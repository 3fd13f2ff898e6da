//! CAV-centric spatial alignment and one-to-many temporal pairing.

use super::scene::{wrap_angle, Material, Point3, Scene};
use crate::error::{Error, Result};

/// Channel frames per scene frame (10 ms channel cadence, 100 ms sensors).
pub const CHANNELS_PER_SCENE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedScene {
    pub scatterers_local: Vec<Point3>,
    pub materials: Vec<Material>,
    pub rsu_relative: Point3,
    pub rsu_distance: f64,
    /// RSU array axis orientation relative to the CAV heading.
    pub rsu_heading_local: f64,
    pub los_visible: bool,
}

/// Rigid map from the global frame into the CAV body frame.
#[derive(Debug, Clone, Copy)]
pub struct BodyFrame {
    origin: Point3,
    cos: f64,
    sin: f64,
}

impl BodyFrame {
    pub fn new(origin: Point3, heading: f64) -> Self {
        Self { origin, cos: heading.cos(), sin: heading.sin() }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let d = p - self.origin;
        Point3::new(self.cos * d.x + self.sin * d.y, -self.sin * d.x + self.cos * d.y, d.z)
    }
}

pub fn to_cav_frame(scene: &Scene) -> AlignedScene {
    let frame = BodyFrame::new(scene.cav_position, scene.cav_heading);
    let rsu_relative = frame.apply(&scene.rsu_position);
    AlignedScene {
        scatterers_local: scene.scatterers.iter().map(|p| frame.apply(p)).collect(),
        materials: scene.materials.clone(),
        rsu_relative,
        rsu_distance: rsu_relative.norm(),
        rsu_heading_local: wrap_angle(scene.rsu_heading - scene.cav_heading),
        los_visible: scene.los_visible,
    }
}

/// Pair scene `i` with channel frames `10i .. 10i + 9`.
pub fn align_temporal<'a, S, C>(scenes: &'a [S], channels: &'a [C]) -> Result<Vec<(&'a S, &'a C)>> {
    let expected = scenes.len() * CHANNELS_PER_SCENE;
    if channels.len() != expected {
        return Err(Error::Alignment { scenes: scenes.len(), expected, got: channels.len() });
    }
    Ok(channels.iter().enumerate().map(|(i, c)| (&scenes[i / CHANNELS_PER_SCENE], c)).collect())
}
