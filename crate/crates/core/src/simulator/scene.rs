//! Synthetic V2I scenes: scatterer point clouds plus CAV and RSU poses.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Point3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioTag {
    Urban,
    OodRural,
}

impl ScenarioTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Urban => "urban",
            Self::OodRural => "ood-rural",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "urban" => Ok(Self::Urban),
            "ood-rural" => Ok(Self::OodRural),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Surface type of a scatterer. Sensors cannot tell them apart; only the
/// radio reflection strength differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Material {
    Building,
    Foliage,
}

impl Material {
    pub fn code(self) -> u8 {
        match self {
            Self::Building => 0,
            Self::Foliage => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::Building),
            1 => Ok(Self::Foliage),
            _ => Err(Error::Format(format!("unknown material code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Placement {
    /// Building blocks: boxes of points around random centers.
    UrbanBlocks { cluster_size: [usize; 2], footprint: [f64; 2], height: [f64; 2], min_range: f64, max_range: f64 },
    /// A few buildings plus many small foliage clusters along the road.
    RuralFoliage { buildings: [usize; 2], building_points: [usize; 2], tree_points: [usize; 2], lateral: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub tag: ScenarioTag,
    pub scatterer_count: [usize; 2],
    pub capture_radius: f64,
    pub rsu_distance: [f64; 2],
    pub rsu_height: f64,
    pub cav_height: f64,
    pub los_probability: f64,
    /// CAV speed in m/s, used to displace the CAV between channel frames.
    pub cav_speed: f64,
    pub placement: Placement,
}

impl ScenarioConfig {
    pub fn urban() -> Self {
        Self {
            tag: ScenarioTag::Urban,
            scatterer_count: [40, 80],
            capture_radius: 120.0,
            rsu_distance: [20.0, 100.0],
            rsu_height: 6.0,
            cav_height: 1.5,
            los_probability: 0.7,
            cav_speed: 10.0,
            placement: Placement::UrbanBlocks {
                cluster_size: [6, 14],
                footprint: [6.0, 14.0],
                height: [8.0, 25.0],
                min_range: 12.0,
                max_range: 105.0,
            },
        }
    }

    pub fn ood_rural() -> Self {
        Self {
            tag: ScenarioTag::OodRural,
            scatterer_count: [40, 80],
            los_probability: 1.0,
            placement: Placement::RuralFoliage {
                buildings: [1, 2],
                building_points: [6, 10],
                tree_points: [3, 8],
                lateral: [6.0, 30.0],
            },
            ..Self::urban()
        }
    }

    pub fn for_tag(tag: ScenarioTag) -> Self {
        match tag {
            ScenarioTag::Urban => Self::urban(),
            ScenarioTag::OodRural => Self::ood_rural(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scatterer_count;
        if lo > hi {
            return Err(Error::Config(format!("scatterer count range [{lo}, {hi}] has min > max")));
        }
        if !(0.0..=1.0).contains(&self.los_probability) {
            return Err(Error::Config("los_probability must lie in [0, 1]".into()));
        }
        if self.rsu_distance[0] <= 0.0 || self.rsu_distance[0] > self.rsu_distance[1] {
            return Err(Error::Config("rsu_distance must be a positive increasing range".into()));
        }
        if self.rsu_distance[1] >= self.capture_radius {
            return Err(Error::Config("rsu_distance must stay inside the capture radius".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scatterers: Vec<Point3>,
    pub materials: Vec<Material>,
    pub cav_position: Point3,
    pub cav_heading: f64,
    pub rsu_position: Point3,
    /// Global orientation of the RSU array axis (radians).
    pub rsu_heading: f64,
    pub los_visible: bool,
    pub scenario_tag: ScenarioTag,
    pub frame_id: u64,
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn uniform_count(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

/// Deterministic scene for `(seed, scenario)`.
pub fn generate_scene(seed: u64, scenario: &ScenarioConfig) -> Result<Scene> {
    scenario.validate()?;
    let mut rng = rng::stream(seed, 0, "scene");
    let cav_heading = wrap_angle(rng.random_range(-PI..PI));
    let cav_position = Point3::new(
        rng.random_range(-500.0..500.0),
        rng.random_range(-500.0..500.0),
        scenario.cav_height,
    );
    let count = uniform_count(&mut rng, scenario.scatterer_count);
    let rsu_range = uniform(&mut rng, scenario.rsu_distance);
    let rsu_bearing = cav_heading + rng.random_range(-PI..PI);
    let rsu_position = Point3::new(
        cav_position.x + rsu_range * rsu_bearing.cos(),
        cav_position.y + rsu_range * rsu_bearing.sin(),
        scenario.rsu_height,
    );
    // Roadside units are mounted along the road the CAV drives on.
    let rsu_heading = wrap_angle(cav_heading + rng.random_range(-0.1..0.1));
    let los_visible = count == 0 || rng.random::<f64>() < scenario.los_probability;

    let mut gen = PointGen { rng: &mut rng, cav: cav_position, heading: cav_heading, radius: scenario.capture_radius };
    let mut points = Vec::with_capacity(count);
    let mut materials = Vec::with_capacity(count);

    if !los_visible {
        // A building straddling the line of sight explains the blockage.
        let n = count.min(gen.rng.random_range(8..=12));
        let frac = gen.rng.random_range(0.35..0.65);
        let center = cav_position + (rsu_position - cav_position) * frac;
        gen.box_points(n, center.x, center.y, 6.0, [6.0, 15.0], &mut points);
        materials.resize(points.len(), Material::Building);
    }

    match &scenario.placement {
        Placement::UrbanBlocks { cluster_size, footprint, height, min_range, max_range } => {
            while points.len() < count {
                let n = uniform_count(gen.rng, *cluster_size).min(count - points.len());
                let r = gen.rng.random_range(*min_range..*max_range);
                let b = gen.rng.random_range(-PI..PI);
                let (cx, cy) = (cav_position.x + r * b.cos(), cav_position.y + r * b.sin());
                let w = uniform(gen.rng, *footprint);
                gen.box_points(n, cx, cy, w, *height, &mut points);
                materials.resize(points.len(), Material::Building);
            }
        }
        Placement::RuralFoliage { buildings, building_points, tree_points, lateral } => {
            let nb = uniform_count(gen.rng, *buildings);
            for _ in 0..nb {
                if points.len() >= count {
                    break;
                }
                let n = uniform_count(gen.rng, *building_points).min(count - points.len());
                let (cx, cy) = gen.roadside(60.0, [15.0, 60.0]);
                gen.box_points(n, cx, cy, 8.0, [4.0, 10.0], &mut points);
                materials.resize(points.len(), Material::Building);
            }
            while points.len() < count {
                let n = uniform_count(gen.rng, *tree_points).min(count - points.len());
                let (cx, cy) = gen.roadside(100.0, *lateral);
                gen.tree_points(n, cx, cy, &mut points);
                materials.resize(points.len(), Material::Foliage);
            }
        }
    }

    Ok(Scene {
        scatterers: points,
        materials,
        cav_position,
        cav_heading,
        rsu_position,
        rsu_heading,
        los_visible,
        scenario_tag: scenario.tag,
        frame_id: 0,
    })
}

struct PointGen<'a> {
    rng: &'a mut ChaCha8Rng,
    cav: Point3,
    heading: f64,
    radius: f64,
}

impl PointGen<'_> {
    /// Rejection-sample a point until it lies within the capture radius.
    fn accept(&mut self, mut f: impl FnMut(&mut ChaCha8Rng) -> Point3) -> Point3 {
        for _ in 0..64 {
            let p = f(self.rng);
            if (p - self.cav).norm() <= self.radius {
                return p;
            }
        }
        // Fall back to pulling the last candidate onto the sphere.
        let p = f(self.rng);
        let d = p - self.cav;
        self.cav + d * (self.radius * 0.999 / d.norm())
    }

    fn box_points(&mut self, n: usize, cx: f64, cy: f64, width: f64, height: [f64; 2], out: &mut Vec<Point3>) {
        let h = uniform(self.rng, height);
        for _ in 0..n {
            let p = self.accept(|r| {
                Point3::new(
                    cx + r.random_range(-0.5..0.5) * width,
                    cy + r.random_range(-0.5..0.5) * width,
                    r.random_range(0.0..h),
                )
            });
            out.push(p);
        }
    }

    fn tree_points(&mut self, n: usize, cx: f64, cy: f64, out: &mut Vec<Point3>) {
        for _ in 0..n {
            let p = self.accept(|r| {
                let a = r.random_range(-PI..PI);
                let rad = r.random_range(0.0..3.0);
                Point3::new(cx + rad * a.cos(), cy + rad * a.sin(), r.random_range(2.0..10.0))
            });
            out.push(p);
        }
    }

    /// A point beside the road: along-track offset within `span`, lateral
    /// offset within `lateral` on either side.
    fn roadside(&mut self, span: f64, lateral: [f64; 2]) -> (f64, f64) {
        let along = self.rng.random_range(-span..span);
        let side = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        let lat = side * uniform(self.rng, lateral);
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (self.cav.x + along * c - lat * s, self.cav.y + along * s + lat * c)
    }
}
