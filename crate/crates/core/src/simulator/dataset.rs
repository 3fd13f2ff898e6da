//! Paired scene/channel datasets and the MCFD container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;

use super::align::{align_temporal, to_cav_frame, CHANNELS_PER_SCENE};
use super::channel::{channel_tensor, synthesize_paths, ChannelTensor, RfConfig};
use super::scene::{generate_scene, Material, Point3, ScenarioConfig, ScenarioTag, Scene};
use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &[u8; 4] = b"MCFD";
const VERSION: u32 = 1;

/// Interval between consecutive channel frames (seconds).
pub const CHANNEL_INTERVAL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tag: ScenarioTag,
    pub n_r: usize,
    pub n_t: usize,
    pub n_c: usize,
    pub delta_f: f64,
    pub scenes: Vec<Scene>,
    /// `CHANNELS_PER_SCENE` consecutive channels per scene.
    pub channels: Vec<ChannelTensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn scene_of(&self, sample: usize) -> usize {
        sample / CHANNELS_PER_SCENE
    }

    pub fn pairs(&self) -> Result<Vec<(&Scene, &ChannelTensor)>> {
        align_temporal(&self.scenes, &self.channels)
    }

    /// Mean per-entry channel power `E|h|^2`, which equals the per-receive
    /// element pilot power for unit-modulus pilots.
    pub fn signal_power(&self) -> f64 {
        let total: f64 = self.channels.iter().map(ChannelTensor::norm_sqr).sum();
        let count: usize = self.channels.iter().map(|c| c.data.len()).sum();
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// The first `n_scenes` scenes with their channels.
    pub fn take_scenes(&self, n_scenes: usize) -> Dataset {
        let n = n_scenes.min(self.scenes.len());
        Dataset {
            scenes: self.scenes[..n].to_vec(),
            channels: self.channels[..n * CHANNELS_PER_SCENE].to_vec(),
            ..self.empty_like()
        }
    }

    /// Same header with no samples.
    pub fn empty_like(&self) -> Dataset {
        Dataset {
            tag: self.tag,
            n_r: self.n_r,
            n_t: self.n_t,
            n_c: self.n_c,
            delta_f: self.delta_f,
            scenes: Vec::new(),
            channels: Vec::new(),
        }
    }
}

/// The scene with the CAV advanced along its heading for channel frame `j`.
pub fn advance_scene(scene: &Scene, speed: f64, j: usize) -> Scene {
    let dist = speed * CHANNEL_INTERVAL * j as f64;
    let mut s = scene.clone();
    s.cav_position.x += dist * scene.cav_heading.cos();
    s.cav_position.y += dist * scene.cav_heading.sin();
    s
}

/// The `CHANNELS_PER_SCENE` channel frames paired with one scene.
pub fn channel_frames(scene: &Scene, scenario: &ScenarioConfig, rf: &RfConfig, seed: u64) -> Result<Vec<ChannelTensor>> {
    (0..CHANNELS_PER_SCENE)
        .map(|j| {
            let moved = advance_scene(scene, scenario.cav_speed, j);
            let paths = synthesize_paths(&to_cav_frame(&moved), rf, rng::stream_seed(seed, j as u64, "frame"))?;
            let mut h = channel_tensor(&paths, rf.n_r, rf.n_t, rf.delta_f, rf.n_c)?;
            h.quantize_f32();
            Ok(h)
        })
        .collect()
}

/// `n_scenes` scenes and their `10 n_scenes` channel frames. Scene `i` is
/// seeded independently so prefixes of larger datasets agree.
pub fn generate_dataset(scenario: &ScenarioConfig, rf: &RfConfig, n_scenes: usize, seed: u64) -> Result<Dataset> {
    rf.validate()?;
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut channels = Vec::with_capacity(n_scenes * CHANNELS_PER_SCENE);
    for i in 0..n_scenes {
        let scene_seed = rng::stream_seed(seed, i as u64, "scene");
        let mut scene = generate_scene(scene_seed, scenario)?;
        scene.frame_id = i as u64;
        channels.extend(channel_frames(&scene, scenario, rf, rng::stream_seed(seed, i as u64, "channel"))?);
        scenes.push(scene);
    }
    Ok(Dataset { tag: scenario.tag, n_r: rf.n_r, n_t: rf.n_t, n_c: rf.n_c, delta_f: rf.delta_f, scenes, channels })
}

fn tag_code(tag: ScenarioTag) -> u8 {
    match tag {
        ScenarioTag::Urban => 0,
        ScenarioTag::OodRural => 1,
    }
}

fn tag_from_code(c: u8) -> Result<ScenarioTag> {
    match c {
        0 => Ok(ScenarioTag::Urban),
        1 => Ok(ScenarioTag::OodRural),
        _ => Err(Error::Format(format!("unknown scenario code {c}"))),
    }
}

fn write_point(w: &mut impl Write, p: &Point3) -> Result<()> {
    for c in [p.x, p.y, p.z] {
        w.write_f64::<LE>(c)?;
    }
    Ok(())
}

fn read_point(r: &mut impl Read) -> Result<Point3> {
    Ok(Point3::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?))
}

fn write_scene(w: &mut impl Write, s: &Scene) -> Result<()> {
    w.write_u32::<LE>(s.scatterers.len() as u32)?;
    for (p, m) in s.scatterers.iter().zip(&s.materials) {
        write_point(w, p)?;
        w.write_u8(m.code())?;
    }
    write_point(w, &s.cav_position)?;
    w.write_f64::<LE>(s.cav_heading)?;
    write_point(w, &s.rsu_position)?;
    w.write_f64::<LE>(s.rsu_heading)?;
    w.write_u8(s.los_visible as u8)?;
    w.write_u8(tag_code(s.scenario_tag))?;
    w.write_u64::<LE>(s.frame_id)?;
    Ok(())
}

fn read_scene(r: &mut impl Read) -> Result<Scene> {
    let n = r.read_u32::<LE>()? as usize;
    let mut scatterers = Vec::with_capacity(n);
    let mut materials = Vec::with_capacity(n);
    for _ in 0..n {
        scatterers.push(read_point(r)?);
        materials.push(Material::from_code(r.read_u8()?)?);
    }
    Ok(Scene {
        scatterers,
        materials,
        cav_position: read_point(r)?,
        cav_heading: r.read_f64::<LE>()?,
        rsu_position: read_point(r)?,
        rsu_heading: r.read_f64::<LE>()?,
        los_visible: r.read_u8()? != 0,
        scenario_tag: tag_from_code(r.read_u8()?)?,
        frame_id: r.read_u64::<LE>()?,
    })
}

/// Every sample stores its scene record followed by the channel as
/// interleaved little-endian f32 real/imaginary pairs.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let pairs = ds.pairs()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for d in [ds.n_r, ds.n_t, ds.n_c] {
        w.write_u32::<LE>(d as u32)?;
    }
    w.write_f64::<LE>(ds.delta_f)?;
    w.write_u64::<LE>(ds.len() as u64)?;
    w.write_u8(tag_code(ds.tag))?;
    for (i, (scene, h)) in pairs.into_iter().enumerate() {
        if h.dims() != (ds.n_r, ds.n_t, ds.n_c) {
            return Err(Error::Shape(format!("sample {i} has dims {:?}", h.dims())));
        }
        w.write_u64::<LE>(ds.scene_of(i) as u64)?;
        write_scene(&mut w, scene)?;
        for z in &h.data {
            w.write_f32::<LE>(z.re as f32)?;
            w.write_f32::<LE>(z.im as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MCFD dataset".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_r = r.read_u32::<LE>()? as usize;
    let n_t = r.read_u32::<LE>()? as usize;
    let n_c = r.read_u32::<LE>()? as usize;
    let delta_f = r.read_f64::<LE>()?;
    let count = r.read_u64::<LE>()? as usize;
    let tag = tag_from_code(r.read_u8()?)?;
    if count % CHANNELS_PER_SCENE != 0 {
        return Err(Error::Format(format!("sample count {count} is not a multiple of {CHANNELS_PER_SCENE}")));
    }
    let mut scenes = Vec::with_capacity(count / CHANNELS_PER_SCENE);
    let mut channels = Vec::with_capacity(count);
    for i in 0..count {
        let idx = r.read_u64::<LE>()? as usize;
        if idx != i / CHANNELS_PER_SCENE {
            return Err(Error::Format(format!("sample {i} refers to scene {idx}")));
        }
        let scene = read_scene(&mut r)?;
        if i % CHANNELS_PER_SCENE == 0 {
            scenes.push(scene);
        }
        let mut data = Vec::with_capacity(n_r * n_t * n_c);
        for _ in 0..n_r * n_t * n_c {
            let re = r.read_f32::<LE>()? as f64;
            let im = r.read_f32::<LE>()? as f64;
            data.push(Complex64::new(re, im));
        }
        channels.push(ChannelTensor { data, n_r, n_t, n_c, delta_f });
    }
    Ok(Dataset { tag, n_r, n_t, n_c, delta_f, scenes, channels })
}
