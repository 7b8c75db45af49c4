//! Deterministic synthetic multi-sensor tactile world.
//!
//! Procedural textured objects are touched at grid-placed positions; every
//! touch is rendered once per sensor through that sensor's color mixing,
//! geometric warp, gain and speckle noise, producing an aligned group. A
//! vision crop (the raw texture, no gel transform) and a template attribute
//! text are attached per the modality schedule. Rendering is a pure function
//! of the spec: identical specs produce byte-identical directory trees.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, Split, TactileSample};
use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::rng::{stream, StreamTag};

/// Per-sensor render transform. Distinct profiles create the cross-sensor
/// appearance gap the alignment stage has to bridge.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SensorProfile {
    pub name: String,
    /// 3x3 channel mixing matrix, row-major; must be invertible.
    pub color_map: [[f32; 3]; 3],
    pub color_offset: [f32; 3],
    /// Sinusoidal displacement amplitude in pixels.
    pub warp_amp: f32,
    /// Displacement field spatial frequency (cycles per image).
    pub warp_freq: f32,
    pub warp_phase: (f32, f32),
    pub lighting_gain: f32,
    /// Multiplicative speckle level on the contact signal.
    pub noise_sigma: f32,
    /// Flat no-contact plate brightness.
    pub base_level: f32,
}

impl SensorProfile {
    fn det(&self) -> f32 {
        let m = &self.color_map;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Which paired modalities each sensor's samples carry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModalityRule {
    pub sensor: String,
    pub vision: bool,
    pub text: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldSpec {
    pub n_objects: usize,
    pub n_positions_per_object: usize,
    pub sensors: Vec<SensorProfile>,
    pub materials: Vec<String>,
    /// Frames rendered per touch (= clip length F plus the next-frame target).
    pub frames_per_touch: usize,
    pub image_size: (usize, usize),
    /// Tokenizer patch side; image dims must divide by it.
    pub patch_size: usize,
    pub texture_size: usize,
    /// Press depth of the first and last frame; intermediate frames are
    /// linearly interpolated, so depth increases strictly over a touch.
    pub depth_range: (f32, f32),
    pub modality: Vec<ModalityRule>,
    /// Fractions assigned per alignment group.
    pub train_fraction: f32,
    pub val_fraction: f32,
    pub seed: u64,
}

impl WorldSpec {
    /// Small world used by module-level tests: 20 objects x 3 positions x 4
    /// sensors, 4 materials, 4 frames of 32x32.
    pub fn desk_default(seed: u64) -> Self {
        WorldSpec {
            n_objects: 20,
            n_positions_per_object: 3,
            sensors: default_profiles(),
            materials: default_materials(),
            frames_per_touch: 4,
            image_size: (32, 32),
            patch_size: 4,
            texture_size: 176,
            depth_range: (0.35, 1.0),
            modality: default_modality(),
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::InvalidSpec("n_objects must be >= 1".into()));
        }
        if self.frames_per_touch < 2 {
            return Err(Error::InvalidSpec("frames_per_touch must be >= 2".into()));
        }
        let (h, w) = self.image_size;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::InvalidSpec(format!(
                "image {h}x{w} not divisible by patch {}",
                self.patch_size
            )));
        }
        if self.sensors.is_empty() || self.materials.is_empty() {
            return Err(Error::InvalidSpec("need at least one sensor and material".into()));
        }
        for s in &self.sensors {
            if s.det().abs() < 1e-4 {
                return Err(Error::InvalidSpec(format!(
                    "sensor {:?} color_map is singular",
                    s.name
                )));
            }
            if s.noise_sigma < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "sensor {:?} noise_sigma must be >= 0",
                    s.name
                )));
            }
        }
        let mut names: Vec<&str> = self.sensors.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.sensors.len() {
            return Err(Error::InvalidSpec("duplicate sensor names".into()));
        }
        if self.texture_size < h + 8 || self.texture_size < w + 8 {
            return Err(Error::InvalidSpec("texture_size too small for crops".into()));
        }
        if !(0.0..=1.0).contains(&(self.train_fraction + self.val_fraction)) {
            return Err(Error::InvalidSpec("split fractions exceed 1".into()));
        }
        Ok(())
    }

    pub fn depth_profile(&self) -> Vec<f32> {
        let n = self.frames_per_touch;
        (0..n)
            .map(|t| {
                let a = t as f32 / (n - 1) as f32;
                self.depth_range.0 + a * (self.depth_range.1 - self.depth_range.0)
            })
            .collect()
    }

    fn rule_for(&self, sensor: &str) -> ModalityRule {
        self.modality
            .iter()
            .find(|r| r.sensor == sensor)
            .cloned()
            .unwrap_or_else(|| ModalityRule { sensor: sensor.to_string(), vision: true, text: true })
    }
}

pub fn default_materials() -> Vec<String> {
    vec!["rubber".into(), "metal".into(), "wood".into(), "fabric".into()]
}

/// One full-coverage sensor, one without text, one without vision, and one
/// full sensor conventionally held out as unseen in transfer experiments.
pub fn default_modality() -> Vec<ModalityRule> {
    vec![
        ModalityRule { sensor: "gelsight".into(), vision: true, text: true },
        ModalityRule { sensor: "digit".into(), vision: true, text: false },
        ModalityRule { sensor: "gelslim".into(), vision: false, text: true },
        ModalityRule { sensor: "duragel".into(), vision: true, text: true },
    ]
}

pub fn default_profiles() -> Vec<SensorProfile> {
    vec![
        SensorProfile {
            name: "gelsight".into(),
            color_map: [[0.95, 0.03, 0.02], [0.04, 0.90, 0.06], [0.05, 0.05, 0.90]],
            color_offset: [0.06, 0.07, 0.12],
            warp_amp: 0.7,
            warp_freq: 1.5,
            warp_phase: (0.3, 1.1),
            lighting_gain: 1.0,
            noise_sigma: 0.03,
            base_level: 0.38,
        },
        SensorProfile {
            name: "digit".into(),
            color_map: [[0.80, 0.15, 0.05], [0.08, 0.92, 0.00], [0.02, 0.18, 0.80]],
            color_offset: [0.03, 0.11, 0.05],
            warp_amp: 1.2,
            warp_freq: 2.0,
            warp_phase: (1.7, 0.4),
            lighting_gain: 1.10,
            noise_sigma: 0.04,
            base_level: 0.34,
        },
        SensorProfile {
            name: "gelslim".into(),
            color_map: [[0.95, 0.00, 0.05], [0.15, 0.75, 0.10], [0.05, 0.10, 0.85]],
            color_offset: [0.13, 0.04, 0.04],
            warp_amp: 0.5,
            warp_freq: 1.0,
            warp_phase: (0.0, 2.2),
            lighting_gain: 0.92,
            noise_sigma: 0.02,
            base_level: 0.41,
        },
        SensorProfile {
            name: "duragel".into(),
            color_map: [[0.88, 0.08, 0.04], [0.07, 0.88, 0.05], [0.04, 0.10, 0.86]],
            color_offset: [0.07, 0.07, 0.07],
            warp_amp: 0.9,
            warp_freq: 1.2,
            warp_phase: (2.6, 1.9),
            lighting_gain: 1.04,
            noise_sigma: 0.03,
            base_level: 0.37,
        },
    ]
}

/// Procedural object surface: a height map in [0,1] plus probe-relevant
/// attribute parameters.
#[derive(Debug, Clone)]
pub struct Texture {
    pub size: usize,
    pub height: Vec<f32>,
    pub material: String,
    pub hardness: f32,
    pub roughness: f32,
}

impl Texture {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.height[y * self.size + x]
    }
}

/// Smoothstep-interpolated value noise at one octave.
fn value_noise(size: usize, cells: usize, amp: f32, rng: &mut impl Rng, out: &mut [f32]) {
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f32>()).collect();
    let step = size as f32 / cells as f32;
    for y in 0..size {
        for x in 0..size {
            let gy = y as f32 / step;
            let gx = x as f32 / step;
            let y0 = (gy as usize).min(cells - 1);
            let x0 = (gx as usize).min(cells - 1);
            let fy = smooth(gy - y0 as f32);
            let fx = smooth(gx - x0 as f32);
            let g = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + g(y0, x0 + 1) * (1.0 - fy) * fx
                + g(y0 + 1, x0) * fy * (1.0 - fx)
                + g(y0 + 1, x0 + 1) * fy * fx;
            out[y * size + x] += amp * v;
        }
    }
}

#[inline]
fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Material-dependent multi-octave texture synthesis. Octave amplitudes,
/// grating frequency/orientation and blob density separate the classes.
pub fn gen_texture(spec: &WorldSpec, object: usize) -> Result<Texture> {
    let material_idx = object % spec.materials.len();
    let material = spec.materials[material_idx].clone();
    let mut rng = stream(spec.seed, StreamTag::Texture, &[object as u64]);
    let size = spec.texture_size;
    let mut h = vec![0.0f32; size * size];

    // Octave amplitude sets per material class (coarse..fine).
    let class = material_idx % 4;
    let octaves: [f32; 4] = match class {
        0 => [0.55, 0.30, 0.05, 0.02], // rubber-like: broad soft blobs
        1 => [0.10, 0.05, 0.04, 0.02], // metal-like: nearly flat
        2 => [0.25, 0.15, 0.30, 0.05], // wood-like: mid-scale structure
        _ => [0.05, 0.10, 0.35, 0.45], // fabric-like: fine detail
    };
    for (i, &amp) in octaves.iter().enumerate() {
        let cells = 4 << i;
        value_noise(size, cells, amp, &mut rng, &mut h);
    }

    // Directional grating for wood/fabric, faint machining lines for metal.
    let (g_amp, g_freq): (f32, f32) = match class {
        1 => (0.10, 48.0),
        2 => (0.45, 10.0 + rng.gen::<f32>() * 4.0),
        3 => (0.35, 28.0 + rng.gen::<f32>() * 8.0),
        _ => (0.0, 0.0),
    };
    if g_amp > 0.0 {
        let angle = rng.gen::<f32>() * std::f32::consts::PI;
        let (s, c) = angle.sin_cos();
        let phase = rng.gen::<f32>() * std::f32::consts::TAU;
        let cross = class == 3;
        for y in 0..size {
            for x in 0..size {
                let u = (c * x as f32 + s * y as f32) / size as f32;
                let mut v = (u * g_freq * std::f32::consts::TAU + phase).sin() * 0.5 + 0.5;
                if cross {
                    let u2 = (-s * x as f32 + c * y as f32) / size as f32;
                    v = 0.5 * v
                        + 0.5 * ((u2 * g_freq * std::f32::consts::TAU + phase).sin() * 0.5 + 0.5);
                }
                h[y * size + x] += g_amp * v;
            }
        }
    }

    let max = h.iter().cloned().fold(f32::MIN, f32::max);
    let min = h.iter().cloned().fold(f32::MAX, f32::min);
    let span = (max - min).max(1e-6);
    for v in &mut h {
        *v = (*v - min) / span;
    }

    let (hard_base, rough_base) = match class {
        0 => (0.2, 0.7),
        1 => (0.9, 0.2),
        2 => (0.8, 0.6),
        _ => (0.3, 0.8),
    };
    let hardness = (hard_base + (rng.gen::<f32>() - 0.5) * 0.2).clamp(0.0, 1.0);
    let roughness = (rough_base + (rng.gen::<f32>() - 0.5) * 0.2).clamp(0.0, 1.0);

    Ok(Texture { size, height: h, material, hardness, roughness })
}

/// Deterministic template attribute text: material plus binary
/// hardness/roughness words thresholded at 0.5.
pub fn attribute_text(
    spec: &WorldSpec,
    material: &str,
    hardness: f32,
    roughness: f32,
) -> Result<String> {
    if !spec.materials.iter().any(|m| m == material) {
        return Err(Error::UnknownMaterial(material.to_string()));
    }
    let hard = if hardness >= 0.5 { "hard" } else { "soft" };
    let rough = if roughness >= 0.5 { "rough" } else { "smooth" };
    Ok(format!("{material}, {hard}, {rough}"))
}

/// Radially decaying press profile; deeper presses both brighten and widen
/// the contact patch, strictly monotone in depth at every interior pixel.
#[inline]
fn dome(y: f32, x: f32, h: f32, w: f32, depth: f32) -> f32 {
    let cy = (h - 1.0) / 2.0;
    let cx = (w - 1.0) / 2.0;
    let r2 = ((y - cy) / (0.5 * h)).powi(2) + ((x - cx) / (0.5 * w)).powi(2);
    let radius = 0.55 + 0.45 * depth;
    (1.0 - r2 / (radius * radius)).max(0.0) * depth
}

fn color_transform(profile: &SensorProfile, raw: [f32; 3]) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for ch in 0..3 {
        let mut v = profile.color_offset[ch];
        for (j, &r) in raw.iter().enumerate() {
            v += profile.color_map[ch][j] * profile.lighting_gain * r;
        }
        out[ch] = v.clamp(0.0, 1.0);
    }
    out
}

/// The sensor's no-contact frame (quantized exactly like rendered frames).
pub fn render_background(profile: &SensorProfile, h: usize, w: usize) -> ImageBuf {
    let mut img = ImageBuf::new(h, w);
    let level = profile.base_level;
    let px = color_transform(profile, [level, level, level]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                img.set(y, x, ch, px[ch]);
            }
        }
    }
    img.quantize_u8();
    img
}

/// Render one touch through one sensor: one frame per depth value.
///
/// Frame `t` is a pure function of (texture, crop, depth_profile[t], profile,
/// noise stream); zero depth reproduces the background exactly.
pub fn render_touch(
    texture: &Texture,
    crop: (usize, usize),
    depths: &[f32],
    profile: &SensorProfile,
    image_size: (usize, usize),
    noise_rng: &mut impl Rng,
) -> Result<Vec<ImageBuf>> {
    let (h, w) = image_size;
    let (cy, cx) = crop;
    if cy + h > texture.size || cx + w > texture.size {
        return Err(Error::OutOfBounds { x: cx, y: cy, side: h.max(w), limit: texture.size });
    }
    let mut frames = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut img = ImageBuf::new(h, w);
        // Per-frame speckle field, consumed in fixed raster order.
        let noise: Vec<f32> = (0..h * w).map(|_| (noise_rng.gen::<f32>() - 0.5) * 2.0).collect();
        for y in 0..h {
            for x in 0..w {
                // Geometric warp: sample the texture at displaced coordinates.
                let wy = profile.warp_amp
                    * (std::f32::consts::TAU * profile.warp_freq * x as f32 / w as f32
                        + profile.warp_phase.0)
                        .sin();
                let wx = profile.warp_amp
                    * (std::f32::consts::TAU * profile.warp_freq * y as f32 / h as f32
                        + profile.warp_phase.1)
                        .sin();
                let ty = (cy as f32 + y as f32 + wy).clamp(0.0, (texture.size - 1) as f32);
                let tx = (cx as f32 + x as f32 + wx).clamp(0.0, (texture.size - 1) as f32);
                let tex = bilinear(texture, ty, tx);
                let mut contact =
                    dome(y as f32, x as f32, h as f32, w as f32, depth) * (0.25 + 0.75 * tex) * 0.5;
                contact *= 1.0 + profile.noise_sigma * noise[y * w + x];
                let level = profile.base_level;
                let raw = [level + contact, level + 0.92 * contact, level + 0.85 * contact];
                let px = color_transform(profile, raw);
                for ch in 0..3 {
                    img.set(y, x, ch, px[ch]);
                }
            }
        }
        img.quantize_u8();
        frames.push(img);
    }
    Ok(frames)
}

fn bilinear(t: &Texture, y: f32, x: f32) -> f32 {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(t.size - 1);
    let x1 = (x0 + 1).min(t.size - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    t.at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + t.at(y0, x1) * (1.0 - fy) * fx
        + t.at(y1, x0) * fy * (1.0 - fx)
        + t.at(y1, x1) * fy * fx
}

/// Vision modality: the raw texture crop, no gel transform, shared by every
/// sensor in the group.
pub fn render_vision(
    texture: &Texture,
    crop: (usize, usize),
    image_size: (usize, usize),
) -> Result<ImageBuf> {
    let (h, w) = image_size;
    let (cy, cx) = crop;
    if cy + h > texture.size || cx + w > texture.size {
        return Err(Error::OutOfBounds { x: cx, y: cy, side: h.max(w), limit: texture.size });
    }
    let mut img = ImageBuf::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = 0.15 + 0.7 * texture.at(cy + y, cx + x);
            for ch in 0..3 {
                img.set(y, x, ch, v);
            }
        }
    }
    img.quantize_u8();
    Ok(img)
}

/// Grid-with-jitter crop placement: positions of one object occupy distinct
/// cells so touches at different positions see different texture.
fn crop_for(spec: &WorldSpec, object: usize, position: usize) -> (usize, usize) {
    let (h, w) = spec.image_size;
    let cell_h = h + 8;
    let cell_w = w + 8;
    let grid_cols = (spec.texture_size / cell_w).max(1);
    let grid_rows = (spec.texture_size / cell_h).max(1);
    let cell = position % (grid_cols * grid_rows);
    let mut rng = stream(spec.seed, StreamTag::Touch, &[object as u64, position as u64]);
    let jy = rng.gen_range(0..=(cell_h - h).min(8));
    let jx = rng.gen_range(0..=(cell_w - w).min(8));
    let cy = (cell / grid_cols) * cell_h + jy;
    let cx = (cell % grid_cols) * cell_w + jx;
    (cy.min(spec.texture_size - h), cx.min(spec.texture_size - w))
}

fn split_for(spec: &WorldSpec, object: usize, position: usize) -> Split {
    let mut rng = stream(spec.seed, StreamTag::Split, &[object as u64, position as u64]);
    let u = rng.gen::<f32>();
    if u < spec.train_fraction {
        Split::Train
    } else if u < spec.train_fraction + spec.val_fraction {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generate the world under `out_dir`: per-sensor backgrounds, per-sample
/// frame PNGs, shared vision crops, and `manifest.jsonl`.
pub fn generate_world(spec: &WorldSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("frames"))?;
    fs::create_dir_all(out_dir.join("vision"))?;
    fs::create_dir_all(out_dir.join("backgrounds"))?;

    let (h, w) = spec.image_size;
    for profile in &spec.sensors {
        let bg = render_background(profile, h, w);
        bg.save_png(&out_dir.join("backgrounds").join(format!("{}.png", profile.name)))?;
    }

    let depths = spec.depth_profile();
    let mut samples = Vec::new();
    for object in 0..spec.n_objects {
        let texture = gen_texture(spec, object)?;
        let object_id = format!("obj{object:03}-{}", texture.material);
        let text = attribute_text(spec, &texture.material, texture.hardness, texture.roughness)?;
        for position in 0..spec.n_positions_per_object {
            let crop = crop_for(spec, object, position);
            let split = split_for(spec, object, position);
            let group_id = format!("g{object:03}_{position:02}");
            let position_id = format!("pos{position:02}");

            let group_needs_vision = spec.sensors.iter().any(|s| spec.rule_for(&s.name).vision);
            let vision_rel = format!("vision/{group_id}.png");
            if group_needs_vision {
                let vis = render_vision(&texture, crop, spec.image_size)?;
                vis.save_png(&out_dir.join(&vision_rel))?;
            }

            for (k, profile) in spec.sensors.iter().enumerate() {
                let sample_id = format!("{}_{object:03}_{position:02}", profile.name);
                let mut noise_rng = stream(
                    spec.seed,
                    StreamTag::Noise,
                    &[object as u64, position as u64, k as u64],
                );
                let frames = render_touch(
                    &texture,
                    crop,
                    &depths,
                    profile,
                    spec.image_size,
                    &mut noise_rng,
                )?;
                let dir = out_dir.join("frames").join(&sample_id);
                fs::create_dir_all(&dir)?;
                let mut frame_paths = Vec::with_capacity(frames.len());
                for (t, frame) in frames.iter().enumerate() {
                    let rel = format!("frames/{sample_id}/f{t}.png");
                    frame.save_png(&out_dir.join(&rel))?;
                    frame_paths.push(rel);
                }
                let rule = spec.rule_for(&profile.name);
                samples.push(TactileSample {
                    id: sample_id,
                    sensor: profile.name.clone(),
                    frames: frame_paths,
                    object_id: object_id.clone(),
                    position_id: position_id.clone(),
                    group_id: group_id.clone(),
                    vision: (rule.vision && group_needs_vision).then(|| vision_rel.clone()),
                    text: rule.text.then(|| text.clone()),
                    split,
                });
            }
        }
    }
    let manifest = Manifest::from_samples(samples)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    fs::write(out_dir.join("world.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(manifest)
}
