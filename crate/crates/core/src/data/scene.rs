use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameters of the procedural scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Segmentation classes including background (class 0).
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Amplitude of per-pixel uniform image noise.
    pub noise: f64,
    /// When false, depth/edge/keypoint targets are rendered from a
    /// geometry drawn independently of the one in the image.
    pub correlated: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 4,
            min_shapes: 1,
            max_shapes: 3,
            noise: 0.05,
            correlated: true,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 segmentation classes"));
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::invalid("too many classes"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes exceeds max_shapes"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be nonnegative"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Segmentation class in `1..classes`.
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    /// Distance from the camera in `[0.5, 2.5]`.
    pub depth: f64,
    /// Brightness offset applied on top of the class intensity.
    pub shade: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Rect { half_w, half_h } => (x - self.cx).abs() <= half_w && (y - self.cy).abs() <= half_h,
            ShapeKind::Disk { radius } => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= radius * radius,
        }
    }
}

/// Geometry shared by every task target of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub shapes: Vec<Shape>,
    /// Background brightness tilt in `[-1, 1]`.
    pub tilt: f64,
}

/// One rendered example: an image plus every task target.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    /// `1 × h × w` intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub seg: Vec<u16>,
    /// Per-pixel depth in `[0, 4]`.
    pub depth: Vec<f64>,
    /// Occlusion boundaries in `{0, 1}`.
    pub edge: Vec<f64>,
    /// Gaussian blobs at shape centres, in `[0, 1]`.
    pub keypoint: Vec<f64>,
}

impl ToyScene {
    /// The reconstruction target is the image itself.
    pub fn recon(&self) -> &[f64] {
        &self.image
    }
}

const KEYPOINT_SIGMA: f64 = 1.5;

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Mean intensity of class `c`; background (0) sits mid-range.
fn class_intensity(c: usize, classes: usize) -> f64 {
    if c == 0 {
        0.45
    } else {
        // spread foreground classes over [0.1, 0.9] skipping the background band
        let t = (c - 1) as f64 / (classes - 1).max(2) as f64;
        if t < 0.5 {
            0.1 + 0.5 * t
        } else {
            0.55 + 0.7 * (t - 0.5)
        }
    }
}

/// Class-dependent texture so classes differ in more than brightness.
fn class_texture(c: usize, x: usize, y: usize) -> f64 {
    match c % 3 {
        0 => 0.0,
        1 => {
            if (y / 2) % 2 == 0 {
                0.06
            } else {
                -0.06
            }
        }
        _ => {
            if (x / 2 + y / 2) % 2 == 0 {
                0.06
            } else {
                -0.06
            }
        }
    }
}

pub fn sample_geometry(rng: &mut ChaCha8Rng, params: &SceneParams) -> SceneGeometry {
    let (h, w) = (params.height as f64, params.width as f64);
    let n = rng.random_range(params.min_shapes..=params.max_shapes);
    let scale = h.min(w);
    let mut shapes: Vec<Shape> = (0..n)
        .map(|_| {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect {
                    half_w: rng.random_range(0.12..0.3) * scale,
                    half_h: rng.random_range(0.12..0.3) * scale,
                }
            } else {
                ShapeKind::Disk {
                    radius: rng.random_range(0.14..0.3) * scale,
                }
            };
            Shape {
                kind,
                class: rng.random_range(1..params.classes),
                cx: rng.random_range(0.15..0.85) * w,
                cy: rng.random_range(0.15..0.85) * h,
                depth: rng.random_range(0.5..2.5),
                shade: rng.random_range(-0.05..0.05),
            }
        })
        .collect();
    // painter's order: far shapes first
    shapes.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    SceneGeometry {
        shapes,
        tilt: rng.random_range(-1.0..1.0),
    }
}

/// Index of the visible shape per pixel (`None` = background).
fn visibility(geom: &SceneGeometry, params: &SceneParams) -> Vec<Option<usize>> {
    let mut owner = vec![None; params.pixels()];
    for y in 0..params.height {
        for x in 0..params.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (i, s) in geom.shapes.iter().enumerate() {
                if s.contains(px, py) {
                    owner[y * params.width + x] = Some(i);
                }
            }
        }
    }
    owner
}

struct Rendered {
    seg: Vec<u16>,
    depth: Vec<f64>,
    edge: Vec<f64>,
    keypoint: Vec<f64>,
}

fn render_targets(geom: &SceneGeometry, params: &SceneParams) -> Rendered {
    let (h, w) = (params.height, params.width);
    let owner = visibility(geom, params);
    let mut seg = vec![0u16; h * w];
    let mut depth = vec![0.0; h * w];
    let mut edge = vec![0.0; h * w];
    let mut keypoint = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match owner[i] {
                Some(s) => {
                    seg[i] = geom.shapes[s].class as u16;
                    depth[i] = geom.shapes[s].depth;
                }
                None => {
                    depth[i] = 3.0 + 0.8 * (y as f64 / (h - 1) as f64);
                }
            }
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            if neighbours.iter().flatten().any(|&j| owner[j] != owner[i]) {
                edge[i] = 1.0;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            keypoint[i] = geom
                .shapes
                .iter()
                .map(|s| (-((px - s.cx).powi(2) + (py - s.cy).powi(2)) / (2.0 * KEYPOINT_SIGMA * KEYPOINT_SIGMA)).exp())
                .fold(0.0, f64::max);
        }
    }
    Rendered {
        seg,
        depth: depth.into_iter().map(|d| quantize(d.clamp(0.0, 4.0))).collect(),
        edge,
        keypoint: keypoint.into_iter().map(quantize).collect(),
    }
}

fn render_image(geom: &SceneGeometry, params: &SceneParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (params.height, params.width);
    let owner = visibility(geom, params);
    let mut image = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = match owner[i] {
                Some(s) => {
                    let sh = &geom.shapes[s];
                    class_intensity(sh.class, params.classes) + sh.shade + class_texture(sh.class, x, y)
                }
                None => class_intensity(0, params.classes) + 0.1 * geom.tilt * (x as f64 / (w - 1) as f64 - 0.5),
            };
            let noise = if params.noise > 0.0 {
                rng.random_range(-params.noise..=params.noise)
            } else {
                0.0
            };
            image[i] = quantize((base + noise).clamp(0.0, 1.0));
        }
    }
    image
}

/// Renders one scene. With `independent` set, depth/edge/keypoint come
/// from that geometry instead of `geom`.
pub fn render_scene(
    geom: &SceneGeometry,
    independent: Option<&SceneGeometry>,
    params: &SceneParams,
    rng: &mut ChaCha8Rng,
) -> ToyScene {
    let image = render_image(geom, params, rng);
    let main = render_targets(geom, params);
    let aux = independent.map(|g| render_targets(g, params));
    let aux = aux.as_ref().unwrap_or(&main);
    ToyScene {
        image,
        seg: main.seg.clone(),
        depth: aux.depth.clone(),
        edge: aux.edge.clone(),
        keypoint: aux.keypoint.clone(),
    }
}

/// Deterministic scene generation from a per-scene seed.
pub fn generate_scene(scene_seed: u64, params: &SceneParams) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let geom = sample_geometry(&mut rng, params);
    let other = (!params.correlated).then(|| sample_geometry(&mut rng, params));
    render_scene(&geom, other.as_ref(), params, &mut rng)
}
