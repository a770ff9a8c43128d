//! Procedural aerial-like scenes and bi-temporal pairs.
//!
//! A scene is a terrain raster (low-frequency colour noise with roads painted
//! in) plus a list of non-overlapping objects: rectangular buildings and
//! vegetation blobs. The post-change scene is a copy with objects added,
//! removed or moved. The change mask is exactly the set of pixels whose
//! object membership differs between the two scenes. The post-change image
//! additionally gets a photometric transform (brightness, contrast, tint,
//! illumination gradient) and both images get sensor noise; none of that
//! enters the mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::CdSample;
use crate::seed::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Building,
    Vegetation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Footprint {
    Rect { x: i32, y: i32, w: i32, h: i32 },
    /// Union of discs `(cx, cy, r)`.
    Blob(Vec<(i32, i32, i32)>),
}

impl Footprint {
    pub fn contains(&self, px: i32, py: i32) -> bool {
        match self {
            Footprint::Rect { x, y, w, h } => px >= *x && px < x + w && py >= *y && py < y + h,
            Footprint::Blob(discs) => discs
                .iter()
                .any(|&(cx, cy, r)| (px - cx).pow(2) + (py - cy).pow(2) <= r * r),
        }
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (i32, i32, i32, i32) {
        match self {
            Footprint::Rect { x, y, w, h } => (*x, *y, x + w, y + h),
            Footprint::Blob(discs) => discs.iter().fold((i32::MAX, i32::MAX, i32::MIN, i32::MIN), |b, &(cx, cy, r)| {
                (b.0.min(cx - r), b.1.min(cy - r), b.2.max(cx + r + 1), b.3.max(cy + r + 1))
            }),
        }
    }

    fn translated(&self, dx: i32, dy: i32) -> Self {
        match self {
            Footprint::Rect { x, y, w, h } => Footprint::Rect { x: x + dx, y: y + dy, w: *w, h: *h },
            Footprint::Blob(d) => Footprint::Blob(d.iter().map(|&(cx, cy, r)| (cx + dx, cy + dy, r)).collect()),
        }
    }

    /// Pixels covered inside a `size × size` raster, row-major indices.
    pub fn pixels(&self, size: usize) -> Vec<usize> {
        let (x0, y0, x1, y1) = self.bounds();
        let s = size as i32;
        let mut out = Vec::new();
        for y in y0.max(0)..y1.min(s) {
            for x in x0.max(0)..x1.min(s) {
                if self.contains(x, y) {
                    out.push(y as usize * size + x as usize);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    /// Positive and unique within a pair of scenes; a moved object keeps it.
    pub id: u32,
    pub kind: ObjectKind,
    pub footprint: Footprint,
    pub color: [f32; 3],
    /// Origin of the texture pattern, moved with the object.
    pub anchor: (i32, i32),
    pub texture_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub size: usize,
    /// Terrain and roads, `[3, size, size]` row-major.
    pub ground: Vec<f32>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Object id per pixel, 0 for ground.
    pub fn membership(&self) -> Vec<u32> {
        let mut m = vec![0; self.size * self.size];
        for o in &self.objects {
            for p in o.footprint.pixels(self.size) {
                m[p] = o.id;
            }
        }
        m
    }

    /// Noise-free rendering, values in `[0, 1]`.
    pub fn render(&self) -> Vec<f32> {
        let n = self.size * self.size;
        let mut img = self.ground.clone();
        for o in &self.objects {
            let (x0, y0, x1, y1) = o.footprint.bounds();
            for p in o.footprint.pixels(self.size) {
                let (x, y) = ((p % self.size) as i32, (p / self.size) as i32);
                let local = ((x - o.anchor.0) as i64, (y - o.anchor.1) as i64);
                let tex = hash_unit(o.texture_seed, local.0, local.1) - 0.5;
                let shade = match o.kind {
                    ObjectKind::Building => {
                        let edge = x == x0 || y == y0 || x == x1 - 1 || y == y1 - 1;
                        (if edge { 0.78 } else { 1.0 }) + 0.06 * tex
                    }
                    ObjectKind::Vegetation => 1.0 + 0.35 * tex,
                };
                for c in 0..3 {
                    img[c * n + p] = (o.color[c] * shade).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    fn fits(&self, fp: &Footprint, ignore: Option<u32>) -> bool {
        let (x0, y0, x1, y1) = fp.bounds();
        let s = self.size as i32;
        if x0 < 1 || y0 < 1 || x1 > s - 1 || y1 > s - 1 {
            return false;
        }
        // one pixel of clearance between objects
        self.objects.iter().filter(|o| Some(o.id) != ignore).all(|o| {
            let (a0, b0, a1, b1) = o.footprint.bounds();
            if x1 + 1 <= a0 || a1 + 1 <= x0 || y1 + 1 <= b0 || b1 + 1 <= y0 {
                return true;
            }
            let mine = fp.pixels(self.size);
            let theirs = o.footprint.pixels(self.size);
            !mine.iter().any(|p| {
                let (x, y) = ((p % self.size) as i32, (p / self.size) as i32);
                theirs.iter().any(|q| {
                    let (u, v) = ((q % self.size) as i32, (q / self.size) as i32);
                    (x - u).abs() <= 1 && (y - v).abs() <= 1
                })
            })
        })
    }
}

/// Per-pixel-independent texture value in `[0, 1)`.
fn hash_unit(seed: u64, x: i64, y: i64) -> f32 {
    (derive_seed(&[seed, x as u64, y as u64]) >> 40) as f32 / (1u64 << 24) as f32
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise with a `cells × cells` lattice over the image.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
    let mut out = vec![0.0; size * size];
    let step = size as f32 / cells as f32;
    for y in 0..size {
        let fy = y as f32 / step;
        let (iy, ty) = ((fy as usize).min(cells - 1), smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f32 / step;
            let (ix, tx) = ((fx as usize).min(cells - 1), smoothstep(fx.fract()));
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

const SOIL: [f32; 3] = [0.55, 0.47, 0.36];
const GRASS: [f32; 3] = [0.38, 0.50, 0.30];
const ROAD: [f32; 3] = [0.42, 0.42, 0.44];
const ROOFS: [[f32; 3]; 5] = [
    [0.70, 0.68, 0.66],
    [0.62, 0.36, 0.30],
    [0.48, 0.52, 0.58],
    [0.82, 0.80, 0.74],
    [0.56, 0.50, 0.44],
];
const TREE: [f32; 3] = [0.20, 0.36, 0.18];

fn ground(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let n = size * size;
    let coarse = value_noise(rng, size, (size / 16).max(2));
    let fine = value_noise(rng, size, (size / 4).max(4));
    let mut g = vec![0.0; 3 * n];
    for p in 0..n {
        let mix = (0.75 * coarse[p] + 0.25 * fine[p]).clamp(0.0, 1.0);
        let lum = 0.9 + 0.2 * fine[p];
        for c in 0..3 {
            g[c * n + p] = (SOIL[c] * (1.0 - mix) + GRASS[c] * mix) * lum;
        }
    }
    // roads: straight strips at a random angle, 2-3 px wide
    let roads = rng.random_range(0..=2);
    for _ in 0..roads {
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (nx, ny) = (angle.cos(), angle.sin());
        let offset = rng.random_range(0.2..0.8) * size as f32;
        let c = size as f32 / 2.0;
        let width = rng.random_range(1.0..1.6);
        for y in 0..size {
            for x in 0..size {
                let d = (x as f32 - c) * nx + (y as f32 - c) * ny + c - offset;
                if d.abs() <= width {
                    for ch in 0..3 {
                        g[ch * n + y * size + x] = ROAD[ch];
                    }
                }
            }
        }
    }
    g
}

fn random_object(rng: &mut ChaCha8Rng, size: usize, id: u32) -> SceneObject {
    let s = size as i32;
    let scale = (size as f32 / 64.0).max(0.5);
    if rng.random_bool(0.6) {
        let w = rng.random_range((5.0 * scale) as i32..=(13.0 * scale) as i32).max(3);
        let h = rng.random_range((5.0 * scale) as i32..=(13.0 * scale) as i32).max(3);
        let x = rng.random_range(1..(s - w).max(2));
        let y = rng.random_range(1..(s - h).max(2));
        let mut color = ROOFS[rng.random_range(0..ROOFS.len())];
        let tint: f32 = rng.random_range(0.85..1.12);
        color.iter_mut().for_each(|c| *c = (*c * tint).min(1.0));
        SceneObject {
            id,
            kind: ObjectKind::Building,
            footprint: Footprint::Rect { x, y, w, h },
            color,
            anchor: (x, y),
            texture_seed: rng.random(),
        }
    } else {
        let r0 = rng.random_range((2.5 * scale) as i32..=(5.0 * scale) as i32).max(2);
        let cx = rng.random_range(r0 + 1..(s - r0 - 1).max(r0 + 2));
        let cy = rng.random_range(r0 + 1..(s - r0 - 1).max(r0 + 2));
        let mut discs = vec![(cx, cy, r0)];
        for _ in 0..rng.random_range(0..3) {
            let r = (r0 - rng.random_range(0..=1)).max(2);
            discs.push((cx + rng.random_range(-r0..=r0), cy + rng.random_range(-r0..=r0), r));
        }
        let shade: f32 = rng.random_range(0.8..1.2);
        SceneObject {
            id,
            kind: ObjectKind::Vegetation,
            footprint: Footprint::Blob(discs),
            color: TREE.map(|c| (c * shade).min(1.0)),
            anchor: (cx, cy),
            texture_seed: rng.random(),
        }
    }
}

fn try_place(scene: &mut Scene, rng: &mut ChaCha8Rng, id: u32) -> bool {
    for _ in 0..30 {
        let o = random_object(rng, scene.size, id);
        if scene.fits(&o.footprint, None) {
            scene.objects.push(o);
            return true;
        }
    }
    false
}

fn scene(rng: &mut ChaCha8Rng, size: usize) -> (Scene, u32) {
    let mut sc = Scene {
        size,
        ground: ground(rng, size),
        objects: Vec::new(),
    };
    let area = (size * size) as f32 / 4096.0;
    let target = (rng.random_range(6.0..14.0) * area) as usize;
    let mut next = 1;
    for _ in 0..target {
        if try_place(&mut sc, rng, next) {
            next += 1;
        }
    }
    (sc, next)
}

/// Global colour transform plus an illumination ramp, applied to the
/// post-change image only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub brightness: f32,
    pub contrast: f32,
    pub tint: [f32; 3],
    /// Multiplicative ramp `1 + strength · (u·x + v·y)` over normalized coordinates.
    pub gradient: (f32, f32, f32),
}

impl Photometric {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            tint: [1.0; 3],
            gradient: (0.0, 0.0, 0.0),
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        Self {
            brightness: rng.random_range(-0.14..0.14),
            contrast: rng.random_range(0.7..1.3),
            tint: [0; 3].map(|_| rng.random_range(0.9..1.1)),
            gradient: (rng.random_range(0.0..0.3), angle.cos(), angle.sin()),
        }
    }

    pub fn apply(&self, img: &[f32], size: usize) -> Vec<f32> {
        let n = size * size;
        let (strength, u, v) = self.gradient;
        let mut out = vec![0.0; img.len()];
        for c in 0..3 {
            for p in 0..n {
                let (x, y) = ((p % size) as f32 / size as f32 - 0.5, (p / size) as f32 / size as f32 - 0.5);
                let ramp = 1.0 + strength * (u * x + v * y);
                let val = ((img[c * n + p] - 0.5) * self.contrast + 0.5 + self.brightness) * self.tint[c] * ramp;
                out[c * n + p] = val.clamp(0.0, 1.0);
            }
        }
        out
    }
}

pub const SENSOR_NOISE: f32 = 0.03;

fn add_noise(img: &mut [f32], rng: &mut impl Rng) {
    for v in img {
        let z: f32 = rng.sample(StandardNormal);
        *v = (*v + SENSOR_NOISE * z).clamp(0.0, 1.0);
    }
}

fn to_tensor(img: Vec<f32>, size: usize) -> Tensor<f32> {
    Tensor::new(vec![3, size, size], img).expect("image buffer matches shape")
}

/// One unlabeled image, deterministic in `(seed, index)`.
pub fn pretrain_image(seed: u64, index: u64, size: usize) -> Tensor<f32> {
    let mut rng = rng_for(&[seed, stream::PRETRAIN_IMAGE, index]);
    let (sc, _) = scene(&mut rng, size);
    let photo = Photometric::random(&mut rng);
    let mut img = photo.apply(&sc.render(), size);
    add_noise(&mut img, &mut rng);
    to_tensor(img, size)
}

/// `n` unlabeled images at `size × size`, values in `[0, 1]`.
pub fn synth_pretrain_corpus(n: usize, size: usize, seed: u64) -> impl Iterator<Item = Tensor<f32>> {
    (0..n as u64).map(move |i| pretrain_image(seed, i, size))
}

/// A generated pair with everything needed to audit its mask.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub sample: CdSample,
    pub scene_a: Scene,
    pub scene_b: Scene,
    pub photometric: Photometric,
}

fn coverage(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn edit(scene: &mut Scene, rng: &mut ChaCha8Rng, next_id: &mut u32) {
    let roll: f32 = rng.random();
    if roll < 0.5 || scene.objects.is_empty() {
        if try_place(scene, rng, *next_id) {
            *next_id += 1;
        }
    } else if roll < 0.75 {
        let i = rng.random_range(0..scene.objects.len());
        scene.objects.remove(i);
    } else {
        let i = rng.random_range(0..scene.objects.len());
        let id = scene.objects[i].id;
        for _ in 0..20 {
            let (dx, dy): (i32, i32) = (rng.random_range(-12..=12), rng.random_range(-12..=12));
            if dx.abs().max(dy.abs()) < 4 {
                continue;
            }
            let moved = scene.objects[i].footprint.translated(dx, dy);
            if scene.fits(&moved, Some(id)) {
                let o = &mut scene.objects[i];
                o.footprint = moved;
                o.anchor = (o.anchor.0 + dx, o.anchor.1 + dy);
                break;
            }
        }
    }
}

/// Pair `index` of a change-detection set. Edits are applied while they
/// bring the changed-pixel fraction closer to `change_rate`.
pub fn synth_cd_pair(seed: u64, index: u64, size: usize, change_rate: f64) -> SynthPair {
    let mut rng = rng_for(&[seed, stream::CD_PAIR, index]);
    let (scene_a, mut next_id) = scene(&mut rng, size);
    let mut scene_b = scene_a.clone();
    let target = change_rate.clamp(0.0, 1.0) * (size * size) as f64;
    let before = scene_a.membership();
    let mut current = 0usize;
    for _ in 0..200 {
        if current as f64 >= target {
            break;
        }
        let mut candidate = scene_b.clone();
        let mut id = next_id;
        edit(&mut candidate, &mut rng, &mut id);
        let cov = coverage(&before, &candidate.membership());
        if (cov as f64 - target).abs() < (current as f64 - target).abs() {
            scene_b = candidate;
            next_id = id;
            current = cov;
        } else if cov > current {
            // overshooting edit: stop rather than bias coverage upward
            break;
        }
    }
    let mask: Vec<u8> = before
        .iter()
        .zip(scene_b.membership())
        .map(|(a, b)| u8::from(*a != b))
        .collect();

    let mut jitter_rng = rng_for(&[seed, stream::CD_JITTER, index]);
    let photometric = Photometric::random(&mut jitter_rng);
    let mut img_a = scene_a.render();
    let mut img_b = photometric.apply(&scene_b.render(), size);
    add_noise(&mut img_a, &mut jitter_rng);
    add_noise(&mut img_b, &mut jitter_rng);
    SynthPair {
        sample: CdSample {
            id: format!("synth_{index:05}"),
            img_a: to_tensor(img_a, size),
            img_b: to_tensor(img_b, size),
            mask,
        },
        scene_a,
        scene_b,
        photometric,
    }
}

/// Pairs `offset .. offset + n`.
pub fn synth_cd_range(n: usize, offset: u64, size: usize, change_rate: f64, seed: u64) -> Vec<CdSample> {
    (offset..offset + n as u64)
        .map(|i| synth_cd_pair(seed, i, size, change_rate).sample)
        .collect()
}

pub fn synth_cd_dataset(n: usize, size: usize, change_rate: f64, seed: u64) -> Vec<CdSample> {
    synth_cd_range(n, 0, size, change_rate, seed)
}
