//! Synthetic paired-scene dataset, PPM image I/O and the directory loader.
//!
//! A scene is a set of objects on the unit ground plane. Three views are
//! rendered per scene: an orthographic top-down aerial image, a crude
//! fixed-camera ground view (each object becomes a vertical quad: screen x
//! is the object's plane x, the base row and on-screen height follow its
//! depth, painter-sorted far to near, sky gradient above a horizon at 40%
//! height), and a semantic map of the ground view filled with exact palette
//! colors. The camera model is deliberately crude; what matters is a
//! deterministic, learnable aerial→ground correspondence in which object
//! height is invisible from above but explicit in the semantic map.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Road,
    Building,
    Tree,
    Car,
    Grass,
    Sky,
}

/// Exact semantic palette. Object colors (with jitter and shading) stay
/// component-wise distinct from both backgrounds: everything is darker in
/// blue than any sky pixel and differs from grass in red or green.
pub fn palette(class: Class) -> [u8; 3] {
    match class {
        Class::Road => [90, 90, 90],
        Class::Building => [200, 80, 60],
        Class::Tree => [20, 100, 30],
        Class::Car => [200, 40, 40],
        Class::Grass => [60, 140, 60],
        Class::Sky => [135, 190, 235],
    }
}

const SKY_TOP: [f32; 3] = [150.0, 200.0, 240.0];
const SKY_HORIZON: [f32; 3] = [100.0, 160.0, 220.0];

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub class: Class,
    pub x0: f32,
    pub x1: f32,
    /// Depth range in [0, 1]; 0 is nearest the camera.
    pub z0: f32,
    pub z1: f32,
    pub height: f32,
    pub color: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Deterministic scene draw for (dataset seed, scene index).
    pub fn generate(seed: u64, index: usize) -> SceneSpec {
        let mut rng = Rng::new(seed, &format!("scene.{index}"));
        let mut objects = Vec::new();

        if rng.uniform() < 0.8 {
            let z0 = rng.range(0.15, 0.7);
            objects.push(SceneObject {
                class: Class::Road,
                x0: 0.0,
                x1: 1.0,
                z0,
                z1: (z0 + rng.range(0.08, 0.2)).min(0.95),
                height: 0.0,
                color: jitter(palette(Class::Road), &mut rng),
            });
        }

        let count = 3 + rng.below(4); // 3..=6
        for _ in 0..count {
            let class = match rng.below(10) {
                0..=3 => Class::Building,
                4..=6 => Class::Tree,
                _ => Class::Car,
            };
            let x0 = rng.range(0.0, 0.8);
            let x1 = (x0 + rng.range(0.08, 0.25)).min(1.0);
            let z0 = rng.range(0.05, 0.8);
            let z1 = (z0 + rng.range(0.05, 0.15)).min(0.95);
            let height = match class {
                Class::Building => rng.range(0.3, 0.9),
                Class::Tree => rng.range(0.2, 0.5),
                _ => rng.range(0.05, 0.15),
            };
            objects.push(SceneObject {
                class,
                x0,
                x1,
                z0,
                z1,
                height,
                color: jitter(palette(class), &mut rng),
            });
        }
        SceneSpec { seed, objects }
    }
}

fn jitter(base: [u8; 3], rng: &mut Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base) {
        let d = rng.below(41) as i32 - 20;
        *o = (b as i32 + d).clamp(20, 225) as u8;
    }
    out
}

/// Plain interleaved-RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(w: usize, h: usize, color: [u8; 3]) -> Image {
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            data.extend_from_slice(&color);
        }
        Image { w, h, data }
    }

    pub fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn fill_rect(&mut self, x0: usize, x1: usize, y0: usize, y1: usize, color: [u8; 3]) {
        for y in y0..=y1.min(self.h - 1) {
            for x in x0..=x1.min(self.w - 1) {
                self.put(x, y, color);
            }
        }
    }
}

pub struct ImageTriplet {
    pub aerial: Image,
    pub semantic: Image,
    pub ground: Image,
}

fn check_size(size: usize) -> Result<()> {
    if ![32, 64, 128, 256].contains(&size) {
        return Err(Error::Config(format!("size {size} not in {{32, 64, 128, 256}}")));
    }
    Ok(())
}

fn horizon_row(size: usize) -> usize {
    (size as f32 * 0.4) as usize
}

/// Ground-plane depth → screen row (horizon at far, bottom edge at near).
fn depth_to_row(z: f32, size: usize) -> usize {
    let h = horizon_row(size) as f32;
    let r = h + (size as f32 - 1.0 - h) * (1.0 - z);
    (r as usize).min(size - 1)
}

fn col_span(x0: f32, x1: f32, size: usize) -> (usize, usize) {
    let c0 = ((x0 * size as f32) as usize).min(size - 1);
    let c1 = ((x1 * size as f32) as usize).max(c0).min(size - 1);
    (c0, c1)
}

/// On-screen quad height: proportional to object height, inverse in depth.
fn screen_height(height: f32, z: f32, size: usize) -> usize {
    (height * size as f32 * 0.6 / (0.3 + z)) as usize
}

/// Depth shading for the ground view (darkens with distance, never
/// brightens, so shaded colors keep their distance from the backgrounds).
fn shade(color: [u8; 3], z: f32) -> [u8; 3] {
    let f = 0.8 + 0.2 * (1.0 - z);
    [
        (color[0] as f32 * f) as u8,
        (color[1] as f32 * f) as u8,
        (color[2] as f32 * f) as u8,
    ]
}

/// The object-free ground view: sky gradient above the horizon, grass below.
pub fn ground_background(size: usize) -> Image {
    let mut img = Image::filled(size, size, palette(Class::Grass));
    let horizon = horizon_row(size);
    for y in 0..horizon {
        let t = y as f32 / horizon.max(1) as f32;
        let c = [
            (SKY_TOP[0] + (SKY_HORIZON[0] - SKY_TOP[0]) * t) as u8,
            (SKY_TOP[1] + (SKY_HORIZON[1] - SKY_TOP[1]) * t) as u8,
            (SKY_TOP[2] + (SKY_HORIZON[2] - SKY_TOP[2]) * t) as u8,
        ];
        for x in 0..size {
            img.put(x, y, c);
        }
    }
    img
}

fn semantic_background(size: usize) -> Image {
    let mut img = Image::filled(size, size, palette(Class::Grass));
    for y in 0..horizon_row(size) {
        for x in 0..size {
            img.put(x, y, palette(Class::Sky));
        }
    }
    img
}

/// Renders the aerial / semantic / ground triplet of a scene.
pub fn synth_triplet(spec: &SceneSpec, size: usize) -> Result<ImageTriplet> {
    check_size(size)?;

    // Aerial: top-down orthographic, taller objects painted last.
    let mut aerial = Image::filled(size, size, palette(Class::Grass));
    let mut by_height: Vec<&SceneObject> = spec.objects.iter().collect();
    by_height.sort_by(|a, b| a.height.total_cmp(&b.height));
    for obj in by_height {
        let (c0, c1) = col_span(obj.x0, obj.x1, size);
        let r0 = ((obj.z0 * size as f32) as usize).min(size - 1);
        let r1 = ((obj.z1 * size as f32) as usize).max(r0).min(size - 1);
        aerial.fill_rect(c0, c1, r0, r1, obj.color);
    }

    // Ground + semantic: same geometry, painter-sorted far to near.
    let mut ground = ground_background(size);
    let mut semantic = semantic_background(size);
    let mut far_to_near: Vec<&SceneObject> = spec.objects.iter().collect();
    far_to_near.sort_by(|a, b| b.z0.total_cmp(&a.z0));
    for obj in far_to_near {
        let (c0, c1) = col_span(obj.x0, obj.x1, size);
        let z_ref = 0.5 * (obj.z0 + obj.z1);
        if obj.height == 0.0 {
            // Flat ground-plane band (roads): spans its projected depth rows.
            let r_far = depth_to_row(obj.z1, size);
            let r_near = depth_to_row(obj.z0, size);
            ground.fill_rect(c0, c1, r_far, r_near, shade(obj.color, z_ref));
            semantic.fill_rect(c0, c1, r_far, r_near, palette(obj.class));
        } else {
            let base = depth_to_row(obj.z0, size);
            let h_px = screen_height(obj.height, z_ref, size).max(1);
            let top = base.saturating_sub(h_px);
            ground.fill_rect(c0, c1, top, base, shade(obj.color, z_ref));
            semantic.fill_rect(c0, c1, top, base, palette(obj.class));
        }
    }

    Ok(ImageTriplet { aerial, semantic, ground })
}

// ── PPM (P6) I/O ──────────────────────────────────────────────────────

/// Encodes as binary PPM: `P6\n<w> <h>\n255\n` + raw RGB.
pub fn ppm_encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes a binary PPM, reporting the byte offset of any malformation.
pub fn ppm_decode(bytes: &[u8]) -> Result<Image> {
    fn fail(offset: usize, detail: impl Into<String>) -> Error {
        Error::Parse { what: "ppm", offset, detail: detail.into() }
    }
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(fail(0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(fail(start, "expected ASCII integer"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| fail(start, format!("bad integer '{text}'")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(fail(pos, format!("maxval {maxval}, expected 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected single whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * 3;
    let have = bytes.len() - pos;
    if have < need {
        return Err(fail(
            bytes.len(),
            format!("payload truncated: expected {need} bytes, got {have}"),
        ));
    }
    if have > need {
        return Err(fail(pos + need, format!("trailing bytes: expected {need}, got {have}")));
    }
    Ok(Image { w, h, data: bytes[pos..].to_vec() })
}

pub fn ppm_write(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, ppm_encode(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn ppm_read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    ppm_decode(&bytes)
}

// ── Normalization ─────────────────────────────────────────────────────

/// Byte pixel → [−1, 1] float.
pub fn normalize_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_byte`] (exact on all 256 byte values).
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// HWC bytes → normalized CHW tensor (3, h, w).
pub fn image_to_tensor(img: &Image) -> Tensor {
    let (w, h) = (img.w, img.h);
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y);
            for c in 0..3 {
                data[c * h * w + y * w + x] = normalize_byte(p[c]);
            }
        }
    }
    Tensor::from_vec(data, &[3, h, w]).unwrap()
}

/// Normalized CHW tensor (3, h, w) or (1, 3, h, w) → byte image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let (h, w) = match *t.shape() {
        [3, h, w] => (h, w),
        [1, 3, h, w] => (h, w),
        _ => {
            return Err(Error::dim(
                "tensor_to_image",
                format!("expected (3, h, w) or (1, 3, h, w), got {:?}", t.shape()),
            ))
        }
    };
    let d = t.data();
    let mut img = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let px = [
                denormalize(d[y * w + x]),
                denormalize(d[h * w + y * w + x]),
                denormalize(d[2 * h * w + y * w + x]),
            ];
            img.put(x, y, px);
        }
    }
    Ok(img)
}

// ── Dataset directory ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One loaded (aerial, semantic, ground) triplet, normalized to [−1, 1].
pub struct LoadedTriplet {
    pub id: String,
    pub aerial: Tensor,
    pub semantic: Tensor,
    pub ground: Tensor,
}

/// Writes `count` synthetic triplets plus `split.txt` (first 80% train,
/// rest test, in id order). Re-running with the same arguments rewrites
/// byte-identical files.
pub fn write_dataset(dir: &Path, seed: u64, count: usize, size: usize) -> Result<()> {
    check_size(size)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let train_count = count * 4 / 5;
    let mut split = String::new();
    for i in 0..count {
        let spec = SceneSpec::generate(seed, i);
        let triplet = synth_triplet(&spec, size)?;
        let id = format!("{i:04}");
        ppm_write(&triplet.aerial, &dir.join(format!("{id}_a.ppm")))?;
        ppm_write(&triplet.semantic, &dir.join(format!("{id}_s.ppm")))?;
        ppm_write(&triplet.ground, &dir.join(format!("{id}_g.ppm")))?;
        let tag = if i < train_count { "train" } else { "test" };
        split.push_str(&format!("{id} {tag}\n"));
    }
    fs::write(dir.join("split.txt"), split).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Loads every triplet of a split, in split-file order.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<LoadedTriplet>> {
    let split_path = dir.join("split.txt");
    let text = fs::read_to_string(&split_path)
        .map_err(|e| Error::io(split_path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, tag) = line.split_once(' ').ok_or_else(|| Error::Parse {
            what: "split.txt",
            offset: lineno,
            detail: format!("expected '<id> <split>', got '{line}'"),
        })?;
        if tag != split.tag() {
            continue;
        }
        let load = |suffix: &str| -> Result<Tensor> {
            let path = dir.join(format!("{id}_{suffix}.ppm"));
            let img = ppm_read(&path).map_err(|e| Error::Dataset {
                id: id.to_string(),
                detail: format!("missing or unreadable {id}_{suffix}.ppm: {e}"),
            })?;
            Ok(image_to_tensor(&img))
        };
        out.push(LoadedTriplet {
            id: id.to_string(),
            aerial: load("a")?,
            semantic: load("s")?,
            ground: load("g")?,
        });
    }
    Ok(out)
}
