//! Synthetic scene generation and on-disk dataset format.
//!
//! Scenes are simple shapes (disk, rectangle, triangle, annulus) over a noisy
//! background. Each object's ground-truth mask is exactly its visible region,
//! so occlusion keeps masks and pixels consistent. Images are stored as
//! binary PGM, masks as line-delimited run-length records, plus a manifest.

use crate::error::{Error, Result};
use crate::model::Image;
use crate::rng::sub_rng;
use rand::Rng;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

/// Binary mask over the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Mask {
        Mask { width, height, pixels: vec![false; width * height] }
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    /// Binarize mask logits at `threshold` (logit space, 0 = probability .5).
    pub fn from_logits(logits: &[f32], width: usize, height: usize, threshold: f32) -> Mask {
        assert_eq!(logits.len(), width * height);
        Mask { width, height, pixels: logits.iter().map(|&v| v > threshold).collect() }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }

    pub fn union_with(&mut self, other: &Mask) {
        debug_assert_eq!(self.pixels.len(), other.pixels.len());
        for (a, &b) in self.pixels.iter_mut().zip(&other.pixels) {
            *a |= b;
        }
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with exclusive max corner.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some((x0, y0, x1, y1))
    }

    /// Indices of set pixels, row-major order.
    pub fn set_indices(&self) -> Vec<usize> {
        self.pixels
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }
}

/// One training/eval scene: rendered image plus per-object masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub gt_masks: Vec<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Annulus,
}

impl ShapeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Annulus => "annulus",
        }
    }

    pub fn parse(s: &str) -> Result<ShapeKind> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "triangle" => Ok(ShapeKind::Triangle),
            "annulus" => Ok(ShapeKind::Annulus),
            other => Err(Error::Config(format!("unknown shape kind `{other}`"))),
        }
    }
}

/// Deterministic scene recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Characteristic object radius as a fraction of image size.
    pub scale_min: f32,
    pub scale_max: f32,
    /// Peak-to-peak amplitude of per-pixel background noise (u8 counts).
    pub noise: u8,
    pub occlusion: bool,
    /// Emit the uncovered background as a final extra mask.
    pub include_background: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            image_size: 64,
            channels: 1,
            min_objects: 2,
            max_objects: 4,
            shapes: vec![
                ShapeKind::Disk,
                ShapeKind::Rectangle,
                ShapeKind::Triangle,
                ShapeKind::Annulus,
            ],
            scale_min: 0.10,
            scale_max: 0.26,
            noise: 8,
            occlusion: true,
            include_background: true,
        }
    }
}

pub const MIN_VISIBLE_AREA: usize = 12;

fn shape_mask(
    kind: ShapeKind,
    size: usize,
    rng: &mut impl Rng,
    scale_min: f32,
    scale_max: f32,
) -> Mask {
    let s = size as f32;
    let r = rng.gen_range(scale_min..scale_max) * s;
    let margin = r.min(s / 2.0 - 1.0);
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    let mut m = Mask::empty(size, size);
    match kind {
        ShapeKind::Disk => {
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        m.pixels[y * size + x] = true;
                    }
                }
            }
        }
        ShapeKind::Annulus => {
            let inner = r * rng.gen_range(0.35..0.55);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    let d2 = dx * dx + dy * dy;
                    if d2 <= r * r && d2 >= inner * inner {
                        m.pixels[y * size + x] = true;
                    }
                }
            }
        }
        ShapeKind::Rectangle => {
            let hw = r * rng.gen_range(0.7..1.3);
            let hh = r * rng.gen_range(0.7..1.3);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if dx.abs() <= hw && dy.abs() <= hh {
                        m.pixels[y * size + x] = true;
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            let mut angles: Vec<f32> =
                (0..3).map(|_| rng.gen_range(0.0..std::f32::consts::TAU)).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let vx: Vec<(f32, f32)> = angles
                .iter()
                .map(|a| (cx + 1.2 * r * a.cos(), cy + 1.2 * r * a.sin()))
                .collect();
            let cross = |o: (f32, f32), a: (f32, f32), b: (f32, f32)| {
                (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
            };
            for y in 0..size {
                for x in 0..size {
                    let p = (x as f32 + 0.5, y as f32 + 0.5);
                    let d0 = cross(vx[0], vx[1], p);
                    let d1 = cross(vx[1], vx[2], p);
                    let d2 = cross(vx[2], vx[0], p);
                    let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                    let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                    if !(neg && pos) {
                        m.pixels[y * size + x] = true;
                    }
                }
            }
        }
    }
    m
}

/// Render scene `index` of the spec's deterministic stream.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> TrainSample {
    let size = spec.image_size;
    let mut rng = sub_rng(spec.seed, 0x5ce0 + index as u64);

    // Background: base level, gentle gradient, per-pixel noise.
    let base = rng.gen_range(15u16..70u16);
    let gx = rng.gen_range(-20i32..=20);
    let gy = rng.gen_range(-20i32..=20);
    let mut pix = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let grad = gx * x as i32 / size as i32 + gy * y as i32 / size as i32;
            let n = if spec.noise > 0 {
                rng.gen_range(-(spec.noise as i32)..=spec.noise as i32)
            } else {
                0
            };
            pix[y * size + x] = (base as i32 + grad + n).clamp(0, 255) as u8;
        }
    }

    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut masks: Vec<Mask> = Vec::new();
    let mut covered = Mask::empty(size, size);
    for _ in 0..count {
        // Rejection loop: shape must keep enough visible area.
        let mut placed = None;
        for _attempt in 0..24 {
            let kind = spec.shapes[rng.gen_range(0..spec.shapes.len())];
            let m = shape_mask(kind, size, &mut rng, spec.scale_min, spec.scale_max);
            if m.area() < MIN_VISIBLE_AREA {
                continue;
            }
            if !spec.occlusion {
                let overlaps = m.pixels.iter().zip(&covered.pixels).any(|(&a, &b)| a && b);
                if overlaps {
                    continue;
                }
            }
            placed = Some(m);
            break;
        }
        let Some(m) = placed else { continue };

        // New object occludes earlier ones: carve it out of their masks.
        if spec.occlusion {
            for prev in &mut masks {
                for (p, &n) in prev.pixels.iter_mut().zip(&m.pixels) {
                    if n {
                        *p = false;
                    }
                }
            }
        }
        let intensity = rng.gen_range(120u16..=245u16);
        for (i, &inside) in m.pixels.iter().enumerate() {
            if inside {
                let n = if spec.noise > 0 {
                    rng.gen_range(-(spec.noise as i32)..=spec.noise as i32)
                } else {
                    0
                };
                pix[i] = (intensity as i32 + n).clamp(0, 255) as u8;
            }
        }
        covered.union_with(&m);
        masks.push(m);
    }
    // Occlusion may have emptied earlier masks.
    masks.retain(|m| m.area() >= MIN_VISIBLE_AREA);

    if spec.include_background {
        let mut bg = Mask::empty(size, size);
        for (b, &c) in bg.pixels.iter_mut().zip(&covered.pixels) {
            *b = !c;
        }
        if bg.area() >= MIN_VISIBLE_AREA {
            masks.push(bg);
        }
    }

    let pixels: Vec<f32> = match spec.channels {
        1 => pix.iter().map(|&v| v as f32 / 255.0).collect(),
        3 => {
            let gray: Vec<f32> = pix.iter().map(|&v| v as f32 / 255.0).collect();
            let mut out = gray.clone();
            out.extend_from_slice(&gray);
            out.extend_from_slice(&gray);
            out
        }
        c => panic!("unsupported channel count {c}"),
    };
    TrainSample { image: Image::new(size, size, spec.channels, pixels), gt_masks: masks }
}

/// Deterministic dataset of `count` scenes.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<TrainSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
    }
    Ok((0..count).map(|i| generate_scene(spec, i)).collect())
}

/// Index-parity split: even indices train, odd indices validation.
pub fn split_train_val(samples: &[TrainSample]) -> (Vec<&TrainSample>, Vec<&TrainSample>) {
    let train = samples.iter().step_by(2).collect();
    let val = samples.iter().skip(1).step_by(2).collect();
    (train, val)
}

// ── Disk format ──────────────────────────────────────────────────────

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(gray.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(gray);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    // Header is "P5", width, height, maxval separated by single whitespace.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start < pos {
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?,
            );
        }
    }
    if fields.len() < 4 {
        return Err("truncated PGM header".into());
    }
    if fields[0] != "P5" {
        return Err("not a P5 PGM".into());
    }
    let width: usize = fields[1].parse().map_err(|_| "bad width")?;
    let height: usize = fields[2].parse().map_err(|_| "bad height")?;
    if fields[3] != "255" {
        return Err(format!("unsupported maxval {}", fields[3]));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err("truncated pixel data".into());
    }
    Ok((width, height, bytes[pos..pos + width * height].to_vec()))
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(rgb.len(), width * height * 3);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encode a mask as `start:len` run pairs over the row-major flattened pixels.
pub fn mask_to_rle(mask: &Mask) -> String {
    let mut out = String::new();
    let mut i = 0usize;
    let n = mask.pixels.len();
    while i < n {
        if mask.pixels[i] {
            let start = i;
            while i < n && mask.pixels[i] {
                i += 1;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{start}:{}", i - start);
        } else {
            i += 1;
        }
    }
    out
}

pub fn mask_from_rle(runs: &str, width: usize, height: usize) -> Result<Mask> {
    let mut mask = Mask::empty(width, height);
    for pair in runs.split_whitespace() {
        let (start, len) = pair
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("bad RLE pair `{pair}`")))?;
        let start: usize =
            start.parse().map_err(|_| Error::Format(format!("bad RLE start `{start}`")))?;
        let len: usize =
            len.parse().map_err(|_| Error::Format(format!("bad RLE length `{len}`")))?;
        if start + len > mask.pixels.len() {
            return Err(Error::Format(format!("RLE run {start}:{len} exceeds mask size")));
        }
        for p in &mut mask.pixels[start..start + len] {
            *p = true;
        }
    }
    Ok(mask)
}

fn spec_manifest(spec: &SceneSpec, count: usize) -> String {
    format!(
        "kind=dataset\nseed={}\nimage_size={}\nchannels={}\nmin_objects={}\nmax_objects={}\n\
         shapes={}\nscale_min={}\nscale_max={}\nnoise={}\nocclusion={}\ninclude_background={}\n\
         count={count}\nsplit=index_parity\n",
        spec.seed,
        spec.image_size,
        spec.channels,
        spec.min_objects,
        spec.max_objects,
        spec.shapes.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
        spec.scale_min,
        spec.scale_max,
        spec.noise,
        spec.occlusion,
        spec.include_background,
    )
}

fn parse_manifest(text: &str) -> Result<(SceneSpec, usize)> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        map.get(k).ok_or_else(|| Error::Format(format!("manifest missing `{k}`")))
    };
    let spec = SceneSpec {
        seed: get("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
        image_size: get("image_size")?
            .parse()
            .map_err(|_| Error::Format("bad image_size".into()))?,
        channels: get("channels")?.parse().map_err(|_| Error::Format("bad channels".into()))?,
        min_objects: get("min_objects")?
            .parse()
            .map_err(|_| Error::Format("bad min_objects".into()))?,
        max_objects: get("max_objects")?
            .parse()
            .map_err(|_| Error::Format("bad max_objects".into()))?,
        shapes: get("shapes")?
            .split(',')
            .map(|s| ShapeKind::parse(s.trim()))
            .collect::<Result<_>>()?,
        scale_min: get("scale_min")?
            .parse()
            .map_err(|_| Error::Format("bad scale_min".into()))?,
        scale_max: get("scale_max")?
            .parse()
            .map_err(|_| Error::Format("bad scale_max".into()))?,
        noise: get("noise")?.parse().map_err(|_| Error::Format("bad noise".into()))?,
        occlusion: get("occlusion")? == "true",
        include_background: get("include_background")? == "true",
    };
    let count = get("count")?.parse().map_err(|_| Error::Format("bad count".into()))?;
    Ok((spec, count))
}

/// Write the dataset under `dir`; returns the manifest path.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    spec: &SceneSpec,
    samples: &[TrainSample],
) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let gray: Vec<u8> = s.image.pixels[..s.image.width * s.image.height]
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        write_pgm(
            img_dir.join(format!("sample_{i:05}.pgm")),
            s.image.width,
            s.image.height,
            &gray,
        )?;
        let mut text = String::new();
        for (id, m) in s.gt_masks.iter().enumerate() {
            let _ = writeln!(text, "{id} {}", mask_to_rle(m));
        }
        let mpath = mask_dir.join(format!("sample_{i:05}.rle"));
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    }
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, spec_manifest(spec, samples.len()))
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(SceneSpec, Vec<TrainSample>)> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let (spec, count) = parse_manifest(&text)?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let (w, h, gray) = read_pgm(dir.join("images").join(format!("sample_{i:05}.pgm")))?;
        let mut pixels: Vec<f32> = gray.iter().map(|&v| v as f32 / 255.0).collect();
        if spec.channels == 3 {
            let base = pixels.clone();
            pixels.extend_from_slice(&base);
            pixels.extend_from_slice(&base);
        }
        let image = Image::new(w, h, spec.channels, pixels);
        let mpath = dir.join("masks").join(format!("sample_{i:05}.rle"));
        let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut gt_masks = Vec::new();
        for line in mtext.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, runs) = line.split_once(' ').unwrap_or((line, ""));
            let _: usize =
                id.parse().map_err(|_| Error::Format(format!("bad mask id `{id}`")))?;
            gt_masks.push(mask_from_rle(runs, w, h)?);
        }
        samples.push(TrainSample { image, gt_masks });
    }
    Ok((spec, samples))
}
