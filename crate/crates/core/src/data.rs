//! Image I/O, scene datasets, background synthesis, the procedural
//! surveillance-scene generator and seeded batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an 8-bit PNG or binary PPM as a (1,3,H,W) tensor with values byte/255.
/// Gray images are replicated over three channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| format_err(path, e.to_string()))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_) => img.to_rgb8(),
        other => {
            return Err(format_err(
                path,
                format!("only 8-bit images are supported, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

fn to_byte(v: f32) -> u8 {
    // f32::round rounds half away from zero.
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a (1,3,H,W) tensor as RGB or a (1,1,H,W) tensor as grayscale.
/// Values are clamped to [0,1]; the format follows the extension (png or ppm).
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.n() != 1 {
        return Err(Error::dim("save_image", "batch", 1, s.n()));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return Err(format_err(path, "expected a .png or .ppm file name"));
    }
    let (h, w) = (s.h(), s.w());
    let (buf, color) = match s.c() {
        1 => (
            image
                .data()
                .iter()
                .map(|&v| to_byte(v))
                .collect::<Vec<u8>>(),
            ExtendedColorType::L8,
        ),
        3 => {
            let mut buf = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                for c in 0..3 {
                    buf.push(to_byte(image.data()[c * h * w + i]));
                }
            }
            (buf, ExtendedColorType::Rgb8)
        }
        c => return Err(Error::dim("save_image", "channel", "1 or 3", c)),
    };
    // PPM has no gray variant in this encoder path; expand to RGB.
    let (buf, color) = if ext == "ppm" && color == ExtendedColorType::L8 {
        (
            buf.iter().flat_map(|&v| [v, v, v]).collect(),
            ExtendedColorType::Rgb8,
        )
    } else {
        (buf, color)
    };
    image::save_buffer(path, &buf, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    })
}

/// Per-pixel mean of equally sized images.
pub fn synth_background(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("cannot average an empty image list".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::dim(
                "synth_background",
                "image",
                first.shape(),
                img.shape(),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v as f64;
        }
    }
    let n = images.len() as f64;
    Tensor::new(
        first.shape(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Image files (png, ppm) directly under `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// A fixed-camera scene on disk: `night/`, `day/` and an optional `background.png`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub night: Vec<PathBuf>,
    pub day: Vec<PathBuf>,
    pub background: Option<PathBuf>,
}

impl SceneDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let night = list_images(&root.join("night"))?;
        let day = list_images(&root.join("day"))?;
        if night.is_empty() || day.is_empty() {
            return Err(Error::Config(format!(
                "scene {} needs non-empty night/ and day/ folders",
                root.display()
            )));
        }
        let background = ["background.png", "background.ppm"]
            .iter()
            .map(|n| root.join(n))
            .find(|p| p.is_file());
        Ok(SceneDataset {
            root: root.to_path_buf(),
            night,
            day,
            background,
        })
    }

    /// Decodes every frame. Without a background image the reference is the
    /// mean day frame, unless `synthesize` is false.
    pub fn load(&self, synthesize: bool) -> Result<SceneImages> {
        let load_all = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| load_image(p))
                .collect::<Result<Vec<_>>>()
        };
        let night = load_all(&self.night)?;
        let day = load_all(&self.day)?;
        let shape = night[0].shape();
        for (img, path) in night
            .iter()
            .zip(&self.night)
            .chain(day.iter().zip(&self.day))
        {
            if img.shape() != shape {
                return Err(Error::dim(
                    "scene",
                    "extent",
                    shape,
                    format!("{} in {}", img.shape(), path.display()),
                ));
            }
        }
        let reference = match (&self.background, synthesize) {
            (Some(p), _) => load_image(p)?,
            (None, true) => synth_background(&day)?,
            (None, false) => {
                return Err(Error::Config(format!(
                    "scene {} has no background image and synthesis is disabled",
                    self.root.display()
                )))
            }
        };
        if reference.shape() != shape {
            return Err(Error::dim("scene", "background", shape, reference.shape()));
        }
        Ok(SceneImages {
            night,
            day,
            reference,
        })
    }
}

/// Decoded scene frames, each (1,3,H,W).
#[derive(Clone, Debug)]
pub struct SceneImages {
    pub night: Vec<Tensor>,
    pub day: Vec<Tensor>,
    pub reference: Tensor,
}

/// Night and day frame indices of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub night: Vec<usize>,
    pub day: Vec<usize>,
}

/// Uniform unpaired sampling. Batch `iteration` depends only on
/// (seed, iteration), so a resumed run draws the same batches.
pub fn sample_batch(
    seed: u64,
    iteration: u64,
    batch: usize,
    n_night: usize,
    n_day: usize,
) -> BatchIndices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let night = (0..batch).map(|_| rng.random_range(0..n_night)).collect();
    let day = (0..batch).map(|_| rng.random_range(0..n_day)).collect();
    BatchIndices { night, day }
}

/// A training batch: night images, day images and the constant reference.
#[derive(Clone, Debug)]
pub struct Batch {
    pub iteration: u64,
    pub indices: BatchIndices,
    pub night: Tensor,
    pub day: Tensor,
    pub reference: Tensor,
}

/// Seeded stream of batches starting at `start` (1-based iteration numbers).
pub struct BatchIterator<'a> {
    scene: &'a SceneImages,
    batch: usize,
    seed: u64,
    next: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(scene: &'a SceneImages, batch: usize, seed: u64, start: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        Ok(BatchIterator {
            scene,
            batch,
            seed,
            next: start,
        })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let it = self.next;
        self.next += 1;
        let s = self.scene;
        let indices = sample_batch(self.seed, it, self.batch, s.night.len(), s.day.len());
        let pick = |set: &[Tensor], idx: &[usize]| {
            Tensor::stack(&idx.iter().map(|&i| set[i].clone()).collect::<Vec<_>>())
                .expect("uniform extents")
        };
        let night = pick(&s.night, &indices.night);
        let day = pick(&s.day, &indices.day);
        let reference =
            Tensor::stack(&vec![s.reference.clone(); self.batch]).expect("uniform extents");
        Some(Batch {
            iteration: it,
            indices,
            night,
            day,
            reference,
        })
    }
}

/// Recipe for a procedural fixed-camera scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub day_frames: usize,
    pub night_frames: usize,
    /// Fixed structures (buildings, road marks) drawn into the background.
    pub rectangles: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    /// Sprite side lengths as fractions of min(width, height).
    pub sprite_size_min: f32,
    pub sprite_size_max: f32,
    pub gamma_min: f32,
    pub gamma_max: f32,
    pub scale_min: f32,
    pub scale_max: f32,
    /// Street lamps: fixed flare positions shared by all night frames.
    pub lamps: usize,
    pub flare_sigma: f32,
    pub flare_intensity: f32,
    pub noise_sigma: f32,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            seed: 0,
            width: 64,
            height: 64,
            day_frames: 60,
            night_frames: 60,
            rectangles: 5,
            sprites_min: 1,
            sprites_max: 3,
            sprite_size_min: 0.125,
            sprite_size_max: 0.25,
            gamma_min: 2.5,
            gamma_max: 4.0,
            scale_min: 0.1,
            scale_max: 0.3,
            lamps: 2,
            flare_sigma: 2.0,
            flare_intensity: 0.6,
            noise_sigma: 0.02,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.width < 8 || self.height < 8 {
            return bad("extents must be at least 8");
        }
        if self.day_frames == 0 || self.night_frames == 0 {
            return bad("frame counts must be positive");
        }
        if self.sprites_min == 0 || self.sprites_min > self.sprites_max {
            return bad("need 1 <= sprites_min <= sprites_max");
        }
        let size_ok = 0.0 < self.sprite_size_min
            && self.sprite_size_min <= self.sprite_size_max
            && self.sprite_size_max <= 1.0;
        if !size_ok {
            return bad("sprite sizes must satisfy 0 < min <= max <= 1");
        }
        if !(0.0 < self.gamma_min && self.gamma_min <= self.gamma_max) {
            return bad("need 0 < gamma_min <= gamma_max");
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return bad("need 0 < scale_min <= scale_max");
        }
        if self.flare_sigma <= 0.0 || self.noise_sigma < 0.0 || self.flare_intensity < 0.0 {
            return bad("flare sigma must be positive, noise and intensity non-negative");
        }
        Ok(())
    }
}

/// Generated scene with ground truth. Masks are (1,1,H,W), 1 on sprite pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    /// The sprite-free background, standing in for a captured empty frame.
    pub background: Tensor,
    pub day: Vec<Tensor>,
    pub day_masks: Vec<Tensor>,
    pub night: Vec<Tensor>,
    pub night_masks: Vec<Tensor>,
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn fill_rect(
        &mut self,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        color: [f32; 3],
        mut mark: impl FnMut(usize),
    ) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.rgb[y * self.w + x] = color;
                mark(y * self.w + x);
            }
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, self.h, self.w), |[_, c, y, x]| {
            self.rgb[y * self.w + x][c]
        })
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn render_background(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Canvas {
    let (w, h) = (spec.width, spec.height);
    let top = random_color(rng, 0.45, 0.85);
    let bottom = random_color(rng, 0.2, 0.55);
    let mut c = Canvas {
        w,
        h,
        rgb: Vec::with_capacity(w * h),
    };
    for y in 0..h {
        for x in 0..w {
            let t = y as f32 / (h - 1) as f32;
            let s = 0.9 + 0.1 * x as f32 / (w - 1) as f32;
            c.rgb.push(std::array::from_fn(|k| {
                s * ((1.0 - t) * top[k] + t * bottom[k])
            }));
        }
    }
    for _ in 0..spec.rectangles {
        let rw = rng.random_range(w / 8..=w / 3);
        let rh = rng.random_range(h / 8..=h / 3);
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let color = random_color(rng, 0.15, 0.9);
        c.fill_rect(x0, y0, x0 + rw, y0 + rh, color, |_| {});
    }
    c
}

/// Draws sprites over a copy of the background; returns the frame and its mask.
fn render_frame(spec: &SyntheticSceneSpec, bg: &Canvas, rng: &mut ChaCha8Rng) -> (Canvas, Tensor) {
    let mut c = Canvas {
        w: bg.w,
        h: bg.h,
        rgb: bg.rgb.clone(),
    };
    let mut mask = vec![0.0f32; bg.w * bg.h];
    let side = spec.width.min(spec.height) as f32;
    let smin = ((spec.sprite_size_min * side).round() as usize).max(1);
    let smax = ((spec.sprite_size_max * side).round() as usize).max(smin);
    let count = rng.random_range(spec.sprites_min..=spec.sprites_max);
    for _ in 0..count {
        let sw = rng.random_range(smin..=smax);
        let sh = rng.random_range(smin..=smax);
        let x0 = rng.random_range(0..=bg.w - sw.min(bg.w));
        let y0 = rng.random_range(0..=bg.h - sh.min(bg.h));
        // Saturated colors so sprites stand out from the muted background.
        let mut color = random_color(rng, 0.0, 0.35);
        color[rng.random_range(0..3)] = rng.random_range(0.8..1.0);
        c.fill_rect(x0, y0, x0 + sw, y0 + sh, color, |i| mask[i] = 1.0);
    }
    let mask = Tensor::new(Shape::new(1, 1, bg.h, bg.w), mask).expect("sized");
    (c, mask)
}

/// Night rendering: pow(day, γ)·scale + lamp flares + noise, clamped to [0,1].
fn nightify(
    spec: &SyntheticSceneSpec,
    day: &Canvas,
    lamps: &[(f32, f32)],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let gamma = rng.random_range(spec.gamma_min..=spec.gamma_max);
    let scale = rng.random_range(spec.scale_min..=spec.scale_max);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let warm = [1.0f32, 0.85, 0.55];
    let two_s2 = 2.0 * spec.flare_sigma * spec.flare_sigma;
    let (w, h) = (day.w, day.h);
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let flare: f32 = lamps
                .iter()
                .map(|&(lx, ly)| {
                    let d2 = (x as f32 - lx).powi(2) + (y as f32 - ly).powi(2);
                    spec.flare_intensity * (-d2 / two_s2).exp()
                })
                .sum();
            for c in 0..3 {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                let v = day.rgb[i][c].powf(gamma) * scale + flare * warm[c] + n;
                data[c * w * h + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data).expect("sized")
}

pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = render_background(spec, &mut rng);
    let lamps: Vec<(f32, f32)> = (0..spec.lamps)
        .map(|_| {
            (
                rng.random_range(0.0..spec.width as f32),
                rng.random_range(0.0..spec.height as f32 * 0.5),
            )
        })
        .collect();
    let (mut day, mut day_masks) = (Vec::new(), Vec::new());
    for i in 0..spec.day_frames {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(1 + i as u64);
        let (frame, mask) = render_frame(spec, &bg, &mut r);
        day.push(frame.to_tensor());
        day_masks.push(mask);
    }
    let (mut night, mut night_masks) = (Vec::new(), Vec::new());
    for i in 0..spec.night_frames {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(1 + (spec.day_frames + i) as u64);
        let (frame, mask) = render_frame(spec, &bg, &mut r);
        night.push(nightify(spec, &frame, &lamps, &mut r));
        night_masks.push(mask);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        background: bg.to_tensor(),
        day,
        day_masks,
        night,
        night_masks,
    })
}

impl SyntheticScene {
    /// Layout: `day/`, `night/`, `masks/{day,night}_NNN.png`, `truth/background.png`
    /// and `spec.json`. No `background.png` is written, so training falls back to
    /// averaging the day frames.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["day", "night", "masks", "truth"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, (img, mask)) in self.day.iter().zip(&self.day_masks).enumerate() {
            save_image(img, &dir.join(format!("day/day_{i:03}.png")))?;
            save_image(mask, &dir.join(format!("masks/day_{i:03}.png")))?;
        }
        for (i, (img, mask)) in self.night.iter().zip(&self.night_masks).enumerate() {
            save_image(img, &dir.join(format!("night/night_{i:03}.png")))?;
            save_image(mask, &dir.join(format!("masks/night_{i:03}.png")))?;
        }
        save_image(&self.background, &dir.join("truth/background.png"))?;
        let path = dir.join("spec.json");
        let json = serde_json::to_string_pretty(&self.spec).expect("serializable");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Ground-truth foreground mask of a frame written by [`SyntheticScene::write`],
/// as (1,1,H,W) with 1 on sprite pixels.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let rgb = load_image(path)?;
    let s = rgb.shape();
    Tensor::new(
        Shape::new(1, 1, s.h(), s.w()),
        rgb.plane(0, 0)
            .iter()
            .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )
}
