//! Synthetic labeled shape data and all persistence: tensor files (NTSR),
//! checkpoints (NCKP), dataset manifests, and PGM/PPM image emission.
//!
//! The dataset is one hard-edged shape per grayscale image: circle, square,
//! or triangle at class ids 0, 1, 2. Images are generated at full
//! resolution; lower-resolution views come from `pyramid::downsample`.

pub mod image;
pub mod manifest;
pub mod nckp;
pub mod ntsr;

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, StreamDomain};

pub use manifest::Manifest;
pub use nckp::Checkpoint;

/// Write a file via a `.tmp` sibling and an atomic rename, so a crashed
/// writer never leaves a valid-looking partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn id(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        }
    }

    pub fn from_id(id: usize) -> Option<ShapeClass> {
        ShapeClass::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<ShapeClass> {
        ShapeClass::ALL.iter().copied().find(|c| c.name() == name)
    }
}

/// Recipe for a synthetic dataset. Sizes and margins are fractions of the
/// resolution; intensity is 1.0 on a 0.0 background.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub count: usize,
    pub resolution: usize,
    pub channels: usize,
    pub classes: Vec<ShapeClass>,
    pub size_band: (f64, f64),
    pub margin: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(count: usize, resolution: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            count,
            resolution,
            channels: 1,
            classes: ShapeClass::ALL.to_vec(),
            size_band: (0.25, 0.6),
            margin: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::invalid("resolution must be >= 1"));
        }
        if self.channels != 1 {
            return Err(Error::invalid("synthetic shapes are single-channel"));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one shape class required"));
        }
        let (lo, hi) = self.size_band;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(format!(
                "size band ({lo}, {hi}) must sit inside (0, 1)"
            )));
        }
        if self.margin < 0.0 || 2.0 * self.margin + hi > 1.0 {
            return Err(Error::invalid(format!(
                "margin {} cannot keep shapes of size {hi} inside the canvas",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Rasterize one shape deterministically. Pixel centers sit at
/// (col + 0.5, row + 0.5); boundaries are inclusive, with no anti-aliasing.
pub fn render_shape(
    class: ShapeClass,
    center: (f64, f64),
    size: f64,
    resolution: usize,
) -> Result<Tensor> {
    let r = resolution;
    let (cx, cy) = center;
    let half = size / 2.0;
    if size <= 0.0 {
        return Err(Error::invalid(format!("shape size {size} must be positive")));
    }
    if cx - half < 0.0 || cy - half < 0.0 || cx + half > r as f64 || cy + half > r as f64 {
        return Err(Error::invalid(format!(
            "shape of size {size} at ({cx}, {cy}) leaves the {r}x{r} canvas"
        )));
    }
    let mut data = vec![0.0f32; r * r];
    for row in 0..r {
        let y = row as f64 + 0.5;
        for col in 0..r {
            let x = col as f64 + 0.5;
            let inside = match class {
                ShapeClass::Circle => {
                    let dx = x - cx;
                    let dy = y - cy;
                    dx * dx + dy * dy <= half * half
                }
                ShapeClass::Square => (x - cx).abs() <= half && (y - cy).abs() <= half,
                ShapeClass::Triangle => {
                    // Upward isoceles: apex at (cx, cy - half), base at
                    // y = cy + half with half-width growing linearly.
                    let t = (y - (cy - half)) / size;
                    (0.0..=1.0).contains(&t) && (x - cx).abs() <= half * t
                }
            };
            if inside {
                data[row * r + col] = 1.0;
            }
        }
    }
    Tensor::from_f32(&[1, r, r], data)
}

/// Draw the random placement for image `i` of a spec and rasterize it.
/// Classes are assigned round-robin so the distribution is uniform by
/// construction.
pub fn render_spec_image(spec: &SyntheticSpec, i: usize) -> Result<(Tensor, u8)> {
    let class = spec.classes[i % spec.classes.len()];
    let r = spec.resolution as f64;
    let mut rng = stream(spec.seed, StreamDomain::Data, i as u64, 0);
    let size = rng.gen_range(spec.size_band.0 * r..=spec.size_band.1 * r);
    let lo = spec.margin * r + size / 2.0;
    let hi = r - spec.margin * r - size / 2.0;
    let cx = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let cy = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let img = render_shape(class, (cx, cy), size, spec.resolution)?;
    Ok((img, class.id() as u8))
}

pub const SHARD_CAPACITY: usize = 4096;
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Generate the dataset under `dir`: NTSR image/label shards of at most
/// [`SHARD_CAPACITY`] images plus a manifest. The manifest is written last,
/// and every file goes through an atomic rename, so an interrupted run
/// leaves `.tmp` files but never a valid manifest over partial data.
pub fn gen_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let r = spec.resolution;
    let mut shard_names = Vec::new();
    let mut written = 0usize;
    let mut shard_idx = 0usize;
    while written < spec.count {
        let n = (spec.count - written).min(SHARD_CAPACITY);
        let mut images = Vec::with_capacity(n * r * r);
        let mut labels = Vec::with_capacity(n);
        for local in 0..n {
            let (img, label) = render_spec_image(spec, written + local)?;
            images.extend_from_slice(img.f32s()?);
            labels.push(label);
        }
        let name = format!("shard_{shard_idx:04}");
        let images_t = Tensor::from_f32(&[n, 1, r, r], images)?;
        let labels_t = Tensor::from_u8(&[n], labels)?;
        ntsr::write_file(&dir.join(format!("{name}.images.ntsr")), &images_t)?;
        ntsr::write_file(&dir.join(format!("{name}.labels.ntsr")), &labels_t)?;
        shard_names.push(name);
        written += n;
        shard_idx += 1;
    }

    let mut m = Manifest::new();
    m.push_comment("synthetic shape dataset");
    m.set("count", spec.count.to_string());
    m.set("resolution", spec.resolution.to_string());
    m.set("channels", spec.channels.to_string());
    m.set(
        "classes",
        spec.classes
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join(","),
    );
    m.set("seed", spec.seed.to_string());
    m.set("shards", shard_names.join(","));
    m.write_file(&dir.join(MANIFEST_NAME))?;
    Ok(m)
}

/// An in-memory dataset: one tensor per image plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub resolution: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let source = dir.join(MANIFEST_NAME);
        let m = Manifest::read_file(&source)?;
        let src = source.display().to_string();
        let count: usize = parse_num(m.require("count", &src)?, "count", &src)?;
        let resolution: usize = parse_num(m.require("resolution", &src)?, "resolution", &src)?;
        let channels: usize = parse_num(m.require("channels", &src)?, "channels", &src)?;
        let seed: u64 = parse_num(m.require("seed", &src)?, "seed", &src)?;
        let classes: Vec<String> = m
            .require("classes", &src)?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().to_string())
            .collect();
        let shards_value = m.require("shards", &src)?;
        let shard_names: Vec<&str> = shards_value
            .split(',')
            .filter(|s| !s.is_empty())
            .collect();

        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for name in shard_names {
            let imgs = ntsr::read_file(&dir.join(format!("{name}.images.ntsr")))?;
            let labs = ntsr::read_file(&dir.join(format!("{name}.labels.ntsr")))?;
            let dims = imgs.dims().to_vec();
            if dims.len() != 4 || dims[1] != channels || dims[2] != resolution || dims[3] != resolution
            {
                return Err(Error::format(
                    &src,
                    0,
                    format!("shard `{name}` has shape {dims:?}, expected (n, {channels}, {resolution}, {resolution})"),
                ));
            }
            let n = dims[0];
            let all = imgs.f32s()?;
            let per = channels * resolution * resolution;
            for i in 0..n {
                images.push(Tensor::from_f32(
                    &[channels, resolution, resolution],
                    all[i * per..(i + 1) * per].to_vec(),
                )?);
            }
            labels.extend_from_slice(labs.u8s()?);
        }
        if images.len() != count || labels.len() != count {
            return Err(Error::format(
                &src,
                0,
                format!(
                    "manifest promises {count} images, shards hold {} images / {} labels",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            resolution,
            channels,
            classes,
            seed,
        })
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str, src: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(src, 0, format!("key `{key}` has non-numeric value `{value}`")))
}
