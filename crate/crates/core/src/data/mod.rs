//! Synthetic blob segmentation data, augmentation, splits and manifests.

pub mod netpbm;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, h, w)`, values in [0, 1].
    pub image: Tensor,
    /// `(1, 1, h, w)`, values in {0, 1}.
    pub mask: Tensor,
    pub area_fraction: f64,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let [_, _, h, w] = self.mask.shape();
        (h, w)
    }
}

pub fn foreground_fraction(mask: &Tensor) -> f64 {
    let fg = mask.data().iter().filter(|&&v| v != 0.0).count();
    fg as f64 / mask.numel() as f64
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    /// `(h, w)`
    pub size: (usize, usize),
    /// Inclusive range of blobs per image.
    pub objects: (usize, usize),
    /// Inclusive range of foreground area fraction.
    pub fraction: (f64, f64),
    /// Gaussian sigma (pixels) softening the rendered object edge.
    pub blur: f64,
    /// Colour offset between object and background.
    pub contrast: f64,
    /// Amplitude of the smooth texture noise.
    pub noise: f64,
    pub seed: u64,
    /// Attempts per sample before giving up on the fraction range.
    pub retries: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            size: (64, 64),
            objects: (1, 2),
            fraction: (0.01, 0.20),
            blur: 1.0,
            contrast: 0.35,
            noise: 0.08,
            seed: 0,
            retries: 32,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fraction;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "size-fraction range [{lo}, {hi}] must lie inside (0, 1)"
            )));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(Error::Config("object count range is empty".into()));
        }
        if !(self.blur >= 0.0) || !(self.noise >= 0.0) || !(self.contrast >= 0.0) {
            return Err(Error::Config(
                "blur, contrast and noise must be non-negative".into(),
            ));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Colour direction of the object relative to the background.
const FG_DIRECTION: [f64; 3] = [0.75, -0.35, -0.55];

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    let k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of an `h x w` plane with edge clamping.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * plane[i * w + clamp(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[clamp(i as isize + t as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

/// Smooth random field built from Gaussian lobes clustered around a few
/// object centres.
fn blob_field(rng: &mut ChaCha8Rng, h: usize, w: usize, objects: usize) -> Vec<f64> {
    let scale = h.min(w) as f64;
    let mut lobes = Vec::new();
    for _ in 0..objects {
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let spread = rng.gen_range(0.03..0.12) * scale;
        for _ in 0..rng.gen_range(2..=4) {
            let y = cy + rng.gen_range(-1.0..1.0) * spread;
            let x = cx + rng.gen_range(-1.0..1.0) * spread;
            let sigma = rng.gen_range(0.04..0.12) * scale;
            let amp = rng.gen_range(0.6..1.0);
            lobes.push((y, x, sigma, amp));
        }
    }
    let mut field = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            field[i * w + j] = lobes
                .iter()
                .map(|&(y, x, s, a)| {
                    let d2 = (i as f64 - y).powi(2) + (j as f64 - x).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    field
}

/// Mask holding exactly the `count` largest field values, if the cut is
/// free of ties.
fn top_k_mask(field: &[f64], count: usize) -> Option<Vec<f64>> {
    let mut sorted = field.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let t = sorted[count - 1];
    if count < sorted.len() && sorted[count] == t {
        return None;
    }
    Some(field.iter().map(|&v| (v >= t) as u8 as f64).collect())
}

fn render(rng: &mut ChaCha8Rng, spec: &GenSpec, mask: &[f64]) -> Vec<f64> {
    let (h, w) = spec.size;
    let alpha = gaussian_blur(mask, h, w, spec.blur);
    let white: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut texture = gaussian_blur(&white, h, w, 1.5);
    let peak = texture
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    texture.iter_mut().for_each(|v| *v /= peak);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let mut image = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for k in 0..h * w {
            let v = bg[c] + alpha[k] * spec.contrast * FG_DIRECTION[c] + spec.noise * texture[k];
            image[c * h * w + k] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    image
}

/// Sample `index` of the dataset defined by `spec`. Each index draws from
/// its own stream of the seeded generator.
pub fn generate_one(spec: &GenSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = spec.size;
    let total = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (lo, hi) = spec.fraction;
    for _ in 0..spec.retries.max(1) {
        let target = rng.gen_range(lo..=hi);
        let count = ((target * total as f64).round() as usize).clamp(1, total);
        let fraction = count as f64 / total as f64;
        let objects = rng.gen_range(spec.objects.0..=spec.objects.1);
        let field = blob_field(&mut rng, h, w, objects);
        if fraction < lo || fraction > hi {
            continue;
        }
        let Some(mask) = top_k_mask(&field, count) else {
            continue;
        };
        let image = render(&mut rng, spec, &mask);
        return Ok(Sample {
            id: format!("s{index:05}"),
            image: Tensor::new([1, 3, h, w], image)?,
            mask: Tensor::new([1, 1, h, w], mask)?,
            area_fraction: fraction,
        });
    }
    Err(Error::Data(format!(
        "could not reach an area fraction in [{lo}, {hi}] at {h}x{w} after {} attempts",
        spec.retries.max(1)
    )))
}

pub fn generate(spec: &GenSpec, n: usize) -> Result<Vec<Sample>> {
    (0..n).map(|i| generate_one(spec, i)).collect()
}

fn flip_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        out.extend(plane[i * w..(i + 1) * w].iter().rev());
    }
    out
}

/// 90 degrees clockwise; `(h, w)` becomes `(w, h)`.
fn rot90_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[j * h + (h - 1 - i)] = plane[i * w + j];
        }
    }
    out
}

fn map_planes(t: &Tensor, f: impl Fn(&[f64], usize, usize) -> Vec<f64>, swap: bool) -> Tensor {
    let [n, c, h, w] = t.shape();
    let data: Vec<f64> = t.data().chunks(h * w).flat_map(|p| f(p, h, w)).collect();
    let shape = if swap { [n, c, w, h] } else { [n, c, h, w] };
    Tensor::new(shape, data).expect("plane count preserved")
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    Sample {
        id: s.id.clone(),
        image: map_planes(&s.image, flip_plane, false),
        mask: map_planes(&s.mask, flip_plane, false),
        area_fraction: s.area_fraction,
    }
}

/// Clockwise rotation by `quarter_turns * 90` degrees.
pub fn rotate(s: &Sample, quarter_turns: usize) -> Sample {
    let mut out = s.clone();
    for _ in 0..quarter_turns % 4 {
        out.image = map_planes(&out.image, rot90_plane, true);
        out.mask = map_planes(&out.mask, rot90_plane, true);
    }
    out
}

/// Horizontal flip with probability 1/2, then a random multiple of 90
/// degrees (non-square samples keep their orientation class: only half
/// turns are drawn for them).
pub fn augment(s: &Sample, rng: &mut impl Rng) -> Sample {
    let flipped = if rng.gen_bool(0.5) {
        flip_horizontal(s)
    } else {
        s.clone()
    };
    let (h, w) = s.size();
    let turns = if h == w {
        rng.gen_range(0..4)
    } else {
        2 * rng.gen_range(0..2)
    };
    rotate(&flipped, turns)
}

/// Deterministic shuffled partition into train, validation and test.
pub fn split<T: Clone>(
    items: &[T],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = items.len() as f64;
    let n_train = (ratios[0] * n).round() as usize;
    let n_val = ((ratios[1] * n).round() as usize).min(items.len() - n_train);
    let pick = |range: &[usize]| range.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub area_fraction: f64,
}

/// Writes images and masks under `dir` and returns the manifest entries
/// (paths relative to `dir`).
pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestEntry>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    samples
        .iter()
        .map(|s| {
            let image = PathBuf::from("images").join(format!("{}.ppm", s.id));
            let mask = PathBuf::from("masks").join(format!("{}.pgm", s.id));
            netpbm::write(&dir.join(&image), &netpbm::image_raster(&s.image))?;
            netpbm::write(&dir.join(&mask), &netpbm::mask_raster(&s.mask))?;
            Ok(ManifestEntry {
                id: s.id.clone(),
                image,
                mask,
                area_fraction: s.area_fraction,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = Vec::new();
    for e in entries {
        writeln!(
            text,
            "{}\t{}\t{}\t{}",
            e.id,
            e.image.display(),
            e.mask.display(),
            e.area_fraction
        )
        .expect("write to vec");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, line)| {
            let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), no + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, image, mask, fraction] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let area_fraction: f64 = fraction.parse().map_err(|_| bad("bad area fraction"))?;
            Ok(ManifestEntry {
                id: id.to_string(),
                image: PathBuf::from(image),
                mask: PathBuf::from(mask),
                area_fraction,
            })
        })
        .collect()
}

/// Loads every sample listed in the manifest at `path`; relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let image = netpbm::image_tensor(&netpbm::read(&base.join(&e.image))?)?;
            let mask = netpbm::mask_tensor(&netpbm::read(&base.join(&e.mask))?)?;
            let [_, _, h, w] = image.shape();
            if mask.shape() != [1, 1, h, w] {
                return Err(Error::Data(format!(
                    "{}: image and mask sizes differ",
                    e.id
                )));
            }
            let area_fraction = foreground_fraction(&mask);
            Ok(Sample {
                id: e.id,
                image,
                mask,
                area_fraction,
            })
        })
        .collect()
}
