//! Synthetic gaze images, the 80:20 split, mini-batching and dataset files.
//!
//! Each image shows a stylized eye: a light elliptical sclera on noisy
//! skin, a pink caruncle at the inner (right-hand) corner and a dark iris
//! with pupil whose centre is displaced from the eye centre by
//! `(r·sin(yaw), r·sin(pitch))` pixels along (column, row).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
/// Labels are drawn uniformly from `[-LABEL_BOUND, LABEL_BOUND]` radians.
pub const LABEL_BOUND: f32 = 0.7;
/// Pixels of iris displacement per unit of `sin(angle)`.
pub const IRIS_GAIN: f64 = 10.0;

const DATASET_MAGIC: &[u8; 4] = b"CGZD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub pitch: f32,
    pub yaw: f32,
}

/// Renderer settings. With `jitter` off the eye sits exactly at the image
/// centre with nominal size and no rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Generator {
    pub jitter: bool,
    pub size: usize,
}

impl Default for Generator {
    fn default() -> Self {
        Generator {
            jitter: true,
            size: IMAGE_SIZE,
        }
    }
}

const SKIN: [f64; 3] = [0.80, 0.62, 0.52];
const SCLERA: [f64; 3] = [0.93, 0.92, 0.90];
const CARUNCLE: [f64; 3] = [0.86, 0.52, 0.52];
const PUPIL: [f64; 3] = [0.04, 0.03, 0.03];
const IRIS_RADIUS: f64 = 6.0;
const PUPIL_RADIUS: f64 = 2.5;
const SUPERSAMPLE: usize = 4;

impl Generator {
    /// `count` samples; sample `i` depends only on `(seed, i)`.
    pub fn dataset(&self, count: usize, seed: u64) -> Vec<GazeSample> {
        (0..count)
            .into_par_iter()
            .map(|i| self.sample(&mut rng::stream(seed, &[0x6461_7461, i as u64])))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GazeSample {
        let pitch = rng.random_range(-LABEL_BOUND..=LABEL_BOUND);
        let yaw = rng.random_range(-LABEL_BOUND..=LABEL_BOUND);
        self.render(pitch, yaw, rng)
    }

    /// Renders an eye looking in direction `(pitch, yaw)`.
    pub fn render<R: Rng + ?Sized>(&self, pitch: f32, yaw: f32, rng: &mut R) -> GazeSample {
        let n = self.size;
        let scale = n as f64 / IMAGE_SIZE as f64;
        let center = n as f64 / 2.0;
        let (dx, dy, rot, size) = if self.jitter {
            (
                rng.random_range(-3.0..=3.0) * scale,
                rng.random_range(-3.0..=3.0) * scale,
                rng.random_range(-0.15..=0.15),
                rng.random_range(0.9..=1.1),
            )
        } else {
            (0.0, 0.0, 0.0, 1.0)
        };
        let illumination: f64 = rng.random_range(0.7..=1.3);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..=0.04));
        let iris: [f64; 3] = [
            rng.random_range(0.14..=0.30),
            rng.random_range(0.10..=0.22),
            rng.random_range(0.06..=0.20),
        ];

        let (ex, ey) = (center + dx, center + dy);
        let (a, b) = (22.0 * size * scale, 14.0 * size * scale);
        let (cos_r, sin_r) = (f64::cos(rot), f64::sin(rot));
        let ix = ex + IRIS_GAIN * scale * f64::sin(yaw as f64);
        let iy = ey + IRIS_GAIN * scale * f64::sin(pitch as f64);
        let caruncle = (ex + 0.82 * a * cos_r, ey + 0.82 * a * sin_r);
        let (iris_r, pupil_r, car_r) = (IRIS_RADIUS * scale, PUPIL_RADIUS * scale, 3.0 * scale);

        let color_at = |x: f64, y: f64| -> [f64; 3] {
            let (px, py) = (x - ex, y - ey);
            let u = px * cos_r + py * sin_r;
            let v = -px * sin_r + py * cos_r;
            if (u / a).powi(2) + (v / b).powi(2) > 1.0 {
                return std::array::from_fn(|c| SKIN[c] + tint[c]);
            }
            let di = ((x - ix).powi(2) + (y - iy).powi(2)).sqrt();
            if di <= pupil_r {
                PUPIL
            } else if di <= iris_r {
                iris
            } else if (x - caruncle.0).powi(2) + (y - caruncle.1).powi(2) <= car_r * car_r {
                CARUNCLE
            } else {
                SCLERA
            }
        };

        let plane = n * n;
        let mut data = vec![0.0f32; CHANNELS * plane];
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for row in 0..n {
            for col in 0..n {
                let mut acc = [0.0f64; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let y = row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let c = color_at(x, y);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    let noise: f64 = rng.random_range(-0.03..=0.03);
                    let v = acc[k] * inv * illumination + noise;
                    data[k * plane + row * n + col] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        GazeSample {
            image: Tensor::from_parts(vec![CHANNELS, n, n], data),
            pitch,
            yaw,
        }
    }
}

/// One sample from the default renderer.
pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R) -> GazeSample {
    Generator::default().sample(rng)
}

/// `count` samples from the default renderer.
pub fn generate_dataset(count: usize, seed: u64) -> Vec<GazeSample> {
    Generator::default().dataset(count, seed)
}

/// Disjoint index sets: unlabeled pretraining pool and labeled fine-tuning pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub pretrain_unlabeled: Vec<usize>,
    pub finetune_labeled: Vec<usize>,
}

/// Seeded shuffle of `0..n`, then `floor(0.8 n)` pretraining indices and
/// the remainder for fine-tuning.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x7370_6c69]));
    let cut = n * 4 / 5;
    let finetune_labeled = idx.split_off(cut);
    Ok(DatasetSplit {
        pretrain_unlabeled: idx,
        finetune_labeled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Drops the trailing partial batch; NT-Xent needs full batches.
    Contrastive,
    Finetune,
}

/// One epoch of mini-batches over `indices`, reshuffled per `(seed, epoch)`.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64, mode: BatchMode) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, &[0x6261_7463, epoch]));
    Ok(order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Finetune || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Stacks sample images into a `B x C x H x W` tensor.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a GazeSample>) -> Result<Tensor<f32>> {
    let images: Vec<Tensor<f32>> = samples.into_iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

/// `N x 2` (pitch, yaw) labels.
pub fn stack_labels<'a>(samples: impl IntoIterator<Item = &'a GazeSample>) -> Result<Tensor<f32>> {
    let data: Vec<f32> = samples.into_iter().flat_map(|s| [s.pitch, s.yaw]).collect();
    let n = data.len() / 2;
    Tensor::new([n, 2], data)
}

/// Writes the packed little-endian dataset format (`CGZD`, version 1).
pub fn write_dataset(path: impl AsRef<Path>, samples: &[GazeSample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| with_path(e, path))?);
    encode_dataset(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<GazeSample>> {
    let path = path.as_ref();
    decode_dataset(&mut BufReader::new(File::open(path).map_err(|e| with_path(e, path))?))
}

pub fn encode_dataset<W: Write>(w: &mut W, samples: &[GazeSample]) -> Result<()> {
    let (c, h, wd) = match samples.first().map(|s| s.image.shape()) {
        Some(&[c, h, w]) => (c, h, w),
        Some(s) => return Err(Error::shape("write_dataset", format!("image {s:?}"))),
        None => (CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
    };
    let to_u16 =
        |d: usize| u16::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u16")));
    let (c16, h16, w16) = (to_u16(c)?, to_u16(h)?, to_u16(wd)?);
    let count = u32::try_from(samples.len())
        .map_err(|_| Error::InvalidArgument("too many samples for one file".into()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&h16.to_le_bytes())?;
    w.write_all(&w16.to_le_bytes())?;
    w.write_all(&c16.to_le_bytes())?;
    let mut buf = Vec::with_capacity((c * h * wd + 2) * 4);
    for s in samples {
        if s.image.shape() != [c, h, wd] {
            return Err(Error::shape("write_dataset", format!("mixed image shapes {:?}", s.image.shape())));
        }
        buf.clear();
        for v in s.image.data().iter().chain([&s.pitch, &s.yaw]) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn decode_dataset<R: Read>(r: &mut R) -> Result<Vec<GazeSample>> {
    let mut header = [0u8; 18];
    read_exact_or_corrupt(r, &mut header, "dataset header")?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::Corrupt("not a gaze dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes([header[12], header[13]]) as usize;
    let w = u16::from_le_bytes([header[14], header[15]]) as usize;
    let c = u16::from_le_bytes([header[16], header[17]]) as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Corrupt(format!("zero image extent {c}x{h}x{w}")));
    }
    let floats = c * h * w + 2;
    let mut buf = vec![0u8; floats * 4];
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        read_exact_or_corrupt(r, &mut buf, &format!("sample {i}"))?;
        let mut vals: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let yaw = vals.pop().expect("label");
        let pitch = vals.pop().expect("label");
        samples.push(GazeSample {
            image: Tensor::from_parts(vec![c, h, w], vals),
            pitch,
            yaw,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last sample".into()));
    }
    Ok(samples)
}

/// Writes 8-bit PNG previews and a `labels.csv` of (filename, pitch, yaw).
pub fn export_previews(dir: impl AsRef<Path>, samples: &[GazeSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_error)?;
    labels.write_record(["filename", "pitch", "yaw"]).map_err(csv_error)?;
    for (i, s) in samples.iter().enumerate() {
        let &[3, h, w] = s.image.shape() else {
            return Err(Error::shape("export_previews", format!("{:?}", s.image.shape())));
        };
        let plane = h * w;
        let d = s.image.data();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb([0, 1, 2].map(|c| (d[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        let name = format!("sample_{i:05}.png");
        img.save(dir.join(&name))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        labels
            .write_record([name, s.pitch.to_string(), s.yaw.to_string()])
            .map_err(csv_error)?;
    }
    labels.flush()?;
    Ok(())
}

/// Adds the file name to an I/O error.
pub(crate) fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = split_dataset(1000, 3).unwrap();
        assert_eq!((s.pretrain_unlabeled.len(), s.finetune_labeled.len()), (800, 200));
        let s = split_dataset(5, 3).unwrap();
        assert_eq!((s.pretrain_unlabeled.len(), s.finetune_labeled.len()), (4, 1));
        assert_eq!(split_dataset(1000, 3).unwrap(), split_dataset(1000, 3).unwrap());
        assert_ne!(split_dataset(1000, 3).unwrap(), split_dataset(1000, 4).unwrap());
        assert!(split_dataset(4, 0).is_err());
    }

    #[test]
    fn batch_counts_by_mode() {
        let idx: Vec<usize> = (0..10).collect();
        assert_eq!(batches(&idx, 4, 1, 0, BatchMode::Contrastive).unwrap().len(), 2);
        let ft = batches(&idx, 4, 1, 0, BatchMode::Finetune).unwrap();
        assert_eq!(ft.len(), 3);
        assert_eq!(ft[2].len(), 2);
        assert_ne!(
            batches(&idx, 10, 1, 0, BatchMode::Finetune).unwrap(),
            batches(&idx, 10, 1, 1, BatchMode::Finetune).unwrap()
        );
        assert!(batches(&idx, 0, 1, 0, BatchMode::Finetune).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let a = generate_sample(&mut rng::stream(9, &[1]));
        let b = generate_sample(&mut rng::stream(9, &[1]));
        assert_eq!(a, b);
        assert_eq!(a.image.shape(), &[3, 64, 64]);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.pitch.abs() <= LABEL_BOUND && a.yaw.abs() <= LABEL_BOUND);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let samples = generate_dataset(2, 1);
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &samples).unwrap();
        assert_eq!(decode_dataset(&mut bytes.as_slice()).unwrap(), samples);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_dataset(&mut bad_magic.as_slice()), Err(Error::Corrupt(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_dataset(&mut bad_version.as_slice()), Err(Error::Version { .. })));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_dataset(&mut &truncated[..]), Err(Error::Corrupt(_))));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(decode_dataset(&mut trailing.as_slice()), Err(Error::Corrupt(_))));
    }
}
