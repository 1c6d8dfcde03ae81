//! Dataset loading and synthesis in the CIFAR-10 binary layout.

use crate::error::{Error, Result};
use crate::optim::gather_rows;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Read;
use std::path::Path;

/// Bytes per record in the CIFAR-10 binary format: one label byte followed
/// by 3 x 1024 channel-major pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;

/// Images as `[N, ...]` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example image shape.
    pub fn example_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// The first `count` examples.
    pub fn subset(&self, count: usize) -> Result<Dataset> {
        if count == 0 || count > self.len() {
            return Err(Error::Input(format!(
                "subset of {count} from {} examples",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..count).collect();
        Ok(Dataset {
            images: gather_rows(&self.images, &idx)?,
            labels: self.labels[..count].to_vec(),
            classes: self.classes,
        })
    }
}

/// Parses concatenated CIFAR-10 binary records. Rejects byte lengths that
/// are not a whole number of records and labels outside 0..=9.
pub fn parse_cifar10_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "record {r} has label {label}, expected 0..=9"
            )));
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        classes: 10,
    })
}

/// Serializes back to the binary record format, quantizing pixels to bytes.
pub fn to_cifar10_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let per = CIFAR_RECORD_BYTES - 1;
    if ds.example_shape() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::Format(format!(
            "dataset shape {:?} is not the CIFAR-10 layout",
            ds.images.shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for (i, &label) in ds.labels.iter().enumerate() {
        if label > 9 {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        out.push(label as u8);
        for &v in &ds.images.data()[i * per..(i + 1) * per] {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Loads CIFAR-10 binary data. A file path is read as one batch file; a
/// directory is scanned for `data_batch_*.bin` files, concatenated in name
/// order.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                    .unwrap_or(false)
            })
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Input(format!(
                "no data_batch_*.bin files under {}",
                path.display()
            )));
        }
        for name in names {
            std::fs::File::open(&name)?.read_to_end(&mut bytes)?;
        }
    } else {
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    }
    parse_cifar10_bytes(&bytes)
}

/// Synthesizes Gaussian class blobs over an arbitrary example shape.
///
/// Each class gets a unit-norm mean direction; an example is
/// `offset + scale * (separation * mean + noise)` per dimension with unit
/// normal noise, so `separation` is the class distance in noise sigmas and
/// survives the per-dimension placement. Offsets and scales are drawn once
/// per dataset and deliberately uneven, so raw inputs are far from centered
/// and far from unit variance. Mean directions are low-pass filtered over
/// image-shaped trailing axes. Labels cycle through the classes.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    dims: &[usize],
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    let d: usize = dims.iter().product();
    if n < classes || classes < 2 || dims.is_empty() || d == 0 {
        return Err(Error::Input(format!(
            "cannot synthesize {n} examples of shape {dims:?} over {classes} classes"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Input(format!(
            "separation {separation} must be finite and >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..0.7)).collect();
    let scales: Vec<f64> = (0..d)
        .map(|_| 0.05 * 10f64.powf(rng.gen_range(0.0..1.0)))
        .collect();
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        smooth_spatial(&mut m, dims);
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut m {
            *v /= norm;
        }
        means.push(m);
    }
    let mut data = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for b in 0..n {
        let class = b % classes;
        labels.push(class);
        for (i, slot) in data[b * d..(b + 1) * d].iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *slot = offsets[i] + scales[i] * (separation * means[class][i] + noise);
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(dims);
    Ok(Dataset {
        images: Tensor::from_vec(&shape, data)?,
        labels,
        classes,
    })
}

/// Box-blurs over the trailing two axes of a `[c, h, w]` shape so that local
/// receptive fields see coherent class structure. Flat shapes pass through.
fn smooth_spatial(v: &mut [f64], dims: &[usize]) {
    if dims.len() != 3 {
        return;
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let r = 3isize;
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut v[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx >= 0 && (xx as usize) < w {
                        acc += plane[y * w + xx as usize];
                        cnt += 1.0;
                    }
                }
                tmp[y * w + x] = acc / cnt;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy >= 0 && (yy as usize) < h {
                        acc += tmp[yy as usize * w + x];
                        cnt += 1.0;
                    }
                }
                plane[y * w + x] = acc / cnt;
            }
        }
    }
}
