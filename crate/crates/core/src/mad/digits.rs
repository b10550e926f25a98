//! Base digit images: either real MNIST (IDX files on disk) or a built-in
//! procedural corpus that rasterizes jittered stroke skeletons. Both
//! produce 28x28 grayscale images with intensities in [0, 1].

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::mad::IMG_SIZE;
use crate::{Error, Result};

/// Which half of the dataset a sample belongs to. MNIST-backed sources
/// draw train samples from the train split and test samples from the
/// test split; the built-in corpus is split-agnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A supplier of base digit images.
#[derive(Debug)]
pub enum DigitSource {
    Builtin,
    Mnist { train: MnistSplit, test: MnistSplit },
}

impl DigitSource {
    /// Open a source. `"builtin"` selects the procedural corpus; anything
    /// else is a directory containing the four standard IDX files
    /// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`).
    pub fn open(spec: &str) -> Result<DigitSource> {
        if spec == "builtin" {
            return Ok(DigitSource::Builtin);
        }
        let dir = Path::new(spec);
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "digit source {spec:?} is neither \"builtin\" nor a directory"
            )));
        }
        let train = MnistSplit::load(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = MnistSplit::load(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?;
        Ok(DigitSource::Mnist { train, test })
    }

    /// Produce one base image of `digit`, consuming randomness from `rng`.
    /// MNIST sources pick a uniformly random exemplar of the class; the
    /// built-in corpus rasterizes a freshly jittered skeleton.
    pub fn sample(
        &self,
        digit: u8,
        split: Split,
        rng: &mut impl Rng,
    ) -> Result<Vec<f32>> {
        debug_assert!(digit < 10);
        match self {
            DigitSource::Builtin => Ok(render_builtin_digit(digit, rng)),
            DigitSource::Mnist { train, test } => {
                let half = match split {
                    Split::Train => train,
                    Split::Test => test,
                };
                half.sample(digit, rng)
            }
        }
    }
}

/// One MNIST split held in memory, with a per-class index.
pub struct MnistSplit {
    pixels: Vec<u8>,
    by_class: [Vec<u32>; 10],
}

impl std::fmt::Debug for MnistSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MnistSplit")
            .field("n", &(self.pixels.len() / (IMG_SIZE * IMG_SIZE)))
            .finish()
    }
}

impl MnistSplit {
    fn load(images_path: &PathBuf, labels_path: &PathBuf) -> Result<MnistSplit> {
        let pixels = read_idx(images_path, 0x0803, &[IMG_SIZE as u32, IMG_SIZE as u32])?;
        let labels = read_idx(labels_path, 0x0801, &[])?;
        let n = labels.len();
        if pixels.len() != n * IMG_SIZE * IMG_SIZE {
            return Err(Error::format(
                images_path,
                format!(
                    "image count {} does not match label count {n}",
                    pixels.len() / (IMG_SIZE * IMG_SIZE)
                ),
            ));
        }
        let mut by_class: [Vec<u32>; 10] = Default::default();
        for (i, &label) in labels.iter().enumerate() {
            if label > 9 {
                return Err(Error::format(labels_path, format!("label {label} out of range")));
            }
            by_class[label as usize].push(i as u32);
        }
        for (digit, idx) in by_class.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::format(
                    labels_path,
                    format!("digit class {digit} has no examples"),
                ));
            }
        }
        Ok(MnistSplit { pixels, by_class })
    }

    fn sample(&self, digit: u8, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let pool = &self.by_class[digit as usize];
        let row = pool[rng.random_range(0..pool.len())] as usize;
        let start = row * IMG_SIZE * IMG_SIZE;
        Ok(self.pixels[start..start + IMG_SIZE * IMG_SIZE]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect())
    }
}

/// Read an IDX file, checking the magic number and any fixed trailing
/// dimensions (the leading dimension is the record count).
fn read_idx(path: &PathBuf, magic: u32, fixed_dims: &[u32]) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_len = 4 + 4 * (1 + fixed_dims.len());
    if bytes.len() < header_len {
        return Err(Error::format(path, "file shorter than its IDX header"));
    }
    let read_u32 = |off: usize| u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap());
    if read_u32(0) != magic {
        return Err(Error::format(
            path,
            format!("bad IDX magic {:#010x}, expected {magic:#010x}", read_u32(0)),
        ));
    }
    let n = read_u32(4) as usize;
    let mut record = 1usize;
    for (d, &expected) in fixed_dims.iter().enumerate() {
        let got = read_u32(8 + 4 * d);
        if got != expected {
            return Err(Error::format(
                path,
                format!("dimension {} is {got}, expected {expected}", d + 1),
            ));
        }
        record *= expected as usize;
    }
    let payload = &bytes[header_len..];
    if payload.len() != n * record {
        return Err(Error::format(
            path,
            format!(
                "payload size mismatch: {} bytes for {n} records of {record}",
                payload.len()
            ),
        ));
    }
    Ok(payload.to_vec())
}

// ---------------------------------------------------------------------------
// Built-in procedural corpus
// ---------------------------------------------------------------------------

/// A digit skeleton: strokes given as polylines in a unit box
/// (x rightward, y downward).
type Skeleton = &'static [&'static [(f32, f32)]];

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, a0: f32, a1: f32, n: usize) -> Vec<(f32, f32)> {
    // Angles in degrees, measured clockwise from +x because y points down.
    (0..=n)
        .map(|i| {
            let t = (a0 + (a1 - a0) * i as f32 / n as f32).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke control points for each digit class. Shapes only need to be
/// class-distinct and roughly MNIST-like; per-sample jitter supplies the
/// variation.
fn skeleton(digit: u8) -> Vec<Vec<(f32, f32)>> {
    const D1: Skeleton = &[&[(0.38, 0.22), (0.54, 0.08), (0.54, 0.92)]];
    const D4: Skeleton = &[
        &[(0.6, 0.08), (0.22, 0.6), (0.82, 0.6)],
        &[(0.62, 0.3), (0.62, 0.92)],
    ];
    const D7: Skeleton = &[&[(0.22, 0.12), (0.78, 0.12), (0.42, 0.9)]];

    match digit {
        0 => vec![arc(0.5, 0.5, 0.3, 0.42, 0.0, 360.0, 20)],
        1 => D1.iter().map(|s| s.to_vec()).collect(),
        2 => {
            let mut top = arc(0.5, 0.32, 0.27, 0.24, 190.0, 360.0, 8);
            top.extend([(0.7, 0.5), (0.24, 0.86)]);
            vec![top, vec![(0.24, 0.88), (0.78, 0.88)]]
        }
        3 => {
            let mut s = vec![(0.26, 0.16)];
            s.extend(arc(0.47, 0.3, 0.26, 0.17, 250.0, 360.0 + 90.0, 8));
            s.extend(arc(0.47, 0.68, 0.29, 0.21, 270.0, 360.0 + 110.0, 9));
            vec![s]
        }
        4 => D4.iter().map(|s| s.to_vec()).collect(),
        5 => {
            let mut s = vec![(0.72, 0.1), (0.32, 0.1), (0.29, 0.46)];
            s.extend(arc(0.47, 0.66, 0.26, 0.22, 280.0, 360.0 + 120.0, 9));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.66, 0.08)];
            s.extend(arc(0.48, 0.66, 0.26, 0.25, 140.0, 360.0 + 130.0, 14));
            vec![s]
        }
        7 => D7.iter().map(|s| s.to_vec()).collect(),
        8 => vec![
            arc(0.5, 0.3, 0.22, 0.2, 90.0, 450.0, 14),
            arc(0.5, 0.69, 0.26, 0.22, 270.0, 630.0, 14),
        ],
        9 => {
            let mut s = arc(0.52, 0.32, 0.23, 0.22, 0.0, 360.0, 14);
            s.extend([(0.75, 0.36), (0.62, 0.9)]);
            vec![s]
        }
        _ => unreachable!("digit class out of range"),
    }
}

/// Rasterize one jittered instance of `digit` into a 28x28 grayscale
/// image with values in [0, 1].
pub fn render_builtin_digit(digit: u8, rng: &mut impl Rng) -> Vec<f32> {
    let strokes = skeleton(digit);

    // Per-sample shape jitter: a small random affine map plus independent
    // control-point noise, all in unit-box coordinates.
    let theta: f32 = rng.random_range(-0.18..0.18);
    let shear: f32 = rng.random_range(-0.15..0.15);
    let sx: f32 = rng.random_range(0.85..1.05);
    let sy: f32 = rng.random_range(0.85..1.05);
    let tx: f32 = rng.random_range(-0.04..0.04);
    let ty: f32 = rng.random_range(-0.04..0.04);
    let radius: f32 = rng.random_range(0.95..1.35);
    let brightness: f32 = rng.random_range(0.88..1.0);
    let (sin, cos) = theta.sin_cos();

    let jitter = |p: (f32, f32), rng: &mut dyn rand::RngCore| -> (f32, f32) {
        let (mut x, mut y) = (p.0 - 0.5, p.1 - 0.5);
        x += shear * y;
        x *= sx;
        y *= sy;
        let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
        let nx: f32 = rng.random_range(-0.018..0.018);
        let ny: f32 = rng.random_range(-0.018..0.018);
        // Unit box -> a ~19px body centered on the canvas, like MNIST.
        (
            (rx + 0.5 + tx + nx) * 19.0 + 4.5,
            (ry + 0.5 + ty + ny) * 21.0 + 3.5,
        )
    };

    let mut img = vec![0.0f32; IMG_SIZE * IMG_SIZE];
    for stroke in &strokes {
        let pts: Vec<(f32, f32)> = stroke.iter().map(|&p| jitter(p, rng)).collect();
        for seg in pts.windows(2) {
            draw_segment(&mut img, seg[0], seg[1], radius, brightness);
        }
    }
    for v in &mut img {
        *v = v.min(1.0);
    }
    img
}

/// Stamp one thick segment with round caps and a soft ~1px edge,
/// compositing by max so crossings don't over-brighten.
fn draw_segment(img: &mut [f32], p: (f32, f32), q: (f32, f32), radius: f32, brightness: f32) {
    let (px, py) = p;
    let (dx, dy) = (q.0 - px, q.1 - py);
    let len2 = dx * dx + dy * dy;
    let pad = radius + 1.0;
    let x0 = (px.min(q.0) - pad).floor().max(0.0) as usize;
    let x1 = (px.max(q.0) + pad).ceil().min(IMG_SIZE as f32 - 1.0) as usize;
    let y0 = (py.min(q.1) - pad).floor().max(0.0) as usize;
    let y1 = (py.max(q.1) + pad).ceil().min(IMG_SIZE as f32 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (fx, fy) = (x as f32 - px, y as f32 - py);
            let t = if len2 > 0.0 {
                ((fx * dx + fy * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (fx - t * dx, fy - t * dy);
            let dist = (ex * ex + ey * ey).sqrt();
            let coverage = (radius + 0.5 - dist).clamp(0.0, 1.0) * brightness;
            let cell = &mut img[y * IMG_SIZE + x];
            *cell = cell.max(coverage);
        }
    }
}
