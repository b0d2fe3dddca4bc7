//! Deterministic synthetic dataset generators and an IDX loader.
//!
//! Synthetic glyphs stand in for digit images: everything is generated
//! from a seed, pixel values stay in [0, 1], and splits are disjoint by
//! construction.

use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor};

/// Per-example generation record.
#[derive(Clone, Debug, PartialEq)]
pub enum Meta {
    None,
    /// Rotation angle in degrees.
    Angle(f64),
    /// Object centers in (row, col) pixel coordinates.
    TwoObject {
        red_center: (f64, f64),
        blue_center: (f64, f64),
    },
    /// Background texture id and foreground center.
    Background {
        background: usize,
        center: (f64, f64),
    },
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub meta: Vec<Meta>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub splits: Splits,
    /// Train/validation class -> background mapping, when applicable.
    pub background_mapping: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.splits.train.clone(),
            Split::Validation => self.splits.validation.clone(),
            Split::Test => self.splits.test.clone(),
        }
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Gather a batch from explicit example indices.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            feature_dim: self.feature_dim,
            indices: indices.to_vec(),
        }
    }

    /// Whole split as one batch.
    pub fn split_batch(&self, split: Split) -> Batch {
        let idx: Vec<usize> = self.split_range(split).collect();
        self.gather(&idx)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub feature_dim: usize,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_tensor(&self, tape: &Tape) -> Result<Tensor> {
        tape.leaf(self.inputs.clone(), &[self.len(), self.feature_dim])
    }
}

// ── Glyph rendering ─────────────────────────────────────────────────

/// Canonical glyphs on a side x side raster: 0 vertical bar, 1 cross,
/// 2 box outline, 3 main diagonal.
fn render_glyph(class: usize, side: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let m = side / 8; // margin
    let c0 = side / 2 - 1;
    match class % 4 {
        0 => {
            for r in m..side - m {
                img[r * side + c0] = 1.0;
                img[r * side + c0 + 1] = 1.0;
            }
        }
        1 => {
            for r in m..side - m {
                img[r * side + c0] = 1.0;
                img[r * side + c0 + 1] = 1.0;
            }
            for c in m..side - m {
                img[c0 * side + c] = 1.0;
                img[(c0 + 1) * side + c] = 1.0;
            }
        }
        2 => {
            for r in m..side - m {
                for c in m..side - m {
                    let edge = r < m + 2 || r >= side - m - 2 || c < m + 2 || c >= side - m - 2;
                    if edge {
                        img[r * side + c] = 1.0;
                    }
                }
            }
        }
        _ => {
            for r in m..side - m {
                let c = r;
                img[r * side + c] = 1.0;
                if c + 1 < side - m {
                    img[r * side + c + 1] = 1.0;
                }
            }
        }
    }
    img
}

/// Rotate an image by `degrees` about its center with bilinear sampling.
/// Zero rotation reproduces the input exactly.
fn rotate_bilinear(src: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            // Inverse map output coordinates into the source frame.
            let dy = r as f64 - center;
            let dx = c as f64 - center;
            let sy = center + cos * dy + sin * dx;
            let sx = center - sin * dy + cos * dx;
            if sy < 0.0 || sx < 0.0 || sy > (side - 1) as f64 || sx > (side - 1) as f64 {
                continue;
            }
            let (r0, c0) = (sy.floor() as usize, sx.floor() as usize);
            let (fr, fc) = (sy - r0 as f64, sx - c0 as f64);
            let r1 = (r0 + 1).min(side - 1);
            let c1 = (c0 + 1).min(side - 1);
            let v = src[r0 * side + c0] * (1.0 - fr) * (1.0 - fc)
                + src[r0 * side + c1] * (1.0 - fr) * fc
                + src[r1 * side + c0] * fr * (1.0 - fc)
                + src[r1 * side + c1] * fr * fc;
            out[r * side + c] = v;
        }
    }
    out
}

// ── Rotated glyph dataset ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    /// Class 1 angles in [15, 45], class 0 in [-45, -15].
    NonOverlapping,
    /// Class 1 angles in [-5, 30], class 0 in [-30, 5].
    Overlapping,
}

#[derive(Clone, Debug)]
pub struct RotatedSpec {
    pub mode: RotationMode,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl RotatedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.validation == 0 || self.test == 0 || self.image_side < 8 {
            return Err(CoreError::InvalidSpec(
                "rotated spec: counts must be positive, image side >= 8".into(),
            ));
        }
        Ok(())
    }
}

pub fn angle_support(mode: RotationMode, class: usize) -> (f64, f64) {
    match (mode, class) {
        (RotationMode::NonOverlapping, 1) => (15.0, 45.0),
        (RotationMode::NonOverlapping, _) => (-45.0, -15.0),
        (RotationMode::Overlapping, 1) => (-5.0, 30.0),
        (RotationMode::Overlapping, _) => (-30.0, 5.0),
    }
}

/// Binary classification of a rotated vertical bar; the rotation angle
/// distribution defines the class.
pub fn gen_rotated(spec: &RotatedSpec) -> Result<Dataset> {
    spec.validate()?;
    let side = spec.image_side;
    let glyph = render_glyph(0, side);
    let total = spec.train + spec.validation + spec.test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(total * side * side);
    let mut labels = Vec::with_capacity(total);
    let mut meta = Vec::with_capacity(total);
    for _ in 0..total {
        let class = rng.gen_range(0..2usize);
        let (lo, hi) = angle_support(spec.mode, class);
        let angle = rng.gen_range(lo..hi);
        inputs.extend(rotate_bilinear(&glyph, side, angle));
        labels.push(class);
        meta.push(Meta::Angle(angle));
    }
    Ok(Dataset {
        inputs,
        labels,
        meta,
        feature_dim: side * side,
        num_classes: 2,
        channels: 1,
        height: side,
        width: side,
        splits: Splits {
            train: 0..spec.train,
            validation: spec.train..spec.train + spec.validation,
            test: spec.train + spec.validation..total,
        },
        background_mapping: None,
    })
}

// ── Two-object (red/blue) dataset ───────────────────────────────────

const TWO_OBJECT_CLASSES: usize = 4;

/// Two glyphs of distinct classes in distinct quadrants of a 2-channel
/// (red, blue) image; the red glyph determines the label.
pub fn gen_two_object(
    train: usize,
    validation: usize,
    test: usize,
    image_side: usize,
    seed: u64,
) -> Result<Dataset> {
    if image_side % 2 != 0 || image_side < 16 {
        return Err(CoreError::InvalidSpec(
            "two-object image side must be even and >= 16".into(),
        ));
    }
    let half = image_side / 2;
    let cell = half;
    let glyphs: Vec<Vec<f64>> = (0..TWO_OBJECT_CLASSES)
        .map(|c| render_glyph(c, cell))
        .collect();
    let total = train + validation + test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_dim = 2 * image_side * image_side;
    let mut inputs = Vec::with_capacity(total * feature_dim);
    let mut labels = Vec::with_capacity(total);
    let mut meta = Vec::with_capacity(total);
    let quadrant_origin = |q: usize| ((q / 2) * half, (q % 2) * half);
    for _ in 0..total {
        let red_class = rng.gen_range(0..TWO_OBJECT_CLASSES);
        let mut blue_class = rng.gen_range(0..TWO_OBJECT_CLASSES - 1);
        if blue_class >= red_class {
            blue_class += 1;
        }
        let red_q = rng.gen_range(0..4usize);
        let mut blue_q = rng.gen_range(0..3usize);
        if blue_q >= red_q {
            blue_q += 1;
        }
        let mut image = vec![0.0; feature_dim];
        let mut centers = [(0.0, 0.0); 2];
        for (slot, (class, q)) in [(red_class, red_q), (blue_class, blue_q)]
            .iter()
            .enumerate()
        {
            let (r0, c0) = quadrant_origin(*q);
            let plane = slot * image_side * image_side;
            let g = &glyphs[*class];
            for r in 0..cell {
                for c in 0..cell {
                    image[plane + (r0 + r) * image_side + c0 + c] = g[r * cell + c];
                }
            }
            centers[slot] = (
                r0 as f64 + (cell as f64 - 1.0) / 2.0,
                c0 as f64 + (cell as f64 - 1.0) / 2.0,
            );
        }
        inputs.extend(image);
        labels.push(red_class);
        meta.push(Meta::TwoObject {
            red_center: centers[0],
            blue_center: centers[1],
        });
    }
    Ok(Dataset {
        inputs,
        labels,
        meta,
        feature_dim,
        num_classes: TWO_OBJECT_CLASSES,
        channels: 2,
        height: image_side,
        width: image_side,
        splits: Splits {
            train: 0..train,
            validation: train..train + validation,
            test: train + validation..total,
        },
        background_mapping: None,
    })
}

// ── Spurious-background dataset ─────────────────────────────────────

/// Smooth fixed-seed noise texture for one background class.
fn background_texture(bg_id: usize, side: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA5E_0000 + bg_id as u64);
    let coarse = side / 4;
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0; side * side];
    let scale = coarse as f64 / side as f64;
    for r in 0..side {
        for c in 0..side {
            let gy = (r as f64 * scale).min(coarse as f64 - 1.001);
            let gx = (c as f64 * scale).min(coarse as f64 - 1.001);
            let (r0, c0) = (gy.floor() as usize, gx.floor() as usize);
            let (fr, fc) = (gy - r0 as f64, gx - c0 as f64);
            let r1 = (r0 + 1).min(coarse - 1);
            let c1 = (c0 + 1).min(coarse - 1);
            out[r * side + c] = grid[r0 * coarse + c0] * (1.0 - fr) * (1.0 - fc)
                + grid[r0 * coarse + c1] * (1.0 - fr) * fc
                + grid[r1 * coarse + c0] * fr * (1.0 - fc)
                + grid[r1 * coarse + c1] * fr * fc;
        }
    }
    out
}

/// Foreground glyph over a class-mapped background texture. The test
/// split permutes the class -> background mapping by a derangement.
pub fn gen_spurious_background(
    train: usize,
    validation: usize,
    test: usize,
    image_side: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(CoreError::InvalidSpec(
            "spurious-background needs at least 2 classes".into(),
        ));
    }
    if image_side % 2 != 0 || image_side < 8 {
        return Err(CoreError::InvalidSpec(
            "spurious-background image side must be even and >= 8".into(),
        ));
    }
    let half = image_side / 2;
    let glyphs: Vec<Vec<f64>> = (0..num_classes).map(|c| render_glyph(c, half)).collect();
    let textures: Vec<Vec<f64>> = (0..num_classes)
        .map(|b| background_texture(b, image_side))
        .collect();
    // Identity mapping for train/validation; shifting by one is a
    // derangement for the test split.
    let mapping: Vec<usize> = (0..num_classes).collect();
    let total = train + validation + test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_dim = image_side * image_side;
    let mut inputs = Vec::with_capacity(total * feature_dim);
    let mut labels = Vec::with_capacity(total);
    let mut meta = Vec::with_capacity(total);
    let quadrant_origin = |q: usize| ((q / 2) * half, (q % 2) * half);
    for i in 0..total {
        let class = rng.gen_range(0..num_classes);
        let in_test = i >= train + validation;
        let bg = if in_test {
            (mapping[class] + 1) % num_classes
        } else {
            mapping[class]
        };
        let q = rng.gen_range(0..4usize);
        let (r0, c0) = quadrant_origin(q);
        let tex = &textures[bg];
        // Keep the texture low-contrast: the background is a spurious
        // *cue*, not the dominant signal — the full-intensity glyph is.
        let mut image: Vec<f64> = tex.iter().map(|t| 0.35 * t).collect();
        let g = &glyphs[class];
        for r in 0..half {
            for c in 0..half {
                let v = g[r * half + c];
                let px = &mut image[(r0 + r) * image_side + c0 + c];
                *px = v + (1.0 - v) * *px;
            }
        }
        inputs.extend(image);
        labels.push(class);
        meta.push(Meta::Background {
            background: bg,
            center: (
                r0 as f64 + (half as f64 - 1.0) / 2.0,
                c0 as f64 + (half as f64 - 1.0) / 2.0,
            ),
        });
    }
    Ok(Dataset {
        inputs,
        labels,
        meta,
        feature_dim,
        num_classes,
        channels: 1,
        height: image_side,
        width: image_side,
        splits: Splits {
            train: 0..train,
            validation: train..train + validation,
            test: train + validation..total,
        },
        background_mapping: Some(mapping),
    })
}

// ── IDX loader ──────────────────────────────────────────────────────

const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

fn read_be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CoreError::TruncatedFile(what.into()))
}

/// Load an image/label pair in the standard big-endian IDX layout.
/// Pixels are scaled to [0, 1]. All examples land in the train split.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let img_magic = read_be_u32(&img_bytes, 0, "image header")?;
    if img_magic != IDX_IMAGE_MAGIC {
        return Err(CoreError::BadMagic(img_magic));
    }
    let n_images = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(&img_bytes, 12, "image cols")? as usize;
    let pixel_count = n_images * rows * cols;
    let pixels = img_bytes
        .get(16..16 + pixel_count)
        .ok_or_else(|| CoreError::TruncatedFile("image data".into()))?;

    let lbl_magic = read_be_u32(&lbl_bytes, 0, "label header")?;
    if lbl_magic != IDX_LABEL_MAGIC {
        return Err(CoreError::BadMagic(lbl_magic));
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, "label count")? as usize;
    if n_labels != n_images {
        return Err(CoreError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let label_bytes = lbl_bytes
        .get(8..8 + n_labels)
        .ok_or_else(|| CoreError::TruncatedFile("label data".into()))?;

    let inputs: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let meta = vec![Meta::None; n_images];
    Ok(Dataset {
        inputs,
        labels,
        meta,
        feature_dim: rows * cols,
        num_classes: 10,
        channels: 1,
        height: rows,
        width: cols,
        splits: Splits {
            train: 0..n_images,
            validation: n_images..n_images,
            test: n_images..n_images,
        },
        background_mapping: None,
    })
}

// ── Batch sampling ──────────────────────────────────────────────────

/// Deterministic shuffled-epoch batch stream over one split. `batch_at`
/// is a pure function of (seed, k), so the stream can be replayed from
/// any position.
#[derive(Clone)]
pub struct BatchStream {
    dataset: Rc<Dataset>,
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

fn mix_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over (seed, epoch)
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl BatchStream {
    pub fn new(dataset: Rc<Dataset>, split: Split, batch_size: usize, seed: u64) -> Result<Self> {
        let indices: Vec<usize> = dataset.split_range(split).collect();
        if indices.is_empty() {
            return Err(CoreError::EmptySplit(format!("{split:?}")));
        }
        if batch_size == 0 || batch_size > indices.len() {
            return Err(CoreError::Precondition(format!(
                "batch size {batch_size} for split of {} examples",
                indices.len()
            )));
        }
        Ok(Self {
            dataset,
            indices,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len() / self.batch_size
    }

    pub fn dataset(&self) -> &Rc<Dataset> {
        &self.dataset
    }

    /// k-th batch of the infinite shuffled-epoch stream.
    pub fn batch_at(&self, k: usize) -> Batch {
        let bpe = self.batches_per_epoch();
        let epoch = (k / bpe) as u64;
        let within = k % bpe;
        let mut perm = self.indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch));
        // Fisher-Yates
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let sel = &perm[within * self.batch_size..(within + 1) * self.batch_size];
        self.dataset.gather(sel)
    }
}
