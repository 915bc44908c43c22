//! Dataset plumbing: IDX container I/O, the synthetic striped-pattern
//! dataset, and conversion between the byte container and in-memory images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::Image;
use crate::error::{CoreError, Result};

/// A raw IDX array: unsigned-8-bit payload with big-endian dimension header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_TYPE_U8: u8 = 0x08;

/// Parse an IDX byte stream: magic `00 00`, type code `08`, dimension count,
/// then one big-endian u32 per dimension and the raw payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(CoreError::IdxFormat("header shorter than 4 bytes".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(CoreError::IdxFormat(format!(
            "bad magic bytes {:02x} {:02x}",
            bytes[0], bytes[1]
        )));
    }
    if bytes[2] != IDX_TYPE_U8 {
        return Err(CoreError::IdxFormat(format!(
            "unsupported type code {:#04x} (only 0x08 unsigned bytes)",
            bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(CoreError::IdxFormat("truncated dimension header".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 4 + 4 * i;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() < numel {
        return Err(CoreError::IdxFormat(format!(
            "truncated payload: expected {numel} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > numel {
        return Err(CoreError::IdxFormat(format!(
            "trailing bytes: expected {numel} payload bytes, found {}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

pub fn encode_idx(arr: &IdxArray) -> Result<Vec<u8>> {
    let numel: usize = arr.dims.iter().product();
    if numel != arr.data.len() {
        return Err(CoreError::IdxFormat(format!(
            "dims {:?} imply {numel} bytes but payload has {}",
            arr.dims,
            arr.data.len()
        )));
    }
    if arr.dims.len() > 255 {
        return Err(CoreError::IdxFormat("more than 255 dimensions".into()));
    }
    let mut out = vec![0u8, 0, IDX_TYPE_U8, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    Ok(out)
}

pub fn write_idx(arr: &IdxArray, path: &Path) -> Result<()> {
    std::fs::write(path, encode_idx(arr)?)?;
    Ok(())
}

/// An in-memory labelled image set; pixel values in [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Decode an image array (N x H x W single-channel or N x 3 x H x W) into
/// images with pixel bytes mapped to [0,1] by /255.
pub fn images_from_idx(images: &IdxArray) -> Result<Vec<Image>> {
    let (n, c, h, w) = match images.dims.as_slice() {
        [n, h, w] => (*n, 1usize, *h, *w),
        [n, 3, h, w] => (*n, 3usize, *h, *w),
        other => {
            return Err(CoreError::IdxFormat(format!(
                "unsupported image layout {other:?} (want NxHxW or Nx3xHxW)"
            )))
        }
    };
    let stride = c * h * w;
    let mut imgs = Vec::with_capacity(n);
    for i in 0..n {
        let raw = &images.data[i * stride..(i + 1) * stride];
        let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        imgs.push(Image::new(c, h, w, data)?);
    }
    Ok(imgs)
}

/// Decode an image array plus a 1-dimensional label array into a dataset.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, num_classes: usize) -> Result<Dataset> {
    let imgs = images_from_idx(images)?;
    let n = imgs.len();
    if labels.dims.len() != 1 {
        return Err(CoreError::IdxFormat(format!(
            "labels must be 1-dimensional, got {:?}",
            labels.dims
        )));
    }
    if labels.dims[0] != n {
        return Err(CoreError::IdxFormat(format!(
            "{n} images but {} labels",
            labels.dims[0]
        )));
    }
    let mut out_labels = Vec::with_capacity(n);
    for &b in &labels.data {
        let label = b as usize;
        if label >= num_classes {
            return Err(CoreError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        out_labels.push(label);
    }
    Ok(Dataset {
        images: imgs,
        labels: out_labels,
        num_classes,
    })
}

/// Quantize a dataset to the IDX byte container (values rounded to /255
/// steps). Single-channel sets use N x H x W, color sets N x 3 x H x W.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(IdxArray, IdxArray)> {
    if ds.is_empty() {
        return Err(CoreError::IdxFormat("empty dataset".into()));
    }
    let (c, h, w) = (ds.images[0].channels, ds.images[0].height, ds.images[0].width);
    let dims = if c == 1 {
        vec![ds.len(), h, w]
    } else {
        vec![ds.len(), c, h, w]
    };
    let mut data = Vec::with_capacity(ds.len() * c * h * w);
    for img in &ds.images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(CoreError::IdxFormat("mixed image shapes".into()));
        }
        data.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let labels = IdxArray {
        dims: vec![ds.len()],
        data: ds.labels.iter().map(|&l| l as u8).collect(),
    };
    Ok((IdxArray { dims, data }, labels))
}

/// Recipe for the synthetic striped dataset. Each class has a fixed signature
/// (stripe orientation, spatial frequency, base hue); samples add a random
/// integer translation and uniform pixel noise on top of it. Class identity is
/// carried by frequency and hue, both invariant under horizontal flips and
/// small crops, so the weak augmentations preserve it by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Optional per-class train counts overriding `train_per_class`
    /// (class-imbalance experiments).
    pub train_counts: Option<Vec<usize>>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Uniform noise amplitude a: each pixel gets a draw from [-a, a].
    pub noise_amplitude: f64,
    /// Maximum absolute integer translation in pixels.
    pub max_translation: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            train_per_class: 600,
            test_per_class: 200,
            train_counts: None,
            channels: 3,
            height: 16,
            width: 16,
            seed: 0,
            noise_amplitude: 0.05,
            max_translation: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(CoreError::InvalidSpec("channels must be 1 or 3".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::InvalidSpec("empty image size".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CoreError::InvalidSpec("per-class counts must be positive".into()));
        }
        if let Some(counts) = &self.train_counts {
            if counts.len() != self.classes {
                return Err(CoreError::InvalidSpec(format!(
                    "train_counts has {} entries for {} classes",
                    counts.len(),
                    self.classes
                )));
            }
            if counts.iter().any(|&c| c == 0) {
                return Err(CoreError::InvalidSpec("zero-count class".into()));
            }
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(CoreError::InvalidSpec("noise amplitude must be >= 0".into()));
        }
        if self.max_translation < 0 {
            return Err(CoreError::InvalidSpec("negative max translation".into()));
        }
        Ok(())
    }

    fn class_signature(&self, class: usize) -> (f64, f64, f64) {
        let c = class as f64;
        let theta = std::f64::consts::PI * c / (2.0 * self.classes as f64);
        let freq = 2.0 + c;
        let hue = c / self.classes as f64;
        (theta, freq, hue)
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h6.rem_euclid(2.0) - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn render_sample(spec: &SyntheticSpec, class: usize, dx: i64, dy: i64, rng: &mut ChaCha8Rng) -> Image {
    let (theta, freq, hue) = spec.class_signature(class);
    let (ct, st) = (theta.cos(), theta.sin());
    let color = hue_to_rgb(hue);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut img = Image::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as i64 + dx) as f64 / w as f64;
            let v = (y as i64 + dy) as f64 / h as f64;
            let phase = 2.0 * std::f64::consts::PI * freq * (u * ct + v * st);
            let stripe = 0.5 + 0.45 * phase.sin();
            for ch in 0..c {
                let base = if c == 3 {
                    0.15 + 0.7 * stripe * color[ch]
                } else {
                    stripe
                };
                let noise = if spec.noise_amplitude > 0.0 {
                    rng.gen_range(-spec.noise_amplitude..=spec.noise_amplitude)
                } else {
                    0.0
                };
                *img.at_mut(ch, y, x) = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Deterministic synthetic (train, test) pair. Draw order is fixed: splits in
/// (train, test) order, classes ascending, samples in order; per sample the
/// translation pair is drawn before the per-pixel noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make_split = |counts: &[usize]| -> Dataset {
        let total: usize = counts.iter().sum();
        let mut images = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        for (class, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let (dx, dy) = if spec.max_translation > 0 {
                    (
                        rng.gen_range(-spec.max_translation..=spec.max_translation),
                        rng.gen_range(-spec.max_translation..=spec.max_translation),
                    )
                } else {
                    (0, 0)
                };
                images.push(render_sample(spec, class, dx, dy, &mut rng));
                labels.push(class);
            }
        }
        Dataset {
            images,
            labels,
            num_classes: spec.classes,
        }
    };
    let train_counts = spec
        .train_counts
        .clone()
        .unwrap_or_else(|| vec![spec.train_per_class; spec.classes]);
    let train = make_split(&train_counts);
    let test = make_split(&vec![spec.test_per_class; spec.classes]);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_example_parses() {
        // 00 00 08 03, dims (2,2,2), 8 payload bytes -> 2 images of 2x2.
        let mut bytes = vec![0u8, 0, 8, 3];
        for d in [2u32, 2, 2] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 2]);
        assert_eq!(arr.data.len(), 8);
    }

    #[test]
    fn idx_truncated_payload_errors() {
        let mut bytes = vec![0u8, 0, 8, 1];
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]); // one byte short
        match parse_idx(&bytes) {
            Err(CoreError::IdxFormat(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = vec![0u8; 2 * 3 * 5];
        rng.fill_bytes(&mut data);
        let arr = IdxArray {
            dims: vec![2, 3, 5],
            data,
        };
        let bytes = encode_idx(&arr).unwrap();
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
    }

    #[test]
    fn idx_rejects_every_single_byte_magic_mutation() {
        let mut bytes = vec![0u8, 0, 8, 1];
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[9, 9]);
        assert!(parse_idx(&bytes).is_ok());
        for pos in 0..3 {
            for delta in 1..=255u8 {
                let mut corrupt = bytes.clone();
                corrupt[pos] = corrupt[pos].wrapping_add(delta);
                assert!(
                    parse_idx(&corrupt).is_err(),
                    "mutation at byte {pos} value {} accepted",
                    corrupt[pos]
                );
            }
        }
    }

    #[test]
    fn zero_noise_zero_translation_gives_identical_class_images() {
        let spec = SyntheticSpec {
            train_per_class: 5,
            test_per_class: 2,
            noise_amplitude: 0.0,
            max_translation: 0,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        for class in 0..spec.classes {
            let members: Vec<&Image> = train
                .images
                .iter()
                .zip(&train.labels)
                .filter(|(_, &l)| l == class)
                .map(|(im, _)| im)
                .collect();
            for img in &members[1..] {
                assert_eq!(img.data, members[0].data);
            }
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_dataset() {
        let spec = SyntheticSpec {
            train_per_class: 10,
            test_per_class: 4,
            ..SyntheticSpec::default()
        };
        let (tr1, te1) = generate_synthetic(&spec).unwrap();
        let (tr2, te2) = generate_synthetic(&spec).unwrap();
        for (a, b) in tr1.images.iter().zip(&tr2.images) {
            assert_eq!(a.data, b.data);
        }
        for (a, b) in te1.images.iter().zip(&te2.images) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn imbalance_vector_controls_train_counts() {
        let spec = SyntheticSpec {
            train_counts: Some(vec![10, 3, 3, 3]),
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        assert_eq!(train.len(), 19);
        assert_eq!(test.len(), 8);
        assert_eq!(train.labels.iter().filter(|&&l| l == 0).count(), 10);
    }

    #[test]
    fn dataset_idx_round_trip_preserves_quantized_values() {
        let spec = SyntheticSpec {
            train_per_class: 3,
            test_per_class: 1,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let (im_arr, lb_arr) = dataset_to_idx(&train).unwrap();
        let back = dataset_from_idx(&im_arr, &lb_arr, spec.classes).unwrap();
        assert_eq!(back.labels, train.labels);
        let (im_arr2, lb_arr2) = dataset_to_idx(&back).unwrap();
        assert_eq!(im_arr, im_arr2);
        assert_eq!(lb_arr, lb_arr2);
    }

    #[test]
    fn three_nearest_neighbors_learn_the_default_spec() {
        // Small-scale version of the learnability check; the acceptance suite
        // runs it at the full default size.
        let spec = SyntheticSpec {
            train_per_class: 60,
            test_per_class: 20,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let acc = knn_accuracy(&train, &test, 3);
        assert!(acc >= 0.95, "3-NN accuracy {acc}");
    }

    /// Plain k-nearest-neighbor vote on raw pixels (test-only oracle).
    pub fn knn_accuracy(train: &Dataset, test: &Dataset, k: usize) -> f64 {
        let mut correct = 0usize;
        for (img, &label) in test.images.iter().zip(&test.labels) {
            let mut dists: Vec<(f64, usize)> = train
                .images
                .iter()
                .zip(&train.labels)
                .map(|(t, &tl)| {
                    let d: f64 = t
                        .data
                        .iter()
                        .zip(&img.data)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, tl)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut votes = vec![0usize; train.num_classes];
            for &(_, l) in dists.iter().take(k) {
                votes[l] += 1;
            }
            let pred = votes
                .iter()
                .enumerate()
                .max_by_key(|(_, &v)| v)
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }
}
