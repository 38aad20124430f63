//! Dataset ingestion and synthetic heterogeneous-client construction.
//!
//! Real corpora arrive through the IDX reader; desk-scale experiments use the
//! bundled blob-digits generator (four parametric shape classes at 16x16x3)
//! so the full suite runs with zero downloads. Domain shift between clients
//! is synthesized with deterministic per-client transform chains.

use std::collections::BTreeMap;
use std::fs;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An immutable labeled image set with a declared per-channel pixel range.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Declared range, one (min, max) per channel; all pixels lie inside.
    pub pixel_range: Vec<(f64, f64)>,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        pixel_range: Vec<(f64, f64)>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::contract(format!(
                "dataset images must be a nonempty [N,C,H,W] tensor, got {:?}",
                shape
            )));
        }
        if labels.len() != shape[0] {
            return Err(Error::contract(format!(
                "{} labels for {} images",
                labels.len(),
                shape[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::contract(format!(
                "label {} out of range [0,{})",
                bad, class_count
            )));
        }
        if pixel_range.len() != shape[1] {
            return Err(Error::contract(format!(
                "{} channel ranges for {} channels",
                pixel_range.len(),
                shape[1]
            )));
        }
        let ds = LabeledDataset {
            images,
            labels,
            class_count,
            pixel_range,
            provenance: provenance.into(),
        };
        for c in 0..ds.channels() {
            let (lo, hi) = ds.pixel_range[c];
            for n in 0..ds.len() {
                let px = ds.channel_pixels(n, c);
                if px.iter().any(|&v| v < lo || v > hi) {
                    return Err(Error::contract(format!(
                        "image {} channel {} leaves the declared range [{}, {}]",
                        n, c, lo, hi
                    )));
                }
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    fn channel_pixels(&self, n: usize, c: usize) -> &[f64] {
        let (h, w) = self.image_hw();
        let per = h * w;
        let base = (n * self.channels() + c) * per;
        &self.images.data()[base..base + per]
    }

    /// Indices grouped by class, ascending class order, ascending indices.
    pub fn per_class_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// Observed per-channel [min, max] over all images (the data-driven
    /// clamping range for distilled pixels).
    pub fn observed_range(&self) -> Vec<(f64, f64)> {
        let c = self.channels();
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
        for n in 0..self.len() {
            for (ci, r) in out.iter_mut().enumerate() {
                for &v in self.channel_pixels(n, ci) {
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            }
        }
        out
    }

    /// Grayscale-to-RGB lifting by channel replication.
    pub fn to_rgb(&self) -> LabeledDataset {
        if self.channels() == 3 {
            return self.clone();
        }
        assert_eq!(self.channels(), 1, "to_rgb expects 1 or 3 channels");
        let (h, w) = self.image_hw();
        let per = h * w;
        let mut data = Vec::with_capacity(self.len() * 3 * per);
        for n in 0..self.len() {
            let px = self.channel_pixels(n, 0);
            for _ in 0..3 {
                data.extend_from_slice(px);
            }
        }
        LabeledDataset {
            images: Tensor::from_vec(vec![self.len(), 3, h, w], data).expect("shape"),
            labels: self.labels.clone(),
            class_count: self.class_count,
            pixel_range: vec![self.pixel_range[0]; 3],
            provenance: format!("{} (rgb)", self.provenance),
        }
    }
}

// ---------------------------------------------------------------------------
// IDX ingestion

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
// Guard against absurd headers before allocating.
const IDX_MAX_DIM: u32 = 100_000_000;

fn parse_err(path: &str, offset: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        offset,
        detail: detail.into(),
    }
}

fn read_be_u32(buf: &[u8], offset: usize, path: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .ok_or_else(|| parse_err(path, offset as u64, "short header"))?
        .try_into()
        .expect("4 bytes");
    Ok(u32::from_be_bytes(bytes))
}

fn parse_idx(path: &str, magic_want: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_be_u32(&buf, 0, path)?;
    if magic != magic_want {
        return Err(parse_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, want 0x{magic_want:08x}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let d = read_be_u32(&buf, 4 + 4 * i, path)?;
        if d > IDX_MAX_DIM {
            return Err(parse_err(path, (4 + 4 * i) as u64, format!("oversize dimension {d}")));
        }
        dims.push(d as usize);
    }
    if dims[0] == 0 {
        return Err(parse_err(path, 4, "zero item count"));
    }
    let header = 4 + 4 * ndims;
    let want: usize = dims.iter().product();
    let got = buf.len() - header.min(buf.len());
    if got != want {
        return Err(parse_err(
            path,
            (header + got.min(want)) as u64,
            format!("payload holds {got} bytes, header declares {want}"),
        ));
    }
    Ok((dims, buf[header..].to_vec()))
}

/// Parses an IDX image/label file pair (big-endian, ubyte payloads; magic
/// `0x00000803` for images, `0x00000801` for labels). `normalize` maps bytes
/// to `[0,1]`; otherwise the declared range is `[0,255]`.
pub fn load_idx(images_path: &str, labels_path: &str, normalize: bool) -> Result<LabeledDataset> {
    let (idims, ibytes) = parse_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, lbytes) = parse_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(parse_err(
            labels_path,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let data: Vec<f64> = ibytes.iter().map(|&b| b as f64 * scale).collect();
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    let hi = if normalize { 1.0 } else { 255.0 };
    LabeledDataset::new(
        Tensor::from_vec(vec![n, 1, h, w], data)?,
        labels,
        class_count,
        vec![(0.0, hi)],
        format!("idx:{images_path}"),
    )
}

// ---------------------------------------------------------------------------
// Blob digits: the bundled desk-scale corpus

pub const BLOB_CLASSES: usize = 4;
pub const BLOB_SIDE: usize = 16;

/// Generates `n` labeled 16x16 RGB images of four parametric shapes
/// (disc, ring, cross, frame) with jittered geometry, per-channel intensity
/// variation and background noise. Deterministic under the seed.
pub fn blob_digits(n: usize, seed: u64) -> LabeledDataset {
    assert!(n >= 1, "blob_digits needs at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = BLOB_SIDE;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % BLOB_CLASSES;
        labels.push(class);
        let cx = s as f64 / 2.0 - 0.5 + rng.gen_range(-2.0..2.0);
        let cy = s as f64 / 2.0 - 0.5 + rng.gen_range(-2.0..2.0);
        let size = rng.gen_range(3.2..5.2);
        let thickness = rng.gen_range(1.0..1.6);
        let intensity = rng.gen_range(0.55..0.95);
        let chan_mul = [
            rng.gen_range(0.75..1.0),
            rng.gen_range(0.75..1.0),
            rng.gen_range(0.75..1.0),
        ];
        let noise_amp = rng.gen_range(0.02..0.12);
        let mut shape_mask = vec![0.0f64; s * s];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let v = match class {
                    // filled disc
                    0 => smooth_step(size - (dx * dx + dy * dy).sqrt()),
                    // ring outline
                    1 => smooth_step(thickness - ((dx * dx + dy * dy).sqrt() - size).abs()),
                    // plus-cross bars
                    2 => {
                        let bar_h = smooth_step(thickness - dy.abs()) * smooth_step(size - dx.abs());
                        let bar_v = smooth_step(thickness - dx.abs()) * smooth_step(size - dy.abs());
                        (bar_h + bar_v).min(1.0)
                    }
                    // square frame
                    _ => {
                        let d = dx.abs().max(dy.abs());
                        smooth_step(thickness - (d - size).abs())
                    }
                };
                shape_mask[y * s + x] = v;
            }
        }
        for mul in chan_mul {
            for &m in &shape_mask {
                let noise: f64 = rng.gen_range(0.0..noise_amp);
                data.push((m * intensity * mul + noise).clamp(0.0, 1.0));
            }
        }
    }
    LabeledDataset::new(
        Tensor::from_vec(vec![n, 3, s, s], data).expect("shape"),
        labels,
        BLOB_CLASSES,
        vec![(0.0, 1.0); 3],
        format!("blob-digits(n={n},seed={seed})"),
    )
    .expect("generator respects its own invariants")
}

fn smooth_step(x: f64) -> f64 {
    // 0 below -0.5, 1 above 0.5, linear ramp between: soft anti-aliased edge
    (x + 0.5).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Synthetic domain shift

/// A deterministic transform chain emulating cross-site acquisition
/// differences. Applied in a fixed order: rotate, tint, contrast, invert,
/// noise, then clamp to the declared range.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    /// Per-channel multiplicative tint, one factor per channel in [0, 2].
    pub tint_scale: Option<Vec<f64>>,
    /// Per-channel additive offset in [-1, 1] (in declared-range units).
    pub tint_offset: Option<Vec<f64>>,
    /// Contrast scaling about the range midpoint, in [0.25, 4].
    pub contrast: Option<f64>,
    /// Rotation in degrees, within +-15; bilinear resampling, min-fill.
    pub rotate_degrees: Option<f64>,
    /// Additive Gaussian noise sigma, >= 0.
    pub noise_sigma: Option<f64>,
    /// Intensity inversion about the declared range.
    pub invert: bool,
}

impl ShiftSpec {
    pub fn is_identity(&self) -> bool {
        self == &ShiftSpec::default()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if let Some(s) = &self.tint_scale {
            if s.len() != channels {
                return Err(Error::contract(format!(
                    "tint_scale has {} entries for {} channels",
                    s.len(),
                    channels
                )));
            }
            if s.iter().any(|&v| !(0.0..=2.0).contains(&v)) {
                return Err(Error::contract("tint_scale entries must lie in [0,2]".to_string()));
            }
        }
        if let Some(o) = &self.tint_offset {
            if o.len() != channels {
                return Err(Error::contract(format!(
                    "tint_offset has {} entries for {} channels",
                    o.len(),
                    channels
                )));
            }
            if o.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
                return Err(Error::contract("tint_offset entries must lie in [-1,1]".to_string()));
            }
        }
        if let Some(c) = self.contrast {
            if !(0.25..=4.0).contains(&c) {
                return Err(Error::contract(format!("contrast {c} outside [0.25,4]")));
            }
        }
        if let Some(r) = self.rotate_degrees {
            if !(-15.0..=15.0).contains(&r) {
                return Err(Error::contract(format!("rotate_degrees {r} outside [-15,15]")));
            }
        }
        if let Some(s) = self.noise_sigma {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::contract(format!("noise_sigma {s} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Applies a [`ShiftSpec`] to every image. Labels, shapes and the declared
/// range are preserved; output pixels are clamped back into the range.
pub fn synth_domain_shift(base: &LabeledDataset, spec: &ShiftSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate(base.channels())?;
    if spec.is_identity() {
        return Ok(LabeledDataset {
            provenance: base.provenance.clone(),
            ..base.clone()
        });
    }
    let (h, w) = base.image_hw();
    let c = base.channels();
    let per = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = base.images.data().to_vec();

    if let Some(deg) = spec.rotate_degrees {
        if deg != 0.0 {
            let theta = deg.to_radians();
            let (sin, cos) = theta.sin_cos();
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            let mut rotated = vec![0.0; data.len()];
            for img in 0..base.len() * c {
                let ch = img % c;
                let fill = base.pixel_range[ch].0;
                let src = &data[img * per..(img + 1) * per];
                let dst = &mut rotated[img * per..(img + 1) * per];
                for y in 0..h {
                    for x in 0..w {
                        // inverse rotation of the destination coordinate
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        let sx = cos * dx + sin * dy + cx;
                        let sy = -sin * dx + cos * dy + cy;
                        dst[y * w + x] = bilinear(src, h, w, sy, sx, fill);
                    }
                }
            }
            data = rotated;
        }
    }

    let scale = spec.tint_scale.clone().unwrap_or_else(|| vec![1.0; c]);
    let offset = spec.tint_offset.clone().unwrap_or_else(|| vec![0.0; c]);
    let contrast = spec.contrast.unwrap_or(1.0);
    let sigma = spec.noise_sigma.unwrap_or(0.0);
    for n in 0..base.len() {
        for ch in 0..c {
            let (lo, hi) = base.pixel_range[ch];
            let mid = (lo + hi) / 2.0;
            let px = &mut data[(n * c + ch) * per..(n * c + ch + 1) * per];
            for v in px.iter_mut() {
                let mut x = *v * scale[ch] + offset[ch];
                x = mid + contrast * (x - mid);
                if spec.invert {
                    x = lo + hi - x;
                }
                if sigma > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    x += sigma * z;
                }
                *v = x.clamp(lo, hi);
            }
        }
    }

    LabeledDataset::new(
        Tensor::from_vec(base.images.shape().to_vec(), data)?,
        base.labels.clone(),
        base.class_count,
        base.pixel_range.clone(),
        format!("{} + shift", base.provenance),
    )
}

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64, fill: f64) -> f64 {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return fill;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let v00 = src[y0 * w + x0];
    let v01 = src[y0 * w + x1];
    let v10 = src[y1 * w + x0];
    let v11 = src[y1 * w + x1];
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

// ---------------------------------------------------------------------------
// Class-balanced batching

/// Deterministic class-balanced batch sequence over `labels`.
///
/// Every batch contains at least two samples of every present class (repeating
/// samples of small classes when necessary), and one epoch covers every index
/// at least once. Fails when `batch_size` cannot fit two slots per class.
pub fn balanced_batches(labels: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::contract("balanced_batches: empty dataset".to_string()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let k = by_class.len();
    if batch_size < 2 * k {
        let class = *by_class.keys().last().expect("nonempty");
        return Err(Error::contract(format!(
            "balanced_batches: batch size {batch_size} cannot hold 2 samples of each of {k} classes (class {class} left out)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = by_class.keys().copied().collect();
    // per-class shuffled queues; drawing past the end reshuffles (repetition)
    let mut queues: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    for (&c, idxs) in &by_class {
        let mut q = idxs.clone();
        q.shuffle(&mut rng);
        queues.insert(c, (q, 0));
    }
    let mut remaining: BTreeMap<usize, usize> = by_class.iter().map(|(&c, v)| (c, v.len())).collect();
    let mut batches = Vec::new();
    while remaining.values().any(|&r| r > 0) {
        // 2 base slots per class, extras to the classes with most unseen samples
        let mut quota: BTreeMap<usize, usize> = classes.iter().map(|&c| (c, 2)).collect();
        let mut extra = batch_size - 2 * k;
        while extra > 0 {
            let (&best, _) = remaining
                .iter()
                .max_by_key(|(&c, &r)| (r.saturating_sub(quota[&c].min(r)), std::cmp::Reverse(c)))
                .expect("classes nonempty");
            *quota.get_mut(&best).expect("class") += 1;
            extra -= 1;
        }
        let mut batch = Vec::with_capacity(batch_size);
        for &c in &classes {
            let (queue, pos) = queues.get_mut(&c).expect("class");
            for _ in 0..quota[&c] {
                if *pos >= queue.len() {
                    queue.shuffle(&mut rng);
                    *pos = 0;
                }
                batch.push(queue[*pos]);
                *pos += 1;
                let r = remaining.get_mut(&c).expect("class");
                *r = r.saturating_sub(1);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}
