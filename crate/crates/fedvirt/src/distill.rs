//! Virtual-data synthesis: statistics-based initialization, client-side
//! iterative distribution matching, and server-side federated gradient
//! matching.
//!
//! Distribution matching descends on virtual pixels to pull per-class feature
//! means toward the real data's, under a frozen feature extractor. Gradient
//! matching descends on virtual pixels to pull the model gradient induced by
//! the virtual set toward a target gradient; the pixel gradient of that
//! objective is a mixed second derivative, taken exactly through the recorded
//! backward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{self, ModelParams};
use crate::tensor::{NamedTensors, Tensor};

/// A small labeled image set with exactly `ipc` examples per class, stored
/// class-major. Pixels are the optimizable quantity; labels are fixed for the
/// dataset's lifetime.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ipc: usize,
    /// Per-channel clamp range applied after every optimizer step.
    pub pixel_range: Vec<(f64, f64)>,
}

impl VirtualDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct classes, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labels.clone();
        c.dedup();
        c
    }

    /// Row range of a class block in the class-major layout.
    pub fn class_rows(&self, class: usize) -> Option<(usize, usize)> {
        let start = self.labels.iter().position(|&l| l == class)?;
        Some((start, self.ipc))
    }

    /// Checks the structural invariants: class-major order, exactly `ipc`
    /// rows per class, finite pixels inside the clamp range.
    pub fn check_invariants(&self) -> Result<()> {
        if self.ipc == 0 || self.labels.is_empty() {
            return Err(Error::contract("virtual dataset must be nonempty".to_string()));
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::contract(format!(
                "{} images for {} labels",
                self.images.shape()[0],
                self.labels.len()
            )));
        }
        let classes = self.classes();
        if self.labels.len() != classes.len() * self.ipc {
            return Err(Error::contract(format!(
                "{} rows for {} classes at ipc {}",
                self.labels.len(),
                classes.len(),
                self.ipc
            )));
        }
        for (ci, &class) in classes.iter().enumerate() {
            if ci > 0 && class <= classes[ci - 1] {
                return Err(Error::contract("class blocks must be ascending".to_string()));
            }
            let block = &self.labels[ci * self.ipc..(ci + 1) * self.ipc];
            if block.iter().any(|&l| l != class) {
                return Err(Error::contract(format!(
                    "class block {ci} is not homogeneous"
                )));
            }
        }
        let c = self.images.shape()[1];
        if self.pixel_range.len() != c {
            return Err(Error::contract(format!(
                "{} channel ranges for {} channels",
                self.pixel_range.len(),
                c
            )));
        }
        let per: usize = self.images.shape()[2..].iter().product();
        for (i, &v) in self.images.data().iter().enumerate() {
            let ch = (i / per) % c;
            let (lo, hi) = self.pixel_range[ch];
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::contract(format!(
                    "pixel {i} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn clamp_in_place(&mut self) {
        let c = self.images.shape()[1];
        let per: usize = self.images.shape()[2..].iter().product();
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let (lo, hi) = self.pixel_range[(i / per) % c];
            *v = v.clamp(lo, hi);
        }
    }
}

/// Per-class elementwise image statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStat {
    pub mean: Tensor,
    pub std: Tensor,
    pub count: usize,
}

/// Per-class mean/std statistics; classes with no samples are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub classes: BTreeMap<usize, ClassStat>,
}

/// Per-class elementwise mean and population standard deviation.
pub fn class_stats(dataset: &LabeledDataset) -> ClassStats {
    let (h, w) = dataset.image_hw();
    let c = dataset.channels();
    let per = c * h * w;
    let mut classes = BTreeMap::new();
    for (&class, idxs) in &dataset.per_class_indices() {
        let n = idxs.len();
        let mut mean = vec![0.0; per];
        for &i in idxs {
            let img = &dataset.images.data()[i * per..(i + 1) * per];
            for (m, &v) in mean.iter_mut().zip(img) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; per];
        for &i in idxs {
            let img = &dataset.images.data()[i * per..(i + 1) * per];
            for ((s, &v), &m) in var.iter_mut().zip(img).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|&s| (s / n as f64).sqrt()).collect();
        classes.insert(
            class,
            ClassStat {
                mean: Tensor::from_vec(vec![c, h, w], mean).expect("shape"),
                std: Tensor::from_vec(vec![c, h, w], std).expect("shape"),
                count: n,
            },
        );
    }
    ClassStats { classes }
}

/// Unweighted mean of client means and of client stds, per class, over the
/// clients that possess the class.
pub fn aggregate_stats(client_stats: &[ClassStats]) -> Result<ClassStats> {
    if client_stats.is_empty() {
        return Err(Error::contract("aggregate_stats: no clients".to_string()));
    }
    let mut all_classes: Vec<usize> = client_stats
        .iter()
        .flat_map(|s| s.classes.keys().copied())
        .collect();
    all_classes.sort_unstable();
    all_classes.dedup();
    let mut classes = BTreeMap::new();
    for class in all_classes {
        let holders: Vec<&ClassStat> = client_stats
            .iter()
            .filter_map(|s| s.classes.get(&class))
            .collect();
        let inv = 1.0 / holders.len() as f64;
        let mut mean = Tensor::zeros(holders[0].mean.shape());
        let mut std = Tensor::zeros(holders[0].std.shape());
        let mut count = 0;
        for h in &holders {
            mean.axpy(inv, &h.mean);
            std.axpy(inv, &h.std);
            count += h.count;
        }
        classes.insert(class, ClassStat { mean, std, count });
    }
    Ok(ClassStats { classes })
}

/// Samples `ipc` images per class from `N(mean_k, std_k)` elementwise,
/// clamped into `pixel_range`; class-major, deterministic under the seed.
pub fn init_virtual(
    stats: &ClassStats,
    ipc: usize,
    pixel_range: &[(f64, f64)],
    seed: u64,
) -> Result<VirtualDataset> {
    if ipc == 0 {
        return Err(Error::contract("init_virtual: ipc must be >= 1".to_string()));
    }
    let Some(first) = stats.classes.values().next() else {
        return Err(Error::contract("init_virtual: empty statistics".to_string()));
    };
    let img_shape = first.mean.shape().to_vec();
    let per: usize = img_shape.iter().product();
    let c = img_shape[0];
    if pixel_range.len() != c {
        return Err(Error::contract(format!(
            "init_virtual: {} channel ranges for {} channels",
            pixel_range.len(),
            c
        )));
    }
    let spatial = per / c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(stats.classes.len() * ipc * per);
    let mut labels = Vec::with_capacity(stats.classes.len() * ipc);
    for (&class, stat) in &stats.classes {
        for _ in 0..ipc {
            labels.push(class);
            for p in 0..per {
                let z: f64 = rng.sample(StandardNormal);
                let v = stat.mean.data()[p] + stat.std.data()[p] * z;
                let (lo, hi) = pixel_range[p / spatial];
                data.push(v.clamp(lo, hi));
            }
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(&img_shape);
    let out = VirtualDataset {
        images: Tensor::from_vec(shape, data)?,
        labels,
        ipc,
        pixel_range: pixel_range.to_vec(),
    };
    out.check_invariants()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Differentiable augmentation

/// Transform parameters for one augmentation draw. Two batches transformed
/// with the same parameters see the same crop shift, scale jitter and
/// intensity jitter (the shared-randomness contract between real and virtual
/// batches).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub shift_x: isize,
    pub shift_y: isize,
    pub hscale: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            shift_x: 0,
            shift_y: 0,
            hscale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    /// Draws crop shift (up to 1/8 of the side), horizontal scale in
    /// [0.8, 1.2], brightness in +-0.1 and contrast in [0.85, 1.15].
    /// `lo`/`hi` give the data range the brightness jitter scales with.
    pub fn draw(seed: u64, image_side: usize, lo: f64, hi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_shift = (image_side / 8) as isize;
        AugmentParams {
            shift_x: rng.gen_range(-max_shift..=max_shift),
            shift_y: rng.gen_range(-max_shift..=max_shift),
            hscale: rng.gen_range(0.8..1.2),
            brightness: rng.gen_range(-0.1..0.1) * (hi - lo),
            contrast: rng.gen_range(0.85..1.15),
        }
    }
}

fn hscale_weights(width: usize, s: f64) -> Vec<f64> {
    let c = (width as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; width * width];
    for x in 0..width {
        let u = (x as f64 - c) / s + c;
        if u < 0.0 || u > (width - 1) as f64 {
            continue;
        }
        let u0 = u.floor() as usize;
        let f = u - u0 as f64;
        w[x * width + u0] += 1.0 - f;
        if f > 0.0 && u0 + 1 < width {
            w[x * width + u0 + 1] += f;
        }
    }
    w
}

/// Applies the differentiable augmentation chain (crop shift, horizontal
/// scale, brightness, contrast) to a recorded batch. Gradients flow to the
/// input pixels.
pub fn augment_graph(g: &mut Graph, batch: Var, params: &AugmentParams) -> Result<Var> {
    let shape = g.shape(batch).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("dsa_augment", format!("{:?}", shape)));
    }
    let mut x = batch;
    if params.shift_x != 0 || params.shift_y != 0 {
        x = g.shift2d(x, params.shift_x, params.shift_y)?;
    }
    if params.hscale != 1.0 {
        let w = Arc::new(hscale_weights(shape[3], params.hscale));
        x = g.hresample(x, w)?;
    }
    if params.brightness != 0.0 {
        x = g.add_scalar(x, params.brightness)?;
    }
    if params.contrast != 1.0 {
        // pivot around the per-image mean
        let m = g.group_mean_broadcast(x, 1)?;
        let d = g.sub(x, m)?;
        let dc = g.scale(d, params.contrast)?;
        x = g.add(dc, m)?;
    }
    Ok(x)
}

/// Value-level augmentation with parameters drawn from `shared_seed`; two
/// calls with the same seed and image side apply identical transforms.
pub fn dsa_augment(batch: &Tensor, shared_seed: u64) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::shape("dsa_augment", format!("{:?}", shape)));
    }
    let params = AugmentParams::draw(shared_seed, shape[3], 0.0, 1.0);
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let y = augment_graph(&mut g, x, &params)?;
    Ok(g.value(y).clone())
}

// ---------------------------------------------------------------------------
// Distribution matching

#[derive(Clone, Debug)]
pub struct DmOptions {
    pub steps: usize,
    pub lr: f64,
    pub real_batch_per_class: usize,
    pub augment: bool,
    pub seed: u64,
}

/// Diagnostics of one distillation call; losses measured against the full
/// real set before the first and after the last pixel update.
#[derive(Clone, Debug)]
pub struct DistillTrace {
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Iterative distribution matching: descends on virtual pixels to minimize
/// the per-class feature-mean MMD against sampled real batches, under a
/// frozen feature extractor. Labels and the extractor are untouched.
pub fn distribution_match(
    real: &LabeledDataset,
    virtual_data: &VirtualDataset,
    extractor: &ModelParams,
    opts: &DmOptions,
) -> Result<(VirtualDataset, DistillTrace)> {
    virtual_data.check_invariants()?;
    let real_by_class = real.per_class_indices();
    let real_classes: Vec<usize> = real_by_class.keys().copied().collect();
    let virt_classes = virtual_data.classes();
    if real_classes != virt_classes {
        return Err(Error::contract(format!(
            "distribution_match: real classes {:?} differ from virtual classes {:?}",
            real_classes, virt_classes
        )));
    }
    if opts.real_batch_per_class == 0 || opts.lr <= 0.0 {
        return Err(Error::contract(
            "distribution_match: real_batch_per_class and lr must be positive".to_string(),
        ));
    }

    // The extractor is frozen for the whole call, so per-sample purity lets
    // us extract features of the full real set once and gather rows per step
    // (identical bits to extracting each batch separately). With augmentation
    // the pixels change per step, so features are recomputed.
    let full_real_feats = if opts.augment {
        None
    } else {
        Some(models::extract_features(extractor, &real.images)?)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = virtual_data.clone();
    let loss_before = full_set_mmd(real, &real_by_class, &out, extractor)?;

    for step in 0..opts.steps {
        // per-class real batch indices, sampled without replacement
        let mut batch_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&class, idxs) in &real_by_class {
            let mut pool = idxs.clone();
            pool.shuffle(&mut rng);
            pool.truncate(opts.real_batch_per_class.min(idxs.len()));
            batch_rows.insert(class, pool);
        }
        let aug = opts
            .augment
            .then(|| AugmentParams::draw(crate::derive_seed(&[opts.seed, step as u64]), real.image_hw().1, 0.0, 1.0));

        let mut g = Graph::new();
        let pixels = g.leaf(out.images.clone(), true);
        let pv = models::lift_params(&mut g, extractor, false);

        // virtual features (recorded, per-class slices of the class-major set)
        let virt_input = match &aug {
            Some(p) => augment_graph(&mut g, pixels, p)?,
            None => pixels,
        };
        let virt_feats = models::features_graph(&mut g, &extractor.arch, &pv, virt_input)?;
        let mut virt_map = BTreeMap::new();
        for (ci, &class) in virt_classes.iter().enumerate() {
            virt_map.insert(class, g.slice_rows(virt_feats, ci * out.ipc, out.ipc)?);
        }

        // real features (constants)
        let mut real_map = BTreeMap::new();
        match (&full_real_feats, &aug) {
            (Some(feats), _) => {
                for (&class, rows) in &batch_rows {
                    real_map.insert(class, g.constant(feats.gather_rows(rows)));
                }
            }
            (None, aug) => {
                for (&class, rows) in &batch_rows {
                    let mut imgs = real.images.gather_rows(rows);
                    if let Some(p) = aug {
                        let mut tg = Graph::new();
                        let xv = tg.constant(imgs);
                        let yv = augment_graph(&mut tg, xv, p)?;
                        imgs = tg.value(yv).clone();
                    }
                    real_map.insert(class, g.constant(models::extract_features(extractor, &imgs)?));
                }
            }
        }

        let mmd = losses::mmd_per_class(&mut g, &real_map, &virt_map)?;
        let grad = g.backward_values(mmd.value, &[pixels])?;
        out.images.axpy(-opts.lr, &grad[0]);
        out.clamp_in_place();
    }

    let loss_after = full_set_mmd(real, &real_by_class, &out, extractor)?;
    out.check_invariants()?;
    Ok((
        out,
        DistillTrace {
            loss_before,
            loss_after,
        },
    ))
}

/// Per-class feature-mean MMD between the full real set and the virtual set.
fn full_set_mmd(
    real: &LabeledDataset,
    real_by_class: &BTreeMap<usize, Vec<usize>>,
    virt: &VirtualDataset,
    extractor: &ModelParams,
) -> Result<f64> {
    let real_feats = models::extract_features(extractor, &real.images)?;
    let virt_feats = models::extract_features(extractor, &virt.images)?;
    let mut g = Graph::new();
    let mut real_map = BTreeMap::new();
    let mut virt_map = BTreeMap::new();
    let vf = g.constant(virt_feats);
    for (ci, &class) in virt.classes().iter().enumerate() {
        real_map.insert(class, g.constant(real_feats.gather_rows(&real_by_class[&class])));
        virt_map.insert(class, g.slice_rows(vf, ci * virt.ipc, virt.ipc)?);
    }
    Ok(losses::mmd_per_class(&mut g, &real_map, &virt_map)?.scalar(&g))
}

// ---------------------------------------------------------------------------
// Gradient matching

#[derive(Clone, Debug)]
pub struct GmOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Federated gradient matching: descends on virtual pixels to minimize the
/// distance between the model's CE gradient on the full virtual set and the
/// target gradient set. Labels and model parameters are untouched.
///
/// Each step differentiates the distance through the recorded backward pass,
/// so the pixel update uses the exact mixed second derivative.
pub fn gradient_match(
    virtual_data: &VirtualDataset,
    target_grads: &NamedTensors,
    model: &ModelParams,
    opts: &GmOptions,
) -> Result<(VirtualDataset, DistillTrace)> {
    virtual_data.check_invariants()?;
    model.all().check_compatible(target_grads, "gradient_match")?;
    let _ = opts.seed; // full-set objective; nothing to sample
    let mut out = virtual_data.clone();

    let eval = |virt: &VirtualDataset, with_grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let pixels = g.leaf(virt.images.clone(), true);
        let pv = models::lift_params(&mut g, model, true);
        let logits = models::logits_graph(&mut g, &model.arch, &pv, pixels)?;
        let ce = losses::cross_entropy(&mut g, logits, &virt.labels)?;
        let theta = pv.vars();
        let grads = g.backward(ce.value, &theta)?;
        let named: Vec<(String, Var)> = pv
            .all()
            .iter()
            .map(|(n, _)| n.clone())
            .zip(grads)
            .collect();
        let targets: Vec<(String, Var)> = target_grads
            .0
            .iter()
            .map(|(n, t)| (n.clone(), g.constant(t.clone())))
            .collect();
        let dist = losses::gradient_distance(&mut g, &named, &targets)?;
        let value = dist.scalar(&g);
        if with_grad {
            let pg = g.backward_values(dist.value, &[pixels])?;
            Ok((value, Some(pg.into_iter().next().expect("one wrt"))))
        } else {
            Ok((value, None))
        }
    };

    let (loss_before, _) = eval(&out, false)?;
    for _ in 0..opts.steps {
        let (_, grad) = eval(&out, true)?;
        out.images.axpy(-opts.lr, &grad.expect("requested gradient"));
        out.clamp_in_place();
    }
    let (loss_after, _) = eval(&out, false)?;
    out.check_invariants()?;
    Ok((
        out,
        DistillTrace {
            loss_before,
            loss_after,
        },
    ))
}

// ---------------------------------------------------------------------------
// Heterogeneity diagnostic

/// Inter-client feature-mean distance: `sum_k || mean psi(a_k) - mean psi(b_k) ||^2`
/// over the classes present on both sides. The same statistic computed on
/// real and on distilled data exhibits the heterogeneity amplification that
/// motivates the global anchors.
pub fn feature_mmd_pair(
    extractor: &ModelParams,
    a: (&Tensor, &[usize]),
    b: (&Tensor, &[usize]),
) -> Result<f64> {
    let fa = models::extract_features(extractor, a.0)?;
    let fb = models::extract_features(extractor, b.0)?;
    let group = |labels: &[usize]| {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            m.entry(l).or_default().push(i);
        }
        m
    };
    let ga = group(a.1);
    let gb = group(b.1);
    let mut g = Graph::new();
    let mut am = BTreeMap::new();
    let mut bm = BTreeMap::new();
    for (&class, rows_a) in &ga {
        if let Some(rows_b) = gb.get(&class) {
            am.insert(class, g.constant(fa.gather_rows(rows_a)));
            bm.insert(class, g.constant(fb.gather_rows(rows_b)));
        }
    }
    if am.is_empty() {
        return Ok(0.0);
    }
    Ok(losses::mmd_per_class(&mut g, &am, &bm)?.scalar(&g))
}
