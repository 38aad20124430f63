//! Classifier architectures split into a feature extractor and a
//! classification head, so features, logits, parameter gradients and input
//! gradients are all available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Architecture identity plus the dimensions needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Three blocks of Conv(3x3, stride 1, pad 1) -> GroupNorm -> ReLU ->
    /// AvgPool(2,2), then one fully connected layer. Requires the image side
    /// to be divisible by 8 (three halvings).
    ConvNet {
        in_channels: usize,
        num_classes: usize,
        width: usize,
        image_side: usize,
        groups: usize,
    },
    /// Two-layer perceptron: linear -> relu as the extractor, linear head.
    /// Small and fast; the default architecture in the test suites.
    Mlp {
        in_dim: usize,
        num_classes: usize,
        hidden: usize,
    },
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::ConvNet { .. } => "convnet",
            Arch::Mlp { .. } => "mlp",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Arch::ConvNet { num_classes, .. } | Arch::Mlp { num_classes, .. } => *num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Arch::ConvNet {
                width, image_side, ..
            } => {
                let s = image_side / 8;
                width * s * s
            }
            Arch::Mlp { hidden, .. } => *hidden,
        }
    }
}

/// Model parameters, partitioned into extractor and head tensors. Immutable
/// by convention: updates produce new values, so params can be shared
/// read-only across parallel clients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub extractor: NamedTensors,
    pub head: NamedTensors,
}

impl ModelParams {
    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    /// All trainable tensors, extractor first, in canonical order.
    pub fn all(&self) -> NamedTensors {
        let mut out = self.extractor.clone();
        for (n, t) in &self.head.0 {
            out.push(n.clone(), t.clone());
        }
        out
    }

    /// Rebuilds a `ModelParams` from a flat named set produced by
    /// [`ModelParams::all`]. Order and names must match the architecture.
    pub fn from_all(arch: Arch, all: NamedTensors) -> Result<ModelParams> {
        let proto = match &arch {
            Arch::ConvNet {
                in_channels,
                num_classes,
                width,
                image_side,
                ..
            } => convnet_init(*in_channels, *num_classes, *width, *image_side, 0)?,
            Arch::Mlp {
                in_dim,
                num_classes,
                hidden,
            } => mlp_init(*in_dim, *num_classes, *hidden, 0)?,
        };
        let split = proto.extractor.len();
        if all.len() != split + proto.head.len() {
            return Err(Error::contract(format!(
                "parameter set has {} tensors, arch wants {}",
                all.len(),
                split + proto.head.len()
            )));
        }
        let mut extractor = NamedTensors::new();
        let mut head = NamedTensors::new();
        for (i, (name, t)) in all.0.into_iter().enumerate() {
            if i < split {
                extractor.push(name, t);
            } else {
                head.push(name, t);
            }
        }
        extractor.check_compatible(&proto.extractor, "from_all")?;
        head.check_compatible(&proto.head, "from_all")?;
        Ok(ModelParams {
            arch,
            extractor,
            head,
        })
    }

    /// `self + a * delta` over all parameters, as a new value.
    pub fn step(&self, a: f64, delta: &NamedTensors) -> ModelParams {
        let mut all = self.all();
        all.axpy(a, delta);
        ModelParams::from_all(self.arch.clone(), all).expect("same-shape step")
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// Group count for a ConvNet of the given width: 8 when it divides the
/// channel count, otherwise 1.
pub fn group_count(width: usize) -> usize {
    if width >= 8 && width % 8 == 0 {
        8
    } else {
        1
    }
}

/// Deterministic ConvNet initialization (Kaiming-uniform weights, zero
/// biases, unit GroupNorm scale).
pub fn convnet_init(
    in_channels: usize,
    num_classes: usize,
    width: usize,
    image_side: usize,
    seed: u64,
) -> Result<ModelParams> {
    if image_side == 0 || image_side % 8 != 0 {
        return Err(Error::contract(format!(
            "convnet_init: image_side {} must be a positive multiple of 8",
            image_side
        )));
    }
    if width == 0 || in_channels == 0 || num_classes == 0 {
        return Err(Error::contract(
            "convnet_init: width, in_channels and num_classes must be >= 1".to_string(),
        ));
    }
    let groups = group_count(width);
    let arch = Arch::ConvNet {
        in_channels,
        num_classes,
        width,
        image_side,
        groups,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = NamedTensors::new();
    for b in 1..=3usize {
        let cin = if b == 1 { in_channels } else { width };
        let w = kaiming_uniform(&mut rng, &[width, cin, 3, 3], cin * 9);
        extractor.push(format!("conv{b}.weight"), w);
        extractor.push(format!("conv{b}.bias"), Tensor::zeros(&[width]));
        extractor.push(format!("gn{b}.gamma"), Tensor::full(&[width], 1.0));
        extractor.push(format!("gn{b}.beta"), Tensor::zeros(&[width]));
    }
    let feat = arch.feature_dim();
    let mut head = NamedTensors::new();
    head.push("fc.weight", kaiming_uniform(&mut rng, &[num_classes, feat], feat));
    head.push("fc.bias", Tensor::zeros(&[num_classes]));
    Ok(ModelParams {
        arch,
        extractor,
        head,
    })
}

pub fn mlp_init(in_dim: usize, num_classes: usize, hidden: usize, seed: u64) -> Result<ModelParams> {
    if in_dim == 0 || hidden == 0 || num_classes == 0 {
        return Err(Error::contract(
            "mlp_init: all dimensions must be >= 1".to_string(),
        ));
    }
    let arch = Arch::Mlp {
        in_dim,
        num_classes,
        hidden,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = NamedTensors::new();
    extractor.push("fc1.weight", kaiming_uniform(&mut rng, &[hidden, in_dim], in_dim));
    extractor.push("fc1.bias", Tensor::zeros(&[hidden]));
    let mut head = NamedTensors::new();
    head.push("fc2.weight", kaiming_uniform(&mut rng, &[num_classes, hidden], hidden));
    head.push("fc2.bias", Tensor::zeros(&[num_classes]));
    Ok(ModelParams {
        arch,
        extractor,
        head,
    })
}

/// Parameters lifted onto a graph, in the same order as the value form.
pub struct ParamVars {
    pub extractor: Vec<(String, Var)>,
    pub head: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<(String, Var)> {
        let mut v = self.extractor.clone();
        v.extend(self.head.iter().cloned());
        v
    }

    pub fn vars(&self) -> Vec<Var> {
        self.all().into_iter().map(|(_, v)| v).collect()
    }

    fn get(&self, name: &str) -> Var {
        self.extractor
            .iter()
            .chain(self.head.iter())
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }
}

/// Registers every parameter tensor as a graph leaf.
pub fn lift_params(g: &mut Graph, p: &ModelParams, trainable: bool) -> ParamVars {
    let lift = |g: &mut Graph, set: &NamedTensors| {
        set.0
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable)))
            .collect::<Vec<_>>()
    };
    ParamVars {
        extractor: lift(g, &p.extractor),
        head: lift(g, &p.head),
    }
}

fn check_batch(arch: &Arch, shape: &[usize]) -> Result<()> {
    match arch {
        Arch::ConvNet {
            in_channels,
            image_side,
            ..
        } => {
            if shape.len() != 4
                || shape[1] != *in_channels
                || shape[2] != *image_side
                || shape[3] != *image_side
            {
                return Err(Error::shape(
                    "features",
                    format!(
                        "batch {:?} does not match convnet [N,{},{},{}]",
                        shape, in_channels, image_side, image_side
                    ),
                ));
            }
        }
        Arch::Mlp { in_dim, .. } => {
            let flat: usize = shape.iter().skip(1).product();
            if shape.is_empty() || flat != *in_dim {
                return Err(Error::shape(
                    "features",
                    format!("batch {:?} does not flatten to in_dim {}", shape, in_dim),
                ));
            }
        }
    }
    Ok(())
}

/// Builds the feature extractor on the graph: `psi(batch) -> [N, feature_dim]`.
pub fn features_graph(g: &mut Graph, arch: &Arch, pv: &ParamVars, batch: Var) -> Result<Var> {
    check_batch(arch, g.shape(batch))?;
    match arch {
        Arch::ConvNet { groups, .. } => {
            let mut x = batch;
            for b in 1..=3usize {
                let w = pv.get(&format!("conv{b}.weight"));
                let bias = pv.get(&format!("conv{b}.bias"));
                let gamma = pv.get(&format!("gn{b}.gamma"));
                let beta = pv.get(&format!("gn{b}.beta"));
                x = g.conv2d(x, w, 1, 1)?;
                x = g.bias_add(x, bias)?;
                x = g.group_norm(x, gamma, beta, *groups, GROUP_NORM_EPS)?;
                x = g.relu(x)?;
                x = g.avg_pool2d(x, 2, 2)?;
            }
            let n = g.shape(x)[0];
            let feat: usize = g.shape(x)[1..].iter().product();
            g.reshape(x, &[n, feat])
        }
        Arch::Mlp { in_dim, .. } => {
            let n = g.shape(batch)[0];
            let flat = g.reshape(batch, &[n, *in_dim])?;
            let w1 = pv.get("fc1.weight");
            let b1 = pv.get("fc1.bias");
            let w1t = g.transpose(w1)?;
            let h = g.matmul(flat, w1t)?;
            let h = g.bias_add(h, b1)?;
            g.relu(h)
        }
    }
}

/// Applies the classification head to extracted features.
pub fn logits_from_features(g: &mut Graph, arch: &Arch, pv: &ParamVars, feats: Var) -> Result<Var> {
    let (w, b) = match arch {
        Arch::ConvNet { .. } => (pv.get("fc.weight"), pv.get("fc.bias")),
        Arch::Mlp { .. } => (pv.get("fc2.weight"), pv.get("fc2.bias")),
    };
    let wt = g.transpose(w)?;
    let logits = g.matmul(feats, wt)?;
    g.bias_add(logits, b)
}

pub fn logits_graph(g: &mut Graph, arch: &Arch, pv: &ParamVars, batch: Var) -> Result<Var> {
    let feats = features_graph(g, arch, pv, batch)?;
    logits_from_features(g, arch, pv, feats)
}

/// `psi(batch)` as a plain tensor (throwaway record).
pub fn extract_features(p: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = lift_params(&mut g, p, false);
    let x = g.constant(batch.clone());
    let f = features_graph(&mut g, &p.arch, &pv, x)?;
    Ok(g.value(f).clone())
}

/// `h(psi(batch))` as a plain tensor.
pub fn predict_logits(p: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = lift_params(&mut g, p, false);
    let x = g.constant(batch.clone());
    let f = features_graph(&mut g, &p.arch, &pv, x)?;
    let l = logits_from_features(&mut g, &p.arch, &pv, f)?;
    Ok(g.value(l).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_batch(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn convnet_feature_dims() {
        let p = convnet_init(3, 10, 128, 24, 0).unwrap();
        assert_eq!(p.feature_dim(), 1152);
        let p = convnet_init(1, 2, 8, 8, 0).unwrap();
        assert_eq!(p.feature_dim(), 8);
    }

    #[test]
    fn convnet_rejects_indivisible_side() {
        assert!(convnet_init(3, 10, 16, 20, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = convnet_init(3, 4, 16, 16, 7).unwrap();
        let b = convnet_init(3, 4, 16, 16, 7).unwrap();
        assert_eq!(a, b);
        let c = mlp_init(12, 3, 16, 9).unwrap();
        let d = mlp_init(12, 3, 16, 9).unwrap();
        assert_eq!(c, d);
        assert_ne!(mlp_init(12, 3, 16, 10).unwrap(), c);
    }

    #[test]
    fn mlp_feature_dim() {
        let p = mlp_init(4, 3, 16, 0).unwrap();
        assert_eq!(p.feature_dim(), 16);
    }

    #[test]
    fn zero_input_features_finite() {
        let p = convnet_init(1, 2, 8, 8, 1).unwrap();
        let batch = Tensor::zeros(&[2, 1, 8, 8]);
        let f = extract_features(&p, &batch).unwrap();
        assert!(f.all_finite());
    }

    #[test]
    fn per_sample_purity() {
        // identical images give identical rows; perturbing one image changes
        // only its own row
        let p = convnet_init(3, 4, 16, 16, 3).unwrap();
        let img = rand_batch(21, &[1, 3, 16, 16]);
        let batch = Tensor::concat_rows(&[&img, &img, &img]);
        let f = extract_features(&p, &batch).unwrap();
        let d = p.feature_dim();
        assert_eq!(f.data()[..d], f.data()[d..2 * d]);
        assert_eq!(f.data()[..d], f.data()[2 * d..]);

        let mut perturbed = batch.clone();
        perturbed.data_mut()[2 * 3 * 16 * 16 + 5] += 0.25;
        let f2 = extract_features(&p, &perturbed).unwrap();
        assert_eq!(f.data()[..2 * d], f2.data()[..2 * d], "rows 0,1 must not move");
        assert_ne!(f.data()[2 * d..], f2.data()[2 * d..], "row 2 must move");
    }

    #[test]
    fn logits_equal_head_of_features() {
        let p = convnet_init(3, 5, 8, 16, 4).unwrap();
        let batch = rand_batch(8, &[3, 3, 16, 16]);
        let logits = predict_logits(&p, &batch).unwrap();

        let feats = extract_features(&p, &batch).unwrap();
        let mut g = Graph::new();
        let pv = lift_params(&mut g, &p, false);
        let fv = g.constant(feats);
        let l2 = logits_from_features(&mut g, &p.arch, &pv, fv).unwrap();
        assert_eq!(logits, *g.value(l2));
    }

    #[test]
    fn empty_batch_gives_empty_logits() {
        let p = convnet_init(3, 5, 8, 16, 4).unwrap();
        let batch = Tensor::zeros(&[0, 3, 16, 16]);
        let logits = predict_logits(&p, &batch).unwrap();
        assert_eq!(logits.shape(), &[0, 5]);
    }

    #[test]
    fn gradient_flows_to_every_parameter() {
        // cross-entropy through the full net: every parameter tensor gets a
        // nonzero gradient on a generic batch
        let p = convnet_init(3, 4, 8, 16, 5).unwrap();
        let batch = rand_batch(17, &[4, 3, 16, 16]);
        let labels = Arc::new(vec![0usize, 1, 2, 3]);
        let mut g = Graph::new();
        let pv = lift_params(&mut g, &p, true);
        let x = g.constant(batch);
        let logits = logits_graph(&mut g, &p.arch, &pv, x).unwrap();
        let ls = g.log_softmax(logits).unwrap();
        let picked = g.gather_rows(ls, labels).unwrap();
        let m = g.mean_all(picked).unwrap();
        let loss = g.scale(m, -1.0).unwrap();
        let wrt = pv.vars();
        let grads = g.backward_values(loss, &wrt).unwrap();
        for ((name, _), grad) in pv.all().iter().zip(&grads) {
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "parameter {name} received an all-zero gradient"
            );
        }
    }

    #[test]
    fn batch_shape_mismatch_is_error() {
        let p = convnet_init(3, 4, 8, 16, 5).unwrap();
        let batch = Tensor::zeros(&[2, 1, 16, 16]);
        assert!(extract_features(&p, &batch).is_err());
    }

    #[test]
    fn convnet_end_to_end_grad_check() {
        // CE o ConvNet matches finite differences within 1e-4 on a small net.
        let p = convnet_init(2, 3, 8, 8, 6).unwrap();
        let batch = rand_batch(33, &[4, 2, 8, 8]);
        let labels = Arc::new(vec![0usize, 1, 2, 0]);
        let arch = p.arch.clone();
        let names: Vec<String> = p.all().0.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor> = p
            .all()
            .0
            .iter()
            .map(|(_, t)| t.clone())
            .chain(std::iter::once(batch))
            .collect();
        let report = crate::autodiff::grad_check(
            move |g, vars| {
                let pvars: Vec<(String, Var)> = names
                    .iter()
                    .cloned()
                    .zip(vars[..names.len()].iter().copied())
                    .collect();
                let split = names.len() - 2;
                let pv = ParamVars {
                    extractor: pvars[..split].to_vec(),
                    head: pvars[split..].to_vec(),
                };
                let logits = logits_graph(g, &arch, &pv, vars[names.len()])?;
                let ls = g.log_softmax(logits)?;
                let picked = g.gather_rows(ls, labels.clone())?;
                let m = g.mean_all(picked)?;
                g.scale(m, -1.0)
            },
            &tensors,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "CE o ConvNet grad check failed: {} over {} coords",
            report.max_rel_error,
            report.coords_checked
        );
    }
}
