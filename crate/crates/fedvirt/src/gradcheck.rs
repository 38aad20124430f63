//! The numeric oracle suite behind `fedvirt gradcheck`.
//!
//! Every recorded primitive, every loss, the full CE-through-ConvNet path and
//! the pixel gradient of the gradient-distance objective (a mixed second
//! derivative) are compared against central finite differences at 5 random
//! points each, relative tolerance 1e-4 with h = 1e-5.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Var};
use crate::distill;
use crate::error::Result;
use crate::losses;
use crate::models::{self, ParamVars};
use crate::tensor::{NamedTensors, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: usize = 5;

/// One line of the gradcheck report.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape/data agree")
}

/// Contracts `y` with a deterministic probe and sums, so the scalar check
/// exercises every output coordinate of the primitive.
fn probe_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let probe: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let p = g.constant(Tensor::from_vec(shape, probe)?);
    let prod = g.mul(y, p)?;
    g.sum_all(prod)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y, 101)
        })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            probe_sum(g, y, 102)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            probe_sum(g, y, 103)
        })),
        ("scale", vec![vec![4]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.3)?;
            probe_sum(g, y, 104)
        })),
        ("add_scalar", vec![vec![4]], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 0.7)?;
            probe_sum(g, y, 105)
        })),
        ("relu", vec![vec![9]], Box::new(|g, v| {
            let y = g.relu(v[0])?;
            probe_sum(g, y, 106)
        })),
        ("exp", vec![vec![5]], Box::new(|g, v| {
            let y = g.exp(v[0])?;
            probe_sum(g, y, 107)
        })),
        ("log", vec![vec![5]], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 3.0)?;
            let y = g.log(y)?;
            probe_sum(g, y, 108)
        })),
        ("recip", vec![vec![5]], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 3.0)?;
            let y = g.recip(y)?;
            probe_sum(g, y, 109)
        })),
        ("rsqrt", vec![vec![5]], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 3.0)?;
            let y = g.rsqrt(y)?;
            probe_sum(g, y, 110)
        })),
        ("sqrt", vec![vec![5]], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 3.0)?;
            let y = g.sqrt(y)?;
            probe_sum(g, y, 111)
        })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y, 112)
        })),
        ("transpose", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            probe_sum(g, y, 113)
        })),
        ("reshape", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            probe_sum(g, y, 114)
        })),
        ("sum_all", vec![vec![3, 4]], Box::new(|g, v| g.sum_all(v[0]))),
        ("mean_all", vec![vec![3, 4]], Box::new(|g, v| g.mean_all(v[0]))),
        ("fill_like", vec![vec![]], Box::new(|g, v| {
            let y = g.fill_like(v[0], &[2, 3])?;
            probe_sum(g, y, 115)
        })),
        ("sum_axis0", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.sum_axis0(v[0])?;
            probe_sum(g, y, 116)
        })),
        ("sum_axis1", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.sum_axis1(v[0])?;
            probe_sum(g, y, 117)
        })),
        ("mean_axis0", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.mean_axis0(v[0])?;
            probe_sum(g, y, 118)
        })),
        ("broadcast_col", vec![vec![4]], Box::new(|g, v| {
            let y = g.broadcast_col(v[0], 3)?;
            probe_sum(g, y, 119)
        })),
        ("broadcast_row", vec![vec![4]], Box::new(|g, v| {
            let y = g.broadcast_row(v[0], 3)?;
            probe_sum(g, y, 120)
        })),
        ("channel_broadcast", vec![vec![3]], Box::new(|g, v| {
            let y = g.channel_broadcast(v[0], &[2, 3, 2, 2])?;
            probe_sum(g, y, 121)
        })),
        ("sum_to_channel", vec![vec![2, 3, 2, 2]], Box::new(|g, v| {
            let y = g.sum_to_channel(v[0])?;
            probe_sum(g, y, 122)
        })),
        ("group_mean_broadcast", vec![vec![2, 4, 3, 3]], Box::new(|g, v| {
            let y = g.group_mean_broadcast(v[0], 2)?;
            probe_sum(g, y, 123)
        })),
        ("conv2d", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3]], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            probe_sum(g, y, 124)
        })),
        ("conv2d_stride2", vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            probe_sum(g, y, 125)
        })),
        ("avg_pool2d", vec![vec![2, 3, 4, 4]], Box::new(|g, v| {
            let y = g.avg_pool2d(v[0], 2, 2)?;
            probe_sum(g, y, 126)
        })),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            probe_sum(g, y, 127)
        })),
        ("slice_rows", vec![vec![5, 3]], Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            probe_sum(g, y, 128)
        })),
        ("gather_rows", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.gather_rows(v[0], Arc::new(vec![2, 0, 1, 2]))?;
            probe_sum(g, y, 129)
        })),
        ("log_softmax", vec![vec![4, 5]], Box::new(|g, v| {
            let y = g.log_softmax(v[0])?;
            probe_sum(g, y, 130)
        })),
        ("shift2d", vec![vec![1, 2, 4, 4]], Box::new(|g, v| {
            let y = g.shift2d(v[0], 1, -2)?;
            probe_sum(g, y, 131)
        })),
        ("l2_normalize_rows", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 2.0)?;
            let y = g.l2_normalize_rows(y)?;
            probe_sum(g, y, 132)
        })),
        ("group_norm", vec![vec![2, 4, 3, 3], vec![4], vec![4]], Box::new(|g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
            probe_sum(g, y, 133)
        })),
        ("bias_add", vec![vec![2, 3, 2, 2], vec![3]], Box::new(|g, v| {
            let y = g.bias_add(v[0], v[1])?;
            probe_sum(g, y, 134)
        })),
        ("dsa_augment", vec![vec![2, 3, 8, 8]], Box::new(|g, v| {
            let params = distill::AugmentParams::draw(99, 8, 0.0, 1.0);
            let y = distill::augment_graph(g, v[0], &params)?;
            probe_sum(g, y, 135)
        })),
    ]
}

fn loss_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("loss_cross_entropy", vec![vec![5, 4]], Box::new(|g, v| {
            Ok(losses::cross_entropy(g, v[0], &[0, 1, 2, 3, 1])?.value)
        })),
        ("loss_mmd_per_class", vec![vec![5, 3], vec![2, 3], vec![4, 3], vec![3, 3]], Box::new(|g, v| {
            let mut real = BTreeMap::new();
            let mut virt = BTreeMap::new();
            real.insert(0usize, v[0]);
            virt.insert(0usize, v[1]);
            real.insert(1usize, v[2]);
            virt.insert(1usize, v[3]);
            Ok(losses::mmd_per_class(g, &real, &virt)?.value)
        })),
        ("loss_supcon", vec![vec![3, 4], vec![4, 4]], Box::new(|g, v| {
            Ok(losses::supcon(g, v[0], &[0, 1, 0], v[1], &[1, 0, 1, 0], 0.2)?.value)
        })),
        ("loss_gradient_distance", vec![vec![2, 3], vec![4]], Box::new(|g, v| {
            let b0 = g.constant(Tensor::from_vec(vec![2, 3], vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3])?);
            let b1 = g.constant(Tensor::from_vec(vec![4], vec![-0.6, 0.8, 0.2, -0.1])?);
            let a = vec![("p0".to_string(), v[0]), ("p1".to_string(), v[1])];
            let b = vec![("p0".to_string(), b0), ("p1".to_string(), b1)];
            Ok(losses::gradient_distance(g, &a, &b)?.value)
        })),
        ("loss_prox", vec![vec![3, 2], vec![4]], Box::new(|g, v| {
            let mut anchor = NamedTensors::new();
            anchor.push("p0", Tensor::from_vec(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.0, -0.8])?);
            anchor.push("p1", Tensor::from_vec(vec![4], vec![0.5, -0.5, 0.25, 0.0])?);
            let pv = vec![("p0".to_string(), v[0]), ("p1".to_string(), v[1])];
            Ok(losses::prox_term(g, &pv, &anchor, 1.7)?.value)
        })),
    ]
}

fn run_case(
    name: &str,
    shapes: &[Vec<usize>],
    builder: &Builder,
    rng: &mut ChaCha8Rng,
) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..TRIALS {
        let points: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
        match grad_check(builder, &points, H, TOL) {
            Ok(report) => {
                worst = worst.max(report.max_rel_error);
                ok &= report.passed();
            }
            Err(e) => {
                return CheckOutcome {
                    name: format!("{name} ({e})"),
                    max_rel_error: f64::INFINITY,
                    tol: TOL,
                    passed: false,
                }
            }
        }
    }
    CheckOutcome {
        name: name.to_string(),
        max_rel_error: worst,
        tol: TOL,
        passed: ok,
    }
}

/// CE through the full ConvNet, differentiated with respect to every
/// parameter tensor and the input pixels.
fn convnet_end_to_end(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for trial in 0..TRIALS {
        let p = models::convnet_init(2, 3, 8, 8, 1000 + trial as u64).expect("valid convnet");
        let batch = rand_tensor(rng, &[4, 2, 8, 8]);
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
        let split = names.len() - 2;
        let report = grad_check(
            move |g, vars| {
                let pvars: Vec<(String, Var)> = names
                    .iter()
                    .cloned()
                    .zip(vars[..names.len()].iter().copied())
                    .collect();
                let pv = ParamVars {
                    extractor: pvars[..split].to_vec(),
                    head: pvars[split..].to_vec(),
                };
                let logits = models::logits_graph(g, &arch, &pv, vars[names.len()])?;
                Ok(losses::cross_entropy(g, logits, &labels)?.value)
            },
            &tensors,
            H,
            TOL,
        );
        match report {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                ok &= r.passed();
            }
            Err(_) => ok = false,
        }
    }
    CheckOutcome {
        name: "convnet_ce_end_to_end".to_string(),
        max_rel_error: worst,
        tol: TOL,
        passed: ok,
    }
}

/// Combined local objective (CE + lambda * SupCon) on the MLP, checked with
/// respect to parameters and both image batches.
fn total_loss_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for trial in 0..TRIALS {
        let p = models::mlp_init(6, 3, 5, 2000 + trial as u64).expect("valid mlp");
        let names: Vec<String> = p.all().0.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor> = p
            .all()
            .0
            .iter()
            .map(|(_, t)| t.clone())
            .chain([rand_tensor(rng, &[4, 6]), rand_tensor(rng, &[3, 6])])
            .collect();
        let arch = p.arch.clone();
        let settings = losses::TotalLossSettings {
            lambda: 2.5,
            tau_temp: 0.2,
            ce_includes_global: true,
        };
        let report = grad_check(
            move |g, vars| {
                let pvars: Vec<(String, Var)> = names
                    .iter()
                    .cloned()
                    .zip(vars[..names.len()].iter().copied())
                    .collect();
                let pv = ParamVars {
                    extractor: pvars[..2].to_vec(),
                    head: pvars[2..].to_vec(),
                };
                Ok(losses::total_loss(
                    g,
                    &arch,
                    &pv,
                    vars[names.len()],
                    &[0, 1, 2, 0],
                    vars[names.len() + 1],
                    &[0, 1, 2],
                    &settings,
                )?
                .value)
            },
            &tensors,
            H,
            TOL,
        );
        match report {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                ok &= r.passed();
            }
            Err(_) => ok = false,
        }
    }
    CheckOutcome {
        name: "loss_total".to_string(),
        max_rel_error: worst,
        tol: TOL,
        passed: ok,
    }
}

/// Pixel gradient of the gradient-matching objective: differentiates the
/// distance between `grad_theta CE(model(pixels))` and a fixed target with
/// respect to the pixels. This is the mixed second derivative that
/// server-side distillation descends on; finite differences of the inner
/// gradient computation verify it end to end.
fn bilevel_pixel_gradient(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for trial in 0..TRIALS {
        let p = models::mlp_init(6, 3, 5, 3000 + trial as u64).expect("valid mlp");
        let labels = vec![0usize, 1, 2, 0];
        // target gradients from an unrelated batch
        let target: NamedTensors = {
            let other = rand_tensor(rng, &[4, 6]);
            let mut g = Graph::new();
            let pv = models::lift_params(&mut g, &p, true);
            let x = g.constant(other);
            let logits = models::logits_graph(&mut g, &p.arch, &pv, x).expect("forward");
            let ce = losses::cross_entropy(&mut g, logits, &labels).expect("ce");
            let vars = pv.vars();
            let grads = g.backward_values(ce.value, &vars).expect("backward");
            let mut t = NamedTensors::new();
            for ((n, _), gt) in pv.all().iter().zip(grads) {
                t.push(n.clone(), gt);
            }
            t
        };
        let pixels = rand_tensor(rng, &[4, 6]);
        let params = p.clone();
        let labels2 = labels.clone();
        let report = grad_check(
            move |g, vars| {
                let pv = models::lift_params(g, &params, true);
                let logits = models::logits_graph(g, &params.arch, &pv, vars[0])?;
                let ce = losses::cross_entropy(g, logits, &labels2)?;
                let theta = pv.vars();
                let grads = g.backward(ce.value, &theta)?;
                let named: Vec<(String, Var)> = pv
                    .all()
                    .iter()
                    .map(|(n, _)| n.clone())
                    .zip(grads)
                    .collect();
                let tv: Vec<(String, Var)> = target
                    .0
                    .iter()
                    .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                    .collect();
                Ok(losses::gradient_distance(g, &named, &tv)?.value)
            },
            &[pixels],
            H,
            TOL,
        );
        match report {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                ok &= r.passed();
            }
            Err(_) => ok = false,
        }
    }
    CheckOutcome {
        name: "bilevel_pixel_gradient".to_string(),
        max_rel_error: worst,
        tol: TOL,
        passed: ok,
    }
}

/// Runs the whole oracle suite.
pub fn run_suite() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    for (name, shapes, builder) in primitive_cases() {
        out.push(run_case(name, &shapes, &builder, &mut rng));
    }
    for (name, shapes, builder) in loss_cases() {
        out.push(run_case(name, &shapes, &builder, &mut rng));
    }
    out.push(total_loss_check(&mut rng));
    out.push(convnet_end_to_end(&mut rng));
    out.push(bilevel_pixel_gradient(&mut rng));
    out
}

/// Brute-force reference implementations, deliberately written as naive
/// loops over plain slices with no stabilization and no use of the recorded
/// tensor engine.
pub mod oracles {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Naive supervised contrastive loss over pooled features `[n*d]`.
    pub fn supcon_naive(feats: &[f64], n: usize, d: usize, labels: &[usize], tau: f64) -> f64 {
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row = &feats[i * d..(i + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / norm).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut loss = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for a in 0..n {
                if a != i {
                    denom += (dot(&z[i], &z[a]) / tau).exp();
                }
            }
            let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            let mut inner = 0.0;
            for &p in &positives {
                inner += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
            }
            loss += -inner / positives.len() as f64;
        }
        loss
    }

    /// Naive single-class feature-mean MMD.
    pub fn mmd_naive(real: &[f64], nr: usize, virt: &[f64], nv: usize, d: usize) -> f64 {
        let mut rm = vec![0.0; d];
        for i in 0..nr {
            for j in 0..d {
                rm[j] += real[i * d + j];
            }
        }
        let mut vm = vec![0.0; d];
        for i in 0..nv {
            for j in 0..d {
                vm[j] += virt[i * d + j];
            }
        }
        let mut acc = 0.0;
        for j in 0..d {
            let diff = rm[j] / nr as f64 - vm[j] / nv as f64;
            acc += diff * diff;
        }
        acc
    }

    /// Random label vector where every used class has at least two members.
    pub fn balanced_labels(rng: &mut ChaCha8Rng, n: usize, max_classes: usize) -> Vec<usize> {
        assert!(n >= 2);
        let k = rng.gen_range(1..=max_classes.min(n / 2)).max(1);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * k { i / 2 } else { rng.gen_range(0..k) }).collect();
        // Fisher-Yates with the provided rng
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let outcomes = run_suite();
        assert!(!outcomes.is_empty());
        for o in &outcomes {
            assert!(o.passed, "{}: max rel err {} > {}", o.name, o.max_rel_error, o.tol);
        }
    }
}
