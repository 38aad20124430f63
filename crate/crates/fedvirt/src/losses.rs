//! Scalar training objectives: cross-entropy, per-class feature-mean MMD,
//! supervised contrastive alignment, gradient distance, the combined local
//! objective, and the proximal regularizer.
//!
//! Every loss is built on a [`Graph`], so its value is differentiable with
//! respect to whatever leaves the caller registered as trainable (model
//! parameters, virtual pixels, or both).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{self, Arch, ParamVars};
use crate::tensor::NamedTensors;

/// A differentiable scalar with a reporting breakdown of its components.
#[derive(Debug)]
pub struct LossValue {
    pub value: Var,
    pub breakdown: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn scalar(&self, g: &Graph) -> f64 {
        g.value(self.value).item()
    }
}

/// Mean over samples of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<LossValue> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("cross_entropy", format!("{:?}", shape)));
    }
    let (n, k) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::contract("cross_entropy: empty batch".to_string()));
    }
    if labels.len() != n {
        return Err(Error::contract(format!(
            "cross_entropy: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!(
            "cross_entropy: label {} out of range [0,{})",
            bad, k
        )));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.gather_rows(ls, Arc::new(labels.to_vec()))?;
    let m = g.mean_all(picked)?;
    let value = g.scale(m, -1.0)?;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("ce".to_string(), g.value(value).item());
    Ok(LossValue { value, breakdown })
}

/// Sum over classes of the squared distance between feature means:
/// `sum_k || mean(real_k) - mean(virt_k) ||^2`.
///
/// Both maps must cover exactly the same classes, each nonempty. A class the
/// caller wants ignored must be removed explicitly, never silently.
pub fn mmd_per_class(
    g: &mut Graph,
    real_feats: &BTreeMap<usize, Var>,
    virt_feats: &BTreeMap<usize, Var>,
) -> Result<LossValue> {
    if real_feats.is_empty() {
        return Err(Error::contract("mmd_per_class: no classes".to_string()));
    }
    let real_classes: Vec<usize> = real_feats.keys().copied().collect();
    let virt_classes: Vec<usize> = virt_feats.keys().copied().collect();
    if real_classes != virt_classes {
        return Err(Error::contract(format!(
            "mmd_per_class: class sets differ: {:?} vs {:?}",
            real_classes, virt_classes
        )));
    }
    let mut breakdown = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (&class, &rf) in real_feats {
        let vf = virt_feats[&class];
        for (side, v) in [("real", rf), ("virtual", vf)] {
            let s = g.shape(v);
            if s.len() != 2 || s[0] == 0 {
                return Err(Error::contract(format!(
                    "mmd_per_class: {} features for class {} must be a nonempty [n,d] matrix, got {:?}",
                    side, class, s
                )));
            }
        }
        let rm = g.mean_axis0(rf)?;
        let vm = g.mean_axis0(vf)?;
        let d = g.sub(rm, vm)?;
        let sq = g.mul(d, d)?;
        let term = g.sum_all(sq)?;
        breakdown.insert(format!("class_{class}"), g.value(term).item());
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(LossValue {
        value: total.expect("at least one class"),
        breakdown,
    })
}

/// Supervised contrastive loss over the pooled global + local batch
/// (global rows first). Features are L2-normalized internally; the softmax
/// denominator runs over all pooled indices except self, positives are the
/// same-label indices except self.
///
/// Computed in a max-subtracted form: with unit-norm embeddings the largest
/// possible logit is `1/temperature`, so subtracting it bounds every exponent
/// by zero without changing the value or its gradient.
pub fn supcon(
    g: &mut Graph,
    global_feats: Var,
    global_labels: &[usize],
    local_feats: Var,
    local_labels: &[usize],
    temperature: f64,
) -> Result<LossValue> {
    if temperature <= 0.0 {
        return Err(Error::contract(format!(
            "supcon: temperature must be positive, got {temperature}"
        )));
    }
    for (side, v, l) in [
        ("global", global_feats, global_labels),
        ("local", local_feats, local_labels),
    ] {
        let s = g.shape(v);
        if s.len() != 2 || s[0] != l.len() {
            return Err(Error::shape(
                "supcon",
                format!("{side} features {:?} with {} labels", s, l.len()),
            ));
        }
    }
    let labels: Vec<usize> = global_labels.iter().chain(local_labels).copied().collect();
    let n = labels.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "supcon: pooled batch must have at least 2 samples, got {n}"
        )));
    }
    // every sample needs at least one positive
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    if let Some((&class, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::contract(format!(
            "supcon: class {class} has a sample with no positive pair in the pooled batch"
        )));
    }

    let pooled = g.concat_rows(&[global_feats, local_feats])?;
    let z = g.l2_normalize_rows(pooled)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let shifted = g.add_scalar(logits, -1.0 / temperature)?;
    let ex = g.exp(shifted)?;

    let mut offdiag = vec![1.0; n * n];
    for i in 0..n {
        offdiag[i * n + i] = 0.0;
    }
    let mask = g.constant(crate::tensor::Tensor::from_vec(vec![n, n], offdiag)?);
    let masked = g.mul(ex, mask)?;
    let denom = g.sum_axis1(masked)?;
    let logd = g.log(denom)?;
    let denom_term = g.sum_all(logd)?;

    // positive weights: w[i][p] = 1/|P(i)| for p != i with the same label
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let p = counts[&labels[i]] - 1;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                w[i * n + j] = 1.0 / p as f64;
            }
        }
    }
    let wmask = g.constant(crate::tensor::Tensor::from_vec(vec![n, n], w)?);
    let weighted = g.mul(shifted, wmask)?;
    let pos_term = g.sum_all(weighted)?;

    let value = g.sub(denom_term, pos_term)?;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("con".to_string(), g.value(value).item());
    Ok(LossValue { value, breakdown })
}

/// Settings for [`total_loss`].
#[derive(Clone, Debug)]
pub struct TotalLossSettings {
    pub lambda: f64,
    pub tau_temp: f64,
    /// When set, the cross-entropy runs over the union of the local and
    /// global batches; otherwise over the local batch only.
    pub ce_includes_global: bool,
}

/// The local objective: cross-entropy plus `lambda` times the supervised
/// contrastive alignment against the global anchor batch.
///
/// Breakdown exposes the raw `ce` and `con` components;
/// `value == ce + lambda * con`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    arch: &Arch,
    pv: &ParamVars,
    local_images: Var,
    local_labels: &[usize],
    global_images: Var,
    global_labels: &[usize],
    settings: &TotalLossSettings,
) -> Result<LossValue> {
    let l = g.shape(local_images)[0];
    let gl = g.shape(global_images)[0];
    if l == 0 || gl == 0 {
        return Err(Error::contract(
            "total_loss: local and global batches must be nonempty".to_string(),
        ));
    }
    let pooled_images = g.concat_rows(&[local_images, global_images])?;
    let feats = models::features_graph(g, arch, pv, pooled_images)?;
    let logits = models::logits_from_features(g, arch, pv, feats)?;

    let ce = if settings.ce_includes_global {
        let mut labels = local_labels.to_vec();
        labels.extend_from_slice(global_labels);
        cross_entropy(g, logits, &labels)?
    } else {
        let local_logits = g.slice_rows(logits, 0, l)?;
        cross_entropy(g, local_logits, local_labels)?
    };

    let local_feats = g.slice_rows(feats, 0, l)?;
    let global_feats = g.slice_rows(feats, l, gl)?;
    let con = supcon(
        g,
        global_feats,
        global_labels,
        local_feats,
        local_labels,
        settings.tau_temp,
    )?;

    let con_scaled = g.scale(con.value, settings.lambda)?;
    let value = g.add(ce.value, con_scaled)?;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("ce".to_string(), g.value(ce.value).item());
    breakdown.insert("con".to_string(), g.value(con.value).item());
    Ok(LossValue { value, breakdown })
}

/// Sum over parameter tensors of `1 - cos(a_k, b_k)` between flattened
/// gradients.
///
/// A tensor where exactly one side has zero norm contributes 1 (as a
/// constant); where both sides are zero it contributes 0. Differentiable with
/// respect to side `a` elsewhere.
pub fn gradient_distance(
    g: &mut Graph,
    grads_a: &[(String, Var)],
    grads_b: &[(String, Var)],
) -> Result<LossValue> {
    if grads_a.len() != grads_b.len() {
        return Err(Error::shape(
            "gradient_distance",
            format!("{} tensors vs {}", grads_a.len(), grads_b.len()),
        ));
    }
    if grads_a.is_empty() {
        return Err(Error::contract("gradient_distance: empty gradient sets".to_string()));
    }
    let mut breakdown = BTreeMap::new();
    let mut total: Option<Var> = None;
    for ((na, va), (nb, vb)) in grads_a.iter().zip(grads_b) {
        if na != nb {
            return Err(Error::shape(
                "gradient_distance",
                format!("name `{na}` vs `{nb}`"),
            ));
        }
        if g.shape(*va) != g.shape(*vb) {
            return Err(Error::shape(
                "gradient_distance",
                format!("`{na}`: {:?} vs {:?}", g.shape(*va), g.shape(*vb)),
            ));
        }
        let a2 = g.value(*va).squared_norm();
        let b2 = g.value(*vb).squared_norm();
        // identical sides are an exact zero of the distance and of its
        // gradient; branching here keeps the fixed point bit-stable instead
        // of leaving one-ulp residue from the cosine evaluation
        let term = if g.value(*va).data() == g.value(*vb).data() {
            g.scalar(0.0)
        } else if a2 == 0.0 || b2 == 0.0 {
            g.scalar(1.0)
        } else {
            let prod = g.mul(*va, *vb)?;
            let dot = g.sum_all(prod)?;
            let asq = g.mul(*va, *va)?;
            let an2 = g.sum_all(asq)?;
            let bsq = g.mul(*vb, *vb)?;
            let bn2 = g.sum_all(bsq)?;
            let ia = g.rsqrt(an2)?;
            let ib = g.rsqrt(bn2)?;
            let c1 = g.mul(dot, ia)?;
            let cos = g.mul(c1, ib)?;
            let neg = g.scale(cos, -1.0)?;
            g.add_scalar(neg, 1.0)?
        };
        breakdown.insert(na.clone(), g.value(term).item());
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(LossValue {
        value: total.expect("nonempty"),
        breakdown,
    })
}

/// Value-level gradient distance between two named tensor sets.
pub fn gradient_distance_value(a: &NamedTensors, b: &NamedTensors) -> Result<f64> {
    a.check_compatible(b, "gradient_distance")?;
    let mut g = Graph::new();
    let av: Vec<(String, Var)> = a
        .0
        .iter()
        .map(|(n, t)| (n.clone(), g.constant(t.clone())))
        .collect();
    let bv: Vec<(String, Var)> = b
        .0
        .iter()
        .map(|(n, t)| (n.clone(), g.constant(t.clone())))
        .collect();
    let d = gradient_distance(&mut g, &av, &bv)?;
    Ok(d.scalar(&g))
}

/// FedProx proximal term: `(mu/2) * sum_k ||p_k - anchor_k||^2`.
pub fn prox_term(
    g: &mut Graph,
    params: &[(String, Var)],
    anchor: &NamedTensors,
    mu: f64,
) -> Result<LossValue> {
    if params.len() != anchor.len() {
        return Err(Error::shape(
            "prox_term",
            format!("{} tensors vs {}", params.len(), anchor.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for ((name, pv), (aname, at)) in params.iter().zip(&anchor.0) {
        if name != aname || g.shape(*pv) != at.shape() {
            return Err(Error::shape(
                "prox_term",
                format!("`{name}` vs `{aname}`"),
            ));
        }
        let ac = g.constant(at.clone());
        let d = g.sub(*pv, ac)?;
        let sq = g.mul(d, d)?;
        let s = g.sum_all(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("prox_term: empty parameter set".to_string()))?;
    let value = g.scale(total, mu / 2.0)?;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("prox".to_string(), g.value(value).item());
    Ok(LossValue { value, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::oracles;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        for k in [2usize, 5, 10] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::zeros(&[3, k]));
            let labels = vec![0usize; 3];
            let ce = cross_entropy(&mut g, logits, &labels).unwrap();
            assert!((ce.scalar(&g) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_decreases_with_margin() {
        // one-hot-favoring logits: loss decreases monotonically toward 0 as
        // the margin grows
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 4.0, 16.0, 64.0] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::from_vec(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap());
            let ce = cross_entropy(&mut g, logits, &[0]).unwrap().scalar(&g);
            assert!(ce < prev || (ce == 0.0 && prev == 0.0));
            prev = ce;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn ce_known_value() {
        // logits [[1,0]], label 0 -> -log(e/(e+1))
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[0]).unwrap().scalar(&g);
        let expect = -((1f64).exp() / ((1f64).exp() + 1.0)).ln();
        assert!((ce - expect).abs() < 1e-12, "{ce} vs {expect}");
        assert!((ce - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        assert!(cross_entropy(&mut g, logits, &[0, 3]).is_err());
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let k = 4;
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, k]), true);
        let ce = cross_entropy(&mut g, logits, &[2]).unwrap();
        let grad = g.backward_values(ce.value, &[logits]).unwrap();
        for (j, &v) in grad[0].data().iter().enumerate() {
            let expect = if j == 2 { 1.0 / k as f64 - 1.0 } else { 1.0 / k as f64 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let f = g.constant(rand_mat(&mut rng, 4, 3));
        let mut real = BTreeMap::new();
        let mut virt = BTreeMap::new();
        real.insert(0usize, f);
        virt.insert(0usize, f);
        let v = mmd_per_class(&mut g, &real, &virt).unwrap();
        assert_eq!(v.scalar(&g), 0.0);
    }

    #[test]
    fn mmd_hand_value() {
        // one class, real mean (1,0), virtual mean (0,1) -> ||(1,-1)||^2 = 2
        let mut g = Graph::new();
        let r = g.constant(Tensor::from_vec(vec![2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap());
        let v = g.constant(Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let mut real = BTreeMap::new();
        let mut virt = BTreeMap::new();
        real.insert(0usize, r);
        virt.insert(0usize, v);
        let out = mmd_per_class(&mut g, &real, &virt).unwrap();
        assert!((out.scalar(&g) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = rand_mat(&mut rng, 5, 3);
        let permuted = base.gather_rows(&[4, 2, 0, 1, 3]);
        let virt = rand_mat(&mut rng, 2, 3);
        let eval = |real_t: &Tensor| {
            let mut g = Graph::new();
            let r = g.constant(real_t.clone());
            let v = g.constant(virt.clone());
            let mut real = BTreeMap::new();
            let mut virtm = BTreeMap::new();
            real.insert(0usize, r);
            virtm.insert(0usize, v);
            mmd_per_class(&mut g, &real, &virtm).unwrap().scalar(&g)
        };
        assert!((eval(&base) - eval(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn mmd_additive_over_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r0, v0) = (rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 2, 4));
        let (r1, v1) = (rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 2, 4));
        let eval = |pairs: &[(usize, &Tensor, &Tensor)]| {
            let mut g = Graph::new();
            let mut real = BTreeMap::new();
            let mut virt = BTreeMap::new();
            for &(c, r, v) in pairs {
                real.insert(c, g.constant(r.clone()));
                virt.insert(c, g.constant(v.clone()));
            }
            mmd_per_class(&mut g, &real, &virt).unwrap().scalar(&g)
        };
        let both = eval(&[(0, &r0, &v0), (1, &r1, &v1)]);
        let only0 = eval(&[(0, &r0, &v0)]);
        let only1 = eval(&[(1, &r1, &v1)]);
        assert_eq!(both, only0 + only1, "additivity must be exact");
    }

    #[test]
    fn mmd_rejects_mismatched_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let a = g.constant(rand_mat(&mut rng, 2, 2));
        let mut real = BTreeMap::new();
        let mut virt = BTreeMap::new();
        real.insert(0usize, a);
        virt.insert(1usize, a);
        assert!(mmd_per_class(&mut g, &real, &virt).is_err());
    }

    #[test]
    fn supcon_identical_embeddings_closed_form() {
        // all pooled embeddings identical: every ratio is 1/(n-1), so the
        // loss is n*log(n-1)
        for n in [4usize, 6, 9] {
            let gcount = n / 2;
            let mut g = Graph::new();
            let row = vec![0.3, -0.2, 0.9];
            let mk = |count: usize| {
                Tensor::from_vec(vec![count, 3], row.iter().cycle().take(count * 3).copied().collect())
                    .unwrap()
            };
            let gf = g.constant(mk(gcount));
            let lf = g.constant(mk(n - gcount));
            let labels_g = vec![0usize; gcount];
            let labels_l = vec![0usize; n - gcount];
            let v = supcon(&mut g, gf, &labels_g, lf, &labels_l, 0.07).unwrap();
            let expect = n as f64 * ((n - 1) as f64).ln();
            assert!(
                (v.scalar(&g) - expect).abs() < 1e-9,
                "n={n}: {} vs {expect}",
                v.scalar(&g)
            );
        }
    }

    #[test]
    fn supcon_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = rand_mat(&mut rng, 6, 4);
        let labels = vec![0usize, 1, 0, 1, 0, 1];
        let perm = [3usize, 0, 5, 2, 4, 1];
        let pf = feats.gather_rows(&perm);
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let eval = |f: &Tensor, l: &[usize]| {
            let mut g = Graph::new();
            let gf = g.constant(f.slice_rows(0, 3));
            let lf = g.constant(f.slice_rows(3, 3));
            supcon(&mut g, gf, &l[..3], lf, &l[3..], 0.1).unwrap().scalar(&g)
        };
        let a = eval(&feats, &labels);
        let b = eval(&pf, &pl);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn supcon_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..100 {
            let d = rng.gen_range(2..=8);
            let gcount = rng.gen_range(1..=8usize);
            let lcount = rng.gen_range(1..=(16 - gcount));
            let n = gcount + lcount;
            // labels drawn so every class has >= 2 members
            let labels = oracles::balanced_labels(&mut rng, n, 3);
            let feats = rand_mat(&mut rng, n, d);
            let tau = rng.gen_range(0.05..1.0);

            let mut g = Graph::new();
            let gf = g.constant(feats.slice_rows(0, gcount));
            let lf = g.constant(feats.slice_rows(gcount, lcount));
            let got = supcon(&mut g, gf, &labels[..gcount], lf, &labels[gcount..], tau)
                .unwrap()
                .scalar(&g);
            let want = oracles::supcon_naive(feats.data(), n, d, &labels, tau);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: stable {got} vs naive {want}"
            );
        }
    }

    #[test]
    fn supcon_rejects_singleton_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let gf = g.constant(rand_mat(&mut rng, 2, 3));
        let lf = g.constant(rand_mat(&mut rng, 1, 3));
        let err = supcon(&mut g, gf, &[0, 0], lf, &[5], 0.1).unwrap_err();
        assert!(err.to_string().contains("class 5"), "{err}");
    }

    #[test]
    fn mmd_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let d = rng.gen_range(2..=8);
            let nr = rng.gen_range(1..=8usize);
            let nv = rng.gen_range(1..=8usize);
            let real = rand_mat(&mut rng, nr, d);
            let virt = rand_mat(&mut rng, nv, d);
            let mut g = Graph::new();
            let rv = g.constant(real.clone());
            let vv = g.constant(virt.clone());
            let mut rm = BTreeMap::new();
            let mut vm = BTreeMap::new();
            rm.insert(0usize, rv);
            vm.insert(0usize, vv);
            let got = mmd_per_class(&mut g, &rm, &vm).unwrap().scalar(&g);
            let want = oracles::mmd_naive(real.data(), nr, virt.data(), nv, d);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn gradient_distance_basics() {
        let mk = |vals: &[f64]| {
            let mut n = NamedTensors::new();
            n.push("w", Tensor::from_vec(vec![vals.len()], vals.to_vec()).unwrap());
            n
        };
        // equal nonzero gradients -> 0
        let d = gradient_distance_value(&mk(&[1.0, 2.0]), &mk(&[1.0, 2.0])).unwrap();
        assert!(d.abs() < 1e-12);
        // orthogonal -> 1
        let d = gradient_distance_value(&mk(&[1.0, 0.0]), &mk(&[0.0, 1.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // positive rescaling leaves the value unchanged
        let a = mk(&[0.3, -0.7, 0.2]);
        let b = mk(&[-0.1, 0.5, 0.9]);
        let mut b_scaled = b.clone();
        b_scaled.scale_in_place(7.5);
        let d1 = gradient_distance_value(&a, &b).unwrap();
        let d2 = gradient_distance_value(&a, &b_scaled).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        // symmetry
        let d3 = gradient_distance_value(&b, &a).unwrap();
        assert!((d1 - d3).abs() < 1e-12);
    }

    #[test]
    fn gradient_distance_zero_norm_convention() {
        let mk = |vals: &[f64]| {
            let mut n = NamedTensors::new();
            n.push("w", Tensor::from_vec(vec![vals.len()], vals.to_vec()).unwrap());
            n
        };
        let zero = mk(&[0.0, 0.0]);
        let nonzero = mk(&[1.0, 1.0]);
        assert_eq!(gradient_distance_value(&zero, &zero).unwrap(), 0.0);
        assert_eq!(gradient_distance_value(&zero, &nonzero).unwrap(), 1.0);
        assert_eq!(gradient_distance_value(&nonzero, &zero).unwrap(), 1.0);
    }

    #[test]
    fn gradient_distance_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let k = rng.gen_range(1..4usize);
            let mut a = NamedTensors::new();
            let mut b = NamedTensors::new();
            for i in 0..k {
                let d = rng.gen_range(1..6);
                let mk = |rng: &mut ChaCha8Rng| {
                    Tensor::from_vec(vec![d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap()
                };
                a.push(format!("t{i}"), mk(&mut rng));
                b.push(format!("t{i}"), mk(&mut rng));
            }
            let d = gradient_distance_value(&a, &b).unwrap();
            assert!(d >= 0.0 && d <= 2.0 * k as f64, "out of bounds: {d}");
        }
    }

    #[test]
    fn prox_values() {
        let mut anchor = NamedTensors::new();
        anchor.push("w", Tensor::scalar(1.0));
        let mk_graph = |param: f64, mu: f64| {
            let mut g = Graph::new();
            let pv = vec![("w".to_string(), g.leaf(Tensor::scalar(param), true))];
            let p = prox_term(&mut g, &pv, &anchor, mu).unwrap();
            p.scalar(&g)
        };
        assert_eq!(mk_graph(1.0, 2.0), 0.0);
        assert_eq!(mk_graph(3.0, 2.0), 4.0);
        assert_eq!(mk_graph(42.0, 0.0), 0.0);
    }

    #[test]
    fn losses_pass_grad_check() {
        // backward gradients of each loss against finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // supcon wrt both feature blocks
        let gf = rand_mat(&mut rng, 3, 4);
        let lf = rand_mat(&mut rng, 4, 4);
        let report = crate::autodiff::grad_check(
            |g, vars| {
                Ok(supcon(g, vars[0], &[0, 1, 0], vars[1], &[1, 0, 1, 0], 0.2)?.value)
            },
            &[gf, lf],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "supcon: {}", report.max_rel_error);

        // mmd wrt virtual features
        let real = rand_mat(&mut rng, 5, 3);
        let virt = rand_mat(&mut rng, 2, 3);
        let report = crate::autodiff::grad_check(
            move |g, vars| {
                let r = g.constant(real.clone());
                let mut rm = BTreeMap::new();
                let mut vm = BTreeMap::new();
                rm.insert(0usize, r);
                vm.insert(0usize, vars[0]);
                Ok(mmd_per_class(g, &rm, &vm)?.value)
            },
            &[virt],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "mmd: {}", report.max_rel_error);

        // gradient distance wrt side a
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 2, 3);
        let report = crate::autodiff::grad_check(
            move |g, vars| {
                let bv = g.constant(b.clone());
                let av = vec![("w".to_string(), vars[0])];
                let bvs = vec![("w".to_string(), bv)];
                Ok(gradient_distance(g, &av, &bvs)?.value)
            },
            &[a],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "gradient_distance: {}", report.max_rel_error);

        // prox wrt params
        let p = rand_mat(&mut rng, 3, 2);
        let mut anchor = NamedTensors::new();
        anchor.push("w", rand_mat(&mut rng, 3, 2));
        let report = crate::autodiff::grad_check(
            move |g, vars| {
                let pv = vec![("w".to_string(), vars[0])];
                Ok(prox_term(g, &pv, &anchor, 1.3)?.value)
            },
            &[p],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "prox: {}", report.max_rel_error);
    }

    #[test]
    fn total_loss_lambda_zero_is_plain_ce() {
        let p = models::mlp_init(8, 3, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let local = rand_mat(&mut rng, 4, 8);
        let global = rand_mat(&mut rng, 3, 8);
        let (ll, gl) = (vec![0usize, 1, 2, 0], vec![0usize, 1, 2]);

        let mut g = Graph::new();
        let pv = models::lift_params(&mut g, &p, false);
        let lv = g.constant(local.clone());
        let gv = g.constant(global.clone());
        let settings = TotalLossSettings {
            lambda: 0.0,
            tau_temp: 0.07,
            ce_includes_global: true,
        };
        let total = total_loss(&mut g, &p.arch, &pv, lv, &ll, gv, &gl, &settings).unwrap();

        // plain CE over the concatenated batch
        let mut g2 = Graph::new();
        let pv2 = models::lift_params(&mut g2, &p, false);
        let cat = Tensor::concat_rows(&[&local, &global]);
        let cv = g2.constant(cat);
        let logits = models::logits_graph(&mut g2, &p.arch, &pv2, cv).unwrap();
        let mut labels = ll.clone();
        labels.extend_from_slice(&gl);
        let ce = cross_entropy(&mut g2, logits, &labels).unwrap();
        assert!((total.scalar(&g) - ce.scalar(&g2)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_breakdown_sums() {
        let p = models::mlp_init(8, 3, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let local = rand_mat(&mut rng, 4, 8);
        let global = rand_mat(&mut rng, 3, 8);
        let mut g = Graph::new();
        let pv = models::lift_params(&mut g, &p, false);
        let lv = g.constant(local);
        let gv = g.constant(global);
        let lambda = 10.0;
        let settings = TotalLossSettings {
            lambda,
            tau_temp: 0.07,
            ce_includes_global: true,
        };
        let total =
            total_loss(&mut g, &p.arch, &pv, lv, &[0, 1, 2, 0], gv, &[0, 1, 2], &settings).unwrap();
        let ce = total.breakdown["ce"];
        let con = total.breakdown["con"];
        assert!((total.scalar(&g) - (ce + lambda * con)).abs() < 1e-12);
    }
}
