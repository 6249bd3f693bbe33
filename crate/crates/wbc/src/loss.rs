//! Triplet ranking objective: Euclidean distances, per-triplet hinge loss,
//! exhaustive in-batch mining and the averaged batch loss with gradients
//! w.r.t. the final features.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::FinalFeature;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::axpy;

/// Guard added to distance denominators in subgradients; `d = 0` happens for
/// duplicate images.
pub const DIST_DELTA: f64 = 1e-12;

/// Indices of an (anchor, positive, negative) triple within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig<F> {
    /// Ranking margin α.
    pub margin: F,
}

impl<F: Scalar> Default for LossConfig<F> {
    fn default() -> Self {
        Self {
            margin: F::from_f64(0.2),
        }
    }
}

impl<F: Scalar> LossConfig<F> {
    pub fn new(margin: F) -> Result<Self> {
        if !(margin >= F::zero()) {
            return Err(Error::config(format!("margin must be non-negative, got {margin}")));
        }
        Ok(Self { margin })
    }
}

/// `‖a−b‖₂`.
pub fn euclid_dist<F: Scalar>(a: &FinalFeature<F>, b: &FinalFeature<F>) -> Result<F> {
    dist_slices(a.values(), b.values())
}

pub(crate) fn dist_slices<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!(
            "euclid_dist: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = F::zero();
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// `max(0, d(fi,fj) − d(fi,fk) + α)`.
pub fn triplet_hinge<F: Scalar>(
    fi: &FinalFeature<F>,
    fj: &FinalFeature<F>,
    fk: &FinalFeature<F>,
    cfg: &LossConfig<F>,
) -> Result<F> {
    hinge_slices(fi.values(), fj.values(), fk.values(), cfg.margin)
}

fn hinge_slices<F: Scalar>(fi: &[F], fj: &[F], fk: &[F], margin: F) -> Result<F> {
    let d_pos = dist_slices(fi, fj)?;
    let d_neg = dist_slices(fi, fk)?;
    Ok((d_pos - d_neg + margin).max(F::zero()))
}

/// Subgradient of [`triplet_hinge`]. A triplet exactly on the margin
/// boundary counts as inactive (zero gradient).
pub fn triplet_hinge_backward<F: Scalar>(
    fi: &FinalFeature<F>,
    fj: &FinalFeature<F>,
    fk: &FinalFeature<F>,
    cfg: &LossConfig<F>,
    d_loss: F,
) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
    let n = fi.len();
    let mut d_fi = vec![F::zero(); n];
    let mut d_fj = vec![F::zero(); n];
    let mut d_fk = vec![F::zero(); n];
    hinge_backward_into(
        fi.values(),
        fj.values(),
        fk.values(),
        cfg.margin,
        d_loss,
        &mut d_fi,
        &mut d_fj,
        &mut d_fk,
    )?;
    Ok((d_fi, d_fj, d_fk))
}

/// Accumulates the hinge subgradient into the provided buffers.
#[allow(clippy::too_many_arguments)]
fn hinge_backward_into<F: Scalar>(
    fi: &[F],
    fj: &[F],
    fk: &[F],
    margin: F,
    d_loss: F,
    d_fi: &mut [F],
    d_fj: &mut [F],
    d_fk: &mut [F],
) -> Result<F> {
    let d_pos = dist_slices(fi, fj)?;
    let d_neg = dist_slices(fi, fk)?;
    let value = (d_pos - d_neg + margin).max(F::zero());
    if !(d_pos - d_neg + margin > F::zero()) {
        return Ok(value);
    }
    let delta = F::from_f64(DIST_DELTA);
    let inv_pos = d_loss / (d_pos + delta);
    let inv_neg = d_loss / (d_neg + delta);
    for c in 0..fi.len() {
        let pos_diff = fi[c] - fj[c];
        let neg_diff = fi[c] - fk[c];
        d_fi[c] += pos_diff * inv_pos - neg_diff * inv_neg;
        d_fj[c] += (fj[c] - fi[c]) * inv_pos;
        d_fk[c] += neg_diff * inv_neg;
    }
    Ok(value)
}

/// Every valid `(i, j, k)` with `y_i = y_j`, `i ≠ j`, `y_i ≠ y_k`, in
/// ascending-index order.
pub fn mine_triplets(labels: &[usize]) -> Vec<Triplet> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j == i || labels[j] != labels[i] {
                continue;
            }
            for k in 0..n {
                if labels[k] == labels[i] {
                    continue;
                }
                out.push(Triplet {
                    anchor: i,
                    positive: j,
                    negative: k,
                });
            }
        }
    }
    out
}

/// Seeded subsample used when the exhaustive set exceeds a configured cap.
pub fn subsample_triplets(
    mut triplets: Vec<Triplet>,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Triplet> {
    if triplets.len() <= cap {
        return triplets;
    }
    triplets.shuffle(rng);
    triplets.truncate(cap);
    triplets
}

/// Loss, per-feature gradients and activity counters for one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss<F> {
    pub loss: F,
    /// One gradient per feature, already scaled by `1/|T|`.
    pub d_features: Vec<Vec<F>>,
    /// Triplets with a strictly positive hinge.
    pub active: usize,
    pub total: usize,
}

impl<F: Scalar> BatchLoss<F> {
    pub fn active_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.active as f64 / self.total as f64
        }
    }
}

/// Mean hinge loss over all mined triplets of the batch; an empty triplet
/// set yields zero loss and zero gradients.
pub fn batch_loss<F: Scalar>(
    features: &[FinalFeature<F>],
    labels: &[usize],
    cfg: &LossConfig<F>,
) -> Result<BatchLoss<F>> {
    if features.len() != labels.len() {
        return Err(Error::dimension(format!(
            "batch_loss: {} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let triplets = mine_triplets(labels);
    batch_loss_over(features, &triplets, cfg)
}

/// [`batch_loss`] over an explicit (possibly subsampled) triplet list.
pub fn batch_loss_over<F: Scalar>(
    features: &[FinalFeature<F>],
    triplets: &[Triplet],
    cfg: &LossConfig<F>,
) -> Result<BatchLoss<F>> {
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    for f in features {
        if f.len() != dim {
            return Err(Error::dimension(format!(
                "batch_loss: feature lengths {} vs {dim}",
                f.len()
            )));
        }
    }
    let mut d_features = vec![vec![F::zero(); dim]; features.len()];
    if triplets.is_empty() {
        return Ok(BatchLoss {
            loss: F::zero(),
            d_features,
            active: 0,
            total: 0,
        });
    }

    let scale = F::one() / F::from_usize(triplets.len());
    let mut sum = F::zero();
    let mut active = 0;
    // Per-index accumulation buffers keep the reduction order fixed.
    let mut d_fi = vec![F::zero(); dim];
    let mut d_fj = vec![F::zero(); dim];
    let mut d_fk = vec![F::zero(); dim];
    for t in triplets {
        for buf in [&mut d_fi, &mut d_fj, &mut d_fk] {
            buf.iter_mut().for_each(|v| *v = F::zero());
        }
        let value = hinge_backward_into(
            features[t.anchor].values(),
            features[t.positive].values(),
            features[t.negative].values(),
            cfg.margin,
            scale,
            &mut d_fi,
            &mut d_fj,
            &mut d_fk,
        )?;
        sum += value;
        if value > F::zero() {
            active += 1;
        }
        axpy(&mut d_features[t.anchor], &d_fi, F::one());
        axpy(&mut d_features[t.positive], &d_fj, F::one());
        axpy(&mut d_features[t.negative], &d_fk, F::one());
    }
    Ok(BatchLoss {
        loss: sum / F::from_usize(triplets.len()),
        d_features,
        active,
        total: triplets.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::concat_normalize;
    use crate::tensor::{finite_diff_grad, relative_error};
    use rand::{Rng, SeedableRng};

    #[test]
    fn euclid_dist_examples() {
        let a = concat_normalize(&[vec![1.0, 0.0]]).unwrap();
        let b = concat_normalize(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(euclid_dist(&a, &a).unwrap(), 0.0);
        let d = euclid_dist(&a, &b).unwrap();
        assert!((d - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unit_norm_distance_identity() {
        // For unit vectors, d² = 2 − 2·(a·b).
        let mut r = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..10 {
            let a = concat_normalize(&[(0..5).map(|_| r.random_range(-1.0..1.0)).collect()])
                .unwrap();
            let b = concat_normalize(&[(0..5).map(|_| r.random_range(-1.0..1.0)).collect()])
                .unwrap();
            let d = euclid_dist(&a, &b).unwrap();
            let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
            assert!((d * d - (2.0 - 2.0 * dot)).abs() < 1e-9);
        }
    }

    fn unit(values: Vec<f64>) -> FinalFeature<f64> {
        concat_normalize(&[values]).unwrap()
    }

    /// Unit vector at Euclidean distance `dist` from `[1, 0, 0]`: two unit
    /// vectors with angle φ between them are `2·sin(φ/2)` apart.
    fn at_distance(dist: f64) -> FinalFeature<f64> {
        let phi = 2.0 * (dist / 2.0).asin();
        unit(vec![phi.cos(), phi.sin(), 0.0])
    }

    #[test]
    fn hinge_examples() {
        let cfg = LossConfig::default();
        let fi = unit(vec![1.0, 0.0, 0.0]);
        // Margin satisfied: d_pos − d_neg + α = 0.1 − 0.5 + 0.2 < 0.
        let near = at_distance(0.1);
        let far = at_distance(0.5);
        assert_eq!(triplet_hinge(&fi, &near, &far, &cfg).unwrap(), 0.0);

        // fj = fi: loss = 0 − 0.1 + 0.2 = 0.1.
        let loss = triplet_hinge(&fi, &fi.clone(), &near, &cfg).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);

        // fj = fk: distances cancel, loss = α exactly.
        let other = unit(vec![0.0, 1.0, 0.0]);
        assert_eq!(triplet_hinge(&fi, &other, &other, &cfg).unwrap(), 0.2);
    }

    #[test]
    fn inactive_triplet_has_zero_gradient() {
        let cfg = LossConfig::default();
        let fi = unit(vec![1.0, 0.0]);
        let fj = unit(vec![1.0, 0.05]);
        let fk = unit(vec![0.0, 1.0]);
        assert_eq!(triplet_hinge(&fi, &fj, &fk, &cfg).unwrap(), 0.0);
        let (d_fi, d_fj, d_fk) = triplet_hinge_backward(&fi, &fj, &fk, &cfg, 1.0).unwrap();
        assert!(d_fi.iter().chain(&d_fj).chain(&d_fk).all(|&v| v == 0.0));
    }

    #[test]
    fn coincident_anchor_positive_stays_finite() {
        let cfg = LossConfig::default();
        let fi = unit(vec![1.0, 0.0]);
        let fk = unit(vec![0.8, 0.6]);
        let (d_fi, d_fj, d_fk) = triplet_hinge_backward(&fi, &fi.clone(), &fk, &cfg, 1.0).unwrap();
        for v in d_fi.iter().chain(&d_fj).chain(&d_fk) {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn active_hinge_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(31);
        let cfg = LossConfig { margin: 0.5 };
        let mut checked = 0;
        while checked < 5 {
            let dim = 4;
            let raw: Vec<f64> = (0..3 * dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let mk = |x: &[f64]| {
                (
                    unit(x[..dim].to_vec()),
                    unit(x[dim..2 * dim].to_vec()),
                    unit(x[2 * dim..].to_vec()),
                )
            };
            let (fi, fj, fk) = mk(&raw);
            let d_pos = euclid_dist(&fi, &fj).unwrap();
            let d_neg = euclid_dist(&fi, &fk).unwrap();
            let arg = d_pos - d_neg + cfg.margin;
            // Stay away from the kink and from zero distances.
            if arg < 1e-2 || d_pos < 1e-2 || d_neg < 1e-2 {
                continue;
            }
            checked += 1;

            // Probe the hinge as a function of the *normalized* coordinates.
            let flat: Vec<f64> = fi
                .values()
                .iter()
                .chain(fj.values())
                .chain(fk.values())
                .copied()
                .collect();
            let loss = |x: &[f64]| {
                let a = &x[..dim];
                let b = &x[dim..2 * dim];
                let c = &x[2 * dim..];
                let dp: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                let dn: f64 = a
                    .iter()
                    .zip(c)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                (dp - dn + cfg.margin).max(0.0)
            };
            let numeric = finite_diff_grad(loss, &flat, 1e-5).unwrap();
            let (d_fi, d_fj, d_fk) = triplet_hinge_backward(&fi, &fj, &fk, &cfg, 1.0).unwrap();
            let mut analytic = d_fi;
            analytic.extend(d_fj);
            analytic.extend(d_fk);
            let err = relative_error(&analytic, &numeric).unwrap();
            assert!(err < 1e-6, "gradient error {err}");
        }
    }

    #[test]
    fn mining_enumerates_in_ascending_order() {
        let t = mine_triplets(&[0, 0, 1]);
        assert_eq!(
            t,
            vec![
                Triplet { anchor: 0, positive: 1, negative: 2 },
                Triplet { anchor: 1, positive: 0, negative: 2 },
            ]
        );
        assert!(mine_triplets(&[0, 1, 2]).is_empty());
        assert_eq!(mine_triplets(&[0, 0, 1, 1]).len(), 8);
    }

    #[test]
    fn mining_count_matches_closed_form() {
        let mut r = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let n = r.random_range(2..10usize);
            let ids = r.random_range(1..4usize);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..ids)).collect();
            let mined = mine_triplets(&labels).len();
            let mut expect = 0;
            for id in 0..ids {
                let n_id = labels.iter().filter(|&&l| l == id).count();
                expect += n_id * n_id.saturating_sub(1) * (n - n_id);
            }
            assert_eq!(mined, expect);
        }
    }

    #[test]
    fn subsample_is_deterministic_and_capped() {
        let triplets = mine_triplets(&[0, 0, 0, 1, 1, 1]);
        assert!(triplets.len() > 4);
        let a = subsample_triplets(triplets.clone(), 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = subsample_triplets(triplets.clone(), 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let all = subsample_triplets(triplets.clone(), 1000, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(all, triplets);
    }

    #[test]
    fn identical_features_cost_exactly_the_margin() {
        let cfg = LossConfig::default();
        let f = unit(vec![1.0, 2.0, 2.0]);
        // Batch [A, A, B] mines exactly two triplets, so the mean of two
        // exact margins is exact.
        let features = vec![f.clone(), f.clone(), f.clone()];
        let out = batch_loss(&features, &[0, 0, 1], &cfg).unwrap();
        assert_eq!(out.loss, 0.2);
        assert_eq!(out.active, 2);
        assert_eq!(out.total, 2);
    }

    #[test]
    fn separated_clusters_have_zero_loss() {
        let cfg = LossConfig::default();
        let features = vec![
            unit(vec![1.0, 0.0, 0.001]),
            unit(vec![1.0, 0.0, -0.001]),
            unit(vec![0.0, 1.0, 0.001]),
            unit(vec![0.0, 1.0, -0.001]),
        ];
        let out = batch_loss(&features, &[0, 0, 1, 1], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.active, 0);
    }

    #[test]
    fn batch_loss_matches_naive_enumeration() {
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let cfg = LossConfig::default();
        for _ in 0..10 {
            let n = 6;
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2usize)).collect();
            let features: Vec<FinalFeature<f64>> = (0..n)
                .map(|_| unit((0..4).map(|_| r.random_range(-1.0..1.0)).collect()))
                .collect();
            let out = batch_loss(&features, &labels, &cfg).unwrap();

            // Naive recomputation with independent loops.
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        if i != j && labels[i] == labels[j] && labels[i] != labels[k] {
                            let dp = euclid_dist(&features[i], &features[j]).unwrap();
                            let dn = euclid_dist(&features[i], &features[k]).unwrap();
                            total += (dp - dn + 0.2).max(0.0);
                            count += 1;
                        }
                    }
                }
            }
            if count == 0 {
                assert_eq!(out.loss, 0.0);
            } else {
                let naive = total / count as f64;
                assert!((out.loss - naive).abs() < 1e-12, "{} vs {naive}", out.loss);
            }
        }
    }

    #[test]
    fn empty_triplet_set_gives_zero_loss_and_gradients() {
        let cfg = LossConfig::default();
        let features = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let out = batch_loss(&features, &[0, 1], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.total, 0);
        assert!(out.d_features.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_loss_is_rotation_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(34);
        let cfg = LossConfig::default();
        let dim = 4;
        let features: Vec<FinalFeature<f64>> = (0..6)
            .map(|_| unit((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        let labels = vec![0, 0, 0, 1, 1, 1];
        let base = batch_loss(&features, &labels, &cfg).unwrap();

        // Random orthogonal transform as a product of Givens rotations.
        let mut rot = vec![[0.0f64; 4]; 4];
        (0..dim).for_each(|i| rot[i][i] = 1.0);
        for _ in 0..8 {
            let i = r.random_range(0..dim);
            let mut j = r.random_range(0..dim);
            while j == i {
                j = r.random_range(0..dim);
            }
            let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            for row in rot.iter_mut() {
                let (a, b) = (row[i], row[j]);
                row[i] = c * a - s * b;
                row[j] = s * a + c * b;
            }
        }
        let rotated: Vec<FinalFeature<f64>> = features
            .iter()
            .map(|f| {
                let v = f.values();
                unit((0..dim)
                    .map(|i| (0..dim).map(|j| rot[j][i] * v[j]).sum())
                    .collect())
            })
            .collect();
        let turned = batch_loss(&rotated, &labels, &cfg).unwrap();
        assert!((base.loss - turned.loss).abs() < 1e-9);
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(35);
        let cfg = LossConfig::default();
        let dim = 3;
        let n = 5;
        let labels = vec![0, 0, 1, 1, 1];
        'outer: for _ in 0..20 {
            let flat: Vec<f64> = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let build = |x: &[f64]| -> Vec<FinalFeature<f64>> {
                x.chunks(dim).map(|c| unit(c.to_vec())).collect()
            };
            let features = build(&flat);
            // Exclude batches near a hinge kink or a zero distance.
            for t in mine_triplets(&labels) {
                let dp = euclid_dist(&features[t.anchor], &features[t.positive]).unwrap();
                let dn = euclid_dist(&features[t.anchor], &features[t.negative]).unwrap();
                if (dp - dn + 0.2).abs() < 1e-3 || dp < 1e-2 || dn < 1e-2 {
                    continue 'outer;
                }
            }
            // Probe w.r.t. the normalized features themselves.
            let flat_norm: Vec<f64> = features
                .iter()
                .flat_map(|f| f.values().to_vec())
                .collect();
            let loss = |x: &[f64]| {
                let mut total = 0.0;
                let triplets = mine_triplets(&labels);
                for t in &triplets {
                    let a = &x[t.anchor * dim..(t.anchor + 1) * dim];
                    let b = &x[t.positive * dim..(t.positive + 1) * dim];
                    let c = &x[t.negative * dim..(t.negative + 1) * dim];
                    let dp: f64 = a
                        .iter()
                        .zip(b)
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt();
                    let dn: f64 = a
                        .iter()
                        .zip(c)
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt();
                    total += (dp - dn + 0.2).max(0.0);
                }
                total / triplets.len() as f64
            };
            let numeric = finite_diff_grad(loss, &flat_norm, 1e-5).unwrap();
            let out = batch_loss(&features, &labels, &cfg).unwrap();
            let analytic: Vec<f64> = out.d_features.into_iter().flatten().collect();
            let err = relative_error(&analytic, &numeric).unwrap();
            assert!(err < 1e-6, "gradient error {err}");
            return;
        }
        panic!("no well-conditioned batch found");
    }
}
