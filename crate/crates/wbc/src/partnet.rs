//! Salient part net: `L` branches, each a 1×1 convolution over channels
//! followed by a sigmoid, producing one spatial mask per part.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix, Tensor3};

/// An `H×W` grid of location weights.
///
/// Masks produced by [`generate_masks`] lie strictly in `(0, 1)`; masks
/// built directly (e.g. constant masks in tests) only need finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMask<F> {
    h: usize,
    w: usize,
    values: Vec<F>,
}

impl<F: Scalar> PartMask<F> {
    pub fn new(h: usize, w: usize, values: Vec<F>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::dimension(format!(
                "mask dims must be positive, got {h}x{w}"
            )));
        }
        if values.len() != h * w {
            return Err(Error::dimension(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::dimension("mask contains non-finite values".to_string()));
        }
        Ok(Self { h, w, values })
    }

    pub fn constant(h: usize, w: usize, v: F) -> Self {
        Self {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut values = Vec::with_capacity(h * w);
        for p in 0..h {
            for q in 0..w {
                values.push(f(p, q));
            }
        }
        Self { h, w, values }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn at(&self, p: usize, q: usize) -> F {
        self.values[p * self.w + q]
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }
}

/// Parameters of the salient part net: per-branch channel weights (row `l`)
/// and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct PartNetParams<F> {
    pub(crate) weights: Matrix<F>, // L×C
    pub(crate) biases: Vec<F>,     // L
}

impl<F: Scalar> PartNetParams<F> {
    pub fn from_parts(weights: Matrix<F>, biases: Vec<F>) -> Result<Self> {
        if weights.rows() != biases.len() {
            return Err(Error::dimension(format!(
                "part net: {} weight rows vs {} biases",
                weights.rows(),
                biases.len()
            )));
        }
        if weights.values().iter().any(|v| !v.is_finite())
            || biases.iter().any(|v| !v.is_finite())
        {
            return Err(Error::dimension("part net parameters must be finite".to_string()));
        }
        Ok(Self { weights, biases })
    }

    /// Seeded init: weights uniform in `[−1/√C, 1/√C)`, biases zero so every
    /// mask starts near 0.5.
    pub fn seeded(branches: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let weights = Matrix::from_fn(branches, channels, |_, _| {
            F::from_f64(rng.random_range(-bound..bound))
        });
        Self {
            weights,
            biases: vec![F::zero(); branches],
        }
    }

    pub fn branch_count(&self) -> usize {
        self.biases.len()
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }

    pub fn weight(&self, branch: usize) -> &[F] {
        self.weights.row(branch)
    }

    pub fn bias(&self, branch: usize) -> F {
        self.biases[branch]
    }

    pub fn weights(&self) -> &Matrix<F> {
        &self.weights
    }

    pub fn biases(&self) -> &[F] {
        &self.biases
    }

}

/// Gradients mirroring [`PartNetParams`].
#[derive(Clone, Debug)]
pub struct PartNetGrads<F> {
    pub d_weights: Matrix<F>,
    pub d_biases: Vec<F>,
}

impl<F: Scalar> PartNetGrads<F> {
    pub fn zeros(branches: usize, channels: usize) -> Self {
        Self {
            d_weights: Matrix::zeros(branches, channels),
            d_biases: vec![F::zero(); branches],
        }
    }
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `M_l(p,q) = σ(w_l · F(p,q) + b_l)` for every branch `l`.
pub fn generate_masks<F: Scalar>(
    feats: &Tensor3<F>,
    params: &PartNetParams<F>,
) -> Result<Vec<PartMask<F>>> {
    if params.channels() != feats.channels() {
        return Err(Error::dimension(format!(
            "part net expects {} channels, feature map has {}",
            params.channels(),
            feats.channels()
        )));
    }
    let mut masks = Vec::with_capacity(params.branch_count());
    for l in 0..params.branch_count() {
        let w = params.weight(l);
        let b = params.bias(l);
        masks.push(PartMask::from_fn(feats.height(), feats.width(), |p, q| {
            sigmoid(dot(w, feats.site(p, q)) + b)
        }));
    }
    Ok(masks)
}

/// Backward pass of [`generate_masks`].
///
/// With `s = M_l(p,q)` the pre-activation gradient is
/// `dPre = dM_l(p,q)·s·(1−s)`, from which `dw_l = Σ dPre·F(p,q)`,
/// `db_l = Σ dPre` and `dF(p,q) += Σ_l dPre_l(p,q)·w_l`.
pub fn partnet_backward<F: Scalar>(
    feats: &Tensor3<F>,
    params: &PartNetParams<F>,
    d_masks: &[Matrix<F>],
) -> Result<(Tensor3<F>, PartNetGrads<F>)> {
    if params.channels() != feats.channels() {
        return Err(Error::dimension(format!(
            "part net expects {} channels, feature map has {}",
            params.channels(),
            feats.channels()
        )));
    }
    if d_masks.len() != params.branch_count() {
        return Err(Error::dimension(format!(
            "got {} mask gradients for {} branches",
            d_masks.len(),
            params.branch_count()
        )));
    }
    for dm in d_masks {
        if dm.rows() != feats.height() || dm.cols() != feats.width() {
            return Err(Error::dimension(format!(
                "mask gradient is {}x{}, feature map is {}x{}",
                dm.rows(),
                dm.cols(),
                feats.height(),
                feats.width()
            )));
        }
    }

    let c = feats.channels();
    let mut d_feats = Tensor3::zeros(feats.height(), feats.width(), c);
    let mut grads = PartNetGrads::zeros(params.branch_count(), c);

    for l in 0..params.branch_count() {
        let w = params.weight(l).to_vec();
        let b = params.bias(l);
        for p in 0..feats.height() {
            for q in 0..feats.width() {
                let site = feats.site(p, q);
                let s = sigmoid(dot(&w, site) + b);
                let d_pre = d_masks[l].at(p, q) * s * (F::one() - s);
                grads.d_biases[l] += d_pre;
                for ch in 0..c {
                    *grads.d_weights.at_mut(l, ch) += d_pre * site[ch];
                }
                let df_site = d_feats.site_mut(p, q);
                for ch in 0..c {
                    df_site[ch] += d_pre * w[ch];
                }
            }
        }
    }
    Ok((d_feats, grads))
}

/// Per-branch mask summary (mean / min / max), useful for spotting branches
/// that collapsed onto the same region.
#[derive(Clone, Debug)]
pub struct MaskStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn mask_stats<F: Scalar>(masks: &[PartMask<F>]) -> MaskStats {
    let mut stats = MaskStats {
        mean: Vec::new(),
        min: Vec::new(),
        max: Vec::new(),
    };
    for m in masks {
        let n = m.values().len() as f64;
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in m.values() {
            let v = v.as_f64();
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        stats.mean.push(sum / n);
        stats.min.push(lo);
        stats.max.push(hi);
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_feats(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor3<f64> {
        Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_give_half_masks() {
        let feats = random_feats(3, 2, 4, &mut rng(1));
        let params =
            PartNetParams::from_parts(Matrix::zeros(2, 4), vec![0.0, 0.0]).unwrap();
        let masks = generate_masks(&feats, &params).unwrap();
        for m in &masks {
            assert!(m.values().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn large_bias_saturates_mask_near_one() {
        let feats = random_feats(2, 2, 3, &mut rng(2));
        let params =
            PartNetParams::from_parts(Matrix::zeros(1, 3), vec![50.0]).unwrap();
        let masks = generate_masks(&feats, &params).unwrap();
        // σ(50) rounds to 1.0 in f64 (e^{-50} is below the rounding step),
        // so only the approximate bound is meaningful here; strict (0,1)
        // bounds are asserted on non-saturated inputs below.
        for &v in masks[0].values() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_channel_zero_input_gives_half() {
        let feats = Tensor3::new(1, 1, 1, vec![0.0]).unwrap();
        let params =
            PartNetParams::from_parts(Matrix::new(1, 1, vec![1.0]).unwrap(), vec![0.0]).unwrap();
        let masks = generate_masks(&feats, &params).unwrap();
        assert_eq!(masks[0].at(0, 0), 0.5);
    }

    #[test]
    fn generated_masks_stay_strictly_inside_unit_interval() {
        let mut r = rng(3);
        for _ in 0..10 {
            let feats = random_feats(4, 3, 5, &mut r);
            let params = PartNetParams::seeded(3, 5, &mut r);
            for m in generate_masks(&feats, &params).unwrap() {
                assert!(m.values().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn perturbing_one_branch_changes_only_its_mask() {
        let mut r = rng(4);
        let feats = random_feats(3, 3, 4, &mut r);
        let params = PartNetParams::seeded(3, 4, &mut r);
        let base = generate_masks(&feats, &params).unwrap();

        let mut weights = params.weights().clone();
        *weights.at_mut(1, 2) += 0.3;
        let mut biases = params.biases().to_vec();
        biases[1] += 0.1;
        let perturbed = PartNetParams::from_parts(weights, biases).unwrap();
        let shifted = generate_masks(&feats, &perturbed).unwrap();

        assert_eq!(base[0], shifted[0]);
        assert_eq!(base[2], shifted[2]);
        assert_ne!(base[1], shifted[1]);
    }

    #[test]
    fn zero_mask_gradients_give_zero_parameter_gradients() {
        let mut r = rng(5);
        let feats = random_feats(2, 2, 3, &mut r);
        let params = PartNetParams::seeded(2, 3, &mut r);
        let d_masks = vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)];
        let (d_feats, grads) = partnet_backward(&feats, &params, &d_masks).unwrap();
        assert!(d_feats.values().iter().all(|&v| v == 0.0));
        assert!(grads.d_weights.values().iter().all(|&v| v == 0.0));
        assert!(grads.d_biases.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_at_zero_preactivation_is_quarter() {
        // σ'(0) = 0.25.
        let feats = Tensor3::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let params =
            PartNetParams::from_parts(Matrix::zeros(1, 2), vec![0.0]).unwrap();
        let d_masks = vec![Matrix::new(1, 1, vec![1.0]).unwrap()];
        let (_, grads) = partnet_backward(&feats, &params, &d_masks).unwrap();
        assert_eq!(grads.d_biases[0], 0.25);
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let feats = Tensor3::<f64>::zeros(2, 2, 3);
        let params = PartNetParams::seeded(2, 3, &mut rng(6));
        let bad = vec![Matrix::zeros(2, 2), Matrix::zeros(3, 2)];
        assert!(partnet_backward(&feats, &params, &bad).is_err());
        let wrong_count = vec![Matrix::zeros(2, 2)];
        assert!(partnet_backward(&feats, &params, &wrong_count).is_err());
    }

    #[test]
    fn mask_stats_reports_per_branch_ranges() {
        let masks = vec![
            PartMask::constant(2, 2, 0.25f64),
            PartMask::new(1, 2, vec![0.1, 0.9]).unwrap(),
        ];
        let stats = mask_stats(&masks);
        assert_eq!(stats.mean[0], 0.25);
        assert_eq!(stats.min[1], 0.1);
        assert_eq!(stats.max[1], 0.9);
    }
}
