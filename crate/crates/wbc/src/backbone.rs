//! Toy convolutional backbone: a 3×3 stride-2 convolution (valid padding),
//! elementwise `max(0,·)`, then a 1×1 convolution to the requested channel
//! count. Stands in for a large pretrained network while preserving the
//! interface: a learned `H×W×C` feature map.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor3};

pub(crate) const KERNEL: usize = 3;
pub(crate) const STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<F> {
    /// `[mid][3][3][c_in]`, row-major.
    pub(crate) conv1_weight: Vec<F>,
    pub(crate) conv1_bias: Vec<F>,
    /// `[out_c][mid]`.
    pub(crate) conv2_weight: Matrix<F>,
    pub(crate) conv2_bias: Vec<F>,
    c_in: usize,
    mid: usize,
    out_c: usize,
}

#[derive(Clone, Debug)]
pub struct BackboneGrads<F> {
    pub d_conv1_weight: Vec<F>,
    pub d_conv1_bias: Vec<F>,
    pub d_conv2_weight: Matrix<F>,
    pub d_conv2_bias: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<F> {
    pub(crate) input: Tensor3<F>,
    pub(crate) pre_relu: Tensor3<F>,
    pub(crate) post_relu: Tensor3<F>,
}

impl<F: Scalar> BackboneParams<F> {
    /// Seeded init: each conv uniform in `[−1/√fan_in, 1/√fan_in)`, zero
    /// biases.
    pub fn seeded(c_in: usize, mid: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan1 = (KERNEL * KERNEL * c_in) as f64;
        let b1 = 1.0 / fan1.sqrt();
        let conv1_weight = (0..mid * KERNEL * KERNEL * c_in)
            .map(|_| F::from_f64(rng.random_range(-b1..b1)))
            .collect();
        let b2 = 1.0 / (mid as f64).sqrt();
        let conv2_weight =
            Matrix::from_fn(out_c, mid, |_, _| F::from_f64(rng.random_range(-b2..b2)));
        Self {
            conv1_weight,
            conv1_bias: vec![F::zero(); mid],
            conv2_weight,
            conv2_bias: vec![F::zero(); out_c],
            c_in,
            mid,
            out_c,
        }
    }

    pub fn from_parts(
        conv1_weight: Vec<F>,
        conv1_bias: Vec<F>,
        conv2_weight: Matrix<F>,
        conv2_bias: Vec<F>,
        c_in: usize,
    ) -> Result<Self> {
        let mid = conv1_bias.len();
        let out_c = conv2_bias.len();
        if conv1_weight.len() != mid * KERNEL * KERNEL * c_in {
            return Err(Error::dimension(format!(
                "conv1 weight has {} values, expected {}",
                conv1_weight.len(),
                mid * KERNEL * KERNEL * c_in
            )));
        }
        if conv2_weight.rows() != out_c || conv2_weight.cols() != mid {
            return Err(Error::dimension(format!(
                "conv2 weight is {}x{}, expected {out_c}x{mid}",
                conv2_weight.rows(),
                conv2_weight.cols()
            )));
        }
        Ok(Self {
            conv1_weight,
            conv1_bias,
            conv2_weight,
            conv2_bias,
            c_in,
            mid,
            out_c,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.c_in
    }

    pub fn mid_channels(&self) -> usize {
        self.mid
    }

    pub fn output_channels(&self) -> usize {
        self.out_c
    }

    pub fn conv1_weight(&self) -> &[F] {
        &self.conv1_weight
    }

    pub fn conv1_bias(&self) -> &[F] {
        &self.conv1_bias
    }

    pub fn conv2_weight(&self) -> &Matrix<F> {
        &self.conv2_weight
    }

    pub fn conv2_bias(&self) -> &[F] {
        &self.conv2_bias
    }

    fn w1(&self, m: usize, dy: usize, dx: usize, ci: usize) -> F {
        self.conv1_weight[((m * KERNEL + dy) * KERNEL + dx) * self.c_in + ci]
    }
}

impl<F: Scalar> BackboneGrads<F> {
    pub fn zeros(params: &BackboneParams<F>) -> Self {
        Self {
            d_conv1_weight: vec![F::zero(); params.conv1_weight.len()],
            d_conv1_bias: vec![F::zero(); params.mid],
            d_conv2_weight: Matrix::zeros(params.out_c, params.mid),
            d_conv2_bias: vec![F::zero(); params.out_c],
        }
    }
}

/// Spatial size of the valid stride-2 output, or an error when the input is
/// smaller than the kernel.
pub fn output_extent(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < KERNEL || w < KERNEL {
        return Err(Error::dimension(format!(
            "input {h}x{w} is smaller than the {KERNEL}x{KERNEL} kernel"
        )));
    }
    Ok(((h - KERNEL) / STRIDE + 1, (w - KERNEL) / STRIDE + 1))
}

pub fn backbone_forward<F: Scalar>(
    input: &Tensor3<F>,
    params: &BackboneParams<F>,
) -> Result<(Tensor3<F>, BackboneCache<F>)> {
    if input.channels() != params.c_in {
        return Err(Error::dimension(format!(
            "backbone expects {} input channels, image has {}",
            params.c_in,
            input.channels()
        )));
    }
    let (oh, ow) = output_extent(input.height(), input.width())?;

    let mut pre_relu = Tensor3::zeros(oh, ow, params.mid);
    for p in 0..oh {
        for q in 0..ow {
            for m in 0..params.mid {
                let mut acc = params.conv1_bias[m];
                for dy in 0..KERNEL {
                    for dx in 0..KERNEL {
                        let pixel = input.site(p * STRIDE + dy, q * STRIDE + dx);
                        for ci in 0..params.c_in {
                            acc += params.w1(m, dy, dx, ci) * pixel[ci];
                        }
                    }
                }
                pre_relu.site_mut(p, q)[m] = acc;
            }
        }
    }

    let post_relu = pre_relu.map(|v| v.max(F::zero()));

    let mut feats = Tensor3::zeros(oh, ow, params.out_c);
    for p in 0..oh {
        for q in 0..ow {
            let mixed = params.conv2_weight.matvec(post_relu.site(p, q))?;
            let site = feats.site_mut(p, q);
            for c in 0..params.out_c {
                site[c] = mixed[c] + params.conv2_bias[c];
            }
        }
    }

    let cache = BackboneCache {
        input: input.clone(),
        pre_relu,
        post_relu,
    };
    Ok((feats, cache))
}

/// Gradients w.r.t. all backbone parameters given the gradient on the
/// output feature map. The ReLU subgradient at exactly zero is zero.
pub fn backbone_backward<F: Scalar>(
    params: &BackboneParams<F>,
    cache: &BackboneCache<F>,
    d_feats: &Tensor3<F>,
) -> Result<BackboneGrads<F>> {
    let (oh, ow) = (cache.pre_relu.height(), cache.pre_relu.width());
    if d_feats.height() != oh || d_feats.width() != ow || d_feats.channels() != params.out_c {
        return Err(Error::dimension(format!(
            "feature gradient is {}x{}x{}, expected {oh}x{ow}x{}",
            d_feats.height(),
            d_feats.width(),
            d_feats.channels(),
            params.out_c
        )));
    }
    let mut grads = BackboneGrads::zeros(params);

    // 1×1 conv, then the ReLU gate.
    let mut d_pre = Tensor3::zeros(oh, ow, params.mid);
    for p in 0..oh {
        for q in 0..ow {
            let d_site = d_feats.site(p, q);
            let act = cache.post_relu.site(p, q);
            for c in 0..params.out_c {
                grads.d_conv2_bias[c] += d_site[c];
                for m in 0..params.mid {
                    *grads.d_conv2_weight.at_mut(c, m) += d_site[c] * act[m];
                }
            }
            let pre = cache.pre_relu.site(p, q);
            let d_act = params.conv2_weight.tr_matvec(d_site)?;
            let d_pre_site = d_pre.site_mut(p, q);
            for m in 0..params.mid {
                d_pre_site[m] = if pre[m] > F::zero() { d_act[m] } else { F::zero() };
            }
        }
    }

    // 3×3 stride-2 conv.
    for p in 0..oh {
        for q in 0..ow {
            let d_site = d_pre.site(p, q);
            for m in 0..params.mid {
                let g = d_site[m];
                grads.d_conv1_bias[m] += g;
                for dy in 0..KERNEL {
                    for dx in 0..KERNEL {
                        let pixel = cache.input.site(p * STRIDE + dy, q * STRIDE + dx);
                        let base = ((m * KERNEL + dy) * KERNEL + dx) * params.c_in;
                        for ci in 0..params.c_in {
                            grads.d_conv1_weight[base + ci] += g * pixel[ci];
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, finite_diff_grad, relative_error};
    use rand::{Rng, SeedableRng};

    #[test]
    fn output_extent_matches_valid_stride_two() {
        assert_eq!(output_extent(8, 8).unwrap(), (3, 3));
        assert_eq!(output_extent(12, 6).unwrap(), (5, 2));
        assert_eq!(output_extent(3, 3).unwrap(), (1, 1));
        assert!(output_extent(2, 8).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = BackboneParams::<f64>::seeded(2, 3, 4, &mut rng);
        let (feats, _) = backbone_forward(&Tensor3::zeros(6, 6, 2), &params).unwrap();
        assert!(feats.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = BackboneParams::<f64>::seeded(2, 3, 4, &mut rng);
        assert!(backbone_forward(&Tensor3::zeros(6, 6, 3), &params).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (c_in, mid, out_c) = (2, 3, 4);
        let input = Tensor3::from_fn(7, 5, c_in, |_, _, _| rng.random_range(-1.0..1.0));
        // Keep pre-activations away from the ReLU kink.
        let params = loop {
            let cand = BackboneParams::<f64>::seeded(c_in, mid, out_c, &mut rng);
            let (_, cache) = backbone_forward(&input, &cand).unwrap();
            if cache.pre_relu.values().iter().all(|v| v.abs() > 1e-3) {
                break cand;
            }
        };
        let (feats, cache) = backbone_forward(&input, &params).unwrap();
        let g = Tensor3::from_fn(feats.height(), feats.width(), out_c, |_, _, _| {
            rng.random_range(-1.0..1.0)
        });

        let mut flat = Vec::new();
        flat.extend_from_slice(&params.conv1_weight);
        flat.extend_from_slice(&params.conv1_bias);
        flat.extend_from_slice(params.conv2_weight.values());
        flat.extend_from_slice(&params.conv2_bias);

        let n1 = params.conv1_weight.len();
        let rebuild = |x: &[f64]| {
            BackboneParams::from_parts(
                x[..n1].to_vec(),
                x[n1..n1 + mid].to_vec(),
                Matrix::new(out_c, mid, x[n1 + mid..n1 + mid + out_c * mid].to_vec()).unwrap(),
                x[n1 + mid + out_c * mid..].to_vec(),
                c_in,
            )
            .unwrap()
        };
        let loss = |x: &[f64]| {
            let p = rebuild(x);
            let (f, _) = backbone_forward(&input, &p).unwrap();
            dot(g.values(), f.values())
        };
        let numeric = finite_diff_grad(loss, &flat, 1e-5).unwrap();

        let grads = backbone_backward(&params, &cache, &g).unwrap();
        let mut analytic = grads.d_conv1_weight.clone();
        analytic.extend_from_slice(&grads.d_conv1_bias);
        analytic.extend_from_slice(grads.d_conv2_weight.values());
        analytic.extend_from_slice(&grads.d_conv2_bias);

        let err = relative_error(&analytic, &numeric).unwrap();
        assert!(err < 1e-6, "gradient error {err}");
    }
}
