//! Feature aggregation: global average pooling, bilinear coding, weighted
//! bilinear coding, signed square root, linear embedding and ℓ2-normalized
//! concatenation — each forward operation paired with a hand-derived
//! backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::partnet::PartMask;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, l2_norm, Matrix, Tensor3};

/// Denominator guard for ℓ2 normalization; an all-zero feature stays zero.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Softening added under the square root in [`signed_sqrt_backward`] so the
/// derivative stays finite at the origin.
pub const SIGNED_SQRT_DELTA: f64 = 1e-12;

/// A `C×C` second-order code: the sum of per-location outer products of the
/// channel vector with itself, optionally weighted. Symmetric and positive
/// semidefinite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearCode<F> {
    matrix: Matrix<F>,
}

impl<F: Scalar> BilinearCode<F> {
    pub fn matrix(&self) -> &Matrix<F> {
        &self.matrix
    }

    pub fn channels(&self) -> usize {
        self.matrix.rows()
    }

    /// Row-major reshape to a `C²` vector.
    pub fn to_vec(&self) -> Vec<F> {
        self.matrix.values().to_vec()
    }
}

/// Linear embedding weights (`D×K`, no bias).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<F> {
    pub(crate) weight: Matrix<F>,
}

impl<F: Scalar> EmbeddingParams<F> {
    pub fn new(weight: Matrix<F>) -> Result<Self> {
        if weight.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::dimension("embedding weights must be finite".to_string()));
        }
        Ok(Self { weight })
    }

    /// Seeded fan-balanced init: uniform in `[−a, a)` with
    /// `a = √(6 / (K + D))`.
    pub fn seeded(input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (input_dim + output_dim) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(output_dim, input_dim, |_, _| {
                F::from_f64(rng.random_range(-a..a))
            }),
        }
    }

    pub fn weight(&self) -> &Matrix<F> {
        &self.weight
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

}

/// Concatenated, ℓ2-normalized retrieval feature of length `L·D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalFeature<F> {
    values: Vec<F>,
    parts: usize,
    per_part: usize,
}

impl<F: Scalar> FinalFeature<F> {
    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn per_part_dim(&self) -> usize {
        self.per_part
    }
}

/// Global average pooling: `out[c] = (1/(H·W)) Σ_{p,q} F(p,q)[c]`.
pub fn gap<F: Scalar>(feats: &Tensor3<F>) -> Vec<F> {
    let c = feats.channels();
    let mut out = vec![F::zero(); c];
    for p in 0..feats.height() {
        for q in 0..feats.width() {
            axpy(&mut out, feats.site(p, q), F::one());
        }
    }
    let count = F::from_usize(feats.height() * feats.width());
    for v in &mut out {
        *v = *v / count;
    }
    out
}

/// Plain bilinear coding: `B = Σ_{p,q} F(p,q)ᵀ F(p,q)`.
pub fn bilinear_code<F: Scalar>(feats: &Tensor3<F>) -> BilinearCode<F> {
    let c = feats.channels();
    let mut matrix = Matrix::zeros(c, c);
    for p in 0..feats.height() {
        for q in 0..feats.width() {
            accumulate_outer(&mut matrix, feats.site(p, q), F::one());
        }
    }
    BilinearCode { matrix }
}

/// Weighted bilinear coding: every location's outer product is scaled by the
/// squared mask value, `B = Σ (M(p,q)·F(p,q))ᵀ (M(p,q)·F(p,q))`.
pub fn weighted_bilinear_code<F: Scalar>(
    mask: &PartMask<F>,
    feats: &Tensor3<F>,
) -> Result<BilinearCode<F>> {
    check_mask_shape(mask, feats)?;
    let c = feats.channels();
    let mut matrix = Matrix::zeros(c, c);
    let mut scaled = vec![F::zero(); c];
    for p in 0..feats.height() {
        for q in 0..feats.width() {
            let m = mask.at(p, q);
            let site = feats.site(p, q);
            for ch in 0..c {
                scaled[ch] = m * site[ch];
            }
            accumulate_outer(&mut matrix, &scaled, F::one());
        }
    }
    Ok(BilinearCode { matrix })
}

/// Backward pass of [`weighted_bilinear_code`] given the upstream gradient
/// `dB` on the code matrix:
/// `dF(p,q) = M(p,q)²·F(p,q)(dB + dBᵀ)` and
/// `dM(p,q) = 2·M(p,q)·F(p,q) dB F(p,q)ᵀ`.
pub fn wbc_backward<F: Scalar>(
    mask: &PartMask<F>,
    feats: &Tensor3<F>,
    d_code: &Matrix<F>,
) -> Result<(Matrix<F>, Tensor3<F>)> {
    check_mask_shape(mask, feats)?;
    let c = feats.channels();
    if d_code.rows() != c || d_code.cols() != c {
        return Err(Error::dimension(format!(
            "code gradient is {}x{}, expected {c}x{c}",
            d_code.rows(),
            d_code.cols()
        )));
    }
    let sym = Matrix::from_fn(c, c, |i, j| d_code.at(i, j) + d_code.at(j, i));
    let two = F::from_f64(2.0);

    let mut d_mask = Matrix::zeros(feats.height(), feats.width());
    let mut d_feats = Tensor3::zeros(feats.height(), feats.width(), c);
    for p in 0..feats.height() {
        for q in 0..feats.width() {
            let m = mask.at(p, q);
            let site = feats.site(p, q).to_vec();
            // f·dB·fᵀ
            let mut quad = F::zero();
            for i in 0..c {
                quad += site[i] * dot(d_code.row(i), &site);
            }
            *d_mask.at_mut(p, q) = two * m * quad;
            let m2 = m * m;
            let out = d_feats.site_mut(p, q);
            for i in 0..c {
                out[i] = m2 * dot(sym.row(i), &site);
            }
        }
    }
    Ok((d_mask, d_feats))
}

/// Backward pass of plain bilinear coding: `dF(p,q) = F(p,q)(dB + dBᵀ)`.
pub(crate) fn bc_backward<F: Scalar>(feats: &Tensor3<F>, d_code: &Matrix<F>) -> Result<Tensor3<F>> {
    let c = feats.channels();
    if d_code.rows() != c || d_code.cols() != c {
        return Err(Error::dimension(format!(
            "code gradient is {}x{}, expected {c}x{c}",
            d_code.rows(),
            d_code.cols()
        )));
    }
    let sym = Matrix::from_fn(c, c, |i, j| d_code.at(i, j) + d_code.at(j, i));
    let mut d_feats = Tensor3::zeros(feats.height(), feats.width(), c);
    for p in 0..feats.height() {
        for q in 0..feats.width() {
            let site = feats.site(p, q).to_vec();
            let out = d_feats.site_mut(p, q);
            for i in 0..c {
                out[i] = dot(sym.row(i), &site);
            }
        }
    }
    Ok(d_feats)
}

/// Elementwise sign-preserving square root.
pub fn signed_sqrt<F: Scalar>(v: &[F]) -> Vec<F> {
    v.iter()
        .map(|&x| x.signum() * x.abs().sqrt())
        .collect()
}

/// `dIn[i] = dOut[i] / (2·√(|v[i]| + δ))`; the softening keeps the
/// derivative finite at the origin.
pub fn signed_sqrt_backward<F: Scalar>(v: &[F], d_out: &[F]) -> Result<Vec<F>> {
    if v.len() != d_out.len() {
        return Err(Error::dimension(format!(
            "signed_sqrt_backward: lengths {} vs {}",
            v.len(),
            d_out.len()
        )));
    }
    let delta = F::from_f64(SIGNED_SQRT_DELTA);
    let two = F::from_f64(2.0);
    Ok(v.iter()
        .zip(d_out)
        .map(|(&x, &g)| g / (two * (x.abs() + delta).sqrt()))
        .collect())
}

/// Linear embedding `out = W·v` (no bias).
pub fn embed<F: Scalar>(v: &[F], params: &EmbeddingParams<F>) -> Result<Vec<F>> {
    params.weight.matvec(v)
}

/// Backward pass of [`embed`]: `dV = Wᵀ·dOut`, `dW = dOut·vᵀ`.
pub fn embed_backward<F: Scalar>(
    v: &[F],
    params: &EmbeddingParams<F>,
    d_out: &[F],
) -> Result<(Vec<F>, Matrix<F>)> {
    if v.len() != params.input_dim() {
        return Err(Error::dimension(format!(
            "embed_backward: input length {} vs weight cols {}",
            v.len(),
            params.input_dim()
        )));
    }
    if d_out.len() != params.output_dim() {
        return Err(Error::dimension(format!(
            "embed_backward: upstream length {} vs weight rows {}",
            d_out.len(),
            params.output_dim()
        )));
    }
    let d_v = params.weight.tr_matvec(d_out)?;
    let d_weight = Matrix::outer(d_out, v);
    Ok((d_v, d_weight))
}

/// Intermediates of [`encode_part`] needed by its backward pass.
#[derive(Clone, Debug)]
pub struct PartCodeCache<F> {
    /// Reshaped weighted bilinear code (embedding input before the root).
    pub code_vec: Vec<F>,
    /// Signed square root of `code_vec` (the embedding input).
    pub sqrt_vec: Vec<F>,
}

/// Gradients of one part encoding.
#[derive(Clone, Debug)]
pub struct PartCodeGrads<F> {
    pub d_mask: Matrix<F>,
    pub d_feats: Tensor3<F>,
    pub d_weight: Matrix<F>,
}

/// Part feature: weighted bilinear code, reshaped row-major to length `C²`,
/// signed square root, then linear embedding.
pub fn encode_part<F: Scalar>(
    mask: &PartMask<F>,
    feats: &Tensor3<F>,
    params: &EmbeddingParams<F>,
) -> Result<Vec<F>> {
    encode_part_cached(mask, feats, params).map(|(out, _)| out)
}

pub fn encode_part_cached<F: Scalar>(
    mask: &PartMask<F>,
    feats: &Tensor3<F>,
    params: &EmbeddingParams<F>,
) -> Result<(Vec<F>, PartCodeCache<F>)> {
    let code_vec = weighted_bilinear_code(mask, feats)?.to_vec();
    let sqrt_vec = signed_sqrt(&code_vec);
    let out = embed(&sqrt_vec, params)?;
    Ok((out, PartCodeCache { code_vec, sqrt_vec }))
}

pub fn encode_part_backward<F: Scalar>(
    mask: &PartMask<F>,
    feats: &Tensor3<F>,
    params: &EmbeddingParams<F>,
    cache: &PartCodeCache<F>,
    d_out: &[F],
) -> Result<PartCodeGrads<F>> {
    let c = feats.channels();
    let (d_sqrt, d_weight) = embed_backward(&cache.sqrt_vec, params, d_out)?;
    let d_code_vec = signed_sqrt_backward(&cache.code_vec, &d_sqrt)?;
    let d_code = Matrix::new(c, c, d_code_vec)?;
    let (d_mask, d_feats) = wbc_backward(mask, feats, &d_code)?;
    Ok(PartCodeGrads {
        d_mask,
        d_feats,
        d_weight,
    })
}

/// Concatenate part features in order and ℓ2-normalize; an all-zero
/// concatenation stays all-zero.
pub fn concat_normalize<F: Scalar>(parts: &[Vec<F>]) -> Result<FinalFeature<F>> {
    if parts.is_empty() {
        return Err(Error::dimension("concat_normalize: no parts".to_string()));
    }
    let per_part = parts[0].len();
    for (l, part) in parts.iter().enumerate() {
        if part.len() != per_part {
            return Err(Error::dimension(format!(
                "part {l} has length {}, expected {per_part}",
                part.len()
            )));
        }
    }
    let mut values = Vec::with_capacity(parts.len() * per_part);
    for part in parts {
        values.extend_from_slice(part);
    }
    let (values, _) = l2_normalize(values);
    Ok(FinalFeature {
        values,
        parts: parts.len(),
        per_part,
    })
}

/// Divide by `max(‖v‖₂, ε)`; returns the scaled vector and the denominator.
pub(crate) fn l2_normalize<F: Scalar>(mut values: Vec<F>) -> (Vec<F>, F) {
    let denom = l2_norm(&values).max(F::from_f64(NORMALIZE_EPS));
    for v in &mut values {
        *v = *v / denom;
    }
    (values, denom)
}

/// Backward pass of ℓ2 normalization given the pre-normalization vector.
pub(crate) fn l2_normalize_backward<F: Scalar>(pre_norm: &[F], d_out: &[F]) -> Result<Vec<F>> {
    if pre_norm.len() != d_out.len() {
        return Err(Error::dimension(format!(
            "l2_normalize_backward: lengths {} vs {}",
            pre_norm.len(),
            d_out.len()
        )));
    }
    let eps = F::from_f64(NORMALIZE_EPS);
    let norm = l2_norm(pre_norm);
    if norm > eps {
        // d x = (d y − y (y·d y)) / ‖x‖ with y = x/‖x‖.
        let inv = F::one() / norm;
        let y: Vec<F> = pre_norm.iter().map(|&x| x * inv).collect();
        let proj = dot(&y, d_out);
        Ok((0..d_out.len())
            .map(|i| (d_out[i] - y[i] * proj) * inv)
            .collect())
    } else {
        // Below the guard the map is x/ε, a constant scale.
        let inv = F::one() / eps;
        Ok(d_out.iter().map(|&g| g * inv).collect())
    }
}

fn check_mask_shape<F: Scalar>(mask: &PartMask<F>, feats: &Tensor3<F>) -> Result<()> {
    if mask.height() != feats.height() || mask.width() != feats.width() {
        return Err(Error::dimension(format!(
            "mask is {}x{}, feature map is {}x{}",
            mask.height(),
            mask.width(),
            feats.height(),
            feats.width()
        )));
    }
    Ok(())
}

/// `matrix += s · siteᵀ·site`, upper and lower triangles filled by the same
/// products so the accumulated matrix is bit-exactly symmetric.
fn accumulate_outer<F: Scalar>(matrix: &mut Matrix<F>, site: &[F], s: F) {
    let c = site.len();
    for i in 0..c {
        let si = s * site[i];
        let row = &mut matrix.values_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            row[j] += si * site[j];
        }
    }
}
