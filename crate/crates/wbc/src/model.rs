//! End-to-end feature transformation: toy backbone → feature map → salient
//! part masks → per-part weighted bilinear codes → embeddings → concatenated
//! ℓ2-normalized final feature, plus the three ablation pipelines that swap
//! weighted bilinear coding for plain coding or average pooling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    self, bilinear_code, concat_normalize, embed, embed_backward, encode_part_backward,
    encode_part_cached, gap, l2_normalize, l2_normalize_backward, signed_sqrt,
    signed_sqrt_backward, EmbeddingParams, FinalFeature, PartCodeCache,
};
use crate::backbone::{
    backbone_backward, backbone_forward, output_extent, BackboneCache, BackboneGrads,
    BackboneParams,
};
use crate::dataio;
use crate::error::{Error, Result};
use crate::partnet::{generate_masks, partnet_backward, PartMask, PartNetGrads, PartNetParams};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor3};

/// Guard on the mask-mass denominator of the mask-weighted average pooling
/// variant; masks are strictly positive in exact arithmetic but can
/// underflow to zero when saturated.
pub const MASK_MASS_EPS: f64 = 1e-12;

/// The aggregation pipeline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Global average pooling, one embedding.
    Gap,
    /// Mask-weighted average pooling per part.
    GapPart,
    /// One plain bilinear code, no masks.
    Bc,
    /// Weighted bilinear coding over salient part masks (the full pipeline).
    WbcPart,
}

pub const VARIANT_NAMES: [&str; 4] = ["GAP", "GAP_PART", "BC", "WBC_PART"];

impl Variant {
    pub fn uses_parts(self) -> bool {
        matches!(self, Variant::GapPart | Variant::WbcPart)
    }

    pub fn all() -> [Variant; 4] {
        [Variant::Gap, Variant::GapPart, Variant::Bc, Variant::WbcPart]
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Gap => "GAP",
            Variant::GapPart => "GAP_PART",
            Variant::Bc => "BC",
            Variant::WbcPart => "WBC_PART",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GAP" => Ok(Variant::Gap),
            "GAP_PART" => Ok(Variant::GapPart),
            "BC" => Ok(Variant::Bc),
            "WBC_PART" => Ok(Variant::WbcPart),
            other => Err(Error::config(format!(
                "unknown variant {other:?}; valid variants: {}",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Part count `L` (used by the part variants).
    pub parts: usize,
    /// Feature map channel count `C`.
    pub channels: usize,
    /// Hidden channels of the backbone's first convolution.
    pub mid_channels: usize,
    /// Per-part embedding dimension `D`.
    pub embed_dim: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    /// Parameter init seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::WbcPart,
            parts: 3,
            channels: 16,
            mid_channels: 8,
            embed_dim: 128,
            input_h: 16,
            input_w: 8,
            input_c: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("parts", self.parts),
            ("channels", self.channels),
            ("mid_channels", self.mid_channels),
            ("embed_dim", self.embed_dim),
            ("input_c", self.input_c),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        output_extent(self.input_h, self.input_w)?;
        Ok(())
    }

    /// Number of embedding branches for this variant.
    pub fn embedding_count(&self) -> usize {
        if self.variant.uses_parts() {
            self.parts
        } else {
            1
        }
    }

    /// Embedding input width: `C²` for bilinear variants, `C` otherwise.
    pub fn embedding_input_dim(&self) -> usize {
        match self.variant {
            Variant::Bc | Variant::WbcPart => self.channels * self.channels,
            Variant::Gap | Variant::GapPart => self.channels,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.embedding_count() * self.embed_dim
    }
}

/// One input image with its identity label.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterSample<F> {
    pub image: Tensor3<F>,
    pub label: usize,
}

static REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    REVISION.fetch_add(1, Ordering::Relaxed)
}

/// All learnable parameters. Which sub-parameters exist is determined by the
/// variant: global variants carry no part net and a single embedding.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    cfg: ModelConfig,
    backbone: BackboneParams<F>,
    partnet: Option<PartNetParams<F>>,
    embeddings: Vec<EmbeddingParams<F>>,
    revision: u64,
}

impl<F: Scalar> PartialEq for ModelParams<F> {
    fn eq(&self, other: &Self) -> bool {
        // The revision stamp only tracks in-memory mutation.
        self.cfg == other.cfg
            && self.backbone == other.backbone
            && self.partnet == other.partnet
            && self.embeddings == other.embeddings
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Seeded initialization; the draw order (backbone, part net,
    /// embeddings) is fixed so equal seeds give equal parameters.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        let backbone =
            BackboneParams::seeded(cfg.input_c, cfg.mid_channels, cfg.channels, &mut rng);
        let partnet = if cfg.variant.uses_parts() {
            Some(PartNetParams::seeded(cfg.parts, cfg.channels, &mut rng))
        } else {
            None
        };
        let embeddings = (0..cfg.embedding_count())
            .map(|_| EmbeddingParams::seeded(cfg.embedding_input_dim(), cfg.embed_dim, &mut rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            partnet,
            embeddings,
            revision: next_revision(),
        })
    }

    pub fn from_parts(
        cfg: ModelConfig,
        backbone: BackboneParams<F>,
        partnet: Option<PartNetParams<F>>,
        embeddings: Vec<EmbeddingParams<F>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if backbone.input_channels() != cfg.input_c
            || backbone.mid_channels() != cfg.mid_channels
            || backbone.output_channels() != cfg.channels
        {
            return Err(Error::dimension("backbone does not match config".to_string()));
        }
        match (&partnet, cfg.variant.uses_parts()) {
            (Some(p), true) => {
                if p.branch_count() != cfg.parts || p.channels() != cfg.channels {
                    return Err(Error::dimension(format!(
                        "part net has {} branches over {} channels, config wants {} over {}",
                        p.branch_count(),
                        p.channels(),
                        cfg.parts,
                        cfg.channels
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::dimension(format!(
                    "variant {} carries no part net",
                    cfg.variant
                )))
            }
            (None, true) => {
                return Err(Error::dimension(format!(
                    "variant {} requires a part net",
                    cfg.variant
                )))
            }
        }
        if embeddings.len() != cfg.embedding_count() {
            return Err(Error::dimension(format!(
                "{} embeddings provided, variant {} needs {}",
                embeddings.len(),
                cfg.variant,
                cfg.embedding_count()
            )));
        }
        for e in &embeddings {
            if e.input_dim() != cfg.embedding_input_dim() || e.output_dim() != cfg.embed_dim {
                return Err(Error::dimension(format!(
                    "embedding is {}x{}, config wants {}x{}",
                    e.output_dim(),
                    e.input_dim(),
                    cfg.embed_dim,
                    cfg.embedding_input_dim()
                )));
            }
        }
        Ok(Self {
            cfg,
            backbone,
            partnet,
            embeddings,
            revision: next_revision(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &BackboneParams<F> {
        &self.backbone
    }

    pub fn partnet(&self) -> Option<&PartNetParams<F>> {
        self.partnet.as_ref()
    }

    pub fn embeddings(&self) -> &[EmbeddingParams<F>] {
        &self.embeddings
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn feature_len(&self) -> usize {
        self.cfg.feature_len()
    }

    /// Named parameter tensors in a fixed order (the checkpoint layout and
    /// the optimizer's block order).
    pub fn named_dims(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let mut out = vec![
            (
                "backbone.conv1.weight".to_string(),
                vec![c.mid_channels, 3, 3, c.input_c],
            ),
            ("backbone.conv1.bias".to_string(), vec![c.mid_channels]),
            (
                "backbone.conv2.weight".to_string(),
                vec![c.channels, c.mid_channels],
            ),
            ("backbone.conv2.bias".to_string(), vec![c.channels]),
        ];
        if self.partnet.is_some() {
            out.push(("partnet.weight".to_string(), vec![c.parts, c.channels]));
            out.push(("partnet.bias".to_string(), vec![c.parts]));
        }
        for i in 0..self.embeddings.len() {
            out.push((
                format!("embed.{i}.weight"),
                vec![c.embed_dim, c.embedding_input_dim()],
            ));
        }
        out
    }

    pub fn blocks(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("backbone.conv1.weight".to_string(), self.backbone.conv1_weight()),
            ("backbone.conv1.bias".to_string(), self.backbone.conv1_bias()),
            ("backbone.conv2.weight".to_string(), self.backbone.conv2_weight().values()),
            ("backbone.conv2.bias".to_string(), self.backbone.conv2_bias()),
        ];
        if let Some(p) = &self.partnet {
            out.push(("partnet.weight".to_string(), p.weights().values()));
            out.push(("partnet.bias".to_string(), p.biases()));
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            out.push((format!("embed.{i}.weight"), e.weight().values()));
        }
        out
    }

    /// Mutable views over every block; bumps the revision stamp, so caches
    /// built before the call are rejected by `backward`.
    pub(crate) fn blocks_mut(&mut self) -> Vec<(String, &mut [F])> {
        self.revision = next_revision();
        let mut out: Vec<(String, &mut [F])> = vec![
            ("backbone.conv1.weight".to_string(), &mut self.backbone.conv1_weight[..]),
            ("backbone.conv1.bias".to_string(), &mut self.backbone.conv1_bias[..]),
            ("backbone.conv2.weight".to_string(), self.backbone.conv2_weight.values_mut()),
            ("backbone.conv2.bias".to_string(), &mut self.backbone.conv2_bias[..]),
        ];
        if let Some(p) = &mut self.partnet {
            out.push(("partnet.weight".to_string(), p.weights.values_mut()));
            out.push(("partnet.bias".to_string(), &mut p.biases[..]));
        }
        for (i, e) in self.embeddings.iter_mut().enumerate() {
            out.push((format!("embed.{i}.weight"), e.weight.values_mut()));
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, b) in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::dimension(format!(
                "flat parameter vector has {} values, model has {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }
}

/// Gradients mirroring [`ModelParams`]; blocks unused by the active variant
/// are absent.
#[derive(Clone, Debug)]
pub struct ModelGrads<F> {
    pub backbone: BackboneGrads<F>,
    pub partnet: Option<PartNetGrads<F>>,
    pub embeddings: Vec<Matrix<F>>,
}

impl<F: Scalar> ModelGrads<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        Self {
            backbone: BackboneGrads::zeros(&params.backbone),
            partnet: params
                .partnet
                .as_ref()
                .map(|p| PartNetGrads::zeros(p.branch_count(), p.channels())),
            embeddings: params
                .embeddings
                .iter()
                .map(|e| Matrix::zeros(e.output_dim(), e.input_dim()))
                .collect(),
        }
    }

    pub fn blocks(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("backbone.conv1.weight".to_string(), &self.backbone.d_conv1_weight[..]),
            ("backbone.conv1.bias".to_string(), &self.backbone.d_conv1_bias[..]),
            ("backbone.conv2.weight".to_string(), self.backbone.d_conv2_weight.values()),
            ("backbone.conv2.bias".to_string(), &self.backbone.d_conv2_bias[..]),
        ];
        if let Some(p) = &self.partnet {
            out.push(("partnet.weight".to_string(), p.d_weights.values()));
            out.push(("partnet.bias".to_string(), &p.d_biases[..]));
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            out.push((format!("embed.{i}.weight"), e.values()));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (_, b) in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    /// `self += other`, blockwise.
    pub fn accumulate(&mut self, other: &ModelGrads<F>) -> Result<()> {
        add_slices(&mut self.backbone.d_conv1_weight, &other.backbone.d_conv1_weight)?;
        add_slices(&mut self.backbone.d_conv1_bias, &other.backbone.d_conv1_bias)?;
        add_slices(
            self.backbone.d_conv2_weight.values_mut(),
            other.backbone.d_conv2_weight.values(),
        )?;
        add_slices(&mut self.backbone.d_conv2_bias, &other.backbone.d_conv2_bias)?;
        match (&mut self.partnet, &other.partnet) {
            (Some(a), Some(b)) => {
                add_slices(a.d_weights.values_mut(), b.d_weights.values())?;
                add_slices(&mut a.d_biases, &b.d_biases)?;
            }
            (None, None) => {}
            _ => return Err(Error::dimension("gradient part-net blocks differ".to_string())),
        }
        if self.embeddings.len() != other.embeddings.len() {
            return Err(Error::dimension("gradient embedding counts differ".to_string()));
        }
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            add_slices(a.values_mut(), b.values())?;
        }
        Ok(())
    }
}

fn add_slices<F: Scalar>(dst: &mut [F], src: &[F]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::dimension(format!(
            "gradient blocks of lengths {} vs {}",
            dst.len(),
            src.len()
        )));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
    Ok(())
}

/// Variant-specific intermediates of the aggregation head.
#[derive(Clone, Debug)]
enum HeadKind<F> {
    Gap {
        pooled: Vec<F>,
    },
    GapPart {
        masks: Vec<PartMask<F>>,
        pooled: Vec<Vec<F>>,
        mass: Vec<F>,
    },
    Bc {
        code: PartCodeCache<F>,
    },
    WbcPart {
        masks: Vec<PartMask<F>>,
        parts: Vec<PartCodeCache<F>>,
    },
}

/// Intermediates of [`forward_features`].
#[derive(Clone, Debug)]
pub struct HeadCache<F> {
    revision: u64,
    feats: Tensor3<F>,
    pre_norm: Vec<F>,
    kind: HeadKind<F>,
}

/// Intermediates of [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    backbone: BackboneCache<F>,
    head: HeadCache<F>,
}

/// Full pipeline: backbone, then the variant's aggregation head.
pub fn forward<F: Scalar>(
    sample: &RasterSample<F>,
    params: &ModelParams<F>,
) -> Result<(FinalFeature<F>, ForwardCache<F>)> {
    forward_image(&sample.image, params)
}

pub fn forward_image<F: Scalar>(
    image: &Tensor3<F>,
    params: &ModelParams<F>,
) -> Result<(FinalFeature<F>, ForwardCache<F>)> {
    let cfg = &params.cfg;
    if image.height() != cfg.input_h
        || image.width() != cfg.input_w
        || image.channels() != cfg.input_c
    {
        return Err(Error::dimension(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            cfg.input_h,
            cfg.input_w,
            cfg.input_c
        )));
    }
    let (feats, backbone_cache) = backbone_forward(image, &params.backbone)?;
    let (feature, head) = forward_features(&feats, params)?;
    Ok((
        feature,
        ForwardCache {
            backbone: backbone_cache,
            head,
        },
    ))
}

/// Aggregation head on a precomputed feature map (backbone bypass).
pub fn forward_features<F: Scalar>(
    feats: &Tensor3<F>,
    params: &ModelParams<F>,
) -> Result<(FinalFeature<F>, HeadCache<F>)> {
    if feats.channels() != params.cfg.channels {
        return Err(Error::dimension(format!(
            "feature map has {} channels, model expects {}",
            feats.channels(),
            params.cfg.channels
        )));
    }
    let (part_outputs, kind) = match params.cfg.variant {
        Variant::Gap => {
            let pooled = gap(feats);
            let out = embed(&pooled, &params.embeddings[0])?;
            (vec![out], HeadKind::Gap { pooled })
        }
        Variant::GapPart => {
            let partnet = params.partnet.as_ref().expect("validated by from_parts");
            let masks = generate_masks(feats, partnet)?;
            let mut pooled = Vec::with_capacity(masks.len());
            let mut mass = Vec::with_capacity(masks.len());
            let mut outs = Vec::with_capacity(masks.len());
            for (l, mask) in masks.iter().enumerate() {
                let (v, s) = masked_mean(mask, feats);
                outs.push(embed(&v, &params.embeddings[l])?);
                pooled.push(v);
                mass.push(s);
            }
            (outs, HeadKind::GapPart { masks, pooled, mass })
        }
        Variant::Bc => {
            let code_vec = bilinear_code(feats).to_vec();
            let sqrt_vec = signed_sqrt(&code_vec);
            let out = embed(&sqrt_vec, &params.embeddings[0])?;
            (
                vec![out],
                HeadKind::Bc {
                    code: PartCodeCache {
                        code_vec,
                        sqrt_vec,
                    },
                },
            )
        }
        Variant::WbcPart => {
            let partnet = params.partnet.as_ref().expect("validated by from_parts");
            let masks = generate_masks(feats, partnet)?;
            let mut parts = Vec::with_capacity(masks.len());
            let mut outs = Vec::with_capacity(masks.len());
            for (l, mask) in masks.iter().enumerate() {
                let (out, cache) = encode_part_cached(mask, feats, &params.embeddings[l])?;
                outs.push(out);
                parts.push(cache);
            }
            (outs, HeadKind::WbcPart { masks, parts })
        }
    };

    let mut pre_norm = Vec::with_capacity(part_outputs.len() * params.cfg.embed_dim);
    for p in &part_outputs {
        pre_norm.extend_from_slice(p);
    }
    let feature = concat_normalize(&part_outputs)?;
    Ok((
        feature,
        HeadCache {
            revision: params.revision,
            feats: feats.clone(),
            pre_norm,
            kind,
        },
    ))
}

/// Mask-weighted average `Σ m·F / max(Σ m, ε)` and the raw mask mass.
fn masked_mean<F: Scalar>(mask: &PartMask<F>, feats: &Tensor3<F>) -> (Vec<F>, F) {
    let c = feats.channels();
    let mut acc = vec![F::zero(); c];
    let mut mass = F::zero();
    for p in 0..feats.height() {
        for q in 0..feats.width() {
            let m = mask.at(p, q);
            mass += m;
            let site = feats.site(p, q);
            for ch in 0..c {
                acc[ch] += m * site[ch];
            }
        }
    }
    let denom = mass.max(F::from_f64(MASK_MASS_EPS));
    for v in &mut acc {
        *v = *v / denom;
    }
    (acc, mass)
}

/// Full backward pass: head, then backbone.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    d_feature: &[F],
) -> Result<ModelGrads<F>> {
    let (mut grads, d_feats) = backward_features(params, &cache.head, d_feature)?;
    grads.backbone = backbone_backward(&params.backbone, &cache.backbone, &d_feats)?;
    Ok(grads)
}

/// Head-only backward pass; returns the gradient on the feature map along
/// with parameter gradients (backbone gradients stay zero).
pub fn backward_features<F: Scalar>(
    params: &ModelParams<F>,
    head: &HeadCache<F>,
    d_feature: &[F],
) -> Result<(ModelGrads<F>, Tensor3<F>)> {
    if head.revision != params.revision {
        return Err(Error::StaleCache);
    }
    if d_feature.len() != params.feature_len() {
        return Err(Error::dimension(format!(
            "feature gradient has length {}, model produces {}",
            d_feature.len(),
            params.feature_len()
        )));
    }
    let d_pre_norm = l2_normalize_backward(&head.pre_norm, d_feature)?;
    let d = params.cfg.embed_dim;
    let feats = &head.feats;
    let (h, w, c) = (feats.height(), feats.width(), feats.channels());
    let mut grads = ModelGrads::zeros_like(params);
    let mut d_feats = Tensor3::zeros(h, w, c);

    match &head.kind {
        HeadKind::Gap { pooled } => {
            let (d_pooled, d_weight) =
                embed_backward(pooled, &params.embeddings[0], &d_pre_norm)?;
            grads.embeddings[0] = d_weight;
            let count = F::from_usize(h * w);
            for p in 0..h {
                for q in 0..w {
                    let site = d_feats.site_mut(p, q);
                    for ch in 0..c {
                        site[ch] += d_pooled[ch] / count;
                    }
                }
            }
        }
        HeadKind::GapPart { masks, pooled, mass } => {
            let mut d_masks = Vec::with_capacity(masks.len());
            let eps = F::from_f64(MASK_MASS_EPS);
            for l in 0..masks.len() {
                let d_out = &d_pre_norm[l * d..(l + 1) * d];
                let (d_pooled, d_weight) =
                    embed_backward(&pooled[l], &params.embeddings[l], d_out)?;
                grads.embeddings[l] = d_weight;
                let denom = mass[l].max(eps);
                let mut d_mask = Matrix::zeros(h, w);
                for p in 0..h {
                    for q in 0..w {
                        let site = feats.site(p, q);
                        let m = masks[l].at(p, q);
                        let mut acc = F::zero();
                        for ch in 0..c {
                            // d pooled[ch] / d m(p,q); the mass term only
                            // varies when it is above the guard.
                            let dv = if mass[l] > eps {
                                (site[ch] - pooled[l][ch]) / denom
                            } else {
                                site[ch] / denom
                            };
                            acc += d_pooled[ch] * dv;
                        }
                        *d_mask.at_mut(p, q) = acc;
                        let out = d_feats.site_mut(p, q);
                        for ch in 0..c {
                            out[ch] += d_pooled[ch] * m / denom;
                        }
                    }
                }
                d_masks.push(d_mask);
            }
            let partnet = params.partnet.as_ref().expect("validated by from_parts");
            let (d_from_masks, pgrads) = partnet_backward(feats, partnet, &d_masks)?;
            for (dst, src) in d_feats
                .values_mut()
                .iter_mut()
                .zip(d_from_masks.values())
            {
                *dst += *src;
            }
            grads.partnet = Some(pgrads);
        }
        HeadKind::Bc { code } => {
            let (d_sqrt, d_weight) =
                embed_backward(&code.sqrt_vec, &params.embeddings[0], &d_pre_norm)?;
            grads.embeddings[0] = d_weight;
            let d_code_vec = signed_sqrt_backward(&code.code_vec, &d_sqrt)?;
            let d_code = Matrix::new(c, c, d_code_vec)?;
            let d = aggregation::bc_backward(feats, &d_code)?;
            for (dst, src) in d_feats.values_mut().iter_mut().zip(d.values()) {
                *dst += *src;
            }
        }
        HeadKind::WbcPart { masks, parts } => {
            let mut d_masks = Vec::with_capacity(masks.len());
            for l in 0..masks.len() {
                let d_out = &d_pre_norm[l * d..(l + 1) * d];
                let part = encode_part_backward(
                    &masks[l],
                    feats,
                    &params.embeddings[l],
                    &parts[l],
                    d_out,
                )?;
                grads.embeddings[l] = part.d_weight;
                d_masks.push(part.d_mask);
                for (dst, src) in d_feats
                    .values_mut()
                    .iter_mut()
                    .zip(part.d_feats.values())
                {
                    *dst += *src;
                }
            }
            let partnet = params.partnet.as_ref().expect("validated by from_parts");
            let (d_from_masks, pgrads) = partnet_backward(feats, partnet, &d_masks)?;
            for (dst, src) in d_feats
                .values_mut()
                .iter_mut()
                .zip(d_from_masks.values())
            {
                *dst += *src;
            }
            grads.partnet = Some(pgrads);
        }
    }
    Ok((grads, d_feats))
}

// --- checkpoint format -----------------------------------------------------

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    scalar_bytes: u8,
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    file: String,
    dims: Vec<usize>,
}

/// Write every named parameter tensor plus a JSON manifest into `dir`.
pub fn save_checkpoint<F: Scalar>(dir: &Path, params: &ModelParams<F>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dims = params.named_dims();
    let blocks = params.blocks();
    let mut tensors = Vec::with_capacity(blocks.len());
    for ((name, dims), (block_name, values)) in dims.into_iter().zip(&blocks) {
        debug_assert_eq!(&name, block_name);
        let file = format!("{name}.wbct");
        dataio::write_tensor(&dir.join(&file), &dims, values)?;
        tensors.push(CheckpointTensor { name, file, dims });
    }
    let manifest = CheckpointManifest {
        format: 1,
        scalar_bytes: F::ELEM_BYTES,
        config: params.cfg.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(CHECKPOINT_MANIFEST), text)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<ModelParams<F>> {
    let text = std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != 1 {
        return Err(Error::config(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    if manifest.scalar_bytes != F::ELEM_BYTES {
        return Err(Error::config(format!(
            "checkpoint holds {}-byte scalars, loader expects {}-byte",
            manifest.scalar_bytes,
            F::ELEM_BYTES
        )));
    }
    let cfg = manifest.config;
    cfg.validate()?;

    let mut by_name = std::collections::BTreeMap::new();
    for t in &manifest.tensors {
        let (dims, values) = dataio::read_tensor::<F>(&dir.join(&t.file))?;
        if dims != t.dims {
            return Err(Error::config(format!(
                "tensor {} has dims {dims:?} on disk, manifest says {:?}",
                t.name, t.dims
            )));
        }
        by_name.insert(t.name.clone(), values);
    }
    let mut take = |name: &str| -> Result<Vec<F>> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name}")))
    };

    let backbone = BackboneParams::from_parts(
        take("backbone.conv1.weight")?,
        take("backbone.conv1.bias")?,
        Matrix::new(cfg.channels, cfg.mid_channels, take("backbone.conv2.weight")?)?,
        take("backbone.conv2.bias")?,
        cfg.input_c,
    )?;
    let partnet = if cfg.variant.uses_parts() {
        Some(PartNetParams::from_parts(
            Matrix::new(cfg.parts, cfg.channels, take("partnet.weight")?)?,
            take("partnet.bias")?,
        )?)
    } else {
        None
    };
    let mut embeddings = Vec::with_capacity(cfg.embedding_count());
    for i in 0..cfg.embedding_count() {
        embeddings.push(EmbeddingParams::new(Matrix::new(
            cfg.embed_dim,
            cfg.embedding_input_dim(),
            take(&format!("embed.{i}.weight"))?,
        )?)?);
    }
    ModelParams::from_parts(cfg, backbone, partnet, embeddings)
}

/// `max(‖pre-normalization feature‖, ε)` recovered from a head cache; test
/// and diagnostic helper.
pub fn feature_norm<F: Scalar>(cache: &HeadCache<F>) -> F {
    l2_normalize(cache.pre_norm.clone()).1
}

/// How close a forward pass came to the non-smooth points of the pipeline
/// (ReLU kink, signed-root origin, normalization guard). The gradient
/// certification harness rejects instances that sit on a kink, where finite
/// differences are meaningless.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conditioning {
    pub min_pre_relu: f64,
    /// Smallest |entry| over all bilinear code vectors, when the variant
    /// takes a signed root.
    pub min_code: Option<f64>,
    pub pre_norm_norm: f64,
}

pub(crate) fn conditioning<F: Scalar>(cache: &ForwardCache<F>) -> Conditioning {
    let min_abs = |values: &[F]| {
        values
            .iter()
            .map(|v| v.abs().as_f64())
            .fold(f64::INFINITY, f64::min)
    };
    let min_code = match &cache.head.kind {
        HeadKind::Bc { code } => Some(min_abs(&code.code_vec)),
        HeadKind::WbcPart { parts, .. } => Some(
            parts
                .iter()
                .map(|p| min_abs(&p.code_vec))
                .fold(f64::INFINITY, f64::min),
        ),
        _ => None,
    };
    Conditioning {
        min_pre_relu: min_abs(cache.backbone.pre_relu.values()),
        min_code,
        pre_norm_norm: crate::tensor::l2_norm(&cache.head.pre_norm).as_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            parts: 2,
            channels: 4,
            mid_channels: 3,
            embed_dim: 3,
            input_h: 8,
            input_w: 8,
            input_c: 2,
            seed: 7,
        }
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(cfg.input_h, cfg.input_w, cfg.input_c, |_, _, _| {
            rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn zero_image_gives_zero_feature_for_every_variant() {
        for variant in Variant::all() {
            let cfg = tiny_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let image = Tensor3::zeros(cfg.input_h, cfg.input_w, cfg.input_c);
            let (feature, _) = forward_image(&image, &params).unwrap();
            assert!(
                feature.values().iter().all(|&v| v == 0.0),
                "variant {variant} produced a nonzero feature from a zero image"
            );
        }
    }

    #[test]
    fn output_length_follows_variant() {
        for variant in Variant::all() {
            let cfg = tiny_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let image = random_image(&cfg, 1);
            let (feature, _) = forward_image(&image, &params).unwrap();
            let expect = if variant.uses_parts() {
                cfg.parts * cfg.embed_dim
            } else {
                cfg.embed_dim
            };
            assert_eq!(feature.len(), expect, "variant {variant}");
        }
    }

    #[test]
    fn nonzero_features_are_unit_norm() {
        for variant in Variant::all() {
            let cfg = tiny_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let (feature, _) = forward_image(&random_image(&cfg, 2), &params).unwrap();
            assert!((l2_norm(feature.values()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_single_part_matches_plain_bilinear_variant() {
        // A WBC_PART model with one branch whose mask saturates at 1
        // reproduces the BC pipeline on the same weights.
        let mut bc_cfg = tiny_cfg(Variant::Bc);
        bc_cfg.parts = 1;
        let bc = ModelParams::<f64>::init(&bc_cfg).unwrap();

        let mut wbc_cfg = bc_cfg.clone();
        wbc_cfg.variant = Variant::WbcPart;
        let saturated = PartNetParams::from_parts(
            Matrix::zeros(1, bc_cfg.channels),
            vec![500.0],
        )
        .unwrap();
        let wbc = ModelParams::from_parts(
            wbc_cfg,
            bc.backbone().clone(),
            Some(saturated),
            bc.embeddings().to_vec(),
        )
        .unwrap();

        let image = random_image(&bc_cfg, 3);
        let (f_bc, _) = forward_image(&image, &bc).unwrap();
        let (f_wbc, _) = forward_image(&image, &wbc).unwrap();
        for (a, b) in f_bc.values().iter().zip(f_wbc.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        for variant in Variant::all() {
            let cfg = tiny_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let (feature, cache) = forward_image(&random_image(&cfg, 4), &params).unwrap();
            let grads = backward(&params, &cache, &vec![0.0; feature.len()]).unwrap();
            assert!(grads.to_flat().iter().all(|&v| v == 0.0), "variant {variant}");
            // Dispatch contract: unused sub-parameters have no gradient block.
            assert_eq!(grads.partnet.is_some(), variant.uses_parts());
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let cfg = tiny_cfg(Variant::WbcPart);
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let (feature, cache) = forward_image(&random_image(&cfg, 5), &params).unwrap();
        let flat = params.to_flat();
        params.copy_from_flat(&flat).unwrap(); // bumps the revision
        let err = backward(&params, &cache, &vec![0.0; feature.len()]).unwrap_err();
        assert!(matches!(err, Error::StaleCache));
    }

    #[test]
    fn grads_and_params_share_block_layout() {
        for variant in Variant::all() {
            let cfg = tiny_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let grads = ModelGrads::zeros_like(&params);
            let pb = params.blocks();
            let gb = grads.blocks();
            assert_eq!(pb.len(), gb.len());
            for ((pn, pv), (gn, gv)) in pb.iter().zip(&gb) {
                assert_eq!(pn, gn);
                assert_eq!(pv.len(), gv.len());
            }
            let dims = params.named_dims();
            for ((name, dims), (pn, pv)) in dims.iter().zip(&pb) {
                assert_eq!(name, pn);
                assert_eq!(dims.iter().product::<usize>(), pv.len());
            }
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for variant in Variant::all() {
            let cfg = tiny_cfg(variant);
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let path = dir.path().join(format!("ckpt_{variant}"));
            save_checkpoint(&path, &params).unwrap();
            let loaded = load_checkpoint::<f64>(&path).unwrap();
            assert_eq!(params, loaded);
            // Width mismatch is rejected, not silently converted.
            assert!(load_checkpoint::<f32>(&path).is_err());
        }
    }

    #[test]
    fn forward_rejects_wrong_image_shape() {
        let cfg = tiny_cfg(Variant::Gap);
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let image = Tensor3::<f64>::zeros(cfg.input_h + 1, cfg.input_w, cfg.input_c);
        assert!(forward_image(&image, &params).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for variant in Variant::all() {
            assert_eq!(variant.to_string().parse::<Variant>().unwrap(), variant);
        }
        let err = "WBC".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("WBC_PART"), "error should list valid names: {err}");
    }
}
