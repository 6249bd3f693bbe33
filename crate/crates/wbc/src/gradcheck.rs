//! Certification harness: every hand-derived backward pass is compared
//! against the central finite-difference oracle over seeded random
//! instances, in double precision. Instances that land near a kink (hinge
//! boundary, ReLU zero, signed-root origin) are rejected and redrawn, since
//! central differences are meaningless across a kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    concat_normalize, embed_backward, signed_sqrt, signed_sqrt_backward, weighted_bilinear_code,
    EmbeddingParams,
};
use crate::error::{Error, Result};
use crate::loss::{euclid_dist, triplet_hinge_backward, LossConfig};
use crate::model::{self, backward, forward_image, ModelConfig, ModelParams, Variant};
use crate::partnet::{generate_masks, partnet_backward, PartMask, PartNetParams};
use crate::tensor::{dot, finite_diff_grad, relative_error, Matrix, Tensor3};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random instances per operation.
    pub instances: usize,
    pub eps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            eps: 1e-5,
        }
    }
}

/// Outcome of one operation's certification.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn from_errors(op: &str, errors: &[f64], tolerance: f64) -> Self {
        let max = errors.iter().copied().fold(0.0f64, f64::max);
        Self {
            op: op.to_string(),
            instances: errors.len(),
            max_rel_err: max,
            tolerance,
            passed: max < tolerance,
        }
    }
}

const MODULE_TOLERANCE: f64 = 1e-6;
const MODEL_TOLERANCE: f64 = 1e-5;

pub const OP_NAMES: [&str; 9] = [
    "wbc_backward",
    "signed_sqrt_backward",
    "embed_backward",
    "partnet_backward",
    "triplet_hinge_backward",
    "model_backward_gap",
    "model_backward_gap_part",
    "model_backward_bc",
    "model_backward_wbc_part",
];

/// Run every certification; `corrupt` perturbs the named operation's
/// analytic gradient on its first instance (a negative control for the
/// harness itself).
pub fn run_all(cfg: &GradCheckConfig, corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    if let Some(op) = corrupt {
        if !OP_NAMES.contains(&op) {
            return Err(Error::config(format!(
                "unknown operation {op:?}; valid operations: {}",
                OP_NAMES.join(", ")
            )));
        }
    }
    let is_corrupt = |op: &str| corrupt == Some(op);
    Ok(vec![
        check_wbc_backward(cfg, is_corrupt("wbc_backward"))?,
        check_signed_sqrt_backward(cfg, is_corrupt("signed_sqrt_backward"))?,
        check_embed_backward(cfg, is_corrupt("embed_backward"))?,
        check_partnet_backward(cfg, is_corrupt("partnet_backward"))?,
        check_triplet_hinge_backward(cfg, is_corrupt("triplet_hinge_backward"))?,
        check_model_backward(cfg, Variant::Gap, is_corrupt("model_backward_gap"))?,
        check_model_backward(cfg, Variant::GapPart, is_corrupt("model_backward_gap_part"))?,
        check_model_backward(cfg, Variant::Bc, is_corrupt("model_backward_bc"))?,
        check_model_backward(cfg, Variant::WbcPart, is_corrupt("model_backward_wbc_part"))?,
    ])
}

fn rng_for(cfg: &GradCheckConfig, salt: u64) -> ChaCha8Rng {
    <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed.wrapping_add(salt))
}

fn maybe_corrupt(analytic: &mut [f64], corrupt: bool, instance: usize) {
    if corrupt && instance == 0 && !analytic.is_empty() {
        analytic[0] = analytic[0] * 1.5 + 0.1;
    }
}

pub fn check_wbc_backward(cfg: &GradCheckConfig, corrupt: bool) -> Result<CheckReport> {
    let mut rng = rng_for(cfg, 1);
    let mut errors = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let h = rng.random_range(1..=4usize);
        let w = rng.random_range(1..=4usize);
        let c = rng.random_range(1..=6usize);
        let mask = PartMask::from_fn(h, w, |_, _| rng.random_range(0.05..0.95));
        let feats = Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0));
        let d_code = Matrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0));

        let loss = |x: &[f64]| {
            let m = PartMask::new(h, w, x[..h * w].to_vec()).unwrap();
            let f = Tensor3::new(h, w, c, x[h * w..].to_vec()).unwrap();
            let code = weighted_bilinear_code(&m, &f).unwrap();
            dot(d_code.values(), code.matrix().values())
        };
        let mut x = mask.values().to_vec();
        x.extend_from_slice(feats.values());
        let numeric = finite_diff_grad(loss, &x, cfg.eps)?;

        let (d_mask, d_feats) = crate::aggregation::wbc_backward(&mask, &feats, &d_code)?;
        let mut analytic = d_mask.values().to_vec();
        analytic.extend_from_slice(d_feats.values());
        maybe_corrupt(&mut analytic, corrupt, instance);
        errors.push(relative_error(&analytic, &numeric)?);
    }
    Ok(CheckReport::from_errors("wbc_backward", &errors, MODULE_TOLERANCE))
}

pub fn check_signed_sqrt_backward(cfg: &GradCheckConfig, corrupt: bool) -> Result<CheckReport> {
    let mut rng = rng_for(cfg, 2);
    let mut errors = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let n = rng.random_range(1..=8usize);
        // Keep inputs away from the origin, where the root is non-smooth.
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let magnitude = rng.random_range(0.1..2.0);
                if rng.random_range(0.0..1.0) < 0.5 {
                    -magnitude
                } else {
                    magnitude
                }
            })
            .collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let numeric = finite_diff_grad(|x| dot(&g, &signed_sqrt(x)), &v, cfg.eps)?;
        let mut analytic = signed_sqrt_backward(&v, &g)?;
        maybe_corrupt(&mut analytic, corrupt, instance);
        errors.push(relative_error(&analytic, &numeric)?);
    }
    Ok(CheckReport::from_errors("signed_sqrt_backward", &errors, MODULE_TOLERANCE))
}

pub fn check_embed_backward(cfg: &GradCheckConfig, corrupt: bool) -> Result<CheckReport> {
    let mut rng = rng_for(cfg, 3);
    let mut errors = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let k = rng.random_range(1..=9usize);
        let d = rng.random_range(1..=4usize);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weight = Matrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let loss = |x: &[f64]| {
            let v = &x[..k];
            let w = Matrix::new(d, k, x[k..].to_vec()).unwrap();
            dot(&g, &w.matvec(v).unwrap())
        };
        let mut x = v.clone();
        x.extend_from_slice(weight.values());
        let numeric = finite_diff_grad(loss, &x, cfg.eps)?;

        let params = EmbeddingParams::new(weight)?;
        let (d_v, d_w) = embed_backward(&v, &params, &g)?;
        let mut analytic = d_v;
        analytic.extend_from_slice(d_w.values());
        maybe_corrupt(&mut analytic, corrupt, instance);
        errors.push(relative_error(&analytic, &numeric)?);
    }
    Ok(CheckReport::from_errors("embed_backward", &errors, MODULE_TOLERANCE))
}

pub fn check_partnet_backward(cfg: &GradCheckConfig, corrupt: bool) -> Result<CheckReport> {
    let mut rng = rng_for(cfg, 4);
    let mut errors = Vec::with_capacity(cfg.instances);
    for instance in 0..cfg.instances {
        let h = rng.random_range(1..=4usize);
        let w = rng.random_range(1..=4usize);
        let c = rng.random_range(1..=6usize);
        let l = rng.random_range(1..=3usize);
        let feats = Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0));
        let weights = Matrix::from_fn(l, c, |_, _| rng.random_range(-1.0..1.0));
        let biases: Vec<f64> = (0..l).map(|_| rng.random_range(-0.5..0.5)).collect();
        let d_masks: Vec<Matrix<f64>> = (0..l)
            .map(|_| Matrix::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)))
            .collect();

        let n_f = h * w * c;
        let n_w = l * c;
        let loss = |x: &[f64]| {
            let feats = Tensor3::new(h, w, c, x[..n_f].to_vec()).unwrap();
            let params = PartNetParams::from_parts(
                Matrix::new(l, c, x[n_f..n_f + n_w].to_vec()).unwrap(),
                x[n_f + n_w..].to_vec(),
            )
            .unwrap();
            let masks = generate_masks(&feats, &params).unwrap();
            let mut acc = 0.0;
            for (mask, d_mask) in masks.iter().zip(&d_masks) {
                acc += dot(mask.values(), d_mask.values());
            }
            acc
        };
        let mut x = feats.values().to_vec();
        x.extend_from_slice(weights.values());
        x.extend_from_slice(&biases);
        let numeric = finite_diff_grad(loss, &x, cfg.eps)?;

        let params = PartNetParams::from_parts(weights, biases)?;
        let (d_feats, grads) = partnet_backward(&feats, &params, &d_masks)?;
        let mut analytic = d_feats.values().to_vec();
        analytic.extend_from_slice(grads.d_weights.values());
        analytic.extend_from_slice(&grads.d_biases);
        maybe_corrupt(&mut analytic, corrupt, instance);
        errors.push(relative_error(&analytic, &numeric)?);
    }
    Ok(CheckReport::from_errors("partnet_backward", &errors, MODULE_TOLERANCE))
}

pub fn check_triplet_hinge_backward(cfg: &GradCheckConfig, corrupt: bool) -> Result<CheckReport> {
    let mut rng = rng_for(cfg, 5);
    let loss_cfg = LossConfig { margin: 0.5 };
    let mut errors = Vec::with_capacity(cfg.instances);
    let mut instance = 0;
    let mut attempts = 0;
    while instance < cfg.instances {
        attempts += 1;
        if attempts > cfg.instances * 200 {
            return Err(Error::config(
                "could not sample enough active, well-separated triplets".to_string(),
            ));
        }
        let dim = rng.random_range(2..=6usize);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let fi = concat_normalize(&[draw(&mut rng)])?;
        let fj = concat_normalize(&[draw(&mut rng)])?;
        let fk = concat_normalize(&[draw(&mut rng)])?;
        let d_pos = euclid_dist(&fi, &fj)?;
        let d_neg = euclid_dist(&fi, &fk)?;
        // Active hinge, away from both the kink and zero distances.
        if d_pos - d_neg + loss_cfg.margin < 1e-2 || d_pos < 5e-2 || d_neg < 5e-2 {
            continue;
        }

        let flat: Vec<f64> = fi
            .values()
            .iter()
            .chain(fj.values())
            .chain(fk.values())
            .copied()
            .collect();
        let margin = loss_cfg.margin;
        let hinge_raw = |x: &[f64]| {
            let seg = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
            };
            let dp = seg(&x[..dim], &x[dim..2 * dim]);
            let dn = seg(&x[..dim], &x[2 * dim..]);
            (dp - dn + margin).max(0.0)
        };
        let numeric = finite_diff_grad(hinge_raw, &flat, cfg.eps)?;

        let (d_fi, d_fj, d_fk) = triplet_hinge_backward(&fi, &fj, &fk, &loss_cfg, 1.0)?;
        let mut analytic = d_fi;
        analytic.extend(d_fj);
        analytic.extend(d_fk);
        maybe_corrupt(&mut analytic, corrupt, instance);
        errors.push(relative_error(&analytic, &numeric)?);
        instance += 1;
    }
    Ok(CheckReport::from_errors("triplet_hinge_backward", &errors, MODULE_TOLERANCE))
}

pub fn check_model_backward(
    cfg: &GradCheckConfig,
    variant: Variant,
    corrupt: bool,
) -> Result<CheckReport> {
    let mut rng = rng_for(cfg, 6 + variant as u64);
    let mut errors = Vec::with_capacity(cfg.instances);
    let mut instance = 0;
    let mut attempts = 0;
    while instance < cfg.instances {
        attempts += 1;
        if attempts > cfg.instances * 200 {
            return Err(Error::config(format!(
                "could not sample enough well-conditioned {variant} models"
            )));
        }
        // Feature-map extents of at most 4×4.
        let model_cfg = ModelConfig {
            variant,
            parts: rng.random_range(1..=3usize),
            channels: rng.random_range(2..=6usize),
            mid_channels: rng.random_range(2..=4usize),
            embed_dim: rng.random_range(2..=4usize),
            input_h: 2 * rng.random_range(1..=4usize) + 1,
            input_w: 2 * rng.random_range(1..=4usize) + 1,
            input_c: rng.random_range(1..=3usize),
            seed: rng.random_range(0..1_000_000u64),
        };
        let mut params = ModelParams::<f64>::init(&model_cfg)?;
        let image = Tensor3::from_fn(
            model_cfg.input_h,
            model_cfg.input_w,
            model_cfg.input_c,
            |_, _, _| rng.random_range(-1.0..1.0),
        );
        let (feature, cache) = forward_image(&image, &params)?;

        // Reject instances sitting near a non-smooth point.
        let cond = model::conditioning(&cache);
        if cond.min_pre_relu < 1e-3 || cond.pre_norm_norm < 1e-2 {
            continue;
        }
        if let Some(min_code) = cond.min_code {
            if min_code < 5e-3 {
                continue;
            }
        }

        let g: Vec<f64> = (0..feature.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = backward(&params, &cache, &g)?;
        let mut analytic = grads.to_flat();
        maybe_corrupt(&mut analytic, corrupt, instance);

        let x0 = params.to_flat();
        let loss = |x: &[f64]| {
            params.copy_from_flat(x).unwrap();
            let (f, _) = forward_image(&image, &params).unwrap();
            dot(&g, f.values())
        };
        let numeric = finite_diff_grad(loss, &x0, cfg.eps)?;
        errors.push(relative_error(&analytic, &numeric)?);
        instance += 1;
    }
    let name = format!("model_backward_{}", variant.to_string().to_lowercase());
    Ok(CheckReport::from_errors(&name, &errors, MODEL_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes_with_default_settings() {
        let cfg = GradCheckConfig {
            instances: 5,
            ..GradCheckConfig::default()
        };
        for report in run_all(&cfg, None).unwrap() {
            assert!(
                report.passed,
                "{} failed: max rel err {} ≥ {}",
                report.op, report.max_rel_err, report.tolerance
            );
        }
    }

    #[test]
    fn corruption_is_detected_and_named() {
        let cfg = GradCheckConfig {
            instances: 3,
            ..GradCheckConfig::default()
        };
        let reports = run_all(&cfg, Some("wbc_backward")).unwrap();
        let wbc = reports.iter().find(|r| r.op == "wbc_backward").unwrap();
        assert!(!wbc.passed);
        for r in reports.iter().filter(|r| r.op != "wbc_backward") {
            assert!(r.passed, "{} unexpectedly failed", r.op);
        }
        assert!(run_all(&cfg, Some("no_such_op")).is_err());
    }

    #[test]
    fn different_seeds_still_pass() {
        let cfg = GradCheckConfig {
            seed: 12345,
            instances: 3,
            ..GradCheckConfig::default()
        };
        for report in run_all(&cfg, None).unwrap() {
            assert!(report.passed, "{} failed under seed change", report.op);
        }
    }
}
