//! Bit-exact tensor files, dataset manifests, and a seeded synthetic
//! dataset generator with part-local appearance and spatial jitter.
//!
//! Tensor file layout (all integers little-endian, independent of host):
//!
//! | offset      | field                                  |
//! |-------------|----------------------------------------|
//! | 0           | magic `"WBCT"`                         |
//! | 4           | version, `u16` (currently 1)           |
//! | 6           | rank, `u16`                            |
//! | 8           | element width in bytes, `u8` (4 or 8)  |
//! | 9           | dims, `u32` each                       |
//! | 9 + 4·rank  | payload, IEEE-754 little-endian        |
//!
//! Reading back what was written reproduces the values bit-exactly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RasterSample;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

pub const MAGIC: [u8; 4] = *b"WBCT";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_RANK: u16 = 8;
pub const MANIFEST_FILE: &str = "manifest.json";

// --- tensor container -------------------------------------------------------

pub fn write_tensor<F: Scalar>(path: &Path, dims: &[usize], values: &[F]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK as usize {
        return Err(Error::config(format!(
            "tensor rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    let mut numel = 1usize;
    for &d in dims {
        if d == 0 || d > u32::MAX as usize {
            return Err(Error::config(format!("dimension {d} out of range")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::config("dimension product overflows".to_string()))?;
    }
    if numel != values.len() {
        return Err(Error::dimension(format!(
            "dims {dims:?} describe {numel} values, got {}",
            values.len()
        )));
    }

    let mut buf = Vec::with_capacity(9 + 4 * dims.len() + values.len() * F::ELEM_BYTES as usize);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    buf.push(F::ELEM_BYTES);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        v.write_le(&mut buf);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor<F: Scalar>(path: &Path) -> Result<(Vec<usize>, Vec<F>)> {
    let bytes = fs::read(path)?;
    parse_tensor(&bytes)
}

fn parse_tensor<F: Scalar>(bytes: &[u8]) -> Result<(Vec<usize>, Vec<F>)> {
    let need = |offset: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or_else(|| {
            Error::format(
                bytes.len() as u64,
                format!("truncated while reading {what} ({len} bytes at offset {offset})"),
            )
        })
    };
    let magic = need(0, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, expected \"WBCT\"")));
    }
    let version = u16::from_le_bytes(need(4, 2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes(need(6, 2, "rank")?.try_into().unwrap());
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(6, format!("rank {rank} out of range 1..={MAX_RANK}")));
    }
    let elem = need(8, 1, "element width")?[0];
    if elem != F::ELEM_BYTES {
        return Err(Error::format(
            8,
            format!("element width {elem}, expected {}", F::ELEM_BYTES),
        ));
    }

    let mut dims = Vec::with_capacity(rank as usize);
    let mut numel = 1usize;
    for i in 0..rank as usize {
        let offset = 9 + 4 * i;
        let d = u32::from_le_bytes(need(offset, 4, "dimension")?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(offset as u64, "zero dimension".to_string()));
        }
        numel = numel.checked_mul(d).ok_or_else(|| {
            Error::format(offset as u64, "dimension product overflows".to_string())
        })?;
        dims.push(d);
    }

    let payload_offset = 9 + 4 * rank as usize;
    let elem_size = F::ELEM_BYTES as usize;
    let expected = numel
        .checked_mul(elem_size)
        .ok_or_else(|| Error::format(payload_offset as u64, "payload size overflows".to_string()))?;
    let payload = &bytes[payload_offset.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::format(
            payload_offset as u64,
            format!("payload holds {} bytes, dims require {expected}", payload.len()),
        ));
    }
    let values = payload.chunks_exact(elem_size).map(F::read_le).collect();
    Ok((dims, values))
}

pub fn write_tensor3<F: Scalar>(path: &Path, t: &Tensor3<F>) -> Result<()> {
    write_tensor(path, &[t.height(), t.width(), t.channels()], t.values())
}

pub fn read_tensor3<F: Scalar>(path: &Path) -> Result<Tensor3<F>> {
    let (dims, values) = read_tensor(path)?;
    if dims.len() != 3 {
        return Err(Error::format(6, format!("expected rank 3, file has rank {}", dims.len())));
    }
    Tensor3::new(dims[0], dims[1], dims[2], values)
}

// --- dataset manifest --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Probe,
    Gallery,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Tensor file path relative to the dataset root.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub identities: usize,
    pub samples: Vec<ManifestEntry>,
    /// Echo of the generator configuration for synthetic sets.
    pub generator: Option<SynthConfig>,
}

impl DatasetManifest {
    /// Labels must form a contiguous 0-based index and paths must be unique
    /// (which keeps the probe and gallery splits disjoint).
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::config("manifest lists no samples".to_string()));
        }
        let mut seen = vec![false; self.identities];
        for s in &self.samples {
            if s.label >= self.identities {
                return Err(Error::config(format!(
                    "label {} out of range for {} identities",
                    s.label, self.identities
                )));
            }
            seen[s.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::config(format!(
                "labels are not contiguous: identity {missing} has no samples"
            )));
        }
        let mut paths = BTreeSet::new();
        for s in &self.samples {
            if !paths.insert(s.path.as_str()) {
                return Err(Error::config(format!("duplicate sample path {:?}", s.path)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

// --- synthetic dataset --------------------------------------------------------

/// Synthetic identities are built from part-local appearance: each identity
/// owns one signature color per latent part, parts sit at canonical rows and
/// every rendered image jitters them spatially, so part-aware aggregation
/// has a measurable advantage over global pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub channels_in: usize,
    /// Latent appearance parts per identity (independent of the model's L).
    pub latent_parts: usize,
    /// Maximum per-part translation in pixels.
    pub jitter: usize,
    pub noise_std: f64,
    /// Images per identity tagged probe / gallery; the rest are train.
    pub probe_per_identity: usize,
    pub gallery_per_identity: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            images_per_identity: 6,
            height: 16,
            width: 8,
            channels_in: 3,
            latent_parts: 3,
            jitter: 2,
            noise_std: 0.05,
            probe_per_identity: 0,
            gallery_per_identity: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.images_per_identity == 0 {
            return Err(Error::config("need at least one identity and image".to_string()));
        }
        if self.channels_in == 0 {
            return Err(Error::config("channels_in must be positive".to_string()));
        }
        if self.jitter >= self.height.min(self.width) {
            return Err(Error::config(format!(
                "jitter {} must be smaller than the grid {}x{}",
                self.jitter, self.height, self.width
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::config("noise_std must be non-negative".to_string()));
        }
        if self.probe_per_identity + self.gallery_per_identity > self.images_per_identity {
            return Err(Error::config(format!(
                "probe ({}) + gallery ({}) exceed images per identity ({})",
                self.probe_per_identity, self.gallery_per_identity, self.images_per_identity
            )));
        }
        self.geometry()?;
        Ok(())
    }

    /// Canonical part boxes: one full-height band per part, with a small
    /// horizontal margin. Patches are larger than the jitter range so images
    /// of one identity keep overlapping.
    fn geometry(&self) -> Result<PartGeometry> {
        if self.latent_parts == 0 || self.latent_parts > self.height {
            return Err(Error::config(format!(
                "latent_parts {} does not fit a height of {}",
                self.latent_parts, self.height
            )));
        }
        let band = self.height / self.latent_parts;
        let patch_h = band;
        let patch_w = if self.width > 2 { self.width - 2 } else { self.width };
        let rows = (0..self.latent_parts).map(|k| k * band).collect();
        Ok(PartGeometry {
            rows,
            col: (self.width - patch_w) / 2,
            patch_h,
            patch_w,
        })
    }
}

struct PartGeometry {
    rows: Vec<usize>,
    col: usize,
    patch_h: usize,
    patch_w: usize,
}

/// Generate tensor files plus a manifest under `out_dir`; byte-identical
/// output for equal configurations.
pub fn synth_generate<F: Scalar>(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let geo = cfg.geometry()?;
    fs::create_dir_all(out_dir)?;

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    // Per-identity, per-part signature colors; magnitudes bounded away from
    // zero so every part is visible against the background.
    let signatures: Vec<Vec<Vec<f64>>> = (0..cfg.identities)
        .map(|_| {
            (0..cfg.latent_parts)
                .map(|_| {
                    (0..cfg.channels_in)
                        .map(|_| {
                            let magnitude = rng.random_range(0.6..1.4);
                            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                            magnitude * sign
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(cfg.identities * cfg.images_per_identity);
    for id in 0..cfg.identities {
        for img in 0..cfg.images_per_identity {
            let mut grid = vec![0.0f64; cfg.height * cfg.width * cfg.channels_in];
            for (k, row) in geo.rows.iter().enumerate() {
                let jr = rng.random_range(-(cfg.jitter as i64)..=cfg.jitter as i64);
                let jc = rng.random_range(-(cfg.jitter as i64)..=cfg.jitter as i64);
                let r0 = (*row as i64 + jr)
                    .clamp(0, (cfg.height - geo.patch_h) as i64) as usize;
                let c0 = (geo.col as i64 + jc)
                    .clamp(0, (cfg.width - geo.patch_w) as i64) as usize;
                // Additive composition keeps overlapping parts order-free.
                for p in r0..r0 + geo.patch_h {
                    for q in c0..c0 + geo.patch_w {
                        let base = (p * cfg.width + q) * cfg.channels_in;
                        for (dst, sig) in grid[base..base + cfg.channels_in]
                            .iter_mut()
                            .zip(&signatures[id][k])
                        {
                            *dst += sig;
                        }
                    }
                }
            }
            if let Some(noise) = &noise {
                for v in &mut grid {
                    *v += noise.sample(&mut rng);
                }
            }
            let tensor = Tensor3::new(
                cfg.height,
                cfg.width,
                cfg.channels_in,
                grid.into_iter().map(F::from_f64).collect(),
            )?;
            let path = format!("id{id:03}_img{img:02}.wbct");
            write_tensor3(&out_dir.join(&path), &tensor)?;
            let split = if img < cfg.probe_per_identity {
                Split::Probe
            } else if img < cfg.probe_per_identity + cfg.gallery_per_identity {
                Split::Gallery
            } else {
                Split::Train
            };
            samples.push(ManifestEntry {
                path,
                label: id,
                split,
            });
        }
    }

    let manifest = DatasetManifest {
        identities: cfg.identities,
        samples,
        generator: Some(cfg.clone()),
    };
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}

// --- loaded dataset -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Dataset<F> {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<RasterSample<F>>,
    pub splits: Vec<Split>,
}

impl<F: Scalar> Dataset<F> {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut splits = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let image = read_tensor3(&dir.join(&entry.path))?;
            samples.push(RasterSample {
                image,
                label: entry.label,
            });
            splits.push(entry.split);
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            samples,
            splits,
        })
    }

    pub fn identities(&self) -> usize {
        self.manifest.identities
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Held-in probe/gallery split over the given indices: the first image
    /// of each identity becomes the probe, the rest the gallery. Requires at
    /// least two images per represented identity so every probe has a match.
    pub fn resplit(&self, base: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut probes = Vec::new();
        let mut gallery = Vec::new();
        let mut seen = BTreeSet::new();
        for &i in base {
            let label = self.samples[i].label;
            if seen.insert(label) {
                probes.push(i);
            } else {
                gallery.push(i);
            }
        }
        for &p in &probes {
            let label = self.samples[p].label;
            if !gallery.iter().any(|&g| self.samples[g].label == label) {
                return Err(Error::protocol(format!(
                    "identity {label} has a single image; probe would have no gallery match"
                )));
            }
        }
        Ok((probes, gallery))
    }
}

/// Leave-one-out nearest-neighbor rank-1 rate in raw pixel space; the
/// generator's separability floor.
pub fn pixel_rank1_baseline<F: Scalar>(samples: &[RasterSample<F>]) -> f64 {
    let mut hits = 0usize;
    for (i, probe) in samples.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, other) in samples.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut d = 0.0f64;
            for (a, b) in probe.image.values().iter().zip(other.image.values()) {
                let diff = a.as_f64() - b.as_f64();
                d += diff * diff;
            }
            if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            if samples[j].label == probe.label {
                hits += 1;
            }
        }
    }
    hits as f64 / samples.len() as f64
}
