//! Seeded synthetic person-retrieval corpora.
//!
//! Each identity has a latent appearance vector in `[0, 1]^latent_dim`.
//! An image renders that vector, perturbed by per-image noise, as horizontal
//! colour bands inside a centred foreground box; the remaining pixels are
//! background clutter around a per-camera tint. The mask marks the box.
//! Cameras alternate between two synthetic views.
//!
//! Every value is quantized to `k/255`, so a corpus written to PNM files and
//! read back is bit-identical to the in-memory one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRecord, Split};
use super::raster::{write_raster, Raster};
use crate::error::{Error, Result};
use crate::sampler::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Identities whose images all go to the train split.
    pub identities: usize,
    pub images_per_identity: usize,
    /// Further identities split into query (first half of their images) and
    /// gallery (second half).
    pub test_identities: usize,
    pub latent_dim: usize,
    /// Per-image standard deviation of the latent appearance.
    pub noise_sigma: f64,
    /// Per-pixel standard deviation inside the foreground.
    pub pixel_noise: f64,
    /// Half-width of the uniform per-pixel background clutter.
    pub background_noise: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.identities,
            self.images_per_identity,
            self.latent_dim,
            self.height,
            self.width,
            self.channels,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(
                "synthetic counts and sizes must be >= 1".into(),
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("pixel_noise", self.pixel_noise),
            ("background_noise", self.background_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.identities + self.test_identities
    }

    /// Foreground box as `(y0, y1, x0, x1)`, half-open.
    pub fn foreground_box(&self) -> (usize, usize, usize, usize) {
        let (h, w) = (self.height, self.width);
        let (dy, dx) = (h / 8, w / 4);
        (dy, h - dy, dx, w - dx)
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            identities: 60,
            images_per_identity: 8,
            test_identities: 0,
            latent_dim: 6,
            noise_sigma: 0.1,
            pixel_noise: 0.05,
            background_noise: 0.5,
            height: 16,
            width: 8,
            channels: 3,
            seed: 0,
        }
    }
}

/// Records with their rasters, in record order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<Raster>,
    pub masks: Vec<Raster>,
}

impl SyntheticCorpus {
    /// Writes rasters under `dir/images` and `dir/masks` plus
    /// `dir/manifest.jsonl`, returning the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for ((rec, img), mask) in self.records.iter().zip(&self.images).zip(&self.masks) {
            write_raster(&dir.join(&rec.image), img)?;
            if let Some(m) = &rec.mask {
                write_raster(&dir.join(m), mask)?;
            }
        }
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&manifest, &self.records)?;
        Ok(manifest)
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let tints: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..c).map(|_| rng.random::<f64>()).collect())
        .collect();
    let (y0, y1, x0, x1) = spec.foreground_box();
    let bands = spec.latent_dim.div_ceil(c);
    let box_h = y1 - y0;

    let mask_data: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = Raster::new(h, w, 1, mask_data.clone())?;

    let mut corpus = SyntheticCorpus {
        records: Vec::new(),
        images: Vec::new(),
        masks: Vec::new(),
    };
    for i in 0..spec.total_identities() {
        let center: Vec<f64> = (0..spec.latent_dim).map(|_| rng.random::<f64>()).collect();
        let id = format!("{i:04}");
        for j in 0..spec.images_per_identity {
            let cam = j % 2;
            let latent: Vec<f64> = center
                .iter()
                .map(|&m| m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut data = Vec::with_capacity(h * w * c);
            for (p, &fg) in mask_data.iter().enumerate() {
                let y = p / w;
                for ch in 0..c {
                    let v = if fg > 0.0 {
                        let band = (y - y0) * bands / box_h;
                        latent[(band * c + ch) % spec.latent_dim]
                            + spec.pixel_noise * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        tints[cam][ch] + spec.background_noise * (2.0 * rng.random::<f64>() - 1.0)
                    };
                    data.push(quantize(v));
                }
            }
            let split = if i < spec.identities {
                Split::Train
            } else if j < spec.images_per_identity / 2 {
                Split::Query
            } else {
                Split::Gallery
            };
            let stem = format!("{id}_c{}_{j:02}", cam + 1);
            let ext = if c == 1 { "pgm" } else { "ppm" };
            corpus.records.push(ManifestRecord {
                image: PathBuf::from(format!("images/{stem}.{ext}")),
                mask: Some(PathBuf::from(format!("masks/{stem}.pgm"))),
                id: id.clone(),
                cam: format!("c{}", cam + 1),
                split,
            });
            corpus.images.push(Raster::new(h, w, c, data)?);
            corpus.masks.push(mask.clone());
        }
    }
    Ok(corpus)
}
