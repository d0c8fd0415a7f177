//! Seeded synthetic blob dataset.
//!
//! Each subject gets one Gaussian blob whose center and radius are shared by
//! all of its slices (up to one pixel of jitter). Positives carry a bright
//! blob, negatives a dimmer one. Ground-truth blob geometry goes to
//! `blobs.json` next to the `pos/` and `neg/` directories.

use std::fs;
use std::path::Path;

use hybrid_ensemble::image::Image;
use hybrid_ensemble::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const BLOBS_FILE: &str = "blobs.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub subjects_per_class: usize,
    pub slices_per_subject: usize,
    pub image_side: usize,
    /// Gaussian sigma of the blob, drawn once per subject.
    pub blob_radius_range: [f64; 2],
    /// Blob peak intensity for `[negative, positive]`.
    pub blob_intensity_by_class: [f64; 2],
    pub noise_sigma: f64,
    /// Largest offset of a subject's blob center from the image center, as a
    /// fraction of the side. Blobs always keep two radii from the border.
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects_per_class: 20,
            slices_per_subject: 20,
            image_side: 32,
            blob_radius_range: [3.5, 4.5],
            blob_intensity_by_class: [0.4, 0.9],
            noise_sigma: 0.15,
            center_spread: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.subjects_per_class == 0 || self.slices_per_subject == 0 {
            return bad("subject and slice counts must be positive".into());
        }
        if self.image_side < 8 {
            return bad(format!("image_side must be at least 8, got {}", self.image_side));
        }
        let [r0, r1] = self.blob_radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("invalid blob_radius_range {:?}", self.blob_radius_range));
        }
        if self.blob_intensity_by_class.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("blob intensities must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if !(0.0..=0.5).contains(&self.center_spread) {
            return bad(format!("center_spread must lie in [0, 0.5], got {}", self.center_spread));
        }
        Ok(())
    }
}

/// Ground truth for one generated slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub file: String,
    pub subject_id: String,
    pub slice_index: u32,
    pub label: Label,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl BlobRecord {
    /// Blob bounding box `[x0, y0, x1, y1]` (center +- radius) scaled about
    /// the center by `factor`.
    pub fn bbox(&self, factor: f64) -> [f64; 4] {
        let r = self.radius * factor;
        [self.cx - r, self.cy - r, self.cx + r, self.cy + r]
    }

    pub fn contains(&self, point: (f64, f64), factor: f64) -> bool {
        let [x0, y0, x1, y1] = self.bbox(factor);
        (x0..=x1).contains(&point.0) && (y0..=y1).contains(&point.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub spec: SynthSpec,
    pub samples: Vec<BlobRecord>,
}

pub fn read_manifest(dir: &Path) -> Result<BlobManifest, CliError> {
    let path = dir.join(BLOBS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Renders one slice. `rng` supplies the pixel noise.
fn render(spec: &SynthSpec, amp: f64, cx: f64, cy: f64, r: f64, rng: &mut ChaCha8Rng) -> Image<f64> {
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let side = spec.image_side;
    Image::from_fn(side, side, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        let v = amp * (-d2 / (2.0 * r * r)).exp();
        let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        (v + n).clamp(0.0, 1.0)
    })
}

/// Writes `pos/`, `neg/` and `blobs.json` under `out`. Negatives are drawn
/// first, then positives; per subject the center and radius, then per slice
/// the jitter and the pixel noise.
pub fn synth_data(spec: &SynthSpec, out: &Path) -> Result<BlobManifest, CliError> {
    spec.validate()?;
    let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.image_side as f64;
    let mut samples = Vec::new();
    for label in [Label::Negative, Label::Positive] {
        let dir_name = if label.is_positive() { "pos" } else { "neg" };
        let dir = out.join(dir_name);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let amp = spec.blob_intensity_by_class[label.value() as usize];
        for s in 0..spec.subjects_per_class {
            let subject = format!("{dir_name}{s:03}");
            let r = rng.random_range(spec.blob_radius_range[0]..=spec.blob_radius_range[1]);
            // keep two radii of margin so blobs are not clipped by the border
            let margin = (2.0 * r).min(side / 2.0 - 1.0);
            let reach = (spec.center_spread * side).min((side - 1.0) / 2.0 - margin).max(0.0);
            let mid = (side - 1.0) / 2.0;
            let cx = mid + rng.random_range(-reach..=reach);
            let cy = mid + rng.random_range(-reach..=reach);
            for slice in 0..spec.slices_per_subject {
                let jx = cx + rng.random_range(-1.0..=1.0);
                let jy = cy + rng.random_range(-1.0..=1.0);
                let img = render(spec, amp, jx, jy, r, &mut rng);
                let file = format!("{dir_name}/{subject}_{slice:02}.pgm");
                img.write_pgm(&out.join(&file)).map_err(|e| CliError::Io(e.to_string()))?;
                samples.push(BlobRecord {
                    file,
                    subject_id: subject.clone(),
                    slice_index: slice as u32,
                    label,
                    cx: jx,
                    cy: jy,
                    radius: r,
                });
            }
        }
    }
    let manifest = BlobManifest {
        spec: spec.clone(),
        samples,
    };
    let path = out.join(BLOBS_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(manifest)
}
