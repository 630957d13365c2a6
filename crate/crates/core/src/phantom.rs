//! Synthetic pelvis-like paired phantoms for tests, demos and the `synth`
//! command. Tissue classes are ellipsoids with fixed CT numbers; the source
//! modality renders the same classes with a different intensity table, a
//! smooth bias field and noise.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_volume, write_manifest, ManifestEntry, Modality, Task, Volume};
use crate::error::{contract_err, Error, Result};
use crate::evaluation::{Organ, ThresholdBandSegmenter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Fat,
    Soft,
    Bladder,
    Prostate,
    Bone,
}

impl Tissue {
    fn hu(self) -> f32 {
        match self {
            Tissue::Air => -1000.0,
            Tissue::Fat => -100.0,
            Tissue::Soft => 40.0,
            Tissue::Bladder => 150.0,
            Tissue::Prostate => 260.0,
            Tissue::Bone => 900.0,
        }
    }

    fn mri(self) -> f32 {
        match self {
            Tissue::Air => 5.0,
            Tissue::Fat => 900.0,
            Tissue::Soft => 420.0,
            Tissue::Bladder => 1300.0,
            Tissue::Prostate => 650.0,
            Tissue::Bone => 120.0,
        }
    }
}

/// Segmenter whose HU bands match the phantom organs, labelled like the
/// default pelvic organ list.
pub fn phantom_segmenter() -> ThresholdBandSegmenter {
    ThresholdBandSegmenter::new(vec![
        (Organ::new("urinary_bladder", 21), 100.0, 200.0),
        (Organ::new("prostate", 22), 200.0, 400.0),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub task: Task,
    /// Source noise standard deviation, relative to the soft-tissue level.
    pub noise: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            height: 64,
            width: 64,
            task: Task::Mri2ct,
            noise: 0.02,
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        let dy = (y - self.cy) / (self.ry * scale);
        let dx = (x - self.cx) / (self.rx * scale);
        dy * dy + dx * dx <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, amount: f64) -> f64 {
    v + rng.random_range(-amount..=amount)
}

/// One paired case `(source, target)` drawn deterministically from `seed`.
/// Coordinates are expressed on the unit square so the anatomy scales with
/// the grid.
pub fn phantom_case(spec: &PhantomSpec, case_id: &str, seed: u64) -> Result<(Volume, Volume)> {
    if spec.depth == 0 || spec.height < 8 || spec.width < 8 {
        return Err(contract_err!("phantom grid {}x{}x{} is too small", spec.depth, spec.height, spec.width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Ellipse {
        cy: jitter(&mut rng, 0.5, 0.03),
        cx: jitter(&mut rng, 0.5, 0.03),
        ry: jitter(&mut rng, 0.36, 0.04),
        rx: jitter(&mut rng, 0.44, 0.04),
    };
    let soft = Ellipse {
        ry: body.ry * jitter(&mut rng, 0.82, 0.05),
        rx: body.rx * jitter(&mut rng, 0.82, 0.05),
        ..body
    };
    let bladder = Ellipse {
        cy: body.cy - jitter(&mut rng, 0.08, 0.03),
        cx: jitter(&mut rng, body.cx, 0.04),
        ry: jitter(&mut rng, 0.09, 0.02),
        rx: jitter(&mut rng, 0.12, 0.03),
    };
    let prostate = Ellipse {
        cy: bladder.cy + bladder.ry + jitter(&mut rng, 0.06, 0.015),
        cx: bladder.cx,
        ry: jitter(&mut rng, 0.045, 0.01),
        rx: jitter(&mut rng, 0.055, 0.01),
    };
    let bone_off = jitter(&mut rng, 0.27, 0.03);
    let bones = [-1.0, 1.0].map(|side| Ellipse {
        cy: body.cy + 0.05,
        cx: body.cx + side * bone_off,
        ry: 0.07,
        rx: 0.05,
    });
    // smooth multiplicative bias field for the source rendering
    let bias = (rng.random_range(0.0..0.25), rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let (d, h, w) = (spec.depth, spec.height, spec.width);
    let mut target = Array3::<f32>::zeros((d, h, w));
    let mut source = Array3::<f32>::zeros((d, h, w));
    for z in 0..d {
        // organs taper towards the ends of the stack
        let t = if d > 1 { z as f64 / (d - 1) as f64 - 0.5 } else { 0.0 };
        let organ_scale = (1.0 - 1.2 * t * t).max(0.3);
        for y in 0..h {
            let yy = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let xx = (x as f64 + 0.5) / w as f64;
                let tissue = if !body.contains(yy, xx, 1.0) {
                    Tissue::Air
                } else if bones.iter().any(|b| b.contains(yy, xx, 1.0)) {
                    Tissue::Bone
                } else if bladder.contains(yy, xx, organ_scale) {
                    Tissue::Bladder
                } else if prostate.contains(yy, xx, organ_scale) {
                    Tissue::Prostate
                } else if soft.contains(yy, xx, 1.0) {
                    Tissue::Soft
                } else {
                    Tissue::Fat
                };
                target[[z, y, x]] = tissue.hu();
                let field = 1.0 + bias.0 * ((3.0 * yy + bias.1).sin() * (2.0 * xx + bias.2).cos());
                let n: f32 = rng.random_range(-1.0..1.0) * spec.noise * Tissue::Soft.mri();
                source[[z, y, x]] = match spec.task {
                    Task::Mri2ct => (tissue.mri() * field as f32 + n).max(0.0),
                    Task::Cbct2ct => {
                        let shade = 120.0 * (field as f32 - 1.0) * 4.0;
                        tissue.hu() + shade + n
                    }
                };
            }
        }
    }
    let spacing = [3.0, 1.0, 1.0];
    let origin = [0.0; 3];
    let src = Volume::new(source, spacing, origin, spec.task.source_modality(), case_id)?;
    let tgt = Volume::new(target, spacing, origin, Modality::Ct, case_id)?;
    Ok((src, tgt))
}

/// Writes `n` phantom cases as `<root>/<id>/{source,ct}.nii.gz` plus a
/// `manifest.csv` with root-relative paths. Case `i` uses seed `seed + i`.
pub fn synth_dataset(root: &Path, n: usize, spec: &PhantomSpec, seed: u64) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("case{i:03}");
        let (src, tgt) = phantom_case(spec, &id, seed.wrapping_add(i as u64))?;
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sp = Path::new(&id).join("source.nii.gz");
        let tp = Path::new(&id).join("ct.nii.gz");
        save_volume(&root.join(&sp), &src)?;
        save_volume(&root.join(&tp), &tgt)?;
        entries.push(ManifestEntry {
            case_id: id,
            source_path: sp,
            target_path: tp,
        });
    }
    write_manifest(&root.join("manifest.csv"), &entries)?;
    Ok(entries)
}

fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        (-r..=r)
            .map(|i| k[(i + r) as usize] * img[[y, clamp(x as isize + i, w)]] as f64)
            .sum::<f64>()
            / ks
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        ((-r..=r)
            .map(|i| k[(i + r) as usize] * rows[[clamp(y as isize + i, h), x]])
            .sum::<f64>()
            / ks) as f32
    })
}

/// Normalized `size x size` slice pair for fusion ablations. The source is
/// a sum of sharp-edged blobs and stripes; the target is a lightly blurred
/// copy plus a fixed smooth field spanning the whole slice, so a good translator must keep fine
/// detail and also model image-wide structure.
pub fn detail_pair(size: usize, seed: u64) -> (Array2<f32>, Array2<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Array2::<f32>::from_elem((size, size), -0.6);
    let n = size as f64;
    for _ in 0..6 {
        let (cy, cx) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let (ry, rx) = (rng.random_range(0.06..0.25) * n, rng.random_range(0.06..0.25) * n);
        let amp: f32 = rng.random_range(0.2..0.7);
        let square = rng.random_bool(0.5);
        for ((y, x), v) in src.indexed_iter_mut() {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let inside = if square { dy.abs() <= 1.0 && dx.abs() <= 1.0 } else { dy * dy + dx * dx <= 1.0 };
            if inside {
                *v += amp;
            }
        }
    }
    let period = rng.random_range(2..5usize);
    let stripe_amp: f32 = rng.random_range(0.1..0.25);
    let vertical = rng.random_bool(0.5);
    let (y0, y1) = (rng.random_range(0..size / 2), rng.random_range(size / 2..size));
    for ((y, x), v) in src.indexed_iter_mut() {
        let t = if vertical { x } else { y };
        if y >= y0 && y < y1 && (t / period) % 2 == 0 {
            *v += stripe_amp;
        }
    }
    src.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    let blurred = gaussian_blur(&src, 0.7);
    let tgt = Array2::from_shape_fn((size, size), |(y, x)| {
        let (yy, xx) = (y as f64 / n, x as f64 / n);
        let field = 0.3 * (std::f64::consts::PI * (0.8 * yy + 0.6 * xx) + 0.5).sin();
        (0.8 * blurred[[y, x]] as f64 + field).clamp(-1.0, 1.0) as f32
    });
    (src, tgt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Segmenter;

    #[test]
    fn deterministic_and_paired() {
        let spec = PhantomSpec::default();
        let (a, b) = phantom_case(&spec, "p", 3).unwrap();
        let (a2, b2) = phantom_case(&spec, "p", 3).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.modality, Modality::Mri);
        let (c, _) = phantom_case(&spec, "p", 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn detail_pair_range_and_determinism() {
        let (s, t) = detail_pair(32, 5);
        assert_eq!(detail_pair(32, 5), (s.clone(), t.clone()));
        assert!(s.iter().chain(t.iter()).all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(s, t);
    }

    #[test]
    fn blur_preserves_constants() {
        let c = Array2::from_elem((9, 7), 0.25f32);
        assert!(gaussian_blur(&c, 1.0).iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn organs_present_in_middle_slice() {
        let spec = PhantomSpec {
            depth: 3,
            ..Default::default()
        };
        let (_, ct) = phantom_case(&spec, "p", 0).unwrap();
        let labels = phantom_segmenter().segment(&ct).unwrap();
        let mid = labels.index_axis(ndarray::Axis(0), 1);
        assert!(mid.iter().any(|&l| l == 21));
        assert!(mid.iter().any(|&l| l == 22));
    }
}
