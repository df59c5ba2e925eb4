//! Synthetic paired CT slices.
//!
//! The clean slice is air with a large body ellipse and a few organ
//! ellipses painted over it, anti-aliased by 4×4 supersampling. The noisy
//! slice adds white Gaussian noise in standardized units and clamps to the HU
//! range.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, destandardize, standardize, CtImage, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

pub const AIR_HU: f32 = -1000.0;
pub const BODY_HU: f32 = 0.0;

/// Organ intensities in HU.
pub const TISSUES: [(&str, f32); 5] = [
    ("lung", -700.0),
    ("liver", 60.0),
    ("spleen", 50.0),
    ("bone", 400.0),
    ("aorta", 45.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Noise standard deviation in standardized units.
    pub sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            sigma: 0.06,
        }
    }
}

/// Smallest supported phantom side.
pub const MIN_DIM: usize = 64;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    hu: f32,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Body outline plus 2 to 7 organs, coordinates normalized to `[0, 1]`.
fn random_ellipses(rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let mut out = vec![Ellipse {
        cy: 0.5,
        cx: 0.5,
        ry: rng.random_range(0.48..0.5),
        rx: rng.random_range(0.48..0.5),
        cos: 1.0,
        sin: 0.0,
        hu: BODY_HU,
    }];
    let organs = rng.random_range(2..=7);
    for _ in 0..organs {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        out.push(Ellipse {
            cy: rng.random_range(0.25..0.75),
            cx: rng.random_range(0.25..0.75),
            ry: rng.random_range(0.05..0.2),
            rx: rng.random_range(0.05..0.2),
            cos: theta.cos(),
            sin: theta.sin(),
            hu: TISSUES[rng.random_range(0..TISSUES.len())].1,
        });
    }
    out
}

fn render(h: usize, w: usize, ellipses: &[Ellipse]) -> Vec<f32> {
    let s = SUPERSAMPLE as f64;
    let mut out = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            let mut acc = 0.0f64;
            for sy in 0..SUPERSAMPLE {
                let y = (py as f64 + (sy as f64 + 0.5) / s) / h as f64;
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / s) / w as f64;
                    let hu = ellipses
                        .iter()
                        .rev()
                        .find(|e| e.contains(y, x))
                        .map_or(AIR_HU, |e| e.hu);
                    acc += hu as f64;
                }
            }
            out.push((acc / (s * s)) as f32);
        }
    }
    out
}

/// Returns `(ndct, ldct)` for image `id`; the random stream is derived from
/// `(seed, id)`.
pub fn gen_phantom(spec: &PhantomSpec, id: &str, seed: u64) -> Result<(CtImage, CtImage)> {
    if spec.height < MIN_DIM || spec.width < MIN_DIM {
        return Err(Error::Config(format!(
            "phantom dims {}x{} below the minimum {MIN_DIM}",
            spec.height, spec.width
        )));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {} must be finite and >= 0", spec.sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let ellipses = random_ellipses(&mut rng);
    let clean = render(spec.height, spec.width, &ellipses);
    let noisy = if spec.sigma == 0.0 {
        clean.clone()
    } else {
        let normal = Normal::new(0.0, spec.sigma).expect("sigma checked above");
        clean
            .iter()
            .map(|&hu| {
                let z = standardize(hu) as f64 + normal.sample(&mut rng);
                destandardize(z as f32).clamp(HU_MIN, HU_MAX)
            })
            .collect()
    };
    Ok((
        CtImage::new(id, spec.height, spec.width, clean)?,
        CtImage::new(id, spec.height, spec.width, noisy)?,
    ))
}
