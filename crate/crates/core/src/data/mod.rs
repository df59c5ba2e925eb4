//! CT rasters and everything between files on disk and network batches.

mod augment;
mod ctv;
mod patch;
mod phantom;
mod split;

use std::fs;
use std::path::Path;

pub use augment::{rot90, rotate_augment};
pub use ctv::{read_ctv, write_ctv, ctv_from_bytes, ctv_to_bytes};
pub use patch::{axis_anchors, PatchGrid};
pub use phantom::{gen_phantom, PhantomSpec, TISSUES};
pub use split::{split_dataset, Split, SplitSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3071.0;
pub const HU_MEAN: f64 = -500.0;
pub const HU_STD: f64 = 500.0;

/// `z = (hu + 500) / 500`.
pub fn standardize(hu: f32) -> f32 {
    ((hu as f64 - HU_MEAN) / HU_STD) as f32
}

/// `hu = 500 z - 500`.
pub fn destandardize(z: f32) -> f32 {
    (z as f64 * HU_STD + HU_MEAN) as f32
}

/// A single-slice CT raster in Hounsfield units, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CtImage {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl CtImage {
    /// Every pixel must be finite and within `[HU_MIN, HU_MAX]`.
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if height.checked_mul(width) != Some(pixels.len()) {
            return Err(Error::Data(format!(
                "{id}: {} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            return Err(Error::Data(format!(
                "{id}: value {v} outside the HU range [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(Self {
            id,
            height,
            width,
            pixels,
        })
    }

    /// Converts a standardized `[H, W]` or `[1, 1, H, W]` tensor back to HU,
    /// clamping into the valid range.
    pub fn from_standardized(id: impl Into<String>, t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            &[h, w] | &[1, 1, h, w] => (h, w),
            s => return Err(Error::Shape(format!("expected a single image, got {s:?}"))),
        };
        let pixels = t
            .data()
            .iter()
            .map(|&z| destandardize(z).clamp(HU_MIN, HU_MAX))
            .collect();
        Self::new(id, h, w, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Standardized values as a `[1, 1, H, W]` tensor.
    pub fn standardized(&self) -> Tensor<f32> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| standardize(v)).collect(),
        )
        .expect("pixel count checked at construction")
    }
}

/// Deterministic per-item seed: FNV-1a over the run seed and the item id,
/// finished with the SplitMix64 mixer.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A noisy acquisition and its clean reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub ldct: CtImage,
    pub ndct: CtImage,
}

pub const LD_SUFFIX: &str = "_ld.ctv";
pub const ND_SUFFIX: &str = "_nd.ctv";

/// Paired images sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
}

impl Dataset {
    /// Reads every `<id>_ld.ctv` in `dir` together with its `<id>_nd.ctv`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(LD_SUFFIX) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Data(format!("no *{LD_SUFFIX} files in {}", dir.display())));
        }
        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let nd_path = dir.join(format!("{id}{ND_SUFFIX}"));
            if !nd_path.exists() {
                return Err(Error::Data(format!("{id}: missing {}", nd_path.display())));
            }
            let ldct = read_ctv(&dir.join(format!("{id}{LD_SUFFIX}")), &id)?;
            let ndct = read_ctv(&nd_path, &id)?;
            if (ldct.height, ldct.width) != (ndct.height, ndct.width) {
                return Err(Error::Data(format!("{id}: low-dose and normal-dose sizes differ")));
            }
            pairs.push(ImagePair { id, ldct, ndct });
        }
        Ok(Self { pairs })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for p in &self.pairs {
            write_ctv(&p.ldct, &dir.join(format!("{}{LD_SUFFIX}", p.id)))?;
            write_ctv(&p.ndct, &dir.join(format!("{}{ND_SUFFIX}", p.id)))?;
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImagePair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// The pairs whose ids are listed, in the listed order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&ImagePair>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Data(format!("unknown image id {id}"))))
            .collect()
    }
}
