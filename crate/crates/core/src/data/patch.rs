//! Overlapping square patch grids.

use super::CtImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch origins along one axis of length `extent`.
///
/// The count is `ceil(extent / (patch + 2))`, anchors step by
/// `floor((extent - patch) / (count - 1))` and the last anchor sits at
/// `extent - patch`. A 512-pixel axis with 55-pixel patches gives
/// 0, 57, ..., 399, 457.
pub fn axis_anchors(extent: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || extent < patch {
        return Err(Error::Data(format!("axis of {extent} pixels is smaller than a {patch}-pixel patch")));
    }
    let count = extent.div_ceil(patch + 2);
    if count == 1 {
        return Ok(vec![0]);
    }
    let stride = (extent - patch) / (count - 1);
    let mut anchors: Vec<usize> = (0..count - 1).map(|i| i * stride).collect();
    anchors.push(extent - patch);
    Ok(anchors)
}

/// Patch layout for one image size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        Ok(Self {
            patch,
            height,
            width,
            rows: axis_anchors(height, patch)?,
            cols: axis_anchors(width, patch)?,
        })
    }

    pub fn for_image(img: &CtImage, patch: usize) -> Result<Self> {
        Self::new(img.height(), img.width(), patch)
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch origins `(row, col)` in row-major grid order.
    pub fn anchors(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.height * self.width];
        for (r, c) in self.anchors() {
            for y in r..r + self.patch {
                for v in &mut cov[y * self.width + c..y * self.width + c + self.patch] {
                    *v += 1;
                }
            }
        }
        cov
    }

    fn check_image(&self, t: &Tensor<f32>) -> Result<()> {
        match t.shape() {
            &[1, 1, h, w] | &[h, w] if (h, w) == (self.height, self.width) => Ok(()),
            s => Err(Error::Shape(format!(
                "grid for {}x{} got image {s:?}",
                self.height, self.width
            ))),
        }
    }

    /// Cuts an `[H, W]` or `[1, 1, H, W]` image into `[n, 1, P, P]`.
    pub fn patchify(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(img)?;
        let p = self.patch;
        let d = img.data();
        let mut out = Vec::with_capacity(self.len() * p * p);
        for (r, c) in self.anchors() {
            for y in r..r + p {
                out.extend_from_slice(&d[y * self.width + c..y * self.width + c + p]);
            }
        }
        Tensor::new(vec![self.len(), 1, p, p], out)
    }

    /// Stitches `[n, 1, P, P]` patches back into a `[1, 1, H, W]` image,
    /// averaging where patches overlap. Pixels no patch covers are copied
    /// from `uncovered`, an image of the same size.
    pub fn depatchify(&self, patches: &Tensor<f32>, uncovered: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = self.patch;
        if patches.shape() != [self.len(), 1, p, p] {
            return Err(Error::Shape(format!(
                "expected {} patches of {p}x{p}, got {:?}",
                self.len(),
                patches.shape()
            )));
        }
        self.check_image(uncovered)?;
        let (h, w) = (self.height, self.width);
        let mut sum = vec![0.0f64; h * w];
        let mut count = vec![0u32; h * w];
        for (i, (r, c)) in self.anchors().enumerate() {
            let src = &patches.data()[i * p * p..(i + 1) * p * p];
            for y in 0..p {
                let row = (r + y) * w + c;
                for x in 0..p {
                    sum[row + x] += src[y * p + x] as f64;
                    count[row + x] += 1;
                }
            }
        }
        let out = sum
            .iter()
            .zip(&count)
            .zip(uncovered.data())
            .map(|((&s, &n), &u)| if n == 0 { u } else { (s / n as f64) as f32 })
            .collect();
        Tensor::new(vec![1, 1, h, w], out)
    }
}
