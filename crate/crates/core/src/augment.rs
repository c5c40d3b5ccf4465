//! CutMix box sampling, mask construction, pixel and label mixing, plus the
//! dihedral flip/rotate transforms.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A sampled CutMix region.
///
/// The continuous center is drawn uniformly over the image; pre-clip extents
/// satisfy `extent_w = W*sqrt(1-lambda)`, `extent_h = H*sqrt(1-lambda)`
/// (so `extent_w*extent_h/(W*H) = 1-lambda`, the cropped-area ratio).
/// Continuous bounds floor to integer pixels and clip to the image, and
/// `lambda_used` is recomputed from the realized area, so the label mix
/// always matches the actual pixel ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutMixBox {
    pub center_x: f64,
    pub center_y: f64,
    pub extent_w: f64,
    pub extent_h: f64,
    /// Clipped pixel bounds, half-open: columns `x0..x1`, rows `y0..y1`.
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    /// `1 - clipped_area / (W*H)`.
    pub lambda_used: f64,
}

impl CutMixBox {
    /// Build the box for a given center and mix coefficient.
    pub fn at(center_x: f64, center_y: f64, width: usize, height: usize, lambda: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig("cutmix: image dims must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!("cutmix: lambda {lambda} outside [0, 1]")));
        }
        let extent_w = width as f64 * (1.0 - lambda).sqrt();
        let extent_h = height as f64 * (1.0 - lambda).sqrt();
        let clip = |v: f64, hi: usize| -> usize {
            let f = v.floor();
            if f < 0.0 {
                0
            } else if f > hi as f64 {
                hi
            } else {
                f as usize
            }
        };
        let x0 = clip(center_x - extent_w / 2.0, width);
        let x1 = clip(center_x + extent_w / 2.0, width).max(x0);
        let y0 = clip(center_y - extent_h / 2.0, height);
        let y1 = clip(center_y + extent_h / 2.0, height).max(y0);
        let area = (x1 - x0) * (y1 - y0);
        let lambda_used = 1.0 - area as f64 / (width * height) as f64;
        Ok(CutMixBox { center_x, center_y, extent_w, extent_h, x0, x1, y0, y1, lambda_used })
    }

    /// Number of pixels inside the clipped box.
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Binary mask over `height x width`: 0 inside the box, 1 outside.
    pub fn mask(&self, width: usize, height: usize) -> Vec<u8> {
        let mut m = vec![1u8; width * height];
        for y in self.y0..self.y1 {
            for x in self.x0..self.x1 {
                m[y * width + x] = 0;
            }
        }
        m
    }
}

/// Sample a CutMix box with a uniformly random center.
pub fn sample_cutmix_box<R: Rng>(
    width: usize,
    height: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<CutMixBox> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("cutmix: image dims must be >= 1".into()));
    }
    let cx = rng.random_range(0.0..width as f64);
    let cy = rng.random_range(0.0..height as f64);
    CutMixBox::at(cx, cy, width, height, lambda)
}

/// Mix two images and labels through a given box. Inside the box the pixels
/// come from `image_b`, outside from `image_a`; all channels share the mask.
/// The mixed label is `lambda_used*y_a + (1 - lambda_used)*y_b`.
pub fn apply_cutmix_box<S: Scalar>(
    image_a: &Tensor<S>,
    image_b: &Tensor<S>,
    label_a: &[S],
    label_b: &[S],
    cut: &CutMixBox,
) -> Result<(Tensor<S>, Vec<S>, f64)> {
    if image_a.shape() != image_b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cutmix",
            detail: format!("images differ: {:?} vs {:?}", image_a.shape(), image_b.shape()),
        });
    }
    if image_a.rank() != 3 {
        return Err(Error::UnsupportedOp {
            op: "cutmix",
            detail: format!("expected (c,h,w) images, got {:?}", image_a.shape()),
        });
    }
    if label_a.len() != label_b.len() {
        return Err(Error::ShapeMismatch {
            op: "cutmix",
            detail: format!("labels differ: {} vs {}", label_a.len(), label_b.len()),
        });
    }
    let (c, h, w) = (image_a.shape()[0], image_a.shape()[1], image_a.shape()[2]);
    let mut data = image_a.data().to_vec();
    for ci in 0..c {
        for y in cut.y0..cut.y1 {
            let base = (ci * h + y) * w;
            data[base + cut.x0..base + cut.x1]
                .copy_from_slice(&image_b.data()[base + cut.x0..base + cut.x1]);
        }
    }
    let lam = S::from_f64_lossy(cut.lambda_used);
    // The complement weight is recomputed as 1 - lam so the mixed one-hot
    // components always sum to exactly 1.
    let com = S::one() - lam;
    let label: Vec<S> =
        label_a.iter().zip(label_b).map(|(&a, &b)| lam * a + com * b).collect();
    Ok((Tensor::from_vec(vec![c, h, w], data)?, label, cut.lambda_used))
}

/// Full CutMix step: draw `lambda ~ Beta(alpha, alpha)`, sample a box over
/// the image, and mix.
pub fn apply_cutmix<S: Scalar, R: Rng>(
    image_a: &Tensor<S>,
    image_b: &Tensor<S>,
    label_a: &[S],
    label_b: &[S],
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<S>, Vec<S>, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("cutmix: alpha must be > 0, got {alpha}")));
    }
    if image_a.rank() != 3 {
        return Err(Error::UnsupportedOp {
            op: "cutmix",
            detail: format!("expected (c,h,w) images, got {:?}", image_a.shape()),
        });
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidConfig(format!("cutmix: bad beta parameter: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let (h, w) = (image_a.shape()[1], image_a.shape()[2]);
    let cut = sample_cutmix_box(w, h, lambda, rng)?;
    apply_cutmix_box(image_a, image_b, label_a, label_b, &cut)
}

/// Exact pixel permutations: flips and quarter-turn rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipRotate {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl FlipRotate {
    pub const ALL: [FlipRotate; 5] = [
        FlipRotate::HFlip,
        FlipRotate::VFlip,
        FlipRotate::Rot90,
        FlipRotate::Rot180,
        FlipRotate::Rot270,
    ];
}

/// Apply a flip or rotation to a `(c, h, w)` image. Rotations require a
/// square image. Applying an op and then its inverse is the identity.
pub fn flip_rotate<S: Scalar>(image: &Tensor<S>, op: FlipRotate) -> Result<Tensor<S>> {
    if image.rank() != 3 {
        return Err(Error::UnsupportedOp {
            op: "flip_rotate",
            detail: format!("expected (c,h,w), got {:?}", image.shape()),
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if matches!(op, FlipRotate::Rot90 | FlipRotate::Rot180 | FlipRotate::Rot270) && h != w {
        return Err(Error::ShapeMismatch {
            op: "flip_rotate",
            detail: format!("rotation requires a square image, got {h}x{w}"),
        });
    }
    let src = image.data();
    let mut out = vec![S::zero(); src.len()];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // counterclockwise quarter turns
                let v = match op {
                    FlipRotate::HFlip => plane[y * w + (w - 1 - x)],
                    FlipRotate::VFlip => plane[(h - 1 - y) * w + x],
                    FlipRotate::Rot90 => plane[x * w + (w - 1 - y)],
                    FlipRotate::Rot180 => plane[(h - 1 - y) * w + (w - 1 - x)],
                    FlipRotate::Rot270 => plane[(h - 1 - x) * w + y],
                };
                dst[y * w + x] = v;
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}
