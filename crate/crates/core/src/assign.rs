//! Range-conditioned pyramid assignment and per-pixel foreground labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{point_in_box, OrientedBox};
use crate::num::Real;
use crate::rimg::RangeImage;

/// Range intervals that route boxes to pyramid layers. Boundaries are
/// left-inclusive and anything past the last boundary lands on the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcpConfig {
    pub boundaries_m: Vec<f64>,
    pub strides: Vec<usize>,
}

impl Default for RcpConfig {
    fn default() -> Self {
        Self {
            boundaries_m: vec![15.0, 30.0],
            strides: vec![1, 2, 4],
        }
    }
}

impl RcpConfig {
    pub fn new(boundaries_m: Vec<f64>, strides: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            boundaries_m,
            strides,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries_m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("RCP boundaries must be strictly increasing"));
        }
        if self.strides.len() != self.boundaries_m.len() + 1 {
            return Err(Error::contract("RCP needs one more stride than boundaries"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.strides.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelLabel {
    pub is_foreground: bool,
    pub gt_index: Option<usize>,
    pub layer: usize,
}

/// Pyramid layer for a box, chosen by the 3D range of its center.
pub fn assign_layer<T: Real>(b: &OrientedBox<T>, cfg: &RcpConfig) -> usize {
    let r = b.center_range().to_f64_lossy();
    cfg.boundaries_m.iter().take_while(|&&edge| r >= edge).count()
}

/// Labels every pixel of `img` (row-major). A non-empty pixel is foreground
/// iff its point lies in some box; among several containing boxes the one
/// with the nearest center owns it (first in list order on exact ties).
pub fn label_pixels<T: Real>(
    img: &RangeImage<T>,
    boxes: &[OrientedBox<T>],
    cfg: &RcpConfig,
) -> Vec<PixelLabel> {
    let layers: Vec<usize> = boxes.iter().map(|b| assign_layer(b, cfg)).collect();
    let mut out = vec![PixelLabel::default(); img.height() * img.width()];
    for (r, c) in img.occupied() {
        let p = img.point(r, c);
        let mut owner: Option<(usize, T)> = None;
        for (k, b) in boxes.iter().enumerate() {
            if !point_in_box(&p, b) {
                continue;
            }
            let d = p.distance(&b.center());
            if owner.map_or(true, |(_, best)| d < best) {
                owner = Some((k, d));
            }
        }
        if let Some((k, _)) = owner {
            out[r * img.width() + c] = PixelLabel {
                is_foreground: true,
                gt_index: Some(k),
                layer: layers[k],
            };
        }
    }
    out
}
