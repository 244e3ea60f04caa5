//! Range-view augmentation: global rotation, global flip, and copy-paste
//! guarded by a range test.
//!
//! Every operation rewrites the azimuth-dependent channels from the new
//! column so the output keeps the range-image invariants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{point_in_box, OrientedBox};
use crate::num::Real;
use crate::rimg::{Channel, RangeImage};

/// Rotation angle that corresponds to a shift of `k` columns.
pub fn column_shift_angle<T: Real>(k: isize, width: usize) -> T {
    T::lit(k as f64) * T::TAU() / T::lit(width as f64)
}

fn shift_col(col: usize, k: isize, width: usize) -> usize {
    (col as isize + k).rem_euclid(width as isize) as usize
}

/// Global rotation about z as a cyclic column shift by `k`.
pub fn rotate<T: Real>(
    img: &RangeImage<T>,
    boxes: &[OrientedBox<T>],
    k: isize,
) -> (RangeImage<T>, Vec<OrientedBox<T>>) {
    let w = img.width();
    let mut out = RangeImage::empty(img.beams().clone(), w).expect("same geometry");
    for (r, c) in img.occupied() {
        out.set_return(
            r,
            shift_col(c, k, w),
            img.range(r, c),
            img.get(Channel::Intensity, r, c),
            img.get(Channel::Elongation, r, c),
        );
    }
    let angle = column_shift_angle(k, w);
    let boxes = boxes.iter().map(|b| b.rotated_about_z(angle)).collect();
    (out, boxes)
}

/// Which vertical plane to mirror across.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlipAxis {
    /// `y → −y`: column order reversed.
    #[default]
    XzPlane,
    /// `x → −x`: the x–z flip composed with a half-turn. Needs an even width.
    YzPlane,
}

/// Global flip. Mirroring across the x–z plane reverses the column order,
/// negates azimuth and y, and mirrors the boxes (`cy → −cy`, `yaw → −yaw`).
pub fn flip<T: Real>(
    img: &RangeImage<T>,
    boxes: &[OrientedBox<T>],
    axis: FlipAxis,
) -> Result<(RangeImage<T>, Vec<OrientedBox<T>>)> {
    let w = img.width();
    let mut out = RangeImage::empty(img.beams().clone(), w)?;
    for (r, c) in img.occupied() {
        out.set_return(
            r,
            w - 1 - c,
            img.range(r, c),
            img.get(Channel::Intensity, r, c),
            img.get(Channel::Elongation, r, c),
        );
    }
    let mirrored: Vec<OrientedBox<T>> = boxes
        .iter()
        .map(|b| OrientedBox {
            cy: -b.cy,
            yaw: crate::num::normalize_angle(-b.yaw),
            ..*b
        })
        .collect();
    match axis {
        FlipAxis::XzPlane => Ok((out, mirrored)),
        FlipAxis::YzPlane => {
            if w % 2 != 0 {
                return Err(Error::contract("x flip needs an even image width"));
            }
            Ok(rotate(&out, &mirrored, (w / 2) as isize))
        }
    }
}

/// One donor pixel: position and all eight channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DonorPixel<T> {
    pub row: usize,
    pub col: usize,
    pub channels: [T; 8],
}

impl<T: Real> DonorPixel<T> {
    pub fn range(&self) -> T {
        self.channels[Channel::Range as usize]
    }
}

/// An object cut from a donor image, to be pasted on its original rows at a
/// new azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct PasteCandidate<T> {
    pixels: Vec<DonorPixel<T>>,
    pub donor_box: OrientedBox<T>,
    pub azimuth_shift_cols: isize,
}

impl<T: Real> PasteCandidate<T> {
    pub fn new(
        pixels: Vec<DonorPixel<T>>,
        donor_box: OrientedBox<T>,
        azimuth_shift_cols: isize,
    ) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::contract("paste candidate has no pixels"));
        }
        if pixels.iter().any(|p| !(p.range() > T::zero())) {
            return Err(Error::contract("paste candidate contains empty pixels"));
        }
        Ok(Self {
            pixels,
            donor_box,
            azimuth_shift_cols,
        })
    }

    /// Cuts the returns of `img` that fall inside `donor_box`.
    pub fn extract(img: &RangeImage<T>, donor_box: OrientedBox<T>, azimuth_shift_cols: isize) -> Result<Self> {
        let pixels = img
            .occupied()
            .filter(|&(r, c)| point_in_box(&img.point(r, c), &donor_box))
            .map(|(r, c)| DonorPixel {
                row: r,
                col: c,
                channels: img.pixel(r, c),
            })
            .collect();
        Self::new(pixels, donor_box, azimuth_shift_cols)
    }

    pub fn pixels(&self) -> &[DonorPixel<T>] {
        &self.pixels
    }
}

/// Result of a copy-paste attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct PasteOutcome<T> {
    pub image: RangeImage<T>,
    pub boxes: Vec<OrientedBox<T>>,
    pub accepted: bool,
    pub passed: usize,
}

/// Share of donor pixels that must pass the range test for a paste to go through.
pub const PASTE_ACCEPT_FRACTION: f64 = 0.5;

/// Copy-paste with a range test. A shifted donor pixel passes when the
/// target pixel is empty or farther than the donor return. The paste is
/// accepted when at least half the donor pixels pass; then only the passing
/// pixels are written and the rotated donor box is appended.
pub fn copy_paste<T: Real>(
    target: &RangeImage<T>,
    target_boxes: &[OrientedBox<T>],
    cand: &PasteCandidate<T>,
) -> Result<PasteOutcome<T>> {
    let w = target.width();
    if cand.pixels.iter().any(|p| p.row >= target.height()) {
        return Err(Error::contract("donor rows exceed target height"));
    }
    let placed: Vec<(usize, usize, &DonorPixel<T>)> = cand
        .pixels
        .iter()
        .map(|p| (p.row, shift_col(p.col, cand.azimuth_shift_cols, w), p))
        .collect();
    let passes = |r: usize, c: usize, p: &DonorPixel<T>| {
        target.is_empty_pixel(r, c) || p.range() < target.range(r, c)
    };
    let passed = placed.iter().filter(|(r, c, p)| passes(*r, *c, p)).count();
    let accepted = passed as f64 >= PASTE_ACCEPT_FRACTION * placed.len() as f64;
    if !accepted {
        return Ok(PasteOutcome {
            image: target.clone(),
            boxes: target_boxes.to_vec(),
            accepted,
            passed,
        });
    }
    let mut image = target.clone();
    for (r, c, p) in &placed {
        if passes(*r, *c, p) {
            image.set_return(
                *r,
                *c,
                p.range(),
                p.channels[Channel::Intensity as usize],
                p.channels[Channel::Elongation as usize],
            );
        }
    }
    let mut boxes = target_boxes.to_vec();
    boxes.push(
        cand.donor_box
            .rotated_about_z(column_shift_angle(cand.azimuth_shift_cols, w)),
    );
    Ok(PasteOutcome {
        image,
        boxes,
        accepted,
        passed,
    })
}
