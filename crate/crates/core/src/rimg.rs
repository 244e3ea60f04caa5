//! Range-image codec.
//!
//! A range image is an `H x W` grid where row `i` shares the beam inclination
//! `beams[i]` and column `j` shares the azimuth `-π + (j + 0.5)·2π/W`. Every
//! pixel stores eight planes in a fixed order (see [`Channel`]). A pixel is
//! empty iff its range is `<= 0`, in which case all of its planes are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{normalize_angle, Real};

/// Range, azimuth and inclination of a return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord<T> {
    pub range: T,
    pub azimuth: T,
    pub inclination: T,
}

/// Sensor-frame Cartesian point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartesianPoint<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> CartesianPoint<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Self) -> T {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

pub fn spherical_to_cartesian<T: Real>(s: SphericalCoord<T>) -> CartesianPoint<T> {
    let (sin_inc, cos_inc) = s.inclination.sin_cos();
    let (sin_az, cos_az) = s.azimuth.sin_cos();
    CartesianPoint {
        x: s.range * cos_inc * cos_az,
        y: s.range * cos_inc * sin_az,
        z: s.range * sin_inc,
    }
}

pub fn cartesian_to_spherical<T: Real>(p: CartesianPoint<T>) -> Result<SphericalCoord<T>> {
    let range = p.norm();
    if range <= T::zero() || !range.is_finite() {
        return Err(Error::DegenerateInput("zero-norm point has no direction"));
    }
    let ratio = (p.z / range).max(-T::one()).min(T::one());
    Ok(SphericalCoord {
        range,
        azimuth: normalize_angle(p.y.atan2(p.x)),
        inclination: ratio.asin(),
    })
}

/// Per-row beam inclinations, strictly decreasing from the top row down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct BeamTable<T> {
    inclinations: Vec<T>,
}

impl<T: Real> TryFrom<Vec<T>> for BeamTable<T> {
    type Error = Error;

    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T> From<BeamTable<T>> for Vec<T> {
    fn from(b: BeamTable<T>) -> Self {
        b.inclinations
    }
}

impl<T: Real> BeamTable<T> {
    pub fn new(inclinations: Vec<T>) -> Result<Self> {
        if inclinations.is_empty() {
            return Err(Error::contract("beam table must have at least one row"));
        }
        if inclinations.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("beam inclinations must be finite"));
        }
        if inclinations.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::contract(
                "beam inclinations must be strictly decreasing top to bottom",
            ));
        }
        Ok(Self { inclinations })
    }

    /// Evenly spaced beams from `top` to `bottom` inclusive.
    pub fn uniform(top: T, bottom: T, rows: usize) -> Result<Self> {
        if rows == 1 {
            return Self::new(vec![top]);
        }
        let step = (top - bottom) / T::lit((rows - 1) as f64);
        Self::new((0..rows).map(|i| top - step * T::lit(i as f64)).collect())
    }

    pub fn len(&self) -> usize {
        self.inclinations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inclinations.is_empty()
    }

    pub fn inclinations(&self) -> &[T] {
        &self.inclinations
    }

    pub fn get(&self, row: usize) -> T {
        self.inclinations[row]
    }

    /// Row whose inclination is nearest to `inclination`; ties go to the lower index.
    pub fn nearest_row(&self, inclination: T) -> usize {
        let mut best = 0;
        let mut best_d = (self.inclinations[0] - inclination).abs();
        for (i, &b) in self.inclinations.iter().enumerate().skip(1) {
            let d = (b - inclination).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// The eight planes of a range image, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Channel {
    Range = 0,
    Intensity = 1,
    Elongation = 2,
    X = 3,
    Y = 4,
    Z = 5,
    Azimuth = 6,
    Inclination = 7,
}

impl Channel {
    pub const COUNT: usize = 8;
    pub const ALL: [Channel; 8] = [
        Channel::Range,
        Channel::Intensity,
        Channel::Elongation,
        Channel::X,
        Channel::Y,
        Channel::Z,
        Channel::Azimuth,
        Channel::Inclination,
    ];
}

/// Azimuth of the center of column `col` in an image `width` columns wide.
pub fn column_azimuth<T: Real>(col: usize, width: usize) -> T {
    -T::PI() + (T::lit(col as f64) + T::lit(0.5)) * T::TAU() / T::lit(width as f64)
}

/// Column whose center azimuth is circularly nearest to `azimuth`; ties go to the lower index.
pub fn nearest_column<T: Real>(azimuth: T, width: usize) -> usize {
    let a = normalize_angle(azimuth);
    let u = (a + T::PI()) * T::lit(width as f64) / T::TAU();
    // Column j owns (j, j+1] in `u` units; u on an integer is a tie between
    // j-1 and j, the seam at u = 0 or u = W is a tie between W-1 and 0.
    if u <= T::zero() || u >= T::lit(width as f64) {
        return 0;
    }
    let j = u.ceil().to_usize().unwrap_or(1).saturating_sub(1);
    j.min(width - 1)
}

/// A LiDAR return with its auxiliary channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LidarPoint<T> {
    pub position: CartesianPoint<T>,
    pub intensity: T,
    pub elongation: T,
}

impl<T: Real> LidarPoint<T> {
    pub fn new(position: CartesianPoint<T>, intensity: T, elongation: T) -> Self {
        Self {
            position,
            intensity,
            elongation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage<T> {
    height: usize,
    width: usize,
    beams: BeamTable<T>,
    planes: Vec<T>,
}

impl<T: Real> RangeImage<T> {
    /// All-empty image with one row per beam.
    pub fn empty(beams: BeamTable<T>, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::contract("range image width must be positive"));
        }
        let height = beams.len();
        Ok(Self {
            height,
            width,
            beams,
            planes: vec![T::zero(); Channel::COUNT * height * width],
        })
    }

    /// Builds an image from raw planes and checks every invariant within `tol`.
    pub fn from_planes(beams: BeamTable<T>, width: usize, planes: Vec<T>, tol: T) -> Result<Self> {
        let height = beams.len();
        if width == 0 || planes.len() != Channel::COUNT * height * width {
            return Err(Error::shape(
                "RangeImage::from_planes",
                &[Channel::COUNT, height, width],
                &[planes.len()],
            ));
        }
        let img = Self {
            height,
            width,
            beams,
            planes,
        };
        img.check_invariants(tol)?;
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn beams(&self) -> &BeamTable<T> {
        &self.beams
    }

    pub fn planes(&self) -> &[T] {
        &self.planes
    }

    pub fn plane(&self, ch: Channel) -> &[T] {
        let n = self.height * self.width;
        &self.planes[ch as usize * n..(ch as usize + 1) * n]
    }

    #[inline]
    pub fn get(&self, ch: Channel, row: usize, col: usize) -> T {
        self.planes[(ch as usize * self.height + row) * self.width + col]
    }

    #[inline]
    fn set(&mut self, ch: Channel, row: usize, col: usize, v: T) {
        self.planes[(ch as usize * self.height + row) * self.width + col] = v;
    }

    #[inline]
    pub fn is_empty_pixel(&self, row: usize, col: usize) -> bool {
        self.get(Channel::Range, row, col) <= T::zero()
    }

    pub fn range(&self, row: usize, col: usize) -> T {
        self.get(Channel::Range, row, col)
    }

    pub fn point(&self, row: usize, col: usize) -> CartesianPoint<T> {
        CartesianPoint {
            x: self.get(Channel::X, row, col),
            y: self.get(Channel::Y, row, col),
            z: self.get(Channel::Z, row, col),
        }
    }

    /// All eight channel values of one pixel, in [`Channel`] order.
    pub fn pixel(&self, row: usize, col: usize) -> [T; 8] {
        let mut out = [T::zero(); 8];
        for ch in Channel::ALL {
            out[ch as usize] = self.get(ch, row, col);
        }
        out
    }

    pub fn column_azimuth(&self, col: usize) -> T {
        column_azimuth(col, self.width)
    }

    /// Writes a return at `(row, col)`; the geometric channels follow from the
    /// pixel's direction. A non-positive range clears the pixel.
    pub fn set_return(&mut self, row: usize, col: usize, range: T, intensity: T, elongation: T) {
        if range <= T::zero() {
            self.clear_pixel(row, col);
            return;
        }
        let azimuth = self.column_azimuth(col);
        let inclination = self.beams.get(row);
        let p = spherical_to_cartesian(SphericalCoord {
            range,
            azimuth,
            inclination,
        });
        self.set(Channel::Range, row, col, range);
        self.set(Channel::Intensity, row, col, intensity);
        self.set(Channel::Elongation, row, col, elongation);
        self.set(Channel::X, row, col, p.x);
        self.set(Channel::Y, row, col, p.y);
        self.set(Channel::Z, row, col, p.z);
        self.set(Channel::Azimuth, row, col, azimuth);
        self.set(Channel::Inclination, row, col, inclination);
    }

    pub fn clear_pixel(&mut self, row: usize, col: usize) {
        for ch in Channel::ALL {
            self.set(ch, row, col, T::zero());
        }
    }

    pub fn non_empty_count(&self) -> usize {
        self.plane(Channel::Range)
            .iter()
            .filter(|&&r| r > T::zero())
            .count()
    }

    /// Iterates `(row, col)` of non-empty pixels in row-major order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.plane(Channel::Range)
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > T::zero())
            .map(move |(k, _)| (k / w, k % w))
    }

    /// Verifies the image invariants: empty pixels fully zeroed, column
    /// azimuths, row inclinations, and Cartesian channels consistent with
    /// the spherical ones within `tol`.
    pub fn check_invariants(&self, tol: T) -> Result<()> {
        if self.beams.len() != self.height {
            return Err(Error::contract("beam table length differs from image height"));
        }
        for row in 0..self.height {
            for col in 0..self.width {
                let px = self.pixel(row, col);
                if px.iter().any(|v| !v.is_finite()) {
                    return Err(Error::contract(format!("non-finite value at ({row}, {col})")));
                }
                let range = px[Channel::Range as usize];
                if range <= T::zero() {
                    if px.iter().any(|v| *v != T::zero()) {
                        return Err(Error::contract(format!(
                            "empty pixel ({row}, {col}) has non-zero channels"
                        )));
                    }
                    continue;
                }
                let az = px[Channel::Azimuth as usize];
                let inc = px[Channel::Inclination as usize];
                if (az - self.column_azimuth(col)).abs() > tol {
                    return Err(Error::contract(format!("azimuth mismatch at ({row}, {col})")));
                }
                if inc != self.beams.get(row) {
                    return Err(Error::contract(format!(
                        "inclination mismatch at ({row}, {col})"
                    )));
                }
                let p = spherical_to_cartesian(SphericalCoord {
                    range,
                    azimuth: az,
                    inclination: inc,
                });
                let dx = (p.x - px[Channel::X as usize]).abs();
                let dy = (p.y - px[Channel::Y as usize]).abs();
                let dz = (p.z - px[Channel::Z as usize]).abs();
                if dx > tol || dy > tol || dz > tol {
                    return Err(Error::contract(format!(
                        "Cartesian channels inconsistent at ({row}, {col})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rasterizes points into a range image.
///
/// Each point goes to the nearest column center and nearest beam (ties to the
/// lower index). On collision the closer return wins; equal ranges keep the
/// earlier point. Zero-range points carry no direction and are skipped.
pub fn project<T: Real>(
    points: &[LidarPoint<T>],
    beams: &BeamTable<T>,
    width: usize,
) -> Result<RangeImage<T>> {
    let mut img = RangeImage::empty(beams.clone(), width)?;
    for p in points {
        if !p.position.is_finite() {
            return Err(Error::DegenerateInput("non-finite point"));
        }
        let Ok(s) = cartesian_to_spherical(p.position) else {
            continue;
        };
        let row = beams.nearest_row(s.inclination);
        let col = nearest_column(s.azimuth, width);
        let current = img.range(row, col);
        if current <= T::zero() || s.range < current {
            img.set_return(row, col, s.range, p.intensity, p.elongation);
        }
    }
    Ok(img)
}

/// One point per non-empty pixel, row-major.
pub fn decode<T: Real>(img: &RangeImage<T>) -> Vec<LidarPoint<T>> {
    img.occupied()
        .map(|(r, c)| LidarPoint {
            position: img.point(r, c),
            intensity: img.get(Channel::Intensity, r, c),
            elongation: img.get(Channel::Elongation, r, c),
        })
        .collect()
}
