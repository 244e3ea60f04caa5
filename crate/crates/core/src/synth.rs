//! Deterministic ray-cast LiDAR simulator.
//!
//! The sensor sits at the origin; the ground is the plane
//! `z = ground_z - sensor_height` and boxes are given in the sensor frame.
//! Range is noise-free so every return lies exactly on the surface it hit;
//! only intensity carries a little per-pixel noise, seeded from
//! `(seed, row, col)` so any evaluation order gives the same image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou_bev, OrientedBox};
use crate::num::Real;
use crate::rimg::{spherical_to_cartesian, BeamTable, CartesianPoint, RangeImage, SphericalCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectClass {
    VehicleLike,
    PedLike,
}

impl ObjectClass {
    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::VehicleLike => "VEHICLE_LIKE",
            ObjectClass::PedLike => "PED_LIKE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject<T> {
    #[serde(rename = "box")]
    pub bbox: OrientedBox<T>,
    pub class: ObjectClass,
}

/// Per-surface intensity constants plus a uniform noise amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel<T> {
    pub vehicle: T,
    pub pedestrian: T,
    pub ground: T,
    pub noise: T,
}

impl<T: Real> Default for IntensityModel<T> {
    fn default() -> Self {
        Self {
            vehicle: T::lit(0.6),
            pedestrian: T::lit(0.4),
            ground: T::lit(0.15),
            noise: T::lit(0.05),
        }
    }
}

/// 32 beams from +2° down to −24°, spaced more finely near the top where the
/// horizon is.
pub fn default_beam_table<T: Real>() -> BeamTable<T> {
    let rows = 32;
    let (top, bottom) = (2.0f64.to_radians(), (-24.0f64).to_radians());
    let inc = (0..rows)
        .map(|i| {
            let t = i as f64 / (rows - 1) as f64;
            T::lit(top + (bottom - top) * t.powf(1.5))
        })
        .collect();
    BeamTable::new(inc).expect("default beam table is strictly decreasing")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct SceneSpec<T> {
    pub seed: u64,
    pub objects: Vec<SceneObject<T>>,
    pub ground_z: T,
    pub sensor_height: T,
    pub beams: BeamTable<T>,
    pub width: usize,
    pub intensity: IntensityModel<T>,
    /// Returns beyond this range are dropped.
    pub max_range: T,
}

impl<T: Real> SceneSpec<T> {
    pub fn new(seed: u64, objects: Vec<SceneObject<T>>) -> Self {
        Self {
            seed,
            objects,
            ground_z: T::zero(),
            sensor_height: T::lit(2.0),
            beams: default_beam_table(),
            width: 512,
            intensity: IntensityModel::default(),
            max_range: T::lit(200.0),
        }
    }

    /// Height of the ground plane in the sensor frame.
    pub fn ground_plane_z(&self) -> T {
        self.ground_z - self.sensor_height
    }

    pub fn boxes(&self) -> Vec<OrientedBox<T>> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::contract("scene width must be positive"));
        }
        if !(self.max_range > T::zero()) {
            return Err(Error::contract("max_range must be positive"));
        }
        let floor = self.ground_plane_z() - T::lit(1e-6);
        for (k, o) in self.objects.iter().enumerate() {
            if o.bbox.bottom() < floor {
                return Err(Error::contract(format!("box {k} extends below the ground")));
            }
        }
        Ok(())
    }
}

/// Smallest `t ≥ 0` where the ray `origin + t·dir` meets the box, or `None`.
/// From inside the box this is the exit point.
pub fn slab_intersect<T: Real>(
    origin: &CartesianPoint<T>,
    dir: &CartesianPoint<T>,
    b: &OrientedBox<T>,
) -> Option<T> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let o = [o.x, o.y, o.z];
    let half = T::lit(0.5);
    let ext = [b.length * half, b.width * half, b.height * half];
    let mut t0 = T::neg_infinity();
    let mut t1 = T::infinity();
    for k in 0..3 {
        if d[k] == T::zero() {
            if o[k].abs() > ext[k] {
                return None;
            }
            continue;
        }
        let a = (-ext[k] - o[k]) / d[k];
        let bb = (ext[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    if t1 < t0 || t1 < T::zero() {
        return None;
    }
    Some(if t0 >= T::zero() { t0 } else { t1 })
}

/// Distance along a unit ray from the origin to the horizontal plane `z = plane_z`.
pub fn ground_intersect<T: Real>(dir: &CartesianPoint<T>, plane_z: T) -> Option<T> {
    if dir.z == T::zero() {
        return None;
    }
    let t = plane_z / dir.z;
    (t > T::zero()).then_some(t)
}

fn pixel_seed(seed: u64, row: usize, col: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed
        ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (col as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pixel_noise<T: Real>(seed: u64, row: usize, col: usize, amplitude: T) -> T {
    if amplitude == T::zero() {
        return T::zero();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed, row, col));
    let u: f64 = rng.gen_range(-1.0..=1.0);
    amplitude * T::lit(u)
}

/// Renders the scene. Each pixel casts one ray along its (beam, column)
/// direction and records the nearest hit among all boxes and the ground.
pub fn raycast<T: Real>(spec: &SceneSpec<T>) -> Result<(RangeImage<T>, Vec<OrientedBox<T>>)> {
    spec.validate()?;
    let mut img = RangeImage::empty(spec.beams.clone(), spec.width)?;
    let origin = CartesianPoint::new(T::zero(), T::zero(), T::zero());
    let plane = spec.ground_plane_z();
    for row in 0..spec.beams.len() {
        for col in 0..spec.width {
            let dir = spherical_to_cartesian(SphericalCoord {
                range: T::one(),
                azimuth: img.column_azimuth(col),
                inclination: spec.beams.get(row),
            });
            let mut best: Option<(T, T)> = ground_intersect(&dir, plane).map(|t| (t, spec.intensity.ground));
            for o in &spec.objects {
                if let Some(t) = slab_intersect(&origin, &dir, &o.bbox) {
                    if t > T::zero() && best.map_or(true, |(bt, _)| t < bt) {
                        let base = match o.class {
                            ObjectClass::VehicleLike => spec.intensity.vehicle,
                            ObjectClass::PedLike => spec.intensity.pedestrian,
                        };
                        best = Some((t, base));
                    }
                }
            }
            if let Some((t, base)) = best {
                if t <= spec.max_range {
                    let intensity = base + pixel_noise(spec.seed, row, col, spec.intensity.noise);
                    img.set_return(row, col, t, intensity, T::zero());
                }
            }
        }
    }
    Ok((img, spec.boxes()))
}

/// How headings are drawn for random objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeadingMode {
    Uniform,
    /// Heading along the line of sight from the sensor, jittered uniformly
    /// by up to `jitter_rad` either way.
    Radial { jitter_rad: f64 },
}

/// Size ranges and evaluation threshold for one object class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: ObjectClass,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub iou_threshold: f64,
    pub heading: HeadingMode,
}

impl ClassProfile {
    pub fn vehicle_like() -> Self {
        Self {
            class: ObjectClass::VehicleLike,
            length: (3.8, 5.0),
            width: (1.7, 2.1),
            height: (1.4, 1.8),
            iou_threshold: 0.7,
            heading: HeadingMode::Radial {
                jitter_rad: 15f64.to_radians(),
            },
        }
    }

    pub fn ped_like() -> Self {
        Self {
            class: ObjectClass::PedLike,
            length: (0.5, 0.9),
            width: (0.5, 0.9),
            height: (1.5, 1.9),
            iou_threshold: 0.5,
            heading: HeadingMode::Uniform,
        }
    }
}

/// Recipe for random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProfile {
    pub class: ClassProfile,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Horizontal distance range of object centers.
    pub range_m: (f64, f64),
    pub width: usize,
    /// Objects that end up with fewer visible returns are re-drawn.
    pub min_points: usize,
}

impl SceneProfile {
    pub fn vehicle_like() -> Self {
        Self {
            class: ClassProfile::vehicle_like(),
            min_objects: 3,
            max_objects: 6,
            range_m: (8.0, 60.0),
            width: 256,
            min_points: 4,
        }
    }

    pub fn ped_like() -> Self {
        Self {
            class: ClassProfile::ped_like(),
            min_objects: 4,
            max_objects: 10,
            range_m: (5.0, 35.0),
            width: 512,
            min_points: 3,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Counts the returns of `img` that land on each box.
pub fn points_per_box<T: Real>(img: &RangeImage<T>, boxes: &[OrientedBox<T>]) -> Vec<usize> {
    let tol = T::lit(1e-6);
    let mut counts = vec![0; boxes.len()];
    for (r, c) in img.occupied() {
        let p = img.point(r, c);
        for (k, b) in boxes.iter().enumerate() {
            let l = b.to_local(&p);
            let half = T::lit(0.5);
            if l.x.abs() <= b.length * half + tol
                && l.y.abs() <= b.width * half + tol
                && l.z.abs() <= b.height * half + tol
            {
                counts[k] += 1;
            }
        }
    }
    counts
}

const MAX_DRAWS: usize = 200;

/// Draws a random scene: objects resting on the ground, non-overlapping in
/// bird's-eye view, each with at least `min_points` visible returns.
pub fn random_scene(profile: &SceneProfile, seed: u64) -> Result<SceneSpec<f64>> {
    let c = &profile.class;
    if profile.min_objects > profile.max_objects || profile.range_m.0 > profile.range_m.1 {
        return Err(Error::contract("scene profile ranges are inverted"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(profile.min_objects..=profile.max_objects);
    let mut spec = SceneSpec::new(seed, Vec::new());
    spec.width = profile.width;
    let floor = spec.ground_plane_z();
    let mut draws = 0;
    while spec.objects.len() < target {
        draws += 1;
        if draws > MAX_DRAWS * target.max(1) {
            return Err(Error::contract("could not place the requested objects"));
        }
        let (l, w, h) = (draw(&mut rng, c.length), draw(&mut rng, c.width), draw(&mut rng, c.height));
        let dist = draw(&mut rng, profile.range_m);
        let az: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let yaw = match c.heading {
            HeadingMode::Uniform => rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            HeadingMode::Radial { jitter_rad } => az + jitter_rad * rng.gen_range(-1.0..=1.0),
        };
        let b = OrientedBox::new(
            [dist * az.cos(), dist * az.sin(), floor + h / 2.0],
            [l, w, h],
            yaw,
        )?;
        let padded = OrientedBox { length: l + 1.0, width: w + 1.0, ..b };
        if spec.objects.iter().any(|o| iou_bev(&o.bbox, &padded) > 0.0) {
            continue;
        }
        spec.objects.push(SceneObject { bbox: b, class: c.class });
        let (img, boxes) = raycast(&spec)?;
        if points_per_box(&img, &boxes).iter().any(|&n| n < profile.min_points) {
            spec.objects.pop();
        }
    }
    Ok(spec)
}
