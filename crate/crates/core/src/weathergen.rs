//! Weather synthesis: depth-driven fog, procedural rain streaks, and the
//! dynamic patch masking applied to aligned triplets during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image};
use crate::toyscenes::AlignedTriplet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Small,
    Medium,
    Large,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Small, Intensity::Medium, Intensity::Large];

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Small => "small",
            Intensity::Medium => "medium",
            Intensity::Large => "large",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Intensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Ok(Intensity::Small),
            "medium" => Ok(Intensity::Medium),
            "large" => Ok(Intensity::Large),
            other => Err(Error::Input(format!(
                "unknown intensity level `{other}` (expected small, medium or large)"
            ))),
        }
    }
}

impl std::fmt::Display for Intensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    /// Attenuation coefficient per meter.
    pub beta_atm: f64,
    pub airlight: [f64; 3],
    pub level: Intensity,
}

impl FogParams {
    pub const DEFAULT_AIRLIGHT: [f64; 3] = [0.8, 0.8, 0.8];

    pub fn default_beta(level: Intensity) -> f64 {
        match level {
            Intensity::Small => 0.005,
            Intensity::Medium => 0.01,
            Intensity::Large => 0.02,
        }
    }

    pub fn for_level(level: Intensity) -> Self {
        Self {
            beta_atm: Self::default_beta(level),
            airlight: Self::DEFAULT_AIRLIGHT,
            level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_atm >= 0.0) || !self.beta_atm.is_finite() {
            return Err(Error::Input(format!("beta_atm must be >= 0, got {}", self.beta_atm)));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input(format!("airlight must lie in [0,1]^3, got {:?}", self.airlight)));
        }
        Ok(())
    }
}

/// Atmospheric scattering: `out = image * t + airlight * (1 - t)` with
/// transmittance `t = exp(-beta_atm * depth)`.
pub fn synth_fog(image: &Image, depth: &DepthMap, params: &FogParams) -> Result<Image> {
    params.validate()?;
    if image.width() != depth.width() || image.height() != depth.height() {
        return Err(Error::Shape(format!(
            "image {}x{} vs depth {}x{}",
            image.width(),
            image.height(),
            depth.width(),
            depth.height()
        )));
    }
    if image.channels() != 3 {
        return Err(Error::Shape(format!("fog expects RGB, got {} channels", image.channels())));
    }
    let plane = image.plane_len();
    let mut out = image.clone();
    let transmittance: Vec<f64> = depth
        .values()
        .iter()
        .map(|d| (-params.beta_atm * d).exp())
        .collect();
    for c in 0..3 {
        let a = params.airlight[c];
        for (v, t) in out.data_mut()[c * plane..(c + 1) * plane]
            .iter_mut()
            .zip(&transmittance)
        {
            if *t < 1.0 {
                *v = (*v * t + a * (1.0 - t)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainSpec {
    pub streak_count: usize,
    /// Inclusive ranges, in pixels.
    pub streak_length: (f64, f64),
    pub streak_width: (f64, f64),
    pub streak_intensity: (f64, f64),
    /// Streak tilt away from vertical, degrees.
    pub streak_tilt: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub zoom: (f64, f64),
    pub translation_px: (f64, f64),
    pub shear: (f64, f64),
    /// Erosion radius for small, medium and large rain.
    pub erosion_radius: [usize; 3],
    /// Screen-blend gain.
    pub gain: f64,
    pub rng_seed: u64,
}

impl Default for RainSpec {
    fn default() -> Self {
        Self {
            streak_count: 50,
            streak_length: (6.0, 20.0),
            streak_width: (2.0, 5.0),
            streak_intensity: (0.6, 1.0),
            streak_tilt: (-10.0, 10.0),
            rotation_deg: (-15.0, 15.0),
            zoom: (0.8, 1.25),
            translation_px: (-8.0, 8.0),
            shear: (-0.2, 0.2),
            erosion_radius: [2, 1, 0],
            gain: 0.8,
            rng_seed: 0,
        }
    }
}

impl RainSpec {
    /// All affine ranges collapsed to the identity transform.
    pub fn identity_transform(mut self) -> Self {
        self.rotation_deg = (0.0, 0.0);
        self.zoom = (1.0, 1.0);
        self.translation_px = (0.0, 0.0);
        self.shear = (0.0, 0.0);
        self
    }

    pub fn erosion_for(&self, level: Intensity) -> usize {
        self.erosion_radius[level.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("streak_length", self.streak_length),
            ("streak_width", self.streak_width),
            ("streak_intensity", self.streak_intensity),
            ("streak_tilt", self.streak_tilt),
            ("rotation_deg", self.rotation_deg),
            ("zoom", self.zoom),
            ("translation_px", self.translation_px),
            ("shear", self.shear),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::Input(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.zoom.0 <= 0.0 {
            return Err(Error::Input("zoom must be positive".into()));
        }
        let [s, m, l] = self.erosion_radius;
        if !(l < m && m < s) {
            return Err(Error::Input(format!(
                "erosion radii must shrink from small to large rain, got {:?}",
                self.erosion_radius
            )));
        }
        Ok(())
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Draws `streak_count` soft-edged line segments into a grayscale map.
pub fn gen_rain_map(spec: &RainSpec, width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let mut map = Image::gray(width, height);
    for _ in 0..spec.streak_count {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let length = sample(rng, spec.streak_length);
        let half_width = 0.5 * sample(rng, spec.streak_width);
        let intensity = sample(rng, spec.streak_intensity);
        let tilt = sample(rng, spec.streak_tilt).to_radians();
        let (dx, dy) = (tilt.sin() * 0.5 * length, tilt.cos() * 0.5 * length);
        let (x0, y0, x1, y1) = (cx - dx, cy - dy, cx + dx, cy + dy);
        let reach = half_width + 1.0;
        let xs = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let xe = ((x0.max(x1) + reach).ceil() as usize).min(width);
        let ys = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let ye = ((y0.max(y1) + reach).ceil() as usize).min(height);
        for y in ys..ye {
            for x in xs..xe {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, x0, y0, x1, y1);
                let coverage = (1.0 - (d - half_width).max(0.0)).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = intensity * coverage;
                    if v > map.get(0, y, x) {
                        map.set(0, y, x, v);
                    }
                }
            }
        }
    }
    map
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (x0 + t * vx - px, y0 + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

/// 2×3 affine map from output to source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    fn then(self, next: Affine) -> Affine {
        // next ∘ self
        let a = self.m;
        let b = next.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = b[r][0] * a[0][0] + b[r][1] * a[1][0];
            m[r][1] = b[r][0] * a[0][1] + b[r][1] * a[1][1];
            m[r][2] = b[r][0] * a[0][2] + b[r][1] * a[1][2] + b[r][2];
        }
        Affine { m }
    }

    fn invert(self) -> Option<Affine> {
        let [[a, b, c], [d, e, f]] = self.m;
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Some(Affine {
            m: [[ia, ib, -(ia * c + ib * f)], [id, ie, -(id * c + ie * f)]],
        })
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b, c], [d, e, f]] = self.m;
        (a * x + b * y + c, d * x + e * y + f)
    }
}

/// Sampled forward transform: rotate, zoom and shear about the center, then translate.
pub fn sample_rainmix_affine(spec: &RainSpec, width: usize, height: usize, rng: &mut impl Rng) -> Affine {
    let theta = sample(rng, spec.rotation_deg).to_radians();
    let zoom = sample(rng, spec.zoom);
    let tx = sample(rng, spec.translation_px);
    let ty = sample(rng, spec.translation_px);
    let shear = sample(rng, spec.shear);
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let to_center = Affine {
        m: [[1.0, 0.0, -cx], [0.0, 1.0, -cy]],
    };
    let rotate = Affine {
        m: [[theta.cos(), -theta.sin(), 0.0], [theta.sin(), theta.cos(), 0.0]],
    };
    let scale = Affine {
        m: [[zoom, 0.0, 0.0], [0.0, zoom, 0.0]],
    };
    let shear_x = Affine {
        m: [[1.0, shear, 0.0], [0.0, 1.0, 0.0]],
    };
    let back = Affine {
        m: [[1.0, 0.0, cx + tx], [0.0, 1.0, cy + ty]],
    };
    to_center.then(rotate).then(scale).then(shear_x).then(back)
}

/// Resamples `map` under a forward affine transform; pixels whose source
/// falls outside the frame become zero.
pub fn warp_affine(map: &Image, forward: &Affine) -> Image {
    let Some(inverse) = forward.invert() else {
        return Image::filled(map.width(), map.height(), map.channels(), 0.0);
    };
    let (w, h) = (map.width(), map.height());
    let mut out = Image::filled(w, h, map.channels(), 0.0);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse.apply(x as f64, y as f64);
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            for c in 0..map.channels() {
                let tap = |xx: f64, yy: f64| -> f64 {
                    if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                        0.0
                    } else {
                        map.get(c, yy as usize, xx as usize)
                    }
                };
                let mut v = tap(fx, fy) * (1.0 - ax) * (1.0 - ay);
                if ax > 0.0 {
                    v += tap(fx + 1.0, fy) * ax * (1.0 - ay);
                }
                if ay > 0.0 {
                    v += tap(fx, fy + 1.0) * (1.0 - ax) * ay;
                }
                if ax > 0.0 && ay > 0.0 {
                    v += tap(fx + 1.0, fy + 1.0) * ax * ay;
                }
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Random rotation, zoom, translation and shear of a rain map.
pub fn rainmix_transform(map: &Image, rng: &mut impl Rng, spec: &RainSpec) -> Image {
    let affine = sample_rainmix_affine(spec, map.width(), map.height(), rng);
    warp_affine(map, &affine)
}

/// Grayscale erosion with a `(2r+1)²` square window; outside pixels are ignored.
pub fn erode(map: &Image, radius: usize) -> Image {
    if radius == 0 {
        return map.clone();
    }
    let (w, h) = (map.width(), map.height());
    let mut horizontal = map.clone();
    for c in 0..map.channels() {
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                let m = (lo..=hi).map(|xx| map.get(c, y, xx)).fold(f64::INFINITY, f64::min);
                horizontal.set(c, y, x, m);
            }
        }
    }
    let mut out = horizontal.clone();
    for c in 0..map.channels() {
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                let m = (lo..=hi)
                    .map(|yy| horizontal.get(c, yy, x))
                    .fold(f64::INFINITY, f64::min);
                out.set(c, y, x, m);
            }
        }
    }
    out
}

/// Screen blend of a single-channel map into an RGB image with gain `k`.
pub fn screen_blend(image: &Image, map: &Image, gain: f64) -> Result<Image> {
    image.ensure_same_size(map, "rain map")?;
    if map.channels() != 1 || image.channels() != 3 {
        return Err(Error::Shape("screen blend needs an RGB image and a gray map".into()));
    }
    let plane = image.plane_len();
    let mut out = image.clone();
    for c in 0..3 {
        for (v, m) in out.data_mut()[c * plane..(c + 1) * plane]
            .iter_mut()
            .zip(map.data())
        {
            let s = gain * m;
            if s != 0.0 {
                *v = (1.0 - (1.0 - *v) * (1.0 - s)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Erodes the streak map by the level's radius, then screen-blends it in.
pub fn apply_rain(image: &Image, map: &Image, level: Intensity, spec: &RainSpec) -> Result<Image> {
    image.ensure_same_size(map, "rain map")?;
    let eroded = erode(map, spec.erosion_for(level));
    screen_blend(image, &eroded, spec.gain)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub patch_pixels: usize,
    pub rng_seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            patch_pixels: 64,
            rng_seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn patch_side(&self) -> usize {
        let side = (self.patch_pixels as f64).sqrt().round() as usize;
        debug_assert_eq!(side * side, self.patch_pixels);
        side
    }

    pub fn validate(&self) -> Result<()> {
        let side = (self.patch_pixels as f64).sqrt().round() as usize;
        if side == 0 || side * side != self.patch_pixels {
            return Err(Error::Input(format!(
                "patch_pixels must be a positive square, got {}",
                self.patch_pixels
            )));
        }
        Ok(())
    }
}

/// Which patches were dropped, on a grid of `side`-pixel squares.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub rate: f64,
    pub side: usize,
    pub cols: usize,
    pub rows: usize,
    pub dropped: Vec<bool>,
}

impl PatchMask {
    pub fn sample(width: usize, height: usize, side: usize, rate: f64, rng: &mut impl Rng) -> Self {
        let cols = width.div_ceil(side);
        let rows = height.div_ceil(side);
        let dropped = (0..cols * rows).map(|_| rng.gen::<f64>() < rate).collect();
        Self {
            rate,
            side,
            cols,
            rows,
            dropped,
        }
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.dropped[(y / self.side) * self.cols + x / self.side]
    }

    /// Zeroes masked pixels in every channel. Edge patches are clipped to the frame.
    pub fn apply(&self, image: &mut Image) {
        let (w, h) = (image.width(), image.height());
        for c in 0..image.channels() {
            for y in 0..h {
                for x in 0..w {
                    if self.is_masked(x, y) {
                        image.set(c, y, x, 0.0);
                    }
                }
            }
        }
    }

    pub fn masked_fraction(&self, width: usize, height: usize) -> f64 {
        let mut n = 0;
        for y in 0..height {
            for x in 0..width {
                n += self.is_masked(x, y) as usize;
            }
        }
        n as f64 / (width * height) as f64
    }
}

/// Dynamic masking: draws one rate from `Uniform(0, 1)` and one patch
/// pattern, and drops the same patches from all three aligned images.
pub fn apply_dmp(
    triplet: &AlignedTriplet,
    spec: &MaskSpec,
    rng: &mut impl Rng,
) -> Result<(AlignedTriplet, PatchMask)> {
    let rate = rng.gen_range(0.0..1.0);
    apply_dmp_with_rate(triplet, spec, rate, rng)
}

pub fn apply_dmp_with_rate(
    triplet: &AlignedTriplet,
    spec: &MaskSpec,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<(AlignedTriplet, PatchMask)> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Input(format!("mask rate must be in [0,1], got {rate}")));
    }
    let (w, h) = (triplet.width(), triplet.height());
    let mask = PatchMask::sample(w, h, spec.patch_side(), rate, rng);
    let mut out = triplet.clone();
    for member in out.members_mut() {
        mask.apply(&mut member.image);
    }
    Ok((out, mask))
}
