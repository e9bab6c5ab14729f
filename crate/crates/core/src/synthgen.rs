//! Procedural Texture-dSprites renderer.
//!
//! Every image is a pure function of its [`FactorTuple`]: a textured, colored
//! shape on a black background, hard-rasterized at pixel centers. The grid of
//! tuples is addressed with a mixed-radix flat index (last factor fastest),
//! where frozen factors contribute a radix of one.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensorio::Image;
use crate::{Error, Result};

pub const TEXTURE: usize = 0;
pub const COLOR: usize = 1;
pub const SHAPE: usize = 2;
pub const SCALE: usize = 3;
pub const ORIENTATION: usize = 4;
pub const POS_X: usize = 5;
pub const POS_Y: usize = 6;

const CANONICAL_NAMES: [&str; 7] = [
    "Texture",
    "Color",
    "Shape",
    "Scale",
    "Orientation",
    "PosX",
    "PosY",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
    /// When set, the factor is pinned to this value everywhere in the grid.
    pub frozen: Option<usize>,
}

impl Factor {
    /// Number of values the factor takes inside the grid.
    pub fn span(&self) -> usize {
        if self.frozen.is_some() {
            1
        } else {
            self.cardinality
        }
    }

    /// A factor is variable when pairs can differ in it.
    pub fn is_variable(&self) -> bool {
        self.frozen.is_none() && self.cardinality > 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpace {
    factors: Vec<Factor>,
}

/// One point of the factor grid: an index per factor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorTuple(pub Vec<usize>);

impl FactorTuple {
    pub fn values(&self) -> &[usize] {
        &self.0
    }
}

impl std::ops::Index<usize> for FactorTuple {
    type Output = usize;
    fn index(&self, k: usize) -> &usize {
        &self.0[k]
    }
}

impl FactorSpace {
    pub fn new<S: Into<String>>(factors: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let factors: Vec<Factor> = factors
            .into_iter()
            .map(|(name, cardinality)| Factor {
                name: name.into(),
                cardinality,
                frozen: None,
            })
            .collect();
        if factors.is_empty() {
            return Err(Error::invalid("factor space needs at least one factor"));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.cardinality == 0 {
                return Err(Error::invalid(format!("factor `{}` has cardinality 0", f.name)));
            }
            if factors[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::invalid(format!("duplicate factor name `{}`", f.name)));
            }
        }
        Ok(Self { factors })
    }

    /// Texture:5, Color:7, Shape:3, Scale:6, Orientation:`orientations`, PosX:32, PosY:32.
    pub fn texture_dsprites(orientations: usize) -> Self {
        Self::new(CANONICAL_NAMES.iter().copied().zip([5, 7, 3, 6, orientations, 32, 32]))
            .expect("canonical space is valid")
    }

    pub fn freeze(mut self, name: &str, value: usize) -> Result<Self> {
        let k = self.index_of(name)?;
        let f = &mut self.factors[k];
        if value >= f.cardinality {
            return Err(Error::FactorOutOfRange {
                name: f.name.clone(),
                value,
                cardinality: f.cardinality,
            });
        }
        f.frozen = Some(value);
        Ok(self)
    }

    /// Freezes a factor at its middle value (`cardinality / 2`).
    pub fn freeze_centered(self, name: &str) -> Result<Self> {
        let k = self.index_of(name)?;
        let mid = self.factors[k].cardinality / 2;
        self.freeze(name, mid)
    }

    /// Applies `Name` (centered) or `Name=value`.
    pub fn freeze_spec(self, spec: &str) -> Result<Self> {
        match spec.split_once('=') {
            None => self.freeze_centered(spec.trim()),
            Some((name, value)) => {
                let v = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad frozen value in `{spec}`")))?;
                self.freeze(name.trim(), v)
            }
        }
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("unknown factor `{name}`")))
    }

    /// Indices of factors that pairs may differ in.
    pub fn variable_factors(&self) -> Vec<usize> {
        (0..self.factors.len()).filter(|&k| self.factors[k].is_variable()).collect()
    }

    /// Size of the grid spanned by the non-frozen factors.
    pub fn grid_size(&self) -> usize {
        self.factors.iter().map(Factor::span).product()
    }

    pub fn validate(&self, t: &FactorTuple) -> Result<()> {
        if t.0.len() != self.factors.len() {
            return Err(Error::DimensionMismatch {
                expected: self.factors.len(),
                actual: t.0.len(),
            });
        }
        for (f, &v) in self.factors.iter().zip(&t.0) {
            if v >= f.cardinality {
                return Err(Error::FactorOutOfRange {
                    name: f.name.clone(),
                    value: v,
                    cardinality: f.cardinality,
                });
            }
        }
        Ok(())
    }

    /// Tuple at mixed-radix position `i` of the grid.
    pub fn tuple_at(&self, mut i: usize) -> Result<FactorTuple> {
        let size = self.grid_size();
        if i >= size {
            return Err(Error::invalid(format!("flat index {i} outside grid of {size}")));
        }
        let mut values = vec![0; self.factors.len()];
        for (k, f) in self.factors.iter().enumerate().rev() {
            values[k] = match f.frozen {
                Some(v) => v,
                None => {
                    let digit = i % f.cardinality;
                    i /= f.cardinality;
                    digit
                }
            };
        }
        Ok(FactorTuple(values))
    }

    /// Inverse of [`FactorSpace::tuple_at`]. Frozen factors must hold their frozen value.
    pub fn flat_index(&self, t: &FactorTuple) -> Result<usize> {
        self.validate(t)?;
        let mut index = 0;
        for (f, &v) in self.factors.iter().zip(&t.0) {
            match f.frozen {
                Some(fv) if fv != v => {
                    return Err(Error::invalid(format!(
                        "factor `{}` is frozen at {fv} but tuple holds {v}",
                        f.name
                    )))
                }
                Some(_) => {}
                None => index = index * f.cardinality + v,
            }
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Heart];

    /// Membership test in the shape's normalized frame, `u, v` in `[-1, 1]`
    /// spanning the bounding box, `v` pointing down.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
            Shape::Heart => {
                // (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0 spans x in [-1.14, 1.14], y in [-1, 1.25]
                let x = 1.14 * u;
                let y = 0.125 - 1.125 * v;
                let r = x * x + y * y - 1.0;
                r * r * r - x * x * y * y * y <= 0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Solid,
    Checker,
    Stripes,
    Dots,
    Noise,
}

/// Intensity of the "dark" texture phase; foreground never drops to zero.
const TEXTURE_LOW: f32 = 0.3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Texture {
    pub const ALL: [Texture; 5] = [
        Texture::Solid,
        Texture::Checker,
        Texture::Stripes,
        Texture::Dots,
        Texture::Noise,
    ];

    const NOISE_SEED: u64 = 0x5eed_0f_7e57;

    /// Intensity in `[0.3, 1]` at integer pixel `(x, y)`.
    pub fn intensity(self, x: usize, y: usize) -> f32 {
        match self {
            Texture::Solid => 1.0,
            // period 4: 2x2 cells
            Texture::Checker => {
                if ((x / 2) + (y / 2)) % 2 == 0 {
                    1.0
                } else {
                    TEXTURE_LOW
                }
            }
            // period 4 along the 45 degree diagonal
            Texture::Stripes => {
                if (x + y) % 4 < 2 {
                    1.0
                } else {
                    TEXTURE_LOW
                }
            }
            Texture::Dots => {
                let dx = (x % 5) as f64 + 0.5 - 2.5;
                let dy = (y % 5) as f64 + 0.5 - 2.5;
                if dx * dx + dy * dy <= 1.5 * 1.5 {
                    1.0
                } else {
                    TEXTURE_LOW
                }
            }
            Texture::Noise => {
                let h = splitmix64(Self::NOISE_SEED ^ ((x as u64) << 32 | y as u64));
                let unit = (h >> 40) as f32 / (1u64 << 24) as f32;
                TEXTURE_LOW + (1.0 - TEXTURE_LOW) * unit
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetScale {
    Desk,
    Paper,
}

impl std::str::FromStr for DatasetScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(DatasetScale::Desk),
            "paper" => Ok(DatasetScale::Paper),
            other => Err(Error::invalid(format!("unknown scale `{other}` (desk|paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub image_side: usize,
    pub palette: Vec<[f32; 3]>,
    pub shapes: Vec<Shape>,
    pub textures: Vec<Texture>,
    /// Bounding-box side of the shape as a fraction of the image side, per scale index.
    pub scale_fractions: Vec<f64>,
    pub orientation_count: usize,
}

impl RenderSpec {
    pub fn new(image_side: usize, orientation_count: usize) -> Self {
        Self {
            image_side,
            palette: vec![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [1.0, 1.0, 1.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 1.0],
                [1.0, 0.0, 1.0],
            ],
            shapes: Shape::ALL.to_vec(),
            textures: Texture::ALL.to_vec(),
            scale_fractions: vec![0.3125, 0.375, 0.4375, 0.5, 0.5625, 0.625],
            orientation_count,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.image_side == 0 {
            return Err(Error::invalid("image side must be positive"));
        }
        for (i, a) in self.palette.iter().enumerate() {
            if self.palette[..i].contains(a) {
                return Err(Error::invalid(format!("palette entry {i} duplicates an earlier one")));
            }
            if a.iter().all(|&c| c <= 0.0) {
                return Err(Error::invalid(format!("palette entry {i} is black")));
            }
        }
        if self.scale_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("scale fractions must be strictly increasing"));
        }
        if self.orientation_count == 0 {
            return Err(Error::invalid("orientation count must be positive"));
        }
        Ok(())
    }

    /// Checks that the space is the canonical Texture-dSprites layout and
    /// matches this spec's cardinalities.
    pub fn check_space(&self, space: &FactorSpace) -> Result<()> {
        self.check()?;
        if space.names() != CANONICAL_NAMES {
            return Err(Error::invalid(format!(
                "render expects factors {CANONICAL_NAMES:?}, got {:?}",
                space.names()
            )));
        }
        let card = space.cardinalities();
        let expected = [
            (TEXTURE, self.textures.len()),
            (COLOR, self.palette.len()),
            (SHAPE, self.shapes.len()),
            (SCALE, self.scale_fractions.len()),
            (ORIENTATION, self.orientation_count),
        ];
        for (k, n) in expected {
            if card[k] != n {
                return Err(Error::invalid(format!(
                    "factor `{}` has cardinality {} but the render spec provides {n}",
                    CANONICAL_NAMES[k], card[k]
                )));
            }
        }
        Ok(())
    }
}

/// Factor space and render spec for a dataset scale. `freeze` entries are
/// `Name` (frozen at the middle value) or `Name=value`.
pub fn dataset_preset(scale: DatasetScale, freeze: &[&str]) -> Result<(FactorSpace, RenderSpec)> {
    let (side, orientations) = match scale {
        DatasetScale::Desk => (64, 8),
        DatasetScale::Paper => (224, 40),
    };
    let mut space = FactorSpace::texture_dsprites(orientations);
    for spec in freeze {
        space = space.freeze_spec(spec)?;
    }
    Ok((space, RenderSpec::new(side, orientations)))
}

/// Index `n / 2` maps to the exact image center.
fn position_fraction(p: usize, n: usize) -> f64 {
    0.5 + 0.6 * (p as f64 - (n / 2) as f64) / n as f64
}

/// Renders one tuple. Background is exactly zero; foreground is `color * texture`.
pub fn render(space: &FactorSpace, spec: &RenderSpec, t: &FactorTuple) -> Result<Image> {
    spec.check_space(space)?;
    space.validate(t)?;
    Ok(render_unchecked(space, spec, t))
}

fn render_unchecked(space: &FactorSpace, spec: &RenderSpec, t: &FactorTuple) -> Image {
    let side = spec.image_side;
    let card = space.cardinalities();
    let color = spec.palette[t[COLOR]];
    let texture = spec.textures[t[TEXTURE]];
    let shape = spec.shapes[t[SHAPE]];
    let half = 0.5 * spec.scale_fractions[t[SCALE]] * side as f64;
    let theta = 2.0 * PI * t[ORIENTATION] as f64 / spec.orientation_count as f64;
    let (sin, cos) = theta.sin_cos();
    let cx = position_fraction(t[POS_X], card[POS_X]) * side as f64;
    let cy = position_fraction(t[POS_Y], card[POS_Y]) * side as f64;

    let mut image = Image::zeros(side, side, 3);
    for y in 0..side {
        let dy = y as f64 + 0.5 - cy;
        for x in 0..side {
            let dx = x as f64 + 0.5 - cx;
            let u = (dx * cos + dy * sin) / half;
            let v = (-dx * sin + dy * cos) / half;
            if shape.contains(u, v) {
                let a = texture.intensity(x, y);
                let px = image.pixel_mut(y, x);
                for c in 0..3 {
                    px[c] = color[c] * a;
                }
            }
        }
    }
    image
}

/// Binary foreground mask (1 where any channel is nonzero), row-major `side * side`.
pub fn foreground_mask(image: &Image) -> Vec<bool> {
    image
        .data
        .chunks_exact(image.channels)
        .map(|px| px.iter().any(|&v| v != 0.0))
        .collect()
}

/// Every grid tuple with its image, in mixed-radix order.
pub fn enumerate<'a>(
    space: &'a FactorSpace,
    spec: &'a RenderSpec,
    budget: usize,
) -> Result<impl Iterator<Item = (FactorTuple, Image)> + 'a> {
    spec.check_space(space)?;
    let required = space.grid_size();
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok((0..required).map(move |i| {
        let t = space.tuple_at(i).expect("index inside grid");
        let image = render_unchecked(space, spec, &t);
        (t, image)
    }))
}

/// A weak-supervision pair. `changed` is bookkeeping for tests and is never
/// handed to the learner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakPair {
    pub first: FactorTuple,
    pub second: FactorTuple,
    pub changed: Vec<usize>,
}

/// Draws a uniform grid tuple and a partner differing in exactly `k`
/// uniformly chosen variable factors, each resampled to a different value.
pub fn sample_pair<R: Rng + ?Sized>(space: &FactorSpace, rng: &mut R, k: usize) -> Result<WeakPair> {
    let variable = space.variable_factors();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > variable.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} variable factors",
            variable.len()
        )));
    }
    let first = FactorTuple(
        space
            .factors()
            .iter()
            .map(|f| match f.frozen {
                Some(v) => v,
                None => rng.random_range(0..f.cardinality),
            })
            .collect(),
    );
    let mut changed: Vec<usize> = index::sample(rng, variable.len(), k)
        .into_iter()
        .map(|i| variable[i])
        .collect();
    changed.sort_unstable();
    let mut second = first.clone();
    for &f in &changed {
        let card = space.factors()[f].cardinality;
        // uniform over the card - 1 other values
        let r = rng.random_range(0..card - 1);
        second.0[f] = if r >= first[f] { r + 1 } else { r };
    }
    Ok(WeakPair {
        first,
        second,
        changed,
    })
}
