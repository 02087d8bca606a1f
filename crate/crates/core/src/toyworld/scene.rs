use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Image side length in pixels.
pub const IMAGE_SIZE: usize = 16;
pub const BACKGROUND: f32 = -1.0;

pub const RADIUS_RANGE: (f64, f64) = (5.5, 7.0);
pub const OFFSET_RANGE: (f64, f64) = (-1.0, 1.0);
pub const CONTRAST_RANGE: (f64, f64) = (0.1, 0.5);
/// Amplitude of the per-pixel uniform sensor noise.
pub const PIXEL_NOISE: f64 = 0.02;

/// Amplitude of the fixed forehead speckle drawn for `old`.
pub const SPECKLE_AMPLITUDE: f32 = 0.35;
const SPECKLE_SEED: u64 = 12345;
const SPECKLE_ROWS: usize = 3;
const SPECKLE_COLS: usize = 6;

/// Registered attributes, in embedding-axis order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttributeId {
    Glasses,
    Smiling,
    Old,
}

impl AttributeId {
    pub const ALL: [AttributeId; 3] = [AttributeId::Glasses, AttributeId::Smiling, AttributeId::Old];

    pub fn token(self) -> &'static str {
        match self {
            AttributeId::Glasses => "glasses",
            AttributeId::Smiling => "smiling",
            AttributeId::Old => "old",
        }
    }

    /// Position in detector outputs and on the embedding's attribute axes.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for AttributeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeId::ALL
            .into_iter()
            .find(|a| a.token() == s)
            .ok_or_else(|| Error::UnknownAttribute(s.to_string()))
    }
}

/// A set of attributes, stored as flags in axis order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AttributeSet([bool; 3]);

impl AttributeSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn only(a: AttributeId) -> Self {
        let mut s = Self::empty();
        s.insert(a);
        s
    }

    pub fn insert(&mut self, a: AttributeId) {
        self.0[a.index()] = true;
    }

    pub fn remove(&mut self, a: AttributeId) {
        self.0[a.index()] = false;
    }

    pub fn contains(&self, a: AttributeId) -> bool {
        self.0[a.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&f| f)
    }

    pub fn iter(&self) -> impl Iterator<Item = AttributeId> + '_ {
        AttributeId::ALL.into_iter().filter(|a| self.contains(*a))
    }

    pub fn flags(&self) -> [bool; 3] {
        self.0
    }
}

impl FromIterator<AttributeId> for AttributeSet {
    fn from_iter<I: IntoIterator<Item = AttributeId>>(iter: I) -> Self {
        let mut s = Self::empty();
        for a in iter {
            s.insert(a);
        }
        s
    }
}

/// Presence probability per attribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributePriors(pub [f64; 3]);

impl AttributePriors {
    pub fn uniform(p: f64) -> Self {
        Self([p; 3])
    }

    pub fn only(a: AttributeId) -> Self {
        let mut p = [0.0; 3];
        p[a.index()] = 1.0;
        Self(p)
    }

    pub fn with(mut self, a: AttributeId, p: f64) -> Self {
        self.0[a.index()] = p;
        self
    }

    pub fn get(&self, a: AttributeId) -> f64 {
        self.0[a.index()]
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            Some(p) => invalid(format!("attribute prior {p} outside [0, 1]")),
            None => Ok(()),
        }
    }
}

/// A face description: attributes plus nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub attributes: AttributeSet,
    pub radius: f64,
    /// Horizontal offset of the disk centre from the image centre.
    pub offset_x: f64,
    /// Brightness of the disk above the mid-grey level.
    pub contrast: f64,
    pub noise_seed: u64,
}

impl Scene {
    /// Centred disk with mid-range nuisance and no attributes.
    pub fn neutral() -> Self {
        Self {
            attributes: AttributeSet::empty(),
            radius: 6.25,
            offset_x: 0.0,
            contrast: 0.3,
            noise_seed: 0,
        }
    }

    pub fn with_attributes(mut self, attributes: AttributeSet) -> Self {
        self.attributes = attributes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !within(self.radius, RADIUS_RANGE)
            || !within(self.offset_x, OFFSET_RANGE)
            || !within(self.contrast, CONTRAST_RANGE)
        {
            return invalid(format!("scene nuisance out of range: {self:?}"));
        }
        Ok(())
    }

    /// Column the attribute marks are anchored on.
    pub fn anchor_col(&self) -> usize {
        (IMAGE_SIZE as f64 / 2.0 + self.offset_x).round() as usize
    }
}

fn speckle() -> &'static [f32; SPECKLE_ROWS * SPECKLE_COLS] {
    static CELL: OnceLock<[f32; SPECKLE_ROWS * SPECKLE_COLS]> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(SPECKLE_SEED);
        let mut out = [0.0f32; SPECKLE_ROWS * SPECKLE_COLS];
        for v in out.iter_mut() {
            *v = if rng.random::<bool>() {
                SPECKLE_AMPLITUDE
            } else {
                -SPECKLE_AMPLITUDE
            };
        }
        out
    })
}

/// Renders the noiseless scene (no sensor noise, no clipping).
pub fn render_clean(scene: &Scene) -> Result<Tensor> {
    scene.validate()?;
    let n = IMAGE_SIZE;
    let (cx, cy) = (n as f64 / 2.0 + scene.offset_x, n as f64 / 2.0);
    let mut img = vec![BACKGROUND; n * n];
    for y in 0..n {
        for x in 0..n {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let cover = (scene.radius - d + 0.5).clamp(0.0, 1.0);
            img[y * n + x] = (BACKGROUND as f64 + (scene.contrast + 1.0) * cover) as f32;
        }
    }
    let c = scene.anchor_col();
    if scene.attributes.contains(AttributeId::Old) {
        let sp = speckle();
        for r in 0..SPECKLE_ROWS {
            for k in 0..SPECKLE_COLS {
                let idx = (3 + r) * n + c - 3 + k;
                img[idx] += sp[r * SPECKLE_COLS + k];
            }
        }
    }
    let mut set = |row: usize, col: usize, v: f32| img[row * n + col] = v;
    if scene.attributes.contains(AttributeId::Glasses) {
        for row in 6..8 {
            for col in c - 4..c + 4 {
                set(row, col, -1.0);
            }
        }
    }
    if scene.attributes.contains(AttributeId::Smiling) {
        for col in c - 2..c + 2 {
            set(11, col, 1.0);
        }
        set(10, c - 3, 1.0);
        set(10, c + 2, 1.0);
    }
    Tensor::new(vec![n, n], img)
}

/// Renders a scene: noiseless image plus seeded uniform sensor noise,
/// clipped to `[-1, 1]`. Deterministic in the scene.
pub fn render_scene(scene: &Scene) -> Result<Tensor> {
    let mut img = render_clean(scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    for v in img.data_mut() {
        let e = rng.random_range(-PIXEL_NOISE..PIXEL_NOISE);
        *v = ((*v as f64 + e) as f32).clamp(-1.0, 1.0);
    }
    Ok(img)
}

/// Draws attributes from `priors` and nuisance uniformly over the
/// documented ranges.
pub fn sample_scene(rng: &mut impl Rng, priors: &AttributePriors) -> Scene {
    let mut attributes = AttributeSet::empty();
    for a in AttributeId::ALL {
        if rng.random::<f64>() < priors.get(a) {
            attributes.insert(a);
        }
    }
    Scene {
        attributes,
        radius: rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1),
        offset_x: rng.random_range(OFFSET_RANGE.0..OFFSET_RANGE.1),
        contrast: rng.random_range(CONTRAST_RANGE.0..CONTRAST_RANGE.1),
        noise_seed: rng.random(),
    }
}

/// A rendered dataset: images `[n, 16, 16]` with their scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = AttributeSet> + '_ {
        self.scenes.iter().map(|s| s.attributes)
    }
}

pub fn sample_dataset(n: usize, priors: &AttributePriors, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    priors.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<Scene> = (0..n).map(|_| sample_scene(&mut rng, priors)).collect();
    let images = scenes
        .iter()
        .map(render_scene)
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images: Tensor::batch(&images)?,
        scenes,
    })
}

/// Conditional reference sampler: a fresh face carrying exactly `attr`.
pub fn visual_generator(attr: AttributeId, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_scene(&sample_scene(&mut rng, &AttributePriors::only(attr)))
}

/// Batch of reference images for `attr`, shape `[n, 16, 16]`.
pub fn visual_generator_batch(attr: AttributeId, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let priors = AttributePriors::only(attr);
    let imgs = (0..n)
        .map(|_| render_scene(&sample_scene(rng, &priors)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::batch(&imgs)
}
