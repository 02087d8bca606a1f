//! Attribute detectors and the frozen image/text embedders.
//!
//! Detectors read fixed region statistics over the central columns:
//!
//! | attribute | statistic                                   | rows  |
//! |-----------|---------------------------------------------|-------|
//! | glasses   | cheek mean minus eye mean                   | 6-9   |
//! | smiling   | mouth mean minus cheek mean                 | 8-11  |
//! | old       | mean squared horizontal difference          | 4-5   |
//!
//! Each statistic passes through a logistic with a fixed gain and
//! threshold. All of it is expressed as graph operations on constant
//! matrices so losses can differentiate through the embedders.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::graph::sigmoid;
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;
use crate::toyworld::scene::{render_scene, AttributeId, Scene, IMAGE_SIZE};

const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const COLS: std::ops::Range<usize> = 5..11;
const EYE_ROWS: std::ops::Range<usize> = 6..8;
const CHEEK_ROWS: std::ops::Range<usize> = 8..10;
const MOUTH_ROWS: std::ops::Range<usize> = 10..12;
const FOREHEAD_ROWS: std::ops::Range<usize> = 4..6;

/// `(gain, threshold)` per attribute: `score = sigmoid(gain * (stat - threshold))`.
pub const DETECTOR_CALIBRATION: [(f32, f32); 3] = [(8.0, 0.4), (30.0, 0.1), (60.0, 0.06)];

pub const NUM_ATTRIBUTES: usize = 3;
/// Embedding dimension: one axis per attribute plus random projections.
pub const EMBED_DIM: usize = 16;
const PROJ_DIM: usize = EMBED_DIM - NUM_ATTRIBUTES;
const PROJ_SEED: u64 = 777;
const PROJ_SCALE: f32 = 4.0 / PIXELS as f32;

struct Constants {
    /// `[256, 2]`: linear contrasts (cheek - eye, mouth - cheek).
    contrasts: Tensor,
    /// `[256, 10]`: horizontal differences over the forehead block.
    diffs: Tensor,
    /// `[256, 13]`: frozen random projection.
    proj: Tensor,
}

fn constants() -> &'static Constants {
    static CELL: OnceLock<Constants> = OnceLock::new();
    CELL.get_or_init(|| {
        let n = IMAGE_SIZE;
        let mut contrasts = vec![0.0f32; PIXELS * 2];
        let region = |rows: std::ops::Range<usize>| {
            let k = (rows.len() * COLS.len()) as f32;
            rows.flat_map(|r| COLS.map(move |c| r * n + c)).map(move |i| (i, 1.0 / k))
        };
        for (i, w) in region(CHEEK_ROWS) {
            contrasts[i * 2] += w;
            contrasts[i * 2 + 1] -= w;
        }
        for (i, w) in region(EYE_ROWS) {
            contrasts[i * 2] -= w;
        }
        for (i, w) in region(MOUTH_ROWS) {
            contrasts[i * 2 + 1] += w;
        }

        let nd = FOREHEAD_ROWS.len() * (COLS.len() - 1);
        let mut diffs = vec![0.0f32; PIXELS * nd];
        let mut k = 0;
        for r in FOREHEAD_ROWS {
            for c in COLS.start..COLS.end - 1 {
                diffs[(r * n + c + 1) * nd + k] = 1.0;
                diffs[(r * n + c) * nd + k] = -1.0;
                k += 1;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(PROJ_SEED);
        let proj = (0..PIXELS * PROJ_DIM)
            .map(|_| if rng.random::<bool>() { PROJ_SCALE } else { -PROJ_SCALE })
            .collect();
        Constants {
            contrasts: Tensor::new(vec![PIXELS, 2], contrasts).expect("shape"),
            diffs: Tensor::new(vec![PIXELS, nd], diffs).expect("shape"),
            proj: Tensor::new(vec![PIXELS, PROJ_DIM], proj).expect("shape"),
        }
    })
}

fn flat_batch(g: &mut Graph, x: Var) -> Result<(Var, usize)> {
    let shape = g.value(x).shape().to_vec();
    let n = match shape.as_slice() {
        [h, w] if *h == IMAGE_SIZE && *w == IMAGE_SIZE => 1,
        [n, h, w] if *h == IMAGE_SIZE && *w == IMAGE_SIZE => *n,
        [n, h, w, 1] if *h == IMAGE_SIZE && *w == IMAGE_SIZE => *n,
        [n, p] if *p == PIXELS => *n,
        other => return shape_err(format!("expected a batch of 16x16 images, got {other:?}")),
    };
    Ok((g.reshape(x, &[n, PIXELS])?, n))
}

/// Raw region statistics `[N, 3]` in attribute order.
pub fn statistics_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let c = constants();
    let (flat, n) = flat_batch(g, x)?;
    let m = g.input(c.contrasts.clone());
    let lin = g.matmul(flat, m)?;
    let d = g.input(c.diffs.clone());
    let diffs = g.matmul(flat, d)?;
    let sq = g.square(diffs)?;
    let energy = g.sum_last(sq)?;
    let energy = g.scale(energy, 1.0 / c.diffs.shape()[1] as f32)?;
    let energy = g.reshape(energy, &[n, 1])?;
    g.concat(lin, energy)
}

/// Detector scores `[N, 3]` in `[0, 1]`.
pub fn detect_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let stats = statistics_graph(g, x)?;
    let n = g.value(stats).shape()[0];
    let thresholds = g.input(Tensor::from_vec(DETECTOR_CALIBRATION.iter().map(|c| -c.1).collect()));
    let shifted = g.add_bias(stats, thresholds)?;
    let gains: Vec<f32> = (0..n).flat_map(|_| DETECTOR_CALIBRATION.map(|c| c.0)).collect();
    let gains = g.input(Tensor::new(vec![n, NUM_ATTRIBUTES], gains)?);
    let z = g.mul(shifted, gains)?;
    g.sigmoid(z)
}

/// Image embedding `[N, 16]`: `2 * score - 1` on the attribute axes, then
/// the frozen projection of the pixels.
pub fn embed_image_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let scores = detect_graph(g, x)?;
    let axes = g.scale(scores, 2.0)?;
    let axes = g.add_scalar(axes, -1.0)?;
    let (flat, _) = flat_batch(g, x)?;
    let p = g.input(constants().proj.clone());
    let proj = g.matmul(flat, p)?;
    g.concat(axes, proj)
}

fn eval(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Region statistics of a single image.
pub fn region_statistics(img: &Tensor) -> Result<[f32; 3]> {
    let s = eval(img, statistics_graph)?;
    Ok([s.data()[0], s.data()[1], s.data()[2]])
}

/// Detector scores of a batch, `[N, 3]`.
pub fn detect_batch(x: &Tensor) -> Result<Tensor> {
    eval(x, detect_graph)
}

/// Scores of one image, in attribute order.
pub fn detect_attributes(img: &Tensor) -> Result<[f32; 3]> {
    let s = detect_batch(img)?;
    Ok([s.data()[0], s.data()[1], s.data()[2]])
}

pub fn embed_image_batch(x: &Tensor) -> Result<Tensor> {
    eval(x, embed_image_graph)
}

pub fn embed_image(img: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(embed_image_batch(img)?.into_data()))
}

/// Score a zero statistic maps to.
pub fn neutral_score(a: AttributeId) -> f32 {
    let (gain, thr) = DETECTOR_CALIBRATION[a.index()];
    sigmoid(-gain * thr)
}

/// Words accepted by [`embed_text`] besides the attribute tokens.
pub const BASE_VOCABULARY: [&str; 4] = ["a", "person", "with", "and"];

fn text_base() -> &'static Tensor {
    static CELL: OnceLock<Tensor> = OnceLock::new();
    CELL.get_or_init(|| {
        let neutral = render_scene(&Scene::neutral()).expect("neutral scene renders");
        let e = embed_image(&neutral).expect("embedding");
        let mut base = e.into_data();
        base[..NUM_ATTRIBUTES].iter_mut().for_each(|v| *v = 0.0);
        Tensor::from_vec(base)
    })
}

/// Text embedding: a fixed base vector (zero on the attribute axes, the
/// neutral face's projection elsewhere) plus one unit axis per attribute
/// token.
pub fn embed_text(prompt: &str) -> Result<Tensor> {
    let mut out = text_base().clone();
    for tok in prompt.split_whitespace() {
        let tok = tok.to_ascii_lowercase();
        if BASE_VOCABULARY.contains(&tok.as_str()) {
            continue;
        }
        let a: AttributeId = tok
            .parse()
            .map_err(|_| Error::UnknownToken(tok.clone()))?;
        out.data_mut()[a.index()] += 1.0;
    }
    Ok(out)
}

/// Unit vector along an attribute's embedding axis.
pub fn attribute_axis(a: AttributeId) -> Tensor {
    let mut v = vec![0.0f32; EMBED_DIM];
    v[a.index()] = 1.0;
    Tensor::from_vec(v)
}
