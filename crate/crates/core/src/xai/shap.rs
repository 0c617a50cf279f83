use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{CoalitionGame, ImageGame, ScoreModel};
use super::segment::SuperpixelMask;
use super::{AttributionMap, Method, XaiError};
use crate::tensor::Tensor;

/// Largest player count solved by enumerating every coalition.
pub const SHAP_EXACT_LIMIT: usize = 16;
/// Largest player count accepted at all.
pub const SHAP_MAX_PLAYERS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapOptions {
    /// Coalitions drawn on the sampling path (rounded up to an even count).
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ShapOptions {
    fn default() -> Self {
        Self { n_samples: 2048, seed: 0 }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of size `s` among `m` players.
fn kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

/// Kernel SHAP: Shapley-kernel weighted least squares under the efficiency constraint
/// `sum(phi) = v(all) - v(none)`.
///
/// Up to [`SHAP_EXACT_LIMIT`] players every proper coalition is enumerated, which yields the
/// exact Shapley values. Beyond that, coalition sizes are drawn from the kernel and each
/// draw is paired with its complement.
pub fn shapley_values(game: &dyn CoalitionGame, options: &ShapOptions) -> Result<Vec<f64>, XaiError> {
    let m = game.players();
    if m == 0 {
        return Err(XaiError::Invalid("a game needs at least one player".into()));
    }
    if m > SHAP_MAX_PLAYERS {
        return Err(XaiError::Invalid(format!(
            "{m} segments exceeds the Kernel SHAP limit of {SHAP_MAX_PLAYERS}"
        )));
    }
    let ends = game.values(&[vec![false; m], vec![true; m]])?;
    let (v0, delta) = (ends[0], ends[1] - ends[0]);
    if m == 1 {
        return Ok(vec![delta]);
    }

    let (coalitions, weights): (Vec<Vec<bool>>, Vec<f64>) = if m <= SHAP_EXACT_LIMIT {
        (1u32..(1u32 << m) - 1)
            .map(|bits| {
                let z: Vec<bool> = (0..m).map(|i| bits >> i & 1 == 1).collect();
                let w = kernel_weight(m, bits.count_ones() as usize);
                (z, w)
            })
            .unzip()
    } else {
        if options.n_samples < 2 {
            return Err(XaiError::Invalid("sampling path needs at least two coalitions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let size_w: Vec<f64> = (1..m).map(|s| 1.0 / (s * (m - s)) as f64).collect();
        let total: f64 = size_w.iter().sum();
        let mut players: Vec<usize> = (0..m).collect();
        let mut out = Vec::with_capacity(options.n_samples + 1);
        for _ in 0..options.n_samples.div_ceil(2) {
            let mut u = rng.gen::<f64>() * total;
            let mut s = m - 1;
            for (i, w) in size_w.iter().enumerate() {
                if u < *w {
                    s = i + 1;
                    break;
                }
                u -= w;
            }
            players.shuffle(&mut rng);
            let mut z = vec![false; m];
            for &p in &players[..s] {
                z[p] = true;
            }
            let comp: Vec<bool> = z.iter().map(|b| !b).collect();
            out.push((z, 1.0));
            out.push((comp, 1.0));
        }
        out.into_iter().unzip()
    };

    let values = game.values(&coalitions)?;
    // Eliminate the last player through the constraint and solve for the rest.
    let p = m - 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for ((z, &w), &v) in coalitions.iter().zip(&weights).zip(&values) {
        let last = if z[p] { 1.0 } else { 0.0 };
        let y = v - v0 - last * delta;
        for (r, &b) in row.iter_mut().zip(z) {
            *r = (if b { 1.0 } else { 0.0 }) - last;
        }
        for i in 0..p {
            if row[i] == 0.0 {
                continue;
            }
            aty[i] += w * row[i] * y;
            for j in 0..p {
                ata[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    let phi = ata
        .clone()
        .cholesky()
        .map(|c| c.solve(&aty))
        .or_else(|| ata.lu().solve(&aty))
        .ok_or_else(|| XaiError::Invalid("too few coalitions to identify every Shapley value".into()))?;
    let mut out: Vec<f64> = phi.iter().copied().collect();
    out.push(delta - out.iter().sum::<f64>());
    Ok(out)
}

/// Kernel SHAP for the target-class score, with absent segments taken from `fill`.
pub fn kernel_shap(
    model: &dyn ScoreModel,
    x: &Tensor<f64>,
    mask: &SuperpixelMask,
    fill: &Tensor<f64>,
    target: usize,
    options: &ShapOptions,
) -> Result<AttributionMap, XaiError> {
    let game = ImageGame {
        model,
        image: x,
        fill,
        mask,
        target,
    };
    game.validate()?;
    let phi = shapley_values(&game, options)?;
    Ok(AttributionMap {
        method: Method::Shap,
        target_class: target,
        values: Tensor::new(vec![mask.segments], phi).expect("one value per segment"),
    })
}
