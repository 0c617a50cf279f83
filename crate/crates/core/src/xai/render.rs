use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::segment::SuperpixelMask;
use super::{Explanation, XaiError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlayStyle {
    /// Outline the top-k segments.
    BoundaryHighlight,
    /// Tint positive segments red and negative ones blue, scaled by `|score| / max |score|`.
    #[default]
    SignedHeatmap,
}

impl std::str::FromStr for OverlayStyle {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "boundary-highlight" => Ok(Self::BoundaryHighlight),
            "signed-heatmap" => Ok(Self::SignedHeatmap),
            other => Err(XaiError::Invalid(format!("unknown overlay style `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub image: RgbImage,
    /// Set when nothing could be drawn.
    pub notice: Option<String>,
}

const MAX_ALPHA: f64 = 0.6;
const POSITIVE: [u8; 3] = [255, 0, 0];
const NEGATIVE: [u8; 3] = [0, 0, 255];
const OUTLINE: [u8; 3] = [255, 255, 0];

fn blend(px: &mut Rgb<u8>, colour: [u8; 3], alpha: f64) {
    for (c, t) in px.0.iter_mut().zip(colour) {
        *c = ((1.0 - alpha) * *c as f64 + alpha * t as f64).round() as u8;
    }
}

pub fn render_overlay(
    image: &RgbImage,
    explanation: &Explanation,
    mask: &SuperpixelMask,
    style: OverlayStyle,
) -> Result<Overlay, XaiError> {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != (mask.height, mask.width) || explanation.mask != mask.info() {
        return Err(XaiError::Invalid(format!(
            "explanation mask {:?} does not fit a {w}x{h} image",
            explanation.mask
        )));
    }
    let scores = &explanation.segment_scores;
    let max = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if !(max > 0.0) || !max.is_finite() {
        return Ok(Overlay {
            image: image.clone(),
            notice: Some("all attribution scores are zero; image left unmodified".into()),
        });
    }
    let mut out = image.clone();
    match style {
        OverlayStyle::SignedHeatmap => {
            for (x, y, px) in out.enumerate_pixels_mut() {
                let s = scores[mask.id(y as usize, x as usize)];
                if s != 0.0 {
                    blend(px, if s > 0.0 { POSITIVE } else { NEGATIVE }, MAX_ALPHA * s.abs() / max);
                }
            }
        }
        OverlayStyle::BoundaryHighlight => {
            let mut chosen = vec![false; mask.segments];
            for &i in &explanation.top_k {
                if scores[i] != 0.0 {
                    chosen[i] = true;
                }
            }
            let (wu, hu) = (w as usize, h as usize);
            for y in 0..hu {
                for x in 0..wu {
                    let id = mask.id(y, x);
                    if !chosen[id] {
                        continue;
                    }
                    let edge = x == 0
                        || y == 0
                        || x + 1 == wu
                        || y + 1 == hu
                        || mask.id(y, x - 1) != id
                        || mask.id(y, x + 1) != id
                        || mask.id(y - 1, x) != id
                        || mask.id(y + 1, x) != id;
                    if edge {
                        out.put_pixel(x as u32, y as u32, Rgb(OUTLINE));
                    }
                }
            }
        }
    }
    Ok(Overlay { image: out, notice: None })
}
