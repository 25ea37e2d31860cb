//! Spatially varying latent codes from anchors, and hybrid rendering with
//! `u(μ)` interpolated between the two nearest anchors.

use crate::error::{Error, Result};
use crate::field::{LatentCode, RadianceField};
use crate::math::Vec3;
use crate::render::{render_view, Camera, LatentSource, LightSample, RayMarchConfig, RenderedView};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub position: Vec3,
    pub code: LatentCode,
}

/// Validated anchors. Positions are pairwise distinct, so the nearest-two
/// choice never depends on list order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
    /// Any value above zero switches the blend weight to smoothstep.
    pub smoothing: f64,
}

pub fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

fn lex(a: Vec3, b: Vec3) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

impl AnchorSet {
    pub fn new(anchors: Vec<Anchor>, smoothing: f64) -> Result<Self> {
        let first = anchors.first().ok_or_else(|| Error::config("anchor set is empty"))?;
        let dim = first.code.dim();
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::config("anchor smoothing must be a finite non-negative number"));
        }
        for (i, a) in anchors.iter().enumerate() {
            if !a.position.is_finite() {
                return Err(Error::config(format!("anchor {i} has a non-finite position")));
            }
            if a.code.dim() != dim {
                return Err(Error::config(format!("anchor {i} has {} code components, expected {dim}", a.code.dim())));
            }
            if let Some(j) = anchors[..i].iter().position(|b| b.position == a.position) {
                return Err(Error::config(format!("anchors {j} and {i} share a position")));
            }
        }
        Ok(AnchorSet { anchors, smoothing })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn latent_dim(&self) -> usize {
        self.anchors[0].code.dim()
    }

    /// Interpolated code at `p`: `w·c₁ + (1 − w)·c₂` over the two nearest
    /// anchors with `w = d₂/(d₁ + d₂)`, smoothstepped when `smoothing > 0`.
    /// Distance ties go to the lexicographically smaller position.
    pub fn latent_at(&self, p: Vec3) -> LatentCode {
        if self.anchors.len() == 1 {
            return self.anchors[0].code.clone();
        }
        let closer = |a: &Anchor, da: f64, b: &Anchor, db: f64| da.total_cmp(&db).then_with(|| lex(a.position, b.position)) == Ordering::Less;
        let mut best: Option<(&Anchor, f64)> = None;
        let mut second: Option<(&Anchor, f64)> = None;
        for a in &self.anchors {
            let d = (a.position - p).norm();
            match best {
                Some((b, db)) if !closer(a, d, b, db) => {
                    if second.is_none_or(|(s, ds)| closer(a, d, s, ds)) {
                        second = Some((a, d));
                    }
                }
                _ => {
                    second = best;
                    best = Some((a, d));
                }
            }
        }
        let ((a1, d1), (a2, d2)) = (best.expect("two anchors"), second.expect("two anchors"));
        let mut w = d2 / (d1 + d2);
        if self.smoothing > 0.0 {
            w = smoothstep(w);
        }
        if w == 1.0 {
            return a1.code.clone();
        }
        let mixed: Vec<f64> = a1.code.as_slice().iter().zip(a2.code.as_slice()).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        LatentCode::new(mixed).expect("convex combination of simplex points")
    }
}

/// Renders with `u(μ)` from the anchors.
pub fn render_hybrid<F: RadianceField + ?Sized>(
    field: &F,
    camera: &Camera,
    anchors: &AnchorSet,
    light: &LightSample,
    config: &RayMarchConfig,
    seed: u64,
) -> Result<RenderedView> {
    let latent = |p: Vec3| anchors.latent_at(p);
    render_view(field, camera, LatentSource::Spatial(&latent), light, config, seed)
}

/// Parses `x y z  u₁ … u_N` records; `#` starts a comment.
pub fn parse_anchors(text: &str) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::AnchorParse { line: line_no, message };
        let values = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| err(format!("not a number: {tok:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() < 4 {
            return Err(err(format!("expected x y z and at least one code component, found {} values", values.len())));
        }
        let code_dim = values.len() - 3;
        if *dim.get_or_insert(code_dim) != code_dim {
            return Err(err(format!("code has {code_dim} components, earlier records have {}", dim.unwrap_or(0))));
        }
        let position = Vec3::new(values[0], values[1], values[2]);
        if !position.is_finite() {
            return Err(err("position is not finite".into()));
        }
        let code = LatentCode::new(values[3..].to_vec()).map_err(|e| err(e.to_string()))?;
        out.push(Anchor { position, code });
    }
    Ok(out)
}

/// Shortest round-trip decimal for every value, so parsing the output
/// reproduces the anchors bit for bit.
pub fn format_anchors(anchors: &[Anchor]) -> String {
    let mut s = String::from("# x y z  u1 .. uN\n");
    for a in anchors {
        let _ = write!(s, "{} {} {} ", a.position.x, a.position.y, a.position.z);
        for c in a.code.as_slice() {
            let _ = write!(s, " {c}");
        }
        s.push('\n');
    }
    s
}
