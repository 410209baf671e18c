//! Synthetic stereo event scenes: textured fronto-parallel planes drifting
//! in front of a rectified camera pair.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::events::{Event, EventStream};

/// Axis-aligned region in left-image coordinates, `x0..x1` by `y0..y1`.
/// `None` covers the whole (unbounded) plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub rect: Option<Rect>,
    pub disparity: u32,
    /// Texture motion per frame in pixels.
    pub velocity: (i32, i32),
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub max_disparity: u32,
    pub frames: usize,
    pub frame_us: u64,
    /// Texture dot size in pixels.
    pub block: u32,
    pub max_foreground: usize,
    /// Largest disparity drawn for random foreground planes.
    pub plane_cap: u32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            max_disparity: 32,
            frames: 4,
            frame_us: 1000,
            block: 2,
            max_foreground: 3,
            plane_cap: 28,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub left: EventStream,
    pub right: EventStream,
    /// Row-major `H * W`, in pixels.
    pub disparity: Vec<f64>,
    /// `x - d >= 0`: the match lies inside the right image.
    pub valid: Vec<bool>,
    pub planes: Vec<Plane>,
}

fn hash(mut v: u64) -> u64 {
    v = (v ^ (v >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    v = (v ^ (v >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    v ^ (v >> 33)
}

fn hash_all(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| {
        hash(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    })
}

/// Random binary dots of `block` pixels, in texture coordinates.
fn texture(seed: u64, u: i64, v: i64, block: u32) -> i8 {
    let b = i64::from(block);
    (hash_all(&[seed, u.div_euclid(b) as u64, v.div_euclid(b) as u64]) & 1) as i8
}

impl Plane {
    fn covers(&self, x: i32, y: i32) -> bool {
        self.rect.is_none_or(|r| r.contains(x, y))
    }

    fn intensity(&self, x: i32, y: i32, frame: usize, block: u32) -> i8 {
        let f = frame as i64;
        texture(
            self.texture_seed,
            i64::from(x) - i64::from(self.velocity.0) * f,
            i64::from(y) - i64::from(self.velocity.1) * f,
            block,
        )
    }
}

/// Index of the nearest plane seen at left pixel `(x, y)`; for the right
/// view pass `shift = true`, which matches plane `p` at `x + d_p`.
fn visible(planes: &[Plane], x: i32, y: i32, right: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in planes.iter().enumerate() {
        let xl = if right { x + p.disparity as i32 } else { x };
        if p.covers(xl, y) && best.is_none_or(|b| p.disparity > planes[b].disparity) {
            best = Some(i);
        }
    }
    best
}

/// Render events and ground truth for explicit planes.
pub fn render_scene(params: &SceneParams, planes: Vec<Plane>, seed: u64) -> Result<SyntheticScene> {
    if params.width == 0
        || params.height == 0
        || params.frames < 2
        || params.block == 0
        || params.frame_us == 0
    {
        return invalid(
            "scene needs a non-empty image, at least 2 frames, and positive block and frame time",
        );
    }
    if params.width > usize::from(u16::MAX) || params.height > usize::from(u16::MAX) {
        return invalid("scene too large for 16-bit event coordinates");
    }
    if let Some(p) = planes.iter().find(|p| p.disparity >= params.max_disparity) {
        return invalid(format!(
            "plane disparity {} outside [0, {}]",
            p.disparity,
            params.max_disparity.saturating_sub(1)
        ));
    }
    if !planes.iter().any(|p| p.rect.is_none()) {
        return invalid("scene needs an unbounded background plane");
    }
    let (w, h) = (params.width as i32, params.height as i32);
    let mut disparity = vec![0.0; params.width * params.height];
    let mut valid = vec![false; params.width * params.height];
    for y in 0..h {
        for x in 0..w {
            let p = visible(&planes, x, y, false).expect("background covers everything");
            let d = planes[p].disparity;
            let i = (y * w + x) as usize;
            disparity[i] = f64::from(d);
            valid[i] = x >= d as i32;
        }
    }

    let view = |right: bool| -> EventStream {
        // (t, y, left-equivalent x, x, polarity)
        let mut raw: Vec<(u64, i32, i32, i32, i8)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let Some(pi) = visible(&planes, x, y, right) else {
                    continue;
                };
                let p = &planes[pi];
                let xl = if right { x + p.disparity as i32 } else { x };
                let mut prev = p.intensity(xl, y, 0, params.block);
                for k in 1..params.frames {
                    let cur = p.intensity(xl, y, k, params.block);
                    if cur != prev {
                        let jitter = hash_all(&[seed, k as u64, y as u64, xl as u64, pi as u64])
                            % params.frame_us;
                        raw.push((
                            (k as u64 - 1) * params.frame_us + jitter,
                            y,
                            xl,
                            x,
                            if cur > prev { 1 } else { -1 },
                        ));
                    }
                    prev = cur;
                }
            }
        }
        raw.sort_unstable();
        EventStream {
            width: params.width as u32,
            height: params.height as u32,
            events: raw
                .into_iter()
                .map(|(t, y, _, x, p)| Event {
                    x: x as u16,
                    y: y as u16,
                    t,
                    p,
                })
                .collect(),
        }
    };
    Ok(SyntheticScene {
        left: view(false),
        right: view(true),
        disparity,
        valid,
        planes,
    })
}

fn random_velocity(rng: &mut ChaCha8Rng) -> (i32, i32) {
    loop {
        let v = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
        if v != (0, 0) {
            return v;
        }
    }
}

/// Random layered scene: a background plane with disparity below `D/2` and
/// up to `max_foreground` nearer rectangles no further than `plane_cap`.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SyntheticScene> {
    if params.max_disparity < 4 {
        return invalid("random scenes need a disparity budget of at least 4");
    }
    let cap = params.plane_cap.min(params.max_disparity - 1);
    if cap < params.max_disparity / 2 {
        return invalid(format!(
            "plane_cap {} is below half the disparity budget",
            params.plane_cap
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = rng.gen_range(0..params.max_disparity / 2);
    let mut planes = vec![Plane {
        rect: None,
        disparity: bg,
        velocity: random_velocity(&mut rng),
        texture_seed: rng.gen(),
    }];
    let (w, h) = (params.width as i32, params.height as i32);
    let count = rng.gen_range(1..=params.max_foreground.max(1));
    for _ in 0..count {
        let rw = rng.gen_range((w / 5).max(2)..=(w / 2).max(3));
        let rh = rng.gen_range((h / 5).max(2)..=(h / 2).max(3));
        let x0 = rng.gen_range(0..=(w - rw).max(0));
        let y0 = rng.gen_range(0..=(h - rh).max(0));
        planes.push(Plane {
            rect: Some(Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
            }),
            disparity: rng.gen_range(bg + 1..=cap),
            velocity: random_velocity(&mut rng),
            texture_seed: rng.gen(),
        });
    }
    render_scene(params, planes, seed)
}
