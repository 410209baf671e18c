//! On-disk scene sets and training batches.
//!
//! Layout: `<root>/{train,test}/scene_NNNN/` holding `left.evt`,
//! `right.evt`, `disparity.png` (16-bit) and `gt.evsk` with the float
//! records `disparity` and `valid`.

use std::fs;
use std::path::{Path, PathBuf};

use evstereo_tensor::{checkpoint, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::events::{build_multi_density, filter_window, EventStream};
use crate::imageio::write_png16;
use crate::synth::{generate_scene, SyntheticScene};

/// One stereo pair ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[M, H, W]` stacks of the last `window` events.
    pub left: Tensor,
    pub right: Tensor,
    /// `[1, H, W]`.
    pub disparity: Tensor,
    pub valid: Vec<bool>,
    pub left_events: EventStream,
    pub right_events: EventStream,
    pub window: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }
}

/// Stack the most recent `window` events of each view into `scales` density
/// channels.
pub fn stacks_from_streams(
    left: &EventStream,
    right: &EventStream,
    window: usize,
    scales: usize,
) -> Result<(Tensor, Tensor)> {
    if (left.width, left.height) != (right.width, right.height) {
        return invalid(format!(
            "views differ in size: {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        ));
    }
    let (w, h) = (left.width as usize, left.height as usize);
    let l = build_multi_density(&left.events, window, scales, w, h)?;
    let r = build_multi_density(&right.events, window, scales, w, h)?;
    Ok((l.grid, r.grid))
}

pub fn sample_from_scene(
    name: &str,
    scene: &SyntheticScene,
    window: usize,
    scales: usize,
) -> Result<Sample> {
    let (left, right) = stacks_from_streams(&scene.left, &scene.right, window, scales)?;
    let (h, w) = (scene.left.height as usize, scene.left.width as usize);
    Ok(Sample {
        name: name.to_string(),
        left,
        right,
        disparity: Tensor::new([1, h, w], scene.disparity.clone())?,
        valid: scene.valid.clone(),
        left_events: scene.left.clone(),
        right_events: scene.right.clone(),
        window,
    })
}

pub fn write_scene(dir: impl AsRef<Path>, scene: &SyntheticScene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    scene.left.save(dir.join("left.evt"))?;
    scene.right.save(dir.join("right.evt"))?;
    let (w, h) = (scene.left.width as usize, scene.left.height as usize);
    write_png16(
        dir.join("disparity.png"),
        &scene.disparity,
        &scene.valid,
        w,
        h,
    )?;
    let disp = Tensor::new([1, h, w], scene.disparity.clone())?;
    let valid = Tensor::new(
        [1, h, w],
        scene
            .valid
            .iter()
            .map(|&v| f64::from(u8::from(v)))
            .collect(),
    )?;
    checkpoint::save(
        dir.join("gt.evsk"),
        &[("disparity", &disp), ("valid", &valid)],
    )?;
    Ok(())
}

pub fn load_scene(dir: impl AsRef<Path>, window: usize, scales: usize) -> Result<Sample> {
    let dir = dir.as_ref();
    let left = EventStream::load(dir.join("left.evt"))?;
    let right = EventStream::load(dir.join("right.evt"))?;
    let (l, r) = stacks_from_streams(&left, &right, window, scales)?;
    let records = checkpoint::load(dir.join("gt.evsk"))?;
    let get = |name: &str| {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Invalid(format!("{}: no `{name}` record", dir.display())))
    };
    let disparity = get("disparity")?;
    let valid: Vec<bool> = get("valid")?.data().iter().map(|&v| v != 0.0).collect();
    let (h, w) = (left.height as usize, left.width as usize);
    if disparity.shape() != [1, h, w] || valid.len() != h * w {
        return invalid(format!(
            "{}: ground truth {:?} does not match {h}x{w} events",
            dir.display(),
            disparity.shape()
        ));
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        name,
        left: l,
        right: r,
        disparity,
        valid,
        left_events: left,
        right_events: right,
        window,
    })
}

pub fn scene_seed(base: u64, split: &str, index: usize) -> u64 {
    let salt = if split == "train" {
        0x7472_6169_6e00_0000
    } else {
        0x7465_7374_0000_0000
    };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt ^ index as u64
}

/// Generate the train and test splits under `root`.
pub fn synthesize(root: impl AsRef<Path>, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let params = cfg.scene();
    let mut dirs = Vec::new();
    for (split, count) in [("train", cfg.train_scenes), ("test", cfg.test_scenes)] {
        for i in 0..count {
            let scene = generate_scene(&params, scene_seed(cfg.seed, split, i))?;
            let dir = root.as_ref().join(split).join(format!("scene_{i:04}"));
            write_scene(&dir, &scene)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// In-memory equivalent of `synthesize` followed by `load_split`.
pub fn synthesize_samples(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>> {
    let count = if split == "train" {
        cfg.train_scenes
    } else {
        cfg.test_scenes
    };
    let params = cfg.scene();
    (0..count)
        .map(|i| {
            let scene = generate_scene(&params, scene_seed(cfg.seed, split, i))?;
            sample_from_scene(
                &format!("scene_{i:04}"),
                &scene,
                cfg.window_events,
                cfg.scales,
            )
        })
        .collect()
}

/// All scenes of a split, in name order.
pub fn load_split(
    root: impl AsRef<Path>,
    split: &str,
    window: usize,
    scales: usize,
) -> Result<Vec<Sample>> {
    let dir = root.as_ref().join(split);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("gt.evsk").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return invalid(format!("no scenes under {}", dir.display()));
    }
    dirs.iter().map(|d| load_scene(d, window, scales)).collect()
}

/// A training batch, `[B, M, c, c]` stacks and `[B, 1, c, c]` ground truth.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub disparity: Tensor,
    pub mask: Vec<bool>,
}

impl Sample {
    /// Stacks for a window ending at a random event of the left stream, at
    /// least `window` events in. Both views are cut at the same time.
    pub fn jittered_stacks(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let n = self.left_events.events.len();
        if n == 0 {
            return Ok((self.left.clone(), self.right.clone()));
        }
        let end = rng.gen_range(self.window.min(n)..=n).max(1);
        let t_end = self.left_events.events[end - 1].t + 1;
        let cut = |s: &EventStream| EventStream {
            events: filter_window(&s.events, 0, t_end),
            ..s.clone()
        };
        stacks_from_streams(
            &cut(&self.left_events),
            &cut(&self.right_events),
            self.window,
            self.left.shape()[0],
        )
    }
}

/// Random crops with optional vertical flips and window jitter. The crop's
/// mask also drops pixels whose match falls left of the crop.
pub fn make_batch(
    samples: &[Sample],
    batch: usize,
    crop: usize,
    flip: bool,
    jitter: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if samples.is_empty() {
        return invalid("no training samples");
    }
    let (mut ls, mut rs, mut ds, mut mask) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let s = &samples[rng.gen_range(0..samples.len())];
        let (h, w) = (s.height(), s.width());
        if crop > h || crop > w {
            return invalid(format!("crop {crop} larger than {h}x{w} sample"));
        }
        let top = rng.gen_range(0..=h - crop);
        let left = rng.gen_range(0..=w - crop);
        let do_flip = flip && rng.gen_bool(0.5);
        let (sl, sr) = if jitter {
            s.jittered_stacks(rng)?
        } else {
            (s.left.clone(), s.right.clone())
        };
        let valid = Tensor::new(
            [1, h, w],
            s.valid.iter().map(|&v| f64::from(u8::from(v))).collect(),
        )?;
        let mut parts =
            [sl, sr, s.disparity.clone(), valid].map(|t| t.crop_spatial(top, left, crop, crop));
        for t in parts.iter_mut().flatten() {
            if do_flip {
                *t = t.flip_vertical();
            }
        }
        let [l, r, d, v] = parts;
        let (d, v) = (d?, v?);
        for (i, (&dv, &vv)) in d.data().iter().zip(v.data()).enumerate() {
            mask.push(vv != 0.0 && (i % crop) as f64 >= dv);
        }
        ls.push(l?);
        rs.push(r?);
        ds.push(d);
    }
    Ok(Batch {
        left: Tensor::stack(&ls)?,
        right: Tensor::stack(&rs)?,
        disparity: Tensor::stack(&ds)?,
        mask,
    })
}
