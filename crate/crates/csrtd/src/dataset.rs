//! Synthetic 2-D rearrangement scenes: goal/current render pairs with moved
//! blobs, hinged doors, camera jitter on the current frame, and analytic
//! ground-truth change masks over both states.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Camera jitter magnitude in pixels for the current frame.
pub const JITTER_PX: i64 = 2;
/// Fraction of a door's maximum opening angle beyond which a swing makes it
/// a rearrangement target.
pub const DOOR_TARGET_FRAC: f64 = 0.6;

const PERTURB_SALT: u64 = 0x7065727475726221;
const JITTER_SALT: u64 = 0x6a69747465722121;

/// Displacement threshold in pixels; 8 px at S=64, scaling linearly.
pub fn move_threshold(s: usize) -> f64 {
    8.0 * s as f64 / 64.0
}

pub fn blob_is_target(distance: f64, threshold: f64) -> bool {
    distance > threshold
}

pub fn door_is_target(delta: f64, max_angle: f64) -> bool {
    delta.abs() > DOOR_TARGET_FRAC * max_angle
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Silhouette {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hinge {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjKind {
    Blob { silhouette: Silhouette },
    /// Swing door: the slab shrinks by cos(angle) toward the hinge edge and
    /// the rest of the frame shows a darker opening.
    Door { hinge: Hinge, angle: f64, max_angle: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ObjKind,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub color: [u8; 3],
}

impl SceneObject {
    /// Whether the world point lies inside this object's full footprint
    /// (doors count their whole frame, open or closed).
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match &self.kind {
            ObjKind::Blob { silhouette: Silhouette::Rect } | ObjKind::Door { .. } => {
                dx.abs() <= self.half_w && dy.abs() <= self.half_h
            }
            ObjKind::Blob { silhouette: Silhouette::Ellipse } => {
                let u = dx / self.half_w;
                let v = dy / self.half_h;
                u * u + v * v <= 1.0
            }
        }
    }

    /// Paint color at a covered world point; None if outside.
    fn shade(&self, x: f64, y: f64) -> Option<[u8; 3]> {
        if !self.covers(x, y) {
            return None;
        }
        match &self.kind {
            ObjKind::Blob { .. } => Some(self.color),
            ObjKind::Door { hinge, angle, .. } => {
                let closed = angle.cos().max(0.0);
                let in_slab = match hinge {
                    Hinge::Left => x - (self.cx - self.half_w) <= 2.0 * self.half_w * closed,
                    Hinge::Right => (self.cx + self.half_w) - x <= 2.0 * self.half_w * closed,
                    Hinge::Top => y - (self.cy - self.half_h) <= 2.0 * self.half_h * closed,
                    Hinge::Bottom => (self.cy + self.half_h) - y <= 2.0 * self.half_h * closed,
                };
                if in_slab {
                    Some(self.color)
                } else {
                    Some(self.color.map(|c| (c as f64 * 0.35) as u8))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub s: usize,
    pub corner_colors: [[f64; 3]; 4],
    pub speckle_salt: u64,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventDelta {
    Move { dx: f64, dy: f64 },
    Swing { delta: f64, max_angle: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RearrangeEvent {
    pub object: usize,
    pub delta: EventDelta,
    pub is_target: bool,
}

fn center_range(s: usize, half: f64) -> (f64, f64) {
    let pad = JITTER_PX as f64;
    (half + pad, s as f64 - 1.0 - half - pad)
}

/// Deterministic scene: 4-10 objects, the first 0-2 of them doors, over a
/// corner-gradient background with hashed speckle.
pub fn generate_scene(seed: u64, s: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corner_colors =
        [(); 4].map(|_| [(); 3].map(|_| rng.gen_range(40.0..216.0)));
    let speckle_salt = rng.gen::<u64>();
    let n_objects = rng.gen_range(4..=10usize);
    let n_doors = rng.gen_range(0..=2usize);
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let half_w = rng.gen_range(s as f64 / 16.0..=s as f64 / 6.0);
        let half_h = rng.gen_range(s as f64 / 16.0..=s as f64 / 6.0);
        let (lo_x, hi_x) = center_range(s, half_w);
        let (lo_y, hi_y) = center_range(s, half_h);
        let cx = rng.gen_range(lo_x..=hi_x);
        let cy = rng.gen_range(lo_y..=hi_y);
        let color = [(); 3].map(|_| rng.gen_range(0..=255u8));
        let kind = if i < n_doors {
            let hinge = match rng.gen_range(0..4) {
                0 => Hinge::Left,
                1 => Hinge::Right,
                2 => Hinge::Top,
                _ => Hinge::Bottom,
            };
            let max_angle = rng.gen_range(std::f64::consts::FRAC_PI_3..=std::f64::consts::FRAC_PI_2);
            // Angles start near an endpoint so a target-sized swing always
            // fits inside [0, max_angle].
            let frac = rng.gen_range(0.0..0.2);
            let angle = if rng.gen_bool(0.5) { frac * max_angle } else { (1.0 - frac) * max_angle };
            ObjKind::Door { hinge, angle, max_angle }
        } else {
            let silhouette = if rng.gen_bool(0.5) { Silhouette::Rect } else { Silhouette::Ellipse };
            ObjKind::Blob { silhouette }
        };
        objects.push(SceneObject { kind, cx, cy, half_w, half_h, color });
    }
    Scene { s, corner_colors, speckle_salt, objects }
}

fn clamp_center(s: usize, half: f64, c: f64) -> f64 {
    let (lo, hi) = center_range(s, half);
    c.clamp(lo, hi)
}

fn perturb_one(
    scene: &Scene,
    out: &mut Scene,
    idx: usize,
    rng: &mut ChaCha8Rng,
    force_target: bool,
) -> RearrangeEvent {
    let thr = move_threshold(scene.s);
    let obj = &scene.objects[idx];
    match obj.kind {
        ObjKind::Door { angle, max_angle, .. } => {
            let to_far = if angle < 0.5 * max_angle { 1.0 } else { -1.0 };
            let frac = if force_target {
                1.0
            } else if rng.gen_bool(0.8) {
                rng.gen_range(0.65..0.95)
            } else {
                rng.gen_range(0.1..0.5)
            };
            let new_angle = (angle + to_far * frac * max_angle).clamp(0.0, max_angle);
            let delta = new_angle - angle;
            if let ObjKind::Door { angle: a, .. } = &mut out.objects[idx].kind {
                *a = new_angle;
            }
            RearrangeEvent {
                object: idx,
                delta: EventDelta::Swing { delta, max_angle },
                is_target: door_is_target(delta, max_angle),
            }
        }
        ObjKind::Blob { .. } => {
            let (mag, phi) = if force_target {
                let center = (scene.s as f64 / 2.0, scene.s as f64 / 2.0);
                (2.0 * thr, (center.1 - obj.cy).atan2(center.0 - obj.cx))
            } else {
                let mag = if rng.gen_bool(0.8) {
                    thr * rng.gen_range(1.25..3.5)
                } else {
                    thr * rng.gen_range(0.2..0.95)
                };
                (mag, rng.gen_range(0.0..std::f64::consts::TAU))
            };
            let nx = clamp_center(scene.s, obj.half_w, obj.cx + mag * phi.cos());
            let ny = clamp_center(scene.s, obj.half_h, obj.cy + mag * phi.sin());
            let (dx, dy) = (nx - obj.cx, ny - obj.cy);
            out.objects[idx].cx = nx;
            out.objects[idx].cy = ny;
            RearrangeEvent {
                object: idx,
                delta: EventDelta::Move { dx, dy },
                is_target: blob_is_target((dx * dx + dy * dy).sqrt(), thr),
            }
        }
    }
}

/// Moves/swings 1-4 objects; roughly 80% of perturbations cross the target
/// threshold and at least one target is guaranteed.
pub fn perturb_scene(scene: &Scene, seed: u64) -> (Scene, Vec<RearrangeEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scene.objects.len();
    let k = rng.gen_range(1..=4usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut out = scene.clone();
    let mut events: Vec<RearrangeEvent> = (0..k)
        .map(|i| perturb_one(scene, &mut out, order[i], &mut rng, false))
        .collect();
    if !events.iter().any(|e| e.is_target) {
        out.objects[order[0]] = scene.objects[order[0]].clone();
        events[0] = perturb_one(scene, &mut out, order[0], &mut rng, true);
    }
    (out, events)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn speckle(wx: i64, wy: i64, salt: u64) -> f64 {
    let h = splitmix64(
        (wx as u64).wrapping_mul(0x632be59bd9b4e019) ^ (wy as u64).wrapping_mul(0xd6e8feb86659fd93) ^ salt,
    );
    (h % 29) as f64 - 14.0
}

fn background(scene: &Scene, wx: i64, wy: i64) -> [f64; 3] {
    let denom = (scene.s - 1) as f64;
    let u = (wx as f64 / denom).clamp(0.0, 1.0);
    let v = (wy as f64 / denom).clamp(0.0, 1.0);
    let c = &scene.corner_colors;
    let sp = speckle(wx, wy, scene.speckle_salt);
    [0, 1, 2].map(|ch| {
        let top = c[0][ch] * (1.0 - u) + c[1][ch] * u;
        let bot = c[2][ch] * (1.0 - u) + c[3][ch] * u;
        top * (1.0 - v) + bot * v + sp
    })
}

/// Rasterizes the scene with the camera shifted by `jitter` pixels: pixel
/// (px, py) samples world point (px - jx, py - jy).
pub fn render(scene: &Scene, jitter: (i64, i64)) -> RgbImage {
    let s = scene.s;
    let mut img = RgbImage::new(s, s);
    for py in 0..s {
        for px in 0..s {
            let (wx, wy) = (px as i64 - jitter.0, py as i64 - jitter.1);
            let mut rgb = background(scene, wx, wy);
            for obj in &scene.objects {
                if let Some(c) = obj.shade(wx as f64, wy as f64) {
                    rgb = c.map(|v| v as f64);
                }
            }
            img.set_pixel(px, py, rgb.map(|v| v.clamp(0.0, 255.0) as u8));
        }
    }
    img
}

/// Union of the target objects' footprints in both poses, expressed in
/// current-frame (jittered) pixel coordinates.
pub fn target_mask(
    goal: &Scene,
    cur: &Scene,
    events: &[RearrangeEvent],
    jitter: (i64, i64),
) -> Vec<u8> {
    let s = goal.s;
    let mut mask = vec![0u8; s * s];
    for ev in events.iter().filter(|e| e.is_target) {
        for py in 0..s {
            for px in 0..s {
                let x = (px as i64 - jitter.0) as f64;
                let y = (py as i64 - jitter.1) as f64;
                if goal.objects[ev.object].covers(x, y) || cur.objects[ev.object].covers(x, y) {
                    mask[py * s + px] = 1;
                }
            }
        }
    }
    mask
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub goal: RgbImage,
    pub cur: RgbImage,
    pub mask: Vec<u8>,
    pub jitter: (i64, i64),
    pub events: Vec<RearrangeEvent>,
}

pub fn make_sample(seed: u64, s: usize) -> Sample {
    let scene = generate_scene(seed, s);
    let (cur_scene, events) = perturb_scene(&scene, seed ^ PERTURB_SALT);
    let mut jrng = ChaCha8Rng::seed_from_u64(seed ^ JITTER_SALT);
    let jitter = (
        if jrng.gen_bool(0.5) { JITTER_PX } else { -JITTER_PX },
        if jrng.gen_bool(0.5) { JITTER_PX } else { -JITTER_PX },
    );
    let goal = render(&scene, (0, 0));
    let cur = render(&cur_scene, jitter);
    let mask = target_mask(&scene, &cur_scene, &events, jitter);
    Sample { seed, goal, cur, mask, jitter, events }
}

impl Sample {
    pub fn meta_text(&self) -> String {
        let mut out = format!(
            "seed={}\njitter={},{}\nn_events={}\n",
            self.seed,
            self.jitter.0,
            self.jitter.1,
            self.events.len()
        );
        for ev in &self.events {
            match ev.delta {
                EventDelta::Move { dx, dy } => out.push_str(&format!(
                    "event=obj:{} kind:blob dx:{dx:.4} dy:{dy:.4} dist:{:.4} target:{}\n",
                    ev.object,
                    (dx * dx + dy * dy).sqrt(),
                    ev.is_target
                )),
                EventDelta::Swing { delta, max_angle } => out.push_str(&format!(
                    "event=obj:{} kind:door delta:{delta:.4} max:{max_angle:.4} target:{}\n",
                    ev.object, ev.is_target
                )),
            }
        }
        out
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const SPLIT_SEED_STRIDE: u64 = 1 << 20;

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub base_seed: u64,
}

impl SplitSpec {
    pub fn desk(base_seed: u64) -> Self {
        Self { train: 500, val: 100, test: 100, base_seed }
    }

    pub fn count(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }

    /// Disjoint per-split seed ranges: split i covers
    /// [base + i*stride, base + i*stride + count).
    pub fn sample_seed(&self, split: &str, index: usize) -> u64 {
        let lane = SPLITS.iter().position(|&s| s == split).unwrap_or(2) as u64;
        self.base_seed
            .wrapping_add(lane * SPLIT_SEED_STRIDE)
            .wrapping_add(index as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let limit = SPLIT_SEED_STRIDE as usize;
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        if self.train >= limit || self.val >= limit || self.test >= limit {
            return Err(Error::Config(format!("split sizes must stay below {limit}")));
        }
        Ok(())
    }
}

/// Worker threads for parallel sections; CSRTD_THREADS caps it.
pub fn worker_count() -> usize {
    match std::env::var("CSRTD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

fn write_sample(dir: &Path, id: &str, sample: &Sample) -> Result<()> {
    write_ppm(&dir.join(format!("{id}_goal.ppm")), &sample.goal)?;
    write_ppm(&dir.join(format!("{id}_cur.ppm")), &sample.cur)?;
    let mask = GrayImage {
        width: sample.goal.width,
        height: sample.goal.height,
        data: sample.mask.iter().map(|&v| v * 255).collect(),
    };
    write_pgm(&dir.join(format!("{id}_mask.pgm")), &mask)?;
    let meta_path = dir.join(format!("{id}_meta.txt"));
    fs::write(&meta_path, sample.meta_text())
        .map_err(|e| Error::io(meta_path.display().to_string(), e))
}

/// Generates every split to disk and writes the manifest. Samples are
/// seed-determined, so output bytes are identical for any worker count.
pub fn build_dataset(spec: &SplitSpec, s: usize, out_dir: &Path, workers: usize) -> Result<usize> {
    spec.validate()?;
    if s < 16 {
        return Err(Error::Config("image side must be at least 16".into()));
    }
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (lane, split) in SPLITS.iter().enumerate() {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for i in 0..spec.count(split) {
            jobs.push((lane, i));
        }
    }
    let workers = workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for w in 0..workers {
            let jobs = &jobs;
            handles.push(scope.spawn(move || -> Result<()> {
                for (lane, i) in jobs.iter().skip(w).step_by(workers) {
                    let split = SPLITS[*lane];
                    let sample = make_sample(spec.sample_seed(split, *i), s);
                    write_sample(&out_dir.join(split), &sample_id(*i), &sample)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("generator worker panicked")?;
        }
        Ok(())
    })?;
    let mut manifest = String::new();
    for split in SPLITS {
        for i in 0..spec.count(split) {
            manifest.push_str(&format!("{split} {}\n", sample_id(i)));
        }
    }
    let mpath = out_dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(jobs.len())
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub goal: RgbImage,
    pub cur: RgbImage,
    pub mask: Vec<u8>,
}

pub fn sample_paths(data_dir: &Path, split: &str, id: &str) -> [PathBuf; 3] {
    let dir = data_dir.join(split);
    [
        dir.join(format!("{id}_goal.ppm")),
        dir.join(format!("{id}_cur.ppm")),
        dir.join(format!("{id}_mask.pgm")),
    ]
}

pub fn load_sample(data_dir: &Path, split: &str, id: &str) -> Result<LoadedSample> {
    let [goal_p, cur_p, mask_p] = sample_paths(data_dir, split, id);
    let goal = read_ppm(&goal_p)?;
    let cur = read_ppm(&cur_p)?;
    let mask_img = read_pgm(&mask_p)?;
    if goal.width != cur.width
        || goal.height != cur.height
        || goal.width != mask_img.width
        || goal.height != mask_img.height
    {
        return Err(Error::Dataset(format!("{split}/{id}: mismatched image sizes")));
    }
    let mask = mask_img.data.iter().map(|&v| u8::from(v > 127)).collect();
    Ok(LoadedSample { id: id.to_string(), goal, cur, mask })
}

pub fn manifest_ids(data_dir: &Path, split: &str) -> Result<Vec<String>> {
    let mpath = data_dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut ids = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(sp), Some(id)) if sp == split => ids.push(id.to_string()),
            (Some(_), Some(_)) => {}
            _ if line.trim().is_empty() => {}
            _ => return Err(Error::Dataset(format!("malformed manifest line: {line}"))),
        }
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!("split {split} has no manifest entries")));
    }
    Ok(ids)
}

pub fn load_split(data_dir: &Path, split: &str) -> Result<Vec<LoadedSample>> {
    manifest_ids(data_dir, split)?
        .iter()
        .map(|id| load_sample(data_dir, split, id))
        .collect()
}

/// [3, S, S] tensor scaled to [0, 1].
pub fn image_to_tensor<E: Scalar>(img: &RgbImage) -> Result<Tensor<E>> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![E::zero(); 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = E::c(img.data[3 * p + ch] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}
