//! Synthetic shape scenes, prompt samplers and the on-disk dataset format.
//!
//! Every class is one shape kind. In the ambiguous palette all objects in a
//! scene share one flat colour, so shape is the only cue that separates
//! classes. Backgrounds are a flat colour plus uniform noise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Interior points keep this Chebyshev distance from any non-target pixel.
pub const INTERIOR_MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl From<[usize; 2]> for Point {
    fn from([x, y]: [usize; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [usize; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    /// Whether the pixel offset `(dx, dy)` from the centre is inside a shape
    /// of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => {
                // apex up, base at +0.8r
                let base = 0.8 * r;
                dy >= -r && dy <= base && dx.abs() <= (dy + r) / (base + r) * r
            }
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown shape class {s:?}; expected one of disk, square, triangle, cross, ring"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteMode {
    #[default]
    Ambiguous,
    Distinct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Interior,
    Edge,
    Mixed,
    PartialInstances,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::Interior,
        PromptMode::Edge,
        PromptMode::Mixed,
        PromptMode::PartialInstances,
    ];

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Interior => "interior",
            PromptMode::Edge => "edge",
            PromptMode::Mixed => "mixed",
            PromptMode::PartialInstances => "partial_instances",
        })
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown prompt mode {s:?}; expected interior, edge, mixed or partial_instances"
            ))
        })
    }
}

/// Scene layout and prompt sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Class names, each one of the shape kinds.
    pub classes: Vec<String>,
    /// Place only a random subset of this many classes in each scene.
    pub classes_per_scene: Option<usize>,
    /// Inclusive range of instances per class.
    pub instances_per_class: [usize; 2],
    pub image_size: usize,
    pub palette_mode: PaletteMode,
    /// Inclusive range of shape radii in pixels.
    pub radius: [usize; 2],
    /// Amplitude of the uniform background noise.
    pub noise: f32,
    /// Points per prompt.
    pub points: usize,
    /// One sample per (class, mode) in every scene.
    pub prompt_modes: Vec<PromptMode>,
    /// Emit samples for only this many randomly chosen classes per scene.
    pub samples_per_scene: Option<usize>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            classes: vec!["disk".into(), "square".into(), "cross".into()],
            classes_per_scene: None,
            instances_per_class: [1, 2],
            image_size: 64,
            palette_mode: PaletteMode::Ambiguous,
            radius: [6, 9],
            noise: 0.05,
            points: 5,
            prompt_modes: vec![PromptMode::Interior],
            samples_per_scene: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<Vec<ShapeKind>> {
        if self.classes.len() < 2 {
            return Err(Error::config("a scene spec needs at least 2 classes"));
        }
        let kinds = self
            .classes
            .iter()
            .map(|c| c.parse())
            .collect::<Result<Vec<ShapeKind>>>()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::config(format!("class {:?} listed twice", k.name())));
            }
        }
        if let Some(n) = self.classes_per_scene {
            if n == 0 || n > kinds.len() {
                return Err(Error::config(
                    "classes_per_scene must be between 1 and the number of classes",
                ));
            }
        }
        let [lo, hi] = self.instances_per_class;
        if lo == 0 || lo > hi {
            return Err(Error::config(
                "instances_per_class must be [min, max] with 1 <= min <= max",
            ));
        }
        let [rlo, rhi] = self.radius;
        if rlo < 2 || rlo > rhi || 2 * rhi + 4 > self.image_size {
            return Err(Error::config("radius range does not fit the image"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config("noise must lie in [0, 0.5]"));
        }
        if self.samples_per_scene == Some(0) {
            return Err(Error::config("samples_per_scene must be positive"));
        }
        if self.points == 0 || self.prompt_modes.is_empty() {
            return Err(Error::config("points and prompt_modes must be non-empty"));
        }
        Ok(kinds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: String,
    /// Binary `[S, S]` mask.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `[S, S, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    /// Union of the masks of every instance of `class`.
    pub fn class_mask(&self, class: &str) -> Tensor<f32> {
        let s = self.size();
        let mut out = Tensor::zeros(&[s, s]);
        for inst in self.instances.iter().filter(|i| i.class == class) {
            for (o, &m) in out.data_mut().iter_mut().zip(inst.mask.data()) {
                if m > 0.5 {
                    *o = 1.0;
                }
            }
        }
        out
    }

    pub fn classes_present(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for i in &self.instances {
            if !out.contains(&i.class) {
                out.push(i.class.clone());
            }
        }
        out
    }
}

fn palette(kind: ShapeKind) -> [f32; 3] {
    match kind {
        ShapeKind::Disk => [0.9, 0.3, 0.2],
        ShapeKind::Square => [0.2, 0.8, 0.3],
        ShapeKind::Triangle => [0.25, 0.35, 0.95],
        ShapeKind::Cross => [0.9, 0.85, 0.2],
        ShapeKind::Ring => [0.8, 0.3, 0.85],
    }
}

fn rasterize(kind: ShapeKind, cx: f64, cy: f64, r: f64, s: usize) -> Vec<bool> {
    let mut out = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
        }
    }
    out
}

/// Pixels at Chebyshev distance <= 1 from any set pixel.
fn dilate(m: &[bool], s: usize) -> Vec<bool> {
    let mut out = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            if m[y * s + x] {
                for yy in y.saturating_sub(1)..(y + 2).min(s) {
                    for xx in x.saturating_sub(1)..(x + 2).min(s) {
                        out[yy * s + xx] = true;
                    }
                }
            }
        }
    }
    out
}

/// Pure in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let kinds = spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = match spec.classes_per_scene {
        Some(n) => index::sample(&mut rng, kinds.len(), n).into_vec(),
        None => (0..kinds.len()).collect(),
    };
    chosen.sort_unstable();

    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
    let shared: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.6..0.95));

    let mut occupied = vec![false; s * s];
    let mut instances = Vec::new();
    let mut colors = Vec::new();
    for &ci in &chosen {
        let (class, kind) = (&spec.classes[ci], kinds[ci]);
        let n = rng.gen_range(spec.instances_per_class[0]..=spec.instances_per_class[1]);
        for _ in 0..n {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let r = rng.gen_range(spec.radius[0]..=spec.radius[1]) as f64;
                let lo = r + 1.0;
                let hi = s as f64 - r - 1.0;
                let cx = rng.gen_range(lo..hi);
                let cy = rng.gen_range(lo..hi);
                let m = rasterize(kind, cx, cy, r, s);
                let area = m.iter().filter(|&&b| b).count();
                // keep a one-pixel gap so instances stay separable
                let clash = dilate(&m, s).iter().zip(&occupied).any(|(&a, &b)| a && b);
                if area >= 4 && !clash {
                    placed = Some(m);
                    break;
                }
            }
            let m = placed.ok_or(Error::Placement {
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })?;
            occupied.iter_mut().zip(&m).for_each(|(o, &b)| *o |= b);
            instances.push(Instance {
                class: class.clone(),
                mask: Tensor::from_fn(&[s, s], |k| m[k] as u8 as f32),
            });
            colors.push(match spec.palette_mode {
                PaletteMode::Ambiguous => shared,
                PaletteMode::Distinct => palette(kind),
            });
        }
    }

    let mut image = Tensor::zeros(&[s, s, 3]);
    let px = image.data_mut();
    for k in 0..s * s {
        for ch in 0..3 {
            let n = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..spec.noise)
            } else {
                0.0
            };
            px[k * 3 + ch] = (bg[ch] + n).clamp(0.0, 1.0);
        }
    }
    for (inst, col) in instances.iter().zip(&colors) {
        for (k, &m) in inst.mask.data().iter().enumerate() {
            if m > 0.5 {
                px[k * 3..k * 3 + 3].copy_from_slice(col);
            }
        }
    }
    Ok(Scene { seed, image, instances })
}

/// Mask pixels whose `(2·margin+1)²` neighbourhood lies inside the mask.
/// Pixels beyond the image border count as outside.
fn interior_pixels(mask: &[bool], s: usize, margin: usize) -> Vec<Point> {
    let mut out = Vec::new();
    for y in 0..s {
        for x in 0..s {
            if !mask[y * s + x] || x < margin || y < margin || x + margin >= s || y + margin >= s {
                continue;
            }
            let inside = (y - margin..=y + margin).all(|yy| (x - margin..=x + margin).all(|xx| mask[yy * s + xx]));
            if inside {
                out.push(Point { x, y });
            }
        }
    }
    out
}

/// Mask pixels with at least one non-mask pixel (or the border) among their
/// 8 neighbours.
fn edge_pixels(mask: &[bool], s: usize) -> Vec<Point> {
    let mut out = Vec::new();
    for y in 0..s {
        for x in 0..s {
            if !mask[y * s + x] {
                continue;
            }
            let mut edge = x == 0 || y == 0 || x + 1 == s || y + 1 == s;
            for yy in y.saturating_sub(1)..(y + 2).min(s) {
                for xx in x.saturating_sub(1)..(x + 2).min(s) {
                    edge |= !mask[yy * s + xx];
                }
            }
            if edge {
                out.push(Point { x, y });
            }
        }
    }
    out
}

pub fn is_interior(mask: &Tensor<f32>, p: Point) -> bool {
    let s = mask.shape()[0];
    let m: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    interior_pixels(&m, s, INTERIOR_MARGIN).contains(&p)
}

pub fn is_edge(mask: &Tensor<f32>, p: Point) -> bool {
    let s = mask.shape()[0];
    let m: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    edge_pixels(&m, s).contains(&p)
}

fn pick(pool: &[Point], k: usize, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<Point>> {
    if k > pool.len() {
        return Err(Error::invalid(format!(
            "{k} {what} points requested but only {} eligible pixels",
            pool.len()
        )));
    }
    let mut idx = index::sample(rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

/// `k` foreground points on `class` in `scene` under `mode`.
///
/// `partial_instances` prompts a random strict subset of the class's
/// instances, using their interior pixels (all of their pixels if the
/// interior is too small), and needs at least two instances.
pub fn sample_prompts(scene: &Scene, class: &str, k: usize, mode: PromptMode, seed: u64) -> Result<Vec<Point>> {
    if k == 0 {
        return Err(Error::invalid("at least one point is required"));
    }
    let s = scene.size();
    let gt: Vec<bool> = scene.class_mask(class).data().iter().map(|&v| v > 0.5).collect();
    if !gt.iter().any(|&b| b) {
        return Err(Error::invalid(format!(
            "class {class:?} has no pixels in scene {}",
            scene.seed
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PromptMode::Interior => pick(&interior_pixels(&gt, s, INTERIOR_MARGIN), k, &mut rng, "interior"),
        PromptMode::Edge => pick(&edge_pixels(&gt, s), k, &mut rng, "edge"),
        PromptMode::Mixed => {
            let ni = k.div_ceil(2);
            let mut pts = pick(&interior_pixels(&gt, s, INTERIOR_MARGIN), ni, &mut rng, "interior")?;
            pts.extend(pick(&edge_pixels(&gt, s), k - ni, &mut rng, "edge")?);
            Ok(pts)
        }
        PromptMode::PartialInstances => {
            let inst: Vec<&Instance> = scene.instances.iter().filter(|i| i.class == class).collect();
            if inst.len() < 2 {
                return Err(Error::invalid(format!(
                    "partial_instances needs >= 2 instances of {class:?}, scene has {}",
                    inst.len()
                )));
            }
            let m = rng.gen_range(1..inst.len());
            let chosen = index::sample(&mut rng, inst.len(), m);
            let mut union = vec![false; s * s];
            for i in chosen.iter() {
                for (u, &v) in union.iter_mut().zip(inst[i].mask.data()) {
                    *u |= v > 0.5;
                }
            }
            let interior = interior_pixels(&union, s, INTERIOR_MARGIN);
            if interior.len() >= k {
                pick(&interior, k, &mut rng, "interior")
            } else {
                let all: Vec<Point> = (0..s * s)
                    .filter(|&j| union[j])
                    .map(|j| Point { x: j % s, y: j / s })
                    .collect();
                pick(&all, k, &mut rng, "instance")
            }
        }
    }
}

/// Which instances of `class` contain at least one of `points`.
pub fn prompted_instances(scene: &Scene, class: &str, points: &[Point]) -> Vec<(usize, bool)> {
    let s = scene.size();
    scene
        .instances
        .iter()
        .enumerate()
        .filter(|(_, i)| i.class == class)
        .map(|(j, i)| {
            let hit = points.iter().any(|p| i.mask.data()[p.y * s + p.x] > 0.5);
            (j, hit)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub class: String,
    pub prompt_mode: PromptMode,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub records: Vec<SceneRecord>,
}

/// Borrowed view of one training or evaluation example.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef<'a> {
    pub scene: &'a Scene,
    pub sample: &'a Sample,
}

impl Dataset {
    pub fn samples(&self) -> Vec<SampleRef<'_>> {
        self.records
            .iter()
            .flat_map(|r| {
                r.samples.iter().map(move |s| SampleRef {
                    scene: &r.scene,
                    sample: s,
                })
            })
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.scene.seed).collect()
    }

    /// Instance count per class over all scenes.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            for i in &r.scene.instances {
                *out.entry(i.class.clone()).or_insert(0) += 1;
            }
        }
        out
    }
}

fn prompt_seed(scene_seed: u64, class_idx: usize, mode: PromptMode) -> u64 {
    scene_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((class_idx as u64) << 8 | mode.tag())
}

/// Scene plus one sample per present class and prompt mode. Modes that a
/// class cannot satisfy in this scene (for example `partial_instances`
/// with a single instance) are skipped.
pub fn generate_record(spec: &SceneSpec, seed: u64) -> Result<SceneRecord> {
    let scene = generate_scene(spec, seed)?;
    let mut present: Vec<usize> = (0..spec.classes.len())
        .filter(|&ci| scene.instances.iter().any(|i| i.class == spec.classes[ci]))
        .collect();
    if let Some(n) = spec.samples_per_scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut keep = index::sample(&mut rng, present.len(), n.min(present.len())).into_vec();
        keep.sort_unstable();
        present = keep.into_iter().map(|k| present[k]).collect();
    }
    let mut samples = Vec::new();
    for ci in present {
        let class = &spec.classes[ci];
        for &mode in &spec.prompt_modes {
            match sample_prompts(&scene, class, spec.points, mode, prompt_seed(seed, ci, mode)) {
                Ok(points) => samples.push(Sample {
                    class: class.clone(),
                    prompt_mode: mode,
                    points,
                }),
                Err(Error::Invalid(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(SceneRecord { scene, samples })
}

/// `count` records with scene seeds `first_seed..first_seed + count`.
pub fn generate_dataset(spec: &SceneSpec, first_seed: u64, count: usize, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let records = exec
        .map_range(count, |i| generate_record(spec, first_seed + i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        records,
    })
}

pub const SCENES_FILE: &str = "scenes.jsonl";

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    class: String,
    mask_file: String,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    seed: u64,
    spec: SceneSpec,
    image_file: String,
    instances: Vec<InstanceLine>,
    samples: Vec<Sample>,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut lines = Vec::with_capacity(ds.records.len());
    for (i, r) in ds.records.iter().enumerate() {
        let image_file = format!("images/scene{i:05}.ptx");
        r.scene.image.save(&dir.join(&image_file))?;
        let mut instances = Vec::new();
        for (j, inst) in r.scene.instances.iter().enumerate() {
            let mask_file = format!("masks/scene{i:05}_{j:02}.ptx");
            inst.mask.save(&dir.join(&mask_file))?;
            instances.push(InstanceLine {
                class: inst.class.clone(),
                mask_file,
            });
        }
        let line = SceneLine {
            seed: r.scene.seed,
            spec: ds.spec.clone(),
            image_file,
            instances,
            samples: r.samples.clone(),
        };
        lines.push(serde_json::to_string(&line).expect("scene line serializes"));
    }
    let path = dir.join(SCENES_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(SCENES_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut spec = None;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SceneLine =
            serde_json::from_str(&line).map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        let image = Tensor::load(&dir.join(&l.image_file))?;
        let instances = l
            .instances
            .into_iter()
            .map(|i| {
                Ok(Instance {
                    mask: Tensor::load(&dir.join(&i.mask_file))?,
                    class: i.class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if spec.is_none() {
            spec = Some(l.spec);
        }
        records.push(SceneRecord {
            scene: Scene {
                seed: l.seed,
                image,
                instances,
            },
            samples: l.samples,
        });
    }
    let spec = spec.ok_or_else(|| Error::format(&path, "dataset has no scenes"))?;
    Ok(Dataset { spec, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> SceneSpec {
        SceneSpec {
            classes: vec!["disk".into(), "ring".into()],
            instances_per_class: [2, 2],
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, 0).unwrap(), generate_scene(&spec, 0).unwrap());
        assert_ne!(generate_scene(&spec, 0).unwrap(), generate_scene(&spec, 1).unwrap());
    }

    #[test]
    fn two_classes_two_instances_are_disjoint() {
        let sc = generate_scene(&two_by_two(), 3).unwrap();
        assert_eq!(sc.instances.len(), 4);
        let s = sc.size();
        for k in 0..s * s {
            let n: f32 = sc.instances.iter().map(|i| i.mask.data()[k]).sum();
            assert!(n <= 1.0);
        }
        for i in &sc.instances {
            assert!(i.mask.sum() >= 4.0);
        }
    }

    #[test]
    fn ambiguous_palette_histograms_match() {
        let sc = generate_scene(&two_by_two(), 5).unwrap();
        let hist = |class: &str| {
            let mut h = BTreeMap::new();
            let m = sc.class_mask(class);
            for (k, &v) in m.data().iter().enumerate() {
                if v > 0.5 {
                    let px: Vec<u32> = sc.image.data()[k * 3..k * 3 + 3].iter().map(|f| f.to_bits()).collect();
                    *h.entry(px).or_insert(0usize) += 1;
                }
            }
            h.into_keys().collect::<Vec<_>>()
        };
        assert_eq!(hist("disk"), hist("ring"));
    }

    #[test]
    fn colour_oracle_cannot_split_classes() {
        // A colour threshold gives every class the same mask O; for disjoint
        // classes the per-class IoUs then sum to at most 1.
        for seed in 0..20 {
            let sc = generate_scene(&two_by_two(), seed).unwrap();
            let s = sc.size();
            let o: Vec<bool> = (0..s * s).map(|k| sc.image.data()[k * 3] >= 0.55).collect();
            let iou = |class: &str| {
                let m = sc.class_mask(class);
                let (mut i, mut u) = (0, 0);
                for (&ok, &mv) in o.iter().zip(m.data()) {
                    let g = mv > 0.5;
                    i += (ok && g) as usize;
                    u += (ok || g) as usize;
                }
                i as f64 / u as f64
            };
            assert!(iou("disk") + iou("ring") <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let spec = SceneSpec {
            instances_per_class: [30, 30],
            radius: [12, 12],
            ..Default::default()
        };
        let err = generate_scene(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("fewer") || err.contains("smaller"), "{err}");
    }

    #[test]
    fn spec_validation() {
        let one = SceneSpec {
            classes: vec!["disk".into()],
            ..Default::default()
        };
        assert!(one.validate().is_err());
        let bad = SceneSpec {
            classes: vec!["disk".into(), "zebra".into()],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_instances_leaves_one_unprompted() {
        let spec = SceneSpec {
            classes: vec!["disk".into(), "square".into()],
            instances_per_class: [3, 3],
            radius: [5, 7],
            ..Default::default()
        };
        for seed in 0..10 {
            let sc = generate_scene(&spec, seed).unwrap();
            let pts = sample_prompts(&sc, "disk", 5, PromptMode::PartialInstances, seed).unwrap();
            let hits = prompted_instances(&sc, "disk", &pts);
            assert_eq!(hits.len(), 3);
            assert!(hits.iter().any(|(_, h)| !h));
            let gt = sc.class_mask("disk");
            assert!(pts.iter().all(|p| gt.at2(p.y, p.x) == 1.0));
        }
    }

    #[test]
    fn too_many_points_rejected() {
        let sc = generate_scene(&two_by_two(), 1).unwrap();
        assert!(sample_prompts(&sc, "disk", 10_000, PromptMode::Interior, 0).is_err());
        assert!(sample_prompts(&sc, "square", 1, PromptMode::Interior, 0).is_err());
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let spec = SceneSpec {
            prompt_modes: PromptMode::ALL.to_vec(),
            ..Default::default()
        };
        let ds = generate_dataset(&spec, 100, 10, Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(ds, generate_dataset(&spec, 100, 10, Exec::Sequential).unwrap());
    }

    #[test]
    fn malformed_line_and_truncated_tensor() {
        let ds = generate_dataset(&SceneSpec::default(), 0, 2, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let img = dir.path().join("images/scene00001.ptx");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..100]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene00001.ptx"), "{err}");

        let p = dir.path().join(SCENES_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(
            &p,
            format!("{}{{oops\n", text.lines().next().unwrap().to_owned() + "\n"),
        )
        .unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn two_hundred_scenes_fit_budget() {
        // 64·64·3 floats per image, 64·64 per mask, 16-byte headers
        let ds = generate_dataset(&SceneSpec::default(), 0, 200, Exec::Parallel).unwrap();
        let bytes: usize = ds
            .records
            .iter()
            .map(|r| (12 + 64 * 64 * 3 * 4) + r.scene.instances.len() * (12 + 64 * 64 * 4))
            .sum();
        assert!(bytes < 40_000_000, "{bytes}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn samples_obey_their_mode(seed in 0u64..10_000) {
            let spec = SceneSpec {
                instances_per_class: [1, 3],
                radius: [5, 7],
                prompt_modes: PromptMode::ALL.to_vec(),
                ..Default::default()
            };
            let rec = generate_record(&spec, seed).unwrap();
            for smp in &rec.samples {
                let gt = rec.scene.class_mask(&smp.class);
                prop_assert_eq!(smp.points.len(), spec.points);
                for (i, &p) in smp.points.iter().enumerate() {
                    prop_assert_eq!(gt.at2(p.y, p.x), 1.0);
                    match smp.prompt_mode {
                        PromptMode::Interior => prop_assert!(is_interior(&gt, p)),
                        PromptMode::Edge => prop_assert!(is_edge(&gt, p)),
                        PromptMode::Mixed if i < spec.points.div_ceil(2) => prop_assert!(is_interior(&gt, p)),
                        PromptMode::Mixed => prop_assert!(is_edge(&gt, p)),
                        PromptMode::PartialInstances => {}
                    }
                }
                if smp.prompt_mode == PromptMode::PartialInstances {
                    let hits = prompted_instances(&rec.scene, &smp.class, &smp.points);
                    prop_assert!(hits.iter().any(|(_, h)| !h));
                }
            }
        }
    }
}
