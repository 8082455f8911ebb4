//! Synthetic scenes, block splitting and sampling, and the text formats.
//!
//! `ptsseg` v1:
//!
//! ```text
//! ptsseg 1 <N> <C>
//! # extent <ex> <ey> <ez>
//! # class <i> <name>
//! x y z r g b sem ins        (N lines)
//! ```
//!
//! Predictions: header `ptspred 1 <N>`, then N lines `x y z sem ins`.
//! Lines starting with `#` are comments except for the two directives above.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::Matrix;
use crate::losses::dense_ids;

pub const SCENE_CLASSES: [&str; 4] = ["floor", "wall", "box", "sphere"];
pub const SHAPE_CLASSES: [&str; 2] = ["top", "leg"];

const FLOOR: usize = 0;
const WALL: usize = 1;
const BOX: usize = 2;
const SPHERE: usize = 3;

/// Mixes a base seed with a path of indices into an independent stream seed.
pub fn stream_seed(base: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Scene,
    Shape,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(Mode::Scene),
            "shape" => Ok(Mode::Shape),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected scene or shape)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scene => "scene",
            Mode::Shape => "shape",
        }
    }

    pub fn feature_width(self) -> usize {
        match self {
            Mode::Scene => 9,
            Mode::Shape => 3,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Mode::Scene => &SCENE_CLASSES,
            Mode::Shape => &SHAPE_CLASSES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub coords: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub sem: Vec<usize>,
    pub ins: Vec<usize>,
    pub extent: [f64; 3],
    pub class_names: Vec<String>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if self.colors.len() != n || self.sem.len() != n || self.ins.len() != n {
            return Err(Error::Data("scene columns have different lengths".into()));
        }
        if self.extent.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Data(format!("scene extents must be positive, got {:?}", self.extent)));
        }
        for i in 0..n {
            let p = self.coords[i];
            if (0..3).any(|a| !(p[a] >= -1e-9 && p[a] <= self.extent[a] + 1e-9)) {
                return Err(Error::Data(format!("point {i} at {p:?} lies outside the scene extents")));
            }
            if self.colors[i].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Data(format!("point {i} has a color outside [0, 1]")));
            }
            if self.sem[i] >= self.class_names.len() {
                return Err(Error::Data(format!("point {i} has semantic label {} out of range", self.sem[i])));
            }
        }
        let mut class_of = std::collections::HashMap::new();
        for i in 0..n {
            let c = *class_of.entry(self.ins[i]).or_insert(self.sem[i]);
            if c != self.sem[i] {
                return Err(Error::Data(format!(
                    "instance {} mixes semantic classes {c} and {}",
                    self.ins[i], self.sem[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub room: [f64; 3],
    pub boxes: (usize, usize),
    pub spheres: (usize, usize),
    pub walls: bool,
    /// Surface points per square meter.
    pub density: f64,
    /// Per-coordinate jitter bound in meters.
    pub jitter: f64,
    pub color_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            room: [2.0, 2.0, 1.2],
            boxes: (2, 3),
            spheres: (1, 2),
            walls: true,
            density: 300.0,
            jitter: 0.005,
            color_noise: 0.03,
        }
    }
}

const BASE_COLORS: [[f64; 3]; 4] = [
    [0.55, 0.45, 0.35],
    [0.85, 0.85, 0.80],
    [0.30, 0.40, 0.75],
    [0.80, 0.30, 0.25],
];

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    scene: Scene,
    next_ins: usize,
    jitter: f64,
    color_noise: f64,
}

impl Builder<'_> {
    fn count(&mut self, area: f64, density: f64) -> usize {
        let expected = area * density;
        let base = expected.floor();
        let extra = self.rng.gen_bool((expected - base).clamp(0.0, 1.0));
        (base as usize + extra as usize).max(1)
    }

    fn instance_color(&mut self, class: usize) -> [f64; 3] {
        let base = BASE_COLORS[class % BASE_COLORS.len()];
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            *v = (base[k] + self.rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
        }
        c
    }

    fn push(&mut self, p: [f64; 3], color: [f64; 3], class: usize, ins: usize) {
        let ext = self.scene.extent;
        let mut q = [0.0; 3];
        let mut c = [0.0; 3];
        for a in 0..3 {
            let j = if self.jitter > 0.0 {
                self.rng.gen_range(-self.jitter..=self.jitter)
            } else {
                0.0
            };
            q[a] = (p[a] + j).clamp(0.0, ext[a]);
            let n = if self.color_noise > 0.0 {
                self.rng.gen_range(-self.color_noise..=self.color_noise)
            } else {
                0.0
            };
            c[a] = (color[a] + n).clamp(0.0, 1.0);
        }
        self.scene.coords.push(q);
        self.scene.colors.push(c);
        self.scene.sem.push(class);
        self.scene.ins.push(ins);
    }

    /// Uniform samples on an axis-aligned rectangle: `fixed` axis held at
    /// `at`, the other two spanning `lo..hi`.
    fn rect(&mut self, fixed: usize, at: f64, lo: [f64; 3], hi: [f64; 3], density: f64, color: [f64; 3], class: usize, ins: usize) {
        let axes: Vec<usize> = (0..3).filter(|&a| a != fixed).collect();
        let area = (hi[axes[0]] - lo[axes[0]]) * (hi[axes[1]] - lo[axes[1]]);
        let n = self.count(area, density);
        for _ in 0..n {
            let mut p = [0.0; 3];
            p[fixed] = at;
            for &a in &axes {
                p[a] = if hi[a] > lo[a] { self.rng.gen_range(lo[a]..hi[a]) } else { lo[a] };
            }
            self.push(p, color, class, ins);
        }
    }

    /// Five visible faces of a box resting on the floor.
    fn solid_box(&mut self, lo: [f64; 3], hi: [f64; 3], density: f64, class: usize) {
        let ins = self.next_ins;
        self.next_ins += 1;
        let color = self.instance_color(class);
        self.rect(2, hi[2], lo, hi, density, color, class, ins);
        for a in 0..2 {
            self.rect(a, lo[a], lo, hi, density, color, class, ins);
            self.rect(a, hi[a], lo, hi, density, color, class, ins);
        }
    }

    fn sphere(&mut self, center: [f64; 3], r: f64, density: f64) {
        let ins = self.next_ins;
        self.next_ins += 1;
        let color = self.instance_color(SPHERE);
        let n = self.count(4.0 * std::f64::consts::PI * r * r, density);
        for _ in 0..n {
            let z: f64 = self.rng.gen_range(-1.0..1.0);
            let t: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            let p = [center[0] + r * s * t.cos(), center[1] + r * s * t.sin(), center[2] + r * z];
            self.push(p, color, SPHERE, ins);
        }
    }
}

/// Axis-aligned footprints placed without overlap. Returns `None` when no
/// free spot is found.
fn place(rng: &mut ChaCha8Rng, room: [f64; 3], taken: &[[f64; 4]], w: f64, d: f64, margin: f64) -> Option<[f64; 4]> {
    if w + 2.0 * margin > room[0] || d + 2.0 * margin > room[1] {
        return None;
    }
    for _ in 0..200 {
        let x = rng.gen_range(margin..=room[0] - margin - w);
        let y = rng.gen_range(margin..=room[1] - margin - d);
        let cand = [x, y, x + w, y + d];
        let clear = taken.iter().all(|t| {
            cand[2] + margin <= t[0] || t[2] + margin <= cand[0] || cand[3] + margin <= t[1] || t[3] + margin <= cand[1]
        });
        if clear {
            return Some(cand);
        }
    }
    None
}

const LAYOUT_ATTEMPTS: usize = 50;

enum Object {
    Box { fp: [f64; 4], h: f64 },
    Sphere { fp: [f64; 4], r: f64 },
}

/// Sizes and non-overlapping footprints for every object, or `None` if
/// this draw does not fit.
fn plan_layout(rng: &mut ChaCha8Rng, room: [f64; 3], n_boxes: usize, n_spheres: usize) -> Option<Vec<Object>> {
    let margin = 0.1;
    let mut taken: Vec<[f64; 4]> = Vec::new();
    let mut plan = Vec::with_capacity(n_boxes + n_spheres);
    for _ in 0..n_boxes {
        let w = rng.gen_range(0.3..0.6);
        let d = rng.gen_range(0.3..0.6);
        let h = rng.gen_range(0.25..0.7f64).min(room[2] * 0.8);
        let fp = place(rng, room, &taken, w, d, margin)?;
        taken.push(fp);
        plan.push(Object::Box { fp, h });
    }
    for _ in 0..n_spheres {
        let r = rng.gen_range(0.12..0.25f64).min(room[2] * 0.45);
        let fp = place(rng, room, &taken, 2.0 * r, 2.0 * r, margin)?;
        taken.push(fp);
        plan.push(Object::Sphere { fp, r });
    }
    Some(plan)
}

/// Room with a floor, optionally two walls (along x = 0 and y = 0), and
/// boxes and spheres standing on the floor. Instance ids are dense and
/// assigned in construction order.
pub fn generate_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let room = spec.room;
    if room.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Generation(format!("room size must be positive, got {room:?}")));
    }
    if spec.boxes.0 > spec.boxes.1 || spec.spheres.0 > spec.spheres.1 {
        return Err(Error::Generation("object count range has min above max".into()));
    }
    if !(spec.density > 0.0) {
        return Err(Error::Generation("point density must be positive".into()));
    }
    let mut b = Builder {
        rng,
        scene: Scene {
            coords: Vec::new(),
            colors: Vec::new(),
            sem: Vec::new(),
            ins: Vec::new(),
            extent: room,
            class_names: Mode::Scene.class_names(),
        },
        next_ins: 0,
        jitter: spec.jitter,
        color_noise: spec.color_noise,
    };
    let floor_color = b.instance_color(FLOOR);
    b.rect(2, 0.0, [0.0; 3], room, spec.density, floor_color, FLOOR, 0);
    b.next_ins = 1;
    if spec.walls {
        for axis in [0usize, 1] {
            let ins = b.next_ins;
            b.next_ins += 1;
            let color = b.instance_color(WALL);
            // walls are sampled at half density so they do not swamp objects
            b.rect(axis, 0.0, [0.0; 3], room, spec.density * 0.5, color, WALL, ins);
        }
    }
    let n_boxes = b.rng.gen_range(spec.boxes.0..=spec.boxes.1);
    let n_spheres = b.rng.gen_range(spec.spheres.0..=spec.spheres.1);
    let plan = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| plan_layout(b.rng, room, n_boxes, n_spheres))
        .ok_or_else(|| {
            Error::Generation(format!(
                "cannot fit {n_boxes} boxes and {n_spheres} spheres into a {room:?} room"
            ))
        })?;
    for obj in plan {
        match obj {
            Object::Box { fp, h } => b.solid_box([fp[0], fp[1], 0.0], [fp[2], fp[3], h], spec.density, BOX),
            Object::Sphere { fp, r } => b.sphere([fp[0] + r, fp[1] + r, r], r, spec.density),
        }
    }
    Ok(b.scene)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub density: f64,
    pub jitter: f64,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec {
            density: 1500.0,
            jitter: 0.003,
        }
    }
}

/// A table: one top slab and four legs, each an instance.
pub fn generate_shape(spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    if !(spec.density > 0.0) {
        return Err(Error::Generation("point density must be positive".into()));
    }
    let w = rng.gen_range(0.6..1.0);
    let d = rng.gen_range(0.4..0.7);
    let h = rng.gen_range(0.5..0.8);
    let leg = rng.gen_range(0.04..0.07);
    let slab = rng.gen_range(0.03..0.06);
    let mut b = Builder {
        rng,
        scene: Scene {
            coords: Vec::new(),
            colors: Vec::new(),
            sem: Vec::new(),
            ins: Vec::new(),
            extent: [w, d, h],
            class_names: Mode::Shape.class_names(),
        },
        next_ins: 0,
        jitter: spec.jitter,
        color_noise: 0.0,
    };
    b.solid_box([0.0, 0.0, h - slab], [w, d, h], spec.density, 0);
    for (x, y) in [(0.0, 0.0), (w - leg, 0.0), (0.0, d - leg), (w - leg, d - leg)] {
        b.solid_box([x, y, 0.0], [x + leg, y + leg, h - slab], spec.density, 1);
    }
    Ok(b.scene)
}

/// A square x-y window of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub points: Vec<usize>,
    pub origin: [f64; 2],
    pub size: f64,
}

impl Block {
    pub fn center(&self) -> [f64; 2] {
        [self.origin[0] + self.size / 2.0, self.origin[1] + self.size / 2.0]
    }
}

fn axis_starts(extent: f64, size: f64, stride: f64) -> usize {
    let over = (extent - size).max(0.0);
    // tolerate rounding so exact multiples do not spawn a sliver block
    ((over / stride) - 1e-9).ceil().max(0.0) as usize + 1
}

/// Square windows of side `size` starting every `stride` meters. The last
/// window along each axis extends to the scene boundary, so every point
/// lands in at least one window, and in exactly one when `stride == size`.
/// Empty windows are dropped; the rest come in row-major (y, then x) order.
pub fn split_blocks_strided(scene: &Scene, size: f64, stride: f64) -> Result<Vec<Block>> {
    if !(size > 0.0 && stride > 0.0 && stride <= size) {
        return Err(Error::Config(format!(
            "block size {size} and stride {stride} must satisfy 0 < stride <= size"
        )));
    }
    let nx = axis_starts(scene.extent[0], size, stride);
    let ny = axis_starts(scene.extent[1], size, stride);
    let inside = |v: f64, k: usize, n: usize| {
        let lo = k as f64 * stride;
        v >= lo && (k + 1 == n || v < lo + size)
    };
    let mut blocks = Vec::new();
    for ky in 0..ny {
        for kx in 0..nx {
            let points: Vec<usize> = (0..scene.len())
                .filter(|&i| inside(scene.coords[i][0], kx, nx) && inside(scene.coords[i][1], ky, ny))
                .collect();
            if !points.is_empty() {
                blocks.push(Block {
                    points,
                    origin: [kx as f64 * stride, ky as f64 * stride],
                    size,
                });
            }
        }
    }
    Ok(blocks)
}

pub fn split_blocks(scene: &Scene, size: f64) -> Result<Vec<Block>> {
    split_blocks_strided(scene, size, size)
}

/// The whole scene as one block (shape mode).
pub fn whole_block(scene: &Scene) -> Block {
    Block {
        points: (0..scene.len()).collect(),
        origin: [0.0, 0.0],
        size: scene.extent[0].max(scene.extent[1]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSample {
    /// N×9 in scene mode: x, y relative to the block center, z, r, g, b,
    /// then x, y, z divided by the room extents. N×3 in shape mode:
    /// coordinates divided by the extents.
    pub features: Matrix,
    pub sem: Vec<usize>,
    /// Dense instance ids.
    pub ins: Vec<usize>,
    /// Scene index of each row.
    pub points: Vec<usize>,
    pub origin: [f64; 2],
}

pub fn sample_features(scene: &Scene, block: &Block, points: &[usize], mode: Mode) -> Matrix {
    let w = mode.feature_width();
    let c = block.center();
    let e = scene.extent;
    let mut data = Vec::with_capacity(points.len() * w);
    for &i in points {
        let p = scene.coords[i];
        let norm = [p[0] / e[0], p[1] / e[1], p[2] / e[2]].map(|v| v.clamp(0.0, 1.0));
        match mode {
            Mode::Scene => {
                data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2]]);
                data.extend_from_slice(&scene.colors[i]);
                data.extend_from_slice(&norm);
            }
            Mode::Shape => data.extend_from_slice(&norm),
        }
    }
    Matrix::from_raw(points.len(), w, data)
}

fn build_sample(scene: &Scene, block: &Block, points: Vec<usize>, mode: Mode) -> PointCloudSample {
    let features = sample_features(scene, block, &points, mode);
    let sem = points.iter().map(|&i| scene.sem[i]).collect();
    let raw: Vec<usize> = points.iter().map(|&i| scene.ins[i]).collect();
    let (ins, _) = dense_ids(&raw);
    PointCloudSample {
        features,
        sem,
        ins,
        points,
        origin: block.origin,
    }
}

/// Draws `n` points: without replacement when the block has at least `n`,
/// otherwise every point once plus random repeats, shuffled.
pub fn sample_block(scene: &Scene, block: &Block, n: usize, mode: Mode, rng: &mut ChaCha8Rng) -> Result<PointCloudSample> {
    if block.points.is_empty() {
        return Err(Error::Contract("cannot sample an empty block".into()));
    }
    if n == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    let m = block.points.len();
    let chosen: Vec<usize> = if m >= n {
        index::sample(rng, m, n).into_iter().map(|k| block.points[k]).collect()
    } else {
        let mut v = block.points.clone();
        v.extend((0..n - m).map(|_| block.points[rng.gen_range(0..m)]));
        v.shuffle(rng);
        v
    };
    Ok(build_sample(scene, block, chosen, mode))
}

/// Every point of the block in block order, used at test time.
pub fn block_all_points(scene: &Scene, block: &Block, mode: Mode) -> Result<PointCloudSample> {
    if block.points.is_empty() {
        return Err(Error::Contract("cannot sample an empty block".into()));
    }
    Ok(build_sample(scene, block, block.points.clone(), mode))
}

// ---- ptsseg text format ----

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v}")
}

pub fn ptsseg_to_string(scene: &Scene) -> String {
    let mut s = String::with_capacity(64 * scene.len() + 128);
    let _ = writeln!(s, "ptsseg 1 {} {}", scene.len(), scene.num_classes());
    let e = scene.extent;
    let _ = writeln!(s, "# extent {} {} {}", fmt_f64(e[0]), fmt_f64(e[1]), fmt_f64(e[2]));
    for (i, name) in scene.class_names.iter().enumerate() {
        let _ = writeln!(s, "# class {i} {name}");
    }
    for i in 0..scene.len() {
        let p = scene.coords[i];
        let c = scene.colors[i];
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(p[2]),
            fmt_f64(c[0]),
            fmt_f64(c[1]),
            fmt_f64(c[2]),
            scene.sem[i],
            scene.ins[i]
        );
    }
    s
}

pub fn write_ptsseg(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, ptsseg_to_string(scene)).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            iter: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-blank line and its 1-based number; `#` lines are returned
    /// too so callers can pick out directives.
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.iter.by_ref() {
            self.last = i + 1;
            let t = l.trim();
            if !t.is_empty() {
                return Some((i + 1, t));
            }
        }
        None
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("{what}: `{tok}` is not a valid number")))
}

fn parse_header(path: &Path, lines: &mut Lines, magic: &str, fields: usize) -> Result<Vec<usize>> {
    let (ln, head) = lines
        .next_line()
        .ok_or_else(|| parse_err(path, 1, format!("empty file, expected `{magic}` header")))?;
    let toks: Vec<&str> = head.split_whitespace().collect();
    if toks[0] != magic {
        return Err(parse_err(path, ln, format!("bad magic `{}`, expected `{magic}`", toks[0])));
    }
    if toks.len() != fields + 1 {
        return Err(parse_err(path, ln, format!("header has {} fields, expected {}", toks.len(), fields + 1)));
    }
    let vals: Vec<usize> = toks[1..]
        .iter()
        .map(|t| parse_num(path, ln, t, "header"))
        .collect::<Result<_>>()?;
    if vals[0] != 1 {
        return Err(parse_err(path, ln, format!("unsupported version {}", vals[0])));
    }
    Ok(vals)
}

pub fn parse_ptsseg(path: &Path, text: &str) -> Result<Scene> {
    let mut lines = Lines::new(text);
    let head = parse_header(path, &mut lines, "ptsseg", 3)?;
    let (n, classes) = (head[1], head[2]);
    let mut extent: Option<[f64; 3]> = None;
    let mut names: Vec<Option<String>> = vec![None; classes];
    let mut scene = Scene {
        coords: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        sem: Vec::with_capacity(n),
        ins: Vec::with_capacity(n),
        extent: [0.0; 3],
        class_names: Vec::new(),
    };
    while let Some((ln, line)) = lines.next_line() {
        if let Some(rest) = line.strip_prefix('#') {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            match toks.first().copied() {
                Some("extent") if toks.len() == 4 => {
                    let mut e = [0.0; 3];
                    for a in 0..3 {
                        e[a] = parse_num(path, ln, toks[a + 1], "extent")?;
                    }
                    extent = Some(e);
                }
                Some("class") if toks.len() >= 3 => {
                    let i: usize = parse_num(path, ln, toks[1], "class index")?;
                    if i >= classes {
                        return Err(parse_err(path, ln, format!("class index {i} out of range for {classes} classes")));
                    }
                    names[i] = Some(toks[2..].join(" "));
                }
                _ => {}
            }
            continue;
        }
        if scene.coords.len() == n {
            return Err(parse_err(path, ln, format!("more than the {n} points announced in the header")));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(parse_err(path, ln, format!("expected 8 fields `x y z r g b sem ins`, found {}", toks.len())));
        }
        let mut v = [0.0f64; 6];
        for k in 0..6 {
            v[k] = parse_num(path, ln, toks[k], "coordinate or color")?;
            if !v[k].is_finite() {
                return Err(parse_err(path, ln, format!("non-finite value `{}`", toks[k])));
            }
        }
        let sem: usize = parse_num(path, ln, toks[6], "semantic label")?;
        let ins: usize = parse_num(path, ln, toks[7], "instance label")?;
        if sem >= classes {
            return Err(parse_err(path, ln, format!("semantic label {sem} out of range for {classes} classes")));
        }
        scene.coords.push([v[0], v[1], v[2]]);
        scene.colors.push([v[3], v[4], v[5]]);
        scene.sem.push(sem);
        scene.ins.push(ins);
    }
    if scene.coords.len() < n {
        return Err(parse_err(
            path,
            lines.last + 1,
            format!("truncated: header announces {n} points but only {} present", scene.coords.len()),
        ));
    }
    scene.extent = match extent {
        Some(e) => e,
        None => {
            let mut e = [0.0f64; 3];
            for p in &scene.coords {
                for a in 0..3 {
                    e[a] = e[a].max(p[a]);
                }
            }
            e.map(|v| if v > 0.0 { v } else { 1.0 })
        }
    };
    scene.class_names = names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.unwrap_or_else(|| format!("class{i}")))
        .collect();
    scene.validate()?;
    Ok(scene)
}

pub fn read_ptsseg(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ptsseg(path, &text)
}

/// Per-point scene-level predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub coords: Vec<[f64; 3]>,
    pub sem: Vec<usize>,
    pub ins: Vec<usize>,
}

pub fn predictions_to_string(coords: &[[f64; 3]], sem: &[usize], ins: &[usize]) -> Result<String> {
    if coords.len() != sem.len() || coords.len() != ins.len() {
        return Err(Error::Contract(format!(
            "{} coordinates, {} semantic ids and {} instance ids",
            coords.len(),
            sem.len(),
            ins.len()
        )));
    }
    let mut s = String::with_capacity(48 * coords.len() + 32);
    let _ = writeln!(s, "ptspred 1 {}", coords.len());
    for i in 0..coords.len() {
        let p = coords[i];
        let _ = writeln!(s, "{} {} {} {} {}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2]), sem[i], ins[i]);
    }
    Ok(s)
}

pub fn write_predictions(path: &Path, coords: &[[f64; 3]], sem: &[usize], ins: &[usize]) -> Result<()> {
    let text = predictions_to_string(coords, sem, ins)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_predictions(path: &Path, text: &str) -> Result<Predictions> {
    let mut lines = Lines::new(text);
    let head = parse_header(path, &mut lines, "ptspred", 2)?;
    let n = head[1];
    let mut out = Predictions {
        coords: Vec::with_capacity(n),
        sem: Vec::with_capacity(n),
        ins: Vec::with_capacity(n),
    };
    while let Some((ln, line)) = lines.next_line() {
        if line.starts_with('#') {
            continue;
        }
        if out.coords.len() == n {
            return Err(parse_err(path, ln, format!("more than the {n} points announced in the header")));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(parse_err(path, ln, format!("expected 5 fields `x y z sem ins`, found {}", toks.len())));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = parse_num(path, ln, toks[a], "coordinate")?;
        }
        out.coords.push(p);
        out.sem.push(parse_num(path, ln, toks[3], "semantic label")?);
        out.ins.push(parse_num(path, ln, toks[4], "instance label")?);
    }
    if out.coords.len() < n {
        return Err(parse_err(
            path,
            lines.last + 1,
            format!("truncated: header announces {n} points but only {} present", out.coords.len()),
        ));
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(path, &text)
}

// ---- dataset manifest ----

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub mode: Mode,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ptsseg dataset");
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "classes = {}", self.class_names.join(","));
        let _ = writeln!(s, "train = {}", self.train.join(","));
        let _ = writeln!(s, "val = {}", self.val.join(","));
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Manifest> {
        let mut mode = None;
        let mut seed = 0;
        let mut classes = None;
        let mut train = Vec::new();
        let mut val = Vec::new();
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(path, i + 1, "expected `key = value`"))?;
            let v = v.trim();
            match k.trim() {
                "mode" => mode = Some(Mode::parse(v).map_err(|e| parse_err(path, i + 1, e.to_string()))?),
                "seed" => seed = parse_num(path, i + 1, v, "seed")?,
                "classes" => classes = Some(list(v)),
                "train" => train = list(v),
                "val" => val = list(v),
                other => return Err(parse_err(path, i + 1, format!("unknown manifest key `{other}`"))),
            }
        }
        let mode = mode.ok_or_else(|| Error::Data(format!("{}: manifest has no `mode`", path.display())))?;
        Ok(Manifest {
            mode,
            seed,
            class_names: classes.unwrap_or_else(|| mode.class_names()),
            train,
            val,
        })
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Manifest::parse(&path, &text)
    }

    pub fn scene_paths(dir: &Path, names: &[String]) -> Vec<PathBuf> {
        names.iter().map(|n| dir.join(n)).collect()
    }
}

/// Writes `count` scenes plus a manifest. The last `count / 5` scenes form
/// the validation split.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, mode: Mode, spec: &SceneSpec) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_val = count / 5;
    let mut names = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = rng_for(seed, &[k as u64]);
        let scene = match mode {
            Mode::Scene => generate_scene(spec, &mut rng)?,
            Mode::Shape => generate_shape(&ShapeSpec::default(), &mut rng)?,
        };
        let name = format!("scene_{k:04}.ptsseg");
        write_ptsseg(&dir.join(&name), &scene)?;
        names.push(name);
    }
    let val = names.split_off(count - n_val);
    let manifest = Manifest {
        mode,
        seed,
        class_names: mode.class_names(),
        train: names,
        val,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
