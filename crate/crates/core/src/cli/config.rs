//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cluster::{MeanShiftOptions, MergeOptions};
use crate::data::{Mode, SceneSpec};
use crate::error::{Error, Result};
use crate::losses::InstanceLossParams;
use crate::model::ArchDescriptor;
use crate::selfpred::{AffinityOptions, Distance, SelfPredConfig, SplitMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub groups: usize,
    pub bidirectional: bool,
    pub stratified: bool,
    pub distance: Distance,
    pub self_loops: bool,
    pub delta_v: f64,
    pub delta_d: f64,
    pub reg_weight: f64,
    pub bandwidth: f64,
    /// 0 seeds mean-shift from every point.
    pub max_seeds: usize,
    pub merge_cell: f64,
    pub merge_overlap: f64,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub points_per_block: usize,
    pub block_size: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
    pub seed: u64,
    pub mode: Mode,
    pub point_widths: Vec<usize>,
    pub fuse_widths: Vec<usize>,
    pub ins_hidden: usize,
    pub ins_dim: usize,
    pub sem_dim: usize,
    pub room: [f64; 3],
    pub boxes: (usize, usize),
    pub spheres: (usize, usize),
    pub walls: bool,
    pub density: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchDescriptor::scene(4);
        let scene = SceneSpec::default();
        RunConfig {
            sigma: 1.0,
            alpha: 0.99,
            beta: 0.8,
            groups: 8,
            bidirectional: true,
            stratified: true,
            distance: Distance::SquaredEuclidean,
            self_loops: false,
            delta_v: 0.5,
            delta_d: 1.5,
            reg_weight: 0.001,
            bandwidth: 0.8,
            max_seeds: 0,
            merge_cell: 0.5,
            merge_overlap: 0.3,
            lr: 0.01,
            lr_halve_every: 20,
            momentum: 0.0,
            epochs: 100,
            batch: 8,
            points_per_block: 512,
            block_size: 1.0,
            val_every: 5,
            seed: 0,
            mode: Mode::Scene,
            point_widths: arch.point_widths,
            fuse_widths: arch.fuse_widths,
            ins_hidden: arch.ins_hidden,
            ins_dim: arch.ins_dim,
            sem_dim: arch.sem_dim,
            room: scene.room,
            boxes: scene.boxes,
            spheres: scene.spheres,
            walls: scene.walls,
            density: scene.density,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|t| t.trim().parse().ok()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_range(v: &str) -> Option<(usize, usize)> {
    match parse_list::<usize>(v)?.as_slice() {
        [a] => Some((*a, *a)),
        [a, b] => Some((*a, *b)),
        _ => None,
    }
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad())?
            };
        }
        let boolean = || match value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "sigma" => self.sigma = num!(f64),
            "alpha" => self.alpha = num!(f64),
            "beta" => self.beta = num!(f64),
            "groups" | "G" => self.groups = num!(usize),
            "bidirectional" => self.bidirectional = boolean()?,
            "stratified" => self.stratified = boolean()?,
            "split" => {
                self.stratified = match value {
                    "stratified" => true,
                    "random" => false,
                    _ => return Err(bad()),
                }
            }
            "distance" => {
                self.distance = match value {
                    "squared" => Distance::SquaredEuclidean,
                    "euclidean" => Distance::Euclidean,
                    _ => return Err(bad()),
                }
            }
            "self_loops" => self.self_loops = boolean()?,
            "delta_v" => self.delta_v = num!(f64),
            "delta_d" => self.delta_d = num!(f64),
            "reg_weight" => self.reg_weight = num!(f64),
            "bandwidth" => self.bandwidth = num!(f64),
            "max_seeds" => self.max_seeds = num!(usize),
            "merge_cell" => self.merge_cell = num!(f64),
            "merge_overlap" => self.merge_overlap = num!(f64),
            "lr" => self.lr = num!(f64),
            "lr_halve_every" => self.lr_halve_every = num!(usize),
            "momentum" => self.momentum = num!(f64),
            "epochs" => self.epochs = num!(usize),
            "batch" => self.batch = num!(usize),
            "points_per_block" => self.points_per_block = num!(usize),
            "block_size" => self.block_size = num!(f64),
            "val_every" => self.val_every = num!(usize),
            "seed" => self.seed = num!(u64),
            "mode" => self.mode = Mode::parse(value)?,
            "point_widths" => self.point_widths = parse_list(value).ok_or_else(bad)?,
            "fuse_widths" => self.fuse_widths = parse_list(value).ok_or_else(bad)?,
            "ins_hidden" => self.ins_hidden = num!(usize),
            "ins_dim" => self.ins_dim = num!(usize),
            "sem_dim" => self.sem_dim = num!(usize),
            "room" => {
                let v: Vec<f64> = parse_list(value).ok_or_else(bad)?;
                self.room = v.try_into().map_err(|_| bad())?;
            }
            "boxes" => self.boxes = parse_range(value).ok_or_else(bad)?,
            "spheres" => self.spheres = parse_range(value).ok_or_else(bad)?,
            "walls" => self.walls = boolean()?,
            "density" => self.density = num!(f64),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let distance = match self.distance {
            Distance::SquaredEuclidean => "squared",
            Distance::Euclidean => "euclidean",
        };
        let rows: Vec<(&str, String)> = vec![
            ("sigma", self.sigma.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("groups", self.groups.to_string()),
            ("bidirectional", self.bidirectional.to_string()),
            ("stratified", self.stratified.to_string()),
            ("distance", distance.to_string()),
            ("self_loops", self.self_loops.to_string()),
            ("delta_v", self.delta_v.to_string()),
            ("delta_d", self.delta_d.to_string()),
            ("reg_weight", self.reg_weight.to_string()),
            ("bandwidth", self.bandwidth.to_string()),
            ("max_seeds", self.max_seeds.to_string()),
            ("merge_cell", self.merge_cell.to_string()),
            ("merge_overlap", self.merge_overlap.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_halve_every", self.lr_halve_every.to_string()),
            ("momentum", self.momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("points_per_block", self.points_per_block.to_string()),
            ("block_size", self.block_size.to_string()),
            ("val_every", self.val_every.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("point_widths", join(&self.point_widths)),
            ("fuse_widths", join(&self.fuse_widths)),
            ("ins_hidden", self.ins_hidden.to_string()),
            ("ins_dim", self.ins_dim.to_string()),
            ("sem_dim", self.sem_dim.to_string()),
            ("room", join(&self.room)),
            ("boxes", format!("{},{}", self.boxes.0, self.boxes.1)),
            ("spheres", format!("{},{}", self.spheres.0, self.spheres.1)),
            ("walls", self.walls.to_string()),
            ("density", self.density.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.groups < 2 || self.groups % 2 != 0 {
            return fail(format!("groups must be even and at least 2, got {}", self.groups));
        }
        if self.points_per_block < self.groups {
            return fail(format!(
                "points_per_block ({}) must be at least groups ({})",
                self.points_per_block, self.groups
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch == 0 {
            return fail("epochs and batch must be positive".into());
        }
        if !(self.bandwidth > 0.0 && self.merge_cell > 0.0 && self.block_size > 0.0) {
            return fail("bandwidth, merge_cell and block_size must be positive".into());
        }
        if !(self.merge_overlap > 0.0 && self.merge_overlap <= 1.0) {
            return fail(format!("merge_overlap must lie in (0, 1], got {}", self.merge_overlap));
        }
        self.instance_loss().validate()?;
        self.arch(2).validate()?;
        Ok(())
    }

    pub fn arch(&self, num_classes: usize) -> ArchDescriptor {
        ArchDescriptor {
            input_width: self.mode.feature_width(),
            point_widths: self.point_widths.clone(),
            fuse_widths: self.fuse_widths.clone(),
            ins_hidden: self.ins_hidden,
            ins_dim: self.ins_dim,
            sem_dim: self.sem_dim,
            num_classes,
        }
    }

    pub fn instance_loss(&self) -> InstanceLossParams {
        InstanceLossParams {
            delta_v: self.delta_v,
            delta_d: self.delta_d,
            reg_weight: self.reg_weight,
        }
    }

    pub fn selfpred(&self) -> SelfPredConfig {
        SelfPredConfig {
            alpha: self.alpha,
            affinity: AffinityOptions {
                sigma: self.sigma,
                distance: self.distance,
                self_loops: self.self_loops,
            },
            bidirectional: self.bidirectional,
        }
    }

    pub fn split_mode(&self) -> SplitMode {
        if self.stratified {
            SplitMode::Stratified
        } else {
            SplitMode::Random
        }
    }

    pub fn mean_shift(&self) -> MeanShiftOptions {
        MeanShiftOptions {
            bandwidth: self.bandwidth,
            max_seeds: (self.max_seeds > 0).then_some(self.max_seeds),
            ..Default::default()
        }
    }

    pub fn merge(&self) -> MergeOptions {
        MergeOptions {
            cell: self.merge_cell,
            overlap_thresh: self.merge_overlap,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            room: self.room,
            boxes: self.boxes,
            spheres: self.spheres,
            walls: self.walls,
            density: self.density,
            ..Default::default()
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halve_every == 0 {
            self.lr
        } else {
            self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
