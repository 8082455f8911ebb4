//! PointNet-style backbone with instance, semantic and joint embedding heads.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Axis, Graph, Matrix, Reduce, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Layer widths. Together with the input width and class count this fixes
/// every parameter shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub input_width: usize,
    /// Shared per-point MLP before global pooling.
    pub point_widths: Vec<usize>,
    /// Shared MLP over `[per-point ‖ global]`; the last width is `H`.
    pub fuse_widths: Vec<usize>,
    pub ins_hidden: usize,
    pub ins_dim: usize,
    pub sem_dim: usize,
    pub num_classes: usize,
}

impl ArchDescriptor {
    pub fn scene(num_classes: usize) -> Self {
        ArchDescriptor {
            input_width: 9,
            point_widths: vec![64, 128, 256],
            fuse_widths: vec![256, 256],
            ins_hidden: 128,
            ins_dim: 32,
            sem_dim: 128,
            num_classes,
        }
    }

    pub fn shape(num_classes: usize) -> Self {
        ArchDescriptor {
            input_width: 3,
            ..ArchDescriptor::scene(num_classes)
        }
    }

    /// Width `H` of the backbone feature matrix.
    pub fn feature_width(&self) -> usize {
        *self.fuse_widths.last().expect("validated descriptor")
    }

    pub fn joint_dim(&self) -> usize {
        self.ins_dim + self.sem_dim
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.input_width, self.ins_hidden, self.ins_dim, self.sem_dim]
            .into_iter()
            .chain(self.point_widths.iter().copied())
            .chain(self.fuse_widths.iter().copied());
        if all.clone().any(|w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.point_widths.is_empty() || self.fuse_widths.is_empty() {
            return Err(Error::Config(
                "backbone needs at least one per-point and one fusion layer".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "semantic head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// `key = value` lines, the form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "point_widths = {}", join(&self.point_widths));
        let _ = writeln!(s, "fuse_widths = {}", join(&self.fuse_widths));
        let _ = writeln!(s, "ins_hidden = {}", self.ins_hidden);
        let _ = writeln!(s, "ins_dim = {}", self.ins_dim);
        let _ = writeln!(s, "sem_dim = {}", self.sem_dim);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed descriptor line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("descriptor is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            take(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("descriptor `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            take(k)?
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("descriptor `{k}` is not a width list")))
                })
                .collect()
        };
        let arch = ArchDescriptor {
            input_width: num("input_width")?,
            point_widths: list("point_widths")?,
            fuse_widths: list("fuse_widths")?,
            ins_hidden: num("ins_hidden")?,
            ins_dim: num("ins_dim")?,
            sem_dim: num("sem_dim")?,
            num_classes: num("num_classes")?,
        };
        arch.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid descriptor: {e}")))?;
        Ok(arch)
    }

    /// Every parameter in a fixed order: name and `(rows, cols)`.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let mut dense = |prefix: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{prefix}.weight"), (fan_in, fan_out)));
            out.push((format!("{prefix}.bias"), (1, fan_out)));
        };
        let mut width = self.input_width;
        for (i, &w) in self.point_widths.iter().enumerate() {
            dense(format!("point.{i}"), width, w);
            width = w;
        }
        width *= 2;
        for (i, &w) in self.fuse_widths.iter().enumerate() {
            dense(format!("fuse.{i}"), width, w);
            width = w;
        }
        let h = width;
        dense("ins.0".into(), h, self.ins_hidden);
        dense("ins.1".into(), self.ins_hidden, self.ins_dim);
        dense("sem.0".into(), h, self.sem_dim);
        dense("sem.logits".into(), self.sem_dim, self.num_classes);
        dense("joint".into(), self.joint_dim(), self.joint_dim());
        out
    }
}

/// Named parameter matrices plus the descriptor and seed they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchDescriptor,
    pub seed: u64,
    params: BTreeMap<String, Matrix>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Assembles parameters from explicit matrices; every expected name must
    /// be present with the right shape and nothing else.
    pub fn from_parts(
        arch: ArchDescriptor,
        seed: u64,
        mut parts: BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in arch.param_shapes() {
            let m = parts
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if m.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
            params.insert(name, m);
        }
        if let Some(extra) = parts.keys().next() {
            return Err(Error::Checkpoint(format!("unknown parameter `{extra}`")));
        }
        Ok(ModelParams { arch, seed, params })
    }

    /// Sets every parameter to zero (testing aid).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for m in out.params.values_mut() {
            m.as_mut_slice().fill(0.0);
        }
        out
    }
}

/// Glorot-uniform weights, zero biases, all drawn from one seeded stream.
pub fn init_params(seed: u64, arch: &ArchDescriptor) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, (r, c)) in arch.param_shapes() {
        let m = if name.ends_with(".bias") {
            Matrix::zeros(r, c)
        } else {
            let limit = (6.0 / (r + c) as f64).sqrt();
            let data = (0..r * c).map(|_| rng.gen_range(-limit..limit)).collect();
            Matrix::from_vec(r, c, data)?
        };
        params.insert(name, m);
    }
    Ok(ModelParams {
        arch: arch.clone(),
        seed,
        params,
    })
}

/// Parameters recorded on a graph.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Records every parameter as a trainable leaf (`trainable`) or a constant.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .params
            .iter()
            .map(|(k, m)| {
                let v = if trainable {
                    g.param(m.clone())
                } else {
                    g.constant(m.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn dense(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var, relu: bool) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"));
    let b = bound.var(&format!("{prefix}.bias"));
    let h = g.matmul(x, w)?;
    let h = g.add_row(h, b)?;
    if relu {
        g.relu(h)
    } else {
        Ok(h)
    }
}

/// Produces the per-point feature matrix `F`.
pub trait Backbone {
    fn feature_width(&self) -> usize;
    fn forward(&self, g: &mut Graph, bound: &BoundParams, points: Var) -> Result<Var>;
}

/// Shared per-point MLP, global max pooling, then a shared MLP over each
/// point's features concatenated with the pooled vector.
pub struct PointNetBackbone<'a> {
    arch: &'a ArchDescriptor,
}

impl<'a> PointNetBackbone<'a> {
    pub fn new(arch: &'a ArchDescriptor) -> Self {
        PointNetBackbone { arch }
    }
}

impl Backbone for PointNetBackbone<'_> {
    fn feature_width(&self) -> usize {
        self.arch.feature_width()
    }

    fn forward(&self, g: &mut Graph, bound: &BoundParams, points: Var) -> Result<Var> {
        let (n, h) = g.shape(points);
        if h != self.arch.input_width {
            return Err(Error::dim(
                "backbone_forward",
                format!("input width {h}, model expects {}", self.arch.input_width),
            ));
        }
        if n == 0 {
            return Err(Error::dim("backbone_forward", "no points"));
        }
        let mut x = points;
        for i in 0..self.arch.point_widths.len() {
            x = dense(g, bound, &format!("point.{i}"), x, true)?;
        }
        let global = g.reduce(Reduce::Max, x, Axis::Rows)?;
        let tiled = g.repeat_rows(global, n)?;
        let mut y = g.concat_cols(x, tiled)?;
        for i in 0..self.arch.fuse_widths.len() {
            y = dense(g, bound, &format!("fuse.{i}"), y, true)?;
        }
        Ok(y)
    }
}

pub fn backbone_forward(g: &mut Graph, params: &ModelParams, bound: &BoundParams, points: Var) -> Result<Var> {
    PointNetBackbone::new(&params.arch).forward(g, bound, points)
}

fn check_features(g: &Graph, arch: &ArchDescriptor, f: Var, op: &'static str) -> Result<()> {
    let w = g.shape(f).1;
    if w != arch.feature_width() {
        return Err(Error::dim(
            op,
            format!("feature width {w}, expected {}", arch.feature_width()),
        ));
    }
    Ok(())
}

/// `F → F_ins` through a two-layer MLP with a linear output.
pub fn instance_head(g: &mut Graph, params: &ModelParams, bound: &BoundParams, f: Var) -> Result<Var> {
    check_features(g, &params.arch, f, "instance_head")?;
    let h = dense(g, bound, "ins.0", f, true)?;
    dense(g, bound, "ins.1", h, false)
}

/// `F → (F_sem, logits)`.
pub fn semantic_head(g: &mut Graph, params: &ModelParams, bound: &BoundParams, f: Var) -> Result<(Var, Var)> {
    check_features(g, &params.arch, f, "semantic_head")?;
    let f_sem = dense(g, bound, "sem.0", f, true)?;
    let logits = dense(g, bound, "sem.logits", f_sem, false)?;
    Ok((f_sem, logits))
}

/// `[F_ins ‖ F_sem]` followed by one linear layer.
pub fn joint_embed(g: &mut Graph, bound: &BoundParams, f_ins: Var, f_sem: Var) -> Result<Var> {
    let cat = g.concat_cols(f_ins, f_sem)?;
    dense(g, bound, "joint", cat, false)
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    pub f: Var,
    pub f_ins: Var,
    pub f_sem: Var,
    pub sem_logits: Var,
    pub f_joint: Option<Var>,
}

/// Full forward pass. The joint embedding is only built when `with_joint`.
pub fn forward(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    points: Var,
    with_joint: bool,
) -> Result<FeatureBundle> {
    let f = backbone_forward(g, params, bound, points)?;
    let f_ins = instance_head(g, params, bound, f)?;
    let (f_sem, sem_logits) = semantic_head(g, params, bound, f)?;
    let f_joint = if with_joint {
        Some(joint_embed(g, bound, f_ins, f_sem)?)
    } else {
        None
    };
    Ok(FeatureBundle {
        f,
        f_ins,
        f_sem,
        sem_logits,
        f_joint,
    })
}

/// Inference outputs for one block of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub f_ins: Matrix,
    pub sem_logits: Matrix,
}

impl Inference {
    pub fn sem_pred(&self) -> Vec<usize> {
        (0..self.sem_logits.rows())
            .map(|i| self.sem_logits.row_argmax(i))
            .collect()
    }
}

/// Forward pass without gradient bookkeeping. `with_selfpred_head` also
/// evaluates the joint embedding, which never feeds the returned outputs.
pub fn infer(params: &ModelParams, points: &Matrix, with_selfpred_head: bool) -> Result<Inference> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let x = g.constant(points.clone());
    let fb = forward(&mut g, params, &bound, x, with_selfpred_head)?;
    Ok(Inference {
        f_ins: g.value(fb.f_ins).clone(),
        sem_logits: g.value(fb.sem_logits).clone(),
    })
}

#[cfg(test)]
mod tests;
