//! Discriminative instance loss, semantic cross-entropy and the weighted objective.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::{Axis, Graph, Matrix, Reduce, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceLossParams {
    /// Pull margin: embeddings closer than this to their mean are not penalised.
    pub delta_v: f64,
    /// Push margin: means further than `2·delta_d` apart are not penalised.
    pub delta_d: f64,
    pub reg_weight: f64,
}

impl Default for InstanceLossParams {
    fn default() -> Self {
        InstanceLossParams {
            delta_v: 0.5,
            delta_d: 1.5,
            reg_weight: 0.001,
        }
    }
}

impl InstanceLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0) || !(self.delta_d > 0.0) {
            return Err(Error::Config("delta_v and delta_d must be positive".into()));
        }
        if !(2.0 * self.delta_d > self.delta_v) {
            return Err(Error::Config("2·delta_d must exceed delta_v".into()));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Config("reg_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scalar nodes of the instance loss.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLoss {
    pub l_var: Var,
    pub l_dist: Var,
    pub l_reg: Var,
    pub l_ins: Var,
}

/// Maps arbitrary ids onto `0..K` in ascending id order.
pub fn dense_ids(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &id in ids {
        map.entry(id).or_insert(0usize);
    }
    for (k, v) in map.values_mut().enumerate() {
        *v = k;
    }
    (ids.iter().map(|id| map[id]).collect(), map.len())
}

pub fn instance_loss(
    g: &mut Graph,
    embeddings: Var,
    instance_ids: &[usize],
    params: &InstanceLossParams,
) -> Result<InstanceLoss> {
    params.validate()?;
    let n = instance_ids.len();
    if n == 0 {
        return Err(Error::Contract("instance loss over an empty point set".into()));
    }
    if g.shape(embeddings).0 != n {
        return Err(Error::dim(
            "instance_loss",
            format!("{} embeddings for {n} instance ids", g.shape(embeddings).0),
        ));
    }
    let (dense, k) = dense_ids(instance_ids);
    let mut counts = vec![0usize; k];
    for &d in &dense {
        counts[d] += 1;
    }

    let mut averaging = Matrix::zeros(k, n);
    let mut assign = Matrix::zeros(n, k);
    let mut weights = Matrix::zeros(n, 1);
    for (i, &d) in dense.iter().enumerate() {
        averaging.set(d, i, 1.0 / counts[d] as f64);
        assign.set(i, d, 1.0);
        weights.set(i, 0, 1.0 / (k as f64 * counts[d] as f64));
    }
    let averaging = g.constant(averaging);
    let assign = g.constant(assign);
    let weights = g.constant(weights);

    let means = g.matmul(averaging, embeddings)?;

    // pull: mean over instances of the mean squared hinge of distance to own mean
    let spread = g.matmul(assign, means)?;
    let diff = g.sub(embeddings, spread)?;
    let sq = g.square(diff)?;
    let sq = g.reduce(Reduce::Sum, sq, Axis::Cols)?;
    let dist = g.sqrt(sq)?;
    let excess = g.add_scalar(dist, -params.delta_v);
    let excess = g.hinge(excess)?;
    let excess = g.square(excess)?;
    let weighted = g.mul(excess, weights)?;
    let l_var = g.sum_all(weighted);

    // push: ordered pairs of distinct instances
    let l_dist = if k == 1 {
        g.constant(Matrix::scalar(0.0))
    } else {
        let d2 = g.pairwise_sq_dist(means);
        let d = g.sqrt(d2)?;
        let nd = g.scale(d, -1.0);
        let short = g.add_scalar(nd, 2.0 * params.delta_d);
        let short = g.hinge(short)?;
        let short = g.square(short)?;
        let mut off_diag = Matrix::filled(k, k, 1.0);
        for i in 0..k {
            off_diag.set(i, i, 0.0);
        }
        let mask = g.constant(off_diag);
        let masked = g.mul(short, mask)?;
        let total = g.sum_all(masked);
        g.scale(total, 1.0 / (k * (k - 1)) as f64)
    };

    let msq = g.square(means)?;
    let msq = g.reduce(Reduce::Sum, msq, Axis::Cols)?;
    let norms = g.sqrt(msq)?;
    let l_reg = g.reduce(Reduce::Mean, norms, Axis::Rows)?;

    let l_ins = g.add(l_var, l_dist)?;
    let reg = g.scale(l_reg, params.reg_weight);
    let l_ins = g.add(l_ins, reg)?;
    Ok(InstanceLoss {
        l_var,
        l_dist,
        l_reg,
        l_ins,
    })
}

pub(crate) fn check_one_hot(targets: &Matrix, what: &str) -> Result<()> {
    for i in 0..targets.rows() {
        let row = targets.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Contract(format!("{what} row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// `−(1/N)·Σ_i targets_i · log softmax(logits_i)`, via a fused log-softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &Matrix) -> Result<Var> {
    let (n, c) = g.shape(logits);
    if targets.shape() != (n, c) {
        return Err(Error::dim(
            "cross_entropy",
            format!(
                "logits {n}x{c} vs targets {}x{}",
                targets.rows(),
                targets.cols()
            ),
        ));
    }
    if n == 0 {
        return Err(Error::Contract("cross-entropy over zero rows".into()));
    }
    let logp = g.row_log_softmax(logits);
    let t = g.constant(targets.clone());
    let picked = g.mul(logp, t)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

pub fn semantic_loss(g: &mut Graph, sem_logits: Var, y_sem: &Matrix) -> Result<Var> {
    check_one_hot(y_sem, "semantic target")?;
    cross_entropy(g, sem_logits, y_sem)
}

/// `l_ins + l_sem + beta·l_sp`.
pub fn total_loss(g: &mut Graph, l_ins: Var, l_sem: Var, l_sp: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("beta must be a non-negative number, got {beta}")));
    }
    let base = g.add(l_ins, l_sem)?;
    let sp = g.scale(l_sp, beta);
    g.add(base, sp)
}

/// Scalar values of every loss term for one step or sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_var: f64,
    pub l_dist: f64,
    pub l_reg: f64,
    pub l_ins: f64,
    pub l_sem: f64,
    pub l_sp: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn read(g: &Graph, ins: &InstanceLoss, l_sem: Var, l_sp: Option<Var>, total: Var, beta: f64) -> Self {
        LossReport {
            l_var: g.scalar_value(ins.l_var),
            l_dist: g.scalar_value(ins.l_dist),
            l_reg: g.scalar_value(ins.l_reg),
            l_ins: g.scalar_value(ins.l_ins),
            l_sem: g.scalar_value(l_sem),
            l_sp: l_sp.map_or(0.0, |v| g.scalar_value(v)),
            total: g.scalar_value(total),
            beta,
        }
    }

    /// Componentwise accumulation (for averaging over a batch).
    pub fn accumulate(&mut self, other: &LossReport) {
        self.l_var += other.l_var;
        self.l_dist += other.l_dist;
        self.l_reg += other.l_reg;
        self.l_ins += other.l_ins;
        self.l_sem += other.l_sem;
        self.l_sp += other.l_sp;
        self.total += other.total;
        self.beta = other.beta;
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            l_var: self.l_var * s,
            l_dist: self.l_dist * s,
            l_reg: self.l_reg * s,
            l_ins: self.l_ins * s,
            l_sem: self.l_sem * s,
            l_sp: self.l_sp * s,
            total: self.total * s,
            beta: self.beta,
        }
    }
}
