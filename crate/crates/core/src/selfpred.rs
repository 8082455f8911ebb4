//! Self-prediction by label propagation.
//!
//! A sample's points are dealt into `G` groups, groups are paired, and within
//! each pair the labels of one group are propagated to the other over a
//! Gaussian affinity graph built from the joint embeddings (and vice versa).
//! The propagated label distributions are scored against ground truth with a
//! cross-entropy, so gradients reach the embeddings through the closed-form
//! solve `(I − αL)⁻¹`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Axis, Graph, Matrix, Reduce, Var};
use crate::losses::{cross_entropy, dense_ids};

/// One-hot rows: row `i` has a single 1 at column `ids[i]`.
pub fn one_hot(ids: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(ids.len(), classes);
    for (i, &id) in ids.iter().enumerate() {
        if id >= classes {
            return Err(Error::Contract(format!(
                "label {id} at point {i} is out of range for {classes} classes"
            )));
        }
        m.set(i, id, 1.0);
    }
    Ok(m)
}

/// Semantic and instance one-hot labels and their column concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLabelMatrix {
    pub y_sem: Matrix,
    pub y_ins: Matrix,
    pub y_joint: Matrix,
    /// Instance ids remapped onto `0..c_ins`.
    pub ins_dense: Vec<usize>,
    pub c_sem: usize,
    pub c_ins: usize,
}

pub fn build_joint_labels(sem_ids: &[usize], ins_ids: &[usize], c_sem: usize) -> Result<JointLabelMatrix> {
    if sem_ids.is_empty() {
        return Err(Error::Contract("joint labels for an empty sample".into()));
    }
    if sem_ids.len() != ins_ids.len() {
        return Err(Error::Contract(format!(
            "{} semantic labels but {} instance labels",
            sem_ids.len(),
            ins_ids.len()
        )));
    }
    let (ins_dense, c_ins) = dense_ids(ins_ids);
    let y_sem = one_hot(sem_ids, c_sem)?;
    let y_ins = one_hot(&ins_dense, c_ins)?;
    let n = sem_ids.len();
    let mut y_joint = Matrix::zeros(n, c_sem + c_ins);
    for i in 0..n {
        let row = y_joint.row_mut(i);
        row[..c_sem].copy_from_slice(y_sem.row(i));
        row[c_sem..].copy_from_slice(y_ins.row(i));
    }
    Ok(JointLabelMatrix {
        y_sem,
        y_ins,
        y_joint,
        ins_dense,
        c_sem,
        c_ins,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Each instance's points are spread evenly across groups.
    Stratified,
    /// One global shuffle, dealt round-robin.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub group_of: Vec<usize>,
    pub groups: usize,
    pub mode: SplitMode,
    pub pairing: Vec<(usize, usize)>,
}

impl GroupAssignment {
    /// Point indices of group `g`, ascending.
    pub fn members(&self, g: usize) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| (k == g).then_some(i))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.groups];
        for &k in &self.group_of {
            s[k] += 1;
        }
        s
    }
}

/// Deals points into `groups` groups. Pairing is left empty; see [`pair_groups`].
pub fn stratified_split(
    ins_ids: &[usize],
    groups: usize,
    mode: SplitMode,
    rng: &mut impl Rng,
) -> Result<GroupAssignment> {
    let n = ins_ids.len();
    if groups < 2 {
        return Err(Error::Config(format!("need at least 2 groups, got {groups}")));
    }
    if groups > n {
        return Err(Error::Contract(format!("{groups} groups for {n} points")));
    }
    let mut group_of = vec![0usize; n];
    match mode {
        SplitMode::Stratified => {
            let (dense, k) = dense_ids(ins_ids);
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &d) in dense.iter().enumerate() {
                members[d].push(i);
            }
            // the dealing cursor carries over between instances so group
            // totals stay balanced as well
            let mut cursor = 0;
            for mut pts in members {
                pts.shuffle(rng);
                for p in pts {
                    group_of[p] = cursor % groups;
                    cursor += 1;
                }
            }
        }
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            for (slot, p) in order.into_iter().enumerate() {
                group_of[p] = slot % groups;
            }
        }
    }
    Ok(GroupAssignment {
        group_of,
        groups,
        mode,
        pairing: Vec::new(),
    })
}

/// Uniformly random perfect matching of `0..groups`; each pair is `(low, high)`.
pub fn pair_groups(groups: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if groups == 0 || groups % 2 != 0 {
        return Err(Error::Config(format!(
            "group count must be positive and even, got {groups}"
        )));
    }
    let mut ids: Vec<usize> = (0..groups).collect();
    ids.shuffle(rng);
    Ok(ids
        .chunks_exact(2)
        .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    /// `‖a − b‖²`, the usual Gaussian kernel.
    SquaredEuclidean,
    /// `‖a − b‖`.
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityOptions {
    pub sigma: f64,
    pub distance: Distance,
    /// Keep `W_ii = exp(0) = 1` instead of zeroing the diagonal.
    pub self_loops: bool,
}

impl Default for AffinityOptions {
    fn default() -> Self {
        AffinityOptions {
            sigma: 1.0,
            distance: Distance::SquaredEuclidean,
            self_loops: false,
        }
    }
}

/// `W_ij = exp(−d(e_i, e_j) / 2σ²)`, zero diagonal unless `self_loops`.
pub fn build_affinity(g: &mut Graph, embeddings: Var, opts: &AffinityOptions) -> Result<Var> {
    let n = g.shape(embeddings).0;
    if n < 2 {
        return Err(Error::Contract(format!("affinity graph needs 2 or more points, got {n}")));
    }
    if !(opts.sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {}", opts.sigma)));
    }
    let d2 = g.pairwise_sq_dist(embeddings);
    let d = match opts.distance {
        Distance::SquaredEuclidean => d2,
        Distance::Euclidean => g.sqrt(d2)?,
    };
    let scaled = g.scale(d, -1.0 / (2.0 * opts.sigma * opts.sigma));
    let w = g.exp(scaled)?;
    if opts.self_loops {
        return Ok(w);
    }
    let mut off = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        off.set(i, i, 0.0);
    }
    let mask = g.constant(off);
    g.mul(w, mask)
}

/// `L = D^{−1/2}·W·D^{−1/2}` with `D_ii` the row sums of `W`.
pub fn normalize_laplacian(g: &mut Graph, w: Var) -> Result<Var> {
    let degree = g.reduce(Reduce::Sum, w, Axis::Cols)?;
    if let Some(row) = g.value(degree).as_slice().iter().position(|&d| !(d > 0.0)) {
        return Err(Error::DegenerateGraph { row });
    }
    let inv_sqrt = g.pow(degree, -0.5)?;
    let inv_sqrt_t = g.transpose(inv_sqrt);
    let outer = g.matmul(inv_sqrt, inv_sqrt_t)?;
    g.mul(w, outer)
}

/// Closed-form propagation results for one pair.
#[derive(Clone, Copy, Debug)]
pub struct PropagationResult {
    pub s_star: Var,
    pub u_star: Var,
    /// Rows `0..m` from `u_star`, rows `m..n` from `s_star`.
    pub y_star: Var,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "propagation alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// `S* = (I − αL)⁻¹·S0`, `U* = (I − αL)⁻¹·U0` from one factorization; the
/// label matrices are constants. `m` is the size of the first group.
pub fn propagate_closed(
    g: &mut Graph,
    laplacian: Var,
    s0: &Matrix,
    u0: &Matrix,
    alpha: f64,
    m: usize,
) -> Result<PropagationResult> {
    check_alpha(alpha)?;
    let (n, n2) = g.shape(laplacian);
    if n != n2 || s0.rows() != n || u0.shape() != s0.shape() || m > n {
        return Err(Error::dim(
            "propagate_closed",
            format!(
                "L {n}x{n2}, S0 {}x{}, U0 {}x{}, split {m}",
                s0.rows(),
                s0.cols(),
                u0.rows(),
                u0.cols()
            ),
        ));
    }
    let c = s0.cols();
    let eye = g.constant(Matrix::identity(n));
    let al = g.scale(laplacian, alpha);
    let system = g.sub(eye, al)?;
    let mut rhs = Matrix::zeros(n, 2 * c);
    for i in 0..n {
        let row = rhs.row_mut(i);
        row[..c].copy_from_slice(s0.row(i));
        row[c..].copy_from_slice(u0.row(i));
    }
    let rhs = g.constant(rhs);
    let solved = g.linear_solve(system, rhs).map_err(|e| match e {
        Error::Singular { .. } => Error::Config(format!("propagation system is singular ({e})")),
        other => other,
    })?;
    let s_star = g.slice_cols(solved, 0, c)?;
    let u_star = g.slice_cols(solved, c, c)?;
    let head = g.slice_rows(u_star, 0, m)?;
    let tail = g.slice_rows(s_star, m, n - m)?;
    let y_star = g.concat_rows(head, tail)?;
    Ok(PropagationResult {
        s_star,
        u_star,
        y_star,
    })
}

/// `T` steps of `S ← αLS + (1 − α)S0` starting from `S0`.
pub fn propagate_iterative(laplacian: &Matrix, s0: &Matrix, alpha: f64, steps: usize) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Config("iterative propagation needs at least one step".into()));
    }
    if laplacian.rows() != laplacian.cols() || laplacian.cols() != s0.rows() {
        return Err(Error::dim("propagate_iterative", "L and S0 disagree"));
    }
    let mut s = s0.clone();
    let keep = s0.map(|v| (1.0 - alpha) * v);
    for _ in 0..steps {
        let mut next = laplacian.checked_matmul(&s)?;
        next.scale_assign(alpha);
        next.add_assign(&keep);
        s = next;
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfPredConfig {
    pub alpha: f64,
    pub affinity: AffinityOptions,
    pub bidirectional: bool,
}

impl Default for SelfPredConfig {
    fn default() -> Self {
        SelfPredConfig {
            alpha: 0.99,
            affinity: AffinityOptions::default(),
            bidirectional: true,
        }
    }
}

/// Which propagated block is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Both,
    /// First group labelled, second predicted (`S*`).
    FirstToSecond,
    /// Second group labelled, first predicted (`U*`).
    SecondToFirst,
}

/// Self-prediction loss for one pair of disjoint point groups.
pub fn pair_loss(
    g: &mut Graph,
    f_joint: Var,
    labels: &JointLabelMatrix,
    first: &[usize],
    second: &[usize],
    cfg: &SelfPredConfig,
    direction: Direction,
) -> Result<Var> {
    if first.is_empty() || second.is_empty() {
        return Err(Error::Contract("self-prediction pair with an empty group".into()));
    }
    let mut seen = vec![false; labels.y_joint.rows()];
    for &i in first.iter().chain(second) {
        if i >= seen.len() {
            return Err(Error::Contract(format!("point {i} is outside the sample")));
        }
        if seen[i] {
            return Err(Error::Contract(format!("point {i} appears in both groups")));
        }
        seen[i] = true;
    }
    let union: Vec<usize> = first.iter().chain(second).copied().collect();
    let (n, m) = (union.len(), first.len());
    let emb = g.select_rows(f_joint, &union)?;
    let w = build_affinity(g, emb, &cfg.affinity)?;
    let l = normalize_laplacian(g, w)?;

    let y = labels.y_joint.select_rows(&union);
    let c = y.cols();
    let mut s0 = Matrix::zeros(n, c);
    let mut u0 = Matrix::zeros(n, c);
    for i in 0..n {
        if i < m {
            s0.row_mut(i).copy_from_slice(y.row(i));
        } else {
            u0.row_mut(i).copy_from_slice(y.row(i));
        }
    }
    let prop = propagate_closed(g, l, &s0, &u0, cfg.alpha, m)?;
    let (pred, rows) = match direction {
        Direction::Both => (prop.y_star, union.clone()),
        Direction::FirstToSecond => (g.slice_rows(prop.s_star, m, n - m)?, second.to_vec()),
        Direction::SecondToFirst => (g.slice_rows(prop.u_star, 0, m)?, first.to_vec()),
    };
    let sem_block = g.slice_cols(pred, 0, labels.c_sem)?;
    let ins_block = g.slice_cols(pred, labels.c_sem, labels.c_ins)?;
    let l_sem = cross_entropy(g, sem_block, &labels.y_sem.select_rows(&rows))?;
    let l_ins = cross_entropy(g, ins_block, &labels.y_ins.select_rows(&rows))?;
    g.add(l_ins, l_sem)
}

/// Mean of the pair losses over `assignment.pairing`, in pairing order.
/// In unidirectional mode one direction is drawn per call.
pub fn self_prediction_loss(
    g: &mut Graph,
    f_joint: Var,
    labels: &JointLabelMatrix,
    assignment: &GroupAssignment,
    cfg: &SelfPredConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (loss, _) = pair_losses(g, f_joint, labels, assignment, cfg, rng, false)?;
    Ok(loss.expect("strict mode never skips a pair"))
}

/// Like [`self_prediction_loss`], but pairs whose affinity graph has an
/// isolated node are left out of the mean instead of failing the call.
/// Returns `None` when every pair was skipped, plus the number skipped.
pub fn self_prediction_loss_skipping(
    g: &mut Graph,
    f_joint: Var,
    labels: &JointLabelMatrix,
    assignment: &GroupAssignment,
    cfg: &SelfPredConfig,
    rng: &mut impl Rng,
) -> Result<(Option<Var>, usize)> {
    pair_losses(g, f_joint, labels, assignment, cfg, rng, true)
}

fn pair_losses(
    g: &mut Graph,
    f_joint: Var,
    labels: &JointLabelMatrix,
    assignment: &GroupAssignment,
    cfg: &SelfPredConfig,
    rng: &mut impl Rng,
    skip_degenerate: bool,
) -> Result<(Option<Var>, usize)> {
    if assignment.pairing.is_empty() {
        return Err(Error::Contract("group assignment has no pairs".into()));
    }
    if assignment.group_of.len() != labels.y_joint.rows() {
        return Err(Error::Contract("group assignment does not match the labels".into()));
    }
    let direction = if cfg.bidirectional {
        Direction::Both
    } else if rng.gen_bool(0.5) {
        Direction::FirstToSecond
    } else {
        Direction::SecondToFirst
    };
    let mut total: Option<Var> = None;
    let mut used = 0;
    let mut skipped = 0;
    for &(a, b) in &assignment.pairing {
        let first = assignment.members(a);
        let second = assignment.members(b);
        let l = match pair_loss(g, f_joint, labels, &first, &second, cfg, direction) {
            Ok(l) => l,
            Err(Error::DegenerateGraph { .. }) if skip_degenerate => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        used += 1;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok((total.map(|t| g.scale(t, 1.0 / used as f64)), skipped))
}
