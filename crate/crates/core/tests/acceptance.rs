//! Acceptance gate. Every criterion runs in sequence inside one test so the
//! timed ones are not slowed down by parallel work, and each prints one
//! PASS/FAIL line.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spseg::cli::sweep::parse_table;
use spseg::cli::{evaluate, predict_scene_with, segment_scene, train, Dataset, RunConfig};
use spseg::cluster::SceneLabels;
use spseg::data::{generate_dataset, rng_for, sample_block, split_blocks, Mode};
use spseg::gradcore::check::{max_relative_error, numeric_gradient};
use spseg::gradcore::{Axis, Graph, Matrix, Reduce, Var};
use spseg::losses::{cross_entropy, instance_loss, semantic_loss, total_loss, InstanceLossParams};
use spseg::metrics::{coverage, match_counts, precision_recall, semantic_metrics, InstanceSet};
use spseg::model::{forward, infer, init_params, write_checkpoint, ArchDescriptor, BoundParams, ModelParams};
use spseg::selfpred::{
    build_affinity, build_joint_labels, normalize_laplacian, one_hot, pair_groups, propagate_closed,
    propagate_iterative, self_prediction_loss, stratified_split, AffinityOptions, SelfPredConfig, SplitMode,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn laplacian_of(emb: &Matrix) -> Matrix {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let w = build_affinity(&mut g, e, &AffinityOptions::default()).unwrap();
    let l = normalize_laplacian(&mut g, w).unwrap();
    g.value(l).clone()
}

// ---------------------------------------------------------------- 1

fn propagation_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let alpha = 0.99;
    let (mut worst, mut rows, mut agree) = (0.0f64, 0, 0);
    for _ in 0..50 {
        let n = rng.gen_range(2..=32);
        let c = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=4);
        let l = laplacian_of(&random_matrix(&mut rng, n, d, 1.0));
        let mut s0 = Matrix::zeros(n, c);
        for i in 0..n {
            if rng.gen_bool(0.5) {
                s0.set(i, rng.gen_range(0..c), 1.0);
            }
        }
        let iterative = propagate_iterative(&l, &s0, alpha, 2000).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let lv = g.constant(l);
        let r = propagate_closed(&mut g, lv, &s0, &Matrix::zeros(n, c), alpha, n).map_err(|e| e.to_string())?;
        let closed = g.value(r.s_star).map(|v| (1.0 - alpha) * v);
        worst = worst.max(iterative.max_abs_diff(&closed));
        for i in 0..n {
            rows += 1;
            agree += usize::from(iterative.row_argmax(i) == closed.row_argmax(i));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-6, format!("max deviation {worst:e}"))?;
    ensure(agree == rows, format!("argmax agrees on {agree}/{rows} rows"))?;
    ensure(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("max |iter - closed| = {worst:.2e}, argmax {agree}/{rows}, {secs:.2} s"))
}

// ---------------------------------------------------------------- 2

fn two_point_closed_form() -> Check {
    let alpha: f64 = 0.99;
    let l = laplacian_of(&Matrix::from_rows(&[&[0.3, -0.7], &[0.3, -0.7]]));
    let s0 = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let mut g = Graph::new();
    let lv = g.constant(l);
    let r = propagate_closed(&mut g, lv, &s0, &Matrix::zeros(2, 2), alpha, 1).map_err(|e| e.to_string())?;
    let s = g.value(r.s_star).clone();
    let exact = Matrix::from_rows(&[&[1.0 / (1.0 - alpha * alpha), 0.0], &[alpha / (1.0 - alpha * alpha), 0.0]]);
    let quoted = Matrix::from_rows(&[&[50.25126, 0.0], &[49.74874, 0.0]]);
    let err = s.max_abs_diff(&exact);
    let err_quoted = s.max_abs_diff(&quoted);
    ensure(err < 1e-6, format!("deviation from 1/(1-a^2), a/(1-a^2): {err:e}"))?;
    // the quoted figures carry five decimals
    ensure(err_quoted <= 5e-6, format!("deviation from the 5-decimal figures: {err_quoted:e}"))?;
    ensure(s.row_argmax(1) == 0, "unlabeled point did not inherit class 0")?;
    Ok(format!(
        "S* = [[{:.8}, 0], [{:.8}, 0]], |S* - exact| = {err:.1e}, |S* - quoted| = {err_quoted:.1e}",
        s.get(0, 0),
        s.get(1, 0)
    ))
}

// ---------------------------------------------------------------- 3

/// Checks d(sum(out ⊙ probe))/d(input) for a graph built from `inputs`.
fn check_op(
    name: &str,
    inputs: &[Matrix],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    worst: &mut (f64, String),
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + 7);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
        let out = build(&mut g, &vars);
        g.shape(out)
    };
    let probe = random_matrix(&mut rng, probe_shape.0, probe_shape.1, 1.0);
    let scalar = |ms: &[Matrix]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ms.iter().map(|m| g.constant(m.clone())).collect();
        let out = build(&mut g, &vars);
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p).unwrap();
        let s = g.sum_all(prod);
        g.scalar_value(s)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = build(&mut g, &vars);
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p).map_err(|e| e.to_string())?;
    let s = g.sum_all(prod);
    let grads = g.backward(s).map_err(|e| e.to_string())?;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let numeric = numeric_gradient(&inputs[k], 1e-6, |m| {
            let mut ms = inputs.to_vec();
            ms[k] = m.clone();
            scalar(&ms)
        });
        let err = max_relative_error(&analytic, &numeric);
        if err > worst.0 {
            *worst = (err, format!("{name}[{k}]"));
        }
        ensure(err < 1e-4, format!("{name} input {k}: relative error {err:e}"))?;
    }
    Ok(())
}

/// Values kept away from the ReLU and hinge kinks.
fn off_kink(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    random_matrix(rng, r, c, 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

fn toy_arch() -> ArchDescriptor {
    ArchDescriptor {
        input_width: 9,
        point_widths: vec![6, 8],
        fuse_widths: vec![8],
        ins_hidden: 6,
        ins_dim: 4,
        sem_dim: 5,
        num_classes: 3,
    }
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = (0.0, String::new());
    let a = random_matrix(&mut rng, 4, 3, 1.0);
    let b = random_matrix(&mut rng, 3, 5, 1.0);
    let c = random_matrix(&mut rng, 4, 3, 1.0);
    let pos = random_matrix(&mut rng, 4, 3, 1.0).map(|v| v.abs() + 0.2);
    let k = off_kink(&mut rng, 4, 3);
    let row = random_matrix(&mut rng, 1, 3, 1.0);
    let sq = random_matrix(&mut rng, 4, 4, 0.3);
    let sys = sq.zip_map(&Matrix::identity(4), |x, i| x + 2.0 * i);
    let rhs = random_matrix(&mut rng, 4, 2, 1.0);
    let s = Matrix::scalar(0.7);

    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Matrix>, Build)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("add", vec![a.clone(), c.clone()], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![a.clone(), c.clone()], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![a.clone(), c.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("mul_scalar", vec![s.clone(), a.clone()], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("relu", vec![k.clone()], Box::new(|g, v| g.relu(v[0]).unwrap())),
        ("hinge", vec![k.clone()], Box::new(|g, v| g.hinge(v[0]).unwrap())),
        ("exp", vec![a.clone()], Box::new(|g, v| g.exp(v[0]).unwrap())),
        ("log", vec![pos.clone()], Box::new(|g, v| g.log(v[0]).unwrap())),
        ("square", vec![a.clone()], Box::new(|g, v| g.square(v[0]).unwrap())),
        ("sqrt", vec![pos.clone()], Box::new(|g, v| g.sqrt(v[0]).unwrap())),
        ("pow", vec![pos.clone()], Box::new(|g, v| g.pow(v[0], 1.5).unwrap())),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| g.add_scalar(v[0], 0.4))),
        ("sum_rows", vec![a.clone()], Box::new(|g, v| g.reduce(Reduce::Sum, v[0], Axis::Rows).unwrap())),
        ("mean_cols", vec![a.clone()], Box::new(|g, v| g.reduce(Reduce::Mean, v[0], Axis::Cols).unwrap())),
        ("max_rows", vec![a.clone()], Box::new(|g, v| g.reduce(Reduce::Max, v[0], Axis::Rows).unwrap())),
        ("sum_all", vec![a.clone()], Box::new(|g, v| g.sum_all(v[0]))),
        ("mean_all", vec![a.clone()], Box::new(|g, v| g.mean_all(v[0]).unwrap())),
        ("concat_cols", vec![a.clone(), c.clone()], Box::new(|g, v| g.concat_cols(v[0], v[1]).unwrap())),
        ("concat_rows", vec![a.clone(), c.clone()], Box::new(|g, v| g.concat_rows(v[0], v[1]).unwrap())),
        ("slice_cols", vec![a.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 2).unwrap())),
        ("slice_rows", vec![a.clone()], Box::new(|g, v| g.slice_rows(v[0], 1, 2).unwrap())),
        ("select_rows", vec![a.clone()], Box::new(|g, v| g.select_rows(v[0], &[3, 0, 3]).unwrap())),
        ("transpose", vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())),
        ("repeat_rows", vec![row.clone()], Box::new(|g, v| g.repeat_rows(v[0], 4).unwrap())),
        ("row_softmax", vec![a.clone()], Box::new(|g, v| g.row_softmax(v[0]))),
        ("row_log_softmax", vec![a.clone()], Box::new(|g, v| g.row_log_softmax(v[0]))),
        ("pairwise_sq_dist", vec![a.clone()], Box::new(|g, v| g.pairwise_sq_dist(v[0]))),
        ("linear_solve", vec![sys, rhs], Box::new(|g, v| g.linear_solve(v[0], v[1]).unwrap())),
        (
            "affinity_laplacian",
            vec![random_matrix(&mut rng, 6, 3, 0.8)],
            Box::new(|g, v| {
                let w = build_affinity(g, v[0], &AffinityOptions::default()).unwrap();
                normalize_laplacian(g, w).unwrap()
            }),
        ),
    ];
    let n_ops = cases.len();
    for (name, inputs, build) in &cases {
        check_op(name, inputs, build.as_ref(), &mut worst)?;
    }

    // losses
    let emb = random_matrix(&mut rng, 10, 4, 1.5);
    let ids = [0, 1, 2, 0, 1, 2, 0, 1, 2, 2];
    let p = InstanceLossParams::default();
    for part in 0..4 {
        check_op(
            ["l_var", "l_dist", "l_reg", "l_ins"][part],
            &[emb.clone()],
            &move |g, v| {
                let l = instance_loss(g, v[0], &ids, &p).unwrap();
                [l.l_var, l.l_dist, l.l_reg, l.l_ins][part]
            },
            &mut worst,
        )?;
    }
    let y = one_hot(&[0, 2, 1, 2], 3).unwrap();
    let logits = random_matrix(&mut rng, 4, 3, 2.0);
    let y2 = y.clone();
    check_op("semantic_ce", &[logits.clone()], &move |g, v| semantic_loss(g, v[0], &y2).unwrap(), &mut worst)?;
    let soft = random_matrix(&mut rng, 4, 3, 1.0).map(|v| v.abs() + 0.1);
    check_op("propagated_ce", &[soft], &move |g, v| cross_entropy(g, v[0], &y).unwrap(), &mut worst)?;

    // full objective on a 16-point sample, differentiated w.r.t. every parameter
    let arch = toy_arch();
    let params = init_params(7, &arch).map_err(|e| e.to_string())?;
    let x = random_matrix(&mut rng, 16, 9, 1.0);
    let sem: Vec<usize> = (0..16).map(|i| [0, 1, 2, 1][i % 4]).collect();
    let ins: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(5);
    let mut assignment = stratified_split(&ins, 4, SplitMode::Stratified, &mut split_rng).unwrap();
    assignment.pairing = pair_groups(4, &mut split_rng).unwrap();
    let labels = build_joint_labels(&sem, &ins, 3).unwrap();
    let y_sem = one_hot(&sem, 3).unwrap();
    let objective = |q: &ModelParams, trainable: bool| -> (Graph, BoundParams, Var) {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, q, trainable);
        let xv = g.constant(x.clone());
        let fb = forward(&mut g, q, &bound, xv, true).unwrap();
        let li = instance_loss(&mut g, fb.f_ins, &ins, &p).unwrap();
        let ls = semantic_loss(&mut g, fb.sem_logits, &y_sem).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let lsp = self_prediction_loss(&mut g, fb.f_joint.unwrap(), &labels, &assignment, &SelfPredConfig::default(), &mut r)
            .unwrap();
        let total = total_loss(&mut g, li.l_ins, ls, lsp, 0.8).unwrap();
        (g, bound, total)
    };
    let (g, bound, total) = objective(&params, true);
    let grads = g.backward(total).map_err(|e| e.to_string())?;
    let mut n_params = 0;
    for name in params.names() {
        let analytic = grads.wrt(bound.var(name));
        let numeric = numeric_gradient(params.get(name).unwrap(), 1e-6, |m| {
            let mut q = params.clone();
            *q.get_mut(name).unwrap() = m.clone();
            let (g, _, t) = objective(&q, false);
            g.scalar_value(t)
        });
        let err = max_relative_error(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, format!("objective/{name}"));
        }
        ensure(err < 1e-4, format!("objective w.r.t. {name}: relative error {err:e}"))?;
        n_params += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{n_ops} primitives, 6 losses, objective w.r.t. {n_params} tensors; worst {:.2e} ({}), {secs:.1} s",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- 4

fn loss_constructions() -> Check {
    let eval = |pts: &[&[f64]], ids: &[usize]| {
        let mut g = Graph::new();
        let e = g.constant(Matrix::from_rows(pts));
        let l = instance_loss(&mut g, e, ids, &InstanceLossParams::default()).unwrap();
        (g.scalar_value(l.l_dist), g.scalar_value(l.l_ins))
    };
    let (_, a) = eval(&[&[0.0, 0.0], &[1.0, 0.0]], &[0, 0]);
    let (_, b) = eval(&[&[0.0, 0.0], &[2.0, 0.0]], &[0, 0]);
    let (d, _) = eval(&[&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]], &[0, 0, 1]);
    let mut g = Graph::new();
    let z = g.constant(Matrix::zeros(3, 2));
    let ce = semantic_loss(&mut g, z, &one_hot(&[0, 1, 0], 2).unwrap()).unwrap();
    let ce = g.scalar_value(ce);
    ensure((a - 0.0005).abs() < 1e-9, format!("l_ins = {a}, expected 0.0005"))?;
    ensure((b - 0.251).abs() < 1e-9, format!("l_ins = {b}, expected 0.251"))?;
    ensure((d - 1.0).abs() < 1e-9, format!("l_dist = {d}, expected 1.0"))?;
    ensure((ce - std::f64::consts::LN_2).abs() < 1e-12, format!("uniform CE = {ce}"))?;
    Ok(format!("l_ins {a}, l_ins {b}, l_dist {d}, uniform CE {ce:.15}"))
}

// ---------------------------------------------------------------- 5

fn groups(ins: &[usize]) -> Vec<BTreeSet<usize>> {
    let ids: BTreeSet<usize> = ins.iter().copied().collect();
    ids.iter().map(|&id| (0..ins.len()).filter(|&i| ins[i] == id).collect()).collect()
}

fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

fn majority(points: &BTreeSet<usize>, sem: &[usize]) -> usize {
    let mut best = (0, usize::MAX);
    for c in 0..3 {
        let n = points.iter().filter(|&&p| sem[p] == c).count();
        if n > best.0 {
            best = (n, c);
        }
    }
    best.1
}

/// Maximum one-to-one matching size over every injective assignment.
fn optimal_matching(iou: &[Vec<f64>], n_gt: usize, thresh: f64) -> usize {
    fn go(p: usize, iou: &[Vec<f64>], used: &mut [bool], thresh: f64) -> usize {
        if p == iou.len() {
            return 0;
        }
        let mut best = go(p + 1, iou, used, thresh);
        for g in 0..used.len() {
            if !used[g] && iou[p][g] >= thresh {
                used[g] = true;
                best = best.max(1 + go(p + 1, iou, used, thresh));
                used[g] = false;
            }
        }
        best
    }
    go(0, iou, &mut vec![false; n_gt], thresh)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut matched_cases = 0;
    for scene in 0..200 {
        let n = rng.gen_range(1..=20);
        let gt_ins: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let pred_ins: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let class_of: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let gt_sem: Vec<usize> = gt_ins.iter().map(|&i| class_of[i]).collect();
        let pred_sem: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let gt = InstanceSet::new(&gt_ins, &gt_sem).map_err(|e| e.to_string())?;
        let pred = InstanceSet::new(&pred_ins, &pred_sem).map_err(|e| e.to_string())?;
        let cov = coverage(&pred, &gt).map_err(|e| e.to_string())?;
        let counts = match_counts(&pred, &gt, 0.5).map_err(|e| e.to_string())?;

        let gg = groups(&gt_ins);
        let pg = groups(&pred_ins);
        let gc: Vec<usize> = gg.iter().map(|s| majority(s, &gt_sem)).collect();
        let pc: Vec<usize> = pg.iter().map(|s| majority(s, &pred_sem)).collect();
        let classes: BTreeSet<usize> = gc.iter().copied().collect();
        ensure(cov.keys().copied().collect::<BTreeSet<_>>() == classes, format!("scene {scene}: class set"))?;
        for &c in &classes {
            let members: Vec<usize> = (0..gg.len()).filter(|&g| gc[g] == c).collect();
            let preds: Vec<usize> = (0..pg.len()).filter(|&p| pc[p] == c).collect();
            let best: Vec<f64> = members
                .iter()
                .map(|&g| preds.iter().map(|&p| set_iou(&pg[p], &gg[g])).fold(0.0, f64::max))
                .collect();
            let total: usize = members.iter().map(|&g| gg[g].len()).sum();
            let cov_o = best.iter().sum::<f64>() / members.len() as f64;
            let wcov_o: f64 = members
                .iter()
                .zip(&best)
                .map(|(&g, b)| b * gg[g].len() as f64 / total as f64)
                .sum();
            ensure(cov[&c].cov == cov_o, format!("scene {scene} class {c}: Cov {} vs {cov_o}", cov[&c].cov))?;
            ensure(cov[&c].wcov == wcov_o, format!("scene {scene} class {c}: WCov {} vs {wcov_o}", cov[&c].wcov))?;
            if preds.len() <= 3 && members.len() <= 3 {
                let table: Vec<Vec<f64>> = preds
                    .iter()
                    .map(|&p| members.iter().map(|&g| set_iou(&pg[p], &gg[g])).collect())
                    .collect();
                let opt = optimal_matching(&table, members.len(), 0.5);
                ensure(counts[&c].tp == opt, format!("scene {scene} class {c}: greedy {} vs optimal {opt}", counts[&c].tp))?;
                matched_cases += 1;
            }
        }
    }
    let gt = InstanceSet::new(&[1, 1, 2, 2], &[0; 4]).unwrap();
    let pred = InstanceSet::new(&[5, 5, 5, 6], &[0; 4]).unwrap();
    let cov = coverage(&pred, &gt).map_err(|e| e.to_string())?;
    let (prec, rec) = precision_recall(&pred, &gt, 0.5).map_err(|e| e.to_string())?;
    // 7/12 has no exact binary form; (2/3 + 1/2)/2 lands one ulp from 7.0/12.0
    let ulp = f64::EPSILON;
    ensure((cov[&0].cov - 7.0 / 12.0).abs() <= ulp, format!("mCov {}", cov[&0].cov))?;
    ensure((cov[&0].wcov - 7.0 / 12.0).abs() <= ulp, format!("mWCov {}", cov[&0].wcov))?;
    ensure(prec == 1.0 && rec == 1.0, format!("mPrec {prec}, mRec {rec}"))?;
    Ok(format!(
        "200 scenes exact, {matched_cases} class cases greedy = optimal; example mCov {} mPrec {prec} mRec {rec}",
        cov[&0].cov
    ))
}

// ---------------------------------------------------------------- 6

fn semantic_example() -> Check {
    let r = semantic_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    ensure((r.miou - 7.0 / 12.0).abs() <= 1e-12, format!("mIoU {}", r.miou))?;
    ensure(r.oacc == 0.75 && r.macc == 0.75, format!("oAcc {} mAcc {}", r.oacc, r.macc))?;
    Ok(format!("mIoU {:.15}, oAcc {}, mAcc {}", r.miou, r.oacc, r.macc))
}

// ---------------------------------------------------------------- 7

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn inference_invariance(data: &Dataset, cfg: &RunConfig) -> Check {
    let params = init_params(77, &cfg.arch(data.num_classes())).map_err(|e| e.to_string())?;
    let scene = &data.val[0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let block = &split_blocks(scene, cfg.block_size).map_err(|e| e.to_string())?[0];
    let sample = sample_block(scene, block, cfg.points_per_block, Mode::Scene, &mut rng).map_err(|e| e.to_string())?;
    let on = infer(&params, &sample.features, true).map_err(|e| e.to_string())?;
    let off = infer(&params, &sample.features, false).map_err(|e| e.to_string())?;
    ensure(bits(&on.f_ins) == bits(&off.f_ins), "instance embeddings differ")?;
    ensure(bits(&on.sem_logits) == bits(&off.sem_logits), "semantic logits differ")?;
    let a = predict_scene_with(&params, scene, cfg, true).map_err(|e| e.to_string())?;
    let b = predict_scene_with(&params, scene, cfg, false).map_err(|e| e.to_string())?;
    ensure(a == b, "scene predictions differ")?;
    Ok(format!("block outputs and {}-point scene predictions identical", scene.len()))
}

// ---------------------------------------------------------------- 8 and 10

fn benchmark_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.epochs = 30;
    cfg.points_per_block = 512;
    cfg.val_every = 0;
    cfg.point_widths = vec![32, 32];
    cfg.fuse_widths = vec![64];
    cfg.ins_hidden = 32;
    cfg.max_seeds = 64;
    cfg
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct BenchRun {
    ckpt: Vec<u8>,
    report: String,
    miou: f64,
    mwcov: f64,
}

fn bench_run(data: &Dataset, cfg: &RunConfig, beta: f64, seed: u64) -> Result<BenchRun, String> {
    let mut cfg = cfg.clone();
    cfg.beta = beta;
    cfg.seed = seed;
    let out = train(&cfg, data, false).map_err(|e| e.to_string())?;
    let report = evaluate(&out.params, &data.val, &cfg).map_err(|e| e.to_string())?;
    Ok(BenchRun {
        ckpt: write_checkpoint(&out.params),
        miou: report.semantic.miou,
        mwcov: report.instance.mwcov,
        report: report.text,
    })
}

fn benchmark_runs(data: &Dataset, cfg: &RunConfig) -> Result<(Vec<BenchRun>, Vec<BenchRun>), String> {
    let mut full = Vec::new();
    let mut base = Vec::new();
    for seed in SEEDS {
        full.push(bench_run(data, cfg, cfg.beta, seed)?);
        base.push(bench_run(data, cfg, 0.0, seed)?);
    }
    Ok((full, base))
}

/// Oracle instance embeddings: instance `k` sits at `5·δv·k` on the first
/// axis, points scatter within `0.4·δv` of it, semantics are ground truth.
fn easy_mode(data: &Dataset, cfg: &RunConfig) -> Result<f64, String> {
    let spacing = 5.0 * cfg.delta_v;
    let preds: Vec<SceneLabels> = data
        .val
        .iter()
        .enumerate()
        .map(|(k, scene)| {
            segment_scene(scene, cfg, |sample| {
                let mut rng = rng_for(k as u64, &[sample.points[0] as u64]);
                let mut e = Matrix::zeros(sample.points.len(), 4);
                for (r, &p) in sample.points.iter().enumerate() {
                    for c in 0..4 {
                        let center = if c == 0 { spacing * scene.ins[p] as f64 } else { 0.0 };
                        e.set(r, c, center + rng.gen_range(-0.2..0.2) * cfg.delta_v);
                    }
                }
                Ok((e, sample.points.iter().map(|&p| scene.sem[p]).collect()))
            })
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let report = spseg::cli::score(data.val.iter().zip(&preds), &data.manifest.class_names).map_err(|e| e.to_string())?;
    Ok(report.instance.mwcov)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn training_trend(data: &Dataset, cfg: &RunConfig, keep: &mut Option<(Vec<BenchRun>, Vec<BenchRun>)>) -> Check {
    let start = Instant::now();
    let (full, base) = benchmark_runs(data, cfg)?;
    let easy = easy_mode(data, cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let fm = (mean(full.iter().map(|r| r.miou)), mean(full.iter().map(|r| r.mwcov)));
    let bm = (mean(base.iter().map(|r| r.miou)), mean(base.iter().map(|r| r.mwcov)));
    for (name, runs) in [("full", &full), ("beta=0", &base)] {
        for (s, r) in SEEDS.iter().zip(runs.iter()) {
            println!("    {name} seed {s}: val mIoU {:.4} mWCov {:.4}", r.miou, r.mwcov);
        }
    }
    let detail = format!(
        "full mIoU {:.4} mWCov {:.4} vs beta=0 mIoU {:.4} mWCov {:.4}; easy-mode mWCov {easy:.4}; {secs:.0} s",
        fm.0, fm.1, bm.0, bm.1
    );
    *keep = Some((full, base));
    ensure(fm.0 >= bm.0, format!("mean mIoU below baseline: {detail}"))?;
    ensure(fm.1 >= bm.1, format!("mean mWCov below baseline: {detail}"))?;
    ensure(easy >= 0.9, format!("easy-mode mWCov below 0.9: {detail}"))?;
    ensure(secs < 900.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn determinism(data: &Dataset, cfg: &RunConfig, first: &Option<(Vec<BenchRun>, Vec<BenchRun>)>) -> Check {
    let (full, base) = first.as_ref().ok_or("criterion 8 produced no runs to compare")?;
    let (full2, base2) = benchmark_runs(data, cfg)?;
    let mut n = 0;
    for (a, b) in full.iter().chain(base).zip(full2.iter().chain(&base2)) {
        ensure(a.ckpt == b.ckpt, format!("run {n}: checkpoints differ"))?;
        ensure(a.report == b.report, format!("run {n}: reports differ"))?;
        n += 1;
    }
    Ok(format!("{n} repeated runs: checkpoints ({} bytes each) and reports identical", full[0].ckpt.len()))
}

// ---------------------------------------------------------------- 9

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("spseg {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ablation_plumbing(dir: &Path) -> Check {
    let data = dir.join("sweep_data");
    let out = dir.join("sweeps");
    let cfg_path = dir.join("sweep.cfg");
    let d = data.to_str().unwrap();
    let o = out.to_str().unwrap();
    let c = cfg_path.to_str().unwrap();
    std::fs::write(
        &cfg_path,
        "epochs = 6\npoints_per_block = 256\npoint_widths = 16,16\nfuse_widths = 32\nins_hidden = 16\nmax_seeds = 32\n",
    )
    .map_err(|e| e.to_string())?;
    run_cli(&["gendata", "--out", d, "--scenes", "20", "--seed", "9"])?;
    let mut lines = Vec::new();
    for (param, values) in [("beta", "0,0.4,0.8,1.4"), ("groups", "2,4,8"), ("alpha", "0.5,0.9,0.99")] {
        run_cli(&["sweep", "--param", param, "--values", values, "--config", c, "--data", d, "--out", o])?;
        let text = std::fs::read_to_string(out.join(format!("sweep_{param}.tsv"))).map_err(|e| e.to_string())?;
        let rows = parse_table(&text).map_err(|e| e.to_string())?;
        let expected: Vec<&str> = values.split(',').collect();
        ensure(
            rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>() == expected,
            format!("{param}: rows out of order"),
        )?;
        ensure(
            rows.iter().all(|r| (0.0..=1.0).contains(&r.mprec) && (0.0..=1.0).contains(&r.miou)),
            format!("{param}: values outside [0, 1]"),
        )?;
        let series = std::fs::read_to_string(out.join(format!("sweep_{param}.dat"))).map_err(|e| e.to_string())?;
        ensure(series.lines().count() == rows.len() + 1, format!("{param}: series length"))?;
        let trend = |f: fn(&spseg::cli::SweepRow) -> f64| {
            let v: Vec<f64> = rows.iter().map(f).collect();
            if v.windows(2).all(|w| w[1] >= w[0]) {
                "non-decreasing"
            } else if v.windows(2).all(|w| w[1] <= w[0]) {
                "non-increasing"
            } else {
                "mixed"
            }
        };
        let row_text: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}/{:.3}", r.value, r.mprec, r.miou)).collect();
        println!(
            "    sweep {param}: {} (mPrec {}, mIoU {})",
            row_text.join(" "),
            trend(|r| r.mprec),
            trend(|r| r.miou)
        );
        lines.push(format!("{param} x{}", rows.len()));
    }
    for (param, values) in [("bidirectional", "false"), ("split", "random")] {
        run_cli(&["sweep", "--param", param, "--values", values, "--config", c, "--data", d, "--out", o])?;
        let rows = parse_table(&std::fs::read_to_string(out.join(format!("sweep_{param}.tsv"))).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        println!("    {param}={values}: mPrec {:.3} mIoU {:.3}", rows[0].mprec, rows[0].miou);
        lines.push(format!("{param}={values}"));
    }
    Ok(format!("completed {}", lines.join(", ")))
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let bench_dir = dir.path().join("bench");
    let cfg = benchmark_config();
    generate_dataset(&bench_dir, 80, 2024, Mode::Scene, &cfg.scene_spec()).unwrap();
    let data = Dataset::load(&bench_dir).unwrap();
    assert_eq!((data.train.len(), data.val.len()), (64, 16));

    let mut first_runs = None;
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} [{tag}] {name}: {detail}");
        results.push((id, name, r));
    };
    run(1, "propagation oracle", &mut propagation_oracle);
    run(2, "two-point closed form", &mut two_point_closed_form);
    run(3, "gradient suite", &mut gradient_suite);
    run(4, "loss constructions", &mut loss_constructions);
    run(5, "metric oracles", &mut metric_oracles);
    run(6, "semantic metric example", &mut semantic_example);
    run(7, "inference invariance", &mut || inference_invariance(&data, &cfg));
    run(8, "training trend", &mut || training_trend(&data, &cfg, &mut first_runs));
    run(9, "ablation plumbing", &mut || ablation_plumbing(dir.path()));
    run(10, "determinism", &mut || determinism(&data, &cfg, &first_runs));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|(id, name, _)| format!("{id} ({name})"))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
