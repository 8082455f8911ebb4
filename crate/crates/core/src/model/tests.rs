use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcore::check::{max_relative_error, numeric_gradient};

fn tiny_arch(input_width: usize) -> ArchDescriptor {
    ArchDescriptor {
        input_width,
        point_widths: vec![6, 8],
        fuse_widths: vec![8, 10],
        ins_hidden: 6,
        ins_dim: 4,
        sem_dim: 5,
        num_classes: 3,
    }
}

fn random_points(seed: u64, n: usize, h: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(n, h, (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn run(params: &ModelParams, x: &Matrix) -> (Matrix, Matrix, Matrix, Matrix, Matrix) {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let xv = g.constant(x.clone());
    let fb = forward(&mut g, params, &bound, xv, true).unwrap();
    (
        g.value(fb.f).clone(),
        g.value(fb.f_ins).clone(),
        g.value(fb.f_sem).clone(),
        g.value(fb.sem_logits).clone(),
        g.value(fb.f_joint.unwrap()).clone(),
    )
}

#[test]
fn init_is_seed_deterministic() {
    let arch = ArchDescriptor::scene(13);
    let a = init_params(5, &arch).unwrap();
    let b = init_params(5, &arch).unwrap();
    assert_eq!(a, b);
    let c = init_params(6, &arch).unwrap();
    assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x != y));
}

#[test]
fn init_bounds_and_zero_biases() {
    let arch = tiny_arch(9);
    let p = init_params(1, &arch).unwrap();
    for (name, m) in p.iter() {
        if name.ends_with(".bias") {
            assert!(m.as_slice().iter().all(|&v| v == 0.0));
        } else {
            let limit = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            assert!(m.as_slice().iter().all(|v| v.abs() <= limit), "{name}");
        }
    }
}

#[test]
fn invalid_widths_are_config_errors() {
    let mut arch = tiny_arch(9);
    arch.point_widths[0] = 0;
    assert!(matches!(init_params(0, &arch), Err(Error::Config(_))));
    let mut arch = tiny_arch(9);
    arch.num_classes = 1;
    assert!(matches!(init_params(0, &arch), Err(Error::Config(_))));
}

#[test]
fn default_shapes() {
    let arch = ArchDescriptor::scene(13);
    assert_eq!(arch.feature_width(), 256);
    let p = init_params(0, &arch).unwrap();
    let x = random_points(1, 4, 9);
    let (f, f_ins, f_sem, logits, f_joint) = run(&p, &x);
    assert_eq!(f.shape(), (4, 256));
    assert_eq!(f_ins.shape(), (4, 32));
    assert_eq!(f_sem.shape(), (4, 128));
    assert_eq!(logits.shape(), (4, 13));
    assert_eq!(f_joint.shape(), (4, 160));
    for i in 0..4 {
        let total: f64 = softmax_rows(&logits).row(i).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

use crate::gradcore::softmax_rows;

#[test]
fn shape_mode_and_width_mismatch() {
    let p = init_params(0, &ArchDescriptor::shape(4)).unwrap();
    let (f, ..) = run(&p, &random_points(2, 3, 3));
    assert_eq!(f.shape(), (3, 256));
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &p, false);
    let x = g.constant(random_points(2, 3, 9));
    assert!(matches!(
        backbone_forward(&mut g, &p, &bound, x),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn rows_are_permutation_equivariant() {
    let p = init_params(3, &tiny_arch(9)).unwrap();
    let x = random_points(4, 7, 9);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let xp = x.select_rows(&perm);
    let a = run(&p, &x);
    let b = run(&p, &xp);
    for (u, v) in [(a.0, b.0), (a.1, b.1), (a.2, b.2), (a.3, b.3), (a.4, b.4)] {
        assert!(u.select_rows(&perm).max_abs_diff(&v) < 1e-12);
    }
}

#[test]
fn duplicated_points_give_duplicated_features() {
    let p = init_params(3, &ArchDescriptor::scene(4)).unwrap();
    let x = random_points(8, 1, 9);
    let xx = x.select_rows(&[0, 0]);
    let (f, ..) = run(&p, &xx);
    assert_eq!(f.row(0), f.row(1));
}

#[test]
fn zero_params_give_zero_instance_embeddings() {
    let p = init_params(3, &tiny_arch(9)).unwrap().zeroed();
    let (_, f_ins, ..) = run(&p, &random_points(1, 4, 9));
    assert!(f_ins.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_joint_transform_returns_concatenation() {
    let arch = tiny_arch(9);
    let mut p = init_params(3, &arch).unwrap();
    *p.get_mut("joint.weight").unwrap() = Matrix::identity(arch.joint_dim());
    let (_, f_ins, f_sem, _, f_joint) = run(&p, &random_points(1, 4, 9));
    for i in 0..4 {
        let cat: Vec<f64> = f_ins.row(i).iter().chain(f_sem.row(i)).copied().collect();
        assert_eq!(f_joint.row(i), &cat[..]);
    }
}

#[test]
fn instance_head_gradient_matches_finite_differences() {
    let arch = tiny_arch(3);
    let p = init_params(11, &arch).unwrap();
    let x = random_points(12, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let loss_for = |params: &ModelParams| {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let xv = g.constant(x.clone());
        let f = backbone_forward(&mut g, params, &bound, xv).unwrap();
        let e = instance_head(&mut g, params, &bound, f).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(e, wv).unwrap();
        let s = g.sum_all(prod);
        g.scalar_value(s)
    };
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &p, true);
    let xv = g.constant(x.clone());
    let f = backbone_forward(&mut g, &p, &bound, xv).unwrap();
    let e = instance_head(&mut g, &p, &bound, f).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(e, wv).unwrap();
    let s = g.sum_all(prod);
    let grads = g.backward(s).unwrap();
    for name in ["ins.1.weight", "ins.0.weight", "fuse.1.weight", "point.0.weight"] {
        let analytic = grads.wrt(bound.var(name));
        let numeric = numeric_gradient(p.get(name).unwrap(), 1e-6, |m| {
            let mut q = p.clone();
            *q.get_mut(name).unwrap() = m.clone();
            loss_for(&q)
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn inference_ignores_selfpred_head() {
    let p = init_params(21, &tiny_arch(9)).unwrap();
    let x = random_points(22, 9, 9);
    assert_eq!(infer(&p, &x, true).unwrap(), infer(&p, &x, false).unwrap());
}

#[test]
fn descriptor_text_round_trip() {
    let arch = ArchDescriptor::scene(4);
    assert_eq!(ArchDescriptor::from_text(&arch.to_text()).unwrap(), arch);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let p = init_params(9, &ArchDescriptor::scene(4)).unwrap();
    let bytes = write_checkpoint(&p);
    assert_eq!(&bytes[..7], b"PSPCKPT");
    let q = read_checkpoint(&bytes).unwrap();
    assert_eq!(p, q);
    assert_eq!(q.arch.feature_width(), 256);
    assert_eq!(write_checkpoint(&q), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&p, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), p);
}

#[test]
fn checkpoint_errors() {
    let p = init_params(9, &tiny_arch(9)).unwrap();
    let bytes = write_checkpoint(&p);

    let truncated = &bytes[..bytes.len() - 3];
    let err = read_checkpoint(truncated).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    let mut wrong_version = bytes.clone();
    wrong_version[7] = 9;
    let err = read_checkpoint(&wrong_version).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut parts: BTreeMap<String, Matrix> =
        p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    parts.remove("ins.1.bias");
    let err = ModelParams::from_parts(p.arch.clone(), 0, parts.clone())
        .unwrap_err()
        .to_string();
    assert!(err.contains("ins.1.bias"), "{err}");

    // a file that simply omits one parameter
    let mut short = ModelParams::from_parts(
        p.arch.clone(),
        0,
        p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    )
    .unwrap();
    short.params.remove("sem.0.bias");
    let err = read_checkpoint(&write_checkpoint(&short)).unwrap_err().to_string();
    assert!(err.contains("missing parameter `sem.0.bias`"), "{err}");

    let mut renamed = p.clone();
    let m = renamed.params.remove("joint.bias").unwrap();
    renamed.params.insert("joint.bias2".into(), m);
    let err = read_checkpoint(&write_checkpoint(&renamed)).unwrap_err().to_string();
    assert!(err.contains("unknown parameter `joint.bias2`"), "{err}");

    assert!(read_checkpoint(b"NOTACKPT").is_err());
}
