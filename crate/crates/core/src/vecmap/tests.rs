use super::*;
use crate::corpus::{Vocabulary, PAD, UNK};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn vocab(prefix: &str, n: usize) -> Vocabulary {
    Vocabulary::from_entries(&[], (0..n).map(|i| (format!("{prefix}{i}"), (n - i) as u64)).collect()).unwrap()
}

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d, d, &gaussian(d, d, rng));
    let q = m.qr().q();
    (0..d * d).map(|i| q[(i / d, i % d)]).collect()
}

fn mat(prefix: &str, n: usize, d: usize, v: Vec<f64>) -> EmbeddingMatrix<f64> {
    EmbeddingMatrix::new(vocab(prefix, n), v, d).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn orthogonality_error(w: &[f64], d: usize) -> f64 {
    let mut wtw = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            wtw[i * d + j] = (0..d).map(|k| w[k * d + i] * w[k * d + j]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
        }
    }
    wtw.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn objective(x: &[f64], z: &[f64], d: usize, w: &[f64]) -> f64 {
    let n = x.len() / d;
    let mut xw = vec![0.0; n * d];
    matmul(n, d, d, x, w, &mut xw);
    (0..n)
        .map(|i| {
            let a = &xw[i * d..(i + 1) * d];
            let b = &z[i * d..(i + 1) * d];
            dot(a, b) / (norm(a) * norm(b))
        })
        .sum()
}

fn identity_dict(prefix_a: &str, prefix_b: &str, ids: impl IntoIterator<Item = usize>) -> BilingualDictionary {
    BilingualDictionary::new(ids.into_iter().map(|i| (format!("{prefix_a}{i}"), format!("{prefix_b}{i}"))), Provenance::Gold)
}

#[test]
fn normalize_two_rows() {
    let e = mat("w", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let n = normalize(&e).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!(max_abs_diff(n.vectors(), &[h, -h, -h, h]) < 1e-12);
    let again = normalize(&n).unwrap();
    assert!(max_abs_diff(again.vectors(), n.vectors()) < 1e-12);
    for r in n.row_norms() {
        assert!((r - 1.0).abs() < 1e-9);
    }
}

#[test]
fn normalize_rejects_degenerate_inputs() {
    let single = mat("w", 1, 2, vec![3.0, 4.0]);
    assert_eq!(normalize(&single).unwrap_err().to_string(), "degenerate: fewer than 2 rows");
    let zero = mat("w", 2, 2, vec![1.0, 0.0, 0.0, 0.0]);
    match normalize(&zero) {
        Err(Error::ZeroRow(t)) => assert_eq!(t, "w1"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn identical_token_seed() {
    let a = Vocabulary::from_entries(&[PAD], vec![("abc".into(), 1), ("xy".into(), 1), ("p".into(), 1)]).unwrap();
    let b = Vocabulary::from_entries(&[PAD], vec![("xy".into(), 1), ("q".into(), 1)]).unwrap();
    let d = seed_identical(&a, &b).unwrap();
    assert_eq!(d.pairs(), &[("xy".to_string(), "xy".to_string())]);
    let c = Vocabulary::from_entries(&[PAD, UNK], vec![("zz".into(), 1)]).unwrap();
    assert_eq!(seed_identical(&a, &c).unwrap_err().to_string(), "no identical tokens; cannot seed");
    let full = vocab("t", 7);
    assert_eq!(seed_identical(&full, &full).unwrap().len(), 7);
}

#[test]
fn procrustes_identity_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (40, 6);
    let x = gaussian(n, d, &mut rng);
    let xm = mat("w", n, d, x.clone());
    let dict = identity_dict("w", "w", 0..n);
    let w = procrustes(&xm, &xm, &dict).unwrap();
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    assert!(max_abs_diff(&w, &eye) < 1e-6);

    let r = random_orthogonal(d, &mut rng);
    let mut z = vec![0.0; n * d];
    matmul(n, d, d, &x, &r, &mut z);
    let zm = mat("w", n, d, z);
    let w = procrustes(&xm, &zm, &dict).unwrap();
    let fro = w.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(fro < 1e-6, "‖W − R‖ = {fro}");
    assert!(orthogonality_error(&w, d) < 1e-6);
}

#[test]
fn procrustes_single_pair_aligns_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 5;
    let mut x = gaussian(1, d, &mut rng);
    let mut z = gaussian(1, d, &mut rng);
    let (nx, nz) = (norm(&x), norm(&z));
    x.iter_mut().for_each(|v| *v /= nx);
    z.iter_mut().for_each(|v| *v /= nz);
    let w = procrustes(&mat("a", 1, d, x.clone()), &mat("b", 1, d, z.clone()), &identity_dict("a", "b", [0])).unwrap();
    let mut xw = vec![0.0; d];
    matmul(1, d, d, &x, &w, &mut xw);
    assert!(max_abs_diff(&xw, &z) < 1e-6);
}

#[test]
fn procrustes_dimension_mismatch() {
    let a = mat("w", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let b = mat("w", 2, 1, vec![1.0, 2.0]);
    assert!(matches!(procrustes(&a, &b, &identity_dict("w", "w", [0])), Err(Error::DimensionMismatch(_))));
}

#[test]
fn procrustes_is_optimal_among_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, d) = (30, 4);
    let x = gaussian(n, d, &mut rng);
    let z = gaussian(n, d, &mut rng);
    // The Procrustes solution maximizes Σ (x_i W)·z_i; with unit rows that is Σ cos.
    let xu = unit_rows_lossy(&x, d);
    let zu = unit_rows_lossy(&z, d);
    let w = procrustes(&mat("w", n, d, xu.clone()), &mat("w", n, d, zu.clone()), &identity_dict("w", "w", 0..n)).unwrap();
    let base = objective(&xu, &zu, d, &w);
    for _ in 0..100 {
        // Small random rotation: QR of I + εA.
        let a = gaussian(d, d, &mut rng);
        let pert: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 } + 0.05 * a[i]).collect();
        let q = DMatrix::from_row_slice(d, d, &pert).qr().q();
        let q: Vec<f64> = (0..d * d).map(|i| q[(i / d, i % d)]).collect();
        let mut wq = vec![0.0; d * d];
        matmul(d, d, d, &w, &q, &mut wq);
        assert!(base >= objective(&xu, &zu, d, &wq) - 1e-9);
    }
}

#[test]
fn orthogonal_maps_preserve_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 8;
    let r = random_orthogonal(d, &mut rng);
    for _ in 0..20 {
        let x = gaussian(2, d, &mut rng);
        let mut y = vec![0.0; 2 * d];
        matmul(2, d, d, &x, &r, &mut y);
        let c0 = dot(&x[..d], &x[d..]) / (norm(&x[..d]) * norm(&x[d..]));
        let c1 = dot(&y[..d], &y[d..]) / (norm(&y[..d]) * norm(&y[d..]));
        assert!((c0 - c1).abs() < 1e-9);
    }
}

#[test]
fn csls_hand_example() {
    let x = [1.0, 0.0];
    let y1 = [1.0, 0.0];
    let y2 = [0.0, 1.0];
    let targets = [1.0, 0.0, 0.0, 1.0];
    assert!((csls_score(&x, &y1, &x, &targets, 2, 1) - 0.0).abs() < 1e-12);
    assert!((csls_score(&x, &y2, &x, &targets, 2, 1) + 1.0).abs() < 1e-12);
    let same = [0.6, 0.8, 0.6, 0.8, 0.6, 0.8];
    assert!(csls_score(&same[..2], &same[2..4], &same, &same, 2, 2).abs() < 1e-12);
}

#[test]
fn csls_with_full_neighborhood_ranks_like_cosine_when_r_is_flat() {
    // With k = |pool| the r terms are pool means; a centered pool makes them 0
    // for every row, so CSLS = 2 cos.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d) = (10, 8);
    let mut xs = unit_rows_lossy(&gaussian(n, d, &mut rng), d);
    let mut ys = unit_rows_lossy(&gaussian(n, d, &mut rng), d);
    for m in [&mut xs, &mut ys] {
        let half = n / 2;
        for i in 0..half {
            for j in 0..d {
                m[(half + i) * d + j] = -m[i * d + j];
            }
        }
    }
    for i in 0..n {
        let x = &xs[i * d..(i + 1) * d];
        let by_csls: Vec<usize> = {
            let mut v: Vec<(usize, f64)> = (0..n).map(|j| (j, csls_score(x, &ys[j * d..(j + 1) * d], &xs, &ys, d, n))).collect();
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            v.into_iter().map(|p| p.0).collect()
        };
        let by_cos: Vec<usize> = {
            let mut v: Vec<(usize, f64)> = (0..n).map(|j| (j, dot(x, &ys[j * d..(j + 1) * d]))).collect();
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            v.into_iter().map(|p| p.0).collect()
        };
        assert_eq!(by_csls, by_cos);
    }
}

#[test]
fn induction_hand_placed() {
    let x = mat("s", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let z = mat("t", 2, 2, vec![0.1, 0.995, 0.995, 0.1]);
    let cfg = MapConfig { csls_k: 1, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = induce_dictionary(&x, &z, &cfg, 1.0, &mut rng).unwrap();
    assert_eq!(d.pairs(), &[("s0".to_string(), "t1".to_string()), ("s1".to_string(), "t0".to_string())]);
    assert!(induce_dictionary(&x, &z, &cfg, 0.0, &mut rng).unwrap().is_empty());
    let same = induce_dictionary(&x, &x, &cfg, 1.0, &mut rng).unwrap();
    assert_eq!(same.pairs(), &[("s0".to_string(), "s0".to_string()), ("s1".to_string(), "s1".to_string())]);
}

#[test]
fn induction_matches_brute_force_csls() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (ns, nt, k) in [(50, 60, 3), (200, 180, 10), (7, 7, 20)] {
        let d = 6;
        let xs = unit_rows_lossy(&gaussian(ns, d, &mut rng), d);
        let zs = unit_rows_lossy(&gaussian(nt, d, &mut rng), d);
        let x = mat("s", ns, d, xs.clone());
        let z = mat("t", nt, d, zs.clone());
        let cfg = MapConfig { csls_k: k, ..Default::default() };
        let got = induce_dictionary(&x, &z, &cfg, 1.0, &mut rng).unwrap();

        let score = |i: usize, j: usize| csls_score(&xs[i * d..(i + 1) * d], &zs[j * d..(j + 1) * d], &xs, &zs, d, k);
        let mut want = std::collections::BTreeSet::new();
        for i in 0..ns {
            let j = (0..nt).fold(0, |b, j| if score(i, j) > score(i, b) { j } else { b });
            want.insert((i, j));
        }
        for j in 0..nt {
            let i = (0..ns).fold(0, |b, i| if score(i, j) > score(b, j) { i } else { b });
            want.insert((i, j));
        }
        let want = BilingualDictionary::from_ids(&want.into_iter().collect::<Vec<_>>(), x.vocab(), z.vocab(), Provenance::Induced);
        assert_eq!(got, want, "ns={ns} nt={nt} k={k}");
    }
}

#[test]
fn self_learning_recovers_rotation_from_few_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (300, 32);
    let x = gaussian(n, d, &mut rng);
    let r = random_orthogonal(d, &mut rng);
    let mut z = vec![0.0; n * d];
    matmul(n, d, d, &x, &r, &mut z);
    let xm = mat("w", n, d, x);
    let zm = mat("w", n, d, z);
    let seed = identity_dict("w", "w", (0..n).step_by(10));
    let sol = self_learn(&xm, &zm, &seed, &MapConfig::default()).unwrap();
    assert!(orthogonality_error(&sol.w_src, d) < 1e-6);
    let gold = identity_dict("w", "w", 0..n);
    let hits = sol.final_dictionary.pairs().iter().filter(|(a, b)| a == b).count();
    assert!(hits as f64 / gold.len() as f64 >= 0.99);
    for (r, o) in sol.history.iter().zip(&sol.objective_trace) {
        assert_eq!(r.objective, *o);
    }
    let accepted: Vec<f64> = sol.history.iter().filter(|r| r.accepted).map(|r| r.objective).collect();
    assert!(accepted.windows(2).all(|w| w[1] >= w[0]));
    assert!(sol.report().contains("status"));
}

#[test]
fn one_iteration_with_gold_seed_is_plain_procrustes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d) = (50, 6);
    let xm = mat("a", n, d, gaussian(n, d, &mut rng));
    let zm = mat("b", n, d, gaussian(n, d, &mut rng));
    let gold = identity_dict("a", "b", 0..n);
    let cfg = MapConfig { max_iterations: 1, ..Default::default() };
    let sol = self_learn(&xm, &zm, &gold, &cfg).unwrap();
    let plain = procrustes(&normalize(&xm).unwrap(), &normalize(&zm).unwrap(), &gold).unwrap();
    assert_eq!(sol.w_src, plain);
    assert_eq!(sol.status, MapStatus::MaxIterationsReached);
}

#[test]
fn model_space_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, d) = (120, 8);
    let base = mat("w", n, d, gaussian(n, d, &mut rng));
    let mapped = align_to_model_space(&base, &base, &MapConfig::default()).unwrap();
    assert!(max_abs_diff(mapped.vectors(), normalize(&base).unwrap().vectors()) < 1e-9);

    let r = random_orthogonal(d, &mut rng);
    let rotated = apply_transform(&base, &r).unwrap();
    // new = model · R  ⇒  the learned transform maps new back onto model.
    let mapped = align_to_model_space(&rotated, &base, &MapConfig::default()).unwrap();
    assert!(max_abs_diff(mapped.vectors(), normalize(&base).unwrap().vectors()) < 1e-6);

    let other = mat("q", n, d, gaussian(n, d, &mut rng));
    assert!(matches!(align_to_model_space(&other, &base, &MapConfig::default()), Err(Error::NoIdenticalTokens)));
}

#[test]
fn concatenation_policy() {
    let a = EmbeddingMatrix::new(
        Vocabulary::from_entries(&[], vec![("x".into(), 1), ("xy".into(), 1)]).unwrap(),
        vec![1.0, 2.0, 3.0, 4.0],
        2,
    )
    .unwrap();
    let b = EmbeddingMatrix::new(
        Vocabulary::from_entries(&[], vec![("xy".into(), 1), ("y".into(), 1)]).unwrap(),
        vec![5.0, 8.0, 7.0, 9.0],
        2,
    )
    .unwrap();
    let joint = Vocabulary::from_entries(&[PAD, UNK], vec![("x".into(), 1), ("xy".into(), 1), ("y".into(), 1)]).unwrap();
    let m = concat_mapped(&a, &b, &joint, 3).unwrap();
    assert_eq!(m.row_of("x").unwrap(), &[1.0, 2.0]);
    assert_eq!(m.row_of("xy").unwrap(), &[4.0, 6.0]);
    assert_eq!(m.row_of("y").unwrap(), &[7.0, 9.0]);
    let again = concat_mapped(&a, &b, &joint, 3).unwrap();
    assert_eq!(m.row(0), again.row(0));
    assert_ne!(m.row(0), m.row(1));
}
