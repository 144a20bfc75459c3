use imf_core::data::{mmd_rbf, noise_floor, sample_data, swd, DatasetName, DatasetSpec};
use imf_core::flow::{
    sample, standard_normal, train_teacher, CfgConfig, StepSchedule, TeacherTrainConfig,
};
use imf_core::nn::{Arch, Condition, VelocityNet};
use imf_core::rng::rng_from_seed;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn gauss8_label_counts_and_radius() {
    let spec = DatasetSpec::gauss8();
    let batch = sample_data(&spec, 8000, 1).unwrap();
    let mut counts = [0usize; 8];
    for &l in batch.labels().unwrap() {
        counts[l] += 1;
    }
    assert!(
        counts.iter().all(|&c| (880..=1120).contains(&c)),
        "{counts:?}"
    );
    let limit = 2.0 + 5.0 * spec.noise;
    let inside = batch
        .points()
        .outer_iter()
        .filter(|p| p.dot(p).sqrt() <= limit)
        .count();
    assert!(inside as f64 >= 0.999 * 8000.0);
}

#[test]
fn shift_by_three_matches_directional_average() {
    let a = standard_normal(&mut rng_from_seed(2), 4096, 2);
    let mut b = a.clone();
    b.column_mut(0).mapv_inplace(|x| x + 3.0);
    let got = swd(a.view(), b.view(), 256, 3).unwrap();
    let oracle = 3.0 / 2f64.sqrt();
    assert!((got / oracle - 1.0).abs() < 0.1, "{got} vs {oracle}");
}

#[test]
fn swd_symmetry_permutation_and_scale() {
    let mut rng = rng_from_seed(4);
    let a = standard_normal(&mut rng, 300, 2);
    let b = standard_normal(&mut rng, 300, 2) * 1.5;
    assert_eq!(swd(a.view(), a.view(), 64, 1).unwrap(), 0.0);
    assert_eq!(
        swd(a.view(), b.view(), 64, 1).unwrap(),
        swd(b.view(), a.view(), 64, 1).unwrap()
    );
    let mut rows: Vec<usize> = (0..300).collect();
    rows.shuffle(&mut rng);
    let shuffled = a.select(Axis(0), &rows);
    let d1 = swd(a.view(), b.view(), 64, 1).unwrap();
    let d2 = swd(shuffled.view(), b.view(), 64, 1).unwrap();
    assert!((d1 - d2).abs() < 1e-12);
    assert!(swd(a.view(), (&a * 2.0).view(), 64, 1).unwrap() > 0.0);
}

/// Minimum-cost perfect matching (Hungarian method with potentials).
fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

fn sq_cost(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter()
        .map(|x| {
            b.outer_iter()
                .map(|y| (&x - &y).mapv(|d| d * d).sum())
                .collect()
        })
        .collect()
}

fn exact_w2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    (assignment_cost(&sq_cost(a, b)) / a.nrows() as f64).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn assignment_oracle_agrees_with_enumeration() {
    let mut rng = rng_from_seed(5);
    for n in 1..=6 {
        let a = standard_normal(&mut rng, n, 2);
        let b = standard_normal(&mut rng, n, 2);
        let cost = sq_cost(a.view(), b.view());
        let brute = permutations(n)
            .iter()
            .map(|p| (0..n).map(|i| cost[i][p[i]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!((assignment_cost(&cost) - brute).abs() < 1e-12);
    }
}

#[test]
fn swd_is_bounded_by_and_ordered_like_exact_w2() {
    let mut rng = rng_from_seed(6);
    let base = standard_normal(&mut rng, 64, 2);
    let mut pairs = Vec::new();
    for k in 0..12 {
        let shift = [
            rng.gen_range(-1.0..1.0) * k as f64 * 0.3,
            rng.gen_range(-1.0..1.0) * k as f64 * 0.3,
        ];
        let scale = 1.0 + 0.1 * rng.gen_range(0.0..1.0) * k as f64;
        let other = Array2::from_shape_fn((64, 2), |(i, j)| base[[i, j]] * scale + shift[j])
            + standard_normal(&mut rng, 64, 2) * 0.1;
        let w2 = exact_w2(base.view(), other.view());
        let sw = swd(base.view(), other.view(), 256, 7).unwrap();
        assert!(sw <= w2 + 1e-12, "sliced {sw} above exact {w2}");
        pairs.push((w2, sw));
    }
    for x in &pairs {
        for y in &pairs {
            if x.0 > 1.5 * y.0 {
                assert!(x.1 > y.1, "ordering flipped: {x:?} vs {y:?}");
            }
        }
    }
}

#[test]
fn mmd_examples() {
    let mut rng = rng_from_seed(8);
    let a = standard_normal(&mut rng, 200, 2);
    let same = mmd_rbf(a.view(), a.view(), 0.5).unwrap();
    assert!(same.raw <= 1e-10 && same.value == 0.0);

    let tight = |c: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        Array2::from_shape_fn((100, 2), |_| c + rng.gen_range(-0.01..0.01))
    };
    let far = mmd_rbf(
        tight(-10.0, &mut rng).view(),
        tight(10.0, &mut rng).view(),
        0.5,
    )
    .unwrap();
    assert!((far.value - 2.0).abs() < 0.01, "{}", far.value);
    let b = standard_normal(&mut rng, 200, 2);
    assert!(far.value > mmd_rbf(a.view(), b.view(), 0.5).unwrap().value);

    let mut rows: Vec<usize> = (0..200).collect();
    rows.shuffle(&mut rng);
    let p = mmd_rbf(
        a.select(Axis(0), &rows).view(),
        b.select(Axis(0), &rows).view(),
        0.5,
    )
    .unwrap();
    assert!((p.raw - mmd_rbf(a.view(), b.view(), 0.5).unwrap().raw).abs() < 1e-12);
}

#[test]
fn noise_floor_shrinks_with_sample_size() {
    let spec = DatasetSpec::gauss8();
    let big = noise_floor(&spec, 4096, 3, 9, 64).unwrap();
    let small = noise_floor(&spec, 512, 3, 9, 64).unwrap();
    assert!(big > 0.0 && big < small, "{big} vs {small}");
    assert_eq!(big, noise_floor(&spec, 4096, 3, 9, 64).unwrap());
}

#[test]
fn other_datasets_parse_and_sample() {
    for (name, labelled) in [("moons", true), ("checkerboard", false)] {
        let spec = DatasetSpec::new(name.parse::<DatasetName>().unwrap());
        let b = sample_data(&spec, 500, 1).unwrap();
        assert_eq!(b.labels().is_some(), labelled);
        assert_eq!(b.len(), 500);
    }
}

#[test]
fn guided_teacher_keeps_each_label_in_its_mode_cell() {
    let spec = DatasetSpec::gauss8();
    let data = sample_data(&spec, 20_000, 10).unwrap();
    let net =
        VelocityNet::init(Arch::new(2, vec![64, 64], 16, 8, 8), &mut rng_from_seed(11)).unwrap();
    let cfg = TeacherTrainConfig {
        steps: 2500,
        batch: 256,
        ..TeacherTrainConfig::default()
    };
    let teacher = train_teacher(net, &data, &cfg, &mut rng_from_seed(12))
        .unwrap()
        .net;
    let centers = DatasetSpec::gauss8_centers();
    let per_label = 256;
    let z0 = standard_normal(&mut rng_from_seed(13), per_label, 2);
    for k in 0..8 {
        let cond = vec![Condition::Label(k); per_label];
        let end = sample(
            &teacher,
            z0.view(),
            &StepSchedule::uniform(32).unwrap(),
            &cond,
            CfgConfig::new(3.0),
        )
        .unwrap()
        .into_last();
        let hits = end
            .outer_iter()
            .filter(|p| {
                let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                (0..8).min_by(|&i, &j| d(&centers[i]).total_cmp(&d(&centers[j]))) == Some(k)
            })
            .count();
        assert!(
            hits as f64 >= 0.9 * per_label as f64,
            "label {k}: {hits}/{per_label}"
        );
    }
}
