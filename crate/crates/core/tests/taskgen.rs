mod common;

use statrs::distribution::{ChiSquared, ContinuousCDF, InverseGamma};
use statrs::statistics::Distribution;
use swarmset::taskgen::*;
use swarmset::Error;

fn chi_square_uniform_p(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expect = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expect).powi(2) / expect)
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .cdf(stat)
}

#[test]
fn direct_task_size_and_cluster_count_distributions() {
    let mut n_sum = 0usize;
    let mut k_hist = [0usize; 8];
    let mut n_hist = [0usize; 10];
    for i in 0..10_000 {
        let t = gen_direct_task(&mut task_rng(11, i));
        n_sum += t.len();
        k_hist[t.n_clust - 3] += 1;
        n_hist[((t.len() - 100) * 10 / 901).min(9)] += 1;
    }
    let mean = n_sum as f64 / 10_000.0;
    assert!((mean - 550.0).abs() <= 15.0, "mean N {mean}");
    let p = chi_square_uniform_p(&k_hist);
    assert!(p > 0.001, "K histogram {k_hist:?} p={p}");
    let p = chi_square_uniform_p(&n_hist);
    assert!(p > 0.001, "N histogram {n_hist:?} p={p}");
}

#[test]
fn inverse_wishart_mean_and_marginal() {
    let mut rng = task_rng(12, 0);
    let draws: Vec<[f64; 4]> = (0..10_000)
        .map(|_| sample_inverse_wishart_2d(&mut rng, 4.0, [0.05, 0.0, 0.0, 0.05]))
        .collect();
    for d in &draws {
        assert!(d[0] > 0.0 && d[3] > 0.0 && d[0] * d[3] - d[1] * d[2] > 0.0);
        assert!((d[1] - d[2]).abs() <= 1e-12 * d[0].max(d[3]));
    }
    let mean = |e: usize| draws.iter().map(|d| d[e]).sum::<f64>() / draws.len() as f64;
    for e in [0, 3] {
        let m = mean(e);
        assert!((m - 0.05).abs() <= 0.005, "diagonal mean {m}");
    }
    for e in [1, 2] {
        let m = mean(e);
        assert!(m.abs() <= 0.005, "off-diagonal mean {m}");
    }
    // Diagonal marginal of IW(4, 0.05·I) in 2-D is InvGamma(1.5, 0.025).
    let ig = InverseGamma::new(1.5, 0.025).unwrap();
    assert!((ig.mean().unwrap() - 0.05).abs() < 1e-12);
    let mut xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = ig.cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    // 1.95/√n is the 0.001 critical value.
    assert!(ks < 1.95 / n.sqrt(), "KS statistic {ks}");
}

#[test]
fn direct_covariances_rarely_rejected() {
    let (ds, stats) = generate_dataset(TaskKind::Direct, 200, 20, 5).unwrap();
    let covs: usize = ds.tasks.iter().map(|t| t.covariances.len()).sum();
    assert!((stats.rejected_covariances as f64) < 0.01 * covs as f64);
    for t in &ds.tasks {
        t.validate().unwrap();
    }
}

#[test]
fn uniform_labels_for_three_clusters() {
    let cfg = DirectTaskConfig {
        n_min: 100_000,
        n_max: 100_000,
        k_min: 3,
        k_max: 3,
        ..DirectTaskConfig::default()
    };
    let (t, _) = gen_direct_task_with(&cfg, &mut task_rng(13, 0));
    for k in 0..3 {
        let f = t.labels.iter().filter(|&&l| l == k).count() as f64 / 100_000.0;
        assert!((0.32..=0.345).contains(&f), "class {k}: {f}");
    }
}

#[test]
fn param_task_distributions() {
    let mut w_sum = [0.0f64; 4];
    let mut n_hist = [0usize; 4];
    for i in 0..10_000 {
        let t = gen_param_task(&mut task_rng(14, i));
        assert_eq!(t.n_clust, 4);
        for c in &t.covariances {
            assert_eq!(*c, [0.09, 0.0, 0.0, 0.09]);
        }
        assert!(t.centers.data().iter().all(|&m| m > -4.0 && m < 4.0));
        assert!((100..=500).contains(&t.len()));
        n_hist[((t.len() - 100) * 4 / 401).min(3)] += 1;
        for (s, &w) in w_sum.iter_mut().zip(&t.weights) {
            *s += w as f64;
        }
        t.validate().unwrap();
    }
    for s in w_sum {
        assert!(
            (s / 10_000.0 - 0.25).abs() <= 0.01,
            "weight mean {}",
            s / 10_000.0
        );
    }
    assert!(chi_square_uniform_p(&n_hist) > 0.001, "{n_hist:?}");
}

#[test]
fn param_points_follow_their_component() {
    // Per-component sample std of the points is σ = 0.3.
    let t = gen_param_task_with(
        &ParamTaskConfig {
            n_min: 20_000,
            n_max: 20_000,
            ..ParamTaskConfig::default()
        },
        &mut task_rng(15, 0),
    );
    let n = t.len();
    for k in 0..4 {
        let idx: Vec<usize> = (0..n).filter(|&i| t.labels[i] as usize == k).collect();
        if idx.len() < 500 {
            continue;
        }
        for d in 0..2 {
            let vals: Vec<f64> = idx
                .iter()
                .map(|&i| t.points.data()[d * n + i] as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((m - t.centers.data()[d * 4 + k] as f64).abs() < 0.05);
            assert!((sd - 0.3).abs() < 0.03, "sd {sd}");
        }
    }
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, count) in [
        (TaskKind::Direct, 100),
        (TaskKind::Param, 37),
        (TaskKind::Direct, 0),
    ] {
        let (ds, _) = generate_dataset(kind, count, count / 10, 21).unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.tasks.len(), ds.tasks.len());
        for (a, b) in ds.tasks.iter().zip(&back.tasks) {
            let bits = |t: &ClusterTask| -> Vec<u32> {
                t.points
                    .data()
                    .iter()
                    .chain(t.centers.data())
                    .chain(t.covariances.iter().flatten())
                    .chain(&t.weights)
                    .map(|v| v.to_bits())
                    .collect()
            };
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.n_clust, b.n_clust);
        }
        assert_eq!(
            encode_dataset(&back).unwrap(),
            std::fs::read(&path).unwrap()
        );
    }
}

#[test]
fn corruption_is_detected() {
    let (ds, _) = generate_dataset(TaskKind::Param, 5, 1, 22).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    let header = 20 + serde_json::to_vec(&ds.manifest).unwrap().len();
    // Flip one byte inside the point payload of the third record.
    for offset in [header + 20, bytes.len() - 40, bytes.len() - 2] {
        let mut bad = bytes.clone();
        bad[offset] ^= 0x10;
        assert!(
            matches!(decode_dataset(&bad), Err(Error::Checksum { .. })),
            "offset {offset}"
        );
    }
    assert!(matches!(
        decode_dataset(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(
        decode_dataset(&bytes[..12]),
        Err(Error::Truncated { .. })
    ));
    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(b"XXXXXXXX");
    assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[8] = 2;
    assert!(matches!(
        decode_dataset(&bad),
        Err(Error::VersionMismatch { found: 2, .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_dataset(&extra).is_err());
}

#[test]
fn manifest_split_must_add_up() {
    let (mut ds, _) = generate_dataset(TaskKind::Param, 4, 1, 23).unwrap();
    ds.manifest.val_count = 3;
    assert!(encode_dataset(&ds).is_err());
    assert!(generate_dataset(TaskKind::Param, 4, 5, 23).is_err());
}

#[test]
fn generation_is_reproducible() {
    let a = encode_dataset(&generate_dataset(TaskKind::Direct, 30, 3, 99).unwrap().0).unwrap();
    let b = encode_dataset(&generate_dataset(TaskKind::Direct, 30, 3, 99).unwrap().0).unwrap();
    let c = encode_dataset(&generate_dataset(TaskKind::Direct, 30, 3, 100).unwrap().0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(default_val_count(10_000), 1000);
}

#[test]
fn shuffled_tasks_keep_their_pairs() {
    let t = gen_direct_task(&mut task_rng(30, 0));
    let s = shuffle_entities(&t, &mut task_rng(31, 0));
    assert_ne!(s.labels, t.labels);
    let pairs = |t: &ClusterTask| {
        let n = t.len();
        let mut v: Vec<(u32, u32, u16)> = (0..n)
            .map(|i| {
                (
                    t.points.data()[i].to_bits(),
                    t.points.data()[n + i].to_bits(),
                    t.labels[i],
                )
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(pairs(&t), pairs(&s));
    assert_eq!(s.centers, t.centers);
}
