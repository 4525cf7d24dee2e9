mod common;

use std::f64::consts::PI;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use swarmset::model::{Model, ModelFamily, ModelSpec, Readout, SetFunction};
use swarmset::objectives::*;
use swarmset::{Array, Graph, PopulationBatch, Result};

fn plain_cross_entropy(logits: &Array<f64>, labels: &[usize], relabel: &[usize]) -> f64 {
    let (k, n) = (logits.dim(0), logits.dim(1));
    let mut s = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let z: f64 = (0..k).map(|q| logits.data()[q * n + i].exp()).sum();
        s -= (logits.data()[relabel[l] * n + i].exp() / z).ln();
    }
    s / n as f64
}

#[test]
fn three_cluster_loss_is_min_over_relabelings() {
    let mut r = rng(1);
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for _ in 0..50 {
        let logits = uniform_array::<f64>(&mut r, &[3, 8], 3.0);
        let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
        let best = perms
            .iter()
            .map(|p| plain_cross_entropy(&logits, &labels, p))
            .fold(f64::INFINITY, f64::min);
        let rep = direct_clustering_loss(&logits, &labels).unwrap();
        assert!((rep.value - best).abs() <= 1e-12);
        assert_eq!(rep.n_points, 8);
    }
}

#[test]
fn confident_correct_logits_approach_zero() {
    let labels = [2usize, 0, 0, 1, 2, 1];
    // Predicted cluster (l + 1) % 3 for label l, with a large margin.
    let logits = Array::<f64>::from_fn(&[3, 6], |idx| {
        let (k, i) = (idx / 6, idx % 6);
        if k == (labels[i] + 1) % 3 {
            40.0
        } else {
            0.0
        }
    });
    let rep = direct_clustering_loss(&logits, &labels).unwrap();
    assert!(rep.value < 1e-15);
    assert_eq!(rep.matched_perm, vec![2, 0, 1]);
}

#[test]
fn uniform_logits_any_labels() {
    let mut r = rng(2);
    for _ in 0..20 {
        let n = r.random_range(1..50);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..10)).collect();
        let rep = direct_clustering_loss(&Array::<f32>::zeros(&[10, n]), &labels).unwrap();
        assert!((rep.value - 10f64.ln()).abs() <= 1e-6);
    }
}

#[test]
fn relabeling_ground_truth_is_absorbed() {
    let mut r = rng(3);
    let logits = uniform_array::<f32>(&mut r, &[10, 40], 2.0);
    let labels: Vec<usize> = (0..40).map(|_| r.random_range(0..6)).collect();
    let relabel = random_perm(&mut r, 10);
    let moved: Vec<usize> = labels.iter().map(|&l| relabel[l]).collect();
    let a = direct_clustering_loss(&logits, &labels).unwrap().value;
    let b = direct_clustering_loss(&logits, &moved).unwrap().value;
    assert!((a - b).abs() <= 1e-5);
}

#[test]
fn graph_loss_matches_array_loss_and_gradient() {
    let mut r = rng(4);
    let lengths = [7usize, 3];
    let labels: Vec<Vec<usize>> = lengths
        .iter()
        .map(|&n| (0..n).map(|_| r.random_range(0..4)).collect())
        .collect();
    let x = random_batch::<f64>(&mut r, 4, &lengths);
    let mut g = Graph::new();
    let v = g.constant(x.values().clone());
    let (loss, per) = direct_loss_graph(&mut g, v, &labels, &lengths).unwrap();
    for b in 0..2 {
        let rep = direct_clustering_loss(&x.task(b), &labels[b]).unwrap();
        assert!((per[b] - rep.value).abs() <= 1e-12);
    }
    assert!((g.value(loss).item() - (per[0] + per[1]) / 2.0).abs() <= 1e-12);

    let worst = grad_check(&TensorList(vec![x.values().clone()]), bind_list, |g, v| {
        Ok(direct_loss_graph(g, v[0], &labels, &lengths)?.0)
    });
    assert!(worst <= 1e-6, "{worst}");
}

fn density_oracle(raw: &[f64], points: &Array<f64>) -> f64 {
    let k = raw.len() / 5;
    let n = points.dim(1);
    let zsum: f64 = (0..k).map(|j| raw[5 * j + 4].exp()).sum();
    let mut nll = 0.0;
    for i in 0..n {
        let mut dens = 0.0;
        for j in 0..k {
            let w = raw[5 * j + 4].exp() / zsum;
            let mut g = w;
            for d in 0..2 {
                let s = raw[5 * j + 2 + d].exp();
                let z = (points.data()[d * n + i] - raw[5 * j + d]) / s;
                g *= (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * s);
            }
            dens += g;
        }
        nll -= dens.ln();
    }
    nll / n as f64
}

#[test]
fn mixture_nll_anchors() {
    let std_normal = decode_mog(&[0.0; 5]).unwrap();
    let nll = mog_nll(&std_normal, &Array::<f64>::zeros(&[2, 1])).unwrap();
    assert!((nll - 1.837877).abs() <= 1e-6);

    // A point sitting on a mode with weight one: NLL = log(2π σ₁ σ₂).
    let raw = [10.0, -20.0, 0.3_f64.ln(), 0.7_f64.ln(), 0.0];
    let at_mode = Array::<f64>::new(&[2, 1], vec![10.0, -20.0]).unwrap();
    let nll = mog_nll(&decode_mog(&raw).unwrap(), &at_mode).unwrap();
    assert!((nll - (2.0 * PI * 0.3 * 0.7).ln()).abs() <= 1e-12);
}

#[test]
fn mixture_nll_matches_density_sum() {
    let mut r = rng(5);
    for _ in 0..20 {
        let raw: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let pts = uniform_array::<f64>(&mut r, &[2, 10], 2.0);
        let nll = mog_nll(&decode_mog(&raw).unwrap(), &pts).unwrap();
        assert!((nll - density_oracle(&raw, &pts)).abs() <= 1e-9);
    }
}

#[test]
fn mixture_nll_stays_finite_far_away() {
    for ls in [-7.0, 0.0, 7.0, -30.0, 30.0] {
        let p = decode_mog(&[0.0, 0.0, ls, ls, 0.0, 1.0, 1.0, ls, 0.0, 2.0]).unwrap();
        let pts = Array::<f64>::new(&[2, 3], vec![1e3, -1e3, 0.0, -1e3, 1e3, 5.0]).unwrap();
        assert!(mog_nll(&p, &pts).unwrap().is_finite(), "log std {ls}");
    }
}

#[test]
fn decoded_weights_are_distribution() {
    let mut r = rng(6);
    for _ in 0..50 {
        let raw: Vec<f64> = (0..20).map(|_| r.random_range(-10.0..10.0)).collect();
        let p = decode_mog(&raw).unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(p.stds().data().iter().all(|&s| s > 0.0));
    }
}

fn mog_graph(
    g: &mut Graph<f64>,
    raw: swarmset::Var,
    pts: &PopulationBatch<f64>,
) -> Result<(swarmset::Var, Vec<f64>)> {
    let pv = g.constant(pts.values().clone());
    mog_nll_graph(g, raw, pv, pts.lengths())
}

#[test]
fn mixture_graph_matches_array_and_gradient() {
    let mut r = rng(7);
    let lengths = [6usize, 2, 9];
    let pts = random_batch::<f64>(&mut r, 2, &lengths);
    let raw = uniform_array::<f64>(&mut r, &[3, 15], 1.0);
    let mut g = Graph::new();
    let rv = g.constant(raw.clone());
    let (loss, per) = mog_graph(&mut g, rv, &pts).unwrap();
    for b in 0..3 {
        let p = decode_mog(&raw.data()[b * 15..(b + 1) * 15]).unwrap();
        assert!((per[b] - mog_nll(&p, &pts.task(b)).unwrap()).abs() <= 1e-12);
    }
    assert!((g.value(loss).item() - per.iter().sum::<f64>() / 3.0).abs() <= 1e-12);
    let worst = grad_check(&TensorList(vec![raw]), bind_list, |g, v| {
        Ok(mog_graph(g, v[0], &pts)?.0)
    });
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn mean_pool_head_oracles() {
    let mut r = rng(8);
    let y = random_batch::<f64>(&mut r, 3, &[5, 1, 8]);
    let pooled = mean_pool_head(&y).unwrap();
    assert_eq!(pooled.shape(), &[3, 3]);
    for b in 0..3 {
        for d in 0..3 {
            let len = y.lengths()[b];
            let s: f64 = (0..len).map(|i| y.values().at(&[b, d, i])).sum::<f64>() / len as f64;
            assert!((pooled.at(&[b, d]) - s).abs() <= 1e-12);
        }
    }
    let c = PopulationBatch::from_sets(&[&Array::<f64>::full(&[2, 7], 0.375)]).unwrap();
    assert_eq!(mean_pool_head(&c).unwrap().data(), &[0.375, 0.375]);
}

struct UniformModel;

impl SetFunction<f64> for UniformModel {
    fn forward(&self, x: &PopulationBatch<f64>) -> Result<PopulationBatch<f64>> {
        let shape = [x.batch_size(), 10, x.n_max()];
        PopulationBatch::new(Array::full(&shape, 0.5), x.lengths().to_vec())
    }

    fn d_out(&self) -> usize {
        10
    }
}

#[test]
fn entropy_map_properties() {
    let mut r = rng(9);
    let pts = uniform_array::<f64>(&mut r, &[2, 12], 2.0);
    let grid = grid_points(4, 3, -3.0, 3.0);
    let uni = assignment_entropy_map(&UniformModel, &pts, &grid, 5).unwrap();
    assert!(uni.entropy.iter().all(|&h| (h - 10f64.ln()).abs() <= 1e-12));

    let spec = ModelSpec::new(ModelFamily::Swarm, "6-2-1", 2, 10, Readout::Entitywise).unwrap();
    let model = Model::<f64>::init(&spec, &mut r).unwrap();
    let map = assignment_entropy_map(&model, &pts, &grid, 5).unwrap();
    assert_eq!(map.entropy.len(), 12);
    assert_eq!(map.probs.len(), 10);
    for (g, &h) in map.entropy.iter().enumerate() {
        assert!((0.0..=10f64.ln() + 1e-12).contains(&h));
        let s: f64 = map.probs.iter().map(|p| p[g]).sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    // A probe on top of entity 3 sees what entity 3 sees in the augmented set.
    let probe = [[pts.at(&[0, 3]), pts.at(&[1, 3])]];
    let one = assignment_entropy_map(&model, &pts, &probe, 1).unwrap();
    let aug = Array::from_fn(&[2, 13], |idx| {
        let (d, i) = (idx / 13, idx % 13);
        if i == 12 {
            pts.at(&[d, 3])
        } else {
            pts.at(&[d, i])
        }
    });
    let y = model
        .forward(&PopulationBatch::from_sets(&[&aug]).unwrap())
        .unwrap()
        .task(0);
    let logits: Vec<f64> = (0..10).map(|k| y.at(&[k, 3])).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let h: f64 = logits
        .iter()
        .map(|l| {
            let p = l.exp() / z;
            -p * p.ln()
        })
        .sum();
    assert!((one.entropy[0] - h).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mean_pool_is_permutation_invariant(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let y = uniform_array::<f32>(&mut r, &[4, n], 3.0);
        let perm = random_perm(&mut r, n);
        let a = mean_pool_head(&PopulationBatch::from_sets(&[&y]).unwrap()).unwrap();
        let py = permute_columns(&y, &perm);
        let b = mean_pool_head(&PopulationBatch::from_sets(&[&py]).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}
