//! Property tests over randomly drawn instances.

use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphmeta::adcore::{Order, ParamSet, Tape, Tensor};
use graphmeta::encoder::{EncoderKind, GraphContext};
use graphmeta::episodes::{inject_noise, noisy_count, sample_episode, TaskShape};
use graphmeta::graph::{generate_sbm, hop_adjacency, node_homophily, sym_normalize, ClassSplit, Graph, SbmSpec, Split};
use graphmeta::harness::metrics::{accuracy, macro_f1};
use graphmeta::metalearner::{adapt_phi, inner_update, score, HEAD_BIAS};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, d: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let split = ClassSplit { train: vec![0, 1, 2], val: vec![], test: vec![] };
    Graph::new(n, edges, random_tensor(rng, n, d), labels, split).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, 4, 3);
        let w = random_tensor(&mut rng, 3, 2);
        let grads = |ca: f64, cb: f64| {
            let tape = Tape::new(Order::First);
            let wv = tape.param(w.clone());
            let h = tape.constant(x.clone()).matmul(wv).unwrap();
            let l1 = h.tanh().unwrap().sum_all().unwrap();
            let l2 = h.softmax_rows().unwrap().square().unwrap().sum_all().unwrap();
            let loss = l1.scale(ca).unwrap().add(l2.scale(cb).unwrap()).unwrap();
            tape.gradients(loss, &[wv]).unwrap().remove(0)
        };
        let (g1, g2, g) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(a, b));
        for i in 0..g.len() {
            let want = a * g1.values()[i] + b * g2.values()[i];
            prop_assert!((g.values()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn param_round_trip_is_bit_exact(seed in any::<u64>(), shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (i, (r, c)) in shapes.into_iter().enumerate() {
            p.insert(format!("p{i}"), random_tensor(&mut rng, r, c));
        }
        let back = p.unflatten(&p.flatten()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn hop_supports_are_disjoint_and_off_diagonal(seed in any::<u64>(), n in 1usize..40, p in 0.0f64..0.4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, p, 1);
        let hops: Vec<_> = (1..=3).map(|h| hop_adjacency(g.adjacency(), h).unwrap()).collect();
        let mut seen = HashSet::new();
        for h in &hops {
            prop_assert!(h.has_zero_diagonal());
            for (r, c, _) in h.triplets() {
                prop_assert!(seen.insert((r, c)), "({}, {}) in two hop matrices", r, c);
            }
        }
    }

    #[test]
    fn sym_normalize_is_contractive(seed in any::<u64>(), n in 2usize..50, p in 0.02f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, p, 1);
        let m = sym_normalize(g.adjacency()).to_dense();
        // Power iteration on M² (symmetric PSD) estimates the squared spectral radius.
        let mut v = random_tensor(&mut rng, n, 1);
        let mut rho2 = 0.0;
        for _ in 0..500 {
            let w = m.matmul(&m.matmul(&v).unwrap()).unwrap();
            let norm = w.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            let vn = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || vn == 0.0 {
                break;
            }
            rho2 = norm / vn;
            v = w.scale(1.0 / norm);
        }
        prop_assert!(rho2.sqrt() <= 1.0 + 1e-6, "spectral radius {}", rho2.sqrt());
    }

    #[test]
    fn homophily_is_a_fraction(seed in any::<u64>(), n in 1usize..30, p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = node_homophily(&random_graph(&mut rng, n, p, 1));
        prop_assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..25, p in 0.05f64..0.5, sgc in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, p, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let h = g.permute(&perm).unwrap();
        let kind = if sgc { EncoderKind::Sgc } else { EncoderKind::Hetero };
        let (cg, ch) = (GraphContext::new(&g, kind, 2).unwrap(), GraphContext::new(&h, kind, 2).unwrap());
        let theta = cg.init_params(4, &mut rng);
        let (zg, zh) = (cg.encode_values(&theta).unwrap(), ch.encode_values(&theta).unwrap());
        for v in 0..n {
            for k in 0..4 {
                prop_assert!((zg.get(v, k) - zh.get(perm[v], k)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn episodes_have_the_requested_shape(seed in any::<u64>(), n_way in 1usize..6, k_shot in 1usize..6, m_query in 1usize..6) {
        let g = generate_sbm(&SbmSpec { classes: 8, per_class: 12, split: Some([8, 0, 0]), seed: 3, ..SbmSpec::default() }).unwrap();
        let ep = sample_episode(&g, Split::Train, TaskShape { n_way, k_shot, m_query, pool_cap: 20 }, seed).unwrap();
        prop_assert_eq!(ep.classes.len(), n_way);
        for &c in &ep.classes {
            prop_assert_eq!(ep.support.iter().filter(|p| p.1 == c && g.labels()[p.0] == c).count(), k_shot);
            prop_assert_eq!(ep.query.iter().filter(|p| p.1 == c && g.labels()[p.0] == c).count(), m_query);
        }
        let support: HashSet<usize> = ep.support_nodes().into_iter().collect();
        prop_assert!(ep.query_nodes().iter().all(|v| !support.contains(v)));
        prop_assert!(ep.pool.iter().all(|v| !support.contains(v)) && ep.pool.len() <= 20);
    }

    #[test]
    fn noise_changes_only_the_counted_entries(seed in any::<u64>(), n_way in 1usize..5, k_shot in 1usize..8, ratio in 0.0f64..0.99) {
        let g = generate_sbm(&SbmSpec { classes: 6, per_class: 20, split: Some([6, 0, 0]), seed: 4, ..SbmSpec::default() }).unwrap();
        let ep = sample_episode(&g, Split::Train, TaskShape { n_way, k_shot, m_query: 2, pool_cap: 0 }, seed).unwrap();
        let noisy = inject_noise(&g, &ep, ratio, seed ^ 1).unwrap();
        let changed = ep.support.iter().zip(&noisy.support).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, n_way * noisy_count(ratio, k_shot));
        prop_assert_eq!(noisy.support.iter().filter(|&&(v, c)| g.labels()[v] != c).count(), changed);
        prop_assert_eq!(&noisy.query, &ep.query);
        prop_assert_eq!(&noisy.classes, &ep.classes);
    }

    #[test]
    fn score_argmax_ignores_row_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, phi, b) = (random_tensor(&mut rng, 6, 3), random_tensor(&mut rng, 4, 3), random_tensor(&mut rng, 1, 4));
        let tape = Tape::new(Order::First);
        let s1 = score(tape.constant(z.clone()), tape.constant(phi.clone()), tape.constant(b.clone())).unwrap().value();
        let s2 = score(tape.constant(z), tape.constant(phi), tape.constant(b.add_scalar(shift))).unwrap().value();
        prop_assert_eq!(s1.argmax_rows(), s2.argmax_rows());
        for i in 0..6 {
            prop_assert!((s1.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_step_adaptation_is_the_identity(seed in any::<u64>(), steps in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new(Order::First);
        let theta = ParamSet::new().with(HEAD_BIAS, random_tensor(&mut rng, 1, 3)).with("w", random_tensor(&mut rng, 2, 3)).to_vars(&tape);
        let z = tape.constant(random_tensor(&mut rng, 5, 2));
        let phi = tape.constant(random_tensor(&mut rng, 3, 2));
        let adapted = adapt_phi(phi, z, &theta, &[0, 1, 2, 0, 1], 0.0, steps).unwrap();
        prop_assert_eq!(&*adapted.value(), &*phi.value());
        let out = inner_update(theta.alias().unwrap(), 0.0, steps, |th| th.get("w")?.square()?.sum_all()).unwrap();
        prop_assert_eq!(out.values(), theta.values());
    }
}

/// Every prediction vector of length up to 6 over 3 classes.
#[test]
fn metrics_match_confusion_matrix_oracle() {
    let classes = [0, 1, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for len in 1..=6u32 {
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        for code in 0..3usize.pow(len) {
            let preds: Vec<usize> = (0..len).map(|i| code / 3usize.pow(i) % 3).collect();
            let mut m = [[0usize; 3]; 3];
            for (&p, &t) in preds.iter().zip(&labels) {
                m[t][p] += 1;
            }
            let acc = (0..3).map(|c| m[c][c]).sum::<usize>() as f64 / len as f64;
            let f1: f64 = (0..3)
                .map(|c| {
                    let tp = m[c][c] as f64;
                    let predicted: usize = (0..3).map(|t| m[t][c]).sum();
                    let actual: usize = m[c].iter().sum();
                    if predicted + actual == 0 { 0.0 } else { 2.0 * tp / (predicted + actual) as f64 }
                })
                .sum::<f64>()
                / 3.0;
            assert!((accuracy(&preds, &labels).unwrap() - acc).abs() <= 1e-12);
            assert!((macro_f1(&preds, &labels, &classes).unwrap() - f1).abs() <= 1e-12, "{preds:?} vs {labels:?}");
        }
    }
}

/// Class frequencies over 10,000 five-way draws from a 20-class split stay
/// within three standard deviations of uniform.
#[test]
fn episode_classes_are_uniform() {
    let g = generate_sbm(&SbmSpec { classes: 20, per_class: 3, feature_dim: 20, split: Some([20, 0, 0]), ..SbmSpec::default() }).unwrap();
    let shape = TaskShape { n_way: 5, k_shot: 1, m_query: 1, pool_cap: 0 };
    let draws = 10_000;
    let mut counts = [0usize; 20];
    for s in 0..draws {
        for c in sample_episode(&g, Split::Train, shape, s).unwrap().classes {
            counts[c] += 1;
        }
    }
    let p = 5.0 / 20.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!((k as f64 - mean).abs() <= 3.0 * sd, "class {c}: {k} vs {mean} ± {}", 3.0 * sd);
    }
}
