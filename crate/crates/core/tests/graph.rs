use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttn::autodiff::{Graph, Tensor};
use sttn::graph::*;

fn random_adjacency(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.05..1.0);
                a.set(&[i, j], w);
                a.set(&[j, i], w);
            }
        }
    }
    a
}

fn to_dense(t: &Tensor) -> DMatrix<f64> {
    let n = t.shape()[0];
    DMatrix::from_fn(n, n, |i, j| t.get(&[i, j]))
}

/// Normalised Laplacian written out entry by entry, independent of the library.
fn laplacian_oracle(a: &Tensor) -> DMatrix<f64> {
    let n = a.shape()[0];
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(&[i, j])).sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a.get(&[i, j]) * inv_sqrt[j]
    })
}

#[test]
fn power_iteration_matches_dense_eigensolve_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let n = rng.random_range(2..=10);
        let a = random_adjacency(n, rng.random_range(0.2..0.9), &mut rng);
        let graph = TrafficGraph::from_adjacency(a.clone(), 3).unwrap();

        let eig = SymmetricEigen::new(laplacian_oracle(&a));
        let lambda = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            (graph.lambda_max() - lambda).abs() < 1e-7,
            "trial {trial}: power iteration {} vs dense {lambda}",
            graph.lambda_max()
        );

        let scaled = SymmetricEigen::new(to_dense(graph.scaled_laplacian()));
        for &ev in scaled.eigenvalues.iter() {
            assert!((-1.0 - 1e-8..=1.0 + 1e-8).contains(&ev), "trial {trial}: eigenvalue {ev}");
        }
    }
}

#[test]
fn scaled_laplacian_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.random_range(2..=12);
        let a = random_adjacency(n, 0.5, &mut rng);
        let (l, _) = scaled_laplacian(&a).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((l.get(&[i, j]) - l.get(&[j, i])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn chebyshev_recurrence_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(2..=10);
        let a = random_adjacency(n, 0.6, &mut rng);
        let graph = TrafficGraph::from_adjacency(a, 5).unwrap();
        let l = to_dense(graph.scaled_laplacian());
        let basis: Vec<DMatrix<f64>> = graph.cheb_basis().iter().map(to_dense).collect();
        assert_eq!(basis.len(), 6);
        assert!((&basis[0] - DMatrix::<f64>::identity(n, n)).amax() == 0.0);
        assert!((&basis[1] - &l).amax() == 0.0);
        let x = nalgebra::DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        for k in 2..basis.len() {
            let lhs = &basis[k] * &x;
            let rhs = 2.0 * (&l * (&basis[k - 1] * &x)) - &basis[k - 2] * &x;
            assert!((lhs - rhs).amax() < 1e-9);
        }
    }
}

#[test]
fn isolated_nodes_get_identity_rows() {
    let mut a = Tensor::zeros(&[3, 3]);
    a.set(&[0, 1], 0.5);
    a.set(&[1, 0], 0.5);
    let l = normalized_laplacian(&a).unwrap();
    assert_eq!(l.row(2), &[0.0, 0.0, 1.0]);
}

#[test]
fn symmetrize_matches_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = Tensor::new(&[5, 5], (0..25).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let s = symmetrize_max(&a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.0 } else { a.get(&[i, j]).max(a.get(&[j, i])) };
                assert_eq!(s.get(&[i, j]), want);
            }
        }
        assert_eq!(symmetrize_max(&s).unwrap(), s);
    }
    let mut neg = Tensor::zeros(&[2, 2]);
    neg.set(&[0, 1], -0.1);
    assert!(symmetrize_max(&neg).is_err());
}

#[test]
fn asymmetric_distance_lists_become_symmetric() {
    let k = gaussian_kernel_adjacency(&[(0, 1, 500.0)], 2, 1000.0, 0.1).unwrap();
    let w = (-0.25f64).exp();
    assert_eq!(k.adjacency.get(&[0, 1]), w);
    assert_eq!(k.adjacency.get(&[1, 0]), w);
}

#[test]
fn graph_conv_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let n = 6;
    let (d_in, d_out, k) = (3, 2, 3);
    let a = random_adjacency(n, 0.6, &mut rng);
    let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
    let mut pa = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            pa.set(&[i, j], a.get(&[perm[i], perm[j]]));
        }
    }
    let x = Tensor::new(&[n, d_in], (0..n * d_in).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut px = Tensor::zeros(&[n, d_in]);
    for i in 0..n {
        for c in 0..d_in {
            px.set(&[i, c], x.get(&[perm[i], c]));
        }
    }
    let theta = Tensor::new(
        &[k + 1, d_in, d_out],
        (0..(k + 1) * d_in * d_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let conv = |adj: Tensor, x: Tensor| {
        let graph = TrafficGraph::from_adjacency(adj, k).unwrap();
        let mut g = Graph::new();
        let basis: Vec<_> = graph.cheb_basis().iter().map(|t| g.constant(t.clone())).collect();
        let xv = g.constant(x);
        let th = g.constant(theta.clone());
        let y = chebyshev_graph_conv(&mut g, xv, &basis, th).unwrap();
        g.value(y).clone()
    };
    let y = conv(a, x);
    let py = conv(pa, px);
    for i in 0..n {
        for c in 0..d_out {
            assert!((py.get(&[i, c]) - y.get(&[perm[i], c])).abs() < 1e-10);
        }
    }
}

#[test]
fn from_distances_uses_default_sigma() {
    let d = vec![(0, 1, 100.0), (1, 2, 300.0)];
    let sigma = default_sigma(&d);
    assert_eq!(sigma, 100.0);
    let g = TrafficGraph::from_distances(&d, 3, None, 0.0, 2).unwrap();
    assert_eq!(g.adjacency().get(&[0, 1]), (-1.0f64).exp());
    assert_eq!(g.adjacency().get(&[1, 2]), (-9.0f64).exp());
    assert_eq!(g.cheb_basis().len(), 3);
}

proptest! {
    #[test]
    fn kernel_weight_is_monotone_in_distance(
        d1 in 0.0f64..5000.0,
        extra in 0.0f64..5000.0,
        sigma in 1.0f64..3000.0,
        eps in 0.0f64..0.99,
    ) {
        let near = gaussian_kernel_adjacency(&[(0, 1, d1)], 2, sigma, eps).unwrap();
        let far = gaussian_kernel_adjacency(&[(0, 1, d1 + extra)], 2, sigma, eps).unwrap();
        prop_assert!(far.adjacency.get(&[0, 1]) <= near.adjacency.get(&[0, 1]));
    }

    #[test]
    fn adjacency_invariants_hold(seed in 0u64..1000, n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Vec::new();
        for _ in 0..3 * n {
            d.push((rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0.0..2000.0)));
        }
        let k = gaussian_kernel_adjacency(&d, n, 700.0, 0.1).unwrap();
        for i in 0..n {
            prop_assert_eq!(k.adjacency.get(&[i, i]), 0.0);
            for j in 0..n {
                let w = k.adjacency.get(&[i, j]);
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert_eq!(w, k.adjacency.get(&[j, i]));
            }
        }
    }
}
