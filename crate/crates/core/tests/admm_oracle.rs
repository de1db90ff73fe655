use dogs_core::admm::{average_vectors, dual_step, relax_vector};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Problem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

fn problem(seed: u64, blocks: usize, dim: usize, rows: usize) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw =
        |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let a: Vec<DMatrix<f64>> = (0..blocks).map(|_| draw(rows, dim)).collect();
    let b = (0..blocks)
        .map(|_| draw(rows, 1).column(0).into_owned())
        .collect();
    Problem { a, b }
}

fn centralized(p: &Problem) -> DVector<f64> {
    let dim = p.a[0].ncols();
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for (a, b) in p.a.iter().zip(&p.b) {
        h += a.transpose() * a;
        g += a.transpose() * b;
    }
    h.lu().solve(&g).expect("full rank")
}

/// Rounds until `|z - x*|_inf < tol`, or `None` within `max_rounds`.
fn admm_rounds(p: &Problem, rho: f64, alpha: f64, tol: f64, max_rounds: usize) -> Option<usize> {
    let dim = p.a[0].ncols();
    let star = centralized(p);
    let prox: Vec<_> =
        p.a.iter()
            .map(|a| (a.transpose() * a + DMatrix::identity(dim, dim) * rho).lu())
            .collect();
    let atb: Vec<DVector<f64>> =
        p.a.iter()
            .zip(&p.b)
            .map(|(a, b)| a.transpose() * b)
            .collect();
    let mut z = vec![0.0; dim];
    let mut u = vec![vec![0.0; dim]; p.a.len()];
    for round in 1..=max_rounds {
        let x_hat: Vec<Vec<f64>> = (0..p.a.len())
            .map(|k| {
                let rhs = &atb[k]
                    + DVector::from_iterator(dim, z.iter().zip(&u[k]).map(|(z, u)| rho * (z - u)));
                let x = prox[k].solve(&rhs).expect("positive definite");
                relax_vector(x.as_slice(), &z, alpha)
            })
            .collect();
        let refs: Vec<&[f64]> = x_hat.iter().map(Vec::as_slice).collect();
        z = average_vectors(&refs);
        for k in 0..p.a.len() {
            dual_step(&mut u[k], &x_hat[k], &z);
        }
        let err = z
            .iter()
            .zip(star.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err < tol {
            return Some(round);
        }
    }
    None
}

#[test]
fn block_least_squares_converges_to_the_centralized_solution() {
    for seed in 0..5 {
        let p = problem(seed, 4, 20, 30);
        let plain = admm_rounds(&p, 10.0, 1.0, 1e-6, 500).expect("alpha = 1 converges");
        let relaxed = admm_rounds(&p, 10.0, 1.6, 1e-6, 500).expect("alpha = 1.6 converges");
        assert!(
            relaxed <= plain,
            "seed {seed}: relaxed {relaxed} > plain {plain}"
        );
    }
}

#[test]
fn single_block_is_the_plain_prox_fixed_point() {
    let p = problem(42, 1, 20, 30);
    assert!(admm_rounds(&p, 10.0, 1.0, 1e-9, 500).is_some());
}
