//! Random ledger generators shared by the integration suites.
#![allow(dead_code)]

use bci::{PeerId, ShareMatrix};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn amount(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(1..=100u32) as f64
}

/// Each off-diagonal entry is present with probability `density`.
pub fn sparse(rng: &mut ChaCha8Rng, n: usize, density: f64) -> ShareMatrix {
    let mut m = ShareMatrix::new(n).unwrap();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(density) {
                let a = amount(rng);
                m.record_transaction(PeerId(i), PeerId(j), a).unwrap();
            }
        }
    }
    m
}

/// A random Hamiltonian cycle overlaid on a sparse matrix, so the
/// transaction graph is strongly connected.
pub fn irreducible(rng: &mut ChaCha8Rng, n: usize, density: f64) -> ShareMatrix {
    let mut m = sparse(rng, n, density);
    let order = random_order(rng, n);
    add_cycle(rng, &mut m, &order, None);
    m
}

/// Every peer uploads exactly what it downloads: a sum of random cycles
/// (each carrying a constant amount) and symmetric pairs. Amounts are
/// integers so row and column sums agree exactly.
pub fn balanced(rng: &mut ChaCha8Rng, n: usize, density: f64) -> ShareMatrix {
    let mut m = ShareMatrix::new(n).unwrap();
    let cycles = 1 + (density * n as f64) as usize;
    for _ in 0..cycles {
        let mut order = random_order(rng, n);
        let len = rng.gen_range(2..=n);
        order.truncate(len);
        add_cycle(rng, &mut m, &order, None);
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(density / 2.0) {
                let a = amount(rng);
                m.record_transaction(PeerId(i), PeerId(j), a).unwrap();
                m.record_transaction(PeerId(j), PeerId(i), a).unwrap();
            }
        }
    }
    m
}

/// Balanced and strongly connected: a full-length cycle plus [`balanced`] extras.
pub fn balanced_irreducible(rng: &mut ChaCha8Rng, n: usize, density: f64) -> ShareMatrix {
    let mut m = balanced(rng, n, density);
    let order = random_order(rng, n);
    let a = amount(rng);
    add_cycle(rng, &mut m, &order, Some(a));
    m
}

fn random_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn add_cycle(rng: &mut ChaCha8Rng, m: &mut ShareMatrix, order: &[usize], fixed: Option<f64>) {
    let a = fixed.unwrap_or_else(|| amount(rng));
    for k in 0..order.len() {
        let (from, to) = (order[k], order[(k + 1) % order.len()]);
        m.record_transaction(PeerId(from), PeerId(to), a).unwrap();
    }
}
