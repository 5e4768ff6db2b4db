#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use codeal::panel::PanelDataset;

/// Splits `total` into `parts` positive sizes at random.
pub fn random_sizes<R: Rng>(rng: &mut R, parts: usize, total: usize) -> Vec<usize> {
    let mut sizes = vec![1; parts];
    for _ in parts..total {
        sizes[rng.random_range(0..parts)] += 1;
    }
    sizes
}

/// Sorted staggered indicator: group 1 never treated, group `xi >= 2`
/// treated from the start of segment `r + 2 - xi` on.
pub fn staggered_indicator(groups: &[usize], segments: &[usize]) -> DMatrix<bool> {
    let r = groups.len();
    let n: usize = groups.iter().sum();
    let t: usize = segments.iter().sum();
    let mut w = DMatrix::from_element(n, t, false);
    let mut row = 0;
    for (g, &size) in groups.iter().enumerate() {
        let xi = g + 1;
        if xi >= 2 {
            let eta = r + 2 - xi;
            let start: usize = segments[..eta - 1].iter().sum();
            for i in row..row + size {
                for c in start..t {
                    w[(i, c)] = true;
                }
            }
        }
        row += size;
    }
    w
}

/// Random sorted staggered pattern with `r` groups within `max_n × max_t`.
pub fn random_staggered<R: Rng>(rng: &mut R, max_n: usize, max_t: usize, max_r: usize) -> DMatrix<bool> {
    let r = rng.random_range(2..=max_r);
    let n = rng.random_range(r..=max_n);
    let t = rng.random_range(r..=max_t);
    staggered_indicator(&random_sizes(rng, r, n), &random_sizes(rng, r, t))
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Panel with `y = a_i + b_t (+ tau_i on treated cells)` and one covariate.
pub fn additive_panel<R: Rng>(rng: &mut R, w: &DMatrix<bool>, tau: f64) -> (PanelDataset, DMatrix<f64>) {
    let (n, t) = w.shape();
    let a = gaussian(rng, n, 1);
    let b = gaussian(rng, 1, t);
    let y0 = DMatrix::from_fn(n, t, |i, c| a[(i, 0)] + b[(0, c)]);
    let y = DMatrix::from_fn(n, t, |i, c| y0[(i, c)] + if w[(i, c)] { tau } else { 0.0 });
    let panel = PanelDataset::new(y, w.clone(), gaussian(rng, n, 1)).unwrap();
    (panel, y0)
}
