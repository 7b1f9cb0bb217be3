//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use migwatt_core::regress::{Dataset, FeatureSchema};
use migwatt_core::Metric;

/// Random linear-plus-noise dataset with `n` rows and `d` features named
/// like MIG-feature columns.
pub fn synthetic_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = (0..d)
        .map(|j| {
            format!(
                "p{}.{}",
                j / Metric::ALL.len(),
                Metric::ALL[j % Metric::ALL.len()].name()
            )
        })
        .collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..200.0)).collect();
    let mut values = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        targets.push(85.0 + row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + rng.random_range(-2.0..2.0));
        values.extend(row);
    }
    Dataset::new(FeatureSchema::new(names).expect("unique names"), values, targets).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let d = synthetic_dataset(50, 24, 1);
        assert_eq!((d.n_samples(), d.n_features()), (50, 24));
        assert_eq!(d.schema().names()[9], "p1.fp64a");
    }
}
