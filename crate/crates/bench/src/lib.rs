//! Seeded inputs for the kernel benchmarks in `benches/`.

use dtdl::lstm::LstmAeParams;
use dtdl::rng::SeedStream;
use dtdl::Dictionary;
use nalgebra::DMatrix;
use rand::Rng;

/// A trained-scale problem: `L` devices, `N_i` atoms each, `K` windows of `omega` samples.
pub struct Fixture {
    pub params: LstmAeParams,
    pub snippet: Vec<f64>,
    pub dictionary: Dictionary,
    /// `m x KL`, column `k*L + i`.
    pub features: DMatrix<f64>,
    /// `N x KL`
    pub codes: DMatrix<f64>,
}

pub fn fixture(m: usize, omega: usize, devices: usize, per_device: usize, windows: usize) -> Fixture {
    let seeds = SeedStream::new(42);
    let mut rng = seeds.rng("bench");
    let params = LstmAeParams::init(m, &mut rng);
    let snippet = (0..omega).map(|_| rng.random_range(0.0..1.0)).collect();
    let n = devices * per_device;
    let atoms = dtdl::dictionary::project_columns(&DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)));
    let dictionary = Dictionary::new(atoms, vec![per_device; devices]).expect("block sizes sum to N");
    let cols = windows * devices;
    let features = DMatrix::from_fn(m, cols, |_, _| rng.random_range(-0.5..0.5));
    let codes = DMatrix::from_fn(n, cols, |_, _| rng.random_range(-0.1..0.1));
    Fixture {
        params,
        snippet,
        dictionary,
        features,
        codes,
    }
}
