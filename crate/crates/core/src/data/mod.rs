//! Dataset ingestion, normalisation, synthetic generation and splits.

pub mod sports;
pub mod synthetic;
pub mod trajnet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use sports::{
    convert_sportvu, court_extent, load_plays, normalize_plays, parse_plays, split_team,
    write_plays, PlayRecord, Team,
};
pub use synthetic::{generate_synthetic, generate_synthetic_plays, SyntheticConfig};
pub use trajnet::{
    assemble_scenes, load_trajnet, load_trajnet_dir, parse_trajnet, scenes_to_records, write_trajnet,
    TrackRecord,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded 70/10/20 shuffle split.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64) -> Splits<T> {
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (0.2 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let n_train = n - n_test - n_val;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Splits {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    }
}
