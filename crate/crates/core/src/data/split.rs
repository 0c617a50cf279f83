use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use super::DataError;

fn check_fraction(f: f64) -> Result<(), DataError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(DataError::Invalid {
            what: "train fraction",
            message: format!("{f} is not strictly between 0 and 1"),
        })
    }
}

/// Seeded shuffle, then the first `round(N * train_fraction)` samples form the training side.
pub fn split_train_test(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    check_fraction(train_fraction)?;
    let mut samples = manifest.samples.clone();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (samples.len() as f64 * train_fraction).round() as usize;
    let test = samples.split_off(n_train);
    Ok((manifest.with_samples(samples), manifest.with_samples(test)))
}

/// Like [`split_train_test`], but every original and its derivatives land on the same side.
/// The training side receives `round(G * train_fraction)` of the `G` groups.
pub fn split_by_origin(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    check_fraction(train_fraction)?;
    let mut groups: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        groups.entry((s.class, s.origin_stem())).or_default().push(i);
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (keys.len() as f64 * train_fraction).round() as usize;
    let pick = |ks: &[(usize, String)]| {
        let samples = ks
            .iter()
            .flat_map(|k| groups[k].iter().map(|&i| manifest.samples[i].clone()))
            .collect();
        manifest.with_samples(samples)
    };
    Ok((pick(&keys[..n_train]), pick(&keys[n_train..])))
}
