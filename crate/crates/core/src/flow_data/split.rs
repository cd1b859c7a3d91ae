use rand::seq::SliceRandom;

use super::DataError;
use crate::dataset::LabeledDataset;
use crate::rng::seeded_rng;

/// Largest-remainder apportionment of `total` items over `fractions`.
///
/// The result sums to `round(total * Σ fractions)`, and every entry is within
/// one of its exact share. Remainder ties go to the lower index.
pub fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let target = (exact.iter().sum::<f64>().round() as usize).min(total);
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(target.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Stratified split returning `(kept, held_out)` index lists, both ascending.
///
/// The held-out total is `round(n * fraction)`, apportioned over classes by
/// largest remainder so each class is within one sample of its exact share.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() == 1 {
            return Err(DataError::TooFewForStratify { class, count: 1 });
        }
    }
    let n = labels.len();
    let class_fracs: Vec<f64> = by_class
        .iter()
        .map(|idx| idx.len() as f64 / n.max(1) as f64 * fraction)
        .collect();
    let held_sizes = apportion(n, &class_fracs);

    let mut rng = seeded_rng(seed);
    let mut kept = Vec::with_capacity(n);
    let mut held = Vec::new();
    for (mut idx, size) in by_class.into_iter().zip(held_sizes) {
        if idx.is_empty() {
            continue;
        }
        let size = size.min(idx.len() - 1);
        idx.shuffle(&mut rng);
        held.extend_from_slice(&idx[..size]);
        kept.extend_from_slice(&idx[size..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    Ok((kept, held))
}

/// Stratified train/test split, deterministic per seed.
pub fn train_test_split(
    data: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let (train, test) = stratified_split(data.labels(), test_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}

/// Split `data` into disjoint, exhaustive shards sized by `shares`.
pub fn partition_workers(
    data: &LabeledDataset,
    shares: &[f64],
    seed: u64,
) -> Result<Vec<LabeledDataset>, DataError> {
    if shares.is_empty() {
        return Err(DataError::Empty);
    }
    let sum: f64 = shares.iter().sum();
    if shares.iter().any(|&s| !(s >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadShares(sum));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut sizes = apportion(data.len(), shares);
    // Guard against a rounded total below len when shares sum to 1 - ε.
    let short = data.len() - sizes.iter().sum::<usize>();
    if let Some(last) = sizes.last_mut() {
        *last += short;
    }
    let mut shards = Vec::with_capacity(shares.len());
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        shards.push(data.subset(&idx));
        start += size;
    }
    Ok(shards)
}
