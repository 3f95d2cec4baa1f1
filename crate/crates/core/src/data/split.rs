use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Labels, PerSplit, RawTable};
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.64;
pub const VAL_FRACTION: f64 = 0.16;
pub const TEST_FRACTION: f64 = 0.20;

const MIN_ROWS: usize = 10;

/// Row indices of each split, ascending.
pub type SplitIndices = PerSplit<Vec<usize>>;

/// Split sizes: round(0.64 N), round(0.16 N), remainder.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = (TRAIN_FRACTION * n as f64).round() as usize;
    let val = (VAL_FRACTION * n as f64).round() as usize;
    [train, val, n - train - val]
}

/// Seeded 64/16/20 split. Classification labels are stratified so every
/// class count in every split is within one of its proportional share.
pub fn split_indices(labels: &Labels, seed: u64) -> Result<SplitIndices> {
    let n = labels.len();
    if n < MIN_ROWS {
        return Err(Error::TooFewRows { need: MIN_ROWS, got: n });
    }
    let sizes = split_sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];

    match labels {
        Labels::Values(_) => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            out[0] = perm[..sizes[0]].to_vec();
            out[1] = perm[sizes[0]..sizes[0] + sizes[1]].to_vec();
            out[2] = perm[sizes[0] + sizes[1]..].to_vec();
        }
        Labels::Classes(classes) => {
            let class_count = classes.iter().max().map_or(0, |&m| m + 1);
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count];
            for (i, &c) in classes.iter().enumerate() {
                members[c].push(i);
            }
            let counts: Vec<usize> = members.iter().map(Vec::len).collect();
            let alloc = stratified_allocation(&counts, &sizes);
            for (c, rows) in members.iter_mut().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                if alloc[c][0] == 0 {
                    return Err(Error::EmptyTrainClass(c));
                }
                rows.shuffle(&mut rng);
                let (a, b) = (alloc[c][0], alloc[c][0] + alloc[c][1]);
                out[0].extend_from_slice(&rows[..a]);
                out[1].extend_from_slice(&rows[a..b]);
                out[2].extend_from_slice(&rows[b..]);
            }
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    let [train, val, test] = out;
    Ok(PerSplit { train, val, test })
}

/// Splits a feature table and its labels with [`split_indices`].
pub fn split_dataset(features: &RawTable, labels: &Labels, seed: u64) -> Result<PerSplit<(RawTable, Labels)>> {
    if features.rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let idx = split_indices(labels, seed)?;
    Ok(idx.map(|rows| (features.select_rows(&rows), labels.select(&rows))))
}

/// Integer class-by-split counts with row sums `counts`, column sums
/// `sizes`, and every cell within one of `counts[c] * sizes[s] / n`.
///
/// Starts from the floors of the proportional quotas and distributes the
/// leftover units with a max-flow over cells that have a fractional part,
/// which always admits an integral completion.
fn stratified_allocation(counts: &[usize], sizes: &[usize; 3]) -> Vec<[usize; 3]> {
    let n: usize = counts.iter().sum();
    let classes = counts.len();
    let mut alloc = vec![[0usize; 3]; classes];
    let mut open = vec![[false; 3]; classes];
    let mut row_deficit = vec![0usize; classes];
    let mut col_deficit = *sizes;
    for c in 0..classes {
        for s in 0..3 {
            let num = counts[c] * sizes[s];
            alloc[c][s] = num / n;
            open[c][s] = num % n != 0;
            col_deficit[s] -= alloc[c][s];
        }
        row_deficit[c] = counts[c] - alloc[c].iter().sum::<usize>();
    }

    // Unit-capacity cell edges; augment one unit at a time.
    loop {
        let Some(c0) = (0..classes).find(|&c| row_deficit[c] > 0) else {
            break;
        };
        let mut seen_rows = vec![false; classes];
        let mut path = Vec::new();
        if !augment(
            c0,
            &alloc,
            &open,
            counts,
            sizes,
            &col_deficit,
            &mut seen_rows,
            &mut path,
        ) {
            // cannot happen: the fractional quotas form a feasible flow
            unreachable!("stratified allocation has no augmenting path");
        }
        // path alternates (row, col, forward?) steps
        for &(c, s, forward) in &path {
            if forward {
                alloc[c][s] += 1;
                open[c][s] = false;
            } else {
                alloc[c][s] -= 1;
                open[c][s] = true;
            }
        }
        row_deficit[c0] -= 1;
        let last_col = path.last().expect("non-empty path").1;
        col_deficit[last_col] -= 1;
    }
    alloc
}

/// DFS for an augmenting path from row `c` to a column with remaining
/// deficit. Forward edges are open cells; backward edges undo a unit
/// previously added above the floor.
#[allow(clippy::too_many_arguments)]
fn augment(
    c: usize,
    alloc: &[[usize; 3]],
    open: &[[bool; 3]],
    counts: &[usize],
    sizes: &[usize; 3],
    col_deficit: &[usize; 3],
    seen_rows: &mut [bool],
    path: &mut Vec<(usize, usize, bool)>,
) -> bool {
    seen_rows[c] = true;
    let n: usize = counts.iter().sum();
    for s in 0..3 {
        if !open[c][s] {
            continue;
        }
        path.push((c, s, true));
        if col_deficit[s] > 0 {
            return true;
        }
        // reroute: some other row currently holds a raised unit in column s
        for c2 in 0..alloc.len() {
            let floor = counts[c2] * sizes[s] / n;
            let raised = alloc[c2][s] > floor;
            if raised && !seen_rows[c2] {
                path.push((c2, s, false));
                if augment(c2, alloc, open, counts, sizes, col_deficit, seen_rows, path) {
                    return true;
                }
                path.pop();
            }
        }
        path.pop();
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_labels(freqs: &[usize]) -> Labels {
        let mut v = Vec::new();
        for (c, &k) in freqs.iter().enumerate() {
            v.extend(std::iter::repeat_n(c, k));
        }
        Labels::Classes(v)
    }

    #[test]
    fn sizes_for_100_rows() {
        let idx = split_indices(&Labels::Values((0..100).map(f64::from).collect()), 0).unwrap();
        assert_eq!((idx.train.len(), idx.val.len(), idx.test.len()), (64, 16, 20));
    }

    #[test]
    fn deterministic_in_seed() {
        let labels = class_labels(&[60, 40]);
        let a = split_indices(&labels, 0).unwrap();
        let b = split_indices(&labels, 0).unwrap();
        let c = split_indices(&labels, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let labels = class_labels(&[37, 21, 9]);
        let idx = split_indices(&labels, 7).unwrap();
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..67).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_counts_match_exact_allocation() {
        // oracle: proportional share n_c * size_s / N, checked per cell
        let labels = class_labels(&[500, 300, 200]);
        let idx = split_indices(&labels, 0).unwrap();
        let y = labels.as_classes().unwrap();
        let sizes = split_sizes(1000);
        for (s, part) in [&idx.train, &idx.val, &idx.test].into_iter().enumerate() {
            assert_eq!(part.len(), sizes[s]);
            for (c, &nc) in [500usize, 300, 200].iter().enumerate() {
                let got = part.iter().filter(|&&i| y[i] == c).count() as f64;
                let want = nc as f64 * sizes[s] as f64 / 1000.0;
                assert!((got - want).abs() <= 1.0, "class {c} split {s}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn stratification_within_one_on_awkward_counts() {
        for counts in [vec![7, 3, 1, 5], vec![1, 1, 1, 10], vec![13, 13, 13], vec![2, 9]] {
            let n: usize = counts.iter().sum();
            let sizes = split_sizes(n);
            let alloc = stratified_allocation(&counts, &sizes);
            for s in 0..3 {
                assert_eq!(alloc.iter().map(|a| a[s]).sum::<usize>(), sizes[s]);
            }
            for (c, a) in alloc.iter().enumerate() {
                assert_eq!(a.iter().sum::<usize>(), counts[c]);
                for s in 0..3 {
                    let q = counts[c] as f64 * sizes[s] as f64 / n as f64;
                    assert!((a[s] as f64 - q).abs() < 1.0);
                }
            }
        }
    }

    #[test]
    fn rare_class_missing_from_train_is_an_error() {
        // a single instance of class 1 gets quota 0.64 in train; the
        // allocator may place it elsewhere, so either outcome is checked
        let labels = class_labels(&[20, 1]);
        match split_indices(&labels, 0) {
            Ok(idx) => {
                let y = labels.as_classes().unwrap();
                assert!(idx.train.iter().any(|&i| y[i] == 1));
            }
            Err(e) => assert!(matches!(e, Error::EmptyTrainClass(1))),
        }
    }

    #[test]
    fn too_few_rows() {
        assert!(matches!(
            split_indices(&Labels::Values(vec![0.0; 9]), 0),
            Err(Error::TooFewRows { .. })
        ));
    }
}
