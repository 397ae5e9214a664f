use proptest::prelude::*;
use vidmae::evaluation::{average_precision, mean_ap, top1};

/// AP from pairwise counts, no sorting: item `j` ranks at or above `i` when
/// its score is higher, or equal with `j <= i`.
fn brute_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let ranked = (0..scores.len()).filter(|&j| above(j, i)).count();
            let hits = pos.iter().filter(|&&j| above(j, i)).count();
            hits as f64 / ranked as f64
        })
        .sum();
    Some(sum / pos.len() as f64)
}

fn bits(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

/// Every label vector against every score vector over {0, 1, 2} up to length 6,
/// and over {0, 1} at lengths 7 and 8.
#[test]
fn ap_matches_brute_force_exhaustively() {
    let mut checked = 0u64;
    for n in 1..=8usize {
        let levels: u32 = if n <= 6 { 3 } else { 2 };
        let combos = levels.pow(n as u32);
        for code in 0..combos {
            let mut c = code;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v = c % levels;
                    c /= levels;
                    f64::from(v)
                })
                .collect();
            for mask in 0..(1u32 << n) {
                let labels = bits(mask, n);
                let got = average_precision(&scores, &labels).unwrap();
                let want = brute_ap(&scores, &labels);
                match (got, want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{scores:?} {labels:?}: {a} vs {b}"),
                    (None, None) => {}
                    other => panic!("{scores:?} {labels:?}: {other:?}"),
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 100_000);
}

#[test]
fn worked_example() {
    let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap().unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    let ap = average_precision(&[0.1, 0.2, 0.3, 0.4], &[true, false, false, false]).unwrap().unwrap();
    assert_eq!(ap, 0.25);
    assert_eq!(top1(&[vec![2.0, 1.0], vec![0.0, 3.0]], &[0, 1]).unwrap(), 1.0);
    assert_eq!(top1(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
}

proptest! {
    #[test]
    fn ap_matches_brute_force_on_floats(
        items in prop::collection::vec((0u8..6, any::<bool>()), 1..10),
        jitter in any::<bool>(),
    ) {
        let scores: Vec<f64> = items.iter().enumerate()
            .map(|(i, (s, _))| f64::from(*s) + if jitter { i as f64 * 1e-3 } else { 0.0 })
            .collect();
        let labels: Vec<bool> = items.iter().map(|x| x.1).collect();
        let got = average_precision(&scores, &labels).unwrap();
        let want = brute_ap(&scores, &labels);
        prop_assert_eq!(got.is_some(), want.is_some());
        if let (Some(a), Some(b)) = (got, want) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn map_is_invariant_to_monotone_transforms(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..12),
        labels_seed in prop::collection::vec(0usize..3, 12),
        scale in prop::collection::vec(0.1f64..5.0, 3),
        shift in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let labels = &labels_seed[..rows.len()];
        let base = mean_ap(&rows, labels, 3).unwrap();
        let moved: Vec<Vec<f64>> = rows.iter()
            .map(|r| r.iter().enumerate().map(|(c, v)| (scale[c] * v + shift[c]).exp()).collect())
            .collect();
        let other = mean_ap(&moved, labels, 3).unwrap();
        prop_assert_eq!(&base.excluded, &other.excluded);
        prop_assert!((base.map - other.map).abs() < 1e-12);
        let present = (0..3).filter(|c| labels.contains(c)).count();
        prop_assert_eq!(base.excluded.len(), 3 - present);
    }
}
