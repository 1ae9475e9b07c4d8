use std::collections::BTreeSet;

use proptest::prelude::*;
use ufuzz_core::report::build_matrices;
use ufuzz_core::ucode::UcodeAddress;

fn set(v: &[u16]) -> BTreeSet<UcodeAddress> {
    v.iter().map(|a| UcodeAddress::new_unchecked(*a)).collect()
}

#[test]
fn single_config() {
    let s = set(&[1, 2, 3]);
    let m = build_matrices([("afl", &s)]);
    assert_eq!(m.overlap, vec![vec![3]]);
    assert_eq!(m.uniqueness, vec![vec![0]]);
    assert_eq!(m.exclusive, vec![3]);
}

#[test]
fn identical_configs() {
    let s = set(&[1, 2, 3, 9]);
    let m = build_matrices([("b", &s), ("a", &s.clone())]);
    assert_eq!(m.names, vec!["a", "b"]);
    assert_eq!(m.overlap, vec![vec![4, 4], vec![4, 4]]);
    assert_eq!(m.uniqueness, vec![vec![0, 0], vec![0, 0]]);
    assert_eq!(m.exclusive, vec![0, 0]);
}

#[test]
fn csv_is_alphabetical() {
    let (a, b) = (set(&[1]), set(&[1, 2]));
    let csv = build_matrices([("zeta", &a), ("alpha", &b)]).to_csv();
    assert!(csv.starts_with("matrix,config,alpha,zeta\noverlap,alpha,2,1\noverlap,zeta,1,1\n"), "{csv}");
}

proptest! {
    #[test]
    fn matrices_match_set_algebra(sets in proptest::collection::vec(proptest::collection::btree_set(0u16..40, 0..20), 1..5)) {
        let named: Vec<(String, BTreeSet<UcodeAddress>)> =
            sets.iter().enumerate().map(|(i, s)| (format!("c{i}"), s.iter().map(|a| UcodeAddress::new_unchecked(*a)).collect())).collect();
        let m = build_matrices(named.iter().map(|(n, s)| (n.as_str(), s)));
        let n = named.len();
        for i in 0..n {
            let si = &sets[i];
            prop_assert_eq!(m.overlap[i][i], si.len());
            prop_assert_eq!(m.uniqueness[i][i], 0);
            prop_assert!(m.exclusive[i] <= m.overlap[i][i]);
            for j in 0..n {
                prop_assert_eq!(m.overlap[i][j], m.overlap[j][i]);
                // Brute force membership counts.
                let both = (0u16..40).filter(|a| si.contains(a) && sets[j].contains(a)).count();
                let only = (0u16..40).filter(|a| si.contains(a) && !sets[j].contains(a)).count();
                prop_assert_eq!(m.overlap[i][j], both);
                prop_assert_eq!(m.uniqueness[i][j], only);
            }
            let excl = si.iter().filter(|a| (0..n).all(|j| j == i || !sets[j].contains(a))).count();
            prop_assert_eq!(m.exclusive[i], excl);
        }
        let all: BTreeSet<u16> = sets.iter().flatten().copied().collect();
        prop_assert_eq!(m.total_unique, all.len());
    }
}
