use std::collections::BTreeSet;

use trinity_nas::archio::{retrain_and_eval, Architecture, TrainConfig};
use trinity_nas::opspace::OpSpec;
use trinity_nas::supernet::SupernetConfig;
use trinity_nas::toytask::{generate, generate_sample, size_bin, DatasetSpec, Split};

#[test]
fn box_sizes_cover_every_bin() {
    let spec = DatasetSpec::desk(0);
    let mut counts = [0usize; 3];
    let n = 10_000;
    for i in 0..n {
        counts[size_bin(&generate_sample(&spec, Split::Weight, i).bbox)] += 1;
    }
    for c in counts {
        assert!(c * 10 >= n, "size bins {counts:?}");
    }
}

#[test]
fn splits_share_no_sample() {
    let d = generate(&DatasetSpec::desk(3)).unwrap();
    let ids = |s: &[trinity_nas::toytask::ToySample]| s.iter().map(|x| x.id).collect::<BTreeSet<_>>();
    let (w, a, t) = (ids(&d.weight), ids(&d.arch), ids(&d.test));
    assert_eq!(w.len() + a.len() + t.len(), d.weight.len() + d.arch.len() + d.test.len());
    assert!(w.is_disjoint(&a) && w.is_disjoint(&t) && a.is_disjoint(&t));
}

#[test]
fn uniform_network_solves_separable_variant() {
    let spec = DatasetSpec {
        separable: true,
        ..DatasetSpec::desk(0)
    };
    let data = generate(&spec).unwrap();
    let arch = Architecture::uniform(&SupernetConfig::desk(), OpSpec::ir(3, 1, 6)).unwrap();
    let (_, m) = retrain_and_eval::<f32>(&arch, &data, &TrainConfig::desk(), 0).unwrap();
    assert!(m.accuracy >= 0.99, "{m:?}");
}
