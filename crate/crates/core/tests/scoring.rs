// Scoring synthetic scans end to end: generation, metrics, aggregation.

use zoomseg_core::metrics::{default_threshold_grid, evaluate_scan, micro_dsc};
use zoomseg_core::stats::{aggregate, stratify_by_lesion_size, BootstrapConfig};
use zoomseg_core::synth::{generate_scan, SynthConfig};
use zoomseg_core::{Mask, Volume};

fn scans(n: u64) -> Vec<(Volume, Mask)> {
    let cfg = SynthConfig { extents: [24, 24, 24], seed: 3, ..SynthConfig::default() };
    (0..n).map(|i| generate_scan(&cfg, i).unwrap()).collect()
}

#[test]
fn perfect_predictor_scores_one() {
    let grid = default_threshold_grid();
    let metrics: Vec<_> = scans(6)
        .iter()
        .enumerate()
        .map(|(i, (_, m))| evaluate_scan(&format!("s{i}"), &m.to_volume(), m, 0.5, &grid).unwrap())
        .collect();
    for m in &metrics {
        assert_eq!((m.dsc, m.mdsc, m.tpr), (1.0, 1.0, 1.0));
        assert_eq!((m.hd_mm, m.assd_mm, m.precision), (Some(0.0), Some(0.0), Some(1.0)));
    }
    assert_eq!(micro_dsc(&metrics).unwrap(), 1.0);
    let agg = aggregate(&metrics, &BootstrapConfig { resamples: 200, ..Default::default() }).unwrap();
    assert_eq!((agg.dsc.mean, agg.dsc.ci_low, agg.dsc.ci_high), (Some(1.0), Some(1.0), Some(1.0)));
}

#[test]
fn shifted_predictor_is_consistent() {
    let grid = default_threshold_grid();
    let mut metrics = Vec::new();
    for (i, (_, m)) in scans(8).iter().enumerate() {
        // Shift the reference one voxel along x.
        let nx = m.extents()[0];
        let mut prob = Volume::filled(m.extents(), m.spacing(), 0.0).unwrap();
        for p in m.foreground() {
            if p[0] + 1 < nx {
                prob.set([p[0] + 1, p[1], p[2]], 0.9);
            }
        }
        metrics.push(evaluate_scan(&format!("s{i}"), &prob, m, 0.5, &grid).unwrap());
    }
    let cfg = BootstrapConfig { resamples: 500, ..Default::default() };
    let agg = aggregate(&metrics, &cfg).unwrap();
    let mean = metrics.iter().map(|m| m.dsc).sum::<f64>() / metrics.len() as f64;
    assert!((agg.dsc.mean.unwrap() - mean).abs() < 1e-12);
    assert!(agg.dsc.ci_low.unwrap() <= mean && mean <= agg.dsc.ci_high.unwrap());
    for m in &metrics {
        assert!(m.dsc < 1.0 && m.mdsc >= m.dsc);
        assert!(m.hd_mm.unwrap() > 0.0);
    }
    let micro = micro_dsc(&metrics).unwrap();
    assert!(micro > 0.0 && micro < 1.0);
    let groups = stratify_by_lesion_size(&metrics, &cfg).unwrap();
    assert_eq!(groups.iter().map(|g| g.subject_ids.len()).sum::<usize>(), 8);
    assert!(groups.windows(2).all(|w| w[0].lesion_voxels_max <= w[1].lesion_voxels_min));
}
