//! Statistical and exactness properties of the synthetic worlds shipped in
//! worlds/. The numeric assertions are deterministic because every world
//! pins its seed; the tolerances are sized so the checks hold with wide
//! margin under the pinned draws.

use std::path::PathBuf;
use std::time::Instant;

use benchaudit_core::metrics::ledger_gains;
use benchaudit_core::rational::Rat;
use benchaudit_core::simulator::{
    estimate_cs, h0_no_gain, h1_positive_gain, h3_reversal, replication_stats,
    run_synthetic_audit, WorldConfig,
};
use num_traits::Zero;

fn world(name: &str) -> WorldConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../worlds")
        .join(name);
    WorldConfig::load(&path).expect("world file loads")
}

#[test]
fn null_and_contaminated_worlds_differ_only_in_strength() {
    let h0 = world("h0_no_contamination.toml");
    let h1 = world("h1_contaminated.toml");
    assert_eq!(h0.psi_strength, 0.0);
    assert_eq!(h1.psi_strength, 0.6);
    let mut h1_zeroed = h1.clone();
    h1_zeroed.psi_strength = 0.0;
    assert_eq!(h0, h1_zeroed, "worlds must match outside psi_strength");
}

#[test]
fn null_world_shows_no_systematic_gain() {
    let started = Instant::now();
    let audit = run_synthetic_audit(&world("h0_no_contamination.toml"), 50, 9, 200).unwrap();
    let stats = replication_stats(&audit).unwrap();
    assert_eq!(stats.len(), 9);
    let verdict = h0_no_gain(&stats, 3.0);
    assert!(
        verdict.pass,
        "mean gain {} se away from zero at m={}",
        verdict.worst_ratio, verdict.worst_m
    );
    for rep in &audit.reps {
        assert_eq!(rep.delta, Rat::zero(), "strength 0 leaves the score untouched");
    }
    assert!(
        started.elapsed().as_secs() < 60,
        "null-world audit took {:?}",
        started.elapsed()
    );
}

#[test]
fn contaminated_world_shows_gain_and_transition_reversal() {
    let audit = run_synthetic_audit(&world("h1_contaminated.toml"), 50, 9, 200).unwrap();
    let stats = replication_stats(&audit).unwrap();

    let h1 = h1_positive_gain(&stats, 9, 0.01).unwrap();
    assert!(
        h1.pass,
        "wide-aggregation gain not detected: mean {} (se {}), sign-test p {}",
        h1.mean_gain, h1.se, h1.p_value
    );

    let h3 = h3_reversal(&stats).unwrap();
    assert!(
        h3.pass,
        "transition balance did not reverse: net {} at m={}, net {} at m={}",
        h3.net_first, h3.first_m, h3.net_last, h3.last_m
    );

    // The in-info cues give every clean brief overlap 2/4, so the exact
    // score inflation per replication has mean 0.6 * 0.5 = 0.3.
    let deltas: Vec<f64> = audit
        .reps
        .iter()
        .map(|r| *r.delta.numer() as f64 / *r.delta.denom() as f64)
        .collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (deltas.len() - 1) as f64;
    let se = (var / deltas.len() as f64).sqrt();
    assert!(
        (mean - 0.3).abs() <= 3.0 * se,
        "exact inflation mean {mean} strays from 0.3 (se {se})"
    );
}

#[test]
fn cue_dose_response_is_pointwise_monotone() {
    let base = world("h2_cue_dose.toml");
    let grid = [0.0, 0.2, 0.4, 0.8];
    // per strength: gains indexed by (replication, m), plus clean scores
    let mut gain_tables = Vec::new();
    let mut clean_tables = Vec::new();
    for &lambda in &grid {
        let mut w = base.clone();
        w.psi_strength = lambda;
        let audit = run_synthetic_audit(&w, 20, 3, 30).unwrap();
        let gains = ledger_gains(&audit.ledger).unwrap();
        let mut table = std::collections::BTreeMap::new();
        let mut clean = std::collections::BTreeMap::new();
        for g in gains {
            table.insert((g.model_id.clone(), g.router_count), g.gain);
            clean.insert(g.model_id.clone(), g.clean_accuracy);
        }
        gain_tables.push(table);
        clean_tables.push(clean);
    }
    for step in 1..grid.len() {
        for (key, gain) in &gain_tables[step] {
            let prev = gain_tables[step - 1][key];
            assert!(
                *gain >= prev,
                "gain at {:?} fell from {prev} to {gain} when strength rose to {}",
                key,
                grid[step]
            );
        }
        assert_eq!(
            clean_tables[step],
            clean_tables[step - 1],
            "clean scores must ignore strength when no cue is in the info set"
        );
    }
    let flat = &gain_tables[0];
    let steep = &gain_tables[grid.len() - 1];
    let moved = flat.keys().filter(|k| steep[*k] > flat[*k]).count();
    assert!(
        moved > flat.len() / 2,
        "dose response too weak: only {moved} of {} cells rose",
        flat.len()
    );
}

#[test]
fn sensitivity_estimate_matches_analytic_slope() {
    let w = world("cs_linear.toml");
    let est = estimate_cs(&w, &[0.0, 0.5], 50, 120).unwrap();
    assert!(
        (est.kappa_mean - 0.3).abs() < 1e-12,
        "clean cue overlap should be exactly 3/10, got {}",
        est.kappa_mean
    );
    assert!(est.se > 0.0);
    assert!(
        (est.cs - est.kappa_mean).abs() <= 3.0 * est.se,
        "estimate {} strays from analytic slope {} (se {})",
        est.cs,
        est.kappa_mean,
        est.se
    );
    assert_eq!(est.curve.len(), 2);
    assert!(est.curve[1].1 > est.curve[0].1);
}

#[test]
fn unreachable_cues_give_exactly_zero_sensitivity() {
    let w = world("cs_unreachable.toml");
    let est = estimate_cs(&w, &[0.0, 0.5], 50, 40).unwrap();
    assert_eq!(est.cs, 0.0);
    assert_eq!(est.se, 0.0);
    assert_eq!(est.kappa_mean, 0.0);
    assert_eq!(est.curve[0].1, est.curve[1].1);
}

#[test]
fn standard_error_shrinks_with_replication_count() {
    let w = world("h1_contaminated.toml");
    let small = replication_stats(&run_synthetic_audit(&w, 20, 2, 100).unwrap()).unwrap();
    let large = replication_stats(&run_synthetic_audit(&w, 20, 2, 400).unwrap()).unwrap();
    for (s, l) in small.iter().zip(&large) {
        assert_eq!(s.m, l.m);
        let ratio = s.se / l.se;
        // quadrupling replications should halve the se; allow sampling slack
        assert!(
            (1.5..=2.7).contains(&ratio),
            "se ratio at m={} was {ratio} (small {}, large {})",
            s.m,
            s.se,
            l.se
        );
    }
}

#[test]
fn ledger_shape_and_digest_are_stable_across_runs() {
    let w = world("h1_contaminated.toml");
    let a = run_synthetic_audit(&w, 10, 3, 2).unwrap();
    let b = run_synthetic_audit(&w, 10, 3, 2).unwrap();
    assert_eq!(a.ledger.records.len(), 2 * 10 * 4);
    assert_eq!(a.ledger.content_digest(), b.ledger.content_digest());

    let mut reseeded = w.clone();
    reseeded.world_seed += 1;
    let c = run_synthetic_audit(&reseeded, 10, 3, 2).unwrap();
    assert_ne!(a.ledger.content_digest(), c.ledger.content_digest());
}
