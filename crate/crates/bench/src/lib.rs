//! Shared fixtures for the criterion benchmarks.

use sohkit::simulator::{cycle_rng, simulate_cycle, CampaignSpec, CellSpec, OcvModel, Protocol, SimulatedCycle};

/// A noisy mid-life cycle of a cell charged at `rate`.
pub fn sample_cycle(rate: f64) -> SimulatedCycle {
    let cell = CellSpec {
        fade_ah_per_cycle: 0.0015 * 4.85,
        r_growth_ohm_per_cycle: 2e-5,
        sigma_v: 1e-3,
        sigma_i: 1e-3,
        ..CellSpec::new("B", rate)
    };
    let ocv = OcvModel::new(cell.hysteresis_scale).expect("default OCV model");
    let mut rng = cycle_rng(1, 0, 100);
    simulate_cycle(&cell, &ocv, &Protocol::default(), 1.0, 100, 4, &mut rng).expect("cycle simulates")
}

/// Three cells, 40 cycles each.
pub fn small_campaign() -> CampaignSpec {
    let cells = [("A", 0.25), ("B", 0.5), ("C", 1.0)]
        .iter()
        .map(|(id, rate)| CellSpec {
            fade_ah_per_cycle: 0.0015 * 4.85,
            r_growth_ohm_per_cycle: 2e-5,
            sigma_v: 1e-3,
            sigma_i: 1e-3,
            ..CellSpec::new(id, *rate)
        })
        .collect();
    CampaignSpec {
        seed: 3,
        dt_s: 1.0,
        batches: vec![10; 4],
        cells,
        protocol: Protocol::default(),
    }
}
