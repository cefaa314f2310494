//! Seeded fault-scenario generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Split};
use crate::error::{Error, Result};
use crate::grid::FaultScenario;

/// Attempts to redraw a clearing time that is already in use.
const MAX_REDRAWS: usize = 1000;

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Holdout => 2,
        Split::Test => 3,
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Scenarios of one split, spread evenly over its fault buses.
///
/// Clearing times are drawn uniformly from the configured range and snapped
/// to the time grid; `(bus, clearing time)` pairs already used in this split
/// or by earlier splits (train, then holdout, then test) are redrawn.
pub fn generate_scenarios(config: &ExperimentConfig, split: Split) -> Result<Vec<FaultScenario>> {
    let net = config.network()?;
    let grid = config.grid.time_grid()?;
    let mut taken: Vec<(u32, usize)> = match split {
        Split::Train => Vec::new(),
        Split::Holdout => used_pairs(config, &[Split::Train])?,
        Split::Test => {
            let mut prior = vec![Split::Train];
            if config.holdout.is_some() {
                prior.push(Split::Holdout);
            }
            used_pairs(config, &prior)?
        }
    };
    let sp = config.split(split)?;
    if sp.fault_buses.is_empty() {
        return Err(Error::Config(format!("{} split has no fault buses", split.name())));
    }
    let alpha_range = sp.load_scale.unwrap_or(config.load_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(split_stream(split));
    let mut out = Vec::with_capacity(sp.count);
    for k in 0..sp.count {
        let bus = sp.fault_buses[k % sp.fault_buses.len()];
        let mut redraws = 0;
        let clear_idx = loop {
            let idx = grid.nearest_index(draw(&mut rng, sp.clearing))?;
            if !taken.contains(&(bus, idx)) || redraws >= MAX_REDRAWS {
                break idx;
            }
            redraws += 1;
        };
        if taken.contains(&(bus, clear_idx)) {
            return Err(Error::Config(format!(
                "cannot find an unused clearing time for bus {bus}"
            )));
        }
        taken.push((bus, clear_idx));
        let alpha = draw(&mut rng, alpha_range);
        let sc = FaultScenario {
            id: split.id_base() + k,
            fault_bus: Some(bus),
            start: config.fault_start,
            clear: grid.t(clear_idx),
            alpha,
        }
        .snapped(&grid)?;
        sc.validate(&net)?;
        out.push(sc);
    }
    Ok(out)
}

fn used_pairs(config: &ExperimentConfig, splits: &[Split]) -> Result<Vec<(u32, usize)>> {
    let grid = config.grid.time_grid()?;
    let mut out = Vec::new();
    for &s in splits {
        for sc in generate_scenarios(config, s)? {
            out.push((sc.fault_bus.unwrap_or(0), grid.nearest_index(sc.clear)?));
        }
    }
    Ok(out)
}
