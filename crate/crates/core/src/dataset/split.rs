use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment, Trip, TripExample};
use crate::error::{Error, Result};
use crate::CityId;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<TripExample>,
    /// Final-destination examples of the held-out trips only.
    pub valid: Vec<TripExample>,
    /// Indices into the input trip list, ascending.
    pub valid_trips: Vec<usize>,
}

impl Split {
    /// Cities of every trip with each held-out trip's final city removed.
    pub fn graph_trips(&self, trips: &[Trip]) -> Vec<Vec<CityId>> {
        let mut held = vec![false; trips.len()];
        for &i in &self.valid_trips {
            held[i] = true;
        }
        trips
            .iter()
            .zip(held)
            .map(|(t, h)| {
                let mut cities = t.cities();
                if h {
                    cities.pop();
                }
                cities
            })
            .collect()
    }

    /// Trips without and with a held-out final, in input order.
    pub fn partition(&self, trips: &[Trip]) -> (Vec<Trip>, Vec<Trip>) {
        let mut held = vec![false; trips.len()];
        for &i in &self.valid_trips {
            held[i] = true;
        }
        let (h, t): (Vec<_>, Vec<_>) = trips.iter().cloned().zip(held).partition(|(_, h)| *h);
        (
            t.into_iter().map(|x| x.0).collect(),
            h.into_iter().map(|x| x.0).collect(),
        )
    }
}

/// Rebuilds a split from separately stored trips: every example of `train`,
/// plus the held-out trips' non-final examples, go to training. Returns the
/// combined trip list (`train` then `held`) the split indexes into.
pub fn from_holdout(train: Vec<Trip>, held: Vec<Trip>) -> (Vec<Trip>, Split) {
    let offset = train.len();
    let mut trips = train;
    trips.extend(held);
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        valid_trips: Vec::new(),
    };
    for (i, t) in trips.iter().enumerate() {
        let mut examples = augment(t);
        if i >= offset && !examples.is_empty() {
            split.valid_trips.push(i);
            split.valid.extend(examples.pop());
        }
        split.train.extend(examples);
    }
    (trips, split)
}

/// Holds out `round(fraction * eligible)` trips whose final example moves to
/// validation; their earlier examples stay in training.
///
/// A held-out trip's final city must still occur somewhere in the training
/// portion. Candidates that would violate this are skipped and the next
/// shuffled trip is tried instead.
pub fn split(trips: &[Trip], valid_fraction: f64, seed: u64) -> Result<Split> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::invalid(
            "valid_fraction",
            format!("{valid_fraction} not in (0, 1)"),
        ));
    }
    let eligible: Vec<usize> = (0..trips.len()).filter(|&i| trips[i].len() >= 2).collect();
    let wanted = (valid_fraction * eligible.len() as f64).round() as usize;

    let mut visible: HashMap<CityId, usize> = HashMap::new();
    for t in trips {
        for r in &t.reservations {
            *visible.entry(r.city_id).or_default() += 1;
        }
    }

    let mut order = eligible;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; trips.len()];
    let mut chosen = 0;
    let mut skipped = 0;
    for i in order {
        if chosen == wanted {
            break;
        }
        let count = visible.get_mut(&trips[i].last_city()).unwrap();
        if *count >= 2 {
            *count -= 1;
            held[i] = true;
            chosen += 1;
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("split: skipped {skipped} trips whose final city appears nowhere else");
    }
    if chosen < wanted {
        log::warn!("split: only {chosen} of {wanted} validation trips could be drawn");
    }

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut valid_trips = Vec::new();
    for (i, t) in trips.iter().enumerate() {
        let mut examples = augment(t);
        if held[i] {
            valid_trips.push(i);
            valid.extend(examples.pop());
        }
        train.extend(examples);
    }
    Ok(Split {
        train,
        valid,
        valid_trips,
    })
}
