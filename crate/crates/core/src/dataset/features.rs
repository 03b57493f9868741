use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{Trip, TripExample};

pub const NUM_NUMERICAL: usize = 8;
pub const NUM_CATEGORICAL: usize = 8;

pub const NUMERICAL_NAMES: [&str; NUM_NUMERICAL] = [
    "stay_days",
    "days_since_start",
    "days_till_end",
    "days_since_last_booking",
    "cities_so_far",
    "unique_cities_so_far",
    "trip_length",
    "total_gap_days",
];

pub const CATEGORICAL_NAMES: [&str; NUM_CATEGORICAL] = [
    "device_class",
    "booker_country",
    "prev_hotel_country",
    "affiliate_id",
    "checkin_weekday",
    "checkout_weekday",
    "month",
    "year",
];

/// Raw categorical values in [`CATEGORICAL_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeatures(pub [String; NUM_CATEGORICAL]);

fn days(later: NaiveDate, earlier: NaiveDate, what: &str, trip: &str) -> f64 {
    let d = (later - earlier).num_days();
    if d < 0 {
        log::warn!("trip {trip}: negative {what} ({d} days), clamped to 0");
        0.0
    } else {
        d as f64
    }
}

/// Features of the example predicting city `k` (0-based) from the first `k`
/// cities. The target's dates and metadata are observed; only its city is
/// hidden. "Days till end" runs to the last checkout of the trip.
pub fn featurize(trip: &Trip, k: usize) -> TripExample {
    assert!(
        k >= 1 && k < trip.len(),
        "k={k} out of range for trip of {}",
        trip.len()
    );
    let res = &trip.reservations;
    let target = &res[k];
    let prev = &res[k - 1];
    let id = &trip.id;

    let prefix: Vec<_> = res[..k].iter().map(|r| r.city_id).collect();
    let mut unique = prefix.clone();
    unique.sort_unstable();
    unique.dedup();
    let total_gap: f64 = res[..=k]
        .windows(2)
        .map(|w| days(w[1].checkin, w[0].checkout, "gap", id))
        .sum();

    let numerical = [
        days(target.checkout, target.checkin, "stay", id),
        days(target.checkin, res[0].checkin, "days since start", id),
        days(
            res[res.len() - 1].checkout,
            target.checkin,
            "days till end",
            id,
        ),
        days(target.checkin, prev.checkout, "days since last booking", id),
        k as f64,
        unique.len() as f64,
        trip.len() as f64,
        total_gap,
    ];

    let categorical = CategoricalFeatures([
        target.device_class.clone(),
        target.booker_country.clone(),
        prev.hotel_country.clone(),
        target.affiliate_id.to_string(),
        target.checkin.weekday().num_days_from_monday().to_string(),
        target.checkout.weekday().num_days_from_monday().to_string(),
        target.checkin.month().to_string(),
        target.checkin.year().to_string(),
    ]);

    TripExample {
        trip_id: trip.id.clone(),
        prefix,
        target: target.city_id,
        is_final: k + 1 == trip.len(),
        trip_len: trip.len(),
        numerical,
        categorical,
    }
}

/// Per-feature standardization fitted on training examples only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; NUM_NUMERICAL],
    pub std: [f64; NUM_NUMERICAL],
}

impl FeatureScaler {
    pub fn identity() -> Self {
        FeatureScaler {
            mean: [0.0; NUM_NUMERICAL],
            std: [1.0; NUM_NUMERICAL],
        }
    }

    pub fn fit(examples: &[TripExample]) -> Self {
        if examples.is_empty() {
            return Self::identity();
        }
        let n = examples.len() as f64;
        let mut mean = [0.0; NUM_NUMERICAL];
        for e in examples {
            for (m, x) in mean.iter_mut().zip(&e.numerical) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; NUM_NUMERICAL];
        for e in examples {
            for ((s, x), m) in std.iter_mut().zip(&e.numerical).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        FeatureScaler { mean, std }
    }

    pub fn transform(&self, raw: &[f64; NUM_NUMERICAL]) -> [f64; NUM_NUMERICAL] {
        let mut out = [0.0; NUM_NUMERICAL];
        for i in 0..NUM_NUMERICAL {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// Index 0 of every categorical vocabulary is reserved for unseen values.
pub const OOV: usize = 0;

/// Per-feature value → index maps. Weekdays, months and years use fixed
/// vocabularies; the rest are learned from training examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub maps: Vec<BTreeMap<String, usize>>,
}

impl CategoricalVocab {
    pub fn fit(examples: &[TripExample]) -> Self {
        let fixed = |values: Vec<String>| -> BTreeMap<String, usize> {
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i + 1))
                .collect()
        };
        let mut maps = Vec::with_capacity(NUM_CATEGORICAL);
        for f in 0..4 {
            let mut values: Vec<&String> = examples.iter().map(|e| &e.categorical.0[f]).collect();
            values.sort_unstable();
            values.dedup();
            maps.push(fixed(values.into_iter().cloned().collect()));
        }
        let weekdays: Vec<String> = (0..7).map(|d| d.to_string()).collect();
        maps.push(fixed(weekdays.clone()));
        maps.push(fixed(weekdays));
        maps.push(fixed((1..=12).map(|m| m.to_string()).collect()));
        maps.push(fixed((2015..=2017).map(|y| y.to_string()).collect()));
        CategoricalVocab { maps }
    }

    /// Table sizes including the out-of-vocabulary slot.
    pub fn sizes(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.len() + 1).collect()
    }

    pub fn encode(&self, features: &CategoricalFeatures) -> [usize; NUM_CATEGORICAL] {
        let mut out = [OOV; NUM_CATEGORICAL];
        for (i, (map, value)) in self.maps.iter().zip(&features.0).enumerate() {
            out[i] = map.get(value).copied().unwrap_or(OOV);
        }
        out
    }
}
