//! Synthetic trips with the challenge CSV schema.
//!
//! Cities sit on a ring split into contiguous countries, each with a random
//! log-normal attractiveness. A trip is a directed walk around the ring: each
//! step draws a few geometric jumps and keeps one in proportion to the
//! destination's attractiveness. Some booking metadata carries signal on
//! purpose: the device class biases the walk direction and longer gaps
//! between bookings allow longer jumps. With `return_probability` a trip is a
//! round trip: a domestic booker starts at one of their home country's hub
//! cities, turns around halfway and the final city is forced back to the
//! first one. Other trips
//! start anywhere, keep their direction and are mostly booked from abroad.

use chrono::{Days, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, LogNormal};
use serde::{Deserialize, Serialize};

use super::{Reservation, Trip};
use crate::CityId;

const DEVICES: [&str; 3] = ["desktop", "mobile", "tablet"];
const FOREIGN_BOOKERS: [&str; 5] = ["Gondal", "Elbonia", "Cobra", "Tcherkistan", "Bartovia"];
const AFFILIATES: u64 = 40;
/// Most attractive cities of a country, where round trips start.
const HUBS: usize = 3;
/// Share of one-way trips booked from one of the hotel countries.
const DOMESTIC_ONE_WAY: f64 = 0.1;
const CANDIDATES: usize = 3;
const FIRST_CITY_ID: CityId = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub cities: usize,
    pub countries: usize,
    pub trips: usize,
    pub mean_trip_length: f64,
    pub min_trip_length: usize,
    pub return_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            cities: 2000,
            countries: 20,
            trips: 10_000,
            mean_trip_length: 5.0,
            min_trip_length: 4,
            return_probability: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn small() -> Self {
        SyntheticConfig {
            cities: 100,
            countries: 5,
            trips: 100,
            ..Self::default()
        }
    }
}

pub fn city_id(index: usize) -> CityId {
    FIRST_CITY_ID + index as CityId
}

pub fn country_of(index: usize, config: &SyntheticConfig) -> usize {
    index * config.countries / config.cities
}

pub fn country_name(country: usize) -> String {
    format!("country{country:03}")
}

/// Generates `config.trips` trips; identical configs give identical output.
pub fn generate_synthetic(config: &SyntheticConfig) -> Vec<Trip> {
    assert!(
        config.cities >= config.countries && config.countries >= 1,
        "need cities >= countries >= 1"
    );
    let v = config.cities;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let attractiveness: Vec<f64> = LogNormal::new(0.0, 1.0)
        .unwrap()
        .sample_iter(&mut rng)
        .take(v)
        .collect();
    let popular = WeightedIndex::new(&attractiveness).unwrap();
    let mut country_start = vec![v; config.countries + 1];
    for i in (0..v).rev() {
        country_start[country_of(i, config)] = i;
    }
    let hubs: Vec<Vec<usize>> = (0..config.countries)
        .map(|c| {
            let mut members: Vec<usize> = (country_start[c]..country_start[c + 1]).collect();
            members.sort_by(|&a, &b| attractiveness[b].total_cmp(&attractiveness[a]));
            members.truncate(HUBS);
            members
        })
        .collect();
    let min_len = config.min_trip_length.max(2);
    let extra_mean = (config.mean_trip_length - min_len as f64).max(0.0);
    let extra_len = Geometric::new(1.0 / (1.0 + extra_mean)).unwrap();
    let epoch = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();

    (0..config.trips)
        .map(|t| {
            let len = min_len + extra_len.sample(&mut rng) as usize;
            let device = rng.random_range(0..DEVICES.len());
            let direction: i64 = match device {
                0 if rng.random_bool(0.9) => 1,
                1 if rng.random_bool(0.9) => -1,
                0 => -1,
                1 => 1,
                _ if rng.random_bool(0.5) => 1,
                _ => -1,
            };
            let home = rng.random_range(0..config.countries);
            let affiliate = rng.random_range(1..=AFFILIATES);
            let returns = rng.random_bool(config.return_probability);
            let booker = if returns || rng.random_bool(DOMESTIC_ONE_WAY) {
                country_name(home)
            } else {
                FOREIGN_BOOKERS[rng.random_range(0..FOREIGN_BOOKERS.len())].to_string()
            };

            let mut city = if returns {
                let hub = &hubs[home];
                hub[WeightedIndex::new(hub.iter().map(|&c| attractiveness[c]))
                    .unwrap()
                    .sample(&mut rng)]
            } else {
                popular.sample(&mut rng)
            };
            let first = city;
            // Free moves exclude the forced final return; a loop spends half going out.
            let outward = if returns { (len - 2) / 2 } else { len };
            let mut checkin = epoch + Days::new(rng.random_range(0..400));
            let mut reservations = Vec::with_capacity(len);
            for k in 0..len {
                if k > 0 {
                    let gap = if rng.random_bool(0.7) {
                        0
                    } else {
                        rng.random_range(1..=4)
                    };
                    checkin = reservations
                        .last()
                        .map(|r: &Reservation| r.checkout)
                        .unwrap()
                        + Days::new(gap);
                    city = if k + 1 == len && returns {
                        first
                    } else {
                        let heading = if k <= outward { direction } else { -direction };
                        step(city, heading, gap, v, &attractiveness, &mut rng)
                    };
                }
                let checkout = checkin + Days::new(rng.random_range(1..=7));
                reservations.push(Reservation {
                    user_id: 100_000 + t as u64,
                    checkin,
                    checkout,
                    city_id: city_id(city),
                    device_class: DEVICES[device].to_string(),
                    affiliate_id: affiliate,
                    booker_country: booker.clone(),
                    hotel_country: country_name(country_of(city, config)),
                    utrip_id: format!("{}_{}", 100_000 + t, t),
                });
            }
            Trip {
                id: format!("{}_{}", 100_000 + t, t),
                reservations,
            }
        })
        .collect()
}

fn step(
    from: usize,
    direction: i64,
    gap_days: u64,
    cities: usize,
    attractiveness: &[f64],
    rng: &mut ChaCha8Rng,
) -> usize {
    let mean_jump = 2.0 + 3.0 * gap_days as f64;
    let jump = Geometric::new(1.0 / mean_jump).unwrap();
    let candidates: [usize; CANDIDATES] = std::array::from_fn(|_| {
        let d = 1 + jump.sample(rng) as i64;
        (from as i64 + direction * d).rem_euclid(cities as i64) as usize
    });
    let weights = candidates.map(|c| attractiveness[c]);
    candidates[WeightedIndex::new(weights).unwrap().sample(rng)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_return() {
        let trips = generate_synthetic(&SyntheticConfig {
            return_probability: 1.0,
            ..SyntheticConfig::small()
        });
        assert!(trips.iter().all(|t| t.first_city() == t.last_city()));
    }

    #[test]
    fn return_rate_matches_probability() {
        let trips = generate_synthetic(&SyntheticConfig {
            trips: 1000,
            cities: 2000,
            countries: 20,
            ..SyntheticConfig::default()
        });
        let rate = trips
            .iter()
            .filter(|t| t.first_city() == t.last_city())
            .count() as f64
            / 1000.0;
        assert!((rate - 0.15).abs() <= 0.03, "{rate}");
    }

    #[test]
    fn round_trips_start_at_hubs() {
        let trips = generate_synthetic(&SyntheticConfig::default());
        let mut starts: Vec<_> = trips
            .iter()
            .filter(|t| t.first_city() == t.last_city())
            .map(Trip::first_city)
            .collect();
        starts.sort_unstable();
        starts.dedup();
        // Hubs plus the odd one-way trip that happens to loop back.
        assert!(starts.len() < 20 * HUBS + 20, "{}", starts.len());
    }

    #[test]
    fn round_trips_start_at_home() {
        let config = SyntheticConfig::small();
        for t in generate_synthetic(&config) {
            let first = &t.reservations[0];
            if t.first_city() == t.last_city() && t.len() > 1 {
                let home_start = first.booker_country == first.hotel_country;
                let revisit = t.reservations[1..t.len() - 1]
                    .iter()
                    .any(|r| r.city_id == first.city_id);
                assert!(home_start || revisit, "{}", t.id);
            }
        }
    }

    #[test]
    fn country_count() {
        let trips = generate_synthetic(&SyntheticConfig {
            cities: 10,
            countries: 2,
            trips: 200,
            ..SyntheticConfig::default()
        });
        let mut countries: Vec<_> = trips
            .iter()
            .flat_map(|t| t.reservations.iter().map(|r| r.hotel_country.clone()))
            .collect();
        countries.sort();
        countries.dedup();
        assert_eq!(countries.len(), 2);
    }

    #[test]
    fn deterministic_and_well_formed() {
        let config = SyntheticConfig::small();
        let a = generate_synthetic(&config);
        assert_eq!(a, generate_synthetic(&config));
        for t in &a {
            assert!(t.len() >= 4);
            for w in t.reservations.windows(2) {
                assert!(w[1].checkin >= w[0].checkout);
            }
            for r in &t.reservations {
                let stay = (r.checkout - r.checkin).num_days();
                assert!((1..=7).contains(&stay));
            }
        }
        let mean = a.iter().map(Trip::len).sum::<usize>() as f64 / a.len() as f64;
        assert!((mean - 5.0).abs() < 0.5, "{mean}");
    }
}
