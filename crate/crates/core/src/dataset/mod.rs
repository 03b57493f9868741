//! Trip data: CSV ingestion, prefix augmentation, the validation split and
//! per-example features.

mod features;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CityId;

pub use features::{
    featurize, CategoricalFeatures, CategoricalVocab, FeatureScaler, CATEGORICAL_NAMES,
    NUMERICAL_NAMES, NUM_CATEGORICAL, NUM_NUMERICAL, OOV,
};
pub use split::{from_holdout, split, Split};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Column names of the trip CSV, in file order.
pub const COLUMNS: [&str; 9] = [
    "user_id",
    "checkin",
    "checkout",
    "city_id",
    "device_class",
    "affiliate_id",
    "booker_country",
    "hotel_country",
    "utrip_id",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub user_id: u64,
    pub checkin: NaiveDate,
    pub checkout: NaiveDate,
    pub city_id: CityId,
    pub device_class: String,
    pub affiliate_id: u64,
    pub booker_country: String,
    pub hotel_country: String,
    pub utrip_id: String,
}

/// Reservations sharing a trip id, in check-in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trip {
    pub id: String,
    pub reservations: Vec<Reservation>,
}

impl Trip {
    pub fn len(&self) -> usize {
        self.reservations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reservations.is_empty()
    }

    pub fn cities(&self) -> Vec<CityId> {
        self.reservations.iter().map(|r| r.city_id).collect()
    }

    pub fn first_city(&self) -> CityId {
        self.reservations[0].city_id
    }

    pub fn last_city(&self) -> CityId {
        self.reservations[self.len() - 1].city_id
    }
}

/// One prediction target: the city after `prefix`, plus its features.
#[derive(Debug, Clone, PartialEq)]
pub struct TripExample {
    pub trip_id: String,
    pub prefix: Vec<CityId>,
    pub target: CityId,
    pub is_final: bool,
    /// Total number of reservations in the source trip.
    pub trip_len: usize,
    pub numerical: [f64; NUM_NUMERICAL],
    pub categorical: CategoricalFeatures,
}

/// Reads a trip CSV. Rows are grouped by `utrip_id`, trips are returned in
/// order of first appearance and reservations are sorted by check-in
/// (stable, so duplicate rows are kept in file order).
pub fn parse_trips<R: Read>(input: R) -> Result<Vec<Trip>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let mut positions = [0usize; COLUMNS.len()];
    for (slot, name) in positions.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Reservation>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(positions[i]).unwrap_or("");
        let res = parse_row(&field, line)?;
        if !groups.contains_key(&res.utrip_id) {
            order.push(res.utrip_id.clone());
        }
        groups.entry(res.utrip_id.clone()).or_default().push(res);
    }

    Ok(order
        .into_iter()
        .map(|id| {
            let mut reservations = groups.remove(&id).unwrap();
            reservations.sort_by_key(|r| r.checkin);
            Trip { id, reservations }
        })
        .collect())
}

fn parse_row<'a>(field: &impl Fn(usize) -> &'a str, line: u64) -> Result<Reservation> {
    let err = |message: String| Error::Parse { line, message };
    let int = |i: usize| {
        field(i)
            .parse::<u64>()
            .map_err(|e| err(format!("{} {:?}: {e}", COLUMNS[i], field(i))))
    };
    let date = |i: usize| {
        NaiveDate::parse_from_str(field(i), "%Y-%m-%d")
            .map_err(|e| err(format!("{} {:?}: {e}", COLUMNS[i], field(i))))
    };
    let text = |i: usize| {
        let s = field(i);
        if s.is_empty() {
            Err(err(format!("empty {}", COLUMNS[i])))
        } else {
            Ok(s.to_string())
        }
    };
    let res = Reservation {
        user_id: int(0)?,
        checkin: date(1)?,
        checkout: date(2)?,
        city_id: int(3)?,
        device_class: text(4)?,
        affiliate_id: int(5)?,
        booker_country: text(6)?,
        hotel_country: text(7)?,
        utrip_id: text(8)?,
    };
    if res.checkout < res.checkin {
        return Err(err(format!(
            "checkout {} before checkin {}",
            res.checkout, res.checkin
        )));
    }
    Ok(res)
}

pub fn write_trips<W: Write>(out: W, trips: &[Trip]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(COLUMNS)?;
    for r in trips.iter().flat_map(|t| &t.reservations) {
        writer.write_record([
            r.user_id.to_string(),
            r.checkin.to_string(),
            r.checkout.to_string(),
            r.city_id.to_string(),
            r.device_class.clone(),
            r.affiliate_id.to_string(),
            r.booker_country.clone(),
            r.hotel_country.clone(),
            r.utrip_id.clone(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Every prefix of the trip predicting the next city: a trip of `L` cities
/// yields `L - 1` examples, the last of which is final.
pub fn augment(trip: &Trip) -> Vec<TripExample> {
    (1..trip.len()).map(|k| featurize(trip, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "user_id,checkin,checkout,city_id,device_class,affiliate_id,booker_country,hotel_country,utrip_id\n";

    fn row(checkin: &str, checkout: &str, city: u64, trip: &str) -> String {
        format!("1,{checkin},{checkout},{city},mobile,7,Gondal,Cobra,{trip}\n")
    }

    #[test]
    fn groups_and_sorts_rows() {
        let csv = format!(
            "{HEADER}{}{}{}{}",
            row("2016-01-05", "2016-01-06", 30, "t1"),
            row("2016-01-01", "2016-01-03", 10, "t1"),
            row("2016-02-01", "2016-02-02", 99, "t2"),
            row("2016-01-03", "2016-01-05", 20, "t1"),
        );
        let trips = parse_trips(csv.as_bytes()).unwrap();
        assert_eq!(trips.len(), 2);
        assert_eq!(trips[0].id, "t1");
        assert_eq!(trips[0].cities(), vec![10, 20, 30]);
        assert_eq!(trips[1].len(), 1);
    }

    #[test]
    fn duplicate_rows_are_kept() {
        let r = row("2016-01-01", "2016-01-02", 5, "t");
        let trips = parse_trips(format!("{HEADER}{r}{r}").as_bytes()).unwrap();
        assert_eq!(trips[0].len(), 2);
    }

    #[test]
    fn reports_bad_rows_and_columns() {
        let bad_date = format!("{HEADER}{}", row("2016-13-01", "2016-01-02", 5, "t"));
        match parse_trips(bad_date.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_city = format!("{HEADER}1,2016-01-01,2016-01-02,abc,m,7,X,Y,t\n");
        assert!(matches!(
            parse_trips(bad_city.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let missing = "user_id,checkin\n1,2016-01-01\n";
        assert!(matches!(
            parse_trips(missing.as_bytes()),
            Err(Error::MissingColumn(_))
        ));
        let backwards = format!("{HEADER}{}", row("2016-01-05", "2016-01-02", 5, "t"));
        assert!(parse_trips(backwards.as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let trips = generate_synthetic(&SyntheticConfig {
            trips: 20,
            ..SyntheticConfig::small()
        });
        let mut buf = Vec::new();
        write_trips(&mut buf, &trips).unwrap();
        assert_eq!(parse_trips(&buf[..]).unwrap(), trips);
    }
}
