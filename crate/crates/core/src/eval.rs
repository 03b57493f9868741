//! Decoding post-processing and Precision@k reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CityId;

/// Weight given to cities never seen as a final destination.
pub const POPULARITY_FLOOR: f64 = 0.1;

pub const TOP_K: usize = 4;

/// How often each city (by dense index) ended a training trip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
}

impl PopularityTable {
    pub fn new(counts: Vec<u64>) -> Self {
        PopularityTable { counts }
    }

    /// `max(ln(1 + count), POPULARITY_FLOOR)`.
    pub fn weight(&self, city: usize) -> f64 {
        (self.counts[city] as f64).ln_1p().max(POPULARITY_FLOOR)
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|c| self.weight(c)).collect()
    }
}

pub fn popularity_boost(scores: &[f64], table: &PopularityTable) -> Result<Vec<f64>> {
    if scores.len() != table.counts.len() {
        return Err(Error::shape(table.counts.len(), scores.len()));
    }
    Ok(scores
        .iter()
        .enumerate()
        .map(|(c, s)| s * table.weight(c))
        .collect())
}

/// Per-city arithmetic mean of several models' scores.
pub fn ensemble(score_vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = score_vectors
        .first()
        .ok_or(Error::NoData("no score vectors"))?;
    if score_vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::invalid("score_vectors", "length mismatch"));
    }
    let m = score_vectors.len() as f64;
    Ok((0..first.len())
        .map(|c| score_vectors.iter().map(|v| v[c]).sum::<f64>() / m)
        .collect())
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        if best.len() == k && s <= scores[best[k - 1]] {
            continue;
        }
        let pos = best.partition_point(|&j| scores[j] >= s);
        best.insert(pos, i);
        best.truncate(k);
    }
    best
}

/// What is known about one evaluation sample besides its ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub trip_id: String,
    /// Dense index of the true city, if it is scoreable at all.
    pub target: Option<usize>,
    pub target_id: CityId,
    pub trip_len: usize,
    /// The trip ends where it started.
    pub is_return: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub trip_id: String,
    pub trip_len: usize,
    pub is_return: bool,
    pub target: CityId,
    pub top: Vec<CityId>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub precision: f64,
    pub by_trip_length: BTreeMap<usize, Bucket>,
    pub return_trips: Bucket,
    #[serde(skip)]
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    pub fn hits(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.hit).collect()
    }

    /// Writes `summary.json` and `samples.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
        let mut header = vec![
            "utrip_id".to_string(),
            "trip_length".into(),
            "is_return".into(),
            "target".into(),
        ];
        header.extend((1..=self.k).map(|i| format!("city_id_{i}")));
        header.push("hit".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![
                s.trip_id.clone(),
                s.trip_len.to_string(),
                u8::from(s.is_return).to_string(),
                s.target.to_string(),
            ];
            rec.extend(s.top.iter().map(|c| c.to_string()));
            rec.push(u8::from(s.hit).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bucket(hits: impl Iterator<Item = bool>) -> Bucket {
    let (mut count, mut hit) = (0usize, 0usize);
    for h in hits {
        count += 1;
        hit += usize::from(h);
    }
    Bucket {
        count,
        precision: if count == 0 {
            0.0
        } else {
            hit as f64 / count as f64
        },
    }
}

/// Scores each sample 1 if its target is among its ranked predictions' first
/// `k`, else 0, and averages overall, per trip length and over return trips.
pub fn precision_at_k(
    ranked: &[Vec<usize>],
    samples: &[EvalSample],
    city_ids: &[CityId],
    k: usize,
) -> Result<EvalReport> {
    if ranked.len() != samples.len() {
        return Err(Error::shape(samples.len(), ranked.len()));
    }
    let results: Vec<SampleResult> = ranked
        .iter()
        .zip(samples)
        .map(|(r, s)| {
            let top = &r[..r.len().min(k)];
            SampleResult {
                trip_id: s.trip_id.clone(),
                trip_len: s.trip_len,
                is_return: s.is_return,
                target: s.target_id,
                top: top.iter().map(|&c| city_ids[c]).collect(),
                hit: s.target.is_some_and(|t| top.contains(&t)),
            }
        })
        .collect();
    let mut lengths: Vec<usize> = results.iter().map(|r| r.trip_len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let by_trip_length = lengths
        .into_iter()
        .map(|len| {
            let b = bucket(results.iter().filter(|r| r.trip_len == len).map(|r| r.hit));
            (len, b)
        })
        .collect();
    Ok(EvalReport {
        k,
        precision: bucket(results.iter().map(|r| r.hit)).precision,
        by_trip_length,
        return_trips: bucket(results.iter().filter(|r| r.is_return).map(|r| r.hit)),
        samples: results,
    })
}

/// Ranks every sample by `scores`, optionally boosted by popularity.
pub fn evaluate_scores(
    scores: &[Vec<f64>],
    samples: &[EvalSample],
    city_ids: &[CityId],
    popularity: Option<&PopularityTable>,
    k: usize,
) -> Result<EvalReport> {
    if city_ids.len() < k {
        return Err(Error::invalid(
            "cities",
            format!("fewer than {k} scoreable cities"),
        ));
    }
    let ranked = scores
        .iter()
        .map(|s| {
            Ok(match popularity {
                Some(p) => top_k(&popularity_boost(s, p)?, k),
                None => top_k(s, k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    precision_at_k(&ranked, samples, city_ids, k)
}

/// The reference that ignores the trip entirely: rank by popularity weight.
pub fn popularity_baseline(
    table: &PopularityTable,
    samples: &[EvalSample],
    city_ids: &[CityId],
    k: usize,
) -> Result<EvalReport> {
    let ranked = top_k(&table.weights(), k);
    precision_at_k(&vec![ranked; samples.len()], samples, city_ids, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(target: usize) -> EvalSample {
        EvalSample {
            trip_id: format!("t{target}"),
            target: Some(target),
            target_id: target as CityId,
            trip_len: 4,
            is_return: false,
        }
    }

    #[test]
    fn boost_weights() {
        let t = PopularityTable::new(vec![0, 1, 100]);
        assert_eq!(t.weight(0), POPULARITY_FLOOR);
        let e = PopularityTable::new(vec![0]);
        assert_eq!(e.weight(0), 0.1);
        let boosted = popularity_boost(&[0.5, 0.5, 0.5], &t).unwrap();
        assert!(boosted[2] > boosted[1] && boosted[1] > boosted[0]);
        assert!((boosted[2] - 0.5 * 101f64.ln()).abs() < 1e-12);
        assert!(popularity_boost(&[1.0], &t).is_err());
    }

    #[test]
    fn identity_point_of_boost() {
        // ln(1 + (e - 1)) = 1; count must be an integer, so check the formula.
        let c = std::f64::consts::E - 1.0;
        assert!((c.ln_1p() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn popular_city_wins_tie() {
        let t = PopularityTable::new(vec![0, 100]);
        let boosted = popularity_boost(&[0.5, 0.5], &t).unwrap();
        assert_eq!(top_k(&boosted, 1), vec![1]);
    }

    #[test]
    fn ensemble_means() {
        assert_eq!(ensemble(&[&[0.3, 0.7]]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(
            ensemble(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(ensemble(&[&[1.0], &[1.0, 2.0]]).is_err());
        assert!(ensemble(&[]).is_err());
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5, 0.9, 0.0], 3), vec![1, 3, 2]);
        assert_eq!(top_k(&[1.0; 6], 4), vec![0, 1, 2, 3]);
        assert_eq!(top_k(&[0.2, 0.1], 4), vec![0, 1]);
    }

    #[test]
    fn rank_boundaries() {
        let ids: Vec<CityId> = (0..10).collect();
        let ranked = vec![vec![9, 8, 7, 3, 2], vec![9, 8, 7, 6, 3]];
        let r = precision_at_k(&ranked, &[sample(3), sample(3)], &ids, 4).unwrap();
        assert_eq!(r.hits(), vec![true, false]);
        assert_eq!(r.precision, 0.5);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let ids: Vec<CityId> = (0..10).collect();
        let samples: Vec<_> = (0..10).map(sample).collect();
        let ranked: Vec<_> = (0..10).map(|t| vec![t, (t + 1) % 10]).collect();
        let r = precision_at_k(&ranked, &samples, &ids, 4).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.by_trip_length[&4].count, 10);
    }

    #[test]
    fn report_files() {
        let ids: Vec<CityId> = (0..5).collect();
        let scores = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]];
        let mut s = sample(0);
        s.is_return = true;
        let r = evaluate_scores(&scores, &[s], &ids, None, 4).unwrap();
        assert_eq!(r.return_trips.count, 1);
        assert_eq!(r.return_trips.precision, 0.0);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("samples.csv")).unwrap();
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("t0,4,1,0,4,3,2,1,0"));
    }
}
