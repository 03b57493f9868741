//! Data-dependent LSH partitioning of embedding manifolds into sketch regions.
//!
//! A partitioning of width `K` cuts the space with `log2(K)` hyperplanes. Each
//! direction is an isotropic Gaussian sample and each threshold is the median
//! projection of the fitted cities, so cuts fall where the cities are. A city's
//! region id is the bit pattern of which side of each cut it lies on.
//!
//! `depth` independent partitionings yield one region id per row; the
//! resulting code rows are the item sketches' one-hot positions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::cleora::EmbeddingTable;
use crate::error::{Error, Result};
use crate::sketch::{Segment, Sketch};
use crate::CityId;

/// Leading bytes of the artifact file.
pub const MAGIC: &[u8; 8] = b"TSKCODES";

pub const MAX_WIDTH: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub direction: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    width: usize,
    hyperplanes: Vec<Hyperplane>,
    seed: u64,
}

/// Which embedding source a codes matrix was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// LSH codes of a Cleora table at the given iteration count.
    Cleora(u32),
    /// Codes drawn uniformly at random, independent of any embedding.
    Random,
}

impl Modality {
    fn tag(self) -> u32 {
        match self {
            Modality::Random => u32::MAX,
            Modality::Cleora(i) => i,
        }
    }

    fn from_tag(tag: u32) -> Self {
        match tag {
            u32::MAX => Modality::Random,
            i => Modality::Cleora(i),
        }
    }

    pub fn label(self) -> String {
        match self {
            Modality::Random => "random".into(),
            Modality::Cleora(i) => format!("i{i}"),
        }
    }
}

fn check_width(width: usize) -> Result<()> {
    if !width.is_power_of_two() || !(2..=MAX_WIDTH).contains(&width) {
        return Err(Error::invalid(
            "width",
            format!("{width} is not a power of two in [2, {MAX_WIDTH}]"),
        ));
    }
    Ok(())
}

fn dot(direction: &[f64], v: &[f32]) -> f64 {
    direction.iter().zip(v).map(|(d, &x)| d * x as f64).sum()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl Partitioning {
    /// Builds a partitioning from explicit cuts.
    pub fn from_hyperplanes(width: usize, hyperplanes: Vec<Hyperplane>) -> Result<Self> {
        check_width(width)?;
        if hyperplanes.len() != width.trailing_zeros() as usize {
            return Err(Error::shape(width.trailing_zeros(), hyperplanes.len()));
        }
        Ok(Partitioning {
            width,
            hyperplanes,
            seed: 0,
        })
    }

    pub fn fit(embeddings: &EmbeddingTable, width: usize, seed: u64) -> Result<Self> {
        check_width(width)?;
        let first = embeddings.row(0);
        if embeddings.rows().all(|r| r == first) {
            return Err(Error::DegenerateManifold);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projections = vec![0.0; embeddings.len()];
        let hyperplanes = (0..width.trailing_zeros())
            .map(|_| {
                let mut direction: Vec<f64> = (0..embeddings.dim())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
                direction.iter_mut().for_each(|d| *d /= norm);
                for (p, row) in projections.iter_mut().zip(embeddings.rows()) {
                    *p = dot(&direction, row);
                }
                let threshold = median(&mut projections);
                Hyperplane {
                    direction,
                    threshold,
                }
            })
            .collect();
        Ok(Partitioning {
            width,
            hyperplanes,
            seed,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyperplanes(&self) -> &[Hyperplane] {
        &self.hyperplanes
    }

    /// Bit `j` of the region id is set iff the vector lies strictly above cut `j`.
    pub fn assign(&self, vector: &[f32]) -> Result<u16> {
        let dim = self.hyperplanes[0].direction.len();
        if vector.len() != dim {
            return Err(Error::shape(dim, vector.len()));
        }
        Ok(self.assign_unchecked(vector))
    }

    fn assign_unchecked(&self, vector: &[f32]) -> u16 {
        self.hyperplanes
            .iter()
            .enumerate()
            .fold(0u32, |acc, (j, h)| {
                acc | ((dot(&h.direction, vector) > h.threshold) as u32) << j
            }) as u16
    }
}

/// Region ids for every city at every depth of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesMatrix {
    depth: usize,
    width: usize,
    modality: Modality,
    seed: u64,
    city_ids: Vec<CityId>,
    /// Row-major, `city_ids.len() * depth`.
    codes: Vec<u16>,
}

impl CodesMatrix {
    pub fn from_rows(
        width: usize,
        modality: Modality,
        city_ids: Vec<CityId>,
        rows: &[Vec<u16>],
    ) -> Result<Self> {
        let depth = rows.first().map_or(0, Vec::len);
        if rows.len() != city_ids.len() {
            return Err(Error::shape(city_ids.len(), rows.len()));
        }
        if rows
            .iter()
            .any(|r| r.len() != depth || r.iter().any(|&c| c as usize >= width))
        {
            return Err(Error::invalid("rows", "ragged rows or region id >= width"));
        }
        Ok(CodesMatrix {
            depth,
            width,
            modality,
            seed: 0,
            city_ids,
            codes: rows.concat(),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segment(&self) -> Segment {
        Segment::new(self.depth, self.width)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.city_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.city_ids.is_empty()
    }

    pub fn city_ids(&self) -> &[CityId] {
        &self.city_ids
    }

    pub fn row(&self, city: usize) -> &[u16] {
        &self.codes[city * self.depth..(city + 1) * self.depth]
    }

    pub fn item_sketch(&self, city: usize) -> Sketch {
        item_sketch(self.row(city), self.width)
    }

    /// Number of depths at which two cities share a region.
    pub fn collisions(&self, a: usize, b: usize) -> usize {
        self.row(a)
            .iter()
            .zip(self.row(b))
            .filter(|(x, y)| x == y)
            .count()
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        let mut w = ArtifactWriter::create(path, MAGIC, fingerprint)?;
        w.u64(self.len() as u64)?;
        w.u32(self.depth as u32)?;
        w.u32(self.width as u32)?;
        w.u32(self.modality.tag())?;
        w.u64(self.seed)?;
        for &id in &self.city_ids {
            w.u64(id)?;
        }
        for &c in &self.codes {
            w.u16(c)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let mut r = ArtifactReader::open(path, MAGIC)?;
        let fp = r.header.fingerprint;
        let v = r.len(u32::MAX as u64)?;
        let depth = r.u32()? as usize;
        let width = r.u32()? as usize;
        let modality = Modality::from_tag(r.u32()?);
        let seed = r.u64()?;
        let city_ids = (0..v).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let codes = (0..v * depth)
            .map(|_| r.u16())
            .collect::<Result<Vec<_>>>()?;
        r.expect_eof()?;
        if codes.iter().any(|&c| c as usize >= width) {
            return Err(Error::Format("region id out of range".into()));
        }
        Ok((
            CodesMatrix {
                depth,
                width,
                modality,
                seed,
                city_ids,
                codes,
            },
            fp,
        ))
    }
}

/// Fits `depth` independent partitionings (seeds `seed + n`) and assigns
/// every city to one region in each.
pub fn build_codes(
    embeddings: &EmbeddingTable,
    width: usize,
    depth: usize,
    seed: u64,
) -> Result<CodesMatrix> {
    if depth == 0 {
        return Err(Error::invalid("depth", "must be positive"));
    }
    let parts = (0..depth as u64)
        .into_par_iter()
        .map(|n| Partitioning::fit(embeddings, width, seed.wrapping_add(n)))
        .collect::<Result<Vec<_>>>()?;
    let codes = (0..embeddings.len())
        .into_par_iter()
        .flat_map_iter(|c| {
            let row = embeddings.row(c);
            parts.iter().map(move |p| p.assign_unchecked(row))
        })
        .collect();
    Ok(CodesMatrix {
        depth,
        width,
        modality: Modality::Cleora(embeddings.iteration() as u32),
        seed,
        city_ids: embeddings.city_ids().to_vec(),
        codes,
    })
}

/// Codes independent of any embedding; each city's row comes from its own
/// stream of a generator keyed by `seed`, so rows are stable across runs.
pub fn build_random_codes(
    city_ids: &[CityId],
    width: usize,
    depth: usize,
    seed: u64,
) -> Result<CodesMatrix> {
    if width == 0 || depth == 0 || width > MAX_WIDTH {
        return Err(Error::invalid("width/depth", format!("({width}, {depth})")));
    }
    let codes = (0..city_ids.len())
        .flat_map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            (0..depth).map(move |_| rng.random_range(0..width) as u16)
        })
        .collect();
    Ok(CodesMatrix {
        depth,
        width,
        modality: Modality::Random,
        seed,
        city_ids: city_ids.to_vec(),
        codes,
    })
}

/// One-hot-per-row sketch of a single code row.
pub fn item_sketch(codes_row: &[u16], width: usize) -> Sketch {
    Sketch::one_hot(width, codes_row)
}
