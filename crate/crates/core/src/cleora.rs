//! Unit-sphere city embeddings by iterated weighted neighbor averaging.
//!
//! Every row starts as a random ±1 vector scaled to unit length. Each step
//! replaces a row with the weighted mean of its neighbors' rows from the
//! previous step and projects it back onto the unit sphere. Updates are
//! synchronous: a step reads only the previous table.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use crate::CityId;

/// Leading bytes of the artifact file.
pub const MAGIC: &[u8; 8] = b"TSKEMBED";

/// Averaged vectors shorter than this keep their previous value.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    iteration: usize,
    seed: u64,
    city_ids: Vec<CityId>,
    /// Row-major, `city_ids.len() * dim`.
    values: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CleoraOptions {
    /// Average over out-neighbors only instead of the symmetrized neighborhood.
    pub directed_only: bool,
}

impl EmbeddingTable {
    /// Random ±1 entries, each row normalized to unit length.
    pub fn init(city_ids: Vec<CityId>, dim: usize, seed: u64) -> Result<Self> {
        if city_ids.is_empty() {
            return Err(Error::invalid("node_count", "must be positive"));
        }
        if dim < 2 {
            return Err(Error::invalid("dim", format!("{dim} < 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let values = (0..city_ids.len() * dim)
            .map(|_| if rng.random::<bool>() { scale } else { -scale } as f32)
            .collect();
        Ok(EmbeddingTable {
            dim,
            iteration: 0,
            seed,
            city_ids,
            values,
        })
    }

    /// Builds a table from explicit rows, normalizing each one.
    pub fn from_rows(city_ids: Vec<CityId>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != city_ids.len() || rows.is_empty() {
            return Err(Error::shape(city_ids.len(), rows.len()));
        }
        let dim = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::shape(dim, row.len()));
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > ZERO_NORM) || !norm.is_finite() {
                return Err(Error::invalid("rows", "zero or non-finite row"));
            }
            values.extend(row.iter().map(|x| (x / norm) as f32));
        }
        Ok(EmbeddingTable {
            dim,
            iteration: 0,
            seed: 0,
            city_ids,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iteration(&self) -> usize {
        self.iteration
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

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// Runs `steps` synchronous averaging steps over `graph`.
    pub fn iterate(
        &self,
        graph: &TransitionGraph,
        steps: usize,
        options: CleoraOptions,
    ) -> Result<EmbeddingTable> {
        if graph.node_count() != self.len() {
            return Err(Error::shape(
                format!("{} graph nodes", self.len()),
                graph.node_count(),
            ));
        }
        let neighborhoods: Vec<Vec<(usize, u64)>> = (0..graph.node_count())
            .map(|v| graph.neighborhood(v, options.directed_only))
            .collect();
        let mut current = self.clone();
        for _ in 0..steps {
            current = current.step(&neighborhoods);
        }
        Ok(current)
    }

    fn step(&self, neighborhoods: &[Vec<(usize, u64)>]) -> EmbeddingTable {
        let dim = self.dim;
        let mut next = vec![0f32; self.values.len()];
        next.par_chunks_mut(dim).enumerate().for_each_init(
            || vec![0f64; dim],
            |acc, (v, out)| {
                let old = self.row(v);
                let hood = &neighborhoods[v];
                if hood.is_empty() {
                    out.copy_from_slice(old);
                    return;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut total = 0.0;
                for &(u, w) in hood {
                    let w = w as f64;
                    total += w;
                    for (a, &x) in acc.iter_mut().zip(self.row(u)) {
                        *a += w * x as f64;
                    }
                }
                let mut norm = 0.0;
                for a in acc.iter_mut() {
                    *a /= total;
                    norm += *a * *a;
                }
                let norm = norm.sqrt();
                if norm < ZERO_NORM {
                    out.copy_from_slice(old);
                } else {
                    for (o, &a) in out.iter_mut().zip(acc.iter()) {
                        *o = (a / norm) as f32;
                    }
                }
            },
        );
        EmbeddingTable {
            dim,
            iteration: self.iteration + 1,
            seed: self.seed,
            city_ids: self.city_ids.clone(),
            values: next,
        }
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        let mut w = ArtifactWriter::create(path, MAGIC, fingerprint)?;
        w.u64(self.len() as u64)?;
        w.u64(self.dim as u64)?;
        w.u64(self.iteration as u64)?;
        w.u64(self.seed)?;
        for &id in &self.city_ids {
            w.u64(id)?;
        }
        for &x in &self.values {
            w.f32(x)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let mut r = ArtifactReader::open(path, MAGIC)?;
        let fp = r.header.fingerprint;
        let v = r.len(u32::MAX as u64)?;
        let dim = r.len(1 << 20)?;
        let iteration = r.u64()? as usize;
        let seed = r.u64()?;
        let city_ids = (0..v).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let values = (0..v * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.expect_eof()?;
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite embedding entry".into()));
        }
        Ok((
            EmbeddingTable {
                dim,
                iteration,
                seed,
                city_ids,
                values,
            },
            fp,
        ))
    }
}

/// One table per requested iteration count, all grown from one initialization.
pub fn embed_cities(
    graph: &TransitionGraph,
    dim: usize,
    iterations: &[usize],
    seed: u64,
    options: CleoraOptions,
) -> Result<Vec<EmbeddingTable>> {
    if iterations.is_empty() {
        return Err(Error::invalid("iterations", "empty"));
    }
    if iterations.contains(&0) {
        return Err(Error::invalid("iterations", "each must be >= 1"));
    }
    let init = EmbeddingTable::init(graph.node_ids().to_vec(), dim, seed)?;
    let mut order: Vec<usize> = iterations.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut snapshots = Vec::with_capacity(order.len());
    let mut current = init;
    for &target in &order {
        current = current.iterate(graph, target - current.iteration(), options)?;
        snapshots.push(current.clone());
    }
    Ok(iterations
        .iter()
        .map(|i| snapshots[order.binary_search(i).unwrap()].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cycle() -> TransitionGraph {
        TransitionGraph::build(&[vec![1, 2, 1]]).unwrap()
    }

    #[test]
    fn init_rows_are_unit_norm_and_deterministic() {
        let t = EmbeddingTable::init(vec![1, 2, 3], 4, 7).unwrap();
        assert_eq!(t.len(), 3);
        for i in 0..3 {
            assert!((t.row_norm(i) - 1.0).abs() < 1e-6);
        }
        assert_eq!(t, EmbeddingTable::init(vec![1, 2, 3], 4, 7).unwrap());
    }

    #[test]
    fn init_two_dims_uses_two_value_alphabet() {
        let t = EmbeddingTable::init(vec![1], 2, 0).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        for &x in t.row(0) {
            assert!((x.abs() - h).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(EmbeddingTable::init(vec![1], 1, 0).is_err());
        assert!(EmbeddingTable::init(vec![], 4, 0).is_err());
    }

    #[test]
    fn two_cycle_swaps_in_one_step() {
        let g = two_cycle();
        let t = EmbeddingTable::from_rows(vec![1, 2], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let next = t.iterate(&g, 1, CleoraOptions::default()).unwrap();
        assert_eq!(next.row(0), &[0.0, 1.0]);
        assert_eq!(next.row(1), &[1.0, 0.0]);
        assert_eq!(next.iteration(), 1);
    }

    #[test]
    fn self_loop_is_fixed_point() {
        let g = TransitionGraph::build(&[vec![5, 5]]).unwrap();
        let t = EmbeddingTable::from_rows(vec![5], &[vec![0.3, -0.4, 1.2]]).unwrap();
        let next = t.iterate(&g, 1, CleoraOptions::default()).unwrap();
        assert_eq!(next.row(0), t.row(0));
    }

    #[test]
    fn isolated_node_keeps_vector() {
        let g = TransitionGraph::build(&[vec![1, 2], vec![3]]).unwrap();
        let t = EmbeddingTable::init(g.node_ids().to_vec(), 8, 3).unwrap();
        let next = t.iterate(&g, 2, CleoraOptions::default()).unwrap();
        assert_eq!(next.row(2), t.row(2));
    }

    #[test]
    fn directed_only_leaves_sinks_untouched() {
        let g = TransitionGraph::build(&[vec![1, 2]]).unwrap();
        let t = EmbeddingTable::from_rows(vec![1, 2], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let next = t
            .iterate(
                &g,
                1,
                CleoraOptions {
                    directed_only: true,
                },
            )
            .unwrap();
        assert_eq!(next.row(0), &[0.0, 1.0]);
        assert_eq!(next.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn cancelling_neighbors_keep_previous_vector() {
        // 1 <-> 2 and 1 <-> 3 with opposite embeddings on 2 and 3.
        let g = TransitionGraph::build(&[vec![2, 1, 3]]).unwrap();
        let rows = [vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let t = EmbeddingTable::from_rows(vec![1, 2, 3], &rows).unwrap();
        let next = t.iterate(&g, 1, CleoraOptions::default()).unwrap();
        assert_eq!(next.row(0), t.row(0));
    }

    #[test]
    fn embed_cities_snapshots() {
        let g = two_cycle();
        let tables = embed_cities(&g, 4, &[1, 3], 11, CleoraOptions::default()).unwrap();
        assert_eq!(tables.len(), 2);
        assert_eq!(tables[0].iteration(), 1);
        assert_eq!(tables[1].iteration(), 3);
        let init = EmbeddingTable::init(g.node_ids().to_vec(), 4, 11).unwrap();
        assert_eq!(
            tables[0],
            init.iterate(&g, 1, CleoraOptions::default()).unwrap()
        );

        // Period-two swap: two steps restore the initial rows.
        let two = embed_cities(&g, 4, &[2], 11, CleoraOptions::default()).unwrap();
        assert_eq!(two[0].row(0), init.row(0));
        assert_eq!(two[0].row(1), init.row(1));

        assert!(embed_cities(&g, 4, &[], 0, CleoraOptions::default()).is_err());
        assert!(embed_cities(&g, 4, &[0], 0, CleoraOptions::default()).is_err());
    }

    #[test]
    fn mismatched_graph_is_rejected() {
        let t = EmbeddingTable::init(vec![1, 2, 3], 4, 0).unwrap();
        assert!(t
            .iterate(&two_cycle(), 1, CleoraOptions::default())
            .is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let g = two_cycle();
        let t = &embed_cities(&g, 6, &[1], 5, CleoraOptions::default()).unwrap()[0];
        t.save(&path, 3).unwrap();
        let (back, fp) = EmbeddingTable::load(&path).unwrap();
        assert_eq!((&back, fp), (t, 3));
    }
}
