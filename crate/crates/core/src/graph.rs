//! Directed, weighted city-transition graph.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::error::{Error, Result};
use crate::CityId;

/// Leading bytes of the artifact file.
pub const MAGIC: &[u8; 8] = b"TSKGRAPH";

/// Cities re-indexed densely in ascending id order, with parallel transitions
/// collapsed into one edge whose weight is the transition count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionGraph {
    node_ids: Vec<CityId>,
    index: HashMap<CityId, usize>,
    /// Sorted by `(src, dst)`.
    edges: Vec<(usize, usize, u64)>,
    out_adj: Vec<Vec<(usize, u64)>>,
    in_adj: Vec<Vec<(usize, u64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegreeStats {
    pub nodes: usize,
    pub edges: usize,
    pub total_weight: u64,
    pub max_out_degree: usize,
    pub mean_out_degree: f64,
}

impl TransitionGraph {
    /// Counts each consecutive pair within every trip. Trips of length one
    /// contribute a node only; self-transitions are kept as self-loops.
    pub fn build<T: AsRef<[CityId]>>(trips: &[T]) -> Result<Self> {
        if trips.is_empty() {
            return Err(Error::NoData("empty trip list"));
        }
        let mut weights: BTreeMap<(CityId, CityId), u64> = BTreeMap::new();
        let mut ids = Vec::new();
        for trip in trips {
            let trip = trip.as_ref();
            if trip.is_empty() {
                return Err(Error::invalid("trips", "trip with no cities"));
            }
            ids.extend_from_slice(trip);
            for pair in trip.windows(2) {
                *weights.entry((pair[0], pair[1])).or_default() += 1;
            }
        }
        ids.sort_unstable();
        ids.dedup();
        let index: HashMap<CityId, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let edges = weights
            .into_iter()
            .map(|((s, d), w)| (index[&s], index[&d], w))
            .collect();
        Ok(Self::from_parts(ids, index, edges))
    }

    fn from_parts(
        node_ids: Vec<CityId>,
        index: HashMap<CityId, usize>,
        mut edges: Vec<(usize, usize, u64)>,
    ) -> Self {
        edges.sort_unstable();
        let n = node_ids.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(s, d, w) in &edges {
            out_adj[s].push((d, w));
            in_adj[d].push((s, w));
        }
        TransitionGraph {
            node_ids,
            index,
            edges,
            out_adj,
            in_adj,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> &[CityId] {
        &self.node_ids
    }

    pub fn index_of(&self, city: CityId) -> Option<usize> {
        self.index.get(&city).copied()
    }

    pub fn edges(&self) -> &[(usize, usize, u64)] {
        &self.edges
    }

    pub fn weight(&self, src: CityId, dst: CityId) -> u64 {
        match (self.index_of(src), self.index_of(dst)) {
            (Some(s), Some(d)) => self.out_adj[s]
                .iter()
                .find(|&&(n, _)| n == d)
                .map_or(0, |&(_, w)| w),
            _ => 0,
        }
    }

    pub fn out_neighbors(&self, node: usize) -> &[(usize, u64)] {
        &self.out_adj[node]
    }

    pub fn in_neighbors(&self, node: usize) -> &[(usize, u64)] {
        &self.in_adj[node]
    }

    /// Neighborhood used for embedding propagation, sorted by neighbor index.
    ///
    /// With `directed_only`, only out-neighbors count. Otherwise in- and
    /// out-weights are summed per neighbor.
    pub fn neighborhood(&self, node: usize, directed_only: bool) -> Vec<(usize, u64)> {
        if directed_only {
            return self.out_adj[node].clone();
        }
        let (out, inn) = (&self.out_adj[node], &self.in_adj[node]);
        let mut merged = Vec::with_capacity(out.len() + inn.len());
        let (mut i, mut j) = (0, 0);
        while i < out.len() || j < inn.len() {
            match (out.get(i), inn.get(j)) {
                (Some(&(a, wa)), Some(&(b, wb))) if a == b => {
                    merged.push((a, wa + wb));
                    i += 1;
                    j += 1;
                }
                (Some(&(a, wa)), Some(&(b, _))) if a < b => {
                    merged.push((a, wa));
                    i += 1;
                }
                (Some(_), Some(&(b, wb))) => {
                    merged.push((b, wb));
                    j += 1;
                }
                (Some(&(a, wa)), None) => {
                    merged.push((a, wa));
                    i += 1;
                }
                (None, Some(&(b, wb))) => {
                    merged.push((b, wb));
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        merged
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let nodes = self.node_count();
        let max_out_degree = self.out_adj.iter().map(Vec::len).max().unwrap_or(0);
        DegreeStats {
            nodes,
            edges: self.edge_count(),
            total_weight: self.edges.iter().map(|e| e.2).sum(),
            max_out_degree,
            mean_out_degree: if nodes == 0 {
                0.0
            } else {
                self.edge_count() as f64 / nodes as f64
            },
        }
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        let mut w = ArtifactWriter::create(path, MAGIC, fingerprint)?;
        w.u64(self.node_count() as u64)?;
        w.u64(self.edge_count() as u64)?;
        for &id in &self.node_ids {
            w.u64(id)?;
        }
        for &(s, d, wt) in &self.edges {
            w.u32(s as u32)?;
            w.u32(d as u32)?;
            w.u64(wt)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let mut r = ArtifactReader::open(path, MAGIC)?;
        let fp = r.header.fingerprint;
        let v = r.len(u32::MAX as u64)?;
        let e = r.len(u32::MAX as u64)?;
        let node_ids = (0..v).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let index: HashMap<CityId, usize> =
            node_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if index.len() != v {
            return Err(Error::Format("duplicate node id".into()));
        }
        let mut edges = Vec::with_capacity(e);
        for _ in 0..e {
            let (s, d, wt) = (r.u32()? as usize, r.u32()? as usize, r.u64()?);
            if s >= v || d >= v || wt == 0 {
                return Err(Error::Format(format!("bad edge ({s},{d},{wt})")));
            }
            edges.push((s, d, wt));
        }
        r.expect_eof()?;
        Ok((Self::from_parts(node_ids, index, edges), fp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: CityId = 1;
    const B: CityId = 2;
    const C: CityId = 3;

    #[test]
    fn counts_consecutive_pairs() {
        let g = TransitionGraph::build(&[vec![A, B, C], vec![A, B]]).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.weight(A, B), 2);
        assert_eq!(g.weight(B, C), 1);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn single_city_trip_is_node_only() {
        let g = TransitionGraph::build(&[vec![A]]).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (1, 0));
        assert_eq!(g.degree_stats().edges, 0);
    }

    #[test]
    fn keeps_self_loops() {
        let g = TransitionGraph::build(&[vec![A, A, B]]).unwrap();
        assert_eq!(g.weight(A, A), 1);
        assert_eq!(g.weight(A, B), 1);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn degree_stats_counts() {
        let g = TransitionGraph::build(&[vec![A, B, C]]).unwrap();
        let s = g.degree_stats();
        assert_eq!((s.nodes, s.edges), (3, 2));
        assert_eq!(s.max_out_degree, 1);

        let g = TransitionGraph::build(&[vec![A, B], vec![A, B]]).unwrap();
        let s = g.degree_stats();
        assert_eq!((s.nodes, s.edges, s.total_weight), (2, 1, 2));
    }

    #[test]
    fn rejects_empty_input() {
        let none: [Vec<CityId>; 0] = [];
        assert!(matches!(
            TransitionGraph::build(&none),
            Err(Error::NoData(_))
        ));
        assert!(TransitionGraph::build(&[Vec::<CityId>::new()]).is_err());
    }

    #[test]
    fn symmetrized_neighborhood_merges_weights() {
        let g = TransitionGraph::build(&[vec![A, B, A, C]]).unwrap();
        let a = g.index_of(A).unwrap();
        // A->B (1), B->A (1), A->C (1)
        assert_eq!(g.neighborhood(a, false), vec![(1, 2), (2, 1)]);
        assert_eq!(g.neighborhood(a, true), vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let g = TransitionGraph::build(&[vec![10, 20, 30, 10], vec![20, 20]]).unwrap();
        g.save(&path, 99).unwrap();
        let (back, fp) = TransitionGraph::load(&path).unwrap();
        assert_eq!(fp, 99);
        assert_eq!(back, g);
    }
}
