//! Binary atlas (`SNAT`) and instance-graph (`SNGR`) files.
//!
//! Both share one per-graph layout: vertex count, vertex ingredient ids,
//! vertex weights, edge count, then `(u, v, weight)` triples addressed by
//! ingredient id. Everything is little-endian with `f32` weights.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Edge, GraphKind, IRAtlas, IRGraph};
use crate::binio::{to_u32, BinReader, BinWriter};
use crate::error::{Error, Result};

pub const SNAT_MAGIC: &[u8; 4] = b"SNAT";
pub const SNAT_VERSION: u32 = 1;
pub const SNGR_MAGIC: &[u8; 4] = b"SNGR";
pub const SNGR_VERSION: u32 = 1;

/// An instance graph tagged with its source record.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    pub image_id: u64,
    pub label: u32,
    pub graph: IRGraph,
}

fn write_graph<W: Write>(out: &mut BinWriter<W>, g: &IRGraph) -> Result<()> {
    out.u32(to_u32(g.vertex_count(), "vertex count")?)?;
    let ids = g
        .vertices
        .iter()
        .map(|&v| to_u32(v, "ingredient"))
        .collect::<Result<Vec<_>>>()?;
    out.u32_slice(&ids)?;
    out.f32_slice(&g.weights)?;
    out.u32(to_u32(g.edges.len(), "edge count")?)?;
    for e in &g.edges {
        out.u32(ids[e.a])?;
        out.u32(ids[e.b])?;
        out.f32(e.weight)?;
    }
    Ok(())
}

fn read_graph<R: Read>(inp: &mut BinReader<R>, kind: GraphKind, vocab_size: usize) -> Result<IRGraph> {
    let k = inp.u32()? as usize;
    let vertices: Vec<usize> = inp.u32_vec(k)?.into_iter().map(|v| v as usize).collect();
    if let Some(&v) = vertices.iter().find(|&&v| v >= vocab_size) {
        return Err(Error::IngredientOutOfRange {
            ingredient: v,
            vocab_size,
        });
    }
    let weights = inp.f32_vec(k)?;
    let slot: HashMap<usize, usize> = vertices.iter().enumerate().map(|(s, &v)| (v, s)).collect();
    let m = inp.u32()? as usize;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let u = inp.u32()? as usize;
        let v = inp.u32()? as usize;
        let w = inp.f32()? as f64;
        match (slot.get(&u), slot.get(&v)) {
            (Some(&a), Some(&b)) if a != b => edges.push(Edge::new(a, b, w)),
            _ => return Err(Error::invalid(format!("edge ({u}, {v}) does not join two distinct vertices"))),
        }
    }
    IRGraph::new(kind, vertices, weights, edges)
}

pub fn write_atlas(path: impl AsRef<Path>, atlas: &IRAtlas) -> Result<()> {
    let mut out = BinWriter::new(BufWriter::new(File::create(path)?));
    out.bytes(SNAT_MAGIC)?;
    out.u32(SNAT_VERSION)?;
    out.u32(to_u32(atlas.class_count(), "class count")?)?;
    out.u32(to_u32(atlas.vocab_size, "vocabulary size")?)?;
    out.f32(atlas.delta_t)?;
    for g in &atlas.graphs {
        write_graph(&mut out, g)?;
    }
    out.flush()
}

pub fn read_atlas(path: impl AsRef<Path>) -> Result<IRAtlas> {
    let mut inp = BinReader::new(BufReader::new(File::open(path)?), "SNAT");
    inp.magic(SNAT_MAGIC)?;
    inp.version(SNAT_VERSION)?;
    let c = inp.u32()? as usize;
    let vocab_size = inp.u32()? as usize;
    let delta_t = inp.f32()? as f64;
    let graphs = (0..c)
        .map(|_| read_graph(&mut inp, GraphKind::Category, vocab_size))
        .collect::<Result<_>>()?;
    inp.expect_end()?;
    Ok(IRAtlas {
        graphs,
        delta_t,
        vocab_size,
    })
}

pub fn write_graphs(path: impl AsRef<Path>, vocab_size: usize, graphs: &[LabeledGraph]) -> Result<()> {
    let mut out = BinWriter::new(BufWriter::new(File::create(path)?));
    out.bytes(SNGR_MAGIC)?;
    out.u32(SNGR_VERSION)?;
    out.u32(to_u32(vocab_size, "vocabulary size")?)?;
    out.u32(to_u32(graphs.len(), "graph count")?)?;
    for lg in graphs {
        out.u64(lg.image_id)?;
        out.u32(lg.label)?;
        write_graph(&mut out, &lg.graph)?;
    }
    out.flush()
}

/// Returns the vocabulary size recorded in the file and its graphs.
pub fn read_graphs(path: impl AsRef<Path>) -> Result<(usize, Vec<LabeledGraph>)> {
    let mut inp = BinReader::new(BufReader::new(File::open(path)?), "SNGR");
    inp.magic(SNGR_MAGIC)?;
    inp.version(SNGR_VERSION)?;
    let vocab_size = inp.u32()? as usize;
    let count = inp.u32()? as usize;
    let mut graphs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let image_id = inp.u64()?;
        let label = inp.u32()?;
        let graph = read_graph(&mut inp, GraphKind::Instance, vocab_size)?;
        graphs.push(LabeledGraph { image_id, label, graph });
    }
    inp.expect_end()?;
    Ok((vocab_size, graphs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_exact(g: &IRGraph) -> IRGraph {
        let mut g = g.clone();
        g.weights.iter_mut().for_each(|w| *w = *w as f32 as f64);
        g.edges.iter_mut().for_each(|e| e.weight = e.weight as f32 as f64);
        g
    }

    fn sample() -> IRGraph {
        IRGraph::new(
            GraphKind::Category,
            vec![3, 7, 8],
            vec![0.2, 0.3, 0.5],
            vec![Edge::new(0, 1, 0.25), Edge::new(1, 2, 0.75)],
        )
        .unwrap()
    }

    #[test]
    fn atlas_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.snat");
        let atlas = IRAtlas {
            graphs: vec![f32_exact(&sample()), f32_exact(&IRGraph::new(GraphKind::Category, vec![0], vec![1.0], vec![]).unwrap())],
            delta_t: 0.01f32 as f64,
            vocab_size: 9,
        };
        write_atlas(&path, &atlas).unwrap();
        assert_eq!(read_atlas(&path).unwrap(), atlas);
        let bytes = std::fs::read(&path).unwrap();
        // header + (4 + 12 + 12 + 4 + 24) + (4 + 4 + 4 + 4)
        assert_eq!(bytes.len(), 20 + 56 + 16);
    }

    #[test]
    fn graphs_roundtrip_and_reject_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.sngr");
        let mut g = f32_exact(&sample());
        g.kind = GraphKind::Instance;
        let graphs = vec![LabeledGraph { image_id: 42, label: 1, graph: g }];
        write_graphs(&path, 9, &graphs).unwrap();
        assert_eq!(read_graphs(&path).unwrap(), (9, graphs));
        assert!(matches!(read_atlas(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn out_of_range_vertex_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.sngr");
        let graphs = vec![LabeledGraph { image_id: 0, label: 0, graph: sample() }];
        write_graphs(&path, 8, &graphs).unwrap();
        assert!(matches!(read_graphs(&path), Err(Error::IngredientOutOfRange { ingredient: 8, .. })));
    }

    #[test]
    fn truncated_atlas_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.snat");
        let atlas = IRAtlas { graphs: vec![sample()], delta_t: 0.01, vocab_size: 9 };
        write_atlas(&path, &atlas).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_atlas(&path), Err(Error::Truncated(_))));
    }
}
