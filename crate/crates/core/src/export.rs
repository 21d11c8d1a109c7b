//! Text export of graph and atlas files for external renderers: Graphviz DOT
//! and a JSON mirror of the binary layout.
//!
//! JSON numbers carry 9 significant digits of the `f32` value stored on disk,
//! so parsing a document and rounding back to `f32` reproduces the file
//! exactly. Keys are always written in the same order.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Deserialize;

use crate::atlas::{Edge, GraphKind, IRAtlas, IRGraph, LabeledGraph};
use crate::error::{Error, Result};

/// The contents of a graph (`SNGR`) or atlas (`SNAT`) file.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphDocument {
    Graphs { vocab_size: usize, graphs: Vec<LabeledGraph> },
    Atlas(IRAtlas),
}

fn num(x: f64) -> String {
    format!("{:.8e}", x as f32)
}

/// Graphviz text for one graph: one node per vertex labeled with its
/// ingredient id and weight, one line per edge.
pub fn graph_to_dot(g: &IRGraph, name: &str) -> String {
    let mut s = String::new();
    writeln!(s, "graph \"{}\" {{", name.replace('"', "\\\"")).unwrap();
    for (&v, &w) in g.vertices.iter().zip(&g.weights) {
        writeln!(s, "  n{v} [label=\"{v}\\n{w:.4}\"];").unwrap();
    }
    for e in &g.edges {
        writeln!(
            s,
            "  n{} -- n{} [label=\"{:.4}\"];",
            g.vertices[e.a], g.vertices[e.b], e.weight
        )
        .unwrap();
    }
    s.push_str("}\n");
    s
}

fn graph_body(s: &mut String, g: &IRGraph) {
    s.push_str("\"vertices\": [");
    for (i, (&v, &w)) in g.vertices.iter().zip(&g.weights).enumerate() {
        let sep = if i == 0 { "" } else { "," };
        write!(s, "{sep}\n        {{\"id\": {v}, \"weight\": {}}}", num(w)).unwrap();
    }
    s.push_str(if g.vertices.is_empty() { "], " } else { "\n      ], " });
    s.push_str("\"edges\": [");
    for (i, e) in g.edges.iter().enumerate() {
        let sep = if i == 0 { "" } else { "," };
        write!(
            s,
            "{sep}\n        {{\"u\": {}, \"v\": {}, \"weight\": {}}}",
            g.vertices[e.a],
            g.vertices[e.b],
            num(e.weight)
        )
        .unwrap();
    }
    s.push_str(if g.edges.is_empty() { "]" } else { "\n      ]" });
}

impl GraphDocument {
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        match self {
            GraphDocument::Graphs { vocab_size, graphs } => {
                write!(s, "  \"format\": \"SNGR\",\n  \"vocab_size\": {vocab_size},\n  \"graphs\": [").unwrap();
                for (i, lg) in graphs.iter().enumerate() {
                    s.push_str(if i == 0 { "\n" } else { ",\n" });
                    write!(s, "    {{\"image_id\": {}, \"label\": {}, ", lg.image_id, lg.label).unwrap();
                    graph_body(&mut s, &lg.graph);
                    s.push('}');
                }
            }
            GraphDocument::Atlas(atlas) => {
                write!(
                    s,
                    "  \"format\": \"SNAT\",\n  \"vocab_size\": {},\n  \"delta_t\": {},\n  \"classes\": [",
                    atlas.vocab_size,
                    num(atlas.delta_t)
                )
                .unwrap();
                for (c, g) in atlas.graphs.iter().enumerate() {
                    s.push_str(if c == 0 { "\n" } else { ",\n" });
                    write!(s, "    {{\"class\": {c}, ").unwrap();
                    graph_body(&mut s, g);
                    s.push('}');
                }
            }
        }
        s.push_str("\n  ]\n}\n");
        s
    }

    /// Parses [`GraphDocument::to_json`] output; weights are rounded to `f32`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DocJson = serde_json::from_str(text)?;
        match doc.format.as_str() {
            "SNGR" => {
                let graphs = doc
                    .graphs
                    .into_iter()
                    .map(|g| {
                        Ok(LabeledGraph {
                            image_id: g.image_id.ok_or_else(|| Error::invalid("graph without image_id"))?,
                            label: g.label.ok_or_else(|| Error::invalid("graph without label"))?,
                            graph: g.into_graph(GraphKind::Instance, doc.vocab_size)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(GraphDocument::Graphs {
                    vocab_size: doc.vocab_size,
                    graphs,
                })
            }
            "SNAT" => {
                let mut graphs = Vec::with_capacity(doc.classes.len());
                for (c, g) in doc.classes.into_iter().enumerate() {
                    if g.class != Some(c) {
                        return Err(Error::invalid(format!("class entries out of order at position {c}")));
                    }
                    graphs.push(g.into_graph(GraphKind::Category, doc.vocab_size)?);
                }
                let atlas = IRAtlas {
                    graphs,
                    delta_t: doc.delta_t.ok_or_else(|| Error::invalid("atlas without delta_t"))? as f32 as f64,
                    vocab_size: doc.vocab_size,
                };
                atlas.validate()?;
                Ok(GraphDocument::Atlas(atlas))
            }
            other => Err(Error::invalid(format!("unknown document format {other:?}"))),
        }
    }

    /// All graphs with display names, in file order.
    pub fn named_graphs(&self) -> Vec<(String, &IRGraph)> {
        match self {
            GraphDocument::Graphs { graphs, .. } => graphs
                .iter()
                .map(|lg| (format!("image_{}", lg.image_id), &lg.graph))
                .collect(),
            GraphDocument::Atlas(atlas) => atlas
                .graphs
                .iter()
                .enumerate()
                .map(|(c, g)| (format!("class_{c}"), g))
                .collect(),
        }
    }

    /// DOT text for every graph, one `graph` block each.
    pub fn to_dot(&self) -> String {
        self.named_graphs().into_iter().map(|(name, g)| graph_to_dot(g, &name)).collect()
    }

    /// The document restricted to the graph at `index` (class index for atlases).
    pub fn select(&self, index: usize) -> Result<Self> {
        let out_of_range = |len: usize| Error::invalid(format!("index {index} out of range for {len} graphs"));
        match self {
            GraphDocument::Graphs { vocab_size, graphs } => Ok(GraphDocument::Graphs {
                vocab_size: *vocab_size,
                graphs: vec![graphs.get(index).ok_or_else(|| out_of_range(graphs.len()))?.clone()],
            }),
            GraphDocument::Atlas(atlas) => {
                let g = atlas.graphs.get(index).ok_or_else(|| out_of_range(atlas.graphs.len()))?;
                Ok(GraphDocument::Atlas(IRAtlas {
                    graphs: vec![g.clone()],
                    ..atlas.clone()
                }))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocJson {
    format: String,
    vocab_size: usize,
    #[serde(default)]
    delta_t: Option<f64>,
    #[serde(default)]
    graphs: Vec<GraphJson>,
    #[serde(default)]
    classes: Vec<GraphJson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    #[serde(default)]
    image_id: Option<u64>,
    #[serde(default)]
    label: Option<u32>,
    #[serde(default)]
    class: Option<usize>,
    vertices: Vec<VertexJson>,
    edges: Vec<EdgeJson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VertexJson {
    id: usize,
    weight: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeJson {
    u: usize,
    v: usize,
    weight: f64,
}

impl GraphJson {
    fn into_graph(self, kind: GraphKind, vocab_size: usize) -> Result<IRGraph> {
        let slot: HashMap<usize, usize> = self.vertices.iter().enumerate().map(|(s, v)| (v.id, s)).collect();
        if let Some(v) = self.vertices.iter().find(|v| v.id >= vocab_size) {
            return Err(Error::IngredientOutOfRange {
                ingredient: v.id,
                vocab_size,
            });
        }
        let lookup = |id: usize| {
            slot.get(&id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("edge endpoint {id} is not a vertex")))
        };
        let edges = self
            .edges
            .iter()
            .map(|e| Ok(Edge::new(lookup(e.u)?, lookup(e.v)?, e.weight as f32 as f64)))
            .collect::<Result<Vec<_>>>()?;
        IRGraph::new(
            kind,
            self.vertices.iter().map(|v| v.id).collect(),
            self.vertices.iter().map(|v| v.weight as f32 as f64).collect(),
            edges,
        )
    }
}
