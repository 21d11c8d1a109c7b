use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TrainConfig;
use crate::binio::{to_u32, BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::feat2graph::Feat2GraphParams;
use crate::numerics::{gaussian_matrix, streams, Matrix, SeededRng};

pub const SNMP_MAGIC: &[u8; 4] = b"SNMP";
pub const SNMP_VERSION: u32 = 1;

/// Weights of one graph-convolution layer: `d x d` projection plus the
/// LayerNorm gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvLayer {
    pub w: Matrix,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GraphConvLayer {
    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut w = gaussian_matrix(rng, dim, dim);
        w.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        Self {
            w,
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

/// Everything the matcher trains apart from the atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    /// `M x d` table, one embedding per ingredient.
    pub embeddings: Matrix,
    pub layers: Vec<GraphConvLayer>,
    pub mixing: Feat2GraphParams,
    pub seed: u64,
}

impl MatcherParams {
    /// Standard-normal embeddings, `N(0, 1/d)` projections, identity
    /// LayerNorm and mixing scalars at their defaults.
    pub fn init(vocab_size: usize, dim: usize, depth: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("vocabulary size and embedding dimension must be positive"));
        }
        let root = SeededRng::new(seed);
        let embeddings = gaussian_matrix(&mut root.fork(streams::EMBEDDINGS), vocab_size, dim);
        let mut rng = root.fork(streams::GRAPH_CONV);
        let layers = (0..depth).map(|_| GraphConvLayer::init(dim, &mut rng)).collect();
        Ok(Self {
            embeddings,
            layers,
            mixing: Feat2GraphParams::default(),
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// No graph convolution and no CLS term in the vertex weights: the
    /// configuration equivalent to a bag of visual words with a linear
    /// classifier.
    pub fn is_bovw_mode(&self) -> bool {
        self.layers.is_empty() && self.mixing.alpha1 == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w.shape() != (d, d) || layer.gain.len() != d || layer.bias.len() != d {
                return Err(Error::shape(format!("layer {l} does not match embedding dimension {d}")));
            }
        }
        self.mixing.validate()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if vocab_size != self.vocab_size() {
            return Err(Error::FingerprintMismatch(format!(
                "matcher has {} ingredient embeddings, vocabulary has {vocab_size} words",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Clamps the mixing scalars at zero.
    pub fn project_nonnegative(&mut self) {
        let m = &mut self.mixing;
        for v in [&mut m.alpha1, &mut m.alpha2, &mut m.beta1, &mut m.beta2] {
            *v = v.max(0.0);
        }
    }
}

/// Trained parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MatcherParams,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<W> {
        let p = &self.params;
        let c = &self.config;
        let mut out = BinWriter::new(w);
        out.bytes(SNMP_MAGIC)?;
        out.u32(SNMP_VERSION)?;
        out.u32(to_u32(p.vocab_size(), "vocabulary size")?)?;
        out.u32(to_u32(p.dim(), "embedding dimension")?)?;
        out.u32(to_u32(p.depth(), "layer count")?)?;
        out.f32_slice(p.embeddings.as_slice())?;
        for layer in &p.layers {
            out.f32_slice(layer.w.as_slice())?;
            out.f32_slice(&layer.gain)?;
            out.f32_slice(&layer.bias)?;
        }
        let m = &p.mixing;
        out.f32_slice(&[m.alpha1, m.alpha2, m.beta1, m.beta2, m.epsilon])?;
        out.u64(p.seed)?;
        out.u32(to_u32(c.epochs, "epochs")?)?;
        out.u32(to_u32(c.batch_size, "batch size")?)?;
        out.f32_slice(&[c.lr, c.weight_decay, c.min_lr, c.gamma_v, c.gamma_e, c.delta_t])?;
        out.u32(c.bovw_mode as u32)?;
        out.u32(to_u32(c.max_vertices.unwrap_or(0), "max vertices")?)?;
        out.flush()?;
        Ok(out.into_inner())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut inp = BinReader::new(r, "SNMP");
        inp.magic(SNMP_MAGIC)?;
        inp.version(SNMP_VERSION)?;
        let m = inp.u32()? as usize;
        let d = inp.u32()? as usize;
        let depth = inp.u32()? as usize;
        if m == 0 || d == 0 {
            return Err(Error::InvalidHeader(format!("empty embedding table {m}x{d}")));
        }
        let embeddings = Matrix::from_vec(m, d, inp.f32_vec(m * d)?)?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push(GraphConvLayer {
                w: Matrix::from_vec(d, d, inp.f32_vec(d * d)?)?,
                gain: inp.f32_vec(d)?,
                bias: inp.f32_vec(d)?,
            });
        }
        let mix = inp.f32_vec(5)?;
        let seed = inp.u64()?;
        let epochs = inp.u32()? as usize;
        let batch_size = inp.u32()? as usize;
        let scalars = inp.f32_vec(6)?;
        let bovw_mode = inp.u32()? != 0;
        let max_vertices = match inp.u32()? {
            0 => None,
            k => Some(k as usize),
        };
        inp.expect_end()?;
        let params = MatcherParams {
            embeddings,
            layers,
            mixing: Feat2GraphParams {
                alpha1: mix[0],
                alpha2: mix[1],
                beta1: mix[2],
                beta2: mix[3],
                epsilon: mix[4],
            },
            seed,
        };
        params.validate()?;
        let config = TrainConfig {
            epochs,
            batch_size,
            lr: scalars[0],
            weight_decay: scalars[1],
            min_lr: scalars[2],
            gamma_v: scalars[3],
            gamma_e: scalars[4],
            delta_t: scalars[5],
            layers: depth,
            dim: d,
            seed,
            bovw_mode,
            max_vertices,
        };
        Ok(Self { params, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?)).map(|_| ())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
