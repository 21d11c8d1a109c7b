use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::forward::{embed_graph, PreparedAtlas};
use super::{Checkpoint, EpochStats, MatcherParams, TrainConfig};
use crate::atlas::{read_atlas, write_atlas, IRAtlas, IRGraph};
use crate::error::{Error, Result};
use crate::feat2graph::feat2graph;
use crate::feature_io::FeatureRecord;
use crate::vocabulary::VisualVocabulary;

pub const CHECKPOINT_FILE: &str = "model.snmp";
pub const ATLAS_FILE: &str = "atlas.snat";
pub const VOCAB_FILE: &str = "vocab.snvw";
pub const HISTORY_FILE: &str = "history.json";

/// A trained matcher with its atlas and vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: MatcherParams,
    pub atlas: IRAtlas,
    pub vocab: VisualVocabulary,
    pub config: TrainConfig,
}

impl Model {
    pub fn new(params: MatcherParams, atlas: IRAtlas, vocab: VisualVocabulary, config: TrainConfig) -> Result<Self> {
        params.check_vocab(vocab.size())?;
        if atlas.vocab_size != vocab.size() {
            return Err(Error::FingerprintMismatch(format!(
                "atlas built over {} words, vocabulary has {}",
                atlas.vocab_size,
                vocab.size()
            )));
        }
        atlas.validate()?;
        Ok(Self {
            params,
            atlas,
            vocab,
            config,
        })
    }

    pub fn class_count(&self) -> usize {
        self.atlas.class_count()
    }

    pub fn prepare(&self) -> Result<PreparedAtlas> {
        PreparedAtlas::new(&self.atlas, &self.params)
    }

    pub fn instance_graph(&self, rec: &FeatureRecord) -> Result<IRGraph> {
        feat2graph(rec, &self.vocab, &self.params.mixing)
    }

    pub fn logits(&self, rec: &FeatureRecord) -> Result<Vec<f64>> {
        self.logits_with(&self.prepare()?, rec)
    }

    pub fn logits_with(&self, prepared: &PreparedAtlas, rec: &FeatureRecord) -> Result<Vec<f64>> {
        let emb = embed_graph(&self.instance_graph(rec)?, &self.params)?;
        Ok(prepared.logits(&emb.z))
    }

    /// Logits for many records in parallel, in input order.
    pub fn batch_logits(&self, records: &[FeatureRecord]) -> Result<Vec<Vec<f64>>> {
        let prepared = self.prepare()?;
        records.par_iter().map(|r| self.logits_with(&prepared, r)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        Checkpoint {
            params: self.params.clone(),
            config: self.config.clone(),
        }
        .save(dir.join(CHECKPOINT_FILE))?;
        write_atlas(dir.join(ATLAS_FILE), &self.atlas)?;
        self.vocab.save(dir.join(VOCAB_FILE))
    }

    pub fn save_history(dir: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
        let text = serde_json::to_string_pretty(history)?;
        fs::write(dir.as_ref().join(HISTORY_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ck = Checkpoint::load(dir.join(CHECKPOINT_FILE))?;
        let atlas = read_atlas(dir.join(ATLAS_FILE))?;
        let vocab = VisualVocabulary::load(dir.join(VOCAB_FILE))?;
        Self::new(ck.params, atlas, vocab, ck.config)
    }
}
