//! A trainable relevance model: an MTPP encoder, the unwarping network and
//! their shared parameter store, plus checkpoint persistence.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Segment};
use crate::error::{Error, Result};
use crate::mtpp::{EncoderKind, Mtpp, MtppConfig};
use crate::unwarp::{Umnn, UmnnConfig};

/// Which parameters Fisher vectors differentiate with respect to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherMode {
    /// Output-head parameters only.
    #[default]
    Head,
    /// Every MTPP parameter; scoring only, not differentiable in training.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: EncoderKind,
    pub mtpp: MtppConfig,
    pub umnn: UmnnConfig,
    /// Weight of the model-independent similarity in the relevance score.
    pub gamma: f64,
    pub fisher: FisherMode,
    /// When false the unwarping map is fixed to the identity.
    pub unwarp: bool,
}

impl ModelConfig {
    pub fn new(kind: EncoderKind, num_marks: usize) -> Self {
        Self {
            kind,
            mtpp: MtppConfig {
                num_marks,
                ..MtppConfig::default()
            },
            umnn: UmnnConfig::default(),
            gamma: 0.1,
            fisher: FisherMode::Head,
            unwarp: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub config: ModelConfig,
    pub mtpp: Mtpp,
    pub umnn: Umnn,
    pub params: ParamStore,
    /// Optional diagonal `Î^{-1/2}` applied to raw Fisher gradients.
    pub preconditioner: Option<Vec<f64>>,
    pub seeds: BTreeMap<String, u64>,
}

impl RetrievalModel {
    /// Freshly initialized model; `time_scale` rescales times inside both
    /// networks and is usually the largest horizon in the dataset.
    pub fn new(config: ModelConfig, time_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mtpp = Mtpp::new(config.kind, config.mtpp.clone(), time_scale)?;
        let umnn = Umnn::new(config.umnn.clone(), time_scale)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mtpp.init_params(&mut params, &mut rng);
        umnn.init_params(&mut params, &mut rng);
        Ok(Self {
            config,
            mtpp,
            umnn,
            params,
            preconditioner: None,
            seeds: BTreeMap::from([("init".to_string(), seed)]),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind
    }

    pub fn time_scale(&self) -> f64 {
        self.mtpp.time_scale
    }

    /// Flat offsets of every MTPP parameter (everything except the
    /// unwarping network).
    pub fn mtpp_offsets(&self) -> Vec<usize> {
        self.params
            .segments
            .iter()
            .filter(|s| s.name.starts_with("mtpp."))
            .flat_map(|s| s.range())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                config: self.config.clone(),
                time_scale: self.time_scale(),
                seeds: self.seeds.clone(),
                segments: self.params.segments.clone(),
                preconditioner: self.preconditioner.clone(),
            },
            values: self.params.values.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let h = ckpt.header;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format {}",
                h.format
            )));
        }
        let mut model = Self::new(h.config, h.time_scale, 0)?;
        let mut params = ParamStore::new();
        params.segments = h.segments;
        params.values = ckpt.values;
        params.reindex()?;
        if params.segments != model.params.segments {
            return Err(Error::InvalidConfig(
                "checkpoint segment layout does not match its configuration".into(),
            ));
        }
        if let Some(p) = &h.preconditioner {
            let head = model.head_len()?;
            if p.len() != head && p.len() != model.mtpp_offsets().len() {
                return Err(Error::DimensionMismatch {
                    expected: head,
                    got: p.len(),
                });
            }
        }
        model.params = params;
        model.preconditioner = h.preconditioner;
        model.seeds = h.seeds;
        Ok(model)
    }

    /// Number of output-head parameters, the Fisher dimension in head mode.
    pub fn head_len(&self) -> Result<usize> {
        Ok(self.params.span(&crate::mtpp::HEAD_SEGMENTS)?.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_checkpoint())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(ckpt)
    }
}

const CHECKPOINT_FORMAT: &str = "ctesret-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub time_scale: f64,
    pub seeds: BTreeMap<String, u64>,
    pub segments: Vec<Segment>,
    pub preconditioner: Option<Vec<f64>>,
}

/// On-disk model: a JSON header describing the layout and a flat value
/// array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}
