//! The full network: encoder, proposer, regressor and head over one
//! parameter store.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::config::{AblationConfig, EmbeddingConfig, ModelConfig};
use crate::encoder::{ContextualStore, Encoder, WordVectors};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Var};
use crate::predictor::{decode, Head, HeadOutput, PredictedEntity, ProposalDistributions};
use crate::proposer::{Proposals, Proposer};
use crate::regressor::{LayerTrace, Regressor};
use crate::vocab::{IndexedSentence, Vocabularies};

/// Everything needed to rebuild the architecture. `embeddings.word_dim`
/// holds the resolved word width and `contextual_dim` the contextual width
/// (0 when that channel is off).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub embeddings: EmbeddingConfig,
    pub ablation: AblationConfig,
    pub contextual_dim: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub vocab: Vocabularies,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub proposer: Proposer,
    pub regressor: Regressor,
    pub head: Head,
}

/// Graph nodes of one sentence's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Encoder output `[L, d]`.
    pub h: Var,
    pub proposals: Proposals,
    pub refined: Proposals,
    pub trace: Vec<LayerTrace>,
    pub head: HeadOutput,
}

impl Model {
    /// Build a freshly initialised model. `word_vectors` seeds the word
    /// table; `contextual` supplies the contextual channel when enabled.
    pub fn new(
        mut spec: ModelSpec,
        vocab: Vocabularies,
        seed: u64,
        word_vectors: Option<&WordVectors>,
        contextual: Option<Arc<ContextualStore>>,
    ) -> Result<Self> {
        spec.model.validate()?;
        spec.embeddings.validate()?;
        if let Some(wv) = word_vectors {
            spec.embeddings.word_dim = wv.dim;
        }
        if let Some(c) = &contextual {
            if spec.contextual_dim == 0 {
                spec.contextual_dim = c.dim();
            }
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let classes = vocab.types.num_classes();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            &spec.model,
            &spec.embeddings,
            &vocab,
            word_vectors,
            spec.contextual_dim,
            contextual,
        )?;
        let proposer = Proposer::new(&mut store, &mut rng, &spec.model, classes, spec.ablation.backward_block)?;
        let regressor = Regressor::new(&mut store, &mut rng, &spec.model, classes, spec.ablation)?;
        let head = Head::new(&mut store, &mut rng, &spec.model, classes)?;
        Ok(Model {
            spec,
            vocab,
            store,
            encoder,
            proposer,
            regressor,
            head,
        })
    }

    pub fn none_id(&self) -> usize {
        self.vocab.types.none_id()
    }

    /// Attach (or replace) contextual vectors, e.g. after loading a checkpoint.
    pub fn set_contextual(&mut self, store: Option<Arc<ContextualStore>>) -> Result<()> {
        if let Some(s) = &store {
            if s.dim() != self.spec.contextual_dim && !s.is_empty() {
                return Err(Error::Data(format!(
                    "contextual vectors have width {}, model expects {}",
                    s.dim(),
                    self.spec.contextual_dim
                )));
            }
        }
        self.encoder.emb.contextual = store;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, s: &IndexedSentence) -> Result<ForwardOutput> {
        let h = self.encoder.encode_sentence(g, s)?;
        let proposals = self.proposer.propose(g, h)?;
        let (refined, trace) = self.regressor.regress(g, proposals)?;
        let head = self.head.apply(g, refined, h)?;
        Ok(ForwardOutput {
            h,
            proposals,
            refined,
            trace,
            head,
        })
    }

    pub fn distributions(&self, s: &IndexedSentence) -> Result<Vec<ProposalDistributions>> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, s)?;
        Ok(out.head.values(&g))
    }

    pub fn predict(&self, s: &IndexedSentence) -> Result<Vec<PredictedEntity>> {
        Ok(decode(&self.distributions(s)?, self.none_id()))
    }
}
