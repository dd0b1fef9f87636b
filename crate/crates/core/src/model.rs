//! The full model bundle: vocabulary, base LM and optional Tok/Detok, all
//! sharing one parameter store.

use crate::detok::{Detok, DetokConfig};
use crate::error::{Error, Result};
use crate::lm::{BaseLm, ModelConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tok::{CharVocabulary, Tok, TokConfig};
use crate::tokenizer::Vocabulary;

/// Training history of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    /// First pre-training only.
    Base,
    /// Continued LM training on the second corpus without Tok/Detok.
    LmContinued,
    /// Second pre-training with Tok and Detok.
    TokDetok,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::LmContinued => "lm_continued",
            Stage::TokDetok => "tokdetok",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BundleConfig {
    pub lm: ModelConfig,
    pub tok: Option<TokConfig>,
    pub detok: Option<DetokConfig>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub config: BundleConfig,
    pub stage: Stage,
    pub vocab: Vocabulary,
    pub chars: CharVocabulary,
    pub store: ParamStore,
    pub lm: BaseLm,
    pub tok: Option<Tok>,
    pub detok: Option<Detok>,
}

impl Bundle {
    /// Freshly initialised base model (no Tok/Detok).
    pub fn new_base(vocab: Vocabulary, lm: ModelConfig, seed: u64) -> Result<Self> {
        if lm.vocab_size != vocab.len() {
            return Err(Error::InvalidConfig {
                field: "vocab_size",
                reason: alloc::format!("{} != vocabulary size {}", lm.vocab_size, vocab.len()),
            });
        }
        let mut store = ParamStore::new();
        let base = BaseLm::init(lm.clone(), &mut store, &mut rng::substream(seed, "init.lm"))?;
        let chars = CharVocabulary::new(vocab.char_inventory().iter().copied());
        Ok(Self {
            config: BundleConfig {
                lm,
                tok: None,
                detok: None,
            },
            stage: Stage::Base,
            vocab,
            chars,
            store,
            lm: base,
            tok: None,
            detok: None,
        })
    }

    /// Adds freshly initialised Tok and Detok unless already present.
    pub fn attach_tokdetok(&mut self, tok: TokConfig, detok: DetokConfig, seed: u64) -> Result<()> {
        if self.tok.is_some() {
            return Ok(());
        }
        let d = self.config.lm.d;
        let t = Tok::init(
            tok.clone(),
            self.chars.len(),
            d,
            &mut self.store,
            &mut rng::substream(seed, "init.tok"),
        )?;
        let dt = Detok::init(
            detok.clone(),
            d,
            t.chars,
            &mut self.store,
            &mut rng::substream(seed, "init.detok"),
        )?;
        self.config.tok = Some(tok);
        self.config.detok = Some(detok);
        self.tok = Some(t);
        self.detok = Some(dt);
        Ok(())
    }

    /// Rebinds components to a loaded parameter store.
    pub fn from_parts(
        config: BundleConfig,
        stage: Stage,
        vocab: Vocabulary,
        store: ParamStore,
    ) -> Result<Self> {
        if config.lm.vocab_size != vocab.len() {
            return Err(Error::ManifestMismatch(alloc::format!(
                "model expects {} tokens, vocabulary has {}",
                config.lm.vocab_size,
                vocab.len()
            )));
        }
        let chars = CharVocabulary::new(vocab.char_inventory().iter().copied());
        let lm = BaseLm::bind(config.lm.clone(), &store)?;
        let d = config.lm.d;
        let tok = match &config.tok {
            Some(c) => Some(Tok::bind(c.clone(), chars.len(), d, &store)?),
            None => None,
        };
        let detok = match (&config.detok, &tok) {
            (Some(c), Some(t)) => Some(Detok::bind(c.clone(), d, t.chars, &store)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::ManifestMismatch("detok without tok".into()));
            }
        };
        Ok(Self {
            config,
            stage,
            vocab,
            chars,
            store,
            lm,
            tok,
            detok,
        })
    }

    pub fn tok(&self) -> Result<&Tok> {
        self.tok
            .as_ref()
            .ok_or(Error::MissingParam("tok.* (checkpoint has no Tok)".into()))
    }

    pub fn detok(&self) -> Result<&Detok> {
        self.detok
            .as_ref()
            .ok_or(Error::MissingParam("detok.* (checkpoint has no Detok)".into()))
    }
}
