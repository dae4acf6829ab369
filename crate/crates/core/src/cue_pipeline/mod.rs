//! Human-centric cue texts: prompt templates, the VLM client, the cue cache
//! and the text encoder that turns cues into feature matrices.

mod cache;
mod client;
mod encode;
mod generate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::{CueCache, CueRecord};
pub use client::{VlmClient, VlmConfig};
pub use encode::{
    build_text_embedder, embed_mean, encode_cues, encode_tokens_on_tape, init_cue_encoder, tokenize,
    CueEncoderConfig, CueFeatures, BASE_EMBED, PAD_TOKEN,
};
pub use generate::{generate_cues, generate_cues_batch, synthetic_cues, CueSource, CueStats};

#[derive(Debug, thiserror::Error)]
pub enum CueError {
    #[error("unknown cue kind `{0}`")]
    UnknownKind(String),
    #[error("VLM request for `{image_id}` failed after {attempts} attempt(s): {reason}")]
    Request { image_id: String, attempts: usize, reason: String },
    #[error("malformed VLM response for `{image_id}`: {reason}; raw payload: {raw}")]
    MalformedResponse { image_id: String, reason: String, raw: String },
    #[error("no cues available for `{0}`")]
    Missing(String),
    #[error("cue set for `{0}` has an empty text outside fixture mode")]
    EmptyText(String),
    #[error("cue cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("client config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    Participant,
    BodyLanguage,
    Environmental,
}

impl CueKind {
    pub const ALL: [CueKind; 3] = [CueKind::Participant, CueKind::BodyLanguage, CueKind::Environmental];

    pub fn as_str(self) -> &'static str {
        match self {
            CueKind::Participant => "participant",
            CueKind::BodyLanguage => "body_language",
            CueKind::Environmental => "environmental",
        }
    }
}

impl fmt::Display for CueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CueKind {
    type Err = CueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "participant" => Ok(CueKind::Participant),
            "body_language" => Ok(CueKind::BodyLanguage),
            "environmental" => Ok(CueKind::Environmental),
            other => Err(CueError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CuePrompt {
    pub kind: CueKind,
    pub template: String,
    pub version: u32,
}

#[derive(Deserialize)]
struct TemplateFile {
    version: u32,
    participant: String,
    body_language: String,
    environmental: String,
}

const PROMPTS: &str = include_str!("../../assets/prompts_v1.json");

/// The fixed prompt template for one cue kind.
pub fn build_prompt(kind: CueKind) -> CuePrompt {
    let file: TemplateFile = serde_json::from_str(PROMPTS).expect("bundled prompt templates parse");
    let template = match kind {
        CueKind::Participant => file.participant,
        CueKind::BodyLanguage => file.body_language,
        CueKind::Environmental => file.environmental,
    };
    CuePrompt { kind, template, version: file.version }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Live,
    Cache,
    Fixture,
}

/// The three generated texts for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueSet {
    pub image_id: String,
    pub participant: String,
    pub body_language: String,
    pub environmental: String,
    pub provenance: Provenance,
}

impl CueSet {
    pub fn text(&self, kind: CueKind) -> &str {
        match kind {
            CueKind::Participant => &self.participant,
            CueKind::BodyLanguage => &self.body_language,
            CueKind::Environmental => &self.environmental,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        CueKind::ALL.iter().any(|k| self.text(*k).trim().is_empty())
    }

    pub fn validate(&self) -> Result<(), CueError> {
        if self.is_degenerate() && self.provenance != Provenance::Fixture {
            return Err(CueError::EmptyText(self.image_id.clone()));
        }
        Ok(())
    }
}

const BEDROOM_GIRL: &str = include_str!("../../assets/cues/bedroom_girl.json");

/// Bundled example cues for a girl sitting in a bedroom with a tablet.
pub fn bedroom_girl_cues() -> CueSet {
    let rec: CueRecord = serde_json::from_str(BEDROOM_GIRL).expect("bundled cues parse");
    rec.into_cue_set("bedroom_girl", Provenance::Fixture)
}

#[cfg(test)]
mod tests;
