use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Registered fallback tokenizers used when a backend reports no usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    /// Counts maximal runs of non-whitespace characters.
    #[default]
    Whitespace,
}

impl Tokenizer {
    pub fn from_id(id: &str) -> Result<Self, ConfigError> {
        match id {
            "whitespace" => Ok(Tokenizer::Whitespace),
            other => Err(ConfigError::UnknownTokenizer(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Tokenizer::Whitespace => "whitespace",
        }
    }

    pub fn count(&self, text: &str) -> u64 {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count() as u64,
        }
    }
}

pub fn count_tokens(text: &str, tokenizer_id: &str) -> Result<u64, ConfigError> {
    Ok(Tokenizer::from_id(tokenizer_id)?.count(text))
}

/// Lowercased maximal alphanumeric runs; the token notion used by the mock
/// recommender's overlap scoring.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
}
