//! Search environment and model backends.

mod backend;
mod retriever;

use serde::{Deserialize, Serialize};

pub use backend::{
    truncate_at_stop, BackendError, ContextPredicate, HttpChatBackend, HttpChatConfig, PolicyBackend,
    ScriptEntry, ScriptedBackend,
};
pub use retriever::{
    build_index, load_corpus, tokenize, CorpusError, Document, HttpRetriever, HttpRetrieverConfig,
    LexicalIndex, RankerParams, RetrieveError, Retriever,
};

/// Default number of passages returned per search.
pub const DEFAULT_TOP_K: usize = 3;

/// One retrieved passage. Higher scores are better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub score: f64,
}

impl Passage {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>, score: f64) -> Self {
        Passage { doc_id: doc_id.into(), title: title.into(), text: text.into(), score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatTurn { role: Role::Assistant, content: content.into() }
    }
}
