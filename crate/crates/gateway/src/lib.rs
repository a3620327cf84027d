//! Grounded question answering over retrieved triples: prompt construction,
//! an OpenAI-compatible chat-completions client, answer parsing and a local
//! mock endpoint for offline evaluation.

pub mod client;
pub mod mock;
pub mod prompt;

pub use client::{answer_all, parse_answers, AnswerOutcome, Client, EndpointConfig, Transcript};
pub use mock::{Failure, MockMode, MockServer};
pub use prompt::{build_prompt, Decoding, PromptBundle, PromptTemplate, DEFAULT_TOP_K};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("template: {0}")]
    Template(String),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, GatewayError>;
