//! Dataset directories: `graph.jsonl`, `queries.jsonl` and `embeddings.pxe`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use parallax_core::embedding::EmbeddingStore;
use parallax_core::kg::{annotate_gold, load_queries, KnowledgeGraph, QuerySample, Traversal};
use parallax_core::synth::{split_of, Split};

pub const GRAPH_FILE: &str = "graph.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.pxe";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraversalArg {
    Forward,
    Undirected,
}

impl From<TraversalArg> for Traversal {
    fn from(t: TraversalArg) -> Self {
        match t {
            TraversalArg::Forward => Traversal::Forward,
            TraversalArg::Undirected => Traversal::Undirected,
        }
    }
}

pub struct Dataset {
    pub dir: PathBuf,
    pub graph: KnowledgeGraph,
    pub queries: Vec<QuerySample>,
    pub store: EmbeddingStore,
}

impl Dataset {
    pub fn graph_path(dir: &Path) -> PathBuf {
        dir.join(GRAPH_FILE)
    }

    pub fn queries_path(dir: &Path) -> PathBuf {
        dir.join(QUERIES_FILE)
    }

    pub fn embeddings_path(dir: &Path) -> PathBuf {
        dir.join(EMBEDDINGS_FILE)
    }

    pub fn files(dir: &Path) -> [PathBuf; 3] {
        [Self::graph_path(dir), Self::queries_path(dir), Self::embeddings_path(dir)]
    }

    /// Loads the three files and annotates gold paths.
    pub fn load(dir: &Path, traversal: Traversal) -> Result<Self> {
        let (graph, report) = KnowledgeGraph::load(Self::graph_path(dir))?;
        if report.duplicates > 0 {
            log::warn!("{} duplicate triples dropped", report.duplicates);
        }
        let mut queries = load_queries(Self::queries_path(dir), &graph)?;
        annotate_gold(&graph, &mut queries, traversal);
        let store = EmbeddingStore::read(Self::embeddings_path(dir))
            .with_context(|| format!("loading embeddings from {}", dir.display()))?;
        Ok(Self { dir: dir.to_owned(), graph, queries, store })
    }

    pub fn split(&self, which: SplitArg) -> Vec<&QuerySample> {
        let want = match which {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Dev => Some(Split::Dev),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        };
        self.queries.iter().filter(|q| want.is_none_or(|w| split_of(&q.id) == w)).collect()
    }
}
