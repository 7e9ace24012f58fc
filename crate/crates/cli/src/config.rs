//! The engine configuration file (TOML). Every field has a default, so an
//! empty file is valid; command-line flags override individual values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atr_core::firststage::{DEFAULT_DIM, DEFAULT_TOP_N};
use atr_core::losses::LossWeights;
use atr_core::preprocess::{DEFAULT_MAX_TABLE_TOKENS, DEFAULT_SPLIT_RATIO};
use atr_core::rerank::{RerankStrategy, WindowConfig};
use atr_core::scorer::{DEFAULT_MAX_SEQUENCE_TOKENS, DEFAULT_RETRIES};
use serde::Deserialize;

pub const ENDPOINT_ENV: &str = "ATR_SCORER_ENDPOINT";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub paths: Paths,
    pub first_stage: FirstStage,
    pub rerank: RerankSection,
    pub scorer: ScorerSection,
    pub loss: LossSection,
    pub preprocess: PreprocessSection,
    /// Worker threads for per-query stages; defaults to available parallelism.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hashed,
    File,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstStage {
    pub provider: ProviderKind,
    pub dim: usize,
    pub top_n: usize,
}

impl Default for FirstStage {
    fn default() -> Self {
        FirstStage {
            provider: ProviderKind::Hashed,
            dim: DEFAULT_DIM,
            top_n: DEFAULT_TOP_N,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSection {
    /// `spider`, `bird` or `spider2`; explicit sizes take precedence.
    pub preset: Option<String>,
    pub window_size: Option<usize>,
    pub retention_size: Option<usize>,
    pub strategy: RerankStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    pub mock_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub max_sequence_tokens: usize,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for ScorerSection {
    fn default() -> Self {
        ScorerSection {
            kind: ScorerKind::Mock,
            mock_path: None,
            endpoint: None,
            max_sequence_tokens: DEFAULT_MAX_SEQUENCE_TOKENS,
            retries: DEFAULT_RETRIES,
            backoff_ms: 200,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            alpha: w.alpha,
            beta: w.beta,
            lambda: w.lambda_rc,
            gamma: w.gamma_sg,
            margin: w.margin,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda_rc: self.lambda,
            gamma_sg: self.gamma,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub max_table_tokens: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            max_table_tokens: DEFAULT_MAX_TABLE_TOKENS,
            split_ratio: DEFAULT_SPLIT_RATIO,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Window sizes after applying the preset and explicit overrides.
    pub fn window(&self) -> Result<WindowConfig> {
        let base = match &self.rerank.preset {
            Some(name) => WindowConfig::preset(name)
                .with_context(|| format!("rerank.preset: unknown preset `{name}` (spider, bird, spider2)"))?,
            None => WindowConfig::default(),
        };
        let w = self.rerank.window_size.unwrap_or(base.window_size);
        let r = self.rerank.retention_size.unwrap_or(base.retention_size);
        if w == 0 {
            bail!("rerank.window_size must be positive");
        }
        if r == 0 {
            bail!("rerank.retention_size must be positive");
        }
        if r >= w {
            bail!("rerank.retention_size ({r}) must be smaller than rerank.window_size ({w})");
        }
        Ok(WindowConfig::new(w, r)?)
    }

    /// Remote endpoint: the environment variable wins over the file.
    pub fn endpoint(&self) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.scorer.endpoint.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.first_stage.top_n == 0 {
            bail!("first_stage.top_n must be at least 1");
        }
        if self.first_stage.dim == 0 {
            bail!("first_stage.dim must be positive");
        }
        let ratio = self.preprocess.split_ratio;
        if !(ratio > 0.0 && ratio < 1.0) {
            bail!("preprocess.split_ratio must lie strictly between 0 and 1, got {ratio}");
        }
        if self.scorer.max_sequence_tokens == 0 {
            bail!("scorer.max_sequence_tokens must be positive");
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        self.window()?;
        self.loss
            .weights()
            .validate()
            .map_err(|e| anyhow::anyhow!("loss: {e}"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EngineConfig> {
        Ok(toml::from_str(text)?)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.window().unwrap(), WindowConfig::SPIDER);
        assert_eq!(c.first_stage.top_n, 50);
        assert_eq!(c.scorer.max_sequence_tokens, 8192);
        assert_eq!(c.loss.weights(), LossWeights::default());
        assert_eq!(c.preprocess.split_ratio, 0.85);
    }

    #[test]
    fn preset_and_overrides() {
        let c = parse("[rerank]\npreset = \"spider2\"\n").unwrap();
        assert_eq!(c.window().unwrap(), WindowConfig::SPIDER2);
        let c = parse("[rerank]\npreset = \"bird\"\nretention_size = 10\n").unwrap();
        assert_eq!(c.window().unwrap(), WindowConfig::new(20, 10).unwrap());
    }

    #[test]
    fn violations_name_the_field() {
        let c = parse("[rerank]\nwindow_size = 5\nretention_size = 5\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("rerank.retention_size"));
        let c = parse("[first_stage]\ntop_n = 0\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("first_stage.top_n"));
        let c = parse("[preprocess]\nsplit_ratio = 1.0\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("preprocess.split_ratio"));
        let c = parse("[rerank]\npreset = \"msmarco\"\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("rerank.preset"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[rerank]\nwindow = 5\n").is_err());
    }

    #[test]
    fn full_document() {
        let c = parse(
            r#"
workers = 2
[paths]
corpus = "out/corpus.jsonl"
[first_stage]
provider = "file"
dim = 16
[scorer]
kind = "remote"
endpoint = "http://localhost:9000"
[loss]
alpha = 1.0
beta = 0.0
"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.first_stage.provider, ProviderKind::File);
        assert_eq!(c.scorer.kind, ScorerKind::Remote);
        assert_eq!(c.loss.weights().lambda_rc, 0.13);
        assert_eq!(c.workers, Some(2));
    }
}
