//! Sectioned TOML run configuration. Every section is optional; missing
//! keys take library defaults, command-line flags override file values and
//! the effective result is written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmkgc::glp::{EmbeddingSlot, LoraSettings};
use mmkgc::kg::Modality;
use mmkgc::model::HerrConfig;
use mmkgc::robustness::CorruptionKind;
use mmkgc::structure::StructureConfig;
use mmkgc::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: HerrConfig,
    pub train: TrainConfig,
    pub structure: StructureSection,
    pub retrieval: RetrievalSection,
    pub glp: GlpSection,
    pub corruption: CorruptionSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds every stochastic step: model init, training, sampling,
    /// corruption.
    pub seed: u64,
    /// Thread cap; 0 uses all cores.
    pub workers: usize,
    pub out: PathBuf,
    /// Checkpoint prefix; defaults to `<out>/herr`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `train.tsv`, `valid.tsv` and `test.tsv`.
    pub dataset: Option<PathBuf>,
    /// Feature files; default `<dataset>/<modality>.mmft`.
    pub visual: Option<PathBuf>,
    pub textual: Option<PathBuf>,
    pub structural: Option<PathBuf>,
}

/// Structural pretraining; `dim` falls back to the model width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureSection {
    pub dim: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for StructureSection {
    fn default() -> Self {
        let d = StructureConfig::default();
        Self {
            dim: None,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            label_smoothing: d.label_smoothing,
            eval_every: d.eval_every,
            patience: d.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    /// Candidate sizes for `sweep-k`.
    pub sweep: Vec<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: 20,
            sweep: vec![10, 20, 30, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LlmMode {
    /// Retriever ranking only.
    #[default]
    Off,
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlpSection {
    pub mode: LlmMode,
    pub endpoint: Option<String>,
    /// JSON lines of `{query_key, answer}`.
    pub mock_answers: Option<PathBuf>,
    /// Fixed answer for every query.
    pub mock_constant: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_tokens: usize,
    pub temperature: f64,
    /// Write vectors into the prompt text instead of `[Placeholder]`.
    pub textualize: bool,
    /// Validation triples to sample for fine-tune export.
    pub finetune_sample: Option<usize>,
    pub lora: LoraSettings,
}

impl Default for GlpSection {
    fn default() -> Self {
        Self {
            mode: LlmMode::Off,
            endpoint: None,
            mock_answers: None,
            mock_constant: None,
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 200,
            max_tokens: 32,
            temperature: 0.0,
            textualize: false,
            finetune_sample: None,
            lora: LoraSettings::default(),
        }
    }
}

impl GlpSection {
    pub fn slot(&self) -> EmbeddingSlot {
        if self.textualize {
            EmbeddingSlot::textualize()
        } else {
            EmbeddingSlot::Placeholder
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub kind: Option<CorruptionKind>,
    pub fraction: f64,
    pub modality: Option<Modality>,
    pub noise_scale: f64,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        Self {
            kind: None,
            fraction: 0.0,
            modality: None,
            noise_scale: 1.0,
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub k: Option<usize>,
    pub mode: Option<LlmMode>,
    pub endpoint: Option<String>,
    pub corruption: Option<CorruptionKind>,
    pub fraction: Option<f64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if let Some(v) = o.workers {
            self.run.workers = v;
        }
        if let Some(v) = o.k {
            self.retrieval.k = v;
        }
        if let Some(v) = o.mode {
            self.glp.mode = v;
        }
        if let Some(v) = &o.endpoint {
            self.glp.endpoint = Some(v.clone());
        }
        if let Some(v) = o.corruption {
            self.corruption.kind = Some(v);
        }
        if let Some(v) = o.fraction {
            self.corruption.fraction = v;
        }
        if let Some(v) = &o.out {
            self.run.out = v.clone();
        }
        if let Some(v) = &o.dataset {
            self.data.dataset = Some(v.clone());
        }
        if let Some(v) = &o.checkpoint {
            self.run.checkpoint = Some(v.clone());
        }
        // one seed drives everything
        self.train.seed = self.run.seed;
        self.train.workers = self.run.workers;
    }

    /// Checks that do not depend on the data; failures name the field.
    pub fn validate(&self) -> Result<()> {
        if self.retrieval.k == 0 {
            bail!("retrieval.k must be positive");
        }
        if self.retrieval.sweep.iter().any(|&k| k == 0) {
            bail!("retrieval.sweep values must be positive");
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be positive");
        }
        if !(self.train.learning_rate > 0.0) {
            bail!("train.learning_rate must be positive");
        }
        if self.structure.batch_size == 0 {
            bail!("structure.batch_size must be positive");
        }
        if self.structure.dim == Some(0) {
            bail!("structure.dim must be positive");
        }
        if self.model.dim == 0 {
            bail!("model.dim must be positive");
        }
        if !(self.model.temperature > 0.0) {
            bail!("model.temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption.fraction) {
            bail!("corruption.fraction must lie in [0, 1], got {}", self.corruption.fraction);
        }
        if !(self.corruption.noise_scale >= 0.0) || !self.corruption.noise_scale.is_finite() {
            bail!("corruption.noise_scale must be finite and non-negative");
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Path> {
        let Some(d) = self.data.dataset.as_deref() else {
            bail!("data.dataset is not set (use --dataset or the [data] section)");
        };
        if !d.is_dir() {
            bail!("data.dataset: {} is not a directory", d.display());
        }
        Ok(d)
    }

    pub fn feature_path(&self, m: Modality) -> Result<PathBuf> {
        let explicit = match m {
            Modality::Visual => &self.data.visual,
            Modality::Textual => &self.data.textual,
            Modality::Structural => &self.data.structural,
        };
        let path = match explicit {
            Some(p) => p.clone(),
            None => {
                let beside = self.dataset()?.join(format!("{m}.mmft"));
                // train-structure writes into the output directory
                let trained = self.run.out.join(format!("{m}.mmft"));
                if !beside.is_file() && m == Modality::Structural && trained.is_file() {
                    trained
                } else {
                    beside
                }
            }
        };
        if !path.is_file() {
            bail!("data.{m}: feature file {} does not exist", path.display());
        }
        Ok(path)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.run.checkpoint.clone().unwrap_or_else(|| self.run.out.join("herr"))
    }

    pub fn structure_config(&self) -> StructureConfig {
        let s = &self.structure;
        StructureConfig {
            dim: s.dim.unwrap_or(self.model.dim),
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            label_smoothing: s.label_smoothing,
            seed: self.run.seed,
            eval_every: s.eval_every,
            patience: s.patience,
            ..StructureConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `config.toml` into the output directory.
    pub fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.run.out).with_context(|| format!("cannot create {}", self.run.out.display()))?;
        let path = self.run.out.join("config.toml");
        fs::write(&path, self.to_toml()).with_context(|| format!("cannot write {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_are_optional_and_round_trip() {
        let c: RunConfig = toml::from_str("[run]\nseed = 3\n[model]\ndim = 8\n").unwrap();
        assert_eq!(c.run.seed, 3);
        assert_eq!(c.model.dim, 8);
        assert_eq!(c.retrieval.sweep, [10, 20, 30, 40]);
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let e = toml::from_str::<RunConfig>("[retrieval]\nkk = 3\n").unwrap_err().to_string();
        assert!(e.contains("kk"), "{e}");
    }

    #[test]
    fn flags_win_and_seed_propagates() {
        let mut c: RunConfig = toml::from_str("[run]\nseed = 3\n[retrieval]\nk = 10\n").unwrap();
        c.apply(&Overrides {
            seed: Some(7),
            k: Some(30),
            ..Default::default()
        });
        assert_eq!((c.run.seed, c.train.seed, c.retrieval.k), (7, 7, 30));
        assert_eq!(c.structure_config().seed, 7);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.retrieval.k = 0;
        assert!(c.validate().unwrap_err().to_string().contains("retrieval.k"));
        let mut c = RunConfig::default();
        c.corruption.fraction = 2.0;
        assert!(c.validate().unwrap_err().to_string().contains("corruption.fraction"));
    }

    #[test]
    fn structure_width_follows_model() {
        let mut c = RunConfig::default();
        c.model.dim = 32;
        assert_eq!(c.structure_config().dim, 32);
        c.structure.dim = Some(16);
        assert_eq!(c.structure_config().dim, 16);
    }
}
