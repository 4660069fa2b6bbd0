//! Pipeline configuration file.
//!
//! Relative paths are resolved against the directory holding the config
//! file. The resolved-config snapshot keeps paths exactly as written so runs
//! from different checkouts produce identical snapshots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use finforge_core::attribution::AttributionParams;
use finforge_core::governance::DedupConfig;
use finforge_core::label::LabelKey;
use finforge_core::protocol::ProcessSpec;
use finforge_core::weights::WeightParams;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub catalog: PathBuf,
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub verification: VerificationSection,
    #[serde(default)]
    pub governance: GovernanceSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub attribution: AttributionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    /// Knowledge units, one JSON object per line.
    pub knowledge: Option<PathBuf>,
    /// Labels to generate for; every catalog label when empty.
    pub labels: Vec<LabelKey>,
    /// Seed instructions for the evolution track, one per line.
    pub seeds: Option<PathBuf>,
    pub evolution_label: Option<LabelKey>,
    pub k_max: usize,
    pub convergence_eps: f64,
    /// External generation agent; the built-in template agent otherwise.
    pub agent: Option<ProcessSpec>,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            knowledge: None,
            labels: Vec::new(),
            seeds: None,
            evolution_label: None,
            k_max: 5,
            convergence_eps: 0.01,
            agent: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    #[default]
    None,
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationSection {
    /// Multi-model response sets, one JSON object per line.
    pub responses: Option<PathBuf>,
    pub ngram_orders: Vec<usize>,
    pub lexical_weight: f64,
    pub embedder: EmbedderKind,
    /// External reasoning judge; answer-in-thinking containment otherwise.
    pub judge: Option<ProcessSpec>,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self {
            responses: None,
            ngram_orders: vec![1, 2],
            lexical_weight: 1.0,
            embedder: EmbedderKind::None,
            judge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GovernanceSection {
    /// The hash-family seed is always derived from the pipeline seed.
    pub dedup: DedupConfig,
    pub denylist: Option<PathBuf>,
    pub denylist_patterns: Vec<String>,
    pub eval_sets: Vec<PathBuf>,
    pub ngram_size: usize,
    pub tau: f64,
    pub per_label: BTreeMap<LabelKey, f64>,
}

impl Default for GovernanceSection {
    fn default() -> Self {
        Self {
            dedup: DedupConfig::default(),
            denylist: None,
            denylist_patterns: Vec::new(),
            eval_sets: Vec::new(),
            ngram_size: 13,
            tau: 0.7,
            per_label: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct WeightsSection {
    #[serde(flatten)]
    pub params: WeightParams,
    /// Previous epoch's table for smoothing.
    pub previous: Option<PathBuf>,
    /// External current model, used when no scenario is configured.
    pub current: Option<ProcessSpec>,
    pub references: Vec<ProcessSpec>,
}

/// A loaded config plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub base: PathBuf,
    pub seed: u64,
    output_dir: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn output_dir(&self) -> &Path {
        &self.output_dir
    }
}

pub fn parse(text: &str, origin: &str) -> Result<PipelineConfig, Failure> {
    toml::from_str(text).map_err(|e| Failure::Input(format!("config {origin}: {e}")))
}

/// Reads the config and applies seed and output-directory overrides.
pub fn load(path: &Path, seed_override: Option<u64>, output_override: Option<&Path>) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = parse(&text, &path.display().to_string())?;
    if let Some(seed) = seed_override {
        config.seed = Some(seed);
    }
    let seed = config
        .seed
        .ok_or_else(|| Failure::Validation("no seed: set `seed` in the config, --seed or FINFORGE_SEED".into()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    // An override is relative to the working directory, not the config.
    let output_dir = match output_override {
        Some(out) => {
            config.output_dir = out.to_path_buf();
            out.to_path_buf()
        }
        None if config.output_dir.is_absolute() => config.output_dir.clone(),
        None => base.join(&config.output_dir),
    };
    Ok(Loaded {
        config,
        base,
        seed,
        output_dir,
    })
}
