use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ssae_core::gradcheck::GradcheckConfig;
use ssae_core::manips::AttributeGroup;
use ssae_core::pretext::{CorpusConfig, SourceSpec, SynthOptions};
use ssae_core::probe::{ProbeConfig, DEFAULT_FRACTIONS};
use ssae_core::trainer::{Ablation, TrainConfig};
use ssae_core::{Error, Result};

/// Downstream evaluation data and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Size of the synthetic clean-vs-degraded set.
    pub n: usize,
    /// Optional `path,label` CSV; replaces the synthetic set when given.
    pub labels_csv: Option<PathBuf>,
    pub blocks: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 2000,
            labels_csv: None,
            blocks: vec![1, 2, 3, 4, 5],
            fractions: DEFAULT_FRACTIONS.to_vec(),
        }
    }
}

/// The experiment record: every knob of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub root_seed: u64,
    pub exclude_attribute_groups: Vec<AttributeGroup>,
    pub disable_weighting: bool,
    pub disable_trp: bool,
    pub disable_deg: bool,
    pub source: SourceSpec,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            root_seed: 0,
            exclude_attribute_groups: Vec::new(),
            disable_weighting: false,
            disable_trp: false,
            disable_deg: false,
            source: SourceSpec::default(),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.probe.validate()?;
        if self.corpus.crop != self.train.encoder.input_size {
            return Err(Error::Config(format!(
                "corpus.crop ({}) must equal train.encoder.input_size ({})",
                self.corpus.crop, self.train.encoder.input_size
            )));
        }
        if self.eval.blocks.iter().any(|&b| b == 0 || b > self.train.encoder.blocks.len()) {
            return Err(Error::Config("eval.blocks must name existing blocks".into()));
        }
        if self.eval.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("eval.fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            exclude_attribute_groups: self.exclude_attribute_groups.clone(),
            disable_weighting: self.disable_weighting,
            disable_trp: self.disable_trp,
            disable_deg: self.disable_deg,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            root_seed: self.root_seed,
            ablation: self.ablation(),
            ..self.train.clone()
        }
    }

    pub fn source_spec(&self) -> SourceSpec {
        SourceSpec {
            root_seed: self.root_seed,
            ..self.source.clone()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            root_seed: self.root_seed,
            ..self.probe.clone()
        }
    }

    pub fn gradcheck_config(&self) -> GradcheckConfig {
        GradcheckConfig {
            root_seed: self.root_seed,
            ..self.gradcheck.clone()
        }
    }

    /// Options behind the manifest's recorded ops (epoch 0 plan).
    pub fn synth_options(&self) -> SynthOptions {
        self.train_config().synth_options(0)
    }

    /// Pretty JSON with every default spelled out.
    pub fn resolved_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.resolved_json()?).map_err(|e| Error::io(path, e))
    }
}
