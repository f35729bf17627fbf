//! Run configuration: TOML file schema, flag overrides, and the echo of
//! the fully resolved settings written next to every benchmark run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sparseperf::error::{Error, Result};
use sparseperf::eval::{
    BptfMethod, CpdMethod, CvPlan, GainMethod, GanMethod, Imputer, TfMethod,
};
use sparseperf::factorization::{BptfConfig, GdConfig};
use sparseperf::gain::GainConfig;
use sparseperf::gan::GanConfig;
use sparseperf::ingest::SynthConfig;

pub const METHOD_NAMES: [&str; 5] = ["gain", "gan", "tf", "cpd", "bptf"];

/// One dataset: either a file to ingest or a synthesis spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub datasets: Vec<DatasetSpec>,
    /// Subset of {gain, gan, tf, cpd, bptf}.
    pub methods: Vec<String>,
    pub attempts_range: Vec<usize>,
    pub seed: u64,
    pub cv: CvPlan,
    pub gain: GainConfig,
    pub gan: GanConfig,
    pub tf: GdConfig,
    pub cpd: GdConfig,
    pub bptf: BptfConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: Vec::new(),
            methods: METHOD_NAMES.iter().map(|s| s.to_string()).collect(),
            attempts_range: Vec::new(),
            seed: 0,
            cv: CvPlan::default(),
            gain: GainConfig::default(),
            gan: GanConfig::default(),
            tf: GdConfig::default(),
            cpd: GdConfig::default(),
            bptf: BptfConfig::default(),
        }
    }
}

/// Flag-level overrides that beat config-file values.
#[derive(Debug, Clone, Copy, Default)]
pub struct MethodOverrides {
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    /// Minimal config carrying only a method list, for single-method
    /// commands.
    pub fn default_for(methods: &[String]) -> Result<RunConfig> {
        let cfg = RunConfig {
            methods: methods.to_vec(),
            ..RunConfig::default()
        };
        cfg.validate_methods()?;
        Ok(cfg)
    }

    fn validate_methods(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods configured".into()));
        }
        for m in &self.methods {
            if !METHOD_NAMES.contains(&m.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "unknown method `{m}` (expected one of {})",
                    METHOD_NAMES.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_methods()?;
        if self.datasets.is_empty() {
            return Err(Error::InvalidConfig("no datasets configured".into()));
        }
        if self.attempts_range.is_empty() {
            return Err(Error::InvalidConfig("attempts_range is empty".into()));
        }
        self.cv.validate()?;
        self.gain.validate()?;
        self.gan.validate()?;
        self.tf.validate()?;
        self.cpd.validate()?;
        self.bptf.validate()?;
        Ok(())
    }

    /// Fold flag overrides into every per-method block.
    pub fn apply_overrides(&mut self, o: &MethodOverrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.cv.base_seed = seed;
            self.gain.seed = seed;
            self.gan.seed = seed;
            self.tf.seed = seed;
            self.cpd.seed = seed;
            self.bptf.seed = seed;
        }
        if let Some(iters) = o.max_iters {
            self.gain.max_iterations = iters;
            self.gan.max_iterations = iters;
            self.tf.max_iterations = iters;
            self.cpd.max_iterations = iters;
        }
        if let Some(lr) = o.lr {
            self.gain.learning_rate = lr;
            self.gan.learning_rate = lr;
            self.tf.learning_rate = lr;
            self.cpd.learning_rate = lr;
        }
    }

    /// The fully resolved configuration as TOML, for provenance.
    pub fn echo_toml(&self, o: &MethodOverrides) -> String {
        let mut resolved = self.clone();
        resolved.apply_overrides(o);
        toml::to_string(&resolved).expect("config serializes")
    }
}

/// Instantiate the configured methods in config order.
pub fn method_boxes(cfg: &RunConfig, o: &MethodOverrides) -> Result<Vec<Box<dyn Imputer>>> {
    let mut resolved = cfg.clone();
    resolved.apply_overrides(o);
    resolved.validate_methods()?;
    let mut out: Vec<Box<dyn Imputer>> = Vec::new();
    for name in &resolved.methods {
        out.push(match name.as_str() {
            "gain" => Box::new(GainMethod(resolved.gain)),
            "gan" => Box::new(GanMethod(resolved.gan)),
            "tf" => Box::new(TfMethod(resolved.tf)),
            "cpd" => Box::new(CpdMethod(resolved.cpd)),
            "bptf" => Box::new(BptfMethod(resolved.bptf)),
            other => {
                return Err(Error::InvalidConfig(format!("unknown method `{other}`")))
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_method_rejected() {
        let cfg = RunConfig {
            methods: vec!["gain".into(), "autoencoder".into()],
            ..RunConfig::default()
        };
        assert!(cfg.validate_methods().is_err());
        assert!(RunConfig::default_for(&["tf".into()]).is_ok());
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&MethodOverrides {
            seed: Some(42),
            max_iters: Some(7),
            lr: Some(0.5),
        });
        assert_eq!(cfg.cv.base_seed, 42);
        assert_eq!(cfg.gain.seed, 42);
        assert_eq!(cfg.gan.max_iterations, 7);
        assert_eq!(cfg.cpd.learning_rate, 0.5);
        // bptf has no iteration cap or learning rate; only its seed moves
        assert_eq!(cfg.bptf.seed, 42);
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            methods = ["tf", "cpd"]
            attempts_range = [2, 3]
            [[datasets]]
            name = "demo"
            [datasets.synth]
            u_count = 10
            n_count = 4
            m_count = 3
            [tf]
            rank = 2
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.methods, vec!["tf", "cpd"]);
        assert_eq!(cfg.tf.rank, 2);
        assert_eq!(cfg.cpd.rank, 3); // untouched block keeps defaults
        let echo = cfg.echo_toml(&MethodOverrides::default());
        let back: RunConfig = toml::from_str(&echo).unwrap();
        assert_eq!(back.methods, cfg.methods);
        assert_eq!(back.tf.rank, 2);
        cfg.validate().unwrap();
    }
}
