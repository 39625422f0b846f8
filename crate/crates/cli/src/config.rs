//! Flat key=value run configuration. Every key can come from a config file
//! and be overridden on the command line; each run writes the resolved
//! snapshot next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use refground_core::dsl::ConceptName;
use refground_core::learn::{LossWeights, Optimizer, TrainConfig};
use refground_core::scene::GeneratorConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

macro_rules! settings {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr)),+ $(,)?) => {
        /// All run settings, flattened.
        #[derive(Clone, Debug)]
        pub struct Settings {
            $(pub $field: $ty),+
        }

        impl Default for Settings {
            fn default() -> Self {
                Settings { $($field: $default),+ }
            }
        }

        impl Settings {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| {
                            ConfigError(format!("bad value `{value}` for `{key}`: {e}"))
                        })?;
                        Ok(())
                    })+
                    other => Err(ConfigError(format!("unknown config key `{other}`"))),
                }
            }

            pub fn to_key_values(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", $key, self.$field).unwrap();)+
                out
            }
        }
    };
}

settings![
    (seed, "seed", u64, 0),
    (scenes, "scenes", usize, 120),
    (queries_per_scene, "queries_per_scene", usize, 4),
    (query_attempts, "query_attempts", usize, 12),
    (noise_level, "noise_level", f64, 0.0),
    (eval_fraction, "eval_fraction", f64, 0.2),
    (data_fraction, "data_fraction", f64, 1.0),
    (objects_min, "objects_min", usize, 4),
    (objects_max, "objects_max", usize, 8),
    (attr_dim, "attr_dim", usize, 8),
    (attr_noise, "attr_noise", f64, 0.25),
    (bounds, "bounds", f64, 3.0),
    (vocabulary, "vocabulary", String, default_vocabulary()),
    (holdout, "holdout", String, String::new()),
    (holdout_negated, "holdout_negated", bool, false),
    (transfer_templates, "transfer_templates", bool, false),
    (dim, "dim", usize, 16),
    (epochs, "epochs", usize, 40),
    (batch_size, "batch_size", usize, 8),
    (learning_rate, "learning_rate", f64, 0.1),
    (optimizer, "optimizer", String, "momentum".to_string()),
    (momentum, "momentum", f64, 0.9),
    (decay_at, "decay_at", usize, 0),
    (decay_factor, "decay_factor", f64, 0.1),
    (alpha, "alpha", f64, 0.1),
    (beta, "beta", f64, 0.1),
    (gamma, "gamma", f64, 0.01),
    (synonym_aug_prob, "synonym_aug_prob", f64, 0.5),
    (workers, "workers", usize, 0),
    (backend, "backend", String, "fixture".to_string()),
    (endpoint, "endpoint", String, "http://localhost:8080/v1/complete".to_string()),
    (model, "model", String, "gpt-3.5-turbo".to_string()),
    (auth_env, "auth_env", String, "COMPLETION_AUTH_TOKEN".to_string()),
    (dump_trace_queries, "dump_trace_queries", usize, 5),
];

fn default_vocabulary() -> String {
    "chair,shelf,table,wardrobe,couch,lamp,desk,box,cabinet,bed".to_string()
}

impl Settings {
    /// Defaults, then the config file (if any), applied top to bottom.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    ConfigError(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
                })?;
                s.set(key.trim(), value.trim())?;
            }
        }
        Ok(s)
    }

    pub fn parse_vocabulary(&self) -> Result<Vec<ConceptName>, ConfigError> {
        self.vocabulary
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| ConceptName::normalize(t).map_err(|e| ConfigError(e.to_string())))
            .collect()
    }

    pub fn parse_holdout(&self) -> Result<Vec<ConceptName>, ConfigError> {
        self.holdout
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| ConceptName::normalize(t).map_err(|e| ConfigError(e.to_string())))
            .collect()
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig, ConfigError> {
        Ok(GeneratorConfig {
            n_objects: (self.objects_min, self.objects_max),
            vocabulary: self.parse_vocabulary()?,
            bounds: self.bounds,
            attr_dim: self.attr_dim,
            attr_noise: self.attr_noise,
            ..GeneratorConfig::default()
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => Optimizer::Sgd,
            "momentum" => Optimizer::Momentum,
            other => return Err(ConfigError(format!("unknown optimizer `{other}`"))),
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer,
            momentum: self.momentum,
            decay_at: if self.decay_at == 0 { None } else { Some(self.decay_at) },
            decay_factor: self.decay_factor,
            seed: self.seed,
            noise_level: self.noise_level,
            data_fraction: self.data_fraction,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            synonym_aug_prob: self.synonym_aug_prob,
        }
    }

    /// Parse `--weights a,b,g`.
    pub fn set_weights(&mut self, spec: &str) -> Result<(), ConfigError> {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 3 {
            return Err(ConfigError(format!("--weights expects `alpha,beta,gamma`, got `{spec}`")));
        }
        self.set("alpha", parts[0])?;
        self.set("beta", parts[1])?;
        self.set("gamma", parts[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed = 9\nepochs = 3\n# comment\n").unwrap();
        let mut s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.epochs, 3);
        s.set("epochs", "7").unwrap();
        assert_eq!(s.epochs, 7);
        assert!(s.set("nope", "1").is_err());
        assert!(s.set("epochs", "x").is_err());
    }

    #[test]
    fn snapshot_contains_every_key() {
        let s = Settings::default();
        let text = s.to_key_values();
        assert!(text.contains("seed = 0"));
        assert!(text.contains("alpha = 0.1"));
        assert!(text.contains("backend = fixture"));
    }

    #[test]
    fn weights_flag_parses_triplet() {
        let mut s = Settings::default();
        s.set_weights("0.2,0.3,0.05").unwrap();
        assert_eq!((s.alpha, s.beta, s.gamma), (0.2, 0.3, 0.05));
        assert!(s.set_weights("1,2").is_err());
    }
}
