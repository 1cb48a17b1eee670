//! Flat key=value run configuration.
//!
//! One `key=value` per line, `#` starts a comment, unknown keys are
//! rejected. Omitted keys keep the desk defaults. `render` produces the
//! canonical resolved form that every run echoes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gan::{DiscriminatorConfig, LossWeights};
use crate::generator::{EncoderVariant, GeneratorConfig};
use crate::trainer::{AdamConfig, TrainSettings};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gen: GeneratorConfig,
    pub train: TrainSettings,
    pub threads: usize,
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn desk() -> RunConfig {
        RunConfig {
            gen: GeneratorConfig::desk(),
            train: TrainSettings::default(),
            threads: 1,
            data_dir: None,
        }
    }

    pub fn full() -> RunConfig {
        RunConfig {
            gen: GeneratorConfig::full(),
            train: TrainSettings {
                epochs: 35,
                d_config: DiscriminatorConfig::full(),
                ..TrainSettings::default()
            },
            threads: 1,
            data_dir: None,
        }
    }

    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full()),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk or full)"))),
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text, RunConfig::desk())
    }

    /// Applies `text` on top of `base`.
    pub fn parse(text: &str, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.gen.validate()?;
        cfg.train.weights.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "image_size" => self.gen.image_size = num(key, value)?,
            "c_l1" => self.gen.c_l1 = num(key, value)?,
            "hc_mult" => self.gen.hc_mult = num(key, value)?,
            "hs_cap" => self.gen.hs_cap = num(key, value)?,
            "scale_scores" => self.gen.scale_scores = num::<bool>(key, value)?,
            "encoder_variant" => {
                self.gen.encoder_variant = match value {
                    "pconvmlp" => EncoderVariant::PConvMlp,
                    "basic_conv" => EncoderVariant::BasicConv,
                    other => {
                        return Err(Error::Config(format!(
                            "bad encoder_variant '{other}' (pconvmlp | basic_conv)"
                        )))
                    }
                }
            }
            "use_itm" => self.gen.use_itm = num::<bool>(key, value)?,
            "seed" => self.gen.seed = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.adam.lr = num(key, value)?,
            "beta1" => self.train.adam.beta1 = num(key, value)?,
            "beta2" => self.train.adam.beta2 = num(key, value)?,
            "adam_eps" => self.train.adam.eps = num(key, value)?,
            "lambda_l1" => self.train.weights.l1 = num(key, value)?,
            "lambda_cgan" => self.train.weights.cgan = num(key, value)?,
            "lambda_tv" => self.train.weights.tv = num(key, value)?,
            "lambda_per" => self.train.weights.per = num(key, value)?,
            "d_widths" => {
                let widths: Result<Vec<usize>> = value
                    .split(',')
                    .map(|p| num("d_widths", p.trim()))
                    .collect();
                let widths = widths?;
                if widths.is_empty() {
                    return Err(Error::Config("d_widths must list at least one width".to_string()));
                }
                self.train.d_config = DiscriminatorConfig { widths };
            }
            "threads" => self.threads = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical resolved form (re-parseable; stable key order).
    pub fn render(&self) -> String {
        let variant = match self.gen.encoder_variant {
            EncoderVariant::PConvMlp => "pconvmlp",
            EncoderVariant::BasicConv => "basic_conv",
        };
        let widths = self
            .train
            .d_config
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = format!(
            "image_size={}\nc_l1={}\nhc_mult={}\nhs_cap={}\nscale_scores={}\nencoder_variant={variant}\nuse_itm={}\nseed={}\n",
            self.gen.image_size,
            self.gen.c_l1,
            self.gen.hc_mult,
            self.gen.hs_cap,
            self.gen.scale_scores,
            self.gen.use_itm,
            self.gen.seed,
        );
        out.push_str(&format!(
            "epochs={}\nbatch_size={}\nlr={}\nbeta1={}\nbeta2={}\nadam_eps={}\n",
            self.train.epochs,
            self.train.batch_size,
            self.train.adam.lr,
            self.train.adam.beta1,
            self.train.adam.beta2,
            self.train.adam.eps,
        ));
        out.push_str(&format!(
            "lambda_l1={}\nlambda_cgan={}\nlambda_tv={}\nlambda_per={}\nd_widths={widths}\nthreads={}\n",
            self.train.weights.l1,
            self.train.weights.cgan,
            self.train.weights.tv,
            self.train.weights.per,
            self.threads,
        ));
        if let Some(dir) = &self.data_dir {
            out.push_str(&format!("data_dir={}\n", dir.display()));
        }
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

/// Parses the model-config blob embedded in a checkpoint back into the
/// generator and discriminator configurations.
pub fn parse_model_config(text: &str) -> Result<(GeneratorConfig, DiscriminatorConfig)> {
    let mut run = RunConfig::desk();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad model config line '{line}'")))?;
        run.set(key.trim(), value.trim())?;
    }
    run.gen.validate()?;
    Ok((run.gen, run.train.d_config))
}

pub fn default_adam() -> AdamConfig {
    AdamConfig::default()
}

pub fn default_weights() -> LossWeights {
    LossWeights::default()
}
