//! Flat `key=value` run configuration for training from the command line.
//!
//! ```text
//! # adult, one hidden layer
//! dataset=adult
//! hidden=500
//! activation=relu
//! direct=true
//! optimizer=adadelta
//! epsilon=1e-7
//! mask_policy=fixed
//! model_out=adult.model
//! ```
//!
//! `#` starts a comment. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{load_dataset, split_path, Dataset, Split};
use crate::error::{MadeError, Result};
use crate::network::{Activation, Architecture};
use crate::optim::{
    MaskPolicy, Optimizer, TrainConfig, DEFAULT_ADADELTA_DECAY, DEFAULT_ADADELTA_EPSILON,
    DEFAULT_ADAGRAD_EPSILON, DEFAULT_BATCH_SIZE, DEFAULT_LOOKAHEAD, DEFAULT_TEST_MASKS,
    DEFAULT_VALID_MASKS,
};

/// Environment variable consulted when a config has no `data_dir`.
pub const DATA_DIR_ENV: &str = "MADE_DATA_DIR";

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "input_dim",
    "hidden",
    "activation",
    "direct",
    "conditioning",
    "optimizer",
    "learning_rate",
    "adadelta_decay",
    "epsilon",
    "batch_size",
    "lookahead",
    "max_epochs",
    "mask_policy",
    "masks",
    "valid_masks",
    "test_masks",
    "seed",
    "model_out",
    "log_out",
];

const REQUIRED_KEYS: &[&str] = &["dataset", "hidden", "model_out"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub input_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub use_direct: bool,
    pub use_conditioning: bool,
    pub train: TrainConfig,
    pub model_out: PathBuf,
    pub log_out: PathBuf,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MadeError::Config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    /// Parses config text. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| MadeError::Parse {
                line: i + 1,
                column: 1,
                message: format!("expected key=value, found {line:?}"),
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(MadeError::Config(format!(
                    "unknown key {key} on line {}",
                    i + 1
                )));
            }
            if map
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(MadeError::Config(format!("key {key} given twice")));
            }
        }
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !map.contains_key(**k)) {
            return Err(MadeError::Config(format!("missing required key {missing}")));
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };

        let hidden = get("hidden")
            .unwrap()
            .split(',')
            .map(|v| parse_value("hidden", v.trim()))
            .collect::<Result<Vec<usize>>>()?;

        let optimizer = match get("optimizer").unwrap_or("adadelta") {
            "sgd" => Optimizer::Sgd {
                learning_rate: parse_value(
                    "learning_rate",
                    get("learning_rate").unwrap_or("0.01"),
                )?,
            },
            "adagrad" => Optimizer::Adagrad {
                learning_rate: parse_value(
                    "learning_rate",
                    get("learning_rate").unwrap_or("0.01"),
                )?,
                epsilon: get("epsilon")
                    .map(|v| parse_value("epsilon", v))
                    .transpose()?
                    .unwrap_or(DEFAULT_ADAGRAD_EPSILON),
            },
            "adadelta" => Optimizer::Adadelta {
                decay: get("adadelta_decay")
                    .map(|v| parse_value("adadelta_decay", v))
                    .transpose()?
                    .unwrap_or(DEFAULT_ADADELTA_DECAY),
                epsilon: get("epsilon")
                    .map(|v| parse_value("epsilon", v))
                    .transpose()?
                    .unwrap_or(DEFAULT_ADADELTA_EPSILON),
            },
            other => return Err(MadeError::Config(format!("unknown optimizer {other:?}"))),
        };

        let masks: Option<usize> = get("masks").map(|v| parse_value("masks", v)).transpose()?;
        let mask_policy = match (get("mask_policy").unwrap_or("fixed"), masks) {
            ("cycle", Some(r)) if r >= 1 => MaskPolicy::Cycle(r),
            ("cycle", _) => {
                return Err(MadeError::Config(
                    "mask_policy=cycle needs masks=<R>=1 or more".into(),
                ))
            }
            (other, _) => other.parse()?,
        };

        let usize_or = |k: &str, d: usize| -> Result<usize> {
            get(k)
                .map(|v| parse_value(k, v))
                .transpose()
                .map(|v| v.unwrap_or(d))
        };
        let bool_or = |k: &str| -> Result<bool> {
            get(k)
                .map(|v| parse_value(k, v))
                .transpose()
                .map(|v| v.unwrap_or(false))
        };
        let train = TrainConfig {
            optimizer,
            batch_size: usize_or("batch_size", DEFAULT_BATCH_SIZE)?,
            lookahead: usize_or("lookahead", DEFAULT_LOOKAHEAD)?,
            max_epochs: usize_or("max_epochs", 1000)?,
            mask_policy,
            valid_masks_for_unlimited: usize_or("valid_masks", DEFAULT_VALID_MASKS)?,
            test_masks_for_unlimited: usize_or("test_masks", DEFAULT_TEST_MASKS)?,
            seed: get("seed")
                .map(|v| parse_value("seed", v))
                .transpose()?
                .unwrap_or(1234),
        };
        train.validate()?;

        let model_out = resolve(get("model_out").unwrap());
        let log_out = get("log_out").map(resolve).unwrap_or_else(|| {
            let mut p = model_out.clone().into_os_string();
            p.push(".log");
            PathBuf::from(p)
        });
        Ok(RunConfig {
            dataset: get("dataset").unwrap().to_string(),
            data_dir: get("data_dir").map(resolve),
            input_dim: get("input_dim")
                .map(|v| parse_value("input_dim", v))
                .transpose()?,
            hidden,
            activation: get("activation").unwrap_or("relu").parse()?,
            use_direct: bool_or("direct")?,
            use_conditioning: bool_or("conditioning")?,
            train,
            model_out,
            log_out,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MadeError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// `data_dir`, else `$MADE_DATA_DIR`, else the current directory.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        load_dataset(self.resolved_data_dir(), &self.dataset)
    }

    /// Input dimension from `input_dim`, or from the first line of the
    /// training split.
    pub fn dim(&self) -> Result<usize> {
        if let Some(d) = self.input_dim {
            return Ok(d);
        }
        let dir = self.resolved_data_dir();
        let path = if self.dataset == "binarized_mnist"
            && split_path(&dir, &self.dataset, Split::Train).is_err()
        {
            return Ok(crate::data::MNIST_DIM);
        } else {
            split_path(&dir, &self.dataset, Split::Train)?
        };
        let file = std::fs::File::open(&path).map_err(|e| MadeError::io(&path, e))?;
        let mut line = String::new();
        let mut reader: Box<dyn std::io::BufRead> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(std::io::BufReader::new(flate2::read::GzDecoder::new(file)))
        } else {
            Box::new(std::io::BufReader::new(file))
        };
        reader
            .read_line(&mut line)
            .map_err(|e| MadeError::io(&path, e))?;
        Ok(line.split_whitespace().count())
    }

    pub fn architecture(&self, dim: usize) -> Architecture {
        Architecture::new(dim, self.hidden.clone(), self.activation)
            .with_direct(self.use_direct)
            .with_conditioning(self.use_conditioning)
    }
}
