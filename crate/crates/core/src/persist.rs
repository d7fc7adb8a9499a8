//! Model files.
//!
//! A model file is a human-readable `key=value` header, a blank line, then
//! every parameter tensor as little-endian IEEE-754 `f64`, row-major, in the
//! order listed by the `tensors=` header line. Masks are not stored: they are
//! regenerated from the recorded mask policy and seed.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{MadeError, Result};
use crate::masks::MaskSet;
use crate::network::{Activation, Architecture, MadeParams};
use crate::optim::{MaskPolicy, MaskSchedule, Optimizer, TrainConfig};
use crate::seed::Stream;
use crate::Params;

pub const FORMAT_NAME: &str = "made-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub params: Params,
    pub train: TrainConfig,
    pub dataset: Option<String>,
    pub best_valid_nll: Option<f64>,
}

impl ModelFile {
    pub fn new(params: Params, train: TrainConfig) -> Self {
        ModelFile {
            params,
            train,
            dataset: None,
            best_valid_nll: None,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.params.arch
    }

    pub fn schedule(&self) -> Result<MaskSchedule> {
        MaskSchedule::new(&self.params.arch, self.train.mask_policy, self.train.seed)
    }

    /// Masks averaged over at test time. `count` only matters for the
    /// unlimited policy and defaults to the recorded test-mask count.
    pub fn test_masks(&self, count: Option<usize>) -> Result<Vec<MaskSet>> {
        self.schedule()?.evaluation_masks(
            Stream::TestMasks,
            count.unwrap_or(self.train.test_masks_for_unlimited),
        )
    }

    fn header(&self) -> Vec<(String, String)> {
        let arch = &self.params.arch;
        let t = &self.train;
        let hidden: Vec<String> = arch.hidden.iter().map(usize::to_string).collect();
        let mut h = vec![
            ("format".to_string(), FORMAT_NAME.to_string()),
            ("version".into(), FORMAT_VERSION.to_string()),
            ("dim".into(), arch.dim.to_string()),
            ("hidden".into(), hidden.join(",")),
            ("activation".into(), arch.activation.to_string()),
            ("direct".into(), arch.use_direct.to_string()),
            ("conditioning".into(), arch.use_conditioning.to_string()),
            ("mask_policy".into(), t.mask_policy.to_string()),
            ("mask_seed".into(), t.seed.to_string()),
            (
                "valid_masks".into(),
                t.valid_masks_for_unlimited.to_string(),
            ),
            ("test_masks".into(), t.test_masks_for_unlimited.to_string()),
            ("optimizer".into(), t.optimizer.name().to_string()),
        ];
        match t.optimizer {
            Optimizer::Sgd { learning_rate } => {
                h.push(("learning_rate".into(), format!("{learning_rate:?}")))
            }
            Optimizer::Adagrad {
                learning_rate,
                epsilon,
            } => {
                h.push(("learning_rate".into(), format!("{learning_rate:?}")));
                h.push(("epsilon".into(), format!("{epsilon:?}")));
            }
            Optimizer::Adadelta { decay, epsilon } => {
                h.push(("adadelta_decay".into(), format!("{decay:?}")));
                h.push(("epsilon".into(), format!("{epsilon:?}")));
            }
        }
        h.push(("batch_size".into(), t.batch_size.to_string()));
        h.push(("lookahead".into(), t.lookahead.to_string()));
        h.push(("max_epochs".into(), t.max_epochs.to_string()));
        if let Some(d) = &self.dataset {
            h.push(("dataset".into(), d.clone()));
        }
        if let Some(v) = self.best_valid_nll {
            h.push(("best_valid_nll".into(), format!("{v:?}")));
        }
        let tensors: Vec<String> = arch
            .tensor_shapes()
            .iter()
            .map(|(name, shape)| {
                let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
                format!("{name}:{}", dims.join("x"))
            })
            .collect();
        h.push(("tensors".into(), tensors.join(",")));
        h
    }

    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (k, v) in self.header() {
            writeln!(out, "{k}={v}")?;
        }
        writeln!(out)?;
        for t in self.params.tensors() {
            for v in t.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut header: Vec<(String, String)> = Vec::new();
        loop {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| MadeError::io("<model>", e))?;
            if n == 0 {
                return Err(MadeError::Format(
                    "header is not terminated by a blank line".into(),
                ));
            }
            let line = line.trim_end_matches('\n');
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MadeError::Format(format!("malformed header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str| -> Result<&str> {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| MadeError::Format(format!("header is missing {key}")))
        };
        let opt = |key: &str| {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| MadeError::Format(format!("bad value {v:?} for {key}")))
        }

        if get("format")? != FORMAT_NAME {
            return Err(MadeError::Format(format!(
                "not a model file (format={})",
                get("format")?
            )));
        }
        let version: u32 = num("version", get("version")?)?;
        if version != FORMAT_VERSION {
            return Err(MadeError::Format(format!(
                "unsupported version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let hidden = get("hidden")?
            .split(',')
            .map(|v| num("hidden", v))
            .collect::<Result<Vec<usize>>>()?;
        let activation: Activation = get("activation")?
            .parse()
            .map_err(|_| MadeError::Format("bad activation".into()))?;
        let arch = Architecture::new(num("dim", get("dim")?)?, hidden, activation)
            .with_direct(num("direct", get("direct")?)?)
            .with_conditioning(num("conditioning", get("conditioning")?)?);
        arch.validate()?;

        let optimizer = match get("optimizer")? {
            "sgd" => Optimizer::Sgd {
                learning_rate: num("learning_rate", get("learning_rate")?)?,
            },
            "adagrad" => Optimizer::Adagrad {
                learning_rate: num("learning_rate", get("learning_rate")?)?,
                epsilon: num("epsilon", get("epsilon")?)?,
            },
            "adadelta" => Optimizer::Adadelta {
                decay: num("adadelta_decay", get("adadelta_decay")?)?,
                epsilon: num("epsilon", get("epsilon")?)?,
            },
            other => return Err(MadeError::Format(format!("unknown optimizer {other:?}"))),
        };
        let train = TrainConfig {
            optimizer,
            batch_size: num("batch_size", get("batch_size")?)?,
            lookahead: num("lookahead", get("lookahead")?)?,
            max_epochs: num("max_epochs", get("max_epochs")?)?,
            mask_policy: get("mask_policy")?
                .parse::<MaskPolicy>()
                .map_err(|e| MadeError::Format(e.to_string()))?,
            valid_masks_for_unlimited: num("valid_masks", get("valid_masks")?)?,
            test_masks_for_unlimited: num("test_masks", get("test_masks")?)?,
            seed: num("mask_seed", get("mask_seed")?)?,
        };

        let mut params = MadeParams::<f64>::zeros(&arch)?;
        let expected: Vec<String> = arch
            .tensor_shapes()
            .iter()
            .map(|(name, shape)| {
                let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
                format!("{name}:{}", dims.join("x"))
            })
            .collect();
        if get("tensors")? != expected.join(",") {
            return Err(MadeError::Format(format!(
                "tensor list {:?} does not match the architecture ({})",
                get("tensors")?,
                expected.join(",")
            )));
        }
        let mut payload = Vec::new();
        reader
            .read_to_end(&mut payload)
            .map_err(|e| MadeError::io("<model>", e))?;
        let want = arch.parameter_count() * 8;
        if payload.len() != want {
            return Err(MadeError::Format(format!(
                "payload has {} bytes, header declares {want}",
                payload.len()
            )));
        }
        let mut words = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for mut t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = words.next().unwrap());
        }
        Ok(ModelFile {
            params,
            train,
            dataset: opt("dataset").map(str::to_string),
            best_valid_nll: opt("best_valid_nll")
                .map(|v| num("best_valid_nll", v))
                .transpose()?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MadeError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| MadeError::io(path, e))?;
        Self::read(file).map_err(|e| match e {
            MadeError::Io { source, .. } => MadeError::io(path, source),
            other => other,
        })
    }
}
