use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use made::config::DATA_DIR_ENV;
use made::data::{load_split, split_path, write_split, Split};
use made::eval::{self, write_pgm_grid, MAX_ENUMERATION_DIM};
use made::masks::{make_mask_list, read_dump, write_dump};
use made::optim::{train_with_observer, MaskSchedule};
use made::seed::{self, Stream};
use made::{
    verify_autoregressive, Activation, Architecture, MadeError, MaskSet, ModelFile, Params, Result,
    RunConfig,
};

/// 1 verification failure, 2 usage/config, 3 I/O.
pub fn exit_code(err: &MadeError) -> u8 {
    match err {
        MadeError::Io { .. } => 3,
        MadeError::Diverged(_) => 1,
        _ => 2,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| MadeError::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> MadeError + '_ {
    move |e| MadeError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn train(config_path: &Path) -> Result<ExitCode> {
    let config = RunConfig::load(config_path)?;
    let dataset = config.load_dataset()?;
    let arch = config.architecture(dataset.dim);
    let mut log = create(&config.log_out)?;
    let mut log_err = None;
    let outcome = train_with_observer::<f64>(&arch, &dataset, &config.train, |record| {
        eprintln!(
            "epoch {:>4}  train {:.4}  valid {:.4}  best {:.4}",
            record.epoch, record.train_nll, record.valid_nll, record.best_so_far
        );
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", record.log_line()).and_then(|_| log.flush()) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_at(&config.log_out)(e));
    }
    let mut model = ModelFile::new(outcome.params, config.train.clone());
    model.dataset = Some(config.dataset.clone());
    model.best_valid_nll = Some(outcome.report.best_valid_nll);
    model.save(&config.model_out)?;
    println!(
        "valid_nll={} best_epoch={} epochs={}",
        outcome.report.best_valid_nll,
        outcome.report.best_epoch,
        outcome.report.epochs.len() - 1
    );
    Ok(ExitCode::SUCCESS)
}

fn resolve_split(model: &ModelFile, split: &str, data_dir: Option<PathBuf>) -> Result<PathBuf> {
    let as_path = PathBuf::from(split);
    if as_path.is_file() {
        return Ok(as_path);
    }
    let which: Split = split.parse()?;
    let name = model.dataset.as_deref().ok_or_else(|| {
        MadeError::Config("model records no dataset; pass a split file path".into())
    })?;
    let dir = data_dir
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    if name == "binarized_mnist" && split_path(&dir, name, which).is_err() {
        return Ok(dir.join(format!("binarized_mnist_{which}.amat")));
    }
    split_path(&dir, name, which)
}

pub fn eval(
    model_path: &Path,
    split: &str,
    masks: Option<usize>,
    data_dir: Option<PathBuf>,
) -> Result<ExitCode> {
    let model = ModelFile::load(model_path)?;
    let path = resolve_split(&model, split, data_dir)?;
    let data = load_split(&path)?;
    if data.ncols() != model.arch().dim {
        return Err(MadeError::Config(format!(
            "model has D={} but {} has D={}",
            model.arch().dim,
            path.display(),
            data.ncols()
        )));
    }
    let test_masks = model.test_masks(masks)?;
    eprintln!(
        "masks={} policy={}",
        test_masks.len(),
        model.train.mask_policy
    );
    let estimate = eval::test_nll(&model.params, &test_masks, data.view())?;
    println!("nll={} ci={}", estimate.mean, estimate.ci95);
    Ok(ExitCode::SUCCESS)
}

/// Samples per mask when cycling through the model's masks.
const SAMPLE_GROUP: usize = 10;

pub fn sample(model_path: &Path, n: usize, seed_value: u64, out: &Path) -> Result<ExitCode> {
    let model = ModelFile::load(model_path)?;
    let masks = model.test_masks(None)?;
    let mut rng = seed::rng_from(seed_value);
    let samples = eval::sample_cycling(&model.params, &masks, n, SAMPLE_GROUP, &mut rng)?;
    let mut writer = create(out)?;
    if out.extension().is_some_and(|e| e == "pgm") {
        write_pgm_grid(samples.view(), SAMPLE_GROUP, &mut writer)?;
    } else {
        write_split(samples.view(), &mut writer).map_err(io_at(out))?;
    }
    writer.flush().map_err(io_at(out))?;
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn normalization_deviation(params: &Params, masks: &MaskSet) -> Result<f64> {
    let pmf = eval::brute_force_pmf(params, masks)?;
    Ok((pmf.sum() - 1.0).abs())
}

const NORM_TOLERANCE: f64 = 1e-9;

/// A dump file may hold several mask sets, each starting with `ordering=`.
fn split_dump_file(text: &str) -> Vec<String> {
    let mut chunks: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.starts_with("ordering=") || chunks.is_empty() {
            chunks.push(String::new());
        }
        let chunk = chunks.last_mut().unwrap();
        chunk.push_str(line);
        chunk.push('\n');
    }
    chunks
}

pub fn verify(
    model: Option<PathBuf>,
    config: Option<PathBuf>,
    dumps: Vec<PathBuf>,
    count: Option<usize>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut params = None;
    let mask_sets: Vec<MaskSet> = if let Some(path) = model {
        let m = ModelFile::load(&path)?;
        let list = match count {
            Some(r) => make_mask_list(
                r,
                m.arch().dim,
                &m.arch().hidden,
                m.train.seed,
                m.arch().use_direct,
            )?,
            None => m.test_masks(None)?,
        };
        params = Some(m.params);
        list
    } else if let Some(path) = config {
        let cfg = RunConfig::load(&path)?;
        let arch = cfg.architecture(cfg.dim()?);
        arch.validate()?;
        match count {
            Some(r) => make_mask_list(r, arch.dim, &arch.hidden, cfg.train.seed, arch.use_direct)?,
            None => MaskSchedule::new(&arch, cfg.train.mask_policy, cfg.train.seed)?
                .evaluation_masks(Stream::TestMasks, cfg.train.test_masks_for_unlimited)?,
        }
    } else if !dumps.is_empty() {
        let mut sets = Vec::new();
        for p in &dumps {
            let text = std::fs::read_to_string(p).map_err(io_at(p))?;
            sets.extend(
                split_dump_file(&text)
                    .into_iter()
                    .map(|chunk| read_dump(chunk.as_bytes()))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        sets
    } else {
        return Err(MadeError::Config(
            "verify needs --model, --config or --dump".into(),
        ));
    };

    if let Some(path) = &out {
        let mut w = create(path)?;
        for (i, m) in mask_sets.iter().enumerate() {
            if i > 0 {
                writeln!(w).map_err(io_at(path))?;
            }
            write_dump(m, &mut w).map_err(io_at(path))?;
        }
        w.flush().map_err(io_at(path))?;
    }

    let mut failures = 0;
    for (i, masks) in mask_sets.iter().enumerate() {
        let report = verify_autoregressive(masks);
        if !report.passed() {
            failures += 1;
            println!("mask {i}: {report}");
        }
        if let Some(p) = &params {
            if p.arch.dim <= 10 {
                let dev = normalization_deviation(p, masks)?;
                if dev >= NORM_TOLERANCE {
                    failures += 1;
                    println!("mask {i}: probabilities sum to 1 {dev:+e}");
                }
            }
        }
    }
    if failures == 0 {
        println!("verified {} mask set(s): ok", mask_sets.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "verified {} mask set(s): {failures} failure(s)",
            mask_sets.len()
        );
        Ok(ExitCode::from(1))
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

pub fn gradcheck(seed_value: u64) -> Result<ExitCode> {
    let mut ok = true;
    for activation in [Activation::Softplus, Activation::Relu] {
        let arch = Architecture::new(5, vec![7, 6], activation)
            .with_direct(true)
            .with_conditioning(true);
        let mut rng = seed::stream_rng(seed_value, Stream::Init, 0);
        let params = Params::random_uniform(&arch, 1.0, &mut rng)?;
        let masks = make_mask_list(1, arch.dim, &arch.hidden, seed_value, true)?.remove(0);
        let x = eval::sample(&params, &masks, 4, &mut rng)?.mapv(f64::from);
        let report = eval::gradient_check(&params, &masks, x.view(), GRADCHECK_STEP)?;
        let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!(
            "activation={activation} max_rel_err={:e} checked={} excluded={} {}",
            report.max_rel_error,
            report.checked,
            report.excluded,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn normcheck(
    model: Option<PathBuf>,
    seed_value: u64,
    count: Option<usize>,
) -> Result<ExitCode> {
    let (params, masks) = match model {
        Some(path) => {
            let m = ModelFile::load(&path)?;
            if m.arch().dim > MAX_ENUMERATION_DIM {
                return Err(MadeError::Refused(format!(
                    "model has D={}, enumeration is limited to D <= {MAX_ENUMERATION_DIM}",
                    m.arch().dim
                )));
            }
            let mut masks = m.test_masks(None)?;
            masks.truncate(count.unwrap_or(masks.len()).max(1));
            (m.params, masks)
        }
        None => {
            let arch = Architecture::new(8, vec![16, 16], Activation::Relu).with_direct(true);
            let params = Params::random_uniform(
                &arch,
                1.0,
                &mut seed::stream_rng(seed_value, Stream::Init, 0),
            )?;
            let masks =
                make_mask_list(count.unwrap_or(1), arch.dim, &arch.hidden, seed_value, true)?;
            (params, masks)
        }
    };
    let mut ok = true;
    for (i, m) in masks.iter().enumerate() {
        let sum = eval::brute_force_pmf(&params, m)?.sum();
        let pass = (sum - 1.0).abs() < NORM_TOLERANCE;
        ok &= pass;
        println!(
            "mask {i}: sum={sum} deviation={:e} {}",
            (sum - 1.0).abs(),
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
