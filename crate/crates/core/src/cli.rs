//! Command-line driver: `generate`, `train`, `eval`, `infer`, `render-attention`, `erf`.
//!
//! Settings come from an optional `--config` file of `key = value` lines; every
//! key in [`SCHEMA`] can also be given as a `--key value` flag, which wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Arg, ArgAction, Command};
use log::info;

use crate::erf::{
    default_channels, erf_aggregate, gaussian_smooth, read_ppm_image, theoretical_field, write_heat_overlay,
    write_overlay_ppm, write_pgm, write_ppm_image,
};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{GlimpseKind, Model, ModelConfig, ANSWER_YES};
use crate::shapes::{
    audit_labels, generate_dataset, load_split, manifest, named_size, pad_tokens, save_split, tokenize, GenerateOptions,
    Query, Split,
};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, EvalReport, TrainConfig};

/// `(key, description)` for every recognized setting besides the model keys.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "master seed (required for generate and train)"),
    ("size", "dataset size: small, medium, large or TRAIN,TEST counts"),
    ("balance", "balance yes/no answers per query string (true/false)"),
    ("occupancy", "per-cell occupancy probability"),
    ("out_dir", "output directory"),
    ("train", "training split file"),
    ("test", "test split file"),
    ("split", "split file to evaluate or sample from"),
    ("checkpoint", "model checkpoint file"),
    ("lr", "single learning rate (overrides the default grid)"),
    ("lr_grid", "comma-separated learning rates tried in turn, default 1e-3,5e-4,2e-4; the best run is kept"),
    ("batch_size", "mini-batch size"),
    ("epochs", "training epochs"),
    ("eval_every", "evaluate every N epochs"),
    ("eval_train", "re-score the training split after each evaluation (true/false)"),
    ("image", "input PPM image for infer"),
    ("query", "query text for infer"),
    ("index", "sample index for render-attention"),
    ("row", "ERF feature row (default: center)"),
    ("col", "ERF feature column (default: center)"),
    ("channels", "ERF channel count, spread evenly"),
    ("sigma", "ERF Gaussian smoothing sigma in pixels"),
    ("images", "ERF image count"),
    ("report", "write the metrics report to this file"),
    ("log_level", "error, warn, info, debug or trace"),
];

const COMMANDS: &[(&str, &str)] = &[
    ("generate", "generate train/test splits and manifests"),
    ("train", "train a model and keep the best checkpoint"),
    ("eval", "evaluate a checkpoint on a split"),
    ("infer", "answer a query about a PPM image and render attention"),
    ("render-attention", "render attention for one sample of a split"),
    ("erf", "effective receptive field of the conv stack"),
];

fn command() -> Command {
    let mut keys: Vec<(&str, String)> = SCHEMA.iter().map(|(k, h)| (*k, h.to_string())).collect();
    keys.extend(ModelConfig::KEYS.iter().map(|k| (*k, format!("model setting `{k}`"))));
    let mut root = Command::new("gridattn")
        .about("Structured grid-CRF visual attention")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value settings file"),
        );
        for (k, h) in &keys {
            sub = sub.arg(
                Arg::new(*k)
                    .long(*k)
                    .value_name("VALUE")
                    .help(h.clone())
                    .action(ArgAction::Set),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

/// Parses arguments and runs one command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let settings = match collect_settings(sub) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let level = settings.get("log_level").unwrap_or("info").to_string();
    let _ = env_logger::Builder::new().parse_filters(&level).format_timestamp(None).try_init();
    match run(name, &settings) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn collect_settings(sub: &clap::ArgMatches) -> Result<KeyValues> {
    let mut kv = match sub.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::new(),
    };
    let known: Vec<&str> = SCHEMA.iter().map(|(k, _)| *k).chain(ModelConfig::KEYS).collect();
    if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
        return Err(Error::Config(format!("unknown config key {k:?}")));
    }
    for k in known {
        if let Some(v) = sub.get_one::<String>(k) {
            kv.set(k, v);
        }
    }
    Ok(kv)
}

pub fn run(command: &str, s: &KeyValues) -> Result<()> {
    match command {
        "generate" => cmd_generate(s),
        "train" => cmd_train(s),
        "eval" => cmd_eval(s),
        "infer" => cmd_infer(s),
        "render-attention" => cmd_render(s),
        "erf" => cmd_erf(s),
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}

fn out_dir(s: &KeyValues) -> Result<PathBuf> {
    let dir = PathBuf::from(s.get("out_dir").unwrap_or("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn path_key(s: &KeyValues, key: &str) -> Result<PathBuf> {
    s.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing required setting {key}")))
}

fn parse_sizes(text: &str) -> Result<(usize, usize)> {
    if let Some((a, b)) = text.split_once(',') {
        let p = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad size {text:?}")));
        return Ok((p(a)?, p(b)?));
    }
    named_size(text)
}

fn cmd_generate(s: &KeyValues) -> Result<()> {
    let seed: u64 = s.require("seed")?;
    let (n_train, n_test) = parse_sizes(s.get("size").unwrap_or("small"))?;
    let opts = GenerateOptions {
        balance: s.parse_or("balance", true)?,
        occupancy: s.parse_or("occupancy", 0.5)?,
    };
    let dir = out_dir(s)?;
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let g = generate_dataset(seed, n, split, opts)?;
        let verified = audit_labels(&g.samples)?;
        let path = dir.join(format!("{}.svds", split.name()));
        save_split(&path, &g.samples)?;
        std::fs::write(dir.join(format!("{}.manifest", split.name())), manifest(seed, split, opts, &g).to_text())?;
        println!(
            "{}: {} samples -> {} (labels verified: {verified}/{}, dropped queries: {})",
            split.name(),
            g.samples.len(),
            path.display(),
            g.samples.len(),
            g.dropped.len()
        );
    }
    Ok(())
}

fn train_config(s: &KeyValues) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr: s.parse_or("lr", d.lr)?,
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        epochs: s.parse_or("epochs", d.epochs)?,
        seed: s.require("seed")?,
        eval_every: s.parse_or("eval_every", d.eval_every)?,
        eval_train: s.parse_or("eval_train", d.eval_train)?,
    })
}

/// Learning rates tried when neither `lr` nor `lr_grid` is given.
pub const DEFAULT_LR_GRID: [f64; 3] = [1e-3, 5e-4, 2e-4];

fn lr_grid(s: &KeyValues) -> Result<Vec<f64>> {
    match s.get("lr_grid") {
        None if s.contains("lr") => Ok(vec![s.require("lr")?]),
        None => Ok(DEFAULT_LR_GRID.to_vec()),
        Some(g) => g
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad lr_grid entry {x:?}"))))
            .collect(),
    }
}

fn cmd_train(s: &KeyValues) -> Result<()> {
    let base = train_config(s)?;
    let model_cfg = ModelConfig::from_kv(s)?;
    let train_set = load_split(&path_key(s, "train")?)?;
    let test_set = match s.get("test") {
        Some(p) => load_split(Path::new(p))?,
        None => Vec::new(),
    };
    let dir = out_dir(s)?;
    let ckpt = dir.join("model.svac");
    let mut report = s.clone();
    report.merge(&model_cfg.to_kv());
    let start = Instant::now();
    let mut best_overall: Option<f64> = None;
    for lr in lr_grid(s)? {
        let cfg = TrainConfig { lr, ..base.clone() };
        let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
        info!("training {} with lr {lr} on {} samples", model_cfg.variant, train_set.len());
        let mut run_best: Option<f64> = None;
        let outcome = train(&mut model, &train_set, &test_set, &cfg, |m, model, adam, improved| {
            let epoch = m.to_kv();
            for k in epoch.keys() {
                report.set(&format!("lr{lr}.{k}"), epoch.get(k).unwrap());
            }
            let score = m.test.or(m.train_eval).map(|r| r.accuracy());
            if improved {
                run_best = score;
            }
            // the checkpoint on disk always holds the best model seen across the whole grid
            if improved && score.is_some_and(|sc| best_overall.is_none_or(|b| sc > b)) {
                best_overall = score;
                model.save(&ckpt, Some(adam))?;
                info!("epoch {}: new best checkpoint ({:.4})", m.epoch, score.unwrap());
            }
            Ok(())
        })?;
        report.set(&format!("lr{lr}.best_epoch"), outcome.best_epoch);
        if let Some(b) = run_best {
            report.set(&format!("lr{lr}.best_score"), b);
        }
        if best_overall.is_none() {
            model.save(&ckpt, None)?;
        }
    }
    report.set("seconds", start.elapsed().as_secs_f64());
    if let Some(b) = best_overall {
        report.set("best_score", b);
    }
    let best = Model::load(&ckpt, &KeyValues::new())?;
    if !test_set.is_empty() {
        let r = evaluate(&best, &test_set)?;
        report.merge(&r.to_kv("final_test_"));
        print!("{}", r.table());
    }
    let path = s.get("report").map(PathBuf::from).unwrap_or_else(|| dir.join("metrics.txt"));
    std::fs::write(&path, report.to_text())?;
    println!("checkpoint: {}\nmetrics: {}", ckpt.display(), path.display());
    Ok(())
}

fn model_overrides(s: &KeyValues) -> KeyValues {
    let mut kv = KeyValues::new();
    for k in ModelConfig::KEYS {
        if let Some(v) = s.get(k) {
            kv.set(k, v);
        }
    }
    kv
}

fn load_model(s: &KeyValues) -> Result<Model> {
    Model::load(&path_key(s, "checkpoint")?, &model_overrides(s))
}

pub fn report_kv(r: &EvalReport) -> KeyValues {
    let mut kv = r.to_kv("");
    kv.set("recombined_accuracy", r.recombined());
    kv
}

fn cmd_eval(s: &KeyValues) -> Result<()> {
    let model = load_model(s)?;
    let split = path_key(s, "split").or_else(|_| path_key(s, "test"))?;
    let samples = load_split(&split)?;
    let r = evaluate(&model, &samples)?;
    print!("{}", r.table());
    let kv = report_kv(&r);
    match s.get("report") {
        Some(p) => std::fs::write(p, kv.to_text())?,
        None => print!("{}", kv.to_text()),
    }
    Ok(())
}

/// Upsamples per-region values onto the image grid.
fn region_heat(values: &[f64], image_size: usize, grid: usize) -> Vec<f64> {
    let cell = image_size / grid;
    (0..image_size * image_size)
        .map(|p| values[(p / image_size / cell) * grid + (p % image_size) / cell])
        .collect()
}

/// Writes one overlay per attention map; returns the file names.
fn render_attention(model: &Model, image: &Tensor, tokens: &[u16], dir: &Path) -> Result<Vec<PathBuf>> {
    let p = model.predict(image, tokens)?;
    let size = model.config.image_size;
    let grid = model.config.grid_h;
    let mut written = Vec::new();
    let mut emit = |name: String, values: &[f64]| -> Result<()> {
        let path = dir.join(name);
        write_heat_overlay(&path, &region_heat(values, size, grid), image)?;
        written.push(path);
        Ok(())
    };
    for (g, a) in p.artifacts.glimpses.iter().enumerate() {
        match a.kind {
            GlimpseKind::MeanField => {
                for (t, b) in a.trajectory.iter().enumerate() {
                    emit(format!("glimpse{g}_mf_step{t}.ppm"), b)?;
                }
            }
            GlimpseKind::Lbp => {
                emit(format!("glimpse{g}_lbp_unary.ppm"), &a.unary)?;
                emit(format!("glimpse{g}_lbp_final.ppm"), &a.map)?;
            }
            GlimpseKind::Softmax => emit(format!("glimpse{g}_softmax.ppm"), &a.map)?,
            GlimpseKind::Sigmoid => emit(format!("glimpse{g}_sigmoid.ppm"), &a.map)?,
        }
    }
    let answer = if p.answer == ANSWER_YES { "yes" } else { "no" };
    println!("answer: {answer} (confidence {:.4})", p.probabilities[p.answer]);
    for a in &p.artifacts.glimpses {
        println!("{:?} map: {}", a.kind, fmt_values(&a.map));
    }
    Ok(written)
}

fn fmt_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn cmd_infer(s: &KeyValues) -> Result<()> {
    let model = load_model(s)?;
    let text = s.get("query").ok_or_else(|| Error::Config("missing required setting query".into()))?;
    Query::parse(text)?;
    let tokens = pad_tokens(tokenize(text)?);
    let image = read_ppm_image(&path_key(s, "image")?)?;
    let dir = out_dir(s)?;
    for p in render_attention(&model, &image, &tokens, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_render(s: &KeyValues) -> Result<()> {
    let model = load_model(s)?;
    let samples = load_split(&path_key(s, "split").or_else(|_| path_key(s, "test"))?)?;
    let index: usize = s.parse_or("index", 0)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| Error::Config(format!("index {index} outside split of {}", samples.len())))?;
    let dir = out_dir(s)?;
    write_ppm_image(&dir.join("input.ppm"), &sample.image)?;
    println!(
        "query: {} (truth: {})",
        sample.query_text(),
        if sample.answer == 1 { "yes" } else { "no" }
    );
    for p in render_attention(&model, &sample.image, &sample.tokens, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_erf(s: &KeyValues) -> Result<()> {
    let model = load_model(s)?;
    let samples = load_split(&path_key(s, "split").or_else(|_| path_key(s, "test"))?)?;
    let n: usize = s.parse_or("images", 32)?;
    let images: Vec<Tensor> = samples.iter().take(n).map(|x| x.image.clone()).collect();
    let grid = model.config.grid_h;
    let loc = (s.parse_or("row", grid / 2)?, s.parse_or("col", grid / 2)?);
    let channels = default_channels(model.config.n_i, s.parse_or("channels", 32)?);
    let sigma: f64 = s.parse_or("sigma", 4.0)?;
    let layers = model.conv.layers();
    let map = erf_aggregate(&layers, &model.params, &images, loc, &channels)?;
    let field = theoretical_field(&layers, &model.params, images[0].shape(), loc)?;
    let smooth = gaussian_smooth(&map.values, map.height, map.width, sigma)?;
    let dir = out_dir(s)?;
    write_pgm(&dir.join("erf_raw.pgm"), &map.values, map.height, map.width)?;
    write_pgm(&dir.join("erf_smooth.pgm"), &smooth, map.height, map.width)?;
    write_overlay_ppm(&dir.join("erf_overlay.ppm"), &smooth, &images[0])?;
    let inside: f64 = (field.0..=field.1)
        .flat_map(|r| (field.2..=field.3).map(move |c| (r, c)))
        .map(|(r, c)| map.at(r, c))
        .sum();
    let total = map.total();
    let mut kv = KeyValues::new();
    kv.set("row", loc.0);
    kv.set("col", loc.1);
    kv.set("images", map.images);
    kv.set("channels", channels.len());
    kv.set("sigma", sigma);
    kv.set("field", format!("{},{},{},{}", field.0, field.1, field.2, field.3));
    if let Some(b) = map.support() {
        kv.set("support", format!("{},{},{},{}", b.0, b.1, b.2, b.3));
    }
    kv.set("mass_inside_field", if total > 0.0 { inside / total } else { 1.0 });
    std::fs::write(dir.join("erf.txt"), kv.to_text())?;
    print!("{}", kv.to_text());
    Ok(())
}

