//! Single command-line entry point wiring data generation, stage-one
//! fitting, training, decoding, and benchmarking.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ufcgen::bench;
use ufcgen::codec::{encode_text, Codec, ControlSet, Preservation, Vocabulary};
use ufcgen::data::{make_dataset, Dataset};
use ufcgen::decode::{ar_decode, mnag_decode, pnag_decode, PnagConfig, RemaskWeighting};
use ufcgen::model::{Mode, Model};
use ufcgen::ppm::{read_ppm, write_ppm};
use ufcgen::train::{train, train_ar, TrainConfig};
use ufcgen::vq::{
    decode_tokens, encode_image, extract_patches, fit_codebook_restarts, reconstruction_psnr,
    Codebook, TokenGrid,
};
use ufcgen::rng::Rng;

enum CliError {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

impl From<ufcgen::Error> for CliError {
    fn from(e: ufcgen::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage() -> &'static str {
    "usage: ufcgen <command> [flags]\n\
     \n\
     commands:\n\
       gen-data    write a synthetic attribute dataset (.ufcd)\n\
       fit-vq      fit the patch codebook (.ufcv) from a dataset\n\
       train       train the masked bidirectional model\n\
       train-ar    train the left-to-right baseline\n\
       generate    synthesize an image from controls\n\
       benchmark   latency and forward-pass comparison of decoders\n\
       eval        compliance / preservation / reconstruction report\n\
     \n\
     run `ufcgen <command> --help` for per-command flags\n"
}

/// Parsed flags: every flag is --name value except listed booleans,
/// which are bare. Repeating a flag appends.
struct Flags {
    values: BTreeMap<String, Vec<String>>,
}

impl Flags {
    fn parse(args: &[String], bools: &[&str], known: &[&str]) -> CliResult<Flags> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument '{arg}'")))?;
            if !known.contains(&name) && !bools.contains(&name) && name != "help" {
                return Err(CliError::Usage(format!("unknown flag --{name}")));
            }
            if bools.contains(&name) || name == "help" {
                values.entry(name.to_string()).or_default().push("true".into());
                i += 1;
            } else {
                let val = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?;
                values.entry(name.to_string()).or_default().push(val.clone());
                i += 2;
            }
        }
        Ok(Flags { values })
    }

    fn has(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).and_then(|v| v.last()).map(|s| s.as_str())
    }

    fn get_all(&self, name: &str) -> Vec<&str> {
        self.values
            .get(name)
            .map(|v| v.iter().map(|s| s.as_str()).collect())
            .unwrap_or_default()
    }

    fn require(&self, name: &str) -> CliResult<&str> {
        self.get(name)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str, default: T) -> CliResult<T> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("--{name}: cannot parse '{v}'"))),
        }
    }

    fn require_num<T: std::str::FromStr>(&self, name: &str) -> CliResult<T> {
        let v = self.require(name)?;
        v.parse()
            .map_err(|_| CliError::Usage(format!("--{name}: cannot parse '{v}'")))
    }
}

fn existing(path: &str, what: &str) -> CliResult<PathBuf> {
    let p = PathBuf::from(path);
    if !p.exists() {
        return Err(CliError::Runtime(format!("missing {what} file: {path}")));
    }
    Ok(p)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{}", usage());
        return ExitCode::from(1);
    };
    let rest = &args[1..];
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "fit-vq" => cmd_fit_vq(rest),
        "train" => cmd_train(rest, false),
        "train-ar" => cmd_train(rest, true),
        "generate" => cmd_generate(rest),
        "benchmark" => cmd_benchmark(rest),
        "eval" => cmd_eval(rest),
        "--help" | "help" => {
            print!("{}", usage());
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("unknown command '{other}'\n\n{}", usage());
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn help_requested(flags: &Flags, text: &str) -> bool {
    if flags.has("help") {
        print!("{text}");
        true
    } else {
        false
    }
}

fn cmd_gen_data(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &["stratified"], &["n", "seed", "out"])?;
    if help_requested(
        &flags,
        "usage: ufcgen gen-data --n <count> --out <file.ufcd> [--seed 7] [--stratified]\n\
         \n\
         Writes a deterministic synthetic dataset of 32x32 attribute images\n\
         with paired text. --stratified cycles the 128 attribute\n\
         combinations evenly.\n",
    ) {
        return Ok(());
    }
    let n: usize = flags.require_num("n")?;
    let seed: u64 = flags.parse_num("seed", 7)?;
    let out = PathBuf::from(flags.require("out")?);
    let ds = make_dataset(n, seed, flags.has("stratified"))?;
    ds.save(&out)?;
    println!("dataset={} records={n} seed={seed}", out.display());
    Ok(())
}

fn cmd_fit_vq(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(
        args,
        &[],
        &["dataset", "k", "seed", "out", "max-iters", "restarts", "patch", "sample-patches"],
    )?;
    if help_requested(
        &flags,
        "usage: ufcgen fit-vq --dataset <file.ufcd> --out <file.ufcv> [--k 64] [--seed 7]\n\
         [--patch 4] [--max-iters 100] [--restarts 4] [--sample-patches 65536]\n\
         \n\
         Fits the stage-one patch codebook with k-means++ seeding; keeps the\n\
         best of --restarts runs by final objective. --sample-patches 0 uses\n\
         every patch in the dataset.\n",
    ) {
        return Ok(());
    }
    let dataset_path = existing(flags.require("dataset")?, "dataset")?;
    let out = PathBuf::from(flags.require("out")?);
    let k: usize = flags.parse_num("k", 64)?;
    let seed: u64 = flags.parse_num("seed", 7)?;
    let patch: usize = flags.parse_num("patch", 4)?;
    let max_iters: usize = flags.parse_num("max-iters", 100)?;
    let restarts: usize = flags.parse_num("restarts", 4)?;
    let sample: usize = flags.parse_num("sample-patches", 65536)?;

    let ds = Dataset::load(&dataset_path)?;
    let dim = patch * patch * 3;
    let mut patches = Vec::new();
    for rec in &ds.records {
        patches.extend(extract_patches(&rec.image, patch, patch)?);
    }
    let n_patches = patches.len() / dim;
    let chosen = if sample == 0 || sample >= n_patches {
        patches
    } else {
        let mut rng = Rng::substream(seed, &[0x7375]);
        let mut sub = Vec::with_capacity(sample * dim);
        for _ in 0..sample {
            let i = rng.below(n_patches);
            sub.extend_from_slice(&patches[i * dim..(i + 1) * dim]);
        }
        sub
    };
    eprintln!("fitting k={k} on {} patches", chosen.len() / dim);
    let (cb, stats) = fit_codebook_restarts(&chosen, dim, k, max_iters, seed, restarts)?;
    cb.save(&out)?;
    println!(
        "codebook={} k={k} dim={dim} iterations={} objective={:.3}",
        out.display(),
        stats.iterations,
        stats.objective.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn train_flags() -> Vec<&'static str> {
    vec![
        "dataset", "codebook", "out-dir", "config", "epochs", "batch-size", "lr", "lambda1",
        "lambda2", "lambda3", "strategy-probs", "combo-probs", "fdl-start-fraction", "seed",
        "layers", "width", "heads", "ff-width", "max-text-len",
    ]
}

fn build_train_config(flags: &Flags) -> CliResult<TrainConfig> {
    let mut cfg = match flags.get("config") {
        Some(path) => {
            let p = existing(path, "config")?;
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::Runtime(format!("reading {path}: {e}")))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    let parse_probs = |v: &str, name: &str| -> CliResult<[f64; 4]> {
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--{name}: cannot parse '{v}'")))?;
        if parts.len() != 4 {
            return Err(CliError::Usage(format!("--{name} needs four probabilities")));
        }
        Ok([parts[0], parts[1], parts[2], parts[3]])
    };
    cfg.epochs = flags.parse_num("epochs", cfg.epochs)?;
    cfg.batch_size = flags.parse_num("batch-size", cfg.batch_size)?;
    cfg.lr = flags.parse_num("lr", cfg.lr)?;
    cfg.lambda_msm = flags.parse_num("lambda1", cfg.lambda_msm)?;
    cfg.lambda_rel = flags.parse_num("lambda2", cfg.lambda_rel)?;
    cfg.lambda_fdl = flags.parse_num("lambda3", cfg.lambda_fdl)?;
    if let Some(v) = flags.get("strategy-probs") {
        cfg.strategy_probs = parse_probs(v, "strategy-probs")?;
    }
    if let Some(v) = flags.get("combo-probs") {
        cfg.combo_probs = parse_probs(v, "combo-probs")?;
    }
    cfg.fdl_start_fraction = flags.parse_num("fdl-start-fraction", cfg.fdl_start_fraction)?;
    cfg.seed = flags.parse_num("seed", cfg.seed)?;
    cfg.layers = flags.parse_num("layers", cfg.layers)?;
    cfg.width = flags.parse_num("width", cfg.width)?;
    cfg.heads = flags.parse_num("heads", cfg.heads)?;
    cfg.ff_width = flags.parse_num("ff-width", cfg.ff_width)?;
    cfg.max_text_len = flags.parse_num("max-text-len", cfg.max_text_len)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &[String], causal: bool) -> CliResult<()> {
    let flags = Flags::parse(args, &["quiet"], &train_flags())?;
    if help_requested(
        &flags,
        "usage: ufcgen train|train-ar --dataset <file.ufcd> --codebook <file.ufcv>\n\
         --out-dir <dir> [--config train.cfg] [--epochs 20] [--batch-size 16]\n\
         [--lr 1e-3] [--lambda1 1.0] [--lambda2 0.5] [--lambda3 0.5]\n\
         [--strategy-probs 0.70,0.10,0.10,0.10] [--combo-probs 0.20,0.55,0.20,0.05]\n\
         [--fdl-start-fraction 0.25] [--seed 7] [--layers 2] [--width 64]\n\
         [--heads 4] [--ff-width 256] [--max-text-len 8] [--quiet]\n\
         \n\
         Flags override values from --config. Writes one checkpoint per\n\
         epoch plus model.ufcb (or ar-model.ufcb) and vocab.txt in --out-dir.\n",
    ) {
        return Ok(());
    }
    let dataset_path = existing(flags.require("dataset")?, "dataset")?;
    let codebook_path = existing(flags.require("codebook")?, "codebook")?;
    let out_dir = PathBuf::from(flags.require("out-dir")?);
    let mut cfg = build_train_config(&flags)?;
    cfg.progress = !flags.has("quiet");

    let ds = Dataset::load(&dataset_path)?;
    let cb = Codebook::load(&codebook_path)?;
    let outcome = if causal {
        train_ar(&ds, &cb, &cfg, &out_dir)?
    } else {
        train(&ds, &cb, &cfg, &out_dir)?
    };
    println!(
        "model={} epochs={} final_loss={:.4} wall_seconds={:.1}",
        out_dir
            .join(if causal { "ar-model.ufcb" } else { "model.ufcb" })
            .display(),
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().unwrap_or(&f64::NAN),
        outcome.wall_seconds
    );
    Ok(())
}

fn load_world(flags: &Flags, checkpoint_flag: &str) -> CliResult<(Model, Codebook, Codec)> {
    let ckpt = existing(flags.require(checkpoint_flag)?, "checkpoint")?;
    let cb_path = existing(flags.require("codebook")?, "codebook")?;
    let vocab_path = existing(flags.require("vocab")?, "vocabulary")?;
    let model = Model::load(&ckpt)?;
    let codebook = Codebook::load(&cb_path)?;
    let vocab = Vocabulary::load_words(&vocab_path, codebook.k())?;
    if vocab.total_size() != model.config.vocab_size {
        return Err(CliError::Runtime(format!(
            "vocabulary size {} does not match checkpoint vocab {}",
            vocab.total_size(),
            model.config.vocab_size
        )));
    }
    let side = (model.config.n_target as f64).sqrt() as usize;
    if side * side != model.config.n_target {
        return Err(CliError::Runtime("checkpoint target grid is not square".into()));
    }
    let codec = Codec::new(vocab, side, side);
    Ok((model, codebook, codec))
}

fn pnag_config(flags: &Flags) -> CliResult<PnagConfig> {
    let mut cfg = PnagConfig::default();
    cfg.candidates = flags.parse_num("b", cfg.candidates)?;
    cfg.score_mix = flags.parse_num("sigma", cfg.score_mix)?;
    cfg.alpha = flags.parse_num("alpha", cfg.alpha)?;
    cfg.beta = flags.parse_num("beta", cfg.beta)?;
    cfg.max_iterations = flags.parse_num("t-max", cfg.max_iterations)?;
    cfg.patience = flags.parse_num("patience", cfg.patience)?;
    cfg.temperature = flags.parse_num("temperature", cfg.temperature)?;
    cfg.greedy = flags.has("greedy");
    cfg.parallel_candidates = flags.has("parallel");
    if let Some(w) = flags.get("remask-weighting") {
        cfg.remask_weighting = match w {
            "inverse_confidence" | "inverse" => RemaskWeighting::InverseConfidence,
            "confidence" => RemaskWeighting::Confidence,
            other => {
                return Err(CliError::Usage(format!(
                    "--remask-weighting: expected inverse_confidence or confidence, got '{other}'"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// "r0,c0,r1,c1:source.ppm" in target-grid cells; rows [r0,r1), cols [c0,c1).
fn parse_region_spec(spec: &str) -> CliResult<(usize, usize, usize, usize, PathBuf)> {
    let (coords, path) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("expected r0,c0,r1,c1:file.ppm, got '{spec}'")))?;
    let nums: Vec<usize> = coords
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad region coordinates in '{spec}'")))?;
    if nums.len() != 4 || nums[2] <= nums[0] || nums[3] <= nums[1] {
        return Err(CliError::Usage(format!("bad region '{spec}'")));
    }
    Ok((nums[0], nums[1], nums[2], nums[3], PathBuf::from(path)))
}

fn cmd_generate(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(
        args,
        &["greedy", "parallel"],
        &[
            "checkpoint", "codebook", "vocab", "text", "visual", "preserve", "method", "out",
            "trace", "seed", "b", "sigma", "alpha", "beta", "t-max", "patience", "temperature",
            "remask-weighting",
        ],
    )?;
    if help_requested(
        &flags,
        "usage: ufcgen generate --checkpoint model.ufcb --codebook cb.ufcv --vocab vocab.txt\n\
         --out out.ppm [--text \"red circle center on blue\"]\n\
         [--visual crop.ppm | --visual r0,c0,r1,c1:source.ppm]...\n\
         [--preserve r0,c0,r1,c1:source.ppm] [--method pnag|mnag|ar]\n\
         [--trace trace.ufct] [--seed 7] [--b 5] [--sigma 0.5] [--alpha 0.8]\n\
         [--beta 0.2] [--t-max 10] [--patience 3] [--temperature 1.0]\n\
         [--greedy] [--remask-weighting inverse_confidence|confidence] [--parallel]\n\
         \n\
         Regions are target-grid cells: rows [r0,r1), cols [c0,c1). With no\n\
         controls at all the model synthesizes unconditionally.\n",
    ) {
        return Ok(());
    }
    let (model, codebook, codec) = load_world(&flags, "checkpoint")?;
    let patch = codebook.patch_side()?;
    let seed: u64 = flags.parse_num("seed", 7)?;
    let cfg = pnag_config(&flags)?;

    let text = flags.get("text").map(|t| {
        let words: Vec<String> = t.split_whitespace().map(|w| w.to_string()).collect();
        encode_text(&words, &codec.vocab)
    });

    let mut visuals: Vec<TokenGrid> = Vec::new();
    for v in flags.get_all("visual") {
        if v.contains(':') {
            let (r0, c0, r1, c1, path) = parse_region_spec(v)?;
            let img = read_ppm(&existing(path.to_str().unwrap(), "visual-control image")?)?;
            visuals.push(ufcgen::train::encode_crop(
                &img, &codebook, patch, r0, c0, r1 - r0, c1 - c0,
            )?);
        } else {
            let img = read_ppm(&existing(v, "visual-control image")?)?;
            visuals.push(encode_image(&img, &codebook, patch, patch)?);
        }
    }

    let preserve = match flags.get("preserve") {
        None => None,
        Some(spec) => {
            let (r0, c0, r1, c1, path) = parse_region_spec(spec)?;
            if r1 > codec.target_h || c1 > codec.target_w {
                return Err(CliError::Usage(format!(
                    "preserve region exceeds the {}x{} target grid",
                    codec.target_h, codec.target_w
                )));
            }
            let img = read_ppm(&existing(path.to_str().unwrap(), "preservation source image")?)?;
            let grid = encode_image(&img, &codebook, patch, patch)?;
            if grid.h != codec.target_h || grid.w != codec.target_w {
                return Err(CliError::Runtime(
                    "preservation source image does not match the target grid".into(),
                ));
            }
            let mut mask = vec![false; codec.target_len()];
            let mut codes = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    mask[r * codec.target_w + c] = true;
                }
            }
            for i in 0..mask.len() {
                if mask[i] {
                    codes.push(grid.codes[i]);
                }
            }
            Some(Preservation::new(mask, codes)?)
        }
    };

    let controls = ControlSet {
        text,
        visuals,
        preserve,
    };
    let method = flags.get("method").unwrap_or("pnag");
    let out_path = PathBuf::from(flags.require("out")?);

    let (grid, trace) = match method {
        "pnag" => {
            let (g, t) = pnag_decode(&controls, &model, &codec, &cfg, seed)?;
            (g, Some(t))
        }
        "mnag" => {
            let (g, t) = mnag_decode(&controls, &model, &codec, cfg.max_iterations, seed)?;
            (g, Some(t))
        }
        "ar" => {
            if model.config.mode != Mode::Causal {
                return Err(CliError::Runtime(
                    "ar decoding needs a checkpoint trained with train-ar".into(),
                ));
            }
            (
                ar_decode(&controls, &model, &codec, cfg.temperature, cfg.greedy, seed)?,
                None,
            )
        }
        other => {
            return Err(CliError::Usage(format!(
                "--method: expected pnag, mnag, or ar, got '{other}'"
            )))
        }
    };

    let image = decode_tokens(&grid, &codebook, patch, patch)?;
    write_ppm(&image, &out_path)?;
    if let Some(t) = &trace {
        for rec in &t.iterations {
            eprintln!(
                "iteration {} selected={} score={:.4} masked={}",
                rec.t,
                rec.selected,
                rec.scores[rec.selected],
                rec.mask.iter().filter(|&&m| m).count()
            );
        }
        if let Some(path) = flags.get("trace") {
            t.save(Path::new(path))?;
        }
        println!(
            "out={} method={method} iterations={} t_max={} s_max={:.4} forward_passes={}",
            out_path.display(),
            t.iterations.len(),
            t.t_max,
            t.s_max,
            model.forward_passes()
        );
    } else {
        println!(
            "out={} method={method} forward_passes={}",
            out_path.display(),
            model.forward_passes()
        );
    }
    Ok(())
}

fn cmd_benchmark(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(
        args,
        &["greedy", "parallel"],
        &[
            "nar-checkpoint", "ar-checkpoint", "codebook", "vocab", "n", "seed", "out", "b",
            "sigma", "alpha", "beta", "t-max", "patience", "temperature", "remask-weighting",
        ],
    )?;
    if help_requested(
        &flags,
        "usage: ufcgen benchmark --nar-checkpoint model.ufcb --ar-checkpoint ar-model.ufcb\n\
         --codebook cb.ufcv --vocab vocab.txt [--n 100] [--seed 7] [--out report.txt]\n\
         [pnag flags as in generate]\n\
         \n\
         Times text-only decoding for the cached left-to-right baseline and\n\
         the refinement decoders over the same prompts (5 warm-up decodes\n\
         discarded). Wall-clock table goes to stdout; --out also writes a\n\
         key=value report.\n",
    ) {
        return Ok(());
    }
    let (nar, codebook, codec) = load_world(&flags, "nar-checkpoint")?;
    let ar_path = existing(flags.require("ar-checkpoint")?, "checkpoint")?;
    let ar = Model::load(&ar_path)?;
    let _ = &codebook;
    let n: usize = flags.parse_num("n", 100)?;
    let seed: u64 = flags.parse_num("seed", 7)?;
    let cfg = pnag_config(&flags)?;
    let stats = bench::benchmark_speed(&nar, &ar, &codec, &cfg, n, seed)?;
    print!("{}", bench::speed_table(&stats));
    let ar_stat = stats.iter().find(|s| s.name == "ar").unwrap();
    let p1_stat = stats.iter().find(|s| s.name == "pnag-b1").unwrap();
    println!(
        "wall_clock_ratio_ar_over_pnag_b1={:.3}",
        ar_stat.mean_ms / p1_stat.mean_ms
    );
    println!(
        "forward_pass_ratio_ar_over_pnag_b1={:.3}",
        ar_stat.mean_forward_passes / p1_stat.mean_forward_passes
    );
    if let Some(out) = flags.get("out") {
        let mut text = bench::speed_key_values(&stats);
        text.push_str(&format!(
            "wall_clock_ratio_ar_over_pnag_b1={:.4}\n",
            ar_stat.mean_ms / p1_stat.mean_ms
        ));
        std::fs::write(out, text).map_err(|e| CliError::Runtime(format!("writing {out}: {e}")))?;
    }
    Ok(())
}

fn cmd_eval(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(
        args,
        &["greedy", "parallel", "b10"],
        &[
            "checkpoint", "codebook", "vocab", "dataset", "prompts", "cases", "seed", "out", "b",
            "sigma", "alpha", "beta", "t-max", "patience", "temperature", "remask-weighting",
        ],
    )?;
    if help_requested(
        &flags,
        "usage: ufcgen eval --checkpoint model.ufcb --codebook cb.ufcv --vocab vocab.txt\n\
         [--dataset test.ufcd] [--prompts 200] [--cases 100] [--seed 7] [--b10]\n\
         [--out report.txt] [pnag flags as in generate]\n\
         \n\
         Reports text-only compliance for the refinement decoders (plus\n\
         B=10 with --b10), preservation exactness, and, with --dataset,\n\
         reconstruction quality of the codebook in dB.\n",
    ) {
        return Ok(());
    }
    let (model, codebook, codec) = load_world(&flags, "checkpoint")?;
    let prompts: usize = flags.parse_num("prompts", 200)?;
    let cases: usize = flags.parse_num("cases", 100)?;
    let seed: u64 = flags.parse_num("seed", 7)?;
    let base = pnag_config(&flags)?;
    let mut report = String::new();

    let mut variants = vec![
        ("pnag-b5".to_string(), PnagConfig { candidates: 5, ..base }),
        ("pnag-b1".to_string(), PnagConfig { candidates: 1, ..base }),
    ];
    if flags.has("b10") {
        variants.push(("pnag-b10".to_string(), PnagConfig { candidates: 10, ..base }));
    }
    for (name, cfg) in &variants {
        let r = bench::compliance_suite(&codec, &codebook, prompts, seed, |controls, s| {
            pnag_decode(controls, &model, &codec, cfg, s).map(|(g, _)| g)
        })?;
        let line = format!(
            "{name}.compliance={:.4} interval=[{:.4},{:.4}] prompts={}\n",
            r.rate, r.interval_low, r.interval_high, r.prompts
        );
        print!("{line}");
        report.push_str(&line);
    }
    {
        let r = bench::compliance_suite(&codec, &codebook, prompts, seed, |controls, s| {
            mnag_decode(controls, &model, &codec, base.max_iterations, s).map(|(g, _)| g)
        })?;
        let line = format!(
            "mnag.compliance={:.4} interval=[{:.4},{:.4}] prompts={}\n",
            r.rate, r.interval_low, r.interval_high, r.prompts
        );
        print!("{line}");
        report.push_str(&line);
    }
    {
        let r = bench::preservation_suite(&model, None, &codec, &codebook, cases, seed)?;
        let line = format!(
            "preservation.exact_rate={:.4} cases={}\n",
            r.exact_rate, r.cases
        );
        print!("{line}");
        report.push_str(&line);
    }
    if let Some(ds_path) = flags.get("dataset") {
        let ds = Dataset::load(&existing(ds_path, "dataset")?)?;
        let patch = codebook.patch_side()?;
        let mut worst = f64::INFINITY;
        let mut finite_sum = 0.0;
        let mut finite_count = 0usize;
        let mut exact = 0usize;
        for rec in &ds.records {
            let grid = encode_image(&rec.image, &codebook, patch, patch)?;
            let back = decode_tokens(&grid, &codebook, patch, patch)?;
            let psnr = reconstruction_psnr(&rec.image, &back)?;
            if psnr.is_finite() {
                finite_sum += psnr;
                finite_count += 1;
                worst = worst.min(psnr);
            } else {
                exact += 1;
            }
        }
        let line = format!(
            "reconstruction.exact={exact}/{} mean_psnr_db={} worst_psnr_db={}\n",
            ds.records.len(),
            if finite_count > 0 {
                format!("{:.2}", finite_sum / finite_count as f64)
            } else {
                "inf".to_string()
            },
            if worst.is_finite() {
                format!("{worst:.2}")
            } else {
                "inf".to_string()
            },
        );
        print!("{line}");
        report.push_str(&line);
    }
    if let Some(out) = flags.get("out") {
        std::fs::write(out, report)
            .map_err(|e| CliError::Runtime(format!("writing {out}: {e}")))?;
    }
    Ok(())
}
