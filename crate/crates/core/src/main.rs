use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use cutpaste::color::{image_descriptors, match_top_k, MatchTable};
use cutpaste::config::{parse_config, TrainConfig};
use cutpaste::dataset::{hash_inputs, load_labeled, load_unlabeled, read_manifest, write_manifest, ManifestEntry};
use cutpaste::experiment::{
    ablation_matrix, comparison_matrix, log_lines, run_experiment, write_training_outputs, ExperimentData, MatrixSpec,
};
use cutpaste::gradcheck::{gradcheck, GradcheckConfig};
use cutpaste::io::{save_gray_png, save_mask_png, save_png};
use cutpaste::net::{ModelParams, SegNet};
use cutpaste::synth::{synthesize_with_retries, Matcher, SynthConfig};
use cutpaste::toy::{gen_dataset, ToyConfig};
use cutpaste::train::{evaluate, train};
use cutpaste::{Error, Rng};

#[derive(Parser)]
#[command(name = "cutpaste", version, about = "Cut-paste consistency learning for binary lesion segmentation")]
struct Cli {
    /// Overrides the seed of any config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; runs are bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Labeled-only baseline against cut-paste consistency.
    Comparison,
    /// Synthesis toggles x background variants x lambda_u sweep.
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy benchmark.
    Toygen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k color matching of unlabeled to labeled images (JSON lines).
    Match {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = cutpaste::color::DEFAULT_TOP_K)]
        k: usize,
    },
    /// Write one synthetic sample per unlabeled image.
    Synth {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        /// Match table from `match`; computed on the fly when absent.
        #[arg(long)]
        matches: Option<PathBuf>,
        /// Synthesis config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmentation network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate saved parameters on a labeled manifest.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = cutpaste::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Also write per-image probability maps as PNG.
        #[arg(long)]
        save_maps: bool,
    },
    /// Finite-difference check of the full-network gradients.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        params: usize,
        #[arg(long)]
        zero_input: bool,
    },
    /// Run a matrix of configs over seeds and tabulate test metrics.
    Experiment {
        /// Matrix JSON: {"base": {...}, "runs": [{"name", "overrides"}], "seeds": [...]}.
        #[arg(long, conflicts_with = "preset")]
        matrix: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Base config for presets.
        #[arg(long, requires = "preset")]
        config: Option<PathBuf>,
        /// Comma-separated seeds for presets.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidArgument { name: "threads".into(), detail: "must be at least 1".into() }.into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
    }
    let global = Globals { seed: cli.seed, deterministic: cli.deterministic };
    match cli.command {
        Command::Toygen { config, out } => toygen(&global, config.as_deref(), &out),
        Command::Match { labeled, unlabeled, out, k } => match_cmd(&labeled, &unlabeled, &out, k),
        Command::Synth { labeled, unlabeled, matches, config, out } => {
            synth_cmd(&global, &labeled, &unlabeled, matches.as_deref(), config.as_deref(), &out)
        }
        Command::Train { config, labeled, unlabeled, out } => {
            train_cmd(&global, config.as_deref(), &labeled, unlabeled.as_deref(), &out)
        }
        Command::Eval { params, test, out, threshold, save_maps } => {
            eval_cmd(&params, &test, &out, threshold, save_maps)
        }
        Command::Gradcheck { params, zero_input } => {
            let cfg = GradcheckConfig { params_per_variant: params, zero_input, ..GradcheckConfig::default() };
            let report = gradcheck(&cfg, &Rng::new(global.seed.unwrap_or(0), 0))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Experiment { matrix, preset, config, seeds, labeled, unlabeled, test, out } => experiment_cmd(
            &global,
            matrix.as_deref(),
            preset,
            config.as_deref(),
            seeds,
            [&labeled, &unlabeled, &test],
            &out,
        ),
    }
}

struct Globals {
    seed: Option<u64>,
    deterministic: bool,
}

impl Globals {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.deterministic |= self.deterministic;
    }
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| cutpaste::Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("{}: `{}`: {}", path.display(), e.path(), e.inner())).into())
}

fn load_train_config(path: Option<&Path>, global: &Globals) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => TrainConfig::default(),
    };
    global.apply(&mut cfg);
    Ok(cfg)
}

fn toygen(global: &Globals, config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: ToyConfig = match config {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    create_dir(out)?;
    let paths = gen_dataset(&cfg, out)?;
    std::fs::write(out.join("toy_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("{}", serde_json::to_string_pretty(&paths)?);
    Ok(())
}

fn match_cmd(labeled: &Path, unlabeled: &Path, out: &Path, k: usize) -> anyhow::Result<()> {
    let lab = load_labeled(&read_manifest(labeled)?)?;
    let (_, unl) = load_unlabeled(&read_manifest(unlabeled)?)?;
    let table = match_top_k(&image_descriptors(&unl), &image_descriptors(&lab.images), k)?;
    std::fs::write(out, table.to_json_lines()?).map_err(|e| Error::Io { path: out.into(), source: e })?;
    Ok(())
}

fn synth_cmd(
    global: &Globals,
    labeled: &Path,
    unlabeled: &Path,
    matches: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg: SynthConfig = match config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    let lab = load_labeled(&read_manifest(labeled)?)?;
    let (ids, unl) = load_unlabeled(&read_manifest(unlabeled)?)?;
    let table = match matches {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
            Some(MatchTable::from_json_lines(&text)?)
        }
        None if cfg.color_matching => {
            Some(match_top_k(&image_descriptors(&unl), &image_descriptors(&lab.images), cfg.top_k)?)
        }
        None => None,
    };
    if let Some(t) = &table {
        if t.rows.len() != unl.len() {
            return Err(Error::InvalidArgument {
                name: "matches".into(),
                detail: format!("{} rows for {} unlabeled images", t.rows.len(), unl.len()),
            }
            .into());
        }
    }
    let matcher = table.as_ref().map_or(Matcher::Random(lab.len()), Matcher::TopK);
    create_dir(out)?;
    let rng = Rng::new(global.seed.unwrap_or(0), 0);
    let pairs = lab.pairs();
    let mut manifest = Vec::new();
    let mut provenance = String::new();
    let mut rejected = 0;
    for (u, (id, img)) in ids.iter().zip(&unl).enumerate() {
        match synthesize_with_retries(u, img, &pairs, matcher, &cfg, &rng.derive(&[u as u64]))? {
            Some(s) => {
                let image = PathBuf::from(format!("{id}_synth.png"));
                let mask = PathBuf::from(format!("{id}_synth_mask.png"));
                save_png(&s.blended, out.join(&image))?;
                save_mask_png(&s.mask, out.join(&mask))?;
                let mut prov = serde_json::to_value(s.provenance)?;
                prov["id"] = serde_json::Value::String(id.clone());
                prov["labeled_id"] = serde_json::Value::String(lab.ids[s.provenance.labeled].clone());
                provenance.push_str(&prov.to_string());
                provenance.push('\n');
                manifest.push(ManifestEntry { image, mask: Some(mask), id: id.clone() });
            }
            None => rejected += 1,
        }
    }
    write_manifest(&manifest, &out.join("synth.jsonl"))?;
    std::fs::write(out.join("provenance.jsonl"), provenance)?;
    println!("{}", serde_json::json!({"synthesized": manifest.len(), "rejected": rejected}));
    Ok(())
}

fn train_cmd(
    global: &Globals,
    config: Option<&Path>,
    labeled: &Path,
    unlabeled: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = load_train_config(config, global)?;
    let lab = load_labeled(&read_manifest(labeled)?)?;
    let unl = match unlabeled {
        Some(p) => load_unlabeled(&read_manifest(p)?)?.1,
        None => Vec::new(),
    };
    let mut files: Vec<&Path> = config.into_iter().collect();
    files.retain(|p| p.exists());
    let manifests: Vec<&Path> = std::iter::once(labeled).chain(unlabeled).collect();
    let hash = hash_inputs(&files, &manifests)?;
    create_dir(out)?;
    let result = train(&cfg, &lab, &unl, |e| {
        if let Ok(line) = serde_json::to_string(e) {
            eprintln!("{line}");
        }
    })?;
    write_training_outputs(out, &cfg, &result, &hash)?;
    debug_assert_eq!(log_lines(&result.log)?.lines().count(), result.log.len());
    println!(
        "{}",
        serde_json::json!({
            "epochs_run": result.log.len(),
            "best_epoch": result.best_epoch,
            "stopped_early": result.stopped_early,
            "inputs_sha256": hash,
        })
    );
    Ok(())
}

fn eval_cmd(params: &Path, test: &Path, out: &Path, threshold: f64, save_maps: bool) -> anyhow::Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument { name: "threshold".into(), detail: "must lie in (0, 1)".into() }.into());
    }
    let p = ModelParams::load(params)?;
    let set = load_labeled(&read_manifest(test)?)?;
    let net = SegNet::new(p.architecture());
    let report = evaluate(&net, &p, &set, threshold)?;
    create_dir(out)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    if save_maps {
        let maps = out.join("maps");
        create_dir(&maps)?;
        for (id, img) in set.ids.iter().zip(&set.images) {
            let pm = net.predict(&p, img)?;
            save_gray_png(pm.data(), pm.height(), pm.width(), maps.join(format!("{id}_prob.png")))?;
        }
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn experiment_cmd(
    global: &Globals,
    matrix: Option<&Path>,
    preset: Option<Preset>,
    config: Option<&Path>,
    seeds: Vec<u64>,
    [labeled, unlabeled, test]: [&PathBuf; 3],
    out: &Path,
) -> anyhow::Result<()> {
    let (mut entries, seeds) = match (matrix, preset) {
        (Some(m), _) => {
            let spec: MatrixSpec = read_json(m)?;
            (spec.entries()?, spec.seeds)
        }
        (None, Some(p)) => {
            let base = load_train_config(config, global)?;
            let entries = match p {
                Preset::Comparison => comparison_matrix(&base),
                Preset::Ablation => ablation_matrix(&base),
            };
            (entries, seeds)
        }
        (None, None) => {
            return Err(
                Error::InvalidArgument { name: "matrix".into(), detail: "give --matrix or --preset".into() }.into()
            )
        }
    };
    for e in &mut entries {
        e.config.deterministic |= global.deterministic;
    }
    let lab = load_labeled(&read_manifest(labeled)?)?;
    let (_, unl) = load_unlabeled(&read_manifest(unlabeled)?)?;
    let tst = load_labeled(&read_manifest(test)?)?;
    let mut files: Vec<&Path> = matrix.into_iter().chain(config).collect();
    files.retain(|p| p.exists());
    let hash = hash_inputs(&files, &[labeled, unlabeled, test])?;
    let data = ExperimentData { labeled: &lab, unlabeled: &unl, test: &tst, inputs_hash: hash };
    let report = run_experiment(&entries, &seeds, &data, Some(out), |r| {
        if let Ok(line) = serde_json::to_string(r) {
            eprintln!("{line}");
        }
    })?;
    print!("{}", report.to_table());
    Ok(())
}
