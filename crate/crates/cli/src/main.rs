use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use compofuse::data::{dataset_hierarchy, generate_with, load_dataset, read_rgb_png, write_dataset, write_indexed_png, RgbImage, SynthParams};
use compofuse::eval::{evaluate, predict_levels, EvalOptions, EvalResolution, Protocol};
use compofuse::hierarchy::HierarchySpec;
use compofuse::nn::Mode;
use compofuse::optim::{run, Checkpoint};
use compofuse::{Error, ForwardOptions, Hierarchy, Model, Scalar, TrainConfig, Trainer, Variant};
use serde::Deserialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "compofuse", version, about = "Hierarchical part parsing with gated branch fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file with `hierarchy`, `[synth]` and `[train]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory every output is written to.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true, value_enum, default_value_t = ProtocolArg::Single)]
    protocol: ProtocolArg,
    /// Comma-separated levels to report or write, all when omitted.
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Vec<usize>,
    /// Also write per-node gate values as JSON lines.
    #[arg(long, global = true)]
    dump_gates: bool,
    /// Run in f64 so repeated runs are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Synth,
    /// Train on a dataset directory, optionally scoring a holdout directory after each epoch.
    Train { data: PathBuf, holdout: Option<PathBuf> },
    /// Score a checkpoint on a dataset directory.
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Write per-level label maps for images.
    Predict {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Print a hierarchy from a TOML file, dataset directory or checkpoint.
    InspectHierarchy { source: Option<PathBuf> },
    /// Write the gate values of every node for images.
    DumpGates {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Single,
    Multiscale,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    /// Relative to the config file.
    hierarchy: Option<PathBuf>,
    synth: SynthConfig,
    train: Option<TrainConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    count: usize,
    size: usize,
    max_distractors: usize,
    noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let p = SynthParams::default();
        Self { count: 500, size: 96, max_distractors: p.max_distractors, noise: p.noise }
    }
}

struct Session {
    cli: Cli,
    file: FileConfig,
    hierarchy: Option<Hierarchy>,
}

impl Session {
    fn load(cli: Cli) -> Result<Self> {
        let (file, hierarchy) = match &cli.config {
            None => (FileConfig::default(), None),
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let file: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let hierarchy = match &file.hierarchy {
                    Some(h) => {
                        let p = path.parent().unwrap_or(Path::new(".")).join(h);
                        Some(Hierarchy::build(HierarchySpec::load(&p)?)?)
                    }
                    None => None,
                };
                (file, hierarchy)
            }
        };
        if let Some(&bad) = cli.levels.iter().find(|&&l| l == 0) {
            bail!("--levels entries start at 1, got {bad}");
        }
        Ok(Self { cli, file, hierarchy })
    }

    fn out(&self) -> Result<PathBuf> {
        let out = self.cli.out.clone().context("--out DIR is required for this command")?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    fn eval_options(&self) -> EvalOptions {
        let protocol = match self.cli.protocol {
            ProtocolArg::Single => Protocol::single(),
            ProtocolArg::Multiscale => Protocol::multiscale(),
        };
        EvalOptions { protocol, resolution: EvalResolution::Input, levels: self.cli.levels.clone() }
    }

    fn checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if let Some(v) = self.cli.variant {
            if v != ckpt.meta.variant {
                return Err(Error::IncompatibleCheckpoint(format!("checkpoint holds {} but --variant is {v}", ckpt.meta.variant)).into());
            }
        }
        Ok(ckpt)
    }

    fn levels(&self, graph: &Hierarchy) -> Result<Vec<usize>> {
        if self.cli.levels.is_empty() {
            return Ok((1..=graph.num_levels()).collect());
        }
        if let Some(&bad) = self.cli.levels.iter().find(|&&l| l > graph.num_levels()) {
            bail!("level {bad} outside 1..={}", graph.num_levels());
        }
        Ok(self.cli.levels.clone())
    }
}

fn write_jsonl<S: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn image_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn synth(ctx: &Session) -> Result<()> {
    let out = ctx.out()?;
    let graph = ctx.hierarchy.clone().unwrap_or_else(Hierarchy::default_human);
    let s = &ctx.file.synth;
    if s.count == 0 {
        bail!("synth.count must be positive");
    }
    let params = SynthParams { max_distractors: s.max_distractors, noise: s.noise };
    let samples = generate_with(ctx.cli.seed.unwrap_or(0), s.count, s.size, &graph, &params);
    write_dataset(&out, &samples, &graph)?;
    println!("wrote {} samples of {}x{} to {}", samples.len(), s.size, s.size, out.display());
    Ok(())
}

fn train<T: Scalar>(ctx: &Session, data_dir: &Path, holdout_dir: Option<&Path>) -> Result<()> {
    let mut config = ctx.file.train.clone().unwrap_or_else(TrainConfig::desk);
    if let Some(seed) = ctx.cli.seed {
        config.seed = seed;
    }
    if let Some(v) = ctx.cli.variant {
        config.variant = v;
    }
    config.validate()?;
    let graph = match &ctx.hierarchy {
        Some(h) => h.clone(),
        None => dataset_hierarchy(data_dir)?.unwrap_or_else(Hierarchy::default_human),
    };
    let data = load_dataset(data_dir)?;
    let holdout = holdout_dir.map(load_dataset).transpose()?.unwrap_or_default();
    let out = ctx.out()?;
    fs::write(out.join("config.toml"), toml::to_string(&config)?)?;

    let mut trainer = Trainer::<T>::new(config, data, &graph)?;
    let total = trainer.total_iters;
    let every = (total / 20).max(1);
    let outcome = run(&mut trainer, &holdout, |rec| {
        if rec.step % every == 0 || rec.step + 1 == total {
            eprintln!("step {:>6}/{total} lr {:.3e} loss {:.4}", rec.step + 1, rec.lr, rec.loss);
        }
    })?;
    outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
    write_jsonl(&out.join("trace.jsonl"), &outcome.trace)?;
    if !outcome.epochs.is_empty() {
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&outcome.epochs)?)?;
        if let Some(last) = outcome.epochs.last() {
            print!("{}", last.report.table());
        }
    }
    println!("checkpoint written to {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn eval<T: Scalar>(ctx: &Session, ckpt_path: &Path, data_dir: &Path) -> Result<()> {
    let ckpt = ctx.checkpoint(ckpt_path)?;
    let model: Model<T> = ckpt.model()?;
    ctx.levels(&model.graph)?;
    let data = load_dataset(data_dir)?;
    let report = evaluate(&model, &data, &ctx.eval_options())?;
    let out = ctx.out()?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

/// Gate records of one image, tagged with its name.
fn gate_rows<T: Scalar>(model: &Model<T>, image: &RgbImage, name: &str) -> Result<Vec<serde_json::Value>> {
    let mut g = compofuse::autograd::Graph::no_grad();
    let x = g.constant(image.to_tensor::<T>());
    let out = model.forward(&mut g, x, &ForwardOptions::new(Mode::Eval))?;
    let mut rows = Vec::new();
    for r in model.gate_records(&g, &out) {
        let mut v = serde_json::to_value(&r)?;
        v.as_object_mut().expect("record is an object").insert("image".into(), name.into());
        rows.push(v);
    }
    Ok(rows)
}

fn read_images(paths: &[PathBuf]) -> Result<Vec<(String, RgbImage)>> {
    paths.iter().map(|p| Ok((image_stem(p), read_rgb_png(p)?))).collect()
}

fn predict<T: Scalar>(ctx: &Session, ckpt_path: &Path, paths: &[PathBuf]) -> Result<()> {
    let ckpt = ctx.checkpoint(ckpt_path)?;
    let model: Model<T> = ckpt.model()?;
    let levels = ctx.levels(&model.graph)?;
    let images = read_images(paths)?;
    let out = ctx.out()?;
    let opts = EvalOptions { levels: Vec::new(), ..ctx.eval_options() };
    let mut gates = Vec::new();
    for (name, image) in &images {
        let preds = predict_levels(&model, image, &opts)?;
        for &l in &levels {
            let path = out.join(format!("{name}_level{l}.png"));
            write_indexed_png(&path, &preds[l - 1], &model.graph.palette(l))?;
            println!("{}", path.display());
        }
        if ctx.cli.dump_gates {
            gates.extend(gate_rows(&model, image, name)?);
        }
    }
    if ctx.cli.dump_gates {
        write_jsonl(&out.join("gates.jsonl"), &gates)?;
    }
    Ok(())
}

fn dump_gates<T: Scalar>(ctx: &Session, ckpt_path: &Path, paths: &[PathBuf]) -> Result<()> {
    let ckpt = ctx.checkpoint(ckpt_path)?;
    let model: Model<T> = ckpt.model()?;
    if !model.variant.gated() {
        bail!("variant {} has no gates", model.variant);
    }
    let images = read_images(paths)?;
    let out = ctx.out()?;
    let mut rows = Vec::new();
    for (name, image) in &images {
        rows.extend(gate_rows(&model, image, name)?);
    }
    println!("{:<14} {:>5} {:<10} {:>8}", "node", "level", "branch", "mean");
    let mut seen: Vec<(String, String)> = Vec::new();
    for r in &rows {
        let key = (r["node"].as_str().unwrap_or("").to_string(), r["branch"].to_string());
        if seen.contains(&key) {
            continue;
        }
        let values: Vec<f64> = rows
            .iter()
            .filter(|o| o["node"] == r["node"] && o["branch"] == r["branch"])
            .filter_map(|o| o["value"].as_f64())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("{:<14} {:>5} {:<10} {:>8.4}", key.0, r["level"], r["branch"].as_str().unwrap_or(""), mean);
        seen.push(key);
    }
    write_jsonl(&out.join("gates.jsonl"), &rows)?;
    Ok(())
}

fn inspect_hierarchy(ctx: &Session, source: Option<&Path>) -> Result<()> {
    let graph = match source {
        None => ctx.hierarchy.clone().unwrap_or_else(Hierarchy::default_human),
        Some(p) if p.is_dir() => dataset_hierarchy(p)?.unwrap_or_else(Hierarchy::default_human),
        Some(p) if p.extension().is_some_and(|e| e == "toml") => Hierarchy::build(HierarchySpec::load(p)?)?,
        Some(p) => Checkpoint::load(p)?.hierarchy()?,
    };
    let root = graph.root();
    let mut stack = vec![(root, 0usize)];
    while let Some((v, depth)) = stack.pop() {
        let n = graph.node(v);
        let [r, g, b] = Hierarchy::node_color(&n.name);
        let classes = if n.class_ids.is_empty() { String::new() } else { format!(" classes {:?}", n.class_ids) };
        println!("{}{} (level {}, #{r:02x}{g:02x}{b:02x}){classes}", "  ".repeat(depth), n.name, n.level);
        for &c in graph.children(v).iter().rev() {
            stack.push((c, depth + 1));
        }
    }
    if ctx.cli.out.is_some() {
        let out = ctx.out()?;
        fs::write(out.join("hierarchy.toml"), graph.spec().to_toml())?;
    }
    Ok(())
}

fn dispatch<T: Scalar>(ctx: &Session) -> Result<()> {
    match &ctx.cli.command {
        Command::Synth => synth(ctx),
        Command::Train { data, holdout } => train::<T>(ctx, data, holdout.as_deref()),
        Command::Eval { checkpoint, data } => eval::<T>(ctx, checkpoint, data),
        Command::Predict { checkpoint, images } => predict::<T>(ctx, checkpoint, images),
        Command::InspectHierarchy { source } => inspect_hierarchy(ctx, source.as_deref()),
        Command::DumpGates { checkpoint, images } => dump_gates::<T>(ctx, checkpoint, images),
    }
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("COMPOFUSE_THREADS") {
        let n: usize = n.parse().context("COMPOFUSE_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let ctx = Session::load(cli)?;
    if ctx.cli.deterministic {
        dispatch::<f64>(&ctx)
    } else {
        dispatch::<f32>(&ctx)
    }
}
