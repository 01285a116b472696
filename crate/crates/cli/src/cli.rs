//! Subcommands, config loading and exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ctask_core::metrics::MetricsReport;
use ctask_core::network::{count_params, ModelBundle, ModelConfig, Variant};
use ctask_core::palette::{gen_palette_seeded, validate_palette};
use ctask_core::synth::{generate_scene, DataSpec};
use ctask_core::trainer::{self, TrainConfig, Trainer};
use ctask_core::{imageio, render, CtError, Result, Rule, Task, TaskId, TaskPalette};

use crate::predict::{self, PaletteSource, RequestError};
use crate::server;

/// Exit code for invalid input, bad flags and failed validation.
pub const EXIT_INVALID: i32 = 2;
/// Exit code for failures while running a valid request.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "ctask", version, about = "Per-pixel task-conditioned dense prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on synthetic scenes.
    Train(TrainArgs),
    /// Continue training a checkpoint under another palette rule.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint and print a metrics report.
    Eval(EvalArgs),
    /// Run one image through a checkpoint and write renders.
    Predict(PredictArgs),
    /// Generate or validate task palettes.
    Palette(PaletteArgs),
    /// Print parameter counts of the model variants.
    Params(ParamsArgs),
    /// Write synthetic scenes and their labels as PNG files.
    Data(DataArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Palette rule: s, r1r, r2, r3 or rnd.
    #[arg(long)]
    pub rule: Option<String>,
    /// Task for rule s.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_enc: Option<f64>,
    #[arg(long)]
    pub lr_dec: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of synthetic scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Seed of the synthetic scene set.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Draw new scenes every epoch.
    #[arg(long)]
    pub fresh: bool,
    /// Append per-epoch JSON lines to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub o: TrainOverrides,
    /// ctn, mhn, stn or palette_predictor.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Square input size, a multiple of 32.
    #[arg(long)]
    pub size: Option<usize>,
    /// Checkpoint path; defaults to `$CT_HOME/checkpoints/<variant>.ctta`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue the run saved at this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub o: TrainOverrides,
    /// Held-out scenes for the before/after evaluation.
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    #[arg(long, default_value_t = 1_000_003)]
    pub eval_seed: u64,
    /// Output checkpoint; defaults to the input with extension `.ft.ctta`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "s")]
    pub rule: String,
    #[arg(long, default_value_t = 16)]
    pub scenes: usize,
    #[arg(long, default_value_t = 1_000_003)]
    pub seed: u64,
    /// Metrics report of the baseline used for Δ_m.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Single-channel PNG of task ids.
    #[arg(long, conflicts_with_all = ["task", "auto"])]
    pub palette: Option<PathBuf>,
    /// Uniform palette of this task.
    #[arg(long, conflicts_with = "auto")]
    pub task: Option<Task>,
    /// Predict the palette with `--predictor`.
    #[arg(long, requires = "predictor")]
    pub auto: bool,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long, default_value = "prediction")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
pub struct PaletteArgs {
    #[command(subcommand)]
    pub action: Option<PaletteAction>,
    #[command(flatten)]
    pub generate: PaletteGenArgs,
}

#[derive(Subcommand, Debug)]
pub enum PaletteAction {
    /// Draw a palette from a rule (the default action).
    Generate(PaletteGenArgs),
    /// Check that every cell of a palette PNG is a valid task id.
    Validate {
        file: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct PaletteGenArgs {
    #[arg(long, default_value = "s")]
    pub rule: String,
    #[arg(long)]
    pub task: Option<Task>,
    /// Width, and height unless `--height` is given.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Semantic map of this synthetic scene for rules r2 and r3.
    #[arg(long, conflicts_with = "semantics")]
    pub scene_seed: Option<u64>,
    /// Single-channel PNG of class ids for rules r2 and r3.
    #[arg(long)]
    pub semantics: Option<PathBuf>,
    /// Emit JSON instead of PNG.
    #[arg(long)]
    pub json: bool,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// JSON model config; the defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Defaults to `$CT_HOME/data`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Palette predictor checkpoint enabling `"palette": "auto"`.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn ct_home() -> PathBuf {
    std::env::var_os("CT_HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ct_home"))
}

/// `p` itself when it exists, else the same name under `$CT_HOME/checkpoints`.
pub fn resolve_checkpoint(p: &Path) -> PathBuf {
    if p.exists() || p.is_absolute() {
        return p.to_path_buf();
    }
    let alt = ct_home().join("checkpoints").join(p);
    if alt.exists() {
        alt
    } else {
        p.to_path_buf()
    }
}

pub fn exit_code(e: &CtError) -> i32 {
    match e {
        CtError::Io(_) | CtError::NonFinite(_) => EXIT_RUNTIME,
        _ => EXIT_INVALID,
    }
}

fn read(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())).into())
}

fn read_string(p: &Path) -> Result<String> {
    String::from_utf8(read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn load_bundle(p: &Path) -> Result<ModelBundle> {
    let p = resolve_checkpoint(p);
    if !p.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: checkpoint not found", p.display())).into());
    }
    ModelBundle::load(&p)
}

fn invalid(msg: impl Into<String>) -> CtError {
    CtError::InvalidArgument(msg.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_string(p)?)?),
        None => Ok(RunConfig::default()),
    }
}

fn apply(o: &TrainOverrides, t: &mut TrainConfig) -> Result<()> {
    if let Some(r) = &o.rule {
        t.rule = Rule::parse(r, o.task.map(|t| t.id()))?;
    } else if o.task.is_some() {
        return Err(invalid("--task needs --rule s"));
    }
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut t.epochs, o.epochs);
    set(&mut t.batch_size, o.batch_size);
    set(&mut t.plateau_patience, o.patience);
    set(&mut t.data.scenes, o.scenes);
    if let Some(v) = o.lr_enc {
        t.lr_encoder = v;
    }
    if let Some(v) = o.lr_dec {
        t.lr_decoder = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.data_seed {
        t.data.seed = v;
    }
    if o.fresh {
        t.data.fresh_per_epoch = true;
    }
    if let Some(l) = &o.log {
        t.log = Some(l.clone());
    }
    Ok(())
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            std::fs::write(p, bytes)?;
        }
        None => {
            let mut s = std::io::stdout().lock();
            s.write_all(bytes)?;
            s.flush()?;
        }
    }
    Ok(())
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    write_out(None, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    epochs: usize,
    loss: Option<f64>,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut t = if let Some(r) = &a.resume {
        let r = resolve_checkpoint(r);
        let mut t = Trainer::resume(&r, a.o.epochs)?;
        apply(&a.o, &mut t.config)?;
        t.config.checkpoint = Some(a.out.clone().unwrap_or(r));
        t
    } else {
        let mut rc = load_config(a.o.config.as_deref())?;
        if let Some(v) = a.variant {
            rc.model.variant = v;
        }
        if let Some(k) = a.k {
            rc.model.k = k;
        }
        if let Some(s) = a.size {
            rc.model.height = s;
            rc.model.width = s;
        }
        apply(&a.o, &mut rc.train)?;
        rc.train.data.height = rc.model.height;
        rc.train.data.width = rc.model.width;
        if rc.model.variant == Variant::PalettePredictor && !rc.train.rule.needs_semantics() {
            return Err(invalid("the palette predictor trains on rule r2 or r3"));
        }
        let name = serde_json::to_value(rc.model.variant)?.as_str().unwrap_or("model").to_string();
        let out = a.out.clone().unwrap_or_else(|| ct_home().join("checkpoints").join(format!("{name}.ctta")));
        if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d)?;
        }
        rc.train.checkpoint = Some(out);
        let bundle = ModelBundle::init(rc.model, rc.train.seed)?;
        Trainer::new(bundle, rc.train)?
    };
    t.run()?;
    let checkpoint = t.config.checkpoint.clone().expect("checkpoint set");
    t.save(&checkpoint)?;
    print_json(&TrainSummary {
        checkpoint,
        epochs: t.state.epochs_done,
        loss: t.log.last().map(|e| e.loss),
    })
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let path = resolve_checkpoint(&a.checkpoint);
    let bundle = load_bundle(&path)?;
    let mut rc = load_config(a.o.config.as_deref())?;
    apply(&a.o, &mut rc.train)?;
    rc.train.data.height = bundle.config.height;
    rc.train.data.width = bundle.config.width;
    if let Some(n) = a.eval_scenes {
        rc.train.eval_data = Some(DataSpec::fixed(a.eval_seed, n, bundle.config.height, bundle.config.width));
    }
    let out = a.out.clone().unwrap_or_else(|| path.with_extension("ft.ctta"));
    rc.train.checkpoint = Some(out.clone());
    let (bundle, report) = trainer::finetune(bundle, rc.train)?;
    bundle.save(&out)?;
    print_json(&report)
}

#[derive(Serialize)]
struct PaletteScore {
    palette_miou: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.checkpoint)?;
    let rule = Rule::parse(&a.rule, Some(TaskId(0)))?;
    let data = DataSpec::fixed(a.seed, a.scenes, bundle.config.height, bundle.config.width);
    let scenes = data.scenes_for_epoch(0)?;
    let text = if bundle.config.variant == Variant::PalettePredictor {
        if !rule.needs_semantics() {
            return Err(invalid("the palette predictor is evaluated on rule r2 or r3"));
        }
        let palette_miou = trainer::evaluate_palette_predictor(&bundle, &rule, &scenes)?;
        serde_json::to_string_pretty(&PaletteScore { palette_miou })?
    } else {
        let mut report = trainer::evaluate(&bundle, &rule, &scenes, a.seed)?;
        if let Some(b) = &a.baseline {
            let base: MetricsReport = serde_json::from_str(&read_string(b)?)?;
            report.delta_m_pct = Some(report.delta_vs(&base)?);
        }
        report.to_json()
    };
    write_out(a.out.as_deref(), (text + "\n").as_bytes())
}

fn request_err(e: RequestError) -> CtError {
    match e {
        RequestError::Internal(e) => e,
        e => invalid(e.to_string()),
    }
}

#[derive(Serialize)]
struct PredictSummary {
    out_dir: PathBuf,
    width: usize,
    height: usize,
    files: Vec<String>,
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let bundle = load_bundle(&a.checkpoint)?;
    let predictor = match &a.predictor {
        Some(p) => Some(load_bundle(p)?),
        None => None,
    };
    let image = read(&a.image)?;
    let palette_bytes = match &a.palette {
        Some(p) => Some(read(p)?),
        None => None,
    };
    let source = match (&palette_bytes, a.task, a.auto) {
        (Some(b), _, _) => PaletteSource::Png(b),
        (None, Some(t), _) => PaletteSource::Uniform(t.id()),
        (None, None, true) => PaletteSource::Auto,
        (None, None, false) => return Err(invalid("one of --palette, --task or --auto is required")),
    };
    let p = predict::run(&bundle, predictor.as_ref(), &image, source).map_err(request_err)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut files = vec![
        ("composite.png".to_string(), p.composite_png.clone()),
        ("raw.cttn".to_string(), p.raw_cttn.clone()),
        ("palette.png".to_string(), p.palette.to_png()?),
    ];
    for (task, png) in &p.overlays {
        files.push((format!("overlay_{task}.png"), png.clone()));
    }
    for (name, bytes) in &files {
        std::fs::write(a.out_dir.join(name), bytes)?;
    }
    print_json(&PredictSummary {
        out_dir: a.out_dir,
        width: p.width,
        height: p.height,
        files: files.into_iter().map(|(n, _)| n).collect(),
    })
}

fn palette_generate(g: &PaletteGenArgs) -> Result<()> {
    let (w, h) = (g.size, g.height.unwrap_or(g.size));
    if w == 0 || h == 0 {
        return Err(invalid("palette size must be positive"));
    }
    let rule = Rule::parse(&g.rule, g.task.map(|t| t.id()))?;
    let semantics = if let Some(s) = g.scene_seed {
        Some(generate_scene(s, h, w)?.semantic)
    } else if let Some(p) = &g.semantics {
        let (sw, sh, cells) = imageio::decode_gray(&read(p)?)?;
        if (sw, sh) != (w, h) {
            return Err(invalid(format!("semantic map is {sh}×{sw}, palette is {h}×{w}")));
        }
        Some(cells)
    } else {
        None
    };
    let p = gen_palette_seeded(&rule, h, w, semantics.as_deref(), g.k, g.seed)?;
    let bytes = if g.json { (p.to_json() + "\n").into_bytes() } else { p.to_png()? };
    write_out(g.out.as_deref(), &bytes)
}

fn palette(a: PaletteArgs) -> Result<()> {
    match a.action {
        None => palette_generate(&a.generate),
        Some(PaletteAction::Generate(g)) => palette_generate(&g),
        Some(PaletteAction::Validate { file, k }) => {
            let bytes = read(&file)?;
            let p = if file.extension().is_some_and(|e| e == "json") {
                TaskPalette::from_json(std::str::from_utf8(&bytes).map_err(|e| invalid(e.to_string()))?)?
            } else {
                TaskPalette::from_png(&bytes)?
            };
            match validate_palette(&p, k) {
                Ok(r) => print_json(&r),
                Err(v) => Err(CtError::Palette(format!(
                    "{} cells hold task ids ≥ {k}; first {:?}",
                    v.total,
                    &v.cells[..v.cells.len().min(8)]
                ))),
            }
        }
    }
}

#[derive(Serialize)]
struct ParamRow {
    variant: Variant,
    #[serde(flatten)]
    counts: ctask_core::network::ParamCounts,
}

fn params(a: ParamsArgs) -> Result<()> {
    let mut base = match &a.config {
        Some(p) => serde_json::from_str::<ModelConfig>(&read_string(p)?)?,
        None => ModelConfig::default(),
    };
    base.k = a.k;
    let mut rows = Vec::new();
    for v in [Variant::Ctn, Variant::Mhn, Variant::Stn, Variant::PalettePredictor] {
        rows.push(ParamRow {
            variant: v,
            counts: count_params(&base.clone().with_variant(v))?,
        });
    }
    if a.json {
        return print_json(&rows);
    }
    let mut text = format!("{:<18} {:>10} {:>10} {:>10} {:>10}\n", "variant", "total", "encoder", "decoder", "embedding");
    for r in rows {
        let name = serde_json::to_value(r.variant)?;
        text += &format!(
            "{:<18} {:>10} {:>10} {:>10} {:>10}\n",
            name.as_str().unwrap_or(""),
            r.counts.total,
            r.counts.encoder,
            r.counts.decoder,
            r.counts.embedding
        );
    }
    write_out(None, text.as_bytes())
}

#[derive(Serialize)]
struct DataManifest {
    seed: u64,
    height: usize,
    width: usize,
    /// Label value marking pixels without a valid label.
    ignore: u8,
    scenes: Vec<Vec<String>>,
}

pub const IGNORE_LABEL: u8 = 255;

fn data(a: DataArgs) -> Result<()> {
    let dir = a.out_dir.clone().unwrap_or_else(|| ct_home().join("data"));
    std::fs::create_dir_all(&dir)?;
    let spec = DataSpec::fixed(a.seed, a.count, a.size, a.size);
    let mut manifest = DataManifest {
        seed: a.seed,
        height: a.size,
        width: a.size,
        ignore: IGNORE_LABEL,
        scenes: Vec::new(),
    };
    for (i, s) in spec.scenes_for_epoch(0)?.iter().enumerate() {
        let (w, h) = (s.w, s.h);
        let mask = |task: Task, v: &[u8]| -> Vec<u8> {
            v.iter()
                .zip(&s.valid[task.id().index()])
                .map(|(&x, &ok)| if ok { x } else { IGNORE_LABEL })
                .collect()
        };
        let normals: Vec<[f64; 3]> = s.normals.iter().map(|n| n.map(f64::from)).collect();
        let files = [
            ("image", imageio::encode_rgb(w, h, &imageio::tensor_to_rgb(&s.image))?),
            ("semseg", imageio::encode_gray(w, h, &mask(Task::SemSeg, &s.semantic))?),
            ("parts", imageio::encode_gray(w, h, &mask(Task::Parts, &s.parts))?),
            ("edges", imageio::encode_gray(w, h, &mask(Task::Edges, &s.edges))?),
            ("saliency", imageio::encode_gray(w, h, &mask(Task::Saliency, &s.saliency))?),
            ("normals", imageio::encode_rgb(w, h, &render::normals_rgb(&normals))?),
        ];
        let mut names = Vec::new();
        for (kind, bytes) in files {
            let name = format!("scene{i:04}_{kind}.png");
            std::fs::write(dir.join(&name), bytes)?;
            names.push(name);
        }
        manifest.scenes.push(names);
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_out(None, format!("{}\n", dir.display()).as_bytes())
}

fn serve(a: ServeArgs) -> Result<()> {
    let bundle = load_bundle(&a.checkpoint)?;
    if bundle.config.variant == Variant::PalettePredictor {
        return Err(invalid("serve needs a prediction model, not a palette predictor"));
    }
    let predictor = match &a.predictor {
        Some(p) => {
            let b = load_bundle(p)?;
            if b.config.variant != Variant::PalettePredictor || b.config.k != bundle.config.k {
                return Err(invalid("--predictor must be a palette predictor with the same K"));
            }
            Some(b)
        }
        None => None,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(server::AppState::new(bundle, predictor), &format!("{}:{}", a.host, a.port)))?;
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Palette(a) => palette(a),
        Command::Params(a) => params(a),
        Command::Data(a) => data(a),
        Command::Serve(a) => serve(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
