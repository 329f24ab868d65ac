use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use anchornet::io::manifest::RunManifest;
use anchornet::io::pnm::{read_image, Raster};
use anchornet::io::synth::{generate_samples, load_dataset, write_dataset, SynthConfig};
use anchornet::io::weights::{load_anchornet, load_downstream, save_anchornet, save_downstream};
use anchornet::model::{AnchorNetModel, ArchSpec, DownstreamModel, Variant};
use anchornet::pipeline::{
    anytime_csv, anytime_eval, budgeted_csv, budgeted_eval, localize, tune_thresholds, Pipeline,
    ThresholdSchedule,
};
use anchornet::report::{flops_table, rf_table};
use anchornet::select::SelectionConfig;
use anchornet::train::{
    curve_csv, finetune_global, finetune_local, train_anchornet, GlobalNorm, Schedule, TrainConfig,
};
use anchornet::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "anchornet", version, about = "Padding-free patch proposal and early-exit classification")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage output resolution, field and stride.
    RfTable {
        #[arg(default_value = "default")]
        spec: String,
        #[arg(long)]
        csv: bool,
    },
    /// Forward cost per layer.
    Flops {
        spec: String,
        input_size: usize,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// Writes the synthetic benchmark.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
    },
    /// Stage I.
    TrainAnchornet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Stage II for one downstream network.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
        /// Trained proposal network; needed for the local variant.
        #[arg(long)]
        anchornet: Option<PathBuf>,
        /// Weight each whole-image term by 1 instead of one over the
        /// sequence length.
        #[arg(long)]
        plain_mean: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sequential inference on one image, one JSON line per stage.
    Infer {
        image: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        /// Comma-separated thresholds for stages 1..T-1.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Accuracy when every sample stops at the same stage.
    EvalAnytime {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy under mean-cost budgets, thresholds tuned on a validation set.
    EvalBudgeted {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        /// Budgets in FLOPs.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Activation map, selected boxes and an annotated copy of one image.
    CamDump {
        image: PathBuf,
        #[arg(long)]
        anchornet: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        iou: f64,
        #[arg(long, default_value_t = 4)]
        patches: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Global,
    Local,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
enum ScheduleArg {
    Step,
    Cosine,
}

#[derive(Args, serde::Serialize)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    /// Writes the per-epoch curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
struct ModelArgs {
    #[arg(long)]
    anchornet: PathBuf,
    #[arg(long)]
    global: PathBuf,
    #[arg(long)]
    local: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    iou: f64,
    #[arg(long, default_value_t = 4)]
    patches: usize,
}

impl ModelArgs {
    fn load(&self, m: &mut RunManifest) -> Result<Pipeline> {
        m.input(&self.anchornet).input(&self.global).input(&self.local);
        let selection = SelectionConfig {
            iou_threshold: self.iou,
            max_patches: self.patches,
        };
        selection.validate()?;
        Ok(Pipeline {
            anchornet: load_anchornet(&self.anchornet)?,
            f_global: load_downstream(&self.global)?,
            f_local: load_downstream(&self.local)?,
            selection,
        })
    }
}

fn train_config(a: &TrainArgs, base: TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch_size,
        lr: a.lr.unwrap_or(base.lr),
        schedule: match a.schedule {
            Some(ScheduleArg::Step) => Schedule::Step,
            Some(ScheduleArg::Cosine) => Schedule::Cosine,
            None => base.schedule,
        },
        seed,
        ..base
    }
}

fn resolve_spec(name: &str, classes: usize) -> Result<ArchSpec> {
    match name {
        "default" | "anchornet" => Ok(ArchSpec::anchornet(classes)),
        "downstream" => Ok(ArchSpec::downstream(classes)),
        "miniature" => Ok(ArchSpec::miniature(classes)),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse()
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let (mut m, default_manifest) = match &cli.command {
        Command::RfTable { spec, csv } => {
            print!("{}", rf_table(&resolve_spec(spec, 1000)?, *csv)?);
            (RunManifest::new("rf-table", seed, json!({ "spec": spec, "csv": csv })), None)
        }
        Command::Flops {
            spec,
            input_size,
            classes,
        } => {
            print!("{}", flops_table(&resolve_spec(spec, *classes)?, *input_size)?);
            let cfg = json!({ "spec": spec, "input_size": input_size, "classes": classes });
            (RunManifest::new("flops", seed, cfg), None)
        }
        Command::Generate {
            out,
            classes,
            per_class,
        } => {
            let synth = SynthConfig::default();
            let ds = generate_samples(&synth, *classes, *per_class, seed)?;
            write_dataset(&ds, out)?;
            let cfg = json!({ "classes": classes, "per_class": per_class, "synth": synth });
            let mut m = RunManifest::new("generate", seed, cfg);
            m.output(out);
            (m, Some(out.join("manifest.json")))
        }
        Command::TrainAnchornet { data, out, train } => {
            let ds = load_dataset(data, None)?;
            let cfg = train_config(train, TrainConfig::default(), seed);
            let model = AnchorNetModel::build(
                &ArchSpec::anchornet(ds.num_classes),
                seed::derive(seed, "init.anchornet"),
            )?;
            let trained = train_anchornet(model, &ds, &cfg)?;
            save_anchornet(&trained.model, out)?;
            let mut m = RunManifest::new("train-anchornet", seed, json!({ "train": cfg }));
            m.input(data).output(out);
            if let Some(c) = &train.curve {
                write(c, &curve_csv(&trained.curve))?;
                m.output(c);
            }
            (m, Some(beside(out)))
        }
        Command::Finetune {
            data,
            variant,
            out,
            anchornet,
            plain_mean,
            train,
        } => {
            let ds = load_dataset(data, None)?;
            let mut cfg = train_config(train, TrainConfig::finetune(), seed);
            if *plain_mean {
                cfg.global_norm = GlobalNorm::Mean;
            }
            let mut m = RunManifest::new("finetune", seed, json!({ "train": cfg }));
            m.input(data);
            let selection = SelectionConfig::default();
            let trained = match variant {
                VariantArg::Global => {
                    let f = DownstreamModel::build(ds.num_classes, seed::derive(seed, "init.global"), Variant::Global)?;
                    finetune_global(f, &ds, &cfg)?
                }
                VariantArg::Local => {
                    let path = anchornet
                        .as_ref()
                        .ok_or_else(|| Error::Invalid("--anchornet is required for the local variant".into()))?;
                    m.input(path);
                    let a = load_anchornet(path)?;
                    let f = DownstreamModel::build(ds.num_classes, seed::derive(seed, "init.local"), Variant::Local)?;
                    finetune_local(f, &ds, &a, &selection, &cfg)?
                }
            };
            save_downstream(&trained.model, out)?;
            m.output(out);
            if let Some(c) = &train.curve {
                write(c, &curve_csv(&trained.curve))?;
                m.output(c);
            }
            (m, Some(beside(out)))
        }
        Command::Infer {
            image,
            models,
            thresholds,
        } => {
            let mut m = RunManifest::new("infer", seed, json!({ "models": models, "thresholds": thresholds }));
            m.input(image);
            let p = models.load(&mut m)?;
            let th = match thresholds {
                Some(v) => ThresholdSchedule::new(v.clone()),
                None => ThresholdSchedule::unreachable(p.stages()),
            };
            let img = read_image(image)?;
            let s = img.shape();
            let costs = p.costs((s.h, s.w))?;
            let trace = p.infer(&img, &th)?;
            for (i, (scores, conf)) in trace.scores.iter().zip(&trace.confidences).enumerate() {
                let stage = i + 1;
                let line = json!({
                    "stage": stage,
                    "confidence": conf,
                    "exit": stage == trace.exit_stage,
                    "class": anchornet::pipeline::argmax(scores),
                    "flops": costs.spent(stage),
                    "scores": scores,
                });
                println!("{line}");
            }
            (m, None)
        }
        Command::EvalAnytime { data, models, out } => {
            let mut m = RunManifest::new("eval-anytime", seed, json!({ "models": models }));
            m.input(data);
            let p = models.load(&mut m)?;
            let ds = load_dataset(data, Some(p.f_global.num_classes()))?;
            let costs = p.costs(image_size(&ds)?)?;
            let records = p.record(&ds.labeled_images())?;
            let rows = (1..=p.stages())
                .map(|t| anytime_eval(&records, t, &costs))
                .collect::<Result<Vec<_>>>()?;
            write(out, &anytime_csv(&rows, records.len(), p.stages()))?;
            m.output(out);
            (m, Some(beside(out)))
        }
        Command::EvalBudgeted {
            data,
            val,
            models,
            budgets,
            out,
        } => {
            let mut m = RunManifest::new("eval-budgeted", seed, json!({ "models": models, "budgets": budgets }));
            m.input(data).input(val);
            let p = models.load(&mut m)?;
            let classes = Some(p.f_global.num_classes());
            let test = load_dataset(data, classes)?;
            let valset = load_dataset(val, classes)?;
            let costs = p.costs(image_size(&test)?)?;
            let vrec = p.record(&valset.labeled_images())?;
            let trec = p.record(&test.labeled_images())?;
            let mut rows = Vec::new();
            for &b in budgets {
                let th = tune_thresholds(&vrec, b, &costs, p.stages())?;
                rows.push((b, budgeted_eval(&trec, &th, &costs, p.stages())?));
            }
            write(out, &budgeted_csv(&rows, p.stages()))?;
            m.output(out);
            (m, Some(beside(out)))
        }
        Command::CamDump {
            image,
            anchornet,
            out_dir,
            iou,
            patches,
        } => {
            let selection = SelectionConfig {
                iou_threshold: *iou,
                max_patches: *patches,
            };
            let a = load_anchornet(anchornet)?;
            let img = read_image(image)?;
            let loc = localize(&img, &a, &selection)?;
            fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            let heat = out_dir.join("cam.pgm");
            heatmap(&loc.cam)?.write(&heat)?;
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut csv = String::from("image_id,rank,top,left,size,activation\n");
            for (r, s) in loc.patches.iter().enumerate() {
                csv.push_str(&format!(
                    "{id},{},{},{},{},{}\n",
                    r + 1,
                    s.patch.top,
                    s.patch.left,
                    s.patch.height,
                    s.activation
                ));
            }
            let boxes = out_dir.join("boxes.csv");
            write(&boxes, &csv)?;
            let mut raster = Raster::from_tensor(&img)?;
            for s in &loc.patches {
                outline(&mut raster, &s.patch);
            }
            let annotated = out_dir.join("annotated.ppm");
            raster.write(&annotated)?;
            let cfg = json!({ "selection": selection });
            let mut m = RunManifest::new("cam-dump", seed, cfg);
            m.input(image).input(anchornet).output(&heat).output(&boxes).output(&annotated);
            (m, Some(out_dir.join("manifest.json")))
        }
    };
    let path = cli
        .manifest
        .or(default_manifest)
        .unwrap_or_else(|| PathBuf::from("anchornet-manifest.json"));
    if m.outputs.is_empty() {
        m.output("-");
    }
    m.write(&path)
}

fn image_size(ds: &anchornet::train::LabeledDataset) -> Result<(usize, usize)> {
    let first = ds
        .items
        .first()
        .ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
    let s = first.image.shape();
    if ds.items.iter().any(|x| x.image.shape() != s) {
        return Err(Error::Invalid("images differ in size".into()));
    }
    Ok((s.h, s.w))
}

/// Activation map scaled to `[0, 255]`.
fn heatmap(cam: &anchornet::select::Cam) -> Result<Raster> {
    let v = cam.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = cam.dims();
    let pixels = v.iter().map(|x| ((x - lo) / span * 255.0).round() as u8).collect();
    Raster::new(cols, rows, 1, pixels)
}

fn outline(r: &mut Raster, b: &anchornet::rf::PatchBox) {
    let (w, h) = (r.width, r.height);
    let mut paint = |y: usize, x: usize| {
        if y < h && x < w {
            let o = (y * w + x) * 3;
            r.pixels[o..o + 3].copy_from_slice(&[255, 0, 0]);
        }
    };
    let (bottom, right) = (b.bottom() - 1, b.right() - 1);
    for x in b.left..=right {
        paint(b.top, x);
        paint(bottom, x);
    }
    for y in b.top..=bottom {
        paint(y, b.left);
        paint(y, right);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
