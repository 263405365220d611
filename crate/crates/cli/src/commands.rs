use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::Serialize;

use cwgan::config::ExperimentConfig;
use cwgan::data::{load_dataset, make_synthetic_dataset, make_synthetic_splits, save_dataset, Dataset, Split, SyntheticSpec};
use cwgan::evaluation::{
    generate_images, interpolation_sweep, nearest_neighbor_analysis, sample_captions, score_images,
    train_eval_classifier, write_mosaic, CaNoise, ClassifierOptions,
};
use cwgan::networks::{load_checkpoint, Generator, StageView};
use cwgan::progressive::{format_phase_table, phase_table, BatchSchedule, GrowthState};
use cwgan::rng::{fork, normal_tensor, seeded, Rng};
use cwgan::training::{checkpoint_view, train};
use cwgan::{Error, Tensor};

use crate::{CheckpointArgs, Cli, Command, Common, OUTPUT_DIR_ENV};

pub const PROVENANCE_FILE: &str = "provenance.toml";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::CannotFormMismatch(_) => 1,
            Error::TrainingDiverged { .. } | Error::Format(_) | Error::Io(_) => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// A parsed and validated config, with relative paths resolved against the
/// config file's directory.
struct Loaded {
    cfg: ExperimentConfig,
    path: PathBuf,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn load_config(common: &Common) -> Result<Loaded> {
    let path = common.config.clone().ok_or_else(|| invalid("this command needs --config"))?;
    let text = fs::read_to_string(&path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str_with_overrides(&text, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    resolve(&base, &mut cfg.data.manifest);
    resolve(&base, &mut cfg.init.stage1_checkpoint);
    Ok(Loaded { cfg, path })
}

fn output_dir(common: &Common, command: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(command))
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    code_version: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_path: Option<String>,
    overrides: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<&'a SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a ExperimentConfig>,
}

fn write_provenance(dir: &Path, p: &Provenance) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(PROVENANCE_FILE), text)?;
    Ok(())
}

fn provenance<'a>(cli: &'a Cli, loaded: &'a Loaded, checkpoint: Option<&Path>) -> Provenance<'a> {
    Provenance {
        command: cli.command.name(),
        code_version: env!("CARGO_PKG_VERSION"),
        seed: loaded.cfg.seed,
        config_path: Some(loaded.path.display().to_string()),
        overrides: &cli.common.overrides,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        synthetic: None,
        config: Some(&loaded.cfg),
    }
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(m) = &cfg.data.manifest {
        Ok(load_dataset(m)?.1)
    } else if let Some(spec) = &cfg.data.synthetic {
        Ok(make_synthetic_dataset(spec)?)
    } else {
        Err(invalid("config has no data source: set data.manifest or data.synthetic"))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::MakeSynthetic {
        classes,
        images_per_class,
        size,
        embedding_dim,
        test_classes,
    } = &cli.command
    {
        let loaded = cli.common.config.as_ref().map(|_| load_config(&cli.common)).transpose()?;
        let mut spec = loaded.as_ref().and_then(|l| l.cfg.data.synthetic.clone()).unwrap_or(SyntheticSpec {
            num_classes: 4,
            images_per_class: 64,
            image_size: 16,
            embedding_dim: 16,
            seed: 0,
        });
        spec.num_classes = classes.unwrap_or(spec.num_classes);
        spec.images_per_class = images_per_class.unwrap_or(spec.images_per_class);
        spec.image_size = size.unwrap_or(spec.image_size);
        spec.embedding_dim = embedding_dim.unwrap_or(spec.embedding_dim);
        if let Some(seed) = cli.common.seed.or(loaded.as_ref().map(|l| l.cfg.seed)) {
            spec.seed = seed;
        }
        return make_synthetic(cli, loaded.as_ref(), &spec, *test_classes);
    }
    let loaded = load_config(&cli.common)?;
    match &cli.command {
        Command::MakeSynthetic { .. } => unreachable!(),
        Command::Train => run_train(cli, &loaded),
        Command::Evaluate {
            model,
            samples,
            splits,
            classifier_epochs,
        } => evaluate(cli, &loaded, model, *samples, *splits, *classifier_epochs),
        Command::Sample { model, count, cols } => sample(cli, &loaded, model, *count, *cols),
        Command::Interpolate { model, steps, pairs } => interpolate(cli, &loaded, model, *steps, *pairs),
        Command::Nn { model, count } => nearest(cli, &loaded, model, *count),
        Command::InspectSchedule { probe } => inspect_schedule(&loaded.cfg, probe),
    }
}

fn make_synthetic(cli: &Cli, loaded: Option<&Loaded>, spec: &SyntheticSpec, test_classes: usize) -> Result<()> {
    let (train_set, test_set) = if test_classes > 0 {
        let (a, b) = make_synthetic_splits(spec, test_classes)?;
        (a, Some(b))
    } else {
        (make_synthetic_dataset(spec)?, None)
    };
    let out = output_dir(&cli.common, cli.command.name());
    save_dataset(&out.join("train"), &train_set, Split::Train)?;
    if let Some(t) = &test_set {
        save_dataset(&out.join("test"), t, Split::Test)?;
    }
    write_provenance(
        &out,
        &Provenance {
            command: cli.command.name(),
            code_version: env!("CARGO_PKG_VERSION"),
            seed: spec.seed,
            config_path: loaded.map(|l| l.path.display().to_string()),
            overrides: &cli.common.overrides,
            checkpoint: None,
            synthetic: Some(spec),
            config: None,
        },
    )?;
    println!(
        "wrote {} training images{} to {}",
        train_set.len(),
        test_set.map_or(String::new(), |t| format!(" and {} test images", t.len())),
        out.display()
    );
    Ok(())
}

fn run_train(cli: &Cli, loaded: &Loaded) -> Result<()> {
    let cfg = &loaded.cfg;
    let data = dataset(cfg)?;
    if data.embedding_dim() != cfg.model.embedding_dim {
        return Err(invalid(format!(
            "dataset embeddings have dimension {}, model.embedding_dim is {}",
            data.embedding_dim(),
            cfg.model.embedding_dim
        )));
    }
    let out = output_dir(&cli.common, "train");
    write_provenance(&out, &provenance(cli, loaded, None))?;
    let run = train(cfg, &data, Some(&out))?;
    let last = run.metrics.last();
    println!(
        "trained {} steps; final critic loss {:.4}, generator loss {:.4}",
        run.metrics.len(),
        last.map_or(f64::NAN, |m| m.critic_loss),
        last.map_or(f64::NAN, |m| m.generator_loss)
    );
    if let Some(p) = run.checkpoints.last() {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

struct Model {
    generator: Generator,
    view: StageView,
    /// The configured dataset at the generator's output resolution.
    data: Dataset,
    rng: Rng,
}

fn load_model(loaded: &Loaded, args: &CheckpointArgs) -> Result<Model> {
    let data = dataset(&loaded.cfg)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let view = checkpoint_view(&ckpt.header);
    let (generator, _) = ckpt.restore()?;
    if data.embedding_dim() != generator.config.embedding_dim {
        return Err(invalid(format!(
            "dataset embeddings have dimension {}, the checkpoint expects {}",
            data.embedding_dim(),
            generator.config.embedding_dim
        )));
    }
    let data = data.at_resolution(generator.output_resolution(view))?;
    Ok(Model {
        generator,
        view,
        data,
        rng: seeded(loaded.cfg.seed),
    })
}

fn ca_noise<'a>(args: &CheckpointArgs, rng: &'a mut Rng) -> CaNoise<'a> {
    if args.sample_ca {
        CaNoise::Sample(rng)
    } else {
        CaNoise::Mean
    }
}

fn evaluate(
    cli: &Cli,
    loaded: &Loaded,
    args: &CheckpointArgs,
    samples: usize,
    splits: usize,
    classifier_epochs: usize,
) -> Result<()> {
    if splits == 0 || samples == 0 || samples % splits != 0 {
        return Err(invalid(format!("--samples ({samples}) must be a positive multiple of --splits ({splits})")));
    }
    let mut m = load_model(loaded, args)?;
    let out = output_dir(&cli.common, "evaluate");
    write_provenance(&out, &provenance(cli, loaded, Some(&args.checkpoint)))?;
    let opts = ClassifierOptions {
        epochs: classifier_epochs,
        seed: m.rng.random(),
        ..Default::default()
    };
    let classifier = train_eval_classifier(&m.data, &opts)?;
    let mut caption_rng = fork(&mut m.rng);
    let mut noise_rng = fork(&mut m.rng);
    let mut ca_rng = fork(&mut m.rng);
    let captions = sample_captions(&m.data, samples, &mut caption_rng);
    let images = generate_images(&m.generator, &captions, m.view, 64, &mut noise_rng, ca_noise(args, &mut ca_rng));
    let report = score_images(&classifier, &images, splits, &mut m.rng)?;
    let text = report.to_text();
    fs::write(out.join("report.toml"), &text)?;
    let shown: Vec<Tensor> = (0..samples.min(64)).map(|i| images.row(i)).collect();
    write_mosaic(&out.join("samples.png"), &shown, 8, vec![], vec![])?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    print!("{text}");
    Ok(())
}

fn sample(cli: &Cli, loaded: &Loaded, args: &CheckpointArgs, count: usize, cols: usize) -> Result<()> {
    if count == 0 || cols == 0 {
        return Err(invalid("--count and --cols must be positive"));
    }
    let mut m = load_model(loaded, args)?;
    let out = output_dir(&cli.common, "sample");
    write_provenance(&out, &provenance(cli, loaded, Some(&args.checkpoint)))?;
    let mut ca_rng = fork(&mut m.rng);
    let captions = sample_captions(&m.data, count, &mut m.rng);
    let images = generate_images(&m.generator, &captions, m.view, 64, &mut m.rng, ca_noise(args, &mut ca_rng));
    let cells: Vec<Tensor> = (0..count).map(|i| images.row(i)).collect();
    let png = out.join("samples.png");
    write_mosaic(&png, &cells, cols, vec![], vec![])?;
    println!("wrote {} samples to {}", count, png.display());
    Ok(())
}

fn random_caption(data: &Dataset, image: usize, rng: &mut Rng) -> Vec<f64> {
    let im = &data.images()[image];
    im.embeddings[rng.random_range(0..im.embeddings.len())].clone()
}

fn interpolate(cli: &Cli, loaded: &Loaded, args: &CheckpointArgs, steps: usize, pairs: usize) -> Result<()> {
    if steps < 2 || pairs == 0 {
        return Err(invalid("--steps must be at least 2 and --pairs positive"));
    }
    let mut m = load_model(loaded, args)?;
    if m.data.num_classes() < 2 {
        return Err(invalid("interpolation pairs need a dataset with at least two classes"));
    }
    let out = output_dir(&cli.common, "interpolate");
    write_provenance(&out, &provenance(cli, loaded, Some(&args.checkpoint)))?;
    let mut ca_rng = fork(&mut m.rng);
    let mut cells = Vec::with_capacity(steps * pairs);
    let mut row_labels = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let a = m.rng.random_range(0..m.data.len());
        let class_a = m.data.images()[a].class_id;
        let others: Vec<usize> = (0..m.data.len()).filter(|&i| m.data.images()[i].class_id != class_a).collect();
        let b = others[m.rng.random_range(0..others.len())];
        let e1 = random_caption(&m.data, a, &mut m.rng);
        let e2 = random_caption(&m.data, b, &mut m.rng);
        let z = normal_tensor(&mut m.rng, &[m.generator.config.noise_dim], 1.0);
        let ca = ca_noise(args, &mut ca_rng);
        cells.extend(interpolation_sweep(&m.generator, z.data(), &e1, &e2, steps, m.view, ca)?);
        row_labels.push(format!("class {class_a} -> class {}", m.data.images()[b].class_id));
    }
    let col_labels = (0..steps).map(|k| format!("t={:.4}", k as f64 / (steps - 1) as f64)).collect();
    let png = out.join("interpolation.png");
    write_mosaic(&png, &cells, steps, row_labels, col_labels)?;
    println!("wrote {pairs} sweeps of {steps} steps to {}", png.display());
    Ok(())
}

#[derive(Serialize)]
struct NeighborRecord {
    sample: usize,
    neighbor_index: usize,
    neighbor_class: u32,
    distance: f64,
}

#[derive(Serialize)]
struct NeighborReport {
    neighbors: Vec<NeighborRecord>,
}

fn nearest(cli: &Cli, loaded: &Loaded, args: &CheckpointArgs, count: usize) -> Result<()> {
    if count == 0 {
        return Err(invalid("--count must be positive"));
    }
    let mut m = load_model(loaded, args)?;
    let out = output_dir(&cli.common, "nn");
    write_provenance(&out, &provenance(cli, loaded, Some(&args.checkpoint)))?;
    let mut ca_rng = fork(&mut m.rng);
    let captions = sample_captions(&m.data, count, &mut m.rng);
    let images = generate_images(&m.generator, &captions, m.view, 64, &mut m.rng, ca_noise(args, &mut ca_rng));
    let train_images = m.data.pixel_tensor();
    let found = nearest_neighbor_analysis(&images, &train_images)?;
    let mut cells = Vec::with_capacity(2 * count);
    let mut records = Vec::with_capacity(count);
    for (i, nb) in found.iter().enumerate() {
        cells.push(images.row(i));
        cells.push(train_images.row(nb.index));
        records.push(NeighborRecord {
            sample: i,
            neighbor_index: nb.index,
            neighbor_class: m.data.images()[nb.index].class_id,
            distance: nb.distance,
        });
    }
    let text = toml::to_string(&NeighborReport { neighbors: records }).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("neighbors.toml"), text)?;
    let labels = vec!["sample".to_string(), "nearest training image".to_string()];
    let png = out.join("neighbors.png");
    write_mosaic(&png, &cells, 2, vec![], labels)?;
    println!("wrote {count} sample/neighbor pairs to {}", png.display());
    Ok(())
}

fn inspect_schedule(cfg: &ExperimentConfig, probes: &[u64]) -> Result<()> {
    let model = &cfg.model;
    if !model.family.is_progressive() {
        return Err(invalid(format!("{} does not grow progressively", model.family.as_str())));
    }
    let stages = model.num_stages();
    let batches = cfg.schedule.batch_schedule.unwrap_or(BatchSchedule {
        small: cfg.schedule.batch_size,
        large: cfg.schedule.batch_size,
        threshold: usize::MAX,
    });
    let rows = phase_table(cfg.schedule.images_per_phase, stages, model.base_resolution, batches)?;
    let mut text = format_phase_table(&rows);
    if !probes.is_empty() {
        text.push_str("# probe\timages\tstage\tresolution\tphase\timages_in_phase\talpha\n");
        for &n in probes {
            let g = GrowthState::new(cfg.schedule.images_per_phase)?.advance(n, stages);
            let _ = writeln!(
                text,
                "probe\t{n}\t{}\t{}\t{}\t{}\t{}",
                g.stage,
                g.resolution(model.base_resolution),
                g.phase.as_str(),
                g.images_seen_in_phase,
                g.fade_alpha()
            );
        }
    }
    print!("{text}");
    Ok(())
}
