use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use voxfield_core::field::{PruneConfig, RenderSettings, DEFAULT_SHIFT};
use voxfield_core::geometry::{Camera, Pose};
use voxfield_core::io::{self, EvalReport, Split, ViewReport};
use voxfield_core::net::NetConfig;
use voxfield_core::objectives::LossConfig;
use voxfield_core::pipeline::{
    bake, generate_synthetic_scene, render_view, view_metrics, Scene, SynthSpec, TrainConfig,
    TrainLog, Trainer,
};
use voxfield_core::{Error, RadianceField, RgbdFrame};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, inputs or file contents; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::UnsupportedVersion { .. } | Error::Format { .. } => {
                CliError::Usage(e.to_string())
            }
            Error::NonFinite(_) | Error::Io { .. } | Error::Infeasible(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic scene directories.
    Synth(SynthArgs),
    /// Train one network on every scene under a data directory.
    Train(TrainArgs),
    /// Run the network once on a scene and save the explicit field.
    Bake(BakeArgs),
    /// Render RGB and depth images from a field or checkpoint.
    Render(RenderArgs),
    /// Score rendered images against a scene's captured views.
    Eval(EvalArgs),
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Bake(a) => bake_cmd(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 7)]
    cameras: usize,
    #[arg(long, default_value_t = 40.0)]
    fov_deg: f64,
    /// Give objects view-dependent colors.
    #[arg(long)]
    view_dependent: bool,
    /// Scene units per stored 16-bit depth step.
    #[arg(long, default_value_t = 0.001)]
    depth_scale: f64,
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        width: a.width,
        height: a.height,
        voxel_size: a.voxel_size.unwrap_or(defaults.voxel_size),
        objects: a.objects,
        cameras: a.cameras,
        fov_deg: a.fov_deg,
        view_dependent: a.view_dependent,
        ..defaults
    };
    spec.validate()?;
    for i in 0..a.count {
        let scene = generate_synthetic_scene(a.seed.wrapping_add(i as u64), &spec)?;
        let dir = a.out.join(format!("scene_{i:03}"));
        io::save_scene(&dir, &scene, a.depth_scale)?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Scene directory, or a directory of scene directories.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at the end of training.
    #[arg(long)]
    out: PathBuf,
    /// JSON Lines log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is reused.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Scene whose held-out views are scored after every epoch.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    patches_per_view: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    augment_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    lambda_percep: Option<f64>,
    #[arg(long)]
    percep_levels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda_stage: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    encoder_channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    decoder_channels: Option<Vec<usize>>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    sh_degree: Option<usize>,
    /// Enable the decoder pruning layers.
    #[arg(long)]
    pruning: bool,
    #[arg(long)]
    tau_alpha: Option<f64>,
    #[arg(long)]
    tau_dist: Option<f64>,
}

/// Default decay epochs scaled to a shorter schedule.
fn scaled_decays(epochs: usize) -> Vec<usize> {
    let d = TrainConfig::default();
    d.decay_epochs
        .iter()
        .map(|&e| e * epochs / d.epochs)
        .filter(|&e| e >= 1 && e < epochs)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Applies `--epochs` and `--decay-epochs` the same way for fresh and resumed runs.
fn apply_schedule(c: &mut TrainConfig, epochs: Option<usize>, decays: Option<&Vec<usize>>) {
    if let Some(e) = epochs {
        c.epochs = e;
        c.decay_epochs = scaled_decays(e);
    }
    if let Some(d) = decays {
        c.decay_epochs = d.clone();
    }
}

fn configs(a: &TrainArgs) -> (NetConfig, TrainConfig) {
    let mut net = NetConfig::default();
    if let Some(c) = &a.encoder_channels {
        net.encoder_channels = c.clone();
    }
    if let Some(c) = &a.decoder_channels {
        net.decoder_channels = c.clone();
    }
    if let Some(b) = a.blocks {
        net.blocks = b;
    }
    if let Some(d) = a.sh_degree {
        net.sh_degree = d;
    }
    net.pruning = a.pruning;
    net.prune = PruneConfig {
        tau_alpha: a.tau_alpha.unwrap_or(net.prune.tau_alpha),
        tau_dist: a.tau_dist.unwrap_or(net.prune.tau_dist),
        ..net.prune
    };

    let mut c = TrainConfig::default();
    apply_schedule(&mut c, a.epochs, a.decay_epochs.as_ref());
    let stages = net.decoder_channels.len();
    let mut loss = LossConfig {
        lambda_stage: (0..stages)
            .map(|s| 0.5f64.powi((stages - 1 - s) as i32))
            .collect(),
        ..LossConfig::default()
    };
    if let Some(v) = a.lambda_depth {
        loss.lambda_depth = v;
    }
    if let Some(v) = a.lambda_percep {
        loss.lambda_percep = v;
    }
    if let Some(v) = a.percep_levels {
        loss.percep_levels = v;
    }
    if let Some(v) = &a.lambda_stage {
        loss.lambda_stage = v.clone();
    }
    c.loss = loss;
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { c.$f = v; })*};
    }
    set!(
        lr,
        patches_per_view,
        patch_size,
        voxel_size,
        augment_prob,
        seed,
        weight_decay,
        near,
        far
    );
    (net, c)
}

fn load_scenes(data: &Path) -> CliResult<Vec<Scene>> {
    let dirs = io::find_scenes(data);
    if dirs.is_empty() {
        return Err(CliError::Usage(format!(
            "no scenes found in {}",
            data.display()
        )));
    }
    dirs.iter()
        .map(|d| {
            io::load_scene(d).map_err(|e| match CliError::from(e) {
                CliError::Usage(m) => CliError::Usage(format!("{}: {m}", d.display())),
                other => other,
            })
        })
        .collect()
}

fn train(a: TrainArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.data)?;
    let validation = a.validation.as_deref().map(io::load_scene).transpose()?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let (mut trainer, mut log) = match &a.resume {
        Some(path) => {
            let mut ckpt = io::load_checkpoint(path)?;
            apply_schedule(&mut ckpt.config, a.epochs, a.decay_epochs.as_ref());
            ckpt.config.validate()?;
            let log = if log_path.is_file() {
                io::load_log(&log_path)?
            } else {
                TrainLog::default()
            };
            (Trainer::from_checkpoint(ckpt)?, log)
        }
        None => {
            let (net, config) = configs(&a);
            (Trainer::new(net, config)?, TrainLog::default())
        }
    };
    let per_epoch = scenes.len() as u64;
    let total = trainer.config().epochs as u64 * per_epoch;
    eprintln!(
        "training on {} scene(s), {} parameters, {} steps",
        scenes.len(),
        trainer.params().count(),
        total
    );
    while trainer.steps_done() < total {
        let next = (trainer.steps_done() / per_epoch + 1) * per_epoch;
        let result = trainer.run_until(next, &scenes, validation.as_ref(), &mut log);
        if let Err(e) = result {
            // keep what was learned so far for inspection
            io::save_log(&log_path, &log)?;
            return Err(e.into());
        }
        if let Some(s) = log.steps.last() {
            eprintln!(
                "epoch {} step {} loss {:.6} lr {:.1e}",
                s.epoch, s.step, s.loss, s.lr
            );
        }
    }
    io::save_checkpoint(&a.out, &trainer.checkpoint())?;
    io::save_log(&log_path, &log)?;
    eprintln!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BakeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn bake_cmd(a: BakeArgs) -> CliResult<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let scene = io::load_scene(&a.scene)?;
    let field = bake(&ckpt.params, &ckpt.net, &scene, &ckpt.config)?;
    io::save_field(&a.out, &field)?;
    eprintln!("wrote {} ({} voxels)", a.out.display(), field.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Seen,
    Novel,
    All,
}

impl SplitArg {
    fn accepts(self, s: Split) -> bool {
        matches!(
            (self, s),
            (SplitArg::All, _) | (SplitArg::Seen, Split::Seen) | (SplitArg::Novel, Split::Novel)
        )
    }
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Baked field file.
    #[arg(long, conflicts_with = "checkpoint")]
    field: Option<PathBuf>,
    /// Checkpoint to bake on the fly; needs `--scene`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene whose cameras are rendered.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Novel)]
    split: SplitArg,
    /// Manifest index of a single view to render.
    #[arg(long)]
    view: Option<usize>,
    /// Camera-to-world pose, 16 row-major values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pose: Option<Vec<f64>>,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 40.0)]
    fov_deg: f64,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<f64>,
    #[arg(long)]
    black_background: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn view_name(index: usize) -> String {
    format!("view{index:03}")
}

/// Frames of `scene_dir` selected by split and optional index, with manifest indices.
fn select_views(
    scene_dir: &Path,
    split: SplitArg,
    view: Option<usize>,
) -> CliResult<Vec<(usize, RgbdFrame)>> {
    let (m, frames) = io::load_scene_views(scene_dir)?;
    if let Some(i) = view {
        if i >= frames.len() {
            return Err(CliError::Usage(format!(
                "view {i} out of range ({} views)",
                frames.len()
            )));
        }
    }
    let picked: Vec<(usize, RgbdFrame)> = m
        .views
        .iter()
        .zip(frames)
        .enumerate()
        .filter(|(i, (v, _))| match view {
            Some(want) => *i == want,
            None => split.accepts(v.split),
        })
        .map(|(i, (_, f))| (i, f))
        .collect();
    if picked.is_empty() {
        return Err(CliError::Usage(format!(
            "no views selected in {}",
            scene_dir.display()
        )));
    }
    Ok(picked)
}

fn render(a: RenderArgs) -> CliResult<()> {
    let (field, mut settings): (RadianceField, RenderSettings) = match (&a.field, &a.checkpoint) {
        (Some(path), None) => {
            let f = io::load_field(path)?;
            let s = RenderSettings::for_cell(f.voxel_size() * f.stride() as f64, 0.1, 4.0);
            (f, s)
        }
        (None, Some(path)) => {
            let scene_dir = a
                .scene
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint needs --scene".into()))?;
            let ckpt = io::load_checkpoint(path)?;
            let scene = io::load_scene(scene_dir)?;
            let f = bake(&ckpt.params, &ckpt.net, &scene, &ckpt.config)?;
            let mut s = ckpt.config.render_settings(f.stride());
            s.shift = ckpt.net.density_shift;
            (f, s)
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --field or --checkpoint".into(),
            ))
        }
    };
    if let Some(v) = a.near {
        settings.near = v;
    }
    if let Some(v) = a.far {
        settings.far = v;
    }
    settings.shift = a.shift.unwrap_or(if a.field.is_some() {
        DEFAULT_SHIFT
    } else {
        settings.shift
    });
    if a.black_background {
        settings.background = [0.0; 3];
    }
    settings.validate()?;

    let cameras: Vec<(String, Camera)> = match &a.pose {
        Some(p) => {
            let m: [f64; 16] = p
                .as_slice()
                .try_into()
                .map_err(|_| CliError::Usage(format!("--pose needs 16 values, got {}", p.len())))?;
            let pose = Pose::from_row_major(&m, 1e-6)?;
            vec![(
                "pose".into(),
                Camera::with_fov(a.width, a.height, a.fov_deg.to_radians(), pose)?,
            )]
        }
        None => {
            let dir = a.scene.as_ref().ok_or_else(|| {
                CliError::Usage("need --scene or --pose to know what to render".into())
            })?;
            select_views(dir, a.split, a.view)?
                .into_iter()
                .map(|(i, f)| (view_name(i), f.camera))
                .collect()
        }
    };
    for (name, cam) in cameras {
        let (rgb, depth) = render_view(&field, &cam, &settings)?;
        io::save_rgb_png(&a.out.join(format!("{name}_rgb.png")), &rgb)?;
        io::save_depth(&a.out.join(format!("{name}_depth.vxd")), &depth)?;
        eprintln!("rendered {name}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `render`.
    #[arg(long)]
    pred: PathBuf,
    /// Scene holding the reference views.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Novel)]
    split: SplitArg,
    #[arg(long)]
    view: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mut views = Vec::new();
    for (i, gt) in select_views(&a.scene, a.split, a.view)? {
        let name = view_name(i);
        let rgb = io::load_rgb_png(&a.pred.join(format!("{name}_rgb.png")))?;
        let depth = io::load_depth(&a.pred.join(format!("{name}_depth.vxd")))?;
        let m = view_metrics(&rgb, &depth, &gt)?;
        eprintln!(
            "{name}: psnr {:.3} ssim {:.4} depth {:?}",
            m.psnr, m.ssim, m.depth_error
        );
        views.push(ViewReport {
            view: name,
            psnr: m.psnr,
            ssim: m.ssim,
            depth_error: m.depth_error,
        });
    }
    let report = EvalReport::new(views);
    io::write_json(&a.out, &report)?;
    eprintln!(
        "mean psnr {:.3} ssim {:.4} depth {:?}",
        report.mean_psnr, report.mean_ssim, report.mean_depth_error
    );
    Ok(())
}
