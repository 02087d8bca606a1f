use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ziplab::diffusion::{
    sample, sample_with, train_generator, Edit, EditWindow, GeneratorTraining, Injection,
    SamplerConfig, TrainableEpsilonModel,
};
use ziplab::io::{fmt_f, fnv1a, read_pgm, write_atomic, write_pgm, Csv};
use ziplab::metrics::{
    attribute_class_probs, clip_score, compute_stats, frechet_distance, inception_score,
    metrics_csv, MetricRow,
};
use ziplab::nn::ParamSet;
use ziplab::rng::{derive_seed, normal_tensor, stream};
use ziplab::schedule::NoiseSchedule;
use ziplab::toyworld::{
    detect_attributes, detect_batch, embed_image_batch, embed_text, sample_dataset,
    AnalyticModel, AttributeId, AttributePriors, GaussianMixture, Scene,
};
use ziplab::unet::{ToyUNet, UNetConfig};
use ziplab::zip::{
    build_prompt, reconstruct, train_attribute_encoder, zip_edit_batch, AttributeEncoder,
    PromptPattern,
};
use ziplab::Tensor;

use crate::config::RunConfig;
use crate::exit::CliError;

type CmdResult = Result<Vec<PathBuf>, CliError>;

/// Files of one run directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data_dir(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    pub fn data_manifest(&self, split: &str) -> PathBuf {
        self.data_dir(split).join("manifest.csv")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("models").join("generator.params")
    }

    pub fn encoder(&self, attr: AttributeId) -> PathBuf {
        self.root.join("models").join(format!("encoder-{attr}.params"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn edits(&self) -> PathBuf {
        self.root.join("edits")
    }

    pub fn eval_dir(&self, attr: AttributeId) -> PathBuf {
        self.root.join("eval").join(attr.token())
    }

    pub fn theorem(&self) -> PathBuf {
        self.root.join("theorem")
    }

    pub fn config_echo(&self, command: &str) -> PathBuf {
        self.root.join("config").join(format!("{command}.toml"))
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.txt"))
    }
}

fn write_bytes(path: &Path, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn write_image(path: &Path, img: &Tensor, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    write_pgm(path, img).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn write_csv(path: &Path, csv: &Csv, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    write_bytes(path, csv.as_str().as_bytes(), written)
}

/// Writes the resolved config before the stage and the run manifest after it.
pub fn run(command: &str, cfg: &RunConfig, body: impl FnOnce(&Layout) -> CmdResult) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.run.out_dir);
    let started = Instant::now();
    let mut written = Vec::new();
    write_bytes(&layout.config_echo(command), cfg.to_toml().as_bytes(), &mut written)?;
    written.extend(body(&layout)?);

    let mut m = format!("command = {command}\n");
    m.push_str(&format!("wall_time_s = {:.3}\n", started.elapsed().as_secs_f64()));
    m.push_str("outputs:\n");
    for p in &written {
        let hash = fs::read(p).map(|b| fnv1a(&b)).unwrap_or(0);
        m.push_str(&format!("  {:016x} {}\n", hash, p.display()));
    }
    m.push_str("config:\n");
    m.push_str(&cfg.to_toml());
    write_atomic(&layout.manifest(command), m.as_bytes())
        .map_err(|e| CliError::io(format!("manifest: {e}")))?;
    Ok(())
}

fn attribute(cfg: &RunConfig) -> Result<AttributeId, CliError> {
    cfg.encoder
        .attribute
        .parse()
        .map_err(|_| CliError::bad_argument(format!("unknown attribute `{}`", cfg.encoder.attribute)))
}

fn scene_row(id: usize, s: &Scene, path: &str) -> Vec<String> {
    let f = s.attributes.flags();
    vec![
        id.to_string(),
        (f[0] as u8).to_string(),
        (f[1] as u8).to_string(),
        (f[2] as u8).to_string(),
        fmt_f(s.radius),
        fmt_f(s.offset_x),
        fmt_f(s.contrast),
        s.noise_seed.to_string(),
        path.to_string(),
    ]
}

const DATA_HEADER: [&str; 9] = [
    "id", "glasses", "smiling", "old", "radius", "offset_x", "contrast", "noise_seed", "path",
];

fn write_split(
    layout: &Layout,
    split: &str,
    n: usize,
    priors: &AttributePriors,
    seed: u64,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let dir = layout.data_dir(split);
    let mut csv = Csv::new(&DATA_HEADER);
    if n > 0 {
        let data = sample_dataset(n, priors, seed)?;
        for (i, scene) in data.scenes.iter().enumerate() {
            let rel = format!("images/{i:05}.pgm");
            write_image(&dir.join(&rel), &data.images.item(i).reshape(&[16, 16])?, written)?;
            csv.row(&scene_row(i, scene, &rel));
        }
    }
    write_csv(&layout.data_manifest(split), &csv, written)
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> CmdResult {
    let mut written = Vec::new();
    let attr = attribute(cfg)?;
    let train_seed = derive_seed(cfg.run.seed, "gen-data/train");
    write_split(layout, "train", cfg.data.n_train, &cfg.priors(), train_seed, &mut written)?;
    let test_priors = cfg.priors().with(attr, 0.0);
    let test_seed = derive_seed(cfg.run.seed, "gen-data/test");
    write_split(layout, "test", cfg.data.n_test, &test_priors, test_seed, &mut written)?;
    println!(
        "wrote {} training and {} test images to {}",
        cfg.data.n_train,
        cfg.data.n_test,
        layout.root.display()
    );
    Ok(written)
}

/// A dataset split read back from disk.
pub struct LoadedSplit {
    pub images: Option<Tensor>,
    /// Attribute flags per image.
    pub labels: Vec<[bool; 3]>,
}

pub fn load_split(layout: &Layout, split: &str) -> Result<LoadedSplit, CliError> {
    let manifest = layout.data_manifest(split);
    let text = fs::read_to_string(&manifest).map_err(|_| {
        CliError::missing(format!(
            "no {split} data at {}; run `zip-lab gen-data` first",
            manifest.display()
        ))
    })?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != DATA_HEADER.len() {
            return Err(CliError::bad_argument(format!("{}:{}: malformed row", manifest.display(), ln + 1)));
        }
        let flag = |c: &str| c == "1";
        labels.push([flag(cells[1]), flag(cells[2]), flag(cells[3])]);
        let path = layout.data_dir(split).join(cells[8]);
        images.push(read_pgm(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?);
    }
    let images = if images.is_empty() { None } else { Some(Tensor::batch(&images)?) };
    Ok(LoadedSplit { images, labels })
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::default_linear()
}

fn load_generator(layout: &Layout) -> Result<(ToyUNet, Vec<u8>), CliError> {
    let path = layout.generator();
    let bytes = fs::read(&path).map_err(|_| {
        CliError::missing(format!(
            "no generator at {}; run `zip-lab train-gen` first",
            path.display()
        ))
    })?;
    let params = ParamSet::from_bytes(&bytes)?;
    Ok((ToyUNet::from_params(UNetConfig::default(), schedule(), params)?, bytes))
}

fn load_encoder(layout: &Layout, attr: AttributeId, dim: usize) -> Result<AttributeEncoder, CliError> {
    let path = layout.encoder(attr);
    let bytes = fs::read(&path).map_err(|_| {
        CliError::missing(format!(
            "no {attr} encoder at {}; run `zip-lab train-encoder` first",
            path.display()
        ))
    })?;
    Ok(AttributeEncoder::from_params(ParamSet::from_bytes(&bytes)?, dim)?)
}

pub fn train_gen(cfg: &RunConfig, layout: &Layout) -> CmdResult {
    let split = load_split(layout, "train")?;
    let images = split
        .images
        .ok_or_else(|| CliError::empty("the training set is empty"))?;
    let s = schedule();
    let mut net = ToyUNet::new(UNetConfig::default(), s.clone(), derive_seed(cfg.run.seed, "train-gen/init"))?;
    let mut written = Vec::new();
    let models = layout.generator().with_file_name("generator.init.params");
    write_bytes(&models, &net.params().to_bytes(), &mut written)?;
    let tcfg = GeneratorTraining {
        epochs: cfg.generator.epochs,
        batch_size: cfg.generator.batch_size,
        lr: cfg.generator.lr,
        seed: derive_seed(cfg.run.seed, "train-gen/batches"),
    };
    let report = train_generator(&images, &mut net, &s, &tcfg)?;
    write_bytes(&layout.generator(), &net.params().to_bytes(), &mut written)?;
    let mut csv = Csv::new(&["epoch", "eps_mse"]);
    for (i, l) in report.epoch_loss.iter().enumerate() {
        csv.row(&[i.to_string(), fmt_f(*l)]);
    }
    write_csv(&layout.reports().join("generator.csv"), &csv, &mut written)?;
    if let Some(l) = report.epoch_loss.last() {
        println!("generator trained for {} epochs, final ε-MSE {l:.5}", report.epoch_loss.len());
    }
    Ok(written)
}

pub fn train_encoder(cfg: &RunConfig, layout: &Layout) -> CmdResult {
    let attr = attribute(cfg)?;
    let (generator, gen_bytes) = load_generator(layout)?;
    let split = load_split(layout, "train")?;
    let Some(images) = split.images else {
        return Err(CliError::empty("the training set is empty"));
    };
    let idx: Vec<usize> = split
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !l[attr.index()])
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(CliError::empty(format!("no training image lacks {attr}")));
    }
    let pool = images.gather(&idx);
    let ecfg = cfg.edit_config();
    let dim = generator.config().bottleneck_dim();
    let mut encoder = AttributeEncoder::new(dim, derive_seed(cfg.run.seed, "train-encoder/init"))?;
    let mut written = Vec::new();
    let init_path = layout.encoder(attr).with_extension("init.params");
    write_bytes(&init_path, &encoder.params().to_bytes(), &mut written)?;

    let report = train_attribute_encoder(&pool, attr, &generator, &mut encoder, &ecfg, &schedule())?;
    let after = fs::read(layout.generator())?;
    if after != gen_bytes {
        return Err(CliError::io("generator file changed during encoder training"));
    }
    write_csv(&layout.reports().join(format!("encoder-{attr}.csv")), &report.to_csv(), &mut written)?;
    if let Some((epoch, reason)) = &report.diverged {
        return Err(CliError {
            code: 1,
            message: format!("encoder training diverged at epoch {epoch}: {reason}; partial report written"),
        });
    }
    write_bytes(&layout.encoder(attr), &encoder.params().to_bytes(), &mut written)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "{attr} encoder: {} epochs, final clip {:.4}, recon {:.4}",
            report.epochs.len(),
            last.clip_loss,
            last.recon_loss
        );
    }
    Ok(written)
}

pub fn edit(cfg: &RunConfig, layout: &Layout) -> CmdResult {
    let attr = attribute(cfg)?;
    let input = cfg
        .edit
        .input
        .as_ref()
        .ok_or_else(|| CliError::bad_argument("edit needs an input image (--input PATH)"))?;
    let image = read_pgm(input).map_err(|e| match e {
        ziplab::Error::Io(_) => CliError::io(format!("{}: {e}", input.display())),
        other => CliError::bad_argument(format!("{}: {other}", input.display())),
    })?;
    if image.shape() != [16, 16] {
        return Err(CliError::bad_argument(format!("expected a 16x16 image, got {:?}", image.shape())));
    }
    let (generator, _) = load_generator(layout)?;
    let encoder = load_encoder(layout, attr, generator.config().bottleneck_dim())?;
    let ecfg = cfg.edit_config();
    let s = schedule();
    let stem = input.file_stem().map_or("input".into(), |s| s.to_string_lossy().to_string());
    let mut written = Vec::new();

    let recon = reconstruct(&image, &generator, &ecfg, &s)?;
    let mut rng = stream(cfg.run.seed, "edit/reference");
    let batch = image.clone().reshape(&[1, 16, 16])?;
    let out = zip_edit_batch(&batch, attr, &generator, &encoder, &ecfg, &mut rng)?;
    let dir = layout.edits();
    write_image(&dir.join(format!("{stem}-recon.pgm")), &recon, &mut written)?;
    write_image(&dir.join(format!("{stem}-{attr}.pgm")), &out.image.clone().reshape(&[16, 16])?, &mut written)?;

    let mut csv = Csv::new(&["t", "injected", "pred_x0_shift", "image"]);
    for snap in &out.trajectory.snapshots {
        let shift = match &snap.pred_x0_injected {
            Some(p) => p.mean_abs_diff(&snap.pred_x0)?,
            None => 0.0,
        };
        let shown = snap.pred_x0_injected.as_ref().unwrap_or(&snap.pred_x0);
        let file = if cfg.edit.save_steps {
            let rel = format!("{stem}-{attr}-steps/t{:04}.pgm", snap.t);
            write_image(&dir.join(&rel), &shown.clone().reshape(&[16, 16])?, &mut written)?;
            rel
        } else {
            String::new()
        };
        csv.row(&[
            snap.t.to_string(),
            (snap.pred_x0_injected.is_some() as u8).to_string(),
            fmt_f(shift),
            file,
        ]);
    }
    write_csv(&dir.join(format!("{stem}-{attr}-trajectory.csv")), &csv, &mut written)?;
    let scores = detect_attributes(&out.image.clone().reshape(&[16, 16])?)?;
    println!(
        "edited {} for {attr}: detector scores glasses {:.3} smiling {:.3} old {:.3}",
        input.display(),
        scores[0],
        scores[1],
        scores[2]
    );
    Ok(written)
}

/// Per-image outcome statistics of an edited set against its inputs.
pub struct EditSummary {
    pub success_rate: f64,
    pub nontarget_ok_rate: f64,
    pub mean_target_score: f64,
    pub mean_l1: f64,
}

pub fn summarize(inputs: &Tensor, outputs: &Tensor, attr: AttributeId) -> Result<EditSummary, CliError> {
    let d0 = detect_batch(inputs)?;
    let d1 = detect_batch(outputs)?;
    let n = inputs.batch_len();
    let (mut ok, mut keep, mut score) = (0usize, 0usize, 0.0f64);
    for i in 0..n {
        let (a, b) = (&d0.data()[i * 3..i * 3 + 3], &d1.data()[i * 3..i * 3 + 3]);
        if b[attr.index()] >= 0.9 {
            ok += 1;
        }
        if (0..3).filter(|&k| k != attr.index()).all(|k| (b[k] - a[k]).abs() <= 0.1) {
            keep += 1;
        }
        score += b[attr.index()] as f64;
    }
    Ok(EditSummary {
        success_rate: ok as f64 / n as f64,
        nontarget_ok_rate: keep as f64 / n as f64,
        mean_target_score: score / n as f64,
        mean_l1: outputs.mean_abs_diff(inputs)?,
    })
}

fn metric_row(method: &str, outputs: &Tensor, reference: &Tensor, text: &Tensor) -> Result<MetricRow, CliError> {
    let probs = attribute_class_probs(&detect_batch(outputs)?)?;
    let feats = embed_image_batch(outputs)?;
    let ref_feats = embed_image_batch(reference)?;
    let fid = frechet_distance(&compute_stats(&feats)?, &compute_stats(&ref_feats)?)?;
    let n = outputs.batch_len();
    let mut clip = 0.0;
    for i in 0..n {
        clip += clip_score(&Tensor::from_vec(feats.item(i).into_data()), text)?;
    }
    Ok(MetricRow {
        method: method.to_string(),
        is: inception_score(&probs)?,
        fid,
        clip: clip / n as f64,
    })
}

pub fn eval(cfg: &RunConfig, layout: &Layout) -> CmdResult {
    let attr = attribute(cfg)?;
    let split = load_split(layout, "test")?;
    let Some(images) = split.images else {
        return Err(CliError::empty("the test set is empty"));
    };
    if images.batch_len() < 2 {
        return Err(CliError::empty("evaluation needs at least two test images"));
    }
    let (generator, _) = load_generator(layout)?;
    let encoder = load_encoder(layout, attr, generator.config().bottleneck_dim())?;
    let ecfg = cfg.edit_config();
    let s = schedule();
    let prompts = build_prompt(&PromptPattern::default(), attr.token())?;
    let text = embed_text(&prompts.target)?;

    let recon = reconstruct(&images, &generator, &ecfg, &s)?;
    let mut rng = stream(cfg.run.seed, "eval/reference");
    let edited = zip_edit_batch(&images, attr, &generator, &encoder, &ecfg, &mut rng)?.image;

    let mut written = Vec::new();
    let dir = layout.eval_dir(attr);
    for i in 0..edited.batch_len() {
        write_image(&dir.join(format!("edited/{i:05}.pgm")), &edited.item(i).reshape(&[16, 16])?, &mut written)?;
    }
    let rows = vec![
        metric_row("original", &images, &images, &text)?,
        metric_row("reconstruction", &recon, &images, &text)?,
        metric_row("zip", &edited, &images, &text)?,
    ];
    write_csv(&dir.join("metrics.csv"), &metrics_csv(&rows), &mut written)?;

    let mut csv = Csv::new(&["method", "success_rate", "nontarget_ok_rate", "mean_target_score", "mean_l1"]);
    for (name, out) in [("reconstruction", &recon), ("zip", &edited)] {
        let sm = summarize(&images, out, attr)?;
        csv.row(&[
            name.to_string(),
            fmt_f(sm.success_rate),
            fmt_f(sm.nontarget_ok_rate),
            fmt_f(sm.mean_target_score),
            fmt_f(sm.mean_l1),
        ]);
    }
    write_csv(&dir.join("summary.csv"), &csv, &mut written)?;
    for r in &rows {
        println!("{:<15} IS {:.4}  FID {:.4}  CLIP {:.3}", r.method, r.is, r.fid, r.clip);
    }
    Ok(written)
}

pub fn theorem_check(cfg: &RunConfig, layout: &Layout) -> CmdResult {
    let s = schedule();
    let mut written = Vec::new();
    write_csv(&layout.theorem().join("cancellation.csv"), &s.dump_csv()?, &mut written)?;
    let (t_max, ratio) = s.max_adjacent_ratio(0.0)?;

    let dim = cfg.theorem.dim.max(1);
    let model = AnalyticModel::new(GaussianMixture::standard(dim)?, s.clone());
    let sampler = SamplerConfig {
        eta: 0.0,
        steps: (0..=s.t_max()).rev().collect(),
        seed: 0,
    };
    let mut rng = stream(cfg.run.seed, "theorem-check/start");
    let n = cfg.theorem.trajectories.max(1);
    let x_t = normal_tensor(&[n, dim], &mut rng);
    let delta_h = Tensor::full(&[dim], 1.0 / (dim as f32).sqrt());
    let clean = sample(&model, &x_t, &sampler, None, &s)?;

    let mut csv = Csv::new(&["weight", "d_sym", "d_asym", "ratio"]);
    for &w in &cfg.theorem.weights {
        let edit = Edit {
            delta_h: delta_h.clone(),
            window: EditWindow::new(cfg.edit.t_hi, cfg.edit.t_lo, w)?,
        };
        let sym = sample_with(&model, &x_t, &sampler, Some(&edit), Injection::Symmetric, &s)?;
        let asym = sample_with(&model, &x_t, &sampler, Some(&edit), Injection::Asymmetric, &s)?;
        let d_sym = sym.endpoint().sub(clean.endpoint())?.norm();
        let d_asym = asym.endpoint().sub(clean.endpoint())?.norm();
        let r = if d_asym > 0.0 { d_sym / d_asym } else { 0.0 };
        csv.row(&[fmt_f(w as f64), fmt_f(d_sym), fmt_f(d_asym), fmt_f(r)]);
    }
    write_csv(&layout.theorem().join("trajectory.csv"), &csv, &mut written)?;
    println!("max adjacent-step ratio |c_sym|/|c_asym| = {ratio:.12} at t = {t_max}");
    Ok(written)
}
