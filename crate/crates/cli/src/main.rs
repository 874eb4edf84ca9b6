//! `landseg` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use landseg::data_synth::{concept, load_dataset, write_dataset, LabelMask, LabelQuality, MultispectralImage, SyntheticSceneSpec, MANIFEST_FILE};
use landseg::inference_fusion::{fuse, proxy_refine, sweep_csv, sweep_plot, threshold_sweep, CentroidClassifier, ConfusionMatrix, FusionConfig, Metrics, DEFAULT_SWEEP};
use landseg::kv::KvFile;
use landseg::model::{LandSegmenter, ModelConfig};
use landseg::params::Checkpoint;
use landseg::seg_decoder::ProbabilityStack;
use landseg::taxonomy::ClassTaxonomy;
use landseg::training::{fit, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "landseg", version, about = "Open-vocabulary land-cover segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Las,
    Smoke,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-subset dataset.
    GenData {
        /// Key-value scene spec; defaults to the chosen preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "las")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict with canonical class names of any taxonomy.
    ZeroShot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second-model stack to refine with the segmenter's features.
        #[arg(long)]
        proxy: Option<PathBuf>,
    },
    /// Fit the centroid stand-in for a CLIP-style model.
    ClipFit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        radius: usize,
    },
    /// Predict with the centroid stand-in.
    ClipPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence-guided fusion of two probability stacks.
    Fuse {
        #[arg(long)]
        land: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        ct: f64,
        /// Also evaluate over a threshold grid (needs --gt).
        #[arg(long)]
        sweep: bool,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a directory of predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        num_classes: Option<usize>,
        /// Taxonomy file for class names in the report.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(v) = std::env::var("LANDSEG_NUM_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) => {
                landseg::parallel::set_threads(n);
            }
            Err(_) => {
                eprintln!("error: LANDSEG_NUM_WORKERS must be a non-negative integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, preset, out, seed, force } => gen_data(spec.as_deref(), preset, &out, seed, force),
        Command::Train { data, config, out, resume } => train(&data, config.as_deref(), &out, resume.as_deref()),
        Command::ZeroShot { ckpt, image, taxonomy, out, proxy } => zero_shot(&ckpt, &image, &taxonomy, &out, proxy.as_deref()),
        Command::ClipFit { data, out, radius } => clip_fit(&data, &out, radius),
        Command::ClipPredict { model, image, taxonomy, out } => clip_predict(&model, &image, &taxonomy, &out),
        Command::Fuse { land, clip, gt, ct, sweep, thresholds, out } => fuse_cmd(&land, &clip, gt.as_deref(), ct, sweep, thresholds, &out),
        Command::Eval { pred, gt, out, num_classes, taxonomy } => eval(&pred, &gt, out.as_deref(), num_classes, taxonomy.as_deref()),
    }
}

fn write_echo(dir: &Path, command: &str, entries: &[(&str, String)], extra: Option<&KvFile>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut kv = KvFile::new();
    kv.set("command", command);
    for (k, v) in entries {
        kv.set(&format!("arg.{k}"), v);
    }
    if let Some(x) = extra {
        kv.merge(x);
    }
    fs::write(dir.join("config.txt"), kv.to_text())?;
    Ok(())
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(spec_path: Option<&Path>, preset: Preset, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            let kv = KvFile::parse(&text).with_context(|| format!("spec {}", p.display()))?;
            SyntheticSceneSpec::from_kv(&kv).with_context(|| format!("spec {}", p.display()))?
        }
        None => match preset {
            Preset::Las => SyntheticSceneSpec::las_like(0),
            Preset::Smoke => SyntheticSceneSpec::smoke(0),
        },
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        bail!("output directory {} is not empty (use --force to overwrite)", out.display());
    }
    let ds = landseg::data_synth::generate_scene(&spec)?;
    write_dataset(&ds, out)?;
    write_echo(out, "gen-data", &[("seed", spec.seed.to_string()), ("spec", spec_path.map(show).unwrap_or_else(|| format!("{preset:?}").to_lowercase()))], Some(&spec.to_kv()))?;
    println!("wrote {} subsets, {} samples to {}", ds.subsets.len(), ds.num_samples(), out.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    if !data.join(MANIFEST_FILE).exists() {
        bail!("no {MANIFEST_FILE} in {}", data.display());
    }
    let mut kv = KvFile::new();
    let ck = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            kv.merge(&ck.meta);
            Some(ck)
        }
        None => None,
    };
    if let Some(p) = config {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        kv.merge(&KvFile::parse(&text).with_context(|| format!("config {}", p.display()))?);
    }
    let tcfg = TrainConfig::from_kv(&kv)?;
    let mut model = match &ck {
        Some(ck) => LandSegmenter::from_checkpoint(ck)?,
        None => LandSegmenter::new(ModelConfig::from_kv(&kv)?)?,
    };
    let ds = load_dataset(data)?;
    let wanted: Option<Vec<String>> = kv.list("train.subsets")?;
    let subsets: Vec<_> = match &wanted {
        Some(ids) => ids.iter().map(|id| ds.subset(id).ok_or_else(|| anyhow!("unknown subset `{id}`"))).collect::<Result<_>>()?,
        None => ds.subsets.iter().collect(),
    };
    let mut echo = KvFile::new();
    model.config.write_kv(&mut echo);
    tcfg.write_kv(&mut echo);
    write_echo(out, "train", &[("data", show(data)), ("config", config.map(show).unwrap_or_default()), ("resume", resume.map(show).unwrap_or_default())], Some(&echo))?;

    let started = std::time::Instant::now();
    let report = fit(&mut model, &subsets, &tcfg, Some(out), ck.as_ref())?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for m in &report.history {
        let idx = match series.iter().position(|s| s.0 == m.subset) {
            Some(i) => i,
            None => {
                series.push((m.subset.clone(), Vec::new()));
                series.len() - 1
            }
        };
        series[idx].1.push((m.step as f64, m.loss.total));
    }
    series.push(("validation".into(), report.validation.iter().map(|&(s, v)| (s as f64, v)).collect()));
    fs::write(out.join("loss.svg"), landseg::plot::line_plot("Training loss", "step", "loss", &series))?;
    let last = report.history.last().map(|m| m.loss.total).unwrap_or(f64::NAN);
    println!("trained {} steps in {:.1?}; last loss {last:.4}; best validation loss {:.4}", report.history.len(), started.elapsed(), report.best_val);
    Ok(())
}

fn palette(tax: &ClassTaxonomy) -> Vec<[u8; 3]> {
    tax.classes()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            c.color.or_else(|| concept(c.canonical()).map(|x| x.color)).unwrap_or_else(|| {
                let h = (k as u32).wrapping_mul(2_654_435_761);
                [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
            })
        })
        .collect()
}

fn write_png(path: &Path, labels: &[u8], w: usize, h: usize, colors: &[[u8; 3]]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = labels.iter().flat_map(|&l| colors.get(l as usize).copied().unwrap_or([0, 0, 0])).collect();
    writer.write_image_data(&data)?;
    Ok(())
}

fn write_prediction(out: &Path, stack: &ProbabilityStack, tax: &ClassTaxonomy, stem: &str) -> Result<()> {
    let labels = stack.label_map();
    let (h, w) = (stack.height(), stack.width());
    stack.save(&out.join(format!("{stem}_probs.lsb")))?;
    LabelMask::new(h, w, labels.clone(), LabelQuality::Exact, tax.id())?.save(&out.join(format!("{stem}_label.lsb")))?;
    write_png(&out.join(format!("{stem}_map.png")), &labels, w, h, &palette(tax))
}

fn zero_shot(ckpt: &Path, image: &Path, taxonomy: &Path, out: &Path, proxy: Option<&Path>) -> Result<()> {
    let tax = ClassTaxonomy::load(taxonomy)?;
    let model = LandSegmenter::from_checkpoint(&Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?)?;
    let img = MultispectralImage::load(image)?;
    let stack = model.predict(&img, &tax)?;
    let mut args = vec![("ckpt", show(ckpt)), ("image", show(image)), ("taxonomy", show(taxonomy))];
    if let Some(p) = proxy {
        args.push(("proxy", show(p)));
    }
    write_echo(out, "zero-shot", &args, None)?;
    write_prediction(out, &stack, &tax, "land")?;
    if let Some(p) = proxy {
        let clip = ProbabilityStack::load(p)?;
        let refined = proxy_refine(&model.features(&img)?, &clip)?;
        write_prediction(out, &refined, &tax, "refined")?;
    }
    println!("{} classes, {}×{} map written to {}", tax.len(), stack.height(), stack.width(), out.display());
    Ok(())
}

fn clip_fit(data: &Path, out: &Path, radius: usize) -> Result<()> {
    let ds = load_dataset(data)?;
    let samples = ds.subsets.iter().flat_map(|s| s.samples.iter().map(move |x| (&x.image, &x.label, &s.taxonomy)));
    let clf = CentroidClassifier::fit(samples, radius)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, clf.to_kv().to_text())?;
    println!("fitted {} centroids", clf.centroids.len());
    Ok(())
}

fn clip_predict(model: &Path, image: &Path, taxonomy: &Path, out: &Path) -> Result<()> {
    let clf = CentroidClassifier::from_kv(&KvFile::parse(&fs::read_to_string(model)?)?)?;
    let tax = ClassTaxonomy::load(taxonomy)?;
    let stack = clf.predict(&MultispectralImage::load(image)?, &tax)?;
    write_echo(out, "clip-predict", &[("model", show(model)), ("image", show(image)), ("taxonomy", show(taxonomy))], None)?;
    write_prediction(out, &stack, &tax, "clip")
}

fn report(m: &Metrics, names: &[String]) -> String {
    let mut s = format!("mIoU\t{:.6}\nOA\t{:.6}\n", m.miou, m.oa);
    for (k, v) in m.per_class_iou.iter().enumerate() {
        let name = names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        s.push_str(&format!("{name}\t{}\n", v.map_or("n/a".into(), |v| format!("{v:.6}"))));
    }
    s
}

fn fuse_cmd(land: &Path, clip: &Path, gt: Option<&Path>, ct: f64, sweep: bool, thresholds: Option<Vec<f64>>, out: &Path) -> Result<()> {
    let (l, c) = (ProbabilityStack::load(land)?, ProbabilityStack::load(clip)?);
    if l.num_classes() != c.num_classes() {
        bail!("class count mismatch: {} vs {}", l.num_classes(), c.num_classes());
    }
    let grid = thresholds.unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
    write_echo(
        out,
        "fuse",
        &[("land", show(land)), ("clip", show(clip)), ("gt", gt.map(show).unwrap_or_default()), ("ct", ct.to_string()), ("sweep", sweep.to_string()), ("thresholds", landseg::kv::join_list(&grid))],
        None,
    )?;
    let fused = fuse(&l, &c, &FusionConfig::with_threshold(ct))?;
    fused.probs.save(&out.join("fused_probs.lsb"))?;
    LabelMask::new(l.height(), l.width(), fused.labels.clone(), LabelQuality::Exact, l.taxonomy_id.clone())?.save(&out.join("fused_label.lsb"))?;
    let names: Vec<String> = (0..l.num_classes()).map(|k| format!("class{k}")).collect();
    match gt {
        Some(g) => {
            let gt = LabelMask::load(g)?;
            let m = landseg::inference_fusion::evaluate(&fused.labels, &gt, l.num_classes())?;
            let text = report(&m, &names);
            fs::write(out.join("metrics.txt"), &text)?;
            print!("{text}");
            if sweep {
                let rows = threshold_sweep(&l, &c, &gt, &grid)?;
                fs::write(out.join("sweep.csv"), sweep_csv(&rows, &names))?;
                fs::write(out.join("sweep.svg"), sweep_plot(&rows))?;
                for r in &rows {
                    println!("C_t={}\tmIoU={:.6}\tOA={:.6}", r.threshold, r.metrics.miou, r.metrics.oa);
                }
            }
        }
        None if sweep => bail!("--sweep needs --gt"),
        None => println!("fused map written to {} (no ground truth, metrics skipped)", out.display()),
    }
    Ok(())
}

fn lsb_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type()?.is_file() && name.ends_with(".lsb") {
            out.insert(name);
        }
    }
    Ok(out)
}

fn eval(pred: &Path, gt: &Path, out: Option<&Path>, num_classes: Option<usize>, taxonomy: Option<&Path>) -> Result<()> {
    let (p, g) = (lsb_names(pred)?, lsb_names(gt)?);
    if p.is_empty() {
        bail!("no .lsb predictions in {}", pred.display());
    }
    if p != g {
        let only_p: Vec<&String> = p.difference(&g).collect();
        let only_g: Vec<&String> = g.difference(&p).collect();
        bail!("file names differ; only in predictions: {only_p:?}; only in ground truth: {only_g:?}");
    }
    let pairs: Vec<(LabelMask, LabelMask)> = p.iter().map(|n| Ok((LabelMask::load(&pred.join(n))?, LabelMask::load(&gt.join(n))?))).collect::<Result<_>>()?;
    let tax = taxonomy.map(ClassTaxonomy::load).transpose()?;
    let k = match (num_classes, &tax) {
        (Some(k), _) => k,
        (None, Some(t)) => t.len(),
        (None, None) => {
            let max = pairs.iter().flat_map(|(a, b)| {
                let ia = b.ignore_value();
                a.classes().iter().chain(b.classes()).copied().filter(move |&c| c != ia)
            });
            max.max().map_or(1, |m| m as usize + 1)
        }
    };
    let mut cm = ConfusionMatrix::new(k);
    for (name, (pm, gm)) in p.iter().zip(&pairs) {
        cm.add(pm.classes(), gm).with_context(|| format!("evaluating {name}"))?;
    }
    let m = cm.metrics()?;
    let names: Vec<String> = match &tax {
        Some(t) => t.canonical_names().iter().map(|s| s.to_string()).collect(),
        None => (0..k).map(|c| format!("class{c}")).collect(),
    };
    let text = report(&m, &names);
    print!("{text}");
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| pred.join("eval"));
    write_echo(&dir, "eval", &[("pred", show(pred)), ("gt", show(gt)), ("num_classes", k.to_string())], None)?;
    fs::write(dir.join("report.txt"), &text)?;
    let mut csv = String::from("gt\\pred");
    for n in &names {
        csv.push_str(&format!(",{n}"));
    }
    csv.push('\n');
    for r in 0..k {
        csv.push_str(&names[r]);
        for c in 0..k {
            csv.push_str(&format!(",{}", m.confusion.counts[r * k + c]));
        }
        csv.push('\n');
    }
    fs::write(dir.join("confusion.csv"), csv)?;
    let counts: Vec<f64> = m.confusion.counts.iter().map(|&c| c as f64).collect();
    fs::write(dir.join("confusion.svg"), landseg::plot::heatmap("Confusion matrix", &names, &counts))?;
    Ok(())
}
