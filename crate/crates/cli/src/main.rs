use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use msdet::config::{read_config, RunConfig};
use msdet::data::{self, Dataset, Sample, SceneSpec, Split};
use msdet::eval::EvalReport;
use msdet::train::{evaluate_model, train, History, TrainConfig};
use msdet::verify::{gradient_suite, INSTANCES};
use msdet::zoo::{build, count_params, estimate_macs, trace_shapes, Model, ModelVariant};
use msdet_tensor::gradcheck::DEFAULT_TOLERANCE;
use msdet_tensor::weights;

/// Lightweight multi-scale detectors: inspect, verify, train and compare.
#[derive(Debug, Parser)]
#[command(name = "msdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Model variant.
    #[arg(long, global = true)]
    variant: Option<ModelVariant>,

    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset directory, id list, DOTA label directory, or `synth`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Output file or directory for machine-readable results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    #[arg(long, global = true)]
    input_size: Option<usize>,

    /// Number of synthetic images for `gen` and `compare --data synth`.
    #[arg(long, global = true)]
    images: Option<usize>,

    /// Weights manifest written by `train` (the blob sits beside it).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-node output shapes of one forward pass.
    Trace,
    /// Per-module trainable parameter counts.
    Params,
    /// Per-module multiply-accumulates of one forward pass.
    Flops,
    /// Finite-difference check of every op and block.
    Gradcheck,
    /// Seeded 8:1:1 split of an id list or a DOTA label directory.
    Split,
    /// Generate a synthetic multi-scale dataset.
    Gen,
    /// Train one variant on a dataset directory.
    Train,
    /// Evaluate saved weights on the test split.
    Eval,
    /// Train and evaluate all six variants.
    Compare,
}

/// Errors that came from bad input rather than a failed run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

const DEFAULT_IMAGES: usize = 250;
const WEIGHTS_MANIFEST: &str = "weights.manifest";
const HISTORY_CSV: &str = "history.csv";
const TEST_REPORT: &str = "test_report.txt";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<msdet::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Trace => cmd_trace(cli)?,
        Command::Params => cmd_params(cli)?,
        Command::Flops => cmd_flops(cli)?,
        Command::Gradcheck => return cmd_gradcheck(cli),
        Command::Split => cmd_split(cli)?,
        Command::Gen => cmd_gen(cli)?,
        Command::Train => cmd_train(cli)?,
        Command::Eval => cmd_eval(cli)?,
        Command::Compare => cmd_compare(cli)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Config file (or `base`), then flag overrides.
fn run_config(cli: &Cli, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_config(p).with_context(|| format!("reading {}", p.display()))?,
        None => base,
    };
    if let Some(v) = cli.variant {
        cfg.variant = Some(v);
    }
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = cli.input_size {
        cfg.model.input_size = n;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn variant_of(cfg: &RunConfig) -> ModelVariant {
    cfg.variant.unwrap_or(ModelVariant::Baseline)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| usage("--out <DIR> is required"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_trace(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli, RunConfig::default())?;
    let model = build(variant_of(&cfg), &cfg.model)?;
    let trace = trace_shapes(&model, cfg.model.input_size)?;
    let mut text = String::new();
    for t in &trace {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(text, "{} {} {}", t.name, t.op, shape.join("x"));
    }
    print!("{text}");
    if let Some(p) = &cli.out {
        write_out(p, &text)?;
    }
    Ok(())
}

fn count_report(title: &str, variant: ModelVariant, rows: &[(String, u64)], total: u64) -> (String, String) {
    let mut human = format!("{variant} {title}\n");
    let mut kv = format!("variant={variant}\n");
    for (m, c) in rows {
        let _ = writeln!(human, "  {m:<24} {c:>14}");
        let _ = writeln!(kv, "{m}={c}");
    }
    let _ = writeln!(human, "  {:<24} {total:>14}", "total");
    let _ = writeln!(kv, "total={total}");
    (human, kv)
}

fn cmd_params(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli, RunConfig::default())?;
    let variant = variant_of(&cfg);
    let table = count_params(&build(variant, &cfg.model)?);
    let rows: Vec<_> = table.rows.iter().map(|r| (r.module.clone(), r.count)).collect();
    let (human, kv) = count_report("parameters", variant, &rows, table.total);
    print!("{human}");
    if let Some(p) = &cli.out {
        write_out(p, &kv)?;
    }
    Ok(())
}

fn cmd_flops(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli, RunConfig::default())?;
    let variant = variant_of(&cfg);
    let table = estimate_macs(&build(variant, &cfg.model)?, cfg.model.input_size)?;
    let rows: Vec<_> = table.rows.iter().map(|r| (r.module.clone(), r.count)).collect();
    let (human, mut kv) = count_report(
        &format!("multiply-accumulates at {0}x{0}", cfg.model.input_size),
        variant,
        &rows,
        table.total,
    );
    kv.insert_str(0, &format!("input_size={}\n", cfg.model.input_size));
    print!("{human}");
    if let Some(p) = &cli.out {
        write_out(p, &kv)?;
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli) -> Result<ExitCode> {
    let start = Instant::now();
    let rows = gradient_suite(cli.seed.unwrap_or(0), INSTANCES)?;
    let mut kv = format!("tolerance={DEFAULT_TOLERANCE:e}\ninstances={INSTANCES}\n");
    for r in &rows {
        println!(
            "{:<24} max rel error {:.3e} over {} coordinates  {}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            if r.passes() { "ok" } else { "FAIL" }
        );
        let _ = writeln!(kv, "{}={:e}", r.name, r.max_rel_error);
    }
    let failed = rows.iter().filter(|r| !r.passes()).count();
    println!("{} cases, {failed} failed", rows.len());
    eprintln!("gradcheck took {:.1} s", start.elapsed().as_secs_f64());
    if let Some(p) = &cli.out {
        write_out(p, &kv)?;
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

/// Ids from a DOTA label directory (file stems of `*.txt`) or an id list.
fn read_ids(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut ids = Vec::new();
        for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "txt") {
                let ann = data::read_dota(&p)?;
                if ann.warnings > 0 {
                    eprintln!("{}: skipped {} malformed lines", p.display(), ann.warnings);
                }
                ids.push(ann.image_id);
            }
        }
        ids.sort();
        Ok(ids)
    } else {
        Ok(data::read_id_list(path)?)
    }
}

fn cmd_split(cli: &Cli) -> Result<()> {
    let src = cli.data.as_deref().ok_or_else(|| usage("split needs --data <ID LIST or LABEL DIR>"))?;
    let ids = read_ids(src)?;
    let s = data::split(&ids, cli.seed.unwrap_or(0))?;
    println!("train {}  val {}  test {}", s.train.len(), s.val.len(), s.test.len());
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        data::write_id_list(&dir.join(data::layout::TRAIN), &s.train)?;
        data::write_id_list(&dir.join(data::layout::VAL), &s.val)?;
        data::write_id_list(&dir.join(data::layout::TEST), &s.test)?;
    }
    Ok(())
}

fn synth(cli: &Cli) -> Result<(Dataset, Split<String>)> {
    let seed = cli.seed.unwrap_or(0);
    let base = SceneSpec { seed, ..SceneSpec::default() };
    let spec = match cli.input_size {
        Some(n) => base.with_image_size(n),
        None => base,
    };
    let d = data::gen_synthetic(&spec, cli.images.unwrap_or(DEFAULT_IMAGES))?;
    if d.forced_placements > 0 {
        eprintln!("{} objects placed past the overlap limit", d.forced_placements);
    }
    let s = data::split(&d.ids(), seed)?;
    Ok((d, s))
}

fn cmd_gen(cli: &Cli) -> Result<()> {
    let dir = out_dir(cli)?;
    let (d, s) = synth(cli)?;
    data::write_dataset(dir, &d, &s)?;
    let objects: usize = d.samples.iter().map(|x| x.gts.len()).sum();
    println!(
        "{} images, {objects} objects, classes {}; train {} val {} test {}",
        d.samples.len(),
        d.class_names.join("/"),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn load_data(cli: &Cli) -> Result<(Dataset, Split<String>)> {
    match cli.data.as_deref() {
        Some(p) if p == Path::new("synth") => synth(cli),
        Some(p) => Ok(data::read_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?),
        None => Err(usage("--data <DIR | synth> is required")),
    }
}

/// Training config for a dataset: toy preset unless a config file is
/// given; the class count and input size follow the data.
fn data_config(cli: &Cli, d: &Dataset) -> Result<RunConfig> {
    let mut cfg = run_config(cli, RunConfig::toy())?;
    let first = d.samples.first().ok_or_else(|| usage("dataset is empty"))?;
    if first.image.height != first.image.width {
        return Err(usage(format!("images must be square, got {}x{}", first.image.height, first.image.width)));
    }
    if cli.input_size.is_none() && cli.config.is_none() {
        cfg.model.input_size = first.image.height;
    }
    if cfg.model.input_size != first.image.height {
        return Err(usage(format!(
            "input size {} does not match the {}px images",
            cfg.model.input_size, first.image.height
        )));
    }
    cfg.model.num_classes = d.class_names.len();
    cfg.model.validate()?;
    Ok(cfg)
}

fn sets<'a>(d: &'a Dataset, s: &Split<String>) -> Result<[Vec<&'a Sample>; 3]> {
    Ok([d.subset(&s.train)?, d.subset(&s.val)?, d.subset(&s.test)?])
}

struct Trained {
    model: Model,
    history: History,
    test: EvalReport,
}

fn train_variant(variant: ModelVariant, cfg: &RunConfig, sets: &[Vec<&Sample>; 3]) -> Result<Trained> {
    let model = build(variant, &cfg.model)?;
    let history = train(&model, &sets[0], &sets[1], &cfg.train, |r| {
        println!(
            "{variant} epoch {:>3}  loss {:.4} (box {:.4} obj {:.4} cls {:.4})  val R {:.3} mAP50 {:.3} mAP50-95 {:.3}",
            r.epoch, r.loss_total, r.loss_box, r.loss_obj, r.loss_cls, r.val_recall, r.val_map50, r.val_map5095
        );
    })
    .with_context(|| format!("training {variant}"))?;
    let test = evaluate_model(&model, &sets[2], cfg.train.eval_conf, cfg.train.pr_conf)?;
    Ok(Trained { model, history, test })
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let dir = out_dir(cli)?;
    let (d, s) = load_data(cli)?;
    let cfg = data_config(cli, &d)?;
    let variant = variant_of(&cfg);
    let start = Instant::now();
    let t = train_variant(variant, &cfg, &sets(&d, &s)?)?;
    eprintln!("trained {variant} in {:.1} s", start.elapsed().as_secs_f64());
    write_out(&dir.join(HISTORY_CSV), &t.history.to_csv())?;
    write_out(&dir.join(TEST_REPORT), &t.test.to_kv())?;
    let manifest = dir.join(WEIGHTS_MANIFEST);
    weights::save(&t.model.store.named(), &manifest, &manifest.with_extension("bin"))?;
    print!("{}", t.test.to_table(&d.class_names));
    Ok(())
}

fn cmd_eval(cli: &Cli) -> Result<()> {
    let manifest = cli.weights.as_deref().ok_or_else(|| usage("eval needs --weights <MANIFEST>"))?;
    let (d, s) = load_data(cli)?;
    let cfg = data_config(cli, &d)?;
    let model = build(variant_of(&cfg), &cfg.model)?;
    let named = weights::load(manifest, &manifest.with_extension("bin"))
        .with_context(|| format!("loading {}", manifest.display()))?;
    model.store.load(&named)?;
    let test = d.subset(&s.test)?;
    let report = evaluate_model(&model, &test, cfg.train.eval_conf, cfg.train.pr_conf)?;
    print!("{}", report.to_table(&d.class_names));
    if let Some(p) = &cli.out {
        write_out(p, &report.to_kv())?;
    }
    Ok(())
}

struct CompareRow {
    variant: ModelVariant,
    params: u64,
    macs: u64,
    precision: f64,
    recall: f64,
    map50: f64,
    map5095: f64,
    best_epoch: usize,
}

fn compare_markdown(rows: &[CompareRow], input_size: usize, cfg: &TrainConfig, images: usize, test: usize) -> String {
    let pct = |v: f64| 100.0 * v;
    let base = rows.iter().find(|r| r.variant == ModelVariant::Baseline);
    let mut s = String::new();
    let _ = writeln!(s, "| Model | Params | MACs@{input_size} | Precision% | Recall% | mAP50% | mAP50-95% | dmAP50 (pp) | dmAP50-95 (pp) | best epoch |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
    for r in rows {
        let (d50, d5095) = base.map_or((0.0, 0.0), |b| (pct(r.map50) - pct(b.map50), pct(r.map5095) - pct(b.map5095)));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:+.1} | {:+.1} | {} |",
            r.variant,
            r.params,
            r.macs,
            pct(r.precision),
            pct(r.recall),
            pct(r.map50),
            pct(r.map5095),
            d50,
            d5095,
            r.best_epoch
        );
    }
    let _ = writeln!(
        s,
        "\nScored on the {test}-image test split of {images} images; {} epochs max, batch {}, lr {}, seed {}. \
         Precision and Recall at IoU 0.50 and confidence >= {}; AP is all-point interpolated. \
         Deltas are variant minus baseline in percentage points.",
        cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed, cfg.pr_conf
    );
    s
}

fn cmd_compare(cli: &Cli) -> Result<()> {
    let (d, s) = load_data(cli)?;
    let cfg = data_config(cli, &d)?;
    let sets = sets(&d, &s)?;
    let mut rows = Vec::new();
    for variant in ModelVariant::ALL {
        let start = Instant::now();
        let t = train_variant(variant, &cfg, &sets)?;
        eprintln!("trained {variant} in {:.1} s", start.elapsed().as_secs_f64());
        rows.push(CompareRow {
            variant,
            params: count_params(&t.model).total,
            macs: estimate_macs(&t.model, cfg.model.input_size)?.total,
            precision: t.test.precision,
            recall: t.test.recall,
            map50: t.test.map50.unwrap_or(0.0),
            map5095: t.test.map50_95.unwrap_or(0.0),
            best_epoch: t.history.best_epoch.unwrap_or(0),
        });
        if let Some(dir) = &cli.out {
            let vdir = dir.join(variant.name());
            write_out(&vdir.join(HISTORY_CSV), &t.history.to_csv())?;
            write_out(&vdir.join(TEST_REPORT), &t.test.to_kv())?;
        }
    }
    let md = compare_markdown(&rows, cfg.model.input_size, &cfg.train, d.samples.len(), sets[2].len());
    print!("{md}");
    if let Some(dir) = &cli.out {
        write_out(&dir.join("compare.md"), &md)?;
    }
    Ok(())
}
