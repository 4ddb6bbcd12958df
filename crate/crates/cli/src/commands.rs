use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use poirec::eval::{self, EvalReport, CSV_HEADER};
use poirec::ingest::{load_dataset, save_dataset, Dataset, FilterConfig};
use poirec::model::{load_checkpoint, save_checkpoint, VariantSpec};
use poirec::numerics::RngState;
use poirec::synth::{self, SynthConfig};
use poirec::train::{self, TrainConfig, GRAD_CHECK_COORDS};
use sha2::{Digest, Sha256};

use crate::settings::{Format, Settings};

pub const ENCODED_FILE: &str = "dataset.jsonl";
pub const INGEST_MANIFEST: &str = "ingest_manifest.txt";
pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.json";
pub const LOSS_LOG: &str = "loss.log";
pub const CHECKPOINT: &str = "checkpoint.bin";
const GRAD_TOLERANCE: f64 = 1e-4;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// An encoded dataset path; a directory means its `dataset.jsonl`.
fn encoded_path(s: &Settings, command: &str) -> Result<PathBuf> {
    let p = s.path("dataset", command)?;
    Ok(if p.is_dir() { p.join(ENCODED_FILE) } else { p })
}

struct Encoded {
    dataset: Dataset,
    hash: String,
}

fn load_encoded(s: &Settings, command: &str) -> Result<Encoded> {
    let path = encoded_path(s, command)?;
    let bytes = read(&path)?;
    let dataset = load_dataset(&path)?;
    Ok(Encoded {
        dataset,
        hash: sha256_hex(&bytes)[..16].to_string(),
    })
}

pub fn ingest(s: &Settings) -> Result<()> {
    let input = s.path("dataset", "ingest")?;
    let out = s.path("out", "ingest")?;
    let d = FilterConfig::default();
    let cfg = FilterConfig {
        min_poi_count: s.get_or("min_poi_count", d.min_poi_count)?,
        max_history: s.get_or("max_history", d.max_history)?,
        min_history: s.get_or("min_history", d.min_history)?,
        ..d
    };
    let bytes = read(&input)?;
    let (dataset, report) = Dataset::from_tsv(&input, &cfg)?;
    if report.parse.parsed == 0 {
        bail!("no check-ins parsed from {} ({} lines)", input.display(), report.parse.lines);
    }
    create_dir(&out)?;
    let encoded = out.join(ENCODED_FILE);
    save_dataset(&dataset, &encoded)?;
    let sizes = dataset.vocab.sizes();
    let (p, f) = (&report.parse, &report.filter);
    let mut m = String::new();
    let _ = writeln!(m, "input_sha256={}", sha256_hex(&bytes));
    let _ = writeln!(m, "encoded_sha256={}", sha256_hex(&read(&encoded)?));
    let _ = writeln!(m, "lines={}\nparsed={}\nmalformed={}", p.lines, p.parsed, p.malformed);
    let _ = writeln!(
        m,
        "min_poi_count={}\nmax_history={}\nmin_history={}",
        cfg.min_poi_count, cfg.max_history, cfg.min_history
    );
    let _ = writeln!(
        m,
        "dropped_rare_poi_checkins={}\nrare_pois={}\ntruncated={}\ndropped_short_users={}\ndropped_short_checkins={}\ncheckins={}",
        f.dropped_rare_poi, f.rare_pois, f.truncated, f.dropped_short_users, f.dropped_short_checkins, f.output
    );
    let _ = writeln!(
        m,
        "users={}\npois={}\ncategories={}\nareas={}",
        sizes.users, sizes.pois, sizes.categories, sizes.areas
    );
    write(&out.join(INGEST_MANIFEST), &m)?;
    for (line, reason) in &p.errors {
        eprintln!("line {line}: {reason}");
    }
    print!("{m}");
    Ok(())
}

struct RunOutput {
    dir: PathBuf,
    model: poirec::model::Model,
    hash: String,
}

/// Trains one variant into `<out>/<config hash>/`.
fn train_run(enc: &Encoded, out: &Path, cfg: &TrainConfig, variant: VariantSpec) -> Result<RunOutput> {
    let hash = train::config_hash(cfg, &variant);
    let dir = out.join(&hash);
    create_dir(&dir)?;
    let ds = &enc.dataset;
    let sizes = ds.vocab.sizes();
    write(&dir.join(MANIFEST), train::manifest(cfg, &variant, &enc.hash, &sizes))?;
    let config = serde_json::json!({ "variant": variant.name(), "train": cfg });
    write(&dir.join(CONFIG), format!("{config:#}\n"))?;

    let log_path = dir.join(LOSS_LOG);
    let mut log = File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    log.write_all(b"epoch\tmean_loss\tinstances\n")?;
    let mut log_err = None;
    let result = train::fit(&ds.histories, sizes, &ds.vocab.poi_category, variant, cfg, |e| {
        let line = format!("{}\t{}\t{}\n", e.epoch, e.mean_loss, e.instances);
        if let Err(err) = log.write_all(line.as_bytes()).and_then(|_| log.flush()) {
            log_err.get_or_insert(err);
        }
        eprintln!("[{}] epoch {} mean loss {:.6}", variant.name(), e.epoch, e.mean_loss);
    });
    if let Some(err) = log_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    let (model, opt, report) = result.with_context(|| format!("training {}", variant.name()))?;
    if let Some(g) = report.grad_check {
        eprintln!("gradient check: max relative error {g:.3e}");
    }
    save_checkpoint(dir.join(CHECKPOINT), &model, Some(&opt), &hash)?;
    Ok(RunOutput { dir, model, hash })
}

pub fn train(s: &Settings) -> Result<()> {
    let enc = load_encoded(s, "train")?;
    let out = s.path("out", "train")?;
    let cfg = s.train_config()?;
    let run = train_run(&enc, &out, &cfg, s.variant()?)?;
    println!("run_dir={}", run.dir.display());
    println!("config_hash={}", run.hash);
    Ok(())
}

fn emit(reports: &[EvalReport], format: Format) -> String {
    match format {
        Format::Json => reports.iter().map(|r| r.to_json_line() + "\n").collect(),
        Format::Csv => {
            let mut out = format!("{CSV_HEADER}\n");
            for r in reports {
                out.push_str(&r.to_csv_row());
                out.push('\n');
            }
            out
        }
    }
}

fn report_file(format: Format) -> &'static str {
    match format {
        Format::Json => "report.json",
        Format::Csv => "report.csv",
    }
}

pub fn evaluate(s: &Settings) -> Result<()> {
    let enc = load_encoded(s, "evaluate")?;
    let ck_path = s.path("checkpoint", "evaluate")?;
    let ck = load_checkpoint(&ck_path)?;
    let ds = &enc.dataset;
    ck.model.check_vocab(&ds.vocab.sizes())?;

    // sequence settings saved by `train`, unless overridden
    let run_dir = ck_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut cfg = TrainConfig::default();
    let saved = run_dir.join(CONFIG);
    if saved.exists() {
        let v: serde_json::Value = serde_json::from_slice(&read(&saved)?)?;
        cfg = serde_json::from_value(v["train"].clone()).with_context(|| format!("reading {}", saved.display()))?;
    }
    cfg.s1_window = s.get_or("s1_window", cfg.s1_window)?;
    cfg.seq_cap = s.get_or("seq_cap", cfg.seq_cap)?;

    let variant = match s.raw("variant") {
        Some(_) => s.variant()?,
        None => s.with_long_setting(ck.model.variant)?,
    };
    let report = eval::evaluate(&variant, &ck.model, &ds.histories, &ds.vocab.poi_category, &cfg.seq(), &ck.config_hash)?;
    let format = s.format()?;
    let text = emit(std::slice::from_ref(&report), format);
    let dir = match s.raw("out") {
        Some(o) => PathBuf::from(o),
        None => run_dir,
    };
    create_dir(&dir)?;
    write(&dir.join(report_file(format)), &text)?;
    print!("{text}");
    Ok(())
}

pub const DEFAULT_ABLATION: &str = "full long short s1";

pub fn ablate(s: &Settings) -> Result<()> {
    let enc = load_encoded(s, "ablate")?;
    let out = s.path("out", "ablate")?;
    let cfg = s.train_config()?;
    let format = s.format()?;
    let list = s.raw("variants").unwrap_or(DEFAULT_ABLATION);
    let mut variants = Vec::new();
    for v in list.split(|c: char| c == ';' || c.is_whitespace()).filter(|v| !v.is_empty()) {
        variants.push(s.with_long_setting(VariantSpec::parse(v)?)?);
    }
    if variants.is_empty() {
        bail!("ablate requires at least one variant");
    }
    let ds = &enc.dataset;
    let mut reports = Vec::new();
    for v in variants {
        let run = train_run(&enc, &out, &cfg, v)?;
        let r = eval::evaluate(&v, &run.model, &ds.histories, &ds.vocab.poi_category, &cfg.seq(), &run.hash)?;
        write(&run.dir.join(report_file(format)), emit(std::slice::from_ref(&r), format))?;
        reports.push(r);
    }
    let text = emit(&reports, format);
    let name = match format {
        Format::Json => "ablation.jsonl",
        Format::Csv => "ablation.csv",
    };
    write(&out.join(name), &text)?;
    print!("{text}");
    Ok(())
}

pub fn gradcheck(s: &Settings) -> Result<()> {
    let enc = load_encoded(s, "gradcheck")?;
    let cfg = s.train_config()?;
    let variant = s.variant()?;
    let eps: f64 = s.get_or("eps", 1e-5)?;
    let coords: usize = s.get_or("coords", GRAD_CHECK_COORDS)?;
    let count: usize = s.get_or("instances", 1)?;
    let ds = &enc.dataset;
    let mut model = poirec::model::Model::new(ds.vocab.sizes(), variant, &mut RngState::derive(cfg.seed, 0))?;
    let split = ds.split(false);
    let instances = train::make_instances(&ds.histories, &split, ds.vocab.sizes().pois, &cfg, &mut RngState::derive(cfg.seed, 1))?;
    if instances.is_empty() {
        bail!("dataset has no training instances");
    }
    let mut rng = RngState::derive(cfg.seed, 3);
    let mut worst = 0.0f64;
    for inst in instances.iter().take(count) {
        let r = train::gradient_check(&mut model, &ds.histories, &ds.vocab.poi_category, inst, &cfg, eps, coords, &mut rng)?;
        println!(
            "{}",
            serde_json::json!({
                "user": inst.user,
                "step": inst.step(),
                "max_rel_error": r.max_rel_error,
                "worst_leaf": r.worst_leaf,
                "worst_index": r.worst_index,
                "analytic": r.analytic,
                "numeric": r.numeric,
                "coordinates": r.coordinates,
                "skipped_at_kinks": r.skipped,
            })
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst >= GRAD_TOLERANCE {
        bail!("gradient check failed: max relative error {worst:.3e} >= {GRAD_TOLERANCE:e}");
    }
    Ok(())
}

pub fn synth(s: &Settings) -> Result<()> {
    let out = s.path("out", "synth")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        users: s.get_or("users", d.users)?,
        areas: s.get_or("areas", d.areas)?,
        pois_per_area: s.get_or("pois_per_area", d.pois_per_area)?,
        categories: s.get_or("categories", d.categories)?,
        blocks: s.get_or("blocks", d.blocks)?,
        routines_per_user: s.get_or("routines", d.routines_per_user)?,
        checkins_per_user: s.get_or("checkins_per_user", d.checkins_per_user)?,
        noise: s.get_or("noise", d.noise)?,
        seed: s.get_or("seed", d.seed)?,
        ..d
    };
    let records = synth::generate(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    synth::write_tsv(&records, &out)?;
    println!("checkins={}\nusers={}\npois={}\nout={}", records.len(), cfg.users, cfg.num_pois(), out.display());
    Ok(())
}
