use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pivotalign::alignment::LossConfig;
use pivotalign::bank::{labels_path, read_bank, read_labels, sidecar_path, EmbeddingBank};
use pivotalign::eval::{self, Direction, ReportRecord};
use pivotalign::manifest::{RunManifest, MANIFEST_FILE};
use pivotalign::pipeline::{Checkpoint, LOG_FILE};
use pivotalign::projector::{decode_head, ProjectionHead, UPC_MAGIC};
use pivotalign::synth::{self, SynthConfig};
use pivotalign::trainer::{self, TrainConfig};
use pivotalign::Error;
use serde_json::json;

use crate::{
    BenchArgs, DirectionArg, EvalClassifyArgs, EvalRetrievalArgs, GenSynthArgs, InspectArgs, SimmatArgs,
    TrainArgs, ZscoreArgs,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::NonFinite(_) | Error::ZeroNorm(_) => EXIT_NUMERIC,
            Error::DimMismatch { .. } | Error::Invalid(_) => EXIT_USAGE,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), CliError>;

pub fn configure_threads(flag: Option<u16>) -> CmdResult {
    let n = match flag {
        Some(n) => usize::from(n),
        None => match std::env::var("PIVOTALIGN_THREADS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| CliError::usage(format!("PIVOTALIGN_THREADS must be a positive integer, got {v:?}")))?,
            Err(_) => return Ok(()),
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot set up {n} threads: {e}")))
}

fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<EmbeddingBank, CliError> {
    let bank = read_bank(path)?;
    manifest.add_input(path)?;
    Ok(bank)
}

/// Labels from an explicit path, else the bank's sidecar, else `None`.
fn labels_for(bank_path: &Path, explicit: Option<&Path>, manifest: &mut RunManifest) -> Result<Option<Vec<usize>>, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = labels_path(bank_path);
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    let labels = read_labels(&path)?;
    manifest.add_input(&path)?;
    Ok(Some(labels))
}

fn check_len(labels: &[usize], bank: &EmbeddingBank, what: &str) -> CmdResult {
    if labels.len() != bank.rows() {
        return Err(CliError::usage(format!(
            "{what}: {} labels for {} rows",
            labels.len(),
            bank.rows()
        )));
    }
    Ok(())
}

fn finish(mut manifest: RunManifest, started: Instant, outputs: &[PathBuf], path: &Path) -> CmdResult {
    for p in outputs {
        manifest.add_output(p)?;
    }
    manifest.wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    manifest.write(path)?;
    Ok(())
}

fn report_manifest_path(out: &Path) -> PathBuf {
    sidecar_path(out, ".manifest.json")
}

pub fn gen_synth(a: GenSynthArgs) -> CmdResult {
    let started = Instant::now();
    let cfg = SynthConfig {
        latent_dim: a.latent_dim,
        clip_dim: a.clip_dim,
        multi_dim: a.multi_dim,
        n_concepts: a.concepts,
        samples_per_concept: a.samples_per_concept,
        map_noise: a.noise,
        heldout_pairs: a.heldout_pairs,
        seed: a.seed,
    };
    let data = synth::generate(&cfg)?;
    let written = data.write(&a.out_dir)?;
    let manifest = RunManifest::new("gen-synth", serde_json::to_value(&cfg).expect("config serializes"));
    finish(manifest, started, &written, &a.out_dir.join(MANIFEST_FILE))?;
    println!(
        "wrote {} files to {} ({} rows per space, {} held-out pairs)",
        written.len(),
        a.out_dir.display(),
        cfg.rows_per_space(),
        cfg.heldout_pairs
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let started = Instant::now();
    let loss = LossConfig {
        tau_retrieval: a.tau,
        tau_nce: a.tau,
        lambda_intra: a.lambda,
        use_text: !a.no_text,
        use_pseudo: !a.no_pseudo,
        use_intra: !a.no_intra,
        use_perturbation: !a.no_perturb,
        ..LossConfig::default()
    }
    .with_sigma2(a.sigma2);
    let cfg = TrainConfig {
        loss,
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        lr: a.lr,
        weight_decay: a.wd,
        seed: a.seed,
        deterministic: a.deterministic,
        out_dim: a.out_dim,
        dump_dir: Some(a.out.clone()),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg).expect("config serializes"));
    let qc = read_input(&a.queries_clip, &mut manifest)?;
    let qm = read_input(&a.queries_multi, &mut manifest)?;
    let images = read_input(&a.image_bank, &mut manifest)?;
    let texts = read_input(&a.text_bank, &mut manifest)?;

    let outcome = trainer::train(&qc, &qm, &images, &texts, &cfg)?;
    let ckpt = Checkpoint {
        f_c: outcome.f_c.clone(),
        f_m: outcome.f_m.clone(),
    };
    let [pc, pm] = ckpt.save(&a.out)?;
    let log_path = a.out.join(LOG_FILE);
    trainer::write_log(&outcome.log, &log_path)?;

    let means = outcome.epoch_means();
    for (e, m) in means.iter().enumerate() {
        println!("epoch {} mean loss {m:.6}", e + 1);
    }
    println!(
        "trainable parameters: {} ({} + {})",
        ckpt.trainable_params(),
        ckpt.f_c.param_count(),
        ckpt.f_m.param_count()
    );
    manifest.results.insert("epoch_mean_loss".into(), json!(means));
    manifest.results.insert("steps".into(), json!(outcome.log.len()));
    manifest.results.insert("trainable_params".into(), json!(ckpt.trainable_params()));
    finish(manifest, started, &[pc, pm, log_path], &a.out.join(MANIFEST_FILE))
}

fn print_records(records: &[ReportRecord]) {
    for r in records {
        let mut key = r.metric.clone();
        if let Some(d) = &r.direction {
            key.push_str(&format!(" {d}"));
        }
        if let Some(k) = r.k {
            key.push_str(&format!(" @{k}"));
        }
        println!("{key:<28} {:.4}", r.value);
    }
}

fn write_records(records: &[ReportRecord], out: Option<&Path>, manifest: RunManifest, started: Instant) -> CmdResult {
    if let Some(out) = out {
        eval::write_report(records, out)?;
        finish(manifest, started, &[out.to_path_buf()], &report_manifest_path(out))?;
    }
    Ok(())
}

fn load_ckpt(dir: &Path, manifest: &mut RunManifest) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(dir)?;
    for p in Checkpoint::paths(dir) {
        manifest.add_input(&p)?;
    }
    Ok(ckpt)
}

pub fn eval_retrieval(a: EvalRetrievalArgs) -> CmdResult {
    let started = Instant::now();
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::usage("--k values must be >= 1"));
    }
    let directions: Vec<Direction> = match a.direction {
        DirectionArg::Both => vec![Direction::I2T, Direction::T2I],
        DirectionArg::I2t => vec![Direction::I2T],
        DirectionArg::T2i => vec![Direction::T2I],
    };
    let mut manifest = RunManifest::new(
        "eval-retrieval",
        json!({"k": a.k, "direction": format!("{:?}", a.direction).to_lowercase()}),
    );
    let ckpt = load_ckpt(&a.ckpt, &mut manifest)?;
    let images = read_input(&a.images, &mut manifest)?;
    let captions = read_input(&a.captions, &mut manifest)?;
    let image_labels = labels_for(&a.images, None, &mut manifest)?.unwrap_or_else(|| (0..images.rows()).collect());
    let caption_labels = labels_for(&a.captions, a.labels.as_deref(), &mut manifest)?
        .ok_or_else(|| CliError::usage("captions have no .labels sidecar; pass --labels"))?;
    check_len(&image_labels, &images, "images")?;
    check_len(&caption_labels, &captions, "captions")?;

    let pi = ckpt.project(&images)?;
    let pc = ckpt.project(&captions)?;
    let report = eval::evaluate_retrieval(pi.view(), &image_labels, pc.view(), &caption_labels, &a.k, &directions)?;
    let records = report.records();
    print_records(&records);
    write_records(&records, a.json_out.as_deref(), manifest, started)
}

pub fn eval_classify(a: EvalClassifyArgs) -> CmdResult {
    let started = Instant::now();
    let mut manifest = RunManifest::new("eval-classify", json!({}));
    let ckpt = load_ckpt(&a.ckpt, &mut manifest)?;
    let images = read_input(&a.images, &mut manifest)?;
    let classes = read_input(&a.classes, &mut manifest)?;
    let labels = labels_for(&a.images, a.labels.as_deref(), &mut manifest)?
        .ok_or_else(|| CliError::usage("images have no .labels sidecar; pass --labels"))?;
    check_len(&labels, &images, "images")?;
    let pi = ckpt.project(&images)?;
    let pc = ckpt.project(&classes)?;
    let report = eval::classify_zero_shot(pi.view(), pc.view(), &labels)?;
    println!("macro_f1 {:.4}", report.macro_f1);
    println!("accuracy {:.4}", report.accuracy);
    write_records(&report.records(), a.json_out.as_deref(), manifest, started)
}

pub fn simmat(a: SimmatArgs) -> CmdResult {
    let started = Instant::now();
    let mut manifest = RunManifest::new("simmat", json!({}));
    let ckpt = load_ckpt(&a.ckpt, &mut manifest)?;
    let ba = read_input(&a.bank_a, &mut manifest)?;
    let bb = read_input(&a.bank_b, &mut manifest)?;
    let pa = ckpt.project(&ba)?;
    let pb = ckpt.project(&bb)?;
    let m = eval::similarity_matrix(pa.view(), pb.view())?;
    let mut outputs = Vec::new();
    if let Some(p) = &a.csv_out {
        eval::write_matrix_csv(&m, p)?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.pgm_out {
        eval::write_pgm(&m, p)?;
        outputs.push(p.clone());
    }
    for (p, proj) in [(&a.export_a, &pa), (&a.export_b, &pb)] {
        if let Some(p) = p {
            eval::write_matrix_csv(proj, p)?;
            outputs.push(p.clone());
        }
    }
    let mean = m.mean().unwrap_or(0.0);
    println!("similarity matrix {}x{}, mean {mean:.4}", m.nrows(), m.ncols());
    if let Some(first) = outputs.first() {
        let mpath = report_manifest_path(first);
        finish(manifest, started, &outputs, &mpath)?;
    }
    Ok(())
}

pub fn zscore(a: ZscoreArgs) -> CmdResult {
    let started = Instant::now();
    let mut manifest = RunManifest::new("zscore", json!({"std": "population"}));
    let table = eval::read_scores_csv(&a.scores)?;
    manifest.add_input(&a.scores)?;
    let z = eval::zscore_per_language(&table)?;
    let records: Vec<ReportRecord> = z
        .iter()
        .map(|(lang, &value)| ReportRecord {
            metric: format!("mean_zscore[{lang}]"),
            direction: None,
            k: None,
            value,
        })
        .collect();
    for (lang, v) in &z {
        println!("{lang:<12} {v:+.4}");
    }
    write_records(&records, a.json_out.as_deref(), manifest, started)
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let started = Instant::now();
    let mut manifest = RunManifest::new("bench", json!({"repeats": a.repeats}));
    let ckpt = load_ckpt(&a.ckpt, &mut manifest)?;
    let bank = read_input(&a.bank, &mut manifest)?;
    let head = ckpt.head_for(&bank)?;
    let r = eval::bench_inference(head, &bank, a.repeats as usize)?;
    println!("samples {} timed repeats {}", r.samples, r.timed_repeats);
    let mut records = Vec::new();
    for (name, t) in [("projection_ms", r.projection_ms), ("search_ms", r.search_ms), ("total_ms", r.total_ms)] {
        println!("{name:<14} median {:.6} mean {:.6}", t.median, t.mean);
        for (stat, v) in [("median", t.median), ("mean", t.mean)] {
            records.push(ReportRecord {
                metric: format!("{name}_{stat}"),
                direction: None,
                k: None,
                value: v,
            });
        }
    }
    write_records(&records, a.json_out.as_deref(), manifest, started)
}

fn describe_head(label: &str, h: &ProjectionHead) {
    println!(
        "{label}: role={} mode={:?} shape={} trainable_params={}",
        h.role.as_deref().unwrap_or("-"),
        h.mode,
        h.shape,
        h.param_count()
    );
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    for path in &a.paths {
        if path.is_dir() {
            let ckpt = Checkpoint::load(path)?;
            println!("checkpoint {}", path.display());
            describe_head("  f_c", &ckpt.f_c);
            describe_head("  f_m", &ckpt.f_m);
            println!(
                "  total trainable parameters: {} ({} + {})",
                ckpt.trainable_params(),
                ckpt.f_c.param_count(),
                ckpt.f_m.param_count()
            );
            let mpath = path.join(MANIFEST_FILE);
            if mpath.exists() {
                let m = RunManifest::read(&mpath)?;
                println!("  manifest: command={} version={} config={}", m.command, m.tool_version, m.config);
            }
            continue;
        }
        let bytes = std::fs::read(path).map_err(|e| CliError::from(io_error(path, e)))?;
        if bytes.starts_with(&UPC_MAGIC) {
            let head = decode_head(&bytes, path)?;
            describe_head(&path.display().to_string(), &head);
        } else {
            let bank = read_bank(path)?;
            let meta: Vec<String> = bank.meta().iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!(
                "{}: bank rows={} dim={} {}",
                path.display(),
                bank.rows(),
                bank.dim(),
                meta.join(" ")
            );
            let lp = labels_path(path);
            if lp.exists() {
                let labels = read_labels(&lp)?;
                check_len(&labels, &bank, &lp.display().to_string())?;
                println!("  labels={}", labels.len());
            }
        }
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}
