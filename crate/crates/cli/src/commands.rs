//! One resolved run struct and one `run` function per subcommand. Input
//! paths are taken as given; output file names are joined onto `out_dir`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use setvqa::dataset::{generate_dataset, sha256_hex, Dataset};
use setvqa::evalstats::{evaluate, import_annotations, write_distribution_csv, BiasReport, FieldMap};
use setvqa::model::Model;
use setvqa::scenes::{mix_seed, GenConfig, QuestionMix};
use setvqa::traincore::Checkpoint;
use setvqa::training::{gradcheck_mode, pretrain_then_finetune, train, GradcheckSetup, Mode, TrainConfig};

use crate::config::to_json;
use crate::error::{CliError, CliResult};

/// Seed stream for the optional pre-training set written by `gen`.
const PRETRAIN_STREAM: u64 = 0x7072_6574;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenRun {
    pub out_dir: PathBuf,
    pub out: PathBuf,
    /// Store feature vectors in the file instead of regenerating on load.
    pub embed_features: bool,
    /// Also write a color/position pre-training set.
    pub pretrain_out: Option<PathBuf>,
    pub pretrain_samples: usize,
    pub config: GenConfig,
}

impl Default for GenRun {
    fn default() -> Self {
        Self {
            out_dir: ".".into(),
            out: "dataset.jsonl".into(),
            embed_features: false,
            pretrain_out: None,
            pretrain_samples: 1000,
            config: GenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub out_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub config: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self { out_dir: ".".into(), data: None, checkpoint: "checkpoint.json".into(), config: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub scrub_visual: bool,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self { out_dir: ".".into(), checkpoint: None, data: None, scrub_visual: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeRun {
    pub out_dir: PathBuf,
    /// A generated dataset file.
    pub data: Option<PathBuf>,
    /// An external JSON / JSONL annotation file.
    pub annotations: Option<PathBuf>,
    pub fields: FieldMap,
}

impl Default for AnalyzeRun {
    fn default() -> Self {
        Self { out_dir: ".".into(), data: None, annotations: None, fields: FieldMap::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckRun {
    pub out_dir: PathBuf,
    pub modes: Vec<Mode>,
    pub setup: GradcheckSetup,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        Self { out_dir: ".".into(), modes: Mode::ALL.to_vec(), setup: GradcheckSetup::default() }
    }
}

/// Run-level record written next to every command's outputs.
#[derive(Debug, Serialize)]
struct CommandManifest<'a> {
    command: &'a str,
    version: &'a str,
    config_file: Option<&'a Path>,
    resolved_config: PathBuf,
    threads: usize,
    /// Output file -> sha256 of its bytes.
    outputs: BTreeMap<String, String>,
    wall_clock_secs: f64,
    details: Value,
}

/// Collects written files and finishes with the config and manifest.
pub struct Outputs {
    command: &'static str,
    dir: PathBuf,
    written: BTreeMap<String, String>,
    start: Instant,
}

impl Outputs {
    pub fn new(command: &'static str, dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })?;
        Ok(Self { command, dir: dir.to_path_buf(), written: BTreeMap::new(), start: Instant::now() })
    }

    pub fn path(&self, name: &Path) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &Path, bytes: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Output { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(&path, bytes).map_err(|source| CliError::Output { path: path.clone(), source })?;
        self.record(&path)?;
        Ok(path)
    }

    /// Hashes a file some other writer produced.
    pub fn record(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|source| CliError::Output { path: path.to_path_buf(), source })?;
        self.written.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish<T: Serialize>(mut self, resolved: &T, config_file: Option<&Path>, details: Value) -> CliResult<()> {
        let cfg_name = PathBuf::from(format!("{}.config.json", self.command));
        let cfg_path = self.write(&cfg_name, &to_json(resolved))?;
        let manifest = CommandManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_file,
            resolved_config: cfg_path,
            threads: rayon::current_num_threads(),
            outputs: std::mem::take(&mut self.written),
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
            details,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.path(Path::new(&format!("{}.manifest.json", self.command)));
        std::fs::write(&path, text).map_err(|source| CliError::Output { path, source })
    }
}

fn input(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = path.clone().ok_or_else(|| CliError::Config(format!("no {what} given")))?;
    if !p.exists() {
        return Err(CliError::MissingFile(p));
    }
    Ok(p)
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(Dataset::read_jsonl(path)?)
}

pub fn gen(run: &GenRun, config_file: Option<&Path>) -> CliResult<()> {
    let mut out = Outputs::new("gen", &run.out_dir)?;
    let data = generate_dataset(&run.config)?;
    let path = out.write(&run.out, &data.to_jsonl(run.embed_features)?)?;
    log::info!("wrote {} samples to {}", data.len(), path.display());
    let mut details = serde_json::json!({ "samples": data.len(), "dataset_hash": data.hash()? });
    if let Some(pre_out) = &run.pretrain_out {
        let pre_cfg = GenConfig {
            seed: mix_seed(run.config.seed, PRETRAIN_STREAM),
            num_samples: run.pretrain_samples,
            question_mix: QuestionMix::pretrain(),
            pretrain: true,
            ..run.config.clone()
        };
        let pre = generate_dataset(&pre_cfg)?;
        out.write(pre_out, &pre.to_jsonl(run.embed_features)?)?;
        details["pretrain_samples"] = pre.len().into();
        details["pretrain_hash"] = pre.hash()?.into();
    }
    out.finish(run, config_file, details)
}

pub fn train_cmd(run: &TrainRunConfig, config_file: Option<&Path>) -> CliResult<()> {
    let data = read_dataset(&input(&run.data, "training data (--data)")?)?;
    let cfg = &run.config;
    let result = match &cfg.pretrain_dataset {
        Some(p) => pretrain_then_finetune(&read_dataset(Path::new(p))?, &data, cfg)?,
        None if cfg.pretrain_epochs > 0 => {
            return Err(CliError::Config("pretrain_epochs > 0 needs config.pretrain_dataset".into()));
        }
        None => train(&data, cfg)?,
    };
    let mut out = Outputs::new("train", &run.out_dir)?;
    let ck = result.model.to_checkpoint()?.to_json()?;
    let ck_path = out.write(&run.checkpoint, &ck)?;
    let mut manifest = result.manifest;
    manifest.checkpoint = Some(ck_path.display().to_string());
    let details = serde_json::to_value(&manifest).expect("manifest serializes");
    out.finish(run, config_file, details)?;
    match manifest.diverged {
        Some(d) => Err(CliError::Diverged(format!("{} phase, epoch {}: {}", d.phase, d.epoch, d.reason))),
        None => Ok(()),
    }
}

pub fn eval(run: &EvalRun, config_file: Option<&Path>) -> CliResult<()> {
    let ck_path = input(&run.checkpoint, "checkpoint (--checkpoint)")?;
    let data = read_dataset(&input(&run.data, "dataset (--data)")?)?;
    let model = Model::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    let report = evaluate(&model, &data, run.scrub_visual)?;
    let mut out = Outputs::new("eval", &run.out_dir)?;
    report.write(&run.out_dir)?;
    for name in ["report.json", "summary.csv", "per_qtype.csv", "per_count_answer.csv", "per_prefix.csv", "answer_distribution.csv"] {
        let path = out.path(Path::new(name));
        out.record(&path)?;
    }
    println!("overall_accuracy={:.6} language_only={} samples={}", report.overall_accuracy, report.language_only, report.samples);
    let details = serde_json::json!({
        "checkpoint_id": report.checkpoint_id,
        "overall_accuracy": report.overall_accuracy,
        "language_only": report.language_only,
    });
    out.finish(run, config_file, details)
}

pub fn analyze(run: &AnalyzeRun, config_file: Option<&Path>) -> CliResult<()> {
    let report = match (&run.data, &run.annotations) {
        (Some(d), None) => BiasReport::new(&read_dataset(d)?, Vec::new())?,
        (None, Some(a)) => {
            if !a.exists() {
                return Err(CliError::MissingFile(a.clone()));
            }
            let imported = import_annotations(a, &run.fields)?;
            for w in &imported.warnings {
                log::warn!("{}:{}: {}", a.display(), w.line, w.message);
            }
            BiasReport::new(&imported.dataset, imported.warnings)?
        }
        _ => return Err(CliError::Config("give exactly one of data or annotations".into())),
    };
    let mut out = Outputs::new("analyze", &run.out_dir)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    out.write(Path::new("bias_report.json"), &json)?;
    let csv = out.path(Path::new("answer_distribution.csv"));
    write_distribution_csv(&report.answer_distribution, &csv)?;
    out.record(&csv)?;
    let details = serde_json::json!({ "samples": report.samples, "warnings": report.warnings.len() });
    out.finish(run, config_file, details)
}

pub fn gradcheck(run: &GradcheckRun, config_file: Option<&Path>) -> CliResult<()> {
    if run.modes.is_empty() {
        return Err(CliError::Config("no modes to check".into()));
    }
    let mut results = BTreeMap::new();
    let mut failed = Vec::new();
    for &mode in &run.modes {
        let r = gradcheck_mode(mode, &run.setup)?;
        println!(
            "{} {} checked={} skipped={} max_rel_error={:.3e}",
            mode.as_str(),
            if r.passed { "pass" } else { "FAIL" },
            r.checked,
            r.skipped,
            r.max_rel_error
        );
        if !r.passed {
            failed.push(mode.as_str());
        }
        results.insert(mode.as_str(), r);
    }
    let mut out = Outputs::new("gradcheck", &run.out_dir)?;
    let json = serde_json::to_string_pretty(&results).expect("report serializes") + "\n";
    out.write(Path::new("gradcheck_report.json"), &json)?;
    out.finish(run, config_file, serde_json::json!({ "failed": failed }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(format!("modes {} above tolerance {:e}", failed.join(","), run.setup.tolerance)))
    }
}
