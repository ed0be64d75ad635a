//! The experiment commands behind the `fairdiff` binary.
//!
//! Every command resolves its config, derives per-stage seeds from the one
//! config seed and writes into `<out>/<digest>/`:
//!
//! | file | written by |
//! |---|---|
//! | `population.toml`, `marginals.json` | all |
//! | `samples_uncorrected.csv`, `report_baseline.{json,csv}` | `baseline` |
//! | `samples_uncorrected.csv`, `samples_corrected.csv`, `report.{json,csv}` | `correct` |
//! | `manifest.json` | all (merged across commands) |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corrector::{calibrate_attributes, corrected_sample, purity, CorrectionPlan};
use crate::diffusion::{sample_reverse, sharpen_mixture, ExactDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::localization::{assign_attributes, name_components};
use crate::metrics::{
    bias_report, class_counts, emit_report, frechet_per_class, proportions, read_report, BiasReport,
    LocalizationSummary, ReportFormat, RunMetadata,
};
use crate::population::{Attribute, Population};
use crate::rng::{derive, tag};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Where a config came from, kept so a manifest can be re-validated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// `--seed`, applied after the overrides.
    pub seed: Option<u64>,
}

impl ConfigSource {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let path = self
            .path
            .as_deref()
            .ok_or_else(|| Error::config("--config", "a config file is required"))?;
        let mut cfg = ExperimentConfig::load(path, &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_digest: String,
    pub source: ConfigSource,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageRecord>,
    pub config: ExperimentConfig,
}

/// Seeds of the individual stages, all derived from the config seed.
pub fn stage_seeds(seed: u64) -> BTreeMap<String, u64> {
    [
        ("baseline", tag::BASELINE),
        ("calibrate", tag::CALIBRATE),
        ("gmm", tag::GMM_INIT),
        ("probe", tag::PROBE),
        ("correct", tag::CORRECT),
    ]
    .into_iter()
    .map(|(name, t)| (name.to_string(), derive(seed, t)))
    .collect()
}

/// A resolved run: config, digest, output directory and stage bookkeeping.
pub struct Run {
    pub config: ExperimentConfig,
    pub source: ConfigSource,
    pub digest: String,
    pub dir: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    files: Vec<String>,
    stages: Vec<StageRecord>,
    started: Instant,
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub report: Option<BiasReport>,
}

impl Run {
    pub fn new(config: ExperimentConfig, source: ConfigSource) -> Result<Run> {
        let digest = config.digest()?;
        let dir = config.run_dir()?;
        let seeds = stage_seeds(config.seed);
        Ok(Run {
            config,
            source,
            digest,
            dir,
            seeds,
            files: Vec::new(),
            stages: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn from_source(source: ConfigSource) -> Result<Run> {
        Run::new(source.load()?, source)
    }

    fn seed(&self, stage: &str) -> u64 {
        self.seeds[stage]
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Run) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self);
        self.stages.push(StageRecord {
            name: name.into(),
            status: if out.is_ok() { "ok".into() } else { "failed".into() },
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.into());
        Ok(())
    }

    fn emit(&mut self, stem: &str, report: &BiasReport) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (ext, format) in [("json", ReportFormat::Json), ("csv", ReportFormat::Csv)] {
            let name = format!("{stem}.{ext}");
            emit_report(report, &self.dir.join(&name), format)?;
            self.files.push(name);
        }
        Ok(())
    }

    fn metadata(&self) -> RunMetadata {
        RunMetadata {
            config_digest: self.digest.clone(),
            seed: self.config.seed,
            stage_seeds: self.seeds.clone(),
        }
    }

    /// Writes `manifest.json`, merging with a manifest an earlier command
    /// left for the same digest.
    fn finish(mut self, report: Option<BiasReport>) -> Result<RunOutcome> {
        let path = self.dir.join("manifest.json");
        let mut stages = Vec::new();
        let mut files = Vec::new();
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(old) = serde_json::from_str::<RunManifest>(&text) {
                if old.config_digest == self.digest {
                    stages = old.stages;
                    files = old.files;
                }
            }
        }
        for s in &self.stages {
            stages.retain(|o: &StageRecord| o.name != s.name);
            stages.push(s.clone());
        }
        files.extend(self.files.iter().cloned());
        files.push("manifest.json".into());
        files.sort();
        files.dedup();
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_digest: self.digest.clone(),
            source: self.source.clone(),
            seed: self.config.seed,
            stage_seeds: self.seeds.clone(),
            files: files.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            stages,
            config: self.config.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.files.push("manifest.json".into());
        Ok(RunOutcome {
            dir: self.dir,
            files: self.files,
            report,
        })
    }
}

/// Marginals summary written next to the population file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalsSummary {
    pub schema_version: u32,
    pub age: Vec<f64>,
    pub gender: Vec<f64>,
    pub race: Vec<f64>,
    pub active_attributes: Vec<Attribute>,
}

fn write_population(run: &mut Run) -> Result<Population> {
    let pop = run.config.population()?;
    run.write("population.toml", &pop.to_toml_string())?;
    let [age, gender, race] = pop.attribute_marginals();
    let summary = MarginalsSummary {
        schema_version: 1,
        age,
        gender,
        race,
        active_attributes: pop.active_attributes(),
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("marginals serialize");
    text.push('\n');
    run.write("marginals.json", &text)?;
    Ok(pop)
}

/// Samples as CSV: `x0,…,x{d−1}` plus an optional trailing column.
pub fn samples_csv(points: &DMatrix<f64>, extra: Option<(&str, &[usize])>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    if let Some((name, _)) = extra {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..points.nrows() {
        for j in 0..points.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", points[(i, j)]);
        }
        if let Some((_, col)) = extra {
            let _ = write!(out, ",{}", col[i]);
        }
        out.push('\n');
    }
    out
}

/// `synth`: writes the population file and its marginals.
pub fn cmd_synth(run: Run) -> Result<RunOutcome> {
    execute(run, |run| {
        run.stage("synth", |r| write_population(r).map(|_| ()))?;
        Ok(None)
    })
}

/// Runs a command body; the manifest is written on failure too, with the
/// failing stage marked.
fn execute(mut run: Run, body: impl FnOnce(&mut Run) -> Result<Option<BiasReport>>) -> Result<RunOutcome> {
    match body(&mut run) {
        Ok(report) => run.finish(report),
        Err(e) => {
            if run.dir.is_dir() {
                let _ = run.finish(None);
            }
            Err(e)
        }
    }
}

struct Model {
    sched: NoiseSchedule,
    den: ExactDenoiser,
}

fn model(run: &Run, pop: &Population) -> Result<Model> {
    let sched = run.config.schedule()?;
    let biased = sharpen_mixture(pop, run.config.model.gamma)?;
    let den = ExactDenoiser::new(&biased, &sched)?;
    Ok(Model { sched, den })
}

struct Evaluated {
    counts: Vec<usize>,
    props: Vec<f64>,
    frechet: Vec<Option<f64>>,
}

fn evaluate(pop: &Population, attribute: Attribute, points: &DMatrix<f64>) -> Result<Evaluated> {
    let counts = class_counts(pop, attribute, points)?;
    Ok(Evaluated {
        props: proportions(&counts),
        frechet: frechet_per_class(pop, attribute, points)?,
        counts,
    })
}

fn uncorrected(run: &mut Run, pop: &Population, m: &Model) -> Result<Evaluated> {
    let n = run.config.eval.n_samples;
    let seed = run.seed("baseline");
    let batch = sample_reverse(&m.den, &m.sched, n, seed, &[])?;
    run.write("samples_uncorrected.csv", &samples_csv(&batch.points, None))?;
    evaluate(pop, run.config.eval.attribute, &batch.points)
}

/// `baseline`: uncorrected generation with the (optionally sharpened)
/// exact denoiser.
pub fn cmd_baseline(run: Run) -> Result<RunOutcome> {
    execute(run, baseline_body)
}

fn baseline_body(run: &mut Run) -> Result<Option<BiasReport>> {
    let pop = run.stage("population", write_population)?;
    let m = run.stage("model", |r| model(r, &pop))?;
    let ev = run.stage("baseline", |r| uncorrected(r, &pop, &m))?;
    let attribute = run.config.eval.attribute;
    let mut report = bias_report(attribute, &pop.attribute_marginal(attribute), &ev.props, None)?;
    report.counts_uncorrected = Some(ev.counts);
    report.frechet_uncorrected = Some(ev.frechet);
    report.metadata = run.metadata();
    run.emit("report_baseline", &report)?;
    Ok(Some(report))
}

/// `correct`: uncorrected baseline, calibration at `t★`, attribute
/// assignment and naming, then corrected generation.
pub fn cmd_correct(run: Run) -> Result<RunOutcome> {
    execute(run, correct_body)
}

fn correct_body(run: &mut Run) -> Result<Option<BiasReport>> {
    let pop = run.stage("population", write_population)?;
    let m = run.stage("model", |r| model(r, &pop))?;
    let base = run.stage("baseline", |r| uncorrected(r, &pop, &m))?;
    let attribute = run.config.eval.attribute;
    let t_star = run.config.correct.t_star;

    let (fit, mut summary) = run.stage("calibrate", |r| {
        let cfg = &r.config;
        let hierarchy = pop.active_attributes();
        let ks: Vec<usize> = hierarchy.iter().map(|a| cfg.correct.k.get(*a)).collect();
        let calib = calibrate_attributes(
            &m.den,
            &m.sched,
            t_star,
            cfg.correct.n_calib,
            &ks,
            cfg.gmm.cov_type,
            &cfg.em_options(r.seed("gmm")),
            r.seed("calibrate"),
        )?;
        let assignment = assign_attributes(&calib.fits, &hierarchy)?;
        let index = assignment
            .fit_for(attribute)
            .ok_or_else(|| Error::Assignment(format!("no fit assigned to {attribute}")))?;
        let summary = LocalizationSummary {
            t_star,
            assignment,
            naming: None,
            naming_ambiguous: false,
            naming_error: None,
            quotas: Vec::new(),
            purity: None,
        };
        Ok((calib.fits[index].clone(), summary))
    })?;

    run.stage("name", |r| {
        let named = name_components(
            &fit,
            &m.den,
            &m.sched,
            &pop,
            attribute,
            t_star,
            r.config.correct.n_probe,
            r.seed("probe"),
        );
        match named {
            Ok(naming) => {
                if let Some(entry) = summary.assignment.entry_mut(attribute) {
                    entry.component_classes = Some(naming.classes.clone());
                }
                summary.naming = Some(naming);
            }
            Err(Error::AmbiguousNaming(msg)) => {
                summary.naming_ambiguous = true;
                summary.naming_error = Some(msg);
            }
            Err(e) => return Err(e),
        }
        Ok(())
    })?;

    let corrected = run.stage("correct", |r| {
        let plan = CorrectionPlan::equal(t_star, fit, r.config.eval.n_samples, r.config.correct.injection_cov);
        summary.quotas = plan.quotas.clone();
        let out = corrected_sample(&m.den, &m.sched, &plan, r.seed("correct"))?;
        r.write(
            "samples_corrected.csv",
            &samples_csv(&out.batch.points, Some(("component", &out.source_component))),
        )?;
        if let Some(naming) = &summary.naming {
            summary.purity = Some(purity(&pop, attribute, &out, &naming.classes)?);
        }
        evaluate(&pop, attribute, &out.batch.points)
    })?;

    let mut report = bias_report(
        attribute,
        &pop.attribute_marginal(attribute),
        &base.props,
        Some(&corrected.props),
    )?;
    report.counts_uncorrected = Some(base.counts);
    report.counts_corrected = Some(corrected.counts);
    report.frechet_uncorrected = Some(base.frechet);
    report.frechet_corrected = Some(corrected.frechet);
    report.localization = Some(summary);
    report.metadata = run.metadata();
    run.emit("report", &report)?;
    Ok(Some(report))
}

pub const MERGED_HEADER: &str = "attribute,class,series,proportion";

/// Long-format table of every `(attribute, class, series)` in `paths`;
/// the first report supplying a series wins.
pub fn merge_reports(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one report file".into()));
    }
    let reports = paths.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let mut seen = Vec::new();
    let mut out = String::from(MERGED_HEADER);
    out.push('\n');
    for r in &reports {
        let series = [
            ("train", Some(&r.train_props)),
            ("uncorrected", Some(&r.gen_props_uncorrected)),
            ("corrected", r.gen_props_corrected.as_ref()),
        ];
        for (name, values) in series {
            let Some(values) = values else { continue };
            if seen.contains(&(r.attribute, name)) {
                continue;
            }
            seen.push((r.attribute, name));
            for (class, p) in r.classes.iter().zip(values) {
                let _ = writeln!(out, "{},{},{},{}", r.attribute, class, name, p);
            }
        }
    }
    Ok(out)
}

/// `report`: merged table to `out`, or returned for printing.
pub fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let table = merge_reports(paths)?;
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, &table).map_err(|e| Error::io(path, e))?;
    }
    Ok(table)
}

/// Re-loads the config a manifest records and checks that it still hashes
/// to the recorded digest.
pub fn verify_manifest(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    let cfg = manifest.source.load()?;
    let mut embedded = manifest.config;
    embedded.base_dir = cfg.base_dir.clone();
    Ok(cfg.digest()? == manifest.config_digest && embedded.digest()? == manifest.config_digest)
}
