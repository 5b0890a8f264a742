//! End-to-end runs: head-stage training with snapshots, the mode search,
//! the sensitivity pass, and the main loop with per-step averaging and
//! per-epoch embedding events. Every run writes its artifacts and a manifest
//! into one directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cmd::{self, diagnostics, CmdSearchResult, ModeDecomposition};
use crate::error::{Error, Result};
use crate::paramstore::{read_snapshot_file, write_snapshot_file, FlatParams, TrajectoryLog};
use crate::scalar::Real;
use crate::seed::derive;
use crate::sensitivity::{self, SensitivityConfig, SensitivityReport};
use crate::sma::{sma_init, sma_maybe_update, EmaState, SmaConfig, SmaState};
use crate::stdet::{count_of, embedding_log_csv, EmbeddingLogRow, EmbeddingState, StdetConfig};
use crate::toymodel::{Batch, Quantizer, ToyCodec, ToyCodecConfig};
use crate::trainer::{train, CodecTask, MetricsLog, TrainConfig, TrainHooks};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "sgd+ema")]
    SgdEma,
    #[serde(rename = "sgd+sma")]
    SgdSma,
    #[serde(rename = "stdet-only")]
    StdetOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Sgd, Method::Proposed, Method::SgdEma, Method::SgdSma, Method::StdetOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Proposed => "proposed",
            Method::SgdEma => "sgd+ema",
            Method::SgdSma => "sgd+sma",
            Method::StdetOnly => "stdet-only",
        }
    }

    pub fn uses_sma(self) -> bool {
        matches!(self, Method::Proposed | Method::SgdSma)
    }

    pub fn uses_embedding(self) -> bool {
        matches!(self, Method::Proposed | Method::StdetOnly)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Everything a run needs. Missing JSON keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ToyCodecConfig,
    pub train: TrainConfig,
    /// Mode counts tried by the diagonal search, ascending.
    pub cmd_candidates: Vec<usize>,
    pub sensitivity: SensitivityConfig,
    pub stdet: StdetConfig,
    pub sma: SmaConfig,
    /// Weight on the previous average for the `sgd+ema` baseline.
    pub ema_decay: f64,
    /// Row cap for the reordered correlation matrix dump.
    pub correlation_rows: usize,
    /// Start from the last row of this snapshot file instead of a fresh init.
    pub warm_start: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Proposed,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ToyCodecConfig::default(),
            train: TrainConfig::default(),
            cmd_candidates: vec![2, 4, 8, 16, 32],
            sensitivity: SensitivityConfig::default(),
            stdet: StdetConfig::default(),
            sma: SmaConfig::default(),
            ema_decay: 0.999,
            correlation_rows: 500,
            warm_start: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sensitivity.validate()?;
        self.stdet.validate()?;
        self.sma.validate()?;
        if self.method.uses_embedding() {
            if self.cmd_candidates.is_empty() {
                return Err(Error::NoCandidates);
            }
            if self.cmd_candidates.windows(2).any(|w| w[0] >= w[1]) || self.cmd_candidates[0] == 0 {
                return Err(Error::Config("cmd_candidates must be positive and strictly ascending".into()));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Reads a config file, or the config echoed inside a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let inner = match value.get("config") {
            Some(c) if value.get("status").is_some() => c.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(inner)?)
    }

    /// Embedding can only start if the head stage ends before the last epoch.
    pub fn is_degenerate(&self) -> bool {
        self.method.uses_embedding() && self.stdet.predefined_epochs >= self.train.epochs
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            global: self.seed,
            model: derive(self.seed, "model", 0),
            data: derive(self.seed, "data", 0),
            cmd: derive(self.seed, "cmd", 0),
            sensitivity: derive(self.seed, "sensitivity", 0),
        }
    }
}

/// Per-purpose seeds, all derived from the global one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub model: u64,
    pub data: u64,
    pub cmd: u64,
    pub sensitivity: u64,
}

pub mod artifact {
    pub const MANIFEST: &str = "manifest.json";
    pub const METRICS: &str = "metrics.csv";
    pub const FINAL_SNAPSHOT: &str = "final.trj";
    pub const HEAD_SNAPSHOT: &str = "head.trj";
    pub const EMBEDDING_LOG: &str = "embedding_log.csv";
    pub const CMD_SEARCH: &str = "cmd_search.csv";
    pub const CORRELATION: &str = "correlation_reordered.csv";
    pub const COEF_HISTOGRAM: &str = "coefficient_histogram.csv";
    pub const SENSITIVITY_LAYERS: &str = "sensitivity_layers.csv";
    pub const MASK: &str = "mask.bin";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Head,
    Cmd,
    Sensitivity,
    Main,
    Artifacts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub num_params: usize,
    pub status: String,
    pub failure_stage: Option<Stage>,
    pub error: Option<String>,
    /// Set when an embedding method ran with no embedding epochs.
    pub degenerate: bool,
    pub chosen_modes: Option<usize>,
    pub non_embeddable_fraction: Option<f64>,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(artifact::MANIFEST);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Artifact { path, reason: e.to_string() })
    }
}

/// Everything produced at the end of the head stage.
struct Decomposed<T> {
    decomp: ModeDecomposition<T>,
    state: EmbeddingState<T>,
    search: CmdSearchResult,
    sensitivity: SensitivityReport,
    correlation_csv: String,
    /// `k` at the head-stage fit and every tenth epoch after it.
    k_history: Vec<(u32, Vec<T>)>,
    checksum: u64,
}

struct RunHooks<'a, T> {
    cfg: &'a RunConfig,
    task: &'a CodecTask<T>,
    samples: Batch<T>,
    stage: Stage,
    sma: Option<SmaState<T>>,
    ema: Option<EmaState<T>>,
    head: Option<TrajectoryLog<T>>,
    decomposed: Option<Decomposed<T>>,
    log: Vec<EmbeddingLogRow>,
}

impl<T: Real> RunHooks<'_, T> {
    fn decompose(&mut self, params: &FlatParams<T>) -> Result<()> {
        let head = self.head.as_ref().expect("head log exists for embedding methods");
        self.stage = Stage::Cmd;
        let codec = &self.task.codec;
        let samples = &self.samples;
        let eval = |w: &[T]| codec.forward_loss(w, samples, Quantizer::Round).map(|l| l.total);
        let seeds = self.cfg.seeds();
        let (search, decomp) = cmd::select_hyperparams(&self.cfg.cmd_candidates, head, eval, seeds.cmd)?;
        let corr = cmd::correlation_matrix(&head.trajectories(&decomp.sample))?;
        let correlation_csv = diagnostics::reordered_correlation_csv(&corr, &decomp.sample_labels, self.cfg.correlation_rows);

        self.stage = Stage::Sensitivity;
        let report = sensitivity::analyze(codec, &params.values, samples, &self.cfg.sensitivity, seeds.sensitivity)?;
        let state = EmbeddingState::new(&decomp, &report.embeddable_mask)?;
        self.decomposed = Some(Decomposed {
            k_history: vec![(self.cfg.stdet.predefined_epochs, decomp.k.clone())],
            checksum: state.frozen_checksum(),
            decomp,
            state,
            search,
            sensitivity: report,
            correlation_csv,
        });
        Ok(())
    }

    fn embedding_epoch(&mut self, epoch: u32, params: &mut FlatParams<T>) -> Result<()> {
        let cfg = &self.cfg.stdet;
        let epochs = self.cfg.train.epochs;
        let d = self.decomposed.as_mut().expect("decomposition exists after the head stage");
        d.decomp.update(&params.values)?;
        if d.state.frozen_checksum() != d.checksum {
            return Err(Error::Config("frozen coefficients changed outside an embedding event".into()));
        }
        let f = cfg.predefined_epochs;
        if (epoch - f) % 10 == 0 || epoch == epochs {
            d.k_history.push((epoch, d.decomp.k.clone()));
        }
        if !cfg.is_event(epoch) {
            return Ok(());
        }
        let n = d.state.len();
        let change = d.state.long_term_change(&d.decomp.k, &d.decomp.d);
        let e = (epoch - f) / cfg.period;
        let fraction = cfg.p_schedule(e, cfg.event_count(epochs));
        let true_event = d.state.true_embed_step(&change, count_of(fraction, n), &d.decomp, &mut params.values);
        let dummy = if cfg.dummy && epoch < epochs {
            let count = count_of(cfg.dummy_fraction(epoch), n);
            d.state.dummy_embed_step(&change, count, &d.decomp, &mut params.values).selected.len()
        } else {
            0
        };
        d.checksum = d.state.frozen_checksum();
        self.log.push(EmbeddingLogRow {
            epoch,
            newly_true_embedded: true_event.selected.len(),
            newly_dummy_embedded: dummy,
            trainable_count: d.state.trainable_count(),
        });
        Ok(())
    }
}

impl<T: Real> TrainHooks<T> for RunHooks<'_, T> {
    fn trainable_mask(&self) -> Option<&[bool]> {
        self.decomposed.as_ref().map(|d| d.state.trainable.as_slice())
    }

    fn after_step(&mut self, params: &mut FlatParams<T>, _step: u64) -> Result<()> {
        if let Some(sma) = self.sma.as_mut() {
            sma_maybe_update(sma, &mut params.values);
        }
        if let Some(d) = &self.decomposed {
            d.state.apply_embedded(&mut params.values);
        }
        if let Some(ema) = self.ema.as_mut() {
            ema.update(&params.values);
        }
        Ok(())
    }

    fn after_epoch(&mut self, epoch: u32, params: &mut FlatParams<T>) -> Result<()> {
        let f = self.cfg.stdet.predefined_epochs;
        if let Some(head) = self.head.as_mut() {
            if epoch <= f {
                head.record(&params.values, epoch)?;
                if epoch == f {
                    self.decompose(params)?;
                    self.stage = Stage::Main;
                }
                return Ok(());
            }
            self.embedding_epoch(epoch, params)?;
        }
        Ok(())
    }

    fn embedded_count(&self) -> usize {
        self.decomposed.as_ref().map_or(0, |d| d.state.embedded.len())
    }

    fn eval_params(&self) -> Option<&[T]> {
        self.ema.as_ref().map(|e| e.w_ema.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub metrics: MetricsLog<T>,
    pub params: FlatParams<T>,
    pub manifest: Manifest,
    pub embedding_log: Vec<EmbeddingLogRow>,
    pub embeddable_mask: Option<Vec<bool>>,
}

fn initial_params<T: Real>(cfg: &RunConfig, codec: &ToyCodec<T>) -> Result<FlatParams<T>> {
    let fresh = codec.init_params(cfg.seeds().model);
    let Some(path) = &cfg.warm_start else { return Ok(fresh) };
    let log = read_snapshot_file::<T>(path)?;
    let row = log.last_row().ok_or(Error::EmptyLog)?;
    if row.len() != fresh.len() {
        return Err(Error::Layout { expected: fresh.len(), got: row.len() });
    }
    FlatParams::new(row.to_vec(), fresh.layers)
}

/// Relative change of `k` at each recorded epoch against its final value.
fn coefficient_histogram_csv<T: Real>(history: &[(u32, Vec<T>)], is_reference: &[bool]) -> String {
    let mut out = String::from("epoch,bucket,count,fraction\n");
    let Some((_, last)) = history.last() else { return out };
    let indices: Vec<usize> = (0..last.len()).filter(|&i| !is_reference[i]).collect();
    let mut seen = Vec::new();
    for (epoch, k) in history {
        if seen.contains(epoch) {
            continue;
        }
        seen.push(*epoch);
        let hist = diagnostics::coefficient_change_histogram(last, k, &indices);
        let total = indices.len().max(1) as f64;
        for (label, count) in hist {
            let _ = writeln!(out, "{epoch},{label},{count},{}", count as f64 / total);
        }
    }
    out
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    written.push(name.to_string());
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(artifact::MANIFEST), text)?;
    Ok(())
}

/// Runs one configuration and writes its artifacts under `cfg.out_dir`.
///
/// On failure a manifest naming the failing stage is still written when the
/// output directory is usable, and the error is returned.
pub fn run<T: Real>(cfg: &RunConfig) -> Result<RunOutcome<T>> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        num_params: 0,
        status: "failed".into(),
        failure_stage: Some(Stage::Config),
        error: None,
        degenerate: cfg.is_degenerate(),
        chosen_modes: None,
        non_embeddable_fraction: None,
        artifacts: vec![],
    };
    let result = run_inner::<T>(cfg, &dir, &mut manifest);
    if let Err(e) = &result {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
        write_manifest(&dir, &manifest)?;
    }
    result
}

fn run_inner<T: Real>(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let codec = ToyCodec::<T>::new(cfg.model.clone())?;
    let task = CodecTask::new(codec, cfg.train.batch_size, seeds.data);
    let init = initial_params(cfg, &task.codec)?;
    let n = init.len();
    manifest.num_params = n;

    let embedding = cfg.method.uses_embedding() && !cfg.is_degenerate();
    let sma = if cfg.method.uses_sma() || cfg.is_degenerate() { Some(sma_init(&init.values, cfg.sma)?) } else { None };
    let mut hooks = RunHooks {
        cfg,
        task: &task,
        samples: task.sample_set(cfg.sensitivity.samples.max(1), 0),
        stage: Stage::Head,
        sma,
        ema: (cfg.method == Method::SgdEma).then(|| EmaState::new(&init.values, cfg.ema_decay)),
        head: embedding.then(|| TrajectoryLog::new(n)),
        decomposed: None,
        log: vec![],
    };
    if !embedding {
        hooks.stage = Stage::Main;
    }
    let outcome = train(&task, init, &cfg.train, &mut hooks).inspect_err(|_| manifest.failure_stage = Some(hooks.stage))?;

    manifest.failure_stage = Some(Stage::Artifacts);
    let mut written = vec![];
    write_file(dir, artifact::METRICS, outcome.metrics.to_csv().as_bytes(), &mut written)?;
    let mut last = TrajectoryLog::new(n);
    last.record(&outcome.params.values, cfg.train.epochs)?;
    write_snapshot_file(&last, &dir.join(artifact::FINAL_SNAPSHOT))?;
    written.push(artifact::FINAL_SNAPSHOT.into());

    let mut embeddable_mask = None;
    if cfg.is_degenerate() {
        write_file(dir, artifact::EMBEDDING_LOG, embedding_log_csv(&[]).as_bytes(), &mut written)?;
    }
    if let (Some(head), Some(d)) = (&hooks.head, &hooks.decomposed) {
        write_snapshot_file(head, &dir.join(artifact::HEAD_SNAPSHOT))?;
        written.push(artifact::HEAD_SNAPSHOT.into());
        write_file(dir, artifact::EMBEDDING_LOG, embedding_log_csv(&hooks.log).as_bytes(), &mut written)?;
        write_file(dir, artifact::CMD_SEARCH, d.search.to_csv().as_bytes(), &mut written)?;
        write_file(dir, artifact::CORRELATION, d.correlation_csv.as_bytes(), &mut written)?;
        let hist = coefficient_histogram_csv(&d.k_history, &d.decomp.is_reference);
        write_file(dir, artifact::COEF_HISTOGRAM, hist.as_bytes(), &mut written)?;
        let layers = d.sensitivity.layers_csv(task.codec.layers());
        write_file(dir, artifact::SENSITIVITY_LAYERS, layers.as_bytes(), &mut written)?;
        sensitivity::write_mask_file(&d.sensitivity.embeddable_mask, &dir.join(artifact::MASK))?;
        written.push(artifact::MASK.into());
        manifest.chosen_modes = Some(d.search.chosen_m);
        manifest.non_embeddable_fraction = Some(d.sensitivity.non_embeddable_fraction());
        embeddable_mask = Some(d.sensitivity.embeddable_mask.clone());
    }
    written.push(artifact::MANIFEST.into());
    manifest.artifacts = written;
    manifest.status = "ok".into();
    manifest.failure_stage = None;
    write_manifest(dir, manifest)?;

    Ok(RunOutcome {
        metrics: outcome.metrics,
        params: outcome.params,
        manifest: manifest.clone(),
        embedding_log: hooks.log,
        embeddable_mask,
    })
}

/// Instant decomposition loss over an `M × S` grid, for heat maps of the
/// search space. Cells with `S < M` or `S > N` are skipped.
pub fn sweep_modes<T: Real, F>(
    log: &TrajectoryLog<T>,
    modes: &[usize],
    samples: &[usize],
    eval: F,
    seed: u64,
) -> Result<Vec<(usize, usize, f64)>>
where
    F: Fn(&[T]) -> Result<T>,
{
    let params = log.last_row().ok_or(Error::EmptyLog)?.to_vec();
    let trajectories = log.transpose();
    let n = log.n_params();
    let mut out = Vec::new();
    for &m in modes {
        for &s in samples {
            if s < m || s > n || m == 0 {
                continue;
            }
            let mut sample = crate::paramstore::sample_indices(n, s, derive(seed, "cmd.sample", m as u64))?;
            sample.sort_unstable();
            let decomp = cmd::decompose_sampled(&trajectories, &sample, m)?;
            out.push((m, s, cmd::instant_rd_loss(&decomp, &params, &eval)?.to_f()));
        }
    }
    Ok(out)
}

pub fn sweep_csv(cells: &[(usize, usize, f64)]) -> String {
    let mut out = String::from("modes,samples,instant_loss\n");
    for (m, s, l) in cells {
        let _ = writeln!(out, "{m},{s},{l}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method, dir: &Path) -> RunConfig {
        RunConfig {
            method,
            out_dir: dir.to_path_buf(),
            model: ToyCodecConfig {
                input_dim: 16,
                hidden_dim: 8,
                latent_dim: 4,
                hyper_dim: 2,
                hyper_hidden: 6,
                entropy_hidden: 8,
                ..Default::default()
            },
            train: TrainConfig { epochs: 8, steps_per_epoch: 5, batch_size: 4, learning_rate: 1e-3, ..Default::default() },
            cmd_candidates: vec![1, 2],
            sensitivity: SensitivityConfig { samples: 8, ..Default::default() },
            stdet: StdetConfig { predefined_epochs: 3, percentage: 0.05, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("adam".parse::<Method>().is_err());
    }

    #[test]
    fn sgd_run_has_no_embedding_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let out = run::<f64>(&small(Method::Sgd, tmp.path())).unwrap();
        assert!(tmp.path().join(artifact::METRICS).exists());
        assert!(tmp.path().join(artifact::FINAL_SNAPSHOT).exists());
        for name in [artifact::CMD_SEARCH, artifact::MASK, artifact::EMBEDDING_LOG, artifact::HEAD_SNAPSHOT] {
            assert!(!tmp.path().join(name).exists(), "{name}");
        }
        assert!(out.metrics.records.iter().all(|r| r.trainable == out.manifest.num_params));
    }

    #[test]
    fn proposed_run_embeds_on_schedule() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(Method::Proposed, tmp.path());
        let out = run::<f64>(&cfg).unwrap();
        let n = out.manifest.num_params;
        let per_event = count_of(0.05, n);
        for r in &out.metrics.records {
            let events_before = r.epoch.saturating_sub(4) as usize;
            assert_eq!(r.trainable, n - events_before * per_event, "epoch {}", r.epoch);
        }
        assert_eq!(out.embedding_log.len(), 5);
        assert_eq!(out.embedding_log.last().unwrap().newly_dummy_embedded, 0);
        for name in [artifact::CMD_SEARCH, artifact::MASK, artifact::EMBEDDING_LOG, artifact::CORRELATION, artifact::COEF_HISTOGRAM] {
            assert!(tmp.path().join(name).exists(), "{name}");
        }
        let m = Manifest::read(tmp.path()).unwrap();
        assert_eq!(m.status, "ok");
        assert_eq!(m.config, cfg);
    }

    #[test]
    fn head_stage_covering_all_epochs_degenerates() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(Method::Proposed, tmp.path());
        cfg.stdet.predefined_epochs = cfg.train.epochs;
        let out = run::<f64>(&cfg).unwrap();
        assert!(out.manifest.degenerate);
        assert!(out.embedding_log.is_empty());
        let mut sma = cfg.clone();
        sma.method = Method::SgdSma;
        sma.out_dir = tmp.path().join("sma");
        let reference = run::<f64>(&sma).unwrap();
        assert_eq!(out.metrics.to_csv(), reference.metrics.to_csv());
    }

    #[test]
    fn failure_writes_manifest_with_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(Method::Proposed, tmp.path());
        cfg.cmd_candidates = vec![1000];
        assert!(run::<f64>(&cfg).is_err());
        let m = Manifest::read(tmp.path()).unwrap();
        assert_eq!(m.status, "failed");
        assert_eq!(m.failure_stage, Some(Stage::Cmd));
        assert!(m.error.is_some());
    }

    #[test]
    fn config_loads_from_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(Method::SgdEma, tmp.path());
        run::<f64>(&cfg).unwrap();
        assert_eq!(RunConfig::load(&tmp.path().join(artifact::MANIFEST)).unwrap(), cfg);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"method": "sgd+sma", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.method, Method::SgdSma);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.steps_per_epoch, TrainConfig::default().steps_per_epoch);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn ema_evaluates_average_only() {
        let tmp = tempfile::tempdir().unwrap();
        let sgd = run::<f64>(&small(Method::Sgd, &tmp.path().join("a"))).unwrap();
        let ema = run::<f64>(&small(Method::SgdEma, &tmp.path().join("b"))).unwrap();
        assert_eq!(sgd.params.values, ema.params.values);
        assert_ne!(sgd.metrics.records[0].eval_loss, ema.metrics.records[0].eval_loss);
    }

    #[test]
    fn sweep_skips_impossible_cells() {
        let mut log = TrajectoryLog::<f64>::new(6);
        for t in 0..4 {
            let row: Vec<f64> = (0..6).map(|i| ((i * 7 + t * 3) % 5) as f64 + 0.1 * i as f64).collect();
            log.record(&row, t as u32 + 1).unwrap();
        }
        let cells = sweep_modes(&log, &[1, 2, 4], &[2, 6, 9], |w: &[f64]| Ok(w.iter().sum()), 0).unwrap();
        assert!(cells.iter().all(|&(m, s, _)| s >= m && s <= 6));
        assert_eq!(cells.len(), 5);
    }
}
