//! Experiment harness: spec files, presets and result artifacts.
//!
//! A spec is a flat `key = value` text file. Lines starting with `#` are
//! comments. [`ExperimentSpec::canonical_text`] writes every key in a fixed
//! order and parses back to the same spec.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::channel::{RandomStream, GRAPH_STREAM, SPECTRAL_STREAM};
use crate::graph::{self, Graph, Topology};
use crate::metrics::{self, BoundReport, MseCurve, StoppingTime};
use crate::protocol::{DisseminationMode, ProtocolConfig, SnapshotSchedule};
use crate::sim;
use crate::spectral::{self, SpectralReport, DEFAULT_MC_SAMPLES};
use crate::{Error, Result};

/// Overrides the output directory of a spec (a `--out` flag still wins).
pub const OUTPUT_DIR_ENV: &str = "NOISY_AVG_OUT";
/// Seed used when a preset is run from flags without `--seed`.
pub const DEFAULT_SEED: u64 = 1;

const EMBED_BEGIN: &str = "# spec-begin";
const EMBED_END: &str = "# spec-end";
// largest random geometric graph whose averaged matrix is estimated for bounds
const MAX_MC_NODES: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    FigMse,
    FigScaling,
    SpectralReport,
    Custom,
}

impl Preset {
    pub fn tag(&self) -> &'static str {
        match self {
            Preset::FigMse => "fig-mse",
            Preset::FigScaling => "fig-scaling",
            Preset::SpectralReport => "spectral-report",
            Preset::Custom => "custom",
        }
    }

    pub fn simulates(&self) -> bool {
        !matches!(self, Preset::SpectralReport)
    }

    /// Default spec for this preset. The seed is a placeholder; spec files
    /// must set it.
    pub fn defaults(&self) -> ExperimentSpec {
        let base = ExperimentSpec {
            preset: *self,
            topologies: vec![Topology::Grid2d],
            sizes: vec![900, 2500],
            rgg_c: 2.0,
            delta: 0.1,
            delta_prime: None,
            sigma2: 1.0,
            seed: DEFAULT_SEED,
            stream_base: 0,
            sample_paths: 50,
            max_outer: 200,
            dissemination_mode: DisseminationMode::AggregateNoise,
            lambda2_hint: 1.0,
            initial_mean: 1.0,
            initial_variance: 1.0,
            snapshot: SnapshotSchedule::Standard,
            mc_samples: DEFAULT_MC_SAMPLES,
            output_dir: PathBuf::from("results"),
        };
        match self {
            Preset::FigMse | Preset::Custom => base,
            Preset::FigScaling => ExperimentSpec {
                sizes: vec![100, 400, 900],
                ..base
            },
            Preset::SpectralReport => ExperimentSpec {
                topologies: vec![Topology::Cycle, Topology::Grid2d, Topology::Rgg],
                sizes: vec![100, 400],
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig-mse" => Ok(Preset::FigMse),
            "fig-scaling" => Ok(Preset::FigScaling),
            "spectral-report" => Ok(Preset::SpectralReport),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::invalid(format!(
                "unknown preset '{other}' (expected fig-mse, fig-scaling, spectral-report or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub preset: Preset,
    /// Every topology is run at every size.
    pub topologies: Vec<Topology>,
    /// Node counts; grid sizes must be perfect squares.
    pub sizes: Vec<usize>,
    pub rgg_c: f64,
    pub delta: f64,
    /// If set, random geometric graphs use `delta_prime / (ln n)^2` instead of `delta`.
    pub delta_prime: Option<f64>,
    pub sigma2: f64,
    pub seed: u64,
    /// Sample path `p` draws from stream `stream_base + p`.
    pub stream_base: u64,
    pub sample_paths: usize,
    pub max_outer: usize,
    pub dissemination_mode: DisseminationMode,
    pub lambda2_hint: f64,
    pub initial_mean: f64,
    pub initial_variance: f64,
    pub snapshot: SnapshotSchedule,
    pub mc_samples: usize,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Syntax,
    Missing,
    Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl Violation {
    fn domain(field: &str, message: impl Into<String>) -> Self {
        Self {
            kind: ViolationKind::Domain,
            line: None,
            field: Some(field.into()),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug)]
pub enum SpecError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Invalid(Vec<Violation>),
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::Io { path, source } => write!(f, "cannot read {}: {source}", path.display()),
            SpecError::Invalid(list) => {
                write!(f, "{} violation(s)", list.len())?;
                for v in list {
                    write!(f, "\n  {v}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for SpecError {}

const KEYS: [&str; 18] = [
    "preset",
    "topology",
    "sizes",
    "rgg_c",
    "delta",
    "delta_prime",
    "sigma2",
    "seed",
    "stream_base",
    "sample_paths",
    "max_outer",
    "dissemination_mode",
    "lambda2_hint",
    "initial_mean",
    "initial_variance",
    "snapshot",
    "mc_samples",
    "output_dir",
];

fn list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse '{}'", s.trim()))
        })
        .collect()
}

fn parse_num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse '{value}'"))
}

fn snapshot_text(s: &SnapshotSchedule) -> String {
    match s {
        SnapshotSchedule::Standard => "standard".into(),
        SnapshotSchedule::Every(k) => k.to_string(),
    }
}

impl ExperimentSpec {
    fn value_of(&self, key: &str) -> String {
        match key {
            "preset" => self.preset.to_string(),
            "topology" => list(&self.topologies),
            "sizes" => list(&self.sizes),
            "rgg_c" => self.rgg_c.to_string(),
            "delta" => self.delta.to_string(),
            "delta_prime" => self.delta_prime.map_or("none".into(), |d| d.to_string()),
            "sigma2" => self.sigma2.to_string(),
            "seed" => self.seed.to_string(),
            "stream_base" => self.stream_base.to_string(),
            "sample_paths" => self.sample_paths.to_string(),
            "max_outer" => self.max_outer.to_string(),
            "dissemination_mode" => self.dissemination_mode.to_string(),
            "lambda2_hint" => self.lambda2_hint.to_string(),
            "initial_mean" => self.initial_mean.to_string(),
            "initial_variance" => self.initial_variance.to_string(),
            "snapshot" => snapshot_text(&self.snapshot),
            "mc_samples" => self.mc_samples.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "preset" => self.preset = value.parse().map_err(|e: Error| e.to_string())?,
            "topology" => {
                self.topologies = parse_list(value)?;
            }
            "sizes" => self.sizes = parse_list(value)?,
            "rgg_c" => self.rgg_c = parse_num(value)?,
            "delta" => self.delta = parse_num(value)?,
            "delta_prime" => {
                self.delta_prime = if value == "none" {
                    None
                } else {
                    Some(parse_num(value)?)
                }
            }
            "sigma2" => self.sigma2 = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "stream_base" => self.stream_base = parse_num(value)?,
            "sample_paths" => self.sample_paths = parse_num(value)?,
            "max_outer" => self.max_outer = parse_num(value)?,
            "dissemination_mode" => {
                self.dissemination_mode = value.parse().map_err(|e: Error| e.to_string())?
            }
            "lambda2_hint" => self.lambda2_hint = parse_num(value)?,
            "initial_mean" => self.initial_mean = parse_num(value)?,
            "initial_variance" => self.initial_variance = parse_num(value)?,
            "snapshot" => {
                self.snapshot = if value == "standard" {
                    SnapshotSchedule::Standard
                } else {
                    SnapshotSchedule::Every(parse_num(value)?)
                }
            }
            "mc_samples" => self.mc_samples = parse_num(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn canonical_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    /// Canonical text without `output_dir`, as embedded in result files.
    pub fn embedded_text(&self) -> String {
        KEYS.iter()
            .filter(|&&k| k != "output_dir")
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    /// Step-size parameter used for `topology` at `n` nodes.
    pub fn delta_for(&self, topology: Topology, n: usize) -> f64 {
        match (topology, self.delta_prime) {
            (Topology::Rgg, Some(dp)) => dp / (n as f64).ln().powi(2),
            _ => self.delta,
        }
    }

    pub fn protocol_config(&self, topology: Topology, n: usize) -> ProtocolConfig {
        ProtocolConfig {
            delta: self.delta_for(topology, n),
            sigma2: self.sigma2,
            max_outer: self.max_outer,
            dissemination_mode: self.dissemination_mode,
            lambda2_hint: self.lambda2_hint,
            record: self.snapshot,
            keep_theta: false,
        }
    }

    /// Graph for one run; random geometric graphs draw from a stream keyed by `(seed, n)`.
    pub fn build_graph(&self, topology: Topology, n: usize) -> Result<Graph> {
        match topology {
            Topology::Cycle => graph::build_cycle(n),
            Topology::Grid2d => {
                let m = n.isqrt();
                if m * m != n {
                    return Err(Error::invalid(format!(
                        "grid size {n} is not a perfect square"
                    )));
                }
                graph::build_grid(m)
            }
            Topology::Rgg => graph::build_rgg(
                n,
                self.rgg_c,
                &mut RandomStream::new(self.seed, GRAPH_STREAM + n as u64),
            ),
        }
    }

    /// Domain violations, each naming its field.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push(Violation::domain(field, msg));
        if !(self.delta > 0.0 && self.delta < 0.5) {
            bad(
                "delta",
                format!("delta must be in (0, 1/2), got {}", self.delta),
            );
        }
        if let Some(dp) = self.delta_prime {
            if !(dp > 0.0 && dp.is_finite()) {
                bad(
                    "delta_prime",
                    format!("delta_prime must be positive, got {dp}"),
                );
            } else if self.topologies.contains(&Topology::Rgg) {
                for &n in self.sizes.iter().filter(|&&n| n >= 2) {
                    let d = self.delta_for(Topology::Rgg, n);
                    if !(d > 0.0 && d < 0.5) {
                        bad(
                            "delta_prime",
                            format!("delta_prime/(ln {n})^2 = {d} is outside (0, 1/2)"),
                        );
                    }
                }
            }
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            bad(
                "sigma2",
                format!("sigma2 must be finite and >= 0, got {}", self.sigma2),
            );
        }
        let min_paths = if self.preset.simulates() { 2 } else { 1 };
        if self.sample_paths < min_paths {
            bad(
                "sample_paths",
                format!(
                    "sample_paths must be >= {min_paths}, got {}",
                    self.sample_paths
                ),
            );
        }
        if self
            .stream_base
            .checked_add(self.sample_paths as u64)
            .is_none_or(|end| end > SPECTRAL_STREAM)
        {
            bad(
                "stream_base",
                format!("stream ids must stay below {SPECTRAL_STREAM}"),
            );
        }
        if self.max_outer < 1 {
            bad("max_outer", "max_outer must be >= 1".into());
        }
        if !(self.lambda2_hint > 0.0 && self.lambda2_hint.is_finite()) {
            bad(
                "lambda2_hint",
                format!("lambda2_hint must be positive, got {}", self.lambda2_hint),
            );
        }
        if !self.initial_mean.is_finite() {
            bad("initial_mean", "initial_mean must be finite".into());
        }
        if !(self.initial_variance >= 0.0 && self.initial_variance.is_finite()) {
            bad(
                "initial_variance",
                format!(
                    "initial_variance must be >= 0, got {}",
                    self.initial_variance
                ),
            );
        }
        if self.snapshot == SnapshotSchedule::Every(0) {
            bad("snapshot", "snapshot stride must be >= 1".into());
        }
        if self.mc_samples < 1 {
            bad("mc_samples", "mc_samples must be >= 1".into());
        }
        if !(self.rgg_c > 0.0 && self.rgg_c.is_finite()) {
            bad(
                "rgg_c",
                format!("rgg_c must be positive, got {}", self.rgg_c),
            );
        }
        if self.topologies.is_empty() {
            bad("topology", "at least one topology is required".into());
        }
        if self.sizes.is_empty() {
            bad("sizes", "at least one size is required".into());
        }
        for &t in &self.topologies {
            for &n in &self.sizes {
                let problem = match t {
                    Topology::Cycle if n < 3 => Some("cycle needs n >= 3".to_string()),
                    Topology::Grid2d if n < 4 || n.isqrt().pow(2) != n => {
                        Some(format!("grid size {n} must be a perfect square >= 4"))
                    }
                    Topology::Rgg if n < 2 => Some("rgg needs n >= 2".to_string()),
                    Topology::Rgg if graph::rgg_squares_per_side(n, self.rgg_c) < 2 => {
                        Some(format!(
                            "rgg with n = {n}, c = {} has fewer than 2 squares per side",
                            self.rgg_c
                        ))
                    }
                    _ => None,
                };
                if let Some(p) = problem {
                    bad("sizes", p);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                v.iter()
                    .map(Violation::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }
}

/// Parses spec text, collecting every violation. `seed` is mandatory; other
/// keys default to the chosen preset's values.
pub fn parse_spec(text: &str) -> std::result::Result<ExperimentSpec, Vec<Violation>> {
    let mut violations = Vec::new();
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            violations.push(Violation {
                kind: ViolationKind::Syntax,
                line: Some(line),
                field: None,
                message: format!("expected 'key = value', got '{trimmed}'"),
            });
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            violations.push(Violation {
                kind: ViolationKind::Syntax,
                line: Some(line),
                field: Some(key.into()),
                message: "unknown key".into(),
            });
        } else if entries.iter().any(|(_, k, _)| *k == key) {
            violations.push(Violation {
                kind: ViolationKind::Syntax,
                line: Some(line),
                field: Some(key.into()),
                message: "duplicate key".into(),
            });
        } else {
            entries.push((line, key, value));
        }
    }

    let preset = match entries.iter().find(|(_, k, _)| *k == "preset") {
        Some((line, _, v)) => v.parse::<Preset>().unwrap_or_else(|e| {
            violations.push(Violation {
                kind: ViolationKind::Syntax,
                line: Some(*line),
                field: Some("preset".into()),
                message: e.to_string(),
            });
            Preset::Custom
        }),
        None => Preset::Custom,
    };
    let mut spec = preset.defaults();
    for &(line, key, value) in entries.iter().filter(|(_, k, _)| *k != "preset") {
        if let Err(message) = spec.set(key, value) {
            violations.push(Violation {
                kind: ViolationKind::Syntax,
                line: Some(line),
                field: Some(key.into()),
                message,
            });
        }
    }
    if !entries.iter().any(|(_, k, _)| *k == "seed") {
        violations.push(Violation {
            kind: ViolationKind::Missing,
            line: None,
            field: Some("seed".into()),
            message: "seed is required".into(),
        });
    }
    violations.extend(spec.violations());
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(violations)
    }
}

pub fn validate_spec(path: &Path) -> std::result::Result<ExperimentSpec, SpecError> {
    let text = fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_spec(&text).map_err(SpecError::Invalid)
}

/// Recovers the spec embedded in a result file (CSV comment block or the
/// `spec` field of a JSON artifact).
pub fn extract_embedded_spec(contents: &str) -> Result<ExperimentSpec> {
    let text = if contents.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(contents)?;
        v["spec"]
            .as_str()
            .ok_or_else(|| Error::invalid("JSON artifact has no 'spec' string"))?
            .to_string()
    } else {
        let mut inside = false;
        let mut body = String::new();
        for line in contents.lines() {
            if line == EMBED_BEGIN {
                inside = true;
            } else if line == EMBED_END {
                break;
            } else if inside {
                body.push_str(line.strip_prefix("# ").unwrap_or(line));
                body.push('\n');
            }
        }
        if !inside {
            return Err(Error::invalid("no embedded spec block"));
        }
        body
    };
    parse_spec(&text).map_err(|v| {
        Error::InvalidArgument(
            v.iter()
                .map(Violation::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        )
    })
}

fn comment_block(spec: &ExperimentSpec, notes: &[String]) -> String {
    let mut s = String::from(EMBED_BEGIN);
    s.push('\n');
    for line in spec.embedded_text().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(EMBED_END);
    s.push('\n');
    for n in notes {
        s.push_str("# ");
        s.push_str(n);
        s.push('\n');
    }
    s
}

fn schedule_note(spec: &ExperimentSpec) -> String {
    let stride = match spec.snapshot {
        SnapshotSchedule::Standard => "every tau up to 100, then every 10th".to_string(),
        SnapshotSchedule::Every(k) => format!("every {k}th tau"),
    };
    format!("snapshots: {stride}, plus tau = 0 and the final tau; stopping-time resolution is the stride")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every processor.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct BoundsArtifact {
    spec: String,
    topology: Topology,
    n: usize,
    m: usize,
    inner_rounds: usize,
    diameter: usize,
    delta: f64,
    sigma2: f64,
    theta_bar: f64,
    lambda2: Option<f64>,
    lambda2_provenance: Option<String>,
    snapshot_schedule: String,
    target: f64,
    stopping_time: Option<StoppingTime>,
    /// `3 sigma2 delta / lambda2^2`, the level the step-size analysis guarantees.
    guarantee_target: Option<f64>,
    guarantee_stopping_time: Option<StoppingTime>,
    e1: Option<BoundReport>,
    e2: Option<BoundReport>,
}

#[derive(Debug, Clone, Serialize)]
struct SpectralArtifact {
    spec: String,
    reports: Vec<SpectralReport>,
}

/// Outcome of one simulated (topology, size) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub topology: Topology,
    pub n: usize,
    pub curve: MseCurve,
    pub stopping_time: Option<StoppingTime>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub artifacts: Vec<PathBuf>,
    pub cells: Vec<CellResult>,
}

struct Writer {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }
}

/// Runs `spec`, writing artifacts into `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentOutput> {
    spec.validate()?;
    fs::create_dir_all(&spec.output_dir)?;
    sim::with_workers(opts.workers, || {
        let mut w = Writer {
            dir: spec.output_dir.clone(),
            written: Vec::new(),
        };
        let cells = if spec.preset.simulates() {
            run_simulations(spec, &mut w)?
        } else {
            run_spectral(spec, &mut w)?;
            Vec::new()
        };
        Ok(ExperimentOutput {
            artifacts: w.written,
            cells,
        })
    })?
}

fn archive_graph(spec: &ExperimentSpec, g: &Graph, w: &mut Writer) -> Result<()> {
    let mut buf = Vec::new();
    graph::write_edge_list(g, &mut buf)?;
    let name = format!("{}-{}-n{}-graph.txt", spec.preset, g.topology(), g.n());
    w.put(&name, &buf)
}

fn averaged_gap(spec: &ExperimentSpec, g: &Graph) -> Result<Option<(f64, String)>> {
    let avg = match g.topology() {
        Topology::Rgg if g.n() > MAX_MC_NODES => return Ok(None),
        Topology::Rgg => spectral::expected_matrix_monte_carlo(
            g,
            spectral::protocol_sampler,
            spec.mc_samples,
            &RandomStream::new(spec.seed, SPECTRAL_STREAM),
        )?,
        _ => spectral::expected_matrix_closed_form(g)?,
    };
    Ok(Some((
        spectral::lambda2_gap(&avg)?,
        avg.provenance.to_string(),
    )))
}

fn run_simulations(spec: &ExperimentSpec, w: &mut Writer) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    let mut table = String::new();
    for &topology in &spec.topologies {
        for &n in &spec.sizes {
            let g = spec.build_graph(topology, n)?;
            archive_graph(spec, &g, w)?;
            let config = spec.protocol_config(topology, n);
            let theta0 =
                sim::draw_initial_values(n, spec.initial_mean, spec.initial_variance, spec.seed);
            let theta_bar = metrics::sample_mean(&theta0);
            let traces = sim::run_sample_paths_from(
                &g,
                &theta0,
                &config,
                spec.seed,
                spec.stream_base,
                spec.sample_paths,
            )?;
            let curve = metrics::mse_curve(&traces, theta_bar)?;
            let stem = format!("{}-{}-n{}", spec.preset, topology, n);
            let notes = [schedule_note(spec)];

            let mut buf = comment_block(spec, &notes).into_bytes();
            metrics::write_curve_csv(&curve, &mut buf)?;
            w.put(&format!("{stem}-curve.csv"), &buf)?;

            let mut buf = comment_block(spec, &notes).into_bytes();
            metrics::write_trace_csv(&traces, &mut buf)?;
            w.put(&format!("{stem}-trace.csv"), &buf)?;

            let target = spec.sigma2 * config.delta;
            let stop = if target > 0.0 {
                metrics::stopping_time(&curve, target)?
            } else {
                None
            };
            let gap = averaged_gap(spec, &g)?;
            let e2_initial = curve.points.first().map_or(0.0, |p| p.e2);
            let (guarantee_target, guarantee_stop, e1, e2) = match &gap {
                Some((l2, _)) => {
                    let tt = 3.0 * target / (l2 * l2);
                    let ts = if tt > 0.0 {
                        metrics::stopping_time(&curve, tt)?
                    } else {
                        None
                    };
                    (
                        Some(tt),
                        ts,
                        Some(metrics::check_e1_bound(
                            &curve,
                            spec.sigma2,
                            config.delta,
                            *l2,
                        )),
                        Some(metrics::check_e2_bound(
                            &curve,
                            spec.sigma2,
                            config.delta,
                            *l2,
                            e2_initial,
                        )),
                    )
                }
                None => (None, None, None, None),
            };
            let artifact = BoundsArtifact {
                spec: spec.embedded_text(),
                topology,
                n,
                m: g.m(),
                inner_rounds: curve.inner_rounds,
                diameter: graph::diameter(&g)?,
                delta: config.delta,
                sigma2: spec.sigma2,
                theta_bar,
                lambda2: gap.as_ref().map(|g| g.0),
                lambda2_provenance: gap.map(|g| g.1),
                snapshot_schedule: notes[0].clone(),
                target,
                stopping_time: stop,
                guarantee_target,
                guarantee_stopping_time: guarantee_stop,
                e1,
                e2,
            };
            let mut json = serde_json::to_string_pretty(&artifact)?;
            json.push('\n');
            w.put(&format!("{stem}-bounds.json"), json.as_bytes())?;

            let fmt_opt = |v: Option<u64>| v.map_or("none".to_string(), |x| x.to_string());
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                topology,
                n,
                g.m(),
                curve.inner_rounds,
                artifact.diameter,
                fmt_opt(stop.map(|s| s.tau as u64)),
                fmt_opt(stop.map(|s| s.transmissions)),
                fmt_opt(stop.map(|s| s.rounds)),
            ));
            cells.push(CellResult {
                topology,
                n,
                curve,
                stopping_time: stop,
            });
        }
    }
    let mut buf = comment_block(spec, &[schedule_note(spec)]);
    buf.push_str("topology,n,m,inner_rounds,diameter,tau_star,transmissions,rounds\n");
    buf.push_str(&table);
    w.put(
        &format!("{}-stopping-times.csv", spec.preset),
        buf.as_bytes(),
    )?;
    Ok(cells)
}

fn run_spectral(spec: &ExperimentSpec, w: &mut Writer) -> Result<()> {
    let mut reports = Vec::new();
    for &topology in &spec.topologies {
        for &n in &spec.sizes {
            let g = spec.build_graph(topology, n)?;
            archive_graph(spec, &g, w)?;
            reports.push(spectral::spectral_report(
                &g,
                spec.mc_samples,
                &RandomStream::new(spec.seed, SPECTRAL_STREAM),
            )?);
        }
    }
    let artifact = SpectralArtifact {
        spec: spec.embedded_text(),
        reports,
    };
    let mut json = serde_json::to_string_pretty(&artifact)?;
    json.push('\n');
    w.put(&format!("{}.json", spec.preset), json.as_bytes())
}

/// Output directory precedence: flag, then [`OUTPUT_DIR_ENV`], then the spec.
pub fn resolve_output_dir(flag: Option<PathBuf>, env: Option<String>, spec: &Path) -> PathBuf {
    flag.or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| spec.to_path_buf())
}
