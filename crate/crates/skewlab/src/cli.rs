//! Batch front-end: configuration, orchestration and artifact export.
//!
//! Exit codes: 0 on success, 1 when a certificate or verification fails (or an
//! artifact cannot be produced), 2 on configuration errors.

use crate::circle_maps::MapFamilyParams;
use crate::control::{certify_controlled, CertifySettings, ControlCertificate, ControlConstants};
use crate::measure_lab::{
    cascade_diagnostics, cell_masses, fiber_exponent, fmt_f64, orbit_measure, write_atoms_csv,
    write_diagnostics_csv, CascadeDiagnostics, Partition, StageDiagnostics, TestFunctionSet,
};
use crate::orbit_forge::{
    cascade, forge, orbit_exponent, partition_neighborhoods, schedule_neighborhoods, seed_orbit, verify_forge,
    CascadeStage, ForgeOptions, Neighborhood, PeriodicOrbit, ShadowReport, FIXED_POINT_TOLERANCE,
};
use crate::skew_engine::{Perturbation, SkewSystem, DEFAULT_TRUNCATION};
use crate::symbolic_base::Word;
use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Periods up to this length are exported atom by atom; longer orbits as cell masses.
pub const ATOM_EXPORT_LIMIT: usize = 100_000;

#[derive(Debug, Parser)]
#[command(name = "skewlab", version, about = "Controlled skew products over the solenoid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master RNG seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of cascade stages (overrides the config).
    #[arg(long, global = true)]
    pub stages: Option<usize>,
    /// Perturbation size (overrides the config).
    #[arg(long = "delta-pert", global = true)]
    pub delta_pert: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify the control conditions and write certificate.json.
    Certify,
    /// Run one forging step and write the new orbit and its shadow report.
    Forge {
        /// Orbit to start from; the seed orbit when absent.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Stage number of the forged orbit (selects ε and the neighborhood batch).
        #[arg(long, default_value_t = 2)]
        stage: usize,
    },
    /// Run the full cascade and write orbits, shadow reports and diagnostics.
    Cascade,
    /// Re-derive every invariant from the stored artifacts.
    Analyze,
    /// Convert stored orbits to plot-ready CSV.
    Export,
}

/// Base system: generator family and perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub family: MapFamilyParams,
    pub delta_pert: f64,
    /// Decay rate of the perturbation; the Hölder exponent when absent.
    pub perturbation_alpha: Option<f64>,
    /// Seed of the perturbation table; the run seed when absent.
    pub perturbation_seed: Option<u64>,
    pub truncation: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            family: MapFamilyParams::default(),
            delta_pert: 0.0,
            perturbation_alpha: None,
            perturbation_seed: None,
            truncation: DEFAULT_TRUNCATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub stages: usize,
    /// `ε₀`; stage `i + 1` is forged with `ε₀·2^{−i}`.
    pub eps0: f64,
    pub seed_word: Word,
    /// Partition whose cells are the neighborhoods to visit.
    pub partition_depth: usize,
    pub arcs: usize,
    pub test_depth: usize,
    pub test_harmonics: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 8,
            eps0: 0.02,
            seed_word: "4".parse().expect("literal word"),
            partition_depth: 1,
            arcs: 12,
            test_depth: 2,
            test_harmonics: 2,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every sampled check and the perturbation derive from it.
    pub seed: u64,
    pub system: SystemConfig,
    pub control: ControlConstants,
    pub certify: CertifySettings,
    pub forge: ForgeOptions,
    pub cascade: CascadeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            system: SystemConfig::default(),
            control: ControlConstants::default(),
            certify: CertifySettings::default(),
            forge: ForgeOptions::default(),
            cascade: CascadeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing configuration")?;
        cfg.resolved()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Applies derived defaults and checks every invariant.
    pub fn resolved(mut self) -> anyhow::Result<Self> {
        self.certify.seed = self.seed;
        if self.system.perturbation_seed.is_none() {
            self.system.perturbation_seed = Some(self.seed);
        }
        if self.system.perturbation_alpha.is_none() {
            self.system.perturbation_alpha = Some(self.control.alpha);
        }
        self.system.family.validate()?;
        self.control.validate()?;
        let c = &self.cascade;
        if c.stages == 0 {
            bail!("cascade.stages must be at least 1");
        }
        if !(c.eps0 > 0.0 && c.eps0 < 1.0) {
            bail!("cascade.eps0 must lie in (0, 1)");
        }
        if c.arcs == 0 || c.partition_depth == 0 || c.partition_depth > 4 {
            bail!("cascade partition needs depth in 1..=4 and at least one arc");
        }
        if self.forge.max_n == 0 || !(self.forge.min_ratio <= self.forge.target_ratio) {
            bail!("forge options need max_n > 0 and min_ratio <= target_ratio");
        }
        // Building the system checks the perturbation parameters.
        self.system()?;
        Ok(self)
    }

    pub fn system(&self) -> anyhow::Result<SkewSystem<f64>> {
        let sys = SkewSystem::from_params(&self.system.family)?;
        if self.system.delta_pert == 0.0 {
            return Ok(sys);
        }
        let p = Perturbation::new(
            self.system.delta_pert,
            self.system.perturbation_alpha.unwrap_or(self.control.alpha),
            self.system.perturbation_seed.unwrap_or(self.seed),
            self.system.truncation,
        )?;
        Ok(sys.with_perturbation(p))
    }

    pub fn partition(&self) -> Partition {
        Partition { depth: self.cascade.partition_depth, arcs: self.cascade.arcs }
    }

    pub fn tests(&self) -> TestFunctionSet {
        TestFunctionSet { max_depth: self.cascade.test_depth, harmonics: self.cascade.test_harmonics }
    }

    pub fn cells(&self) -> Vec<Neighborhood> {
        partition_neighborhoods(self.cascade.partition_depth, self.cascade.arcs)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub status: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one run: what was produced, from which configuration, and how it went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub steps: Vec<StepRecord>,
    pub files: Vec<FileRecord>,
}

/// Outcome classes that map onto exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Failed(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Failed(_) => EXIT_FAILED,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Failed(e)
    }
}

/// Writes artifacts into the output directory and keeps the manifest.
struct Run {
    out: PathBuf,
    cfg: RunConfig,
    command: String,
    steps: Vec<StepRecord>,
    files: Vec<FileRecord>,
}

impl Run {
    fn new(out: &Path, cfg: RunConfig, command: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run { out: out.to_path_buf(), cfg, command: command.to_string(), steps: Vec::new(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn step<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, Failure>) -> Result<T, Failure> {
        let t = Instant::now();
        let r = f(self);
        let status = if r.is_ok() { "ok" } else { "failed" };
        self.steps.push(StepRecord { name: name.to_string(), status: status.to_string(), seconds: t.elapsed().as_secs_f64() });
        r
    }

    fn finish(mut self, status: &str) -> anyhow::Result<()> {
        let cfg_text = self.cfg.to_toml();
        self.write("config.toml", cfg_text.as_bytes())?;
        let mut files = std::mem::take(&mut self.files);
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            status: status.to_string(),
            steps: std::mem::take(&mut self.steps),
            files,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.out.join("manifest.json"), bytes).context("writing manifest.json")?;
        Ok(())
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("configuration error: {e:#}"),
                Failure::Failed(e) => eprintln!("failed: {e:#}"),
            }
            f.code()
        }
    }
}

/// Loads the configuration (file, then command-line overrides).
pub fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.system.perturbation_seed = None;
    }
    if let Some(n) = cli.stages {
        cfg.cascade.stages = n;
    }
    if let Some(d) = cli.delta_pert {
        cfg.system.delta_pert = d;
    }
    cfg.resolved()
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Analyze => return analyze(cli),
        Command::Export => return export(cli),
        _ => {}
    }
    let cfg = load_config(cli).map_err(Failure::Config)?;
    let sys = cfg.system().map_err(Failure::Config)?;
    match &cli.command {
        Command::Certify => {
            let mut run = Run::new(&cli.out, cfg, "certify")?;
            let res = run.step("certify", |r| certify_step(r, &sys));
            finish(run, res)
        }
        Command::Forge { from, stage } => {
            let mut run = Run::new(&cli.out, cfg, "forge")?;
            let res = run.step("forge", |r| forge_step(r, &sys, from.as_deref(), *stage));
            finish(run, res)
        }
        Command::Cascade => {
            let mut run = Run::new(&cli.out, cfg, "cascade")?;
            let res = cascade_steps(&mut run, &sys);
            finish(run, res)
        }
        Command::Analyze | Command::Export => unreachable!(),
    }
}

fn finish(run: Run, res: Result<(), Failure>) -> Result<(), Failure> {
    run.finish(if res.is_ok() { "ok" } else { "failed" })?;
    res
}

fn certify_step(run: &mut Run, sys: &SkewSystem<f64>) -> Result<(), Failure> {
    let cert = certify_controlled(sys, &run.cfg.control, &run.cfg.certify).map_err(|e| Failure::Failed(e.into()))?;
    run.write_json("certificate.json", &cert)?;
    if cert.pass {
        Ok(())
    } else {
        Err(Failure::Failed(anyhow!("certificate failed: {}", failed_sections(&cert).join(", "))))
    }
}

fn failed_sections(c: &ControlCertificate) -> Vec<&'static str> {
    [
        ("holder", c.holder.pass),
        ("forward_expansion", c.forward.pass),
        ("backward_expansion", c.backward.pass),
        ("rotation", c.rotation.pass),
        ("weak_orbit", c.weak_orbit.pass),
        ("predictability", c.predictability.pass),
        ("consistency", c.consistency.pass),
    ]
    .into_iter()
    .filter(|(_, ok)| !ok)
    .map(|(n, _)| n)
    .collect()
}

fn seed_of(cfg: &RunConfig, sys: &SkewSystem<f64>) -> anyhow::Result<PeriodicOrbit> {
    Ok(seed_orbit(sys, &cfg.cascade.seed_word)?)
}

fn schedule_of(cfg: &RunConfig, sys: &SkewSystem<f64>, seed: &PeriodicOrbit) -> Vec<Vec<Neighborhood>> {
    schedule_neighborhoods(sys, seed, &cfg.cells(), cfg.cascade.stages)
}

fn forge_step(run: &mut Run, sys: &SkewSystem<f64>, from: Option<&Path>, stage: usize) -> Result<(), Failure> {
    if stage < 2 || stage > run.cfg.cascade.stages {
        return Err(Failure::Config(anyhow!("--stage must lie in 2..={}", run.cfg.cascade.stages)));
    }
    let seed = seed_of(&run.cfg, sys)?;
    let x = match from {
        Some(p) => read_json::<PeriodicOrbit>(p)?,
        None => seed.clone(),
    };
    let schedule = schedule_of(&run.cfg, sys, &seed);
    let targets = &schedule[stage - 1];
    let eps = run.cfg.cascade.eps0 * (-((stage - 1) as f64)).exp2();
    let (y, report) = forge(sys, &x, targets, eps, &run.cfg.control, &run.cfg.forge).map_err(anyhow::Error::from)?;
    let v = verify_forge(sys, &x, &y, &report, &run.cfg.control);
    run.write_json(&format!("orbit_{}.json", stage - 1), &x)?;
    run.write_json(&format!("orbit_{stage}.json"), &y)?;
    run.write_json(&format!("shadow_{stage}.json"), &ShadowFile { report, verification: v.clone() })?;
    if v.pass {
        Ok(())
    } else {
        Err(Failure::Failed(anyhow!("verification failed: {}", v.failed().join(", "))))
    }
}

/// Shadow report together with the verification that accepted it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowFile {
    pub report: ShadowReport,
    pub verification: crate::orbit_forge::VerifyReport,
}

fn cascade_steps(run: &mut Run, sys: &SkewSystem<f64>) -> Result<(), Failure> {
    let stages = run.step("cascade", |r| {
        let seed = seed_of(&r.cfg, sys)?;
        let schedule = schedule_of(&r.cfg, sys, &seed);
        let c = &r.cfg;
        cascade(sys, seed, &schedule, c.cascade.stages, c.cascade.eps0, &c.control, &c.forge)
            .map_err(|e| Failure::Failed(e.into()))
    })?;
    run.step("write_orbits", |r| {
        for st in &stages {
            r.write_json(&format!("orbit_{}.json", st.stage), &st.orbit)?;
            if let (Some(report), Some(v)) = (&st.report, &st.verification) {
                let file = ShadowFile { report: report.clone(), verification: v.clone() };
                r.write_json(&format!("shadow_{}.json", st.stage), &file)?;
            }
        }
        Ok(())
    })?;
    run.step("diagnostics", |r| {
        let d = cascade_diagnostics(sys, &stages, &r.cfg.partition(), &r.cfg.tests());
        let mut buf = Vec::new();
        write_diagnostics_csv(&d.rows, &mut buf).map_err(anyhow::Error::from)?;
        r.write("diagnostics.csv", &buf)?;
        r.write_json("measures.json", &d)?;
        Ok(())
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Stage indices `i` with an `orbit_<i>.json` in `dir`, ascending.
fn orbit_indices(dir: &Path) -> anyhow::Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_prefix("orbit_").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(i) = i.parse::<usize>() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Configuration for commands that read an output directory: `--config` when
/// given, otherwise the copy stored next to the artifacts.
fn stored_config(cli: &Cli) -> Result<RunConfig, Failure> {
    if cli.config.is_some() {
        return load_config(cli).map_err(Failure::Config);
    }
    let path = cli.out.join("config.toml");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    RunConfig::from_toml(&text).map_err(Failure::Config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub checks: Vec<AnalysisCheck>,
    pub rows: Vec<StageDiagnostics>,
    pub pass: bool,
}

struct Checks(Vec<AnalysisCheck>);

impl Checks {
    fn add(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.0.push(AnalysisCheck { name: name.into(), pass, detail: detail.into() });
    }
}

fn analyze(cli: &Cli) -> Result<(), Failure> {
    let cfg = stored_config(cli)?;
    let sys = cfg.system().map_err(Failure::Config)?;
    let dir = &cli.out;
    let mut checks = Checks(Vec::new());

    // Content hashes recorded by the producing run.
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        for f in &m.files {
            let ok = fs::read(dir.join(&f.path)).map(|b| sha256_hex(&b) == f.sha256).unwrap_or(false);
            checks.add(format!("hash:{}", f.path), ok, f.sha256.clone());
        }
    }

    if dir.join("certificate.json").exists() {
        let stored: serde_json::Value = read_json(&dir.join("certificate.json"))?;
        let fresh = certify_controlled(&sys, &cfg.control, &cfg.certify).map_err(|e| Failure::Failed(e.into()))?;
        let fresh_value = serde_json::to_value(&fresh).map_err(anyhow::Error::from)?;
        checks.add("certificate_reproduces", stored == fresh_value, "");
        checks.add("certificate_pass", fresh.pass, failed_sections(&fresh).join(", "));
    }

    let indices = orbit_indices(dir)?;
    let mut orbits = Vec::with_capacity(indices.len());
    for &i in &indices {
        let stored: PeriodicOrbit = read_json(&dir.join(format!("orbit_{i}.json")))?;
        // Everything below is re-derived from the word and the fiber point.
        let (residual, ln_theta) = stored.recheck(&sys);
        checks.add(format!("orbit_{i}:fixed_point"), residual < FIXED_POINT_TOLERANCE, format!("residual {residual:.3e}"));
        let tol = 1e-9 * ln_theta.abs().max(1.0);
        checks.add(
            format!("orbit_{i}:multiplier"),
            (ln_theta - stored.ln_theta()).abs() <= tol,
            format!("recomputed ln theta {ln_theta:.12e}, stored {:.12e}", stored.ln_theta()),
        );
        checks.add(format!("orbit_{i}:attracting"), ln_theta < 0.0, "");
        let fresh = PeriodicOrbit::new(stored.word().clone(), stored.fiber_x(), ln_theta);
        let weak = fresh.lambda() + cfg.control.nu.ln() - cfg.control.lemma_d;
        checks.add(format!("orbit_{i}:weak"), weak > 0.0, format!("margin {weak:.4e}"));
        let mu = orbit_measure(&sys, &fresh);
        let gap = (fiber_exponent(&mu, &sys) - orbit_exponent(&fresh)).abs();
        checks.add(format!("orbit_{i}:birkhoff"), gap <= 1e-9, format!("{gap:.3e}"));
        orbits.push((i, stored, fresh));
    }

    let seed = seed_of(&cfg, &sys)?;
    let schedule = schedule_of(&cfg, &sys, &seed);
    let mut stages: Vec<CascadeStage> = Vec::new();
    for (k, (i, stored, fresh)) in orbits.iter().enumerate() {
        let shadow_path = dir.join(format!("shadow_{i}.json"));
        let mut report = None;
        if shadow_path.exists() {
            let file: ShadowFile = read_json(&shadow_path)?;
            match orbits.get(k.wrapping_sub(1)).filter(|p| p.0 + 1 == *i) {
                Some((_, prev, _)) => {
                    let v = verify_forge(&sys, prev, stored, &file.report, &cfg.control);
                    checks.add(format!("shadow_{i}:verify"), v.pass, v.failed().join(", "));
                }
                None => checks.add(format!("shadow_{i}:verify"), false, format!("orbit_{} missing", i - 1)),
            }
            report = Some(file.report);
        }
        let neighborhoods = match &report {
            Some(r) => r.neighborhoods.clone(),
            None => schedule.get(i - 1).cloned().unwrap_or_default(),
        };
        stages.push(CascadeStage { stage: *i, orbit: fresh.clone(), neighborhoods, report, verification: None });
    }

    let contiguous = indices.iter().enumerate().all(|(k, &i)| i == k + 1);
    let mut rows = Vec::new();
    if contiguous && !stages.is_empty() {
        let d = cascade_diagnostics(&sys, &stages, &cfg.partition(), &cfg.tests());
        analyze_cascade(&cfg, &d, &stages, &mut checks);
        let csv_path = dir.join("diagnostics.csv");
        if csv_path.exists() {
            let stored = fs::read(&csv_path).context("reading diagnostics.csv")?;
            let mut buf = Vec::new();
            write_diagnostics_csv(&d.rows, &mut buf).map_err(anyhow::Error::from)?;
            checks.add("diagnostics_reproduce", stored == buf, "");
        }
        rows = d.rows;
    }

    let pass = checks.0.iter().all(|c| c.pass);
    let analysis = Analysis { checks: checks.0, rows, pass };
    let mut bytes = serde_json::to_vec_pretty(&analysis).map_err(anyhow::Error::from)?;
    bytes.push(b'\n');
    fs::write(dir.join("analysis.json"), bytes).context("writing analysis.json")?;
    for c in analysis.checks.iter().filter(|c| !c.pass) {
        eprintln!("violation: {} {}", c.name, c.detail);
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Failed(anyhow!("{} invariant(s) violated", analysis.checks.iter().filter(|c| !c.pass).count())))
    }
}

fn analyze_cascade(cfg: &RunConfig, d: &CascadeDiagnostics, stages: &[CascadeStage], checks: &mut Checks) {
    let c = &cfg.control;
    for w in stages.windows(2) {
        let (a, b) = (&w[0].orbit, &w[1].orbit);
        checks.add(format!("stage_{}:period_growth", w[1].stage), b.period() > 2 * a.period(), format!("{} -> {}", a.period(), b.period()));
        checks.add(
            format!("stage_{}:contraction", w[1].stage),
            b.lambda().abs() < c.contraction_c * a.lambda().abs(),
            format!("{:.6} -> {:.6}", a.lambda(), b.lambda()),
        );
    }
    let l1 = stages[0].orbit.lambda().abs();
    for (k, e) in d.integral_exponents.iter().enumerate() {
        let bound = c.contraction_c.powi(k as i32) * l1 + 1e-9;
        checks.add(format!("stage_{}:integral_decay", k + 1), e.abs() <= bound, format!("{e:.6} vs {bound:.6}"));
    }
    checks.add("masses_persist", d.masses_persist(), "");
    let tail: Vec<f64> = d.rows.iter().skip(2).map(|r| r.max_cell_mass).collect();
    checks.add(
        "max_cell_mass_non_increasing",
        tail.windows(2).all(|w| w[1] <= w[0]),
        format!("{tail:?}"),
    );
    if stages.len() == cfg.cascade.stages {
        let last = d.rows.last().expect("non-empty");
        checks.add("final_coverage", last.coverage == 1.0, fmt_f64(last.coverage));
        // Mass spreads out only gradually; the bound is meaningful for full-length cascades.
        if stages.len() >= NON_ATOMIC_STAGES {
            checks.add("final_max_cell_mass", last.max_cell_mass < 0.5, fmt_f64(last.max_cell_mass));
        }
    }
}

/// Cascade length from which the final maximal cell mass must be below ½.
pub const NON_ATOMIC_STAGES: usize = 8;

fn export(cli: &Cli) -> Result<(), Failure> {
    let cfg = stored_config(cli)?;
    let sys = cfg.system().map_err(Failure::Config)?;
    let dir = &cli.out;
    let part = cfg.partition();
    for i in orbit_indices(dir)? {
        let orbit: PeriodicOrbit = read_json(&dir.join(format!("orbit_{i}.json")))?;
        let mu = orbit_measure(&sys, &orbit);
        if orbit.period() <= ATOM_EXPORT_LIMIT {
            let mut buf = Vec::new();
            write_atoms_csv(&mu, &sys, &format!("@orbit_{i}.json"), &mut buf).map_err(anyhow::Error::from)?;
            fs::write(dir.join(format!("atoms_{i}.csv")), buf).context("writing atoms csv")?;
        }
        let masses = cell_masses(&mu, &sys, &part);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cylinder", "arc_start", "arc_end", "mass"]).map_err(anyhow::Error::from)?;
        for (k, m) in masses.iter().enumerate() {
            let (cyl, arc) = (k / part.arcs, k % part.arcs);
            let word = cylinder_label(cyl, part.depth);
            let a0 = arc as f64 / part.arcs as f64;
            let a1 = (arc + 1) as f64 / part.arcs as f64;
            w.write_record([word, fmt_f64(a0), fmt_f64(a1), fmt_f64(*m)]).map_err(anyhow::Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
        fs::write(dir.join(format!("cells_{i}.csv")), bytes).context("writing cells csv")?;
    }
    Ok(())
}

fn cylinder_label(mut code: usize, depth: usize) -> String {
    let mut digits = vec![b'0'; depth];
    for d in digits.iter_mut().rev() {
        *d = b'0' + (code % 6) as u8;
        code /= 6;
    }
    String::from_utf8(digits).expect("ascii digits")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default().resolved().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.certify.seed, cfg.seed);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[system]\ndelta_pert = 1e-7\n[cascade]\nstages = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.system.perturbation_seed, Some(9));
        assert_eq!(cfg.cascade.stages, 3);
        assert_eq!(cfg.control, ControlConstants::default());
        assert!(cfg.system().unwrap().perturbation().is_some());
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::from_toml("[control]\nnu = 0.5\n").is_err());
        assert!(RunConfig::from_toml("[cascade]\nstages = 0\n").is_err());
        assert!(RunConfig::from_toml("[system]\ndelta_pert = -1.0\n").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1\n").is_err());
        assert!(RunConfig::from_toml("[system.family]\nhyp_amplitude = 0.2\n").is_err());
    }

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn cylinder_labels() {
        assert_eq!(cylinder_label(0, 1), "0");
        assert_eq!(cylinder_label(13, 2), "21");
        assert_eq!(cylinder_label(0, 0), "");
    }
}
