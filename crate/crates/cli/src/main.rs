use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use phylink::agent::{run_agent_phase, AgentError, AgentPhaseConfig};
use phylink::capacity::{bicm_capacity_mc, empirical_min_distance, sphere_min_distance, CapacityError, ConstellationSet};
use phylink::modulation::{demodulator_graph, modulator_graph, CrossLayerModulator, ModemDims, QamConstellation};
use phylink::sim::{parse_snr_grid, run_sweep, scenario_preset, LinkConfig, LinkModels, Scale, SimError};
use phylink::training::{PhaseReport, TrainConfig, TrainError, Trainer, STATE_FILE};
use phylink::Complex64;

#[derive(Parser)]
#[command(name = "phylink", version, about = "Cross-layer link simulation, training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo BLER/goodput sweep of a preset or a config file.
    Simulate {
        /// cmo1, cmo2, cmo3 or baseline5g.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        /// JSON file holding one link configuration or a list of them.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        /// Payload in bits per RE for presets.
        #[arg(long, default_value_t = 4)]
        payload: usize,
        /// Directory with trained modem.json and codec.json.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Downlink SNR grid in dB: `lo:step:hi` or a comma list.
        #[arg(long, allow_hyphen_values = true)]
        snr: String,
        /// Uplink SNR in dB applied to every link; ideal uplink if absent.
        #[arg(long, allow_hyphen_values = true)]
        ul_snr: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Worker threads; all cores if absent.
        #[arg(long)]
        threads: Option<usize>,
        /// Result CSV; a manifest with the `.manifest.json` extension is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs one training phase: 1 and 2 train the modem and CSI codec, 3 the
    /// link-adaptation agent.
    Train {
        /// JSON with optional `training` and `agent` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        phase: u8,
        /// Output directory for models, trace and summary.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from; phase 2 defaults to `out`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// BICM capacity and minimum distance of a constellation.
    Analyze {
        /// `qam:<bits>` or `qam:<bits>x<layers>`, a modem model file or a
        /// constellation CSV.
        #[arg(long)]
        constellation: String,
        /// Noise variance per real dimension: `lo:step:hi` or a comma list.
        #[arg(long)]
        sigma2: String,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable parameters and FLOPs of the learned modulator and
    /// demodulator.
    Count {
        /// Modem model file; the reference network sizes if absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Payloads in bits per RE for the reference sizes.
        #[arg(long, value_delimiter = ',', default_value = "2,8,16,24,32")]
        payload: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        layers: usize,
    },
}

/// Exit-code classes.
enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_config() {
            Self::Config(e.into())
        } else {
            Self::Numerical(e.into())
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Io(_) | TrainError::Json(_) => Self::Config(e.into()),
            _ => Self::Numerical(e.into()),
        }
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Sim(s) => s.into(),
            AgentError::Candidates(_) | AgentError::Dataset(_) | AgentError::Io(_) => Self::Config(e.into()),
            _ => Self::Numerical(e.into()),
        }
    }
}

impl From<CapacityError> for Failure {
    fn from(e: CapacityError) -> Self {
        Self::Config(e.into())
    }
}

/// Wraps I/O and parse problems as configuration errors.
fn cfg<T, E: Into<anyhow::Error>>(r: Result<T, E>, what: impl FnOnce() -> String) -> Result<T, Failure> {
    r.map_err(|e| Failure::Config(e.into().context(what())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate { preset, config, scale, payload, models, snr, ul_snr, trials, seed, threads, out } => {
            simulate(preset, config, scale.into(), payload, models, &snr, ul_snr, trials, seed, threads, &out)
        }
        Command::Train { config, phase, out, resume } => train(config.as_deref(), phase, &out, resume.as_deref()),
        Command::Analyze { constellation, sigma2, samples, seed, out } => analyze(&constellation, &sigma2, samples, seed, out.as_deref()),
        Command::Count { model, payload, layers } => count(model.as_deref(), &payload, layers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg(fs::create_dir_all(dir), || format!("creating {}", dir.display()))?;
    }
    cfg(fs::write(path, text), || format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = cfg(fs::read_to_string(path), || format!("reading {}", path.display()))?;
    cfg(serde_json::from_str(&text), || format!("parsing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    preset: Option<String>,
    config: Option<PathBuf>,
    scale: Scale,
    payload: usize,
    models: Option<PathBuf>,
    snr: &str,
    ul_snr: Option<f64>,
    trials: usize,
    seed: u64,
    threads: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let grid = parse_snr_grid(snr)?;
    let mut links: Vec<LinkConfig> = match (&preset, &config) {
        (Some(name), _) => scenario_preset(name, scale, payload, models.as_deref())?,
        (None, Some(path)) => {
            let v = read_json(path)?;
            let list = if v.is_array() { v } else { Value::Array(vec![v]) };
            cfg(serde_json::from_value(list), || format!("link configuration in {}", path.display()))?
        }
        (None, None) => return Err(Failure::Config(anyhow!("either --preset or --config is required"))),
    };
    if ul_snr.is_some() {
        for l in &mut links {
            l.ul_snr_db = ul_snr;
        }
    }
    let mut pairs = Vec::with_capacity(links.len());
    for l in links {
        let m = LinkModels::load_for(&l)?;
        pairs.push((l, m));
    }
    let pool = cfg(rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build(), || "worker pool".into())?;
    let result = pool.install(|| run_sweep(&pairs, &grid, trials, seed))?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    write(out, &result.to_csv())?;
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "git_hash": git_hash(),
        "preset": preset,
        "scale": scale,
        "payload_bits_per_re": payload,
        "seed": seed,
        "trials": trials,
        "dl_snr_db": grid,
        "configs": pairs.iter().map(|(c, _)| json!({"config": c, "config_hash": phylink::sim::config_hash(c)})).collect::<Vec<_>>(),
        "warnings": result.warnings,
        "results": out.file_name().map(|f| f.to_string_lossy().to_string()),
    });
    write(&out.with_extension("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    println!("{} rows written to {}", result.rows.len(), out.display());
    Ok(())
}

fn section<T: serde::de::DeserializeOwned + Default>(root: &Value, key: &str) -> Result<T, Failure> {
    match root.get(key) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => cfg(serde_json::from_value(v.clone()), || format!("`{key}` section")),
    }
}

fn write_phase(out: &Path, report: &PhaseReport) -> Result<(), Failure> {
    write(&out.join(format!("phase{}_trace.csv", report.phase)), &report.trace_csv())?;
    let mut summary = serde_json::to_value(report).expect("reports serialize");
    if let Some(o) = summary.as_object_mut() {
        o.remove("trace");
        o.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        o.insert("git_hash".into(), json!(git_hash()));
    }
    write(&out.join(format!("phase{}_summary.json", report.phase)), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!(
        "phase {}: {} steps, loss {:.4} -> {:.4}, BCE {:.4} -> {:.4}, SGCS {:.4} -> {:.4}",
        report.phase,
        report.steps_run,
        report.initial.loss,
        report.final_.loss,
        report.initial.bce,
        report.final_.bce,
        report.initial.sgcs,
        report.final_.sgcs
    );
    Ok(())
}

fn train(config: Option<&Path>, phase: u8, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let root = match config {
        Some(p) => read_json(p)?,
        None => Value::Null,
    };
    if phase == 3 {
        let agent_cfg: AgentPhaseConfig = section(&root, "agent")?;
        let (agent, data, report) = run_agent_phase(&agent_cfg)?;
        cfg(fs::create_dir_all(out), || format!("creating {}", out.display()))?;
        agent.save(&out.join("agent.json"))?;
        write(&out.join("agent_dataset.csv"), &data.to_csv())?;
        let summary = json!({"config": agent_cfg, "report": report, "version": env!("CARGO_PKG_VERSION"), "git_hash": git_hash()});
        write(&out.join("phase3_summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
        println!(
            "phase 3: {} rows, train accuracy {:.3}, validation accuracy {:.3}",
            data.len(),
            report.train_accuracy,
            report.validation_accuracy
        );
        return Ok(());
    }
    let checkpoint = resume.map(Path::to_path_buf).or_else(|| (phase == 2).then(|| out.to_path_buf()));
    let mut trainer = match checkpoint {
        Some(dir) if dir.join(STATE_FILE).exists() => {
            let mut t = Trainer::load(&dir)?;
            if config.is_some() {
                let c: TrainConfig = section(&root, "training")?;
                c.validate()?;
                t.config.steps_phase1 = c.steps_phase1;
                t.config.steps_phase2 = c.steps_phase2;
                t.config.lambda = c.lambda;
            }
            t
        }
        Some(dir) => return Err(Failure::Config(anyhow!("no checkpoint in {} (missing {STATE_FILE})", dir.display()))),
        None => {
            let c: TrainConfig = section(&root, "training")?;
            c.validate()?;
            Trainer::new(c)?
        }
    };
    let report = if phase == 1 { trainer.train_phase1()? } else { trainer.train_phase2()? };
    trainer.save(out)?;
    write_phase(out, &report)
}

/// Constellation named on the command line, with a short id for the CSV.
fn load_constellation(spec: &str) -> Result<(String, ConstellationSet<f64>), Failure> {
    if let Some(rest) = spec.strip_prefix("qam:") {
        let (bits, layers) = match rest.split_once('x') {
            Some((b, l)) => (b.parse::<usize>(), l.parse::<usize>()),
            None => (rest.parse::<usize>(), Ok(1)),
        };
        let (bits, layers) = match (bits, layers) {
            (Ok(b), Ok(l)) if l > 0 => (b, l),
            _ => return Err(Failure::Config(anyhow!("bad QAM constellation {spec:?}; expected qam:<bits>[x<layers>]"))),
        };
        let qam = QamConstellation::<f64>::new(bits).map_err(|e| Failure::Config(e.into()))?;
        return Ok((spec.to_string(), ConstellationSet::from_qam(&qam, layers)?));
    }
    let path = Path::new(spec);
    let text = cfg(fs::read_to_string(path), || format!("reading {spec}"))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| spec.to_string());
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let m = CrossLayerModulator::load(path).map_err(|e| Failure::Config(e.into()))?;
        return Ok((id, ConstellationSet::from_learned(&m)?));
    }
    // CSV written by the modem: a header, then `pattern,re,im,re,im,...`.
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Result<Vec<f64>, _> = line.split(',').skip(1).map(|v| v.trim().parse::<f64>()).collect();
        let vals = cfg(vals, || format!("{spec} line {}", i + 1))?;
        if vals.is_empty() || vals.len() % 2 != 0 {
            return Err(Failure::Config(anyhow!("{spec} line {}: expected re,im pairs", i + 1)));
        }
        points.push(vals.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect());
    }
    Ok((id, ConstellationSet::new(points)?))
}

fn analyze(spec: &str, sigma2: &str, samples: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let (id, cs) = load_constellation(spec)?;
    let grid = parse_snr_grid(sigma2).map_err(|_| Failure::Config(anyhow!("bad noise-variance grid {sigma2:?}")))?;
    let d_min = empirical_min_distance(&cs);
    let sphere = sphere_min_distance(cs.dim(), cs.order());
    let mut csv = String::from("constellation,sigma2,capacity,std_error,d_min,sphere_d_min\n");
    for s in grid {
        let est = bicm_capacity_mc(&cs, s, samples, seed)?;
        if !est.capacity.is_finite() {
            return Err(Failure::Numerical(anyhow!("capacity estimate at sigma2 = {s} is not finite")));
        }
        csv += &format!("{id},{s},{},{},{d_min},{sphere}\n", est.capacity, est.std_error);
    }
    match out {
        Some(p) => write(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn count(model: Option<&Path>, payloads: &[usize], layers: usize) -> Result<(), Failure> {
    println!("payload_bits_per_re,modulator_params,modulator_flops,demodulator_params,demodulator_flops");
    if let Some(path) = model {
        let m = CrossLayerModulator::load(path).map_err(|e| Failure::Config(e.into()))?;
        let (md, dm) = (&m.modulator, &m.demodulator);
        println!("{},{},{},{},{}", m.bits_per_re, md.num_params(), md.flops_per_item(), dm.num_params(), dm.flops_per_item());
        return Ok(());
    }
    if layers == 0 {
        return Err(Failure::Config(anyhow!("layers must be positive")));
    }
    for &b in payloads {
        if b == 0 {
            return Err(Failure::Config(anyhow!("payload must be positive")));
        }
        let md = modulator_graph(b, layers, ModemDims::PAPER);
        let dm = demodulator_graph(b, layers, ModemDims::PAPER);
        println!("{b},{},{},{},{}", md.num_params(), md.flops_per_item(), dm.num_params(), dm.flops_per_item());
    }
    Ok(())
}
