mod config;

use std::collections::HashMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{CommandFactory, Parser, Subcommand};
use serde_json::json;

use rftwin_core::bench::run_bench;
use rftwin_core::broker::{measure_latency, Broker, BrokerConfig, LatencyConfig};
use rftwin_core::engine::ChannelEmulator;
use rftwin_core::extract::{build_scenario, check_trace_shape, read_ray_file, ExtractError, RayTrace};
use rftwin_core::format::{load_scenario, save_scenario, FormatError};
use rftwin_core::iqfile::{read_iq, write_iq};
use rftwin_core::pipeline::{sound_link, validate_link, PipelineError};
use rftwin_core::replay::{drive_engine_collect, LinkFilter, PlaybackMode, PlaybackSession, ReplayServer, TapStreamFrame};
use rftwin_core::scenario::{validate_scenario, Scenario};
use rftwin_core::sounder::{SoundingConfig, Tolerances};
use rftwin_core::waveform::{run_timeline, timeline_csv, JammerConfig, JammerKind, ToyLinkConfig, DEFAULT_DEMO_SNR_DB};
use rftwin_core::{GridSpec, IqChunk, LinkId, TapLine};

use config::{load_config, Resolver};

#[derive(Debug)]
pub enum CliError {
    Internal(String),
    Input(String),
    Validation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Validation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Internal(m) | CliError::Input(m) | CliError::Validation(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn format_err(e: FormatError) -> CliError {
    match e {
        FormatError::Invalid(r) => CliError::Validation(format!("scenario fails validation:\n{r}")),
        other => input(other),
    }
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::Scenario(e) => input(e),
        other => internal(other),
    }
}

#[derive(Parser)]
#[command(name = "rftwin", version, about = "RF channel emulation, replay and validation")]
struct Cli {
    /// key = value file with defaults for any long option
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the resolved configuration and where each value came from
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a scenario file from ray traces (CSV or JSON lines)
    Create {
        #[arg(long)]
        rays: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Node count; inferred from the traces if omitted
        #[arg(long)]
        nodes: Option<u16>,
        /// Antennas per node; inferred if omitted
        #[arg(long)]
        antennas: Option<u8>,
        /// Duration in ms; inferred if omitted
        #[arg(long)]
        duration_ms: Option<u32>,
        #[arg(long, default_value_t = 10)]
        bin_ns: u32,
        #[arg(long, default_value_t = 512)]
        num_bins: u16,
        #[arg(long, default_value_t = 1000)]
        snapshot_us: u32,
    },
    /// Sound selected links through the emulator and check them against a reference
    Validate {
        #[arg(long)]
        scenario: Option<String>,
        /// Scenario holding the expected taps (defaults to --scenario)
        #[arg(long)]
        reference: Option<String>,
        /// Link filter: tx:rx[:tx_ant:rx_ant], comma separated, `*` wildcards
        #[arg(long, default_value = "all")]
        link: String,
        /// Milliseconds to check: N, A..B, comma list or `all`
        #[arg(long, default_value = "0")]
        ms: String,
        /// Receiver SNR; noiseless if omitted
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long, default_value_t = 16)]
        reps: usize,
        #[arg(long, env = "RFTW_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Sound one link and print the estimated impulse response
    Sound {
        #[arg(long)]
        scenario: Option<String>,
        /// tx:rx or tx:rx:tx_ant:rx_ant
        #[arg(long)]
        link: Option<String>,
        #[arg(long, default_value_t = 0)]
        ms: u32,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long, default_value_t = 16)]
        reps: usize,
        #[arg(long, env = "RFTW_SEED", default_value_t = 0)]
        seed: u64,
        /// Write the full estimate as CSV
        #[arg(long)]
        cir_out: Option<String>,
    },
    /// Replay a scenario's tap stream, or run IQ through it
    Replay {
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value = "virtual")]
        mode: String,
        #[arg(long = "loop")]
        looping: bool,
        #[arg(long, default_value = "all")]
        links: String,
        /// Serve the tap stream over TCP instead of printing it
        #[arg(long)]
        listen: Option<String>,
        /// Serve JSON status dumps on this address
        #[arg(long)]
        status_addr: Option<String>,
        /// Stop after this many snapshots when printing
        #[arg(long)]
        snapshots: Option<u64>,
        /// IQ recording to transmit on --tx-port
        #[arg(long)]
        iq_in: Option<String>,
        #[arg(long, default_value_t = 0)]
        tx_port: usize,
        #[arg(long, default_value_t = 1)]
        rx_port: usize,
        #[arg(long)]
        iq_out: Option<String>,
    },
    /// Run the message broker
    Broker {
        #[arg(long, env = "RFTW_BROKER_ADDR", default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long, default_value_t = rftwin_core::broker::protocol::DEFAULT_MAX_PAYLOAD)]
        max_payload: usize,
    },
    /// Measure broker round trips between probe and echo clients
    Latency {
        /// Broker to use; a private one is started if omitted
        #[arg(long, env = "RFTW_BROKER_ADDR")]
        broker: Option<String>,
        #[arg(long, default_value_t = rftwin_core::broker::latency::DEFAULT_SAMPLES)]
        samples: usize,
        /// Payload sizes in bytes, comma separated
        #[arg(long, default_value = "1,100,1024,10240,102400,1048576")]
        sizes: String,
        #[arg(long)]
        out: Option<String>,
    },
    /// Throughput of a toy QPSK link under jamming, per second
    JamDemo {
        #[arg(long, default_value = "narrowband")]
        jammer: String,
        /// Jammer to signal power ratio
        #[arg(long, default_value_t = 0.0)]
        jsr_db: f64,
        #[arg(long, env = "RFTW_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<String>,
        #[arg(long, default_value_t = DEFAULT_DEMO_SNR_DB)]
        snr_db: f64,
        #[arg(long, default_value_t = 60)]
        seconds: usize,
        /// Jammer start, default one third of the run
        #[arg(long)]
        on_s: Option<usize>,
        /// Jammer stop, default two thirds of the run
        #[arg(long)]
        off_s: Option<usize>,
    },
    /// Measure sustained filter throughput
    Bench {
        #[arg(long, default_value_t = 1)]
        links: usize,
        #[arg(long, default_value_t = 1000)]
        ms: usize,
        #[arg(long, env = "RFTW_SEED", default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON
        #[arg(long)]
        json: bool,
    },
}

fn known_keys() -> Vec<String> {
    let cmd = Cli::command();
    let mut keys: Vec<String> = cmd
        .get_subcommands()
        .flat_map(|s| s.get_arguments().map(|a| a.get_id().to_string()).collect::<Vec<_>>())
        .collect();
    keys.retain(|k| k != "config" && k != "verbose" && k != "help" && k != "version");
    keys.sort();
    keys.dedup();
    keys
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let verbose = matches.get_flag("verbose");
    let result = (|| {
        let file = match matches.get_one::<PathBuf>("config") {
            Some(p) => load_config(p, &known_keys())?,
            None => HashMap::new(),
        };
        let (name, sub) = matches.subcommand().ok_or_else(|| CliError::Input("no subcommand".into()))?;
        let r = Resolver::new(sub, &file);
        run(name, &r, verbose)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rftwin: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(name: &str, r: &Resolver, verbose: bool) -> Result<(), CliError> {
    match name {
        "create" => cmd_create(r, verbose),
        "validate" => cmd_validate(r, verbose),
        "sound" => cmd_sound(r, verbose),
        "replay" => cmd_replay(r, verbose),
        "broker" => cmd_broker(r, verbose),
        "latency" => cmd_latency(r, verbose),
        "jam-demo" => cmd_jam_demo(r, verbose),
        "bench" => cmd_bench(r, verbose),
        other => Err(CliError::Internal(format!("unhandled subcommand {other}"))),
    }
}

fn print_json(v: &serde_json::Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(internal)?;
    writeln!(out).map_err(internal)
}

fn load(path: &str) -> Result<Arc<Scenario>, CliError> {
    load_scenario(path).map(Arc::new).map_err(format_err)
}

fn parse_link(s: &str) -> Result<LinkId, CliError> {
    let f: Vec<&str> = s.split(':').collect();
    let num = |x: &str| x.trim().parse::<u16>().map_err(|_| CliError::Input(format!("bad link {s:?}")));
    match f.len() {
        2 => Ok(LinkId::siso(num(f[0])?, num(f[1])?)),
        4 => Ok(LinkId::new(num(f[0])?, num(f[1])?, num(f[2])? as u8, num(f[3])? as u8)),
        _ => Err(CliError::Input(format!("bad link {s:?}, expected tx:rx or tx:rx:tx_ant:rx_ant"))),
    }
}

fn parse_ms_list(s: &str, duration_ms: u32) -> Result<Vec<u32>, CliError> {
    let bad = || CliError::Input(format!("bad --ms {s:?}"));
    let s = s.trim();
    if s == "all" {
        return Ok((0..duration_ms).collect());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once("..") {
            let a: u32 = a.trim().parse().map_err(|_| bad())?;
            let b: u32 = b.trim().parse().map_err(|_| bad())?;
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if let Some(&t) = out.iter().find(|&&t| t >= duration_ms) {
        return Err(CliError::Input(format!("--ms {t} beyond scenario duration {duration_ms}")));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn taps_json(line: &TapLine) -> serde_json::Value {
    line.taps()
        .iter()
        .map(|t| json!({"bin": t.bin, "re": t.gain.re, "im": t.gain.im}))
        .collect()
}

fn frame_json(f: &TapStreamFrame) -> serde_json::Value {
    json!({
        "link": f.link,
        "effective_ms": f.effective_ms,
        "sequence_no": f.sequence_no,
        "taps": taps_json(&f.tap_line),
    })
}

fn cmd_create(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let rays: String = r.require("rays")?;
    let out: String = r.require("out")?;
    let nodes: Option<u16> = r.opt("nodes")?;
    let antennas: Option<u8> = r.opt("antennas")?;
    let duration: Option<u32> = r.opt("duration_ms")?;
    let grid = GridSpec::new(r.get("bin_ns")?, r.get("num_bins")?, r.get("snapshot_us")?);
    if verbose {
        r.print();
    }

    let traces = read_ray_file(&rays).map_err(input)?;
    let nodes = nodes.unwrap_or_else(|| {
        traces
            .iter()
            .map(|(_, t)| t.link.tx_node.max(t.link.rx_node) + 1)
            .max()
            .unwrap_or(2)
            .max(2)
    });
    let antennas = antennas.unwrap_or_else(|| {
        traces
            .iter()
            .map(|(_, t)| t.link.tx_antenna.max(t.link.rx_antenna) + 1)
            .max()
            .unwrap_or(1)
    });
    let duration = duration.unwrap_or_else(|| traces.iter().map(|(_, t)| t.time_ms + 1).max().unwrap_or(1));
    for (line, t) in &traces {
        check_trace_shape(t, nodes, antennas, duration, *line).map_err(input)?;
    }
    let traces: Vec<RayTrace> = traces.into_iter().map(|(_, t)| t).collect();
    let (scenario, report) = build_scenario(&traces, grid, nodes, antennas, duration).map_err(|e| match e {
        ExtractError::Io(e) => internal(e),
        other => input(other),
    })?;
    let check = validate_scenario(&scenario);
    if !check.is_valid() {
        return Err(CliError::Validation(format!("built scenario fails validation:\n{check}")));
    }
    save_scenario(&scenario, &out).map_err(|e| match e {
        FormatError::Io(e) => input(format!("cannot write {out}: {e}")),
        other => internal(other),
    })?;
    eprintln!(
        "wrote {out}: {nodes} nodes, {antennas} antennas, {duration} ms; {} traces, {} rays, {} dropped beyond {} ns, {} invalid, discarded energy {:.2}%",
        report.traces,
        report.rays,
        report.dropped_rays,
        grid.max_delay_ns(),
        report.invalid_rays,
        report.discarded_energy_fraction * 100.0
    );
    print_json(&json!({
        "out": out,
        "num_nodes": nodes,
        "antennas_per_node": antennas,
        "duration_ms": duration,
        "report": report,
    }))
}

fn sounding_config(r: &Resolver) -> Result<SoundingConfig, CliError> {
    let reps: usize = r.get("reps")?;
    if reps == 0 {
        return Err(CliError::Input("--reps must be at least 1".into()));
    }
    Ok(SoundingConfig {
        repetitions: reps,
        snr_db: r.opt("snr_db")?,
        seed: r.get("seed")?,
        ..Default::default()
    })
}

fn cmd_validate(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let scenario_path: String = r.require("scenario")?;
    let reference_path: Option<String> = r.opt("reference")?;
    let link: String = r.get("link")?;
    let ms: String = r.get("ms")?;
    let cfg = sounding_config(r)?;
    if verbose {
        r.print();
    }

    let emulated = load(&scenario_path)?;
    let reference = match &reference_path {
        Some(p) => load(p)?,
        None => emulated.clone(),
    };
    if reference.grid() != emulated.grid()
        || reference.num_nodes() != emulated.num_nodes()
        || reference.antennas_per_node() != emulated.antennas_per_node()
        || reference.duration_ms() != emulated.duration_ms()
    {
        return Err(CliError::Input("reference scenario has a different shape".into()));
    }
    let filter: LinkFilter = link.parse().map_err(input)?;
    let times = parse_ms_list(&ms, emulated.duration_ms())?;
    let links: Vec<LinkId> = emulated.links().filter(|l| filter.matches(l)).collect();
    if links.is_empty() {
        return Err(CliError::Input(format!("--link {link:?} selects no links")));
    }

    let tol = Tolerances::default();
    let mut records = Vec::new();
    for &t in &times {
        for &l in &links {
            records.push(validate_link(&emulated, &reference, l, t, &cfg, &tol).map_err(pipeline_err)?);
        }
    }
    let pass = records.iter().all(|r| r.pass);
    print_json(&json!({"pass": pass, "tolerances": tol, "records": records}))?;
    if pass {
        Ok(())
    } else {
        let failed = records.iter().filter(|r| !r.pass).count();
        Err(CliError::Validation(format!("{failed} of {} validations failed", records.len())))
    }
}

fn cmd_sound(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let scenario_path: String = r.require("scenario")?;
    let link: String = r.require("link")?;
    let ms: u32 = r.get("ms")?;
    let cfg = sounding_config(r)?;
    let cir_out: Option<String> = r.opt("cir_out")?;
    if verbose {
        r.print();
    }

    let scenario = load(&scenario_path)?;
    let link = parse_link(&link)?;
    let outcome = sound_link(&scenario, link, ms, &cfg).map_err(pipeline_err)?;
    let installed = scenario.tap_line(link, ms).map_err(input)?;
    let bin_ns = scenario.grid().bin_duration_ns;
    if let Some(path) = &cir_out {
        let mut w = csv_writer(path)?;
        writeln!(w, "bin,delay_ns,re,im,power_db").map_err(internal)?;
        for (i, c) in outcome.cir.taps.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{:e},{:e},{:.3}",
                i as u64 * bin_ns as u64,
                c.re,
                c.im,
                10.0 * c.norm_sqr().max(1e-300).log10()
            )
            .map_err(internal)?;
        }
        w.flush().map_err(internal)?;
    }
    print_json(&json!({
        "link": link,
        "time_ms": ms,
        "installed": taps_json(installed),
        "recovered": taps_json(&outcome.recovered),
        "noise_floor": outcome.cir.noise_floor,
    }))
}

fn csv_writer(path: &str) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::Input(format!("cannot write {path}: {e}")))
}

fn cmd_replay(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let scenario_path: String = r.require("scenario")?;
    let mode: PlaybackMode = r.get::<String>("mode")?.parse().map_err(CliError::Input)?;
    let looping = r.flag("looping")?;
    let filter: LinkFilter = r.get::<String>("links")?.parse().map_err(input)?;
    let listen: Option<String> = r.opt("listen")?;
    let status_addr: Option<String> = r.opt("status_addr")?;
    let snapshots: Option<u64> = r.opt("snapshots")?;
    let iq_in: Option<String> = r.opt("iq_in")?;
    let tx_port: usize = r.get("tx_port")?;
    let rx_port: usize = r.get("rx_port")?;
    let iq_out: Option<String> = r.opt("iq_out")?;
    if verbose {
        r.print();
    }
    let scenario = load(&scenario_path)?;

    if let Some(iq_in) = iq_in {
        let iq_out = iq_out.ok_or_else(|| CliError::Input("--iq-in needs --iq-out".into()))?;
        return replay_iq(&scenario, mode, &iq_in, tx_port, rx_port, &iq_out);
    }

    let server = Arc::new(ReplayServer::spawn(scenario.clone(), mode, looping));
    if let Some(addr) = status_addr {
        let l = TcpListener::bind(&addr).map_err(|e| CliError::Input(format!("cannot bind {addr}: {e}")))?;
        eprintln!("status on {}", l.local_addr().map_err(internal)?);
        let s = server.clone();
        std::thread::spawn(move || s.serve_status(l));
    }

    match listen {
        Some(addr) => {
            let l = TcpListener::bind(&addr).map_err(|e| CliError::Input(format!("cannot bind {addr}: {e}")))?;
            eprintln!("tap stream on {}", l.local_addr().map_err(internal)?);
            // Playback starts with the first client so it sees the stream from 0 ms.
            let (mut stream, _) = l.accept().map_err(internal)?;
            stream.set_nodelay(true).map_err(internal)?;
            let frames = server.subscribe(filter.clone(), 1024).map_err(internal)?;
            server.play().map_err(internal)?;
            let s = server.clone();
            let l2 = l.try_clone().map_err(internal)?;
            let f2 = filter.clone();
            std::thread::spawn(move || s.serve_tcp(l2, f2, 1024));
            for f in frames {
                if f.write_to(&mut stream).is_err() {
                    break;
                }
            }
        }
        None => {
            let frames = server.subscribe(filter, 1 << 14).map_err(internal)?;
            server.play().map_err(internal)?;
            let mut out = std::io::stdout().lock();
            let mut last_ms: Option<u32> = None;
            let mut seen = 0u64;
            for f in frames {
                if last_ms != Some(f.effective_ms) {
                    if snapshots.is_some_and(|n| seen >= n) {
                        break;
                    }
                    seen += 1;
                    last_ms = Some(f.effective_ms);
                }
                if serde_json::to_writer(&mut out, &frame_json(&f)).is_err() || writeln!(out).is_err() {
                    break;
                }
            }
        }
    }
    if verbose {
        let st = server.status().map_err(internal)?;
        eprintln!("{}", serde_json::to_string(&st).map_err(internal)?);
    }
    server.shutdown();
    Ok(())
}

fn replay_iq(
    scenario: &Arc<Scenario>,
    mode: PlaybackMode,
    iq_in: &str,
    tx_port: usize,
    rx_port: usize,
    iq_out: &str,
) -> Result<(), CliError> {
    let grid = scenario.grid();
    let x = read_iq(iq_in).map_err(|e| CliError::Input(format!("{iq_in}: {e}")))?;
    let sps = grid.samples_per_snapshot().ok_or_else(|| input("snapshot period is not a whole number of samples"))?;
    if x.start_index % sps != 0 {
        return Err(CliError::Input(format!(
            "{iq_in} starts at sample {}, not on a snapshot boundary",
            x.start_index
        )));
    }
    let start_ms = u32::try_from(x.start_index / sps).map_err(input)?;
    let mut session = PlaybackSession::new(scenario.clone(), mode);
    session.seek(start_ms).map_err(input)?;
    let mut emu = ChannelEmulator::new(grid, scenario.num_nodes(), scenario.antennas_per_node(), x.start_index)
        .map_err(internal)?;
    let ports = emu.ports();
    if tx_port >= ports || rx_port >= ports {
        return Err(CliError::Input(format!("ports must be below {ports}")));
    }
    let inputs: Vec<IqChunk> = (0..ports)
        .map(|p| {
            if p == tx_port {
                x.clone()
            } else {
                IqChunk::zeros(x.len(), x.start_index, x.sample_rate_hz)
            }
        })
        .collect();
    let outs = drive_engine_collect(&mut session, &mut emu, &inputs).map_err(internal)?;
    write_iq(iq_out, &outs[rx_port]).map_err(|e| CliError::Input(format!("{iq_out}: {e}")))?;
    eprintln!("wrote {} samples to {iq_out}", outs[rx_port].len());
    Ok(())
}

fn cmd_broker(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let listen: String = r.get("listen")?;
    let max_payload: usize = r.get("max_payload")?;
    if verbose {
        r.print();
    }
    let broker = Broker::bind(&listen, BrokerConfig { max_payload })
        .map_err(|e| CliError::Input(format!("cannot bind {listen}: {e}")))?;
    eprintln!("broker on {}", broker.local_addr());
    broker.join();
    Ok(())
}

fn cmd_latency(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let addr: Option<String> = r.opt("broker")?;
    let samples: usize = r.get("samples")?;
    let sizes: String = r.get("sizes")?;
    let out: Option<String> = r.opt("out")?;
    if verbose {
        r.print();
    }
    if samples == 0 {
        return Err(CliError::Input("--samples must be at least 1".into()));
    }
    let sizes = sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Input(format!("bad --sizes {sizes:?}")))?;

    // Keep a private broker alive for the run.
    let mut local = None;
    let addr: SocketAddr = match addr {
        Some(a) => std::net::ToSocketAddrs::to_socket_addrs(&a)
            .ok()
            .and_then(|mut i| i.next())
            .ok_or_else(|| CliError::Input(format!("bad broker address {a:?}")))?,
        None => {
            let b = Broker::bind("127.0.0.1:0", BrokerConfig::default()).map_err(internal)?;
            let a = b.local_addr();
            local = Some(b);
            a
        }
    };
    let cfg = LatencyConfig {
        sizes,
        samples,
        timeout: Duration::from_secs(5),
        ..Default::default()
    };
    let report = measure_latency(addr, &cfg).map_err(|e| CliError::Input(format!("broker {addr}: {e}")))?;
    drop(local);
    print!("{}", report.to_table());
    if let Some(path) = out {
        std::fs::write(&path, report.to_csv()).map_err(|e| CliError::Input(format!("cannot write {path}: {e}")))?;
    }
    if report.rows.iter().any(|r| r.failed()) {
        return Err(CliError::Validation("some packet sizes timed out".into()));
    }
    Ok(())
}

fn cmd_jam_demo(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let jammer: String = r.get("jammer")?;
    let jsr_db: f64 = r.get("jsr_db")?;
    let seed: u64 = r.get("seed")?;
    let out: Option<String> = r.opt("out")?;
    let snr_db: f64 = r.get("snr_db")?;
    let seconds: usize = r.get("seconds")?;
    let on_s: usize = r.opt("on_s")?.unwrap_or(seconds / 3);
    let off_s: usize = r.opt("off_s")?.unwrap_or(2 * seconds / 3);
    if verbose {
        r.print();
    }
    if seconds == 0 || on_s > off_s || off_s > seconds {
        return Err(CliError::Input("need 0 < seconds and on-s <= off-s <= seconds".into()));
    }
    let kind: Option<JammerKind> = match jammer.as_str() {
        "none" => None,
        s => Some(s.parse().map_err(CliError::Input)?),
    };

    let cfg = ToyLinkConfig::default();
    let channel = TapLine::single(0, rftwin_core::Complex32::new(1.0, 0.0));
    // Unit-power QPSK through a unit channel.
    let power = 10f64.powf(jsr_db / 10.0) * channel.total_power();
    let jcfg = kind.map(|k| JammerConfig::of_kind(k, power));
    let points = run_timeline(
        &cfg,
        &channel,
        jcfg.as_ref().map(|j| (j, &channel)),
        snr_db,
        seed,
        seconds,
        on_s,
        off_s,
    )
    .map_err(input)?;
    let csv = timeline_csv(&points);
    match out {
        Some(path) => std::fs::write(&path, csv).map_err(|e| CliError::Input(format!("cannot write {path}: {e}")))?,
        None => print!("{csv}"),
    }
    let avg = |a: usize, b: usize| {
        if b > a {
            points[a..b].iter().map(|p| p.throughput_fraction).sum::<f64>() / (b - a) as f64
        } else {
            f64::NAN
        }
    };
    eprintln!(
        "throughput before {:.3}, during {:.3}, after {:.3}",
        avg(0, on_s),
        avg(on_s, off_s),
        avg(off_s, seconds)
    );
    Ok(())
}

fn cmd_bench(r: &Resolver, verbose: bool) -> Result<(), CliError> {
    let links: usize = r.get("links")?;
    let ms: usize = r.get("ms")?;
    let seed: u64 = r.get("seed")?;
    let as_json = r.flag("json")?;
    if verbose {
        r.print();
    }
    if links == 0 {
        return Err(CliError::Input("--links must be at least 1".into()));
    }
    if ms == 0 {
        return Err(CliError::Input("--ms must be at least 1".into()));
    }
    let rep = run_bench(links, ms, seed).map_err(internal)?;
    if as_json {
        return print_json(&serde_json::to_value(&rep).map_err(internal)?);
    }
    for (i, m) in rep.per_link_msps.iter().enumerate() {
        println!("link {i}: {m:.1} MS/s");
    }
    println!("aggregate: {:.1} MS/s over {} samples per link", rep.aggregate_msps, rep.samples_per_link);
    Ok(())
}
