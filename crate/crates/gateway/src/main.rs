use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tokio::io::{AsyncBufReadExt, BufReader};
use tracing_subscriber::EnvFilter;

use llmfleet::exec::{EventKind, Outcome};
use llmfleet::link::{Fleet, FleetConfig, FleetEntry, TelemetryHub};
use llmfleet::llm::plan_with_repair;
use llmfleet::motion::DroneId;
use llmfleet::prompt::PromptBundle;
use llmfleet::sim::{spawn_fleet, FaultScript, SimConfig, SimFleet};
use llmfleet_gateway::config::GatewayConfig;
use llmfleet_gateway::{Frame, Gateway, GatewayError, PlanPreview, Transcript};

#[derive(Parser)]
#[command(name = "llmfleet", version, about = "Plan and fly drone fleets from natural-language tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket gateway.
    Serve {
        #[command(flatten)]
        fleet: FleetArgs,
        #[command(flatten)]
        llm: LlmArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Run simulated drones until interrupted.
    Sim {
        #[arg(long, default_value_t = 1)]
        drones: u32,
        #[arg(long, default_value_t = 8889)]
        base_port: u16,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Where to send telemetry, e.g. 127.0.0.1:8890.
        #[arg(long)]
        telemetry_sink: Option<SocketAddr>,
    },
    /// Print the plan for a task without flying.
    Plan {
        #[arg(long)]
        task: String,
        /// Fleet file for the drone roster; otherwise drones 1..=N.
        #[arg(long)]
        fleet: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        drones: u32,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Plan a task and fly it after confirmation.
    Run {
        #[arg(long)]
        task: String,
        /// Approve without asking.
        #[arg(long)]
        yes: bool,
        #[command(flatten)]
        fleet: FleetArgs,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Interactive task, preview, approve loop.
    Repl {
        #[command(flatten)]
        fleet: FleetArgs,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Args)]
struct LlmArgs {
    /// Gateway config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Scripted LLM replies (TOML) instead of a live model.
    #[arg(long)]
    mock_llm: Option<PathBuf>,
    #[arg(long)]
    transcript_dir: Option<PathBuf>,
}

impl LlmArgs {
    fn config(&self) -> anyhow::Result<GatewayConfig> {
        let mut config = match &self.config {
            Some(path) => GatewayConfig::load(path)?,
            None => GatewayConfig::default(),
        };
        if let Some(e) = &self.llm_endpoint {
            config.llm.endpoint = Some(e.clone());
        }
        if let Some(m) = &self.llm_model {
            config.llm.model = Some(m.clone());
        }
        if let Some(k) = &self.api_key_env {
            config.llm.api_key_env = Some(k.clone());
        }
        if let Some(s) = &self.mock_llm {
            config.llm.mock_script = Some(s.clone());
        }
        if let Some(d) = &self.transcript_dir {
            config.transcript_dir = Some(d.clone());
        }
        Ok(config)
    }
}

#[derive(Args)]
struct FleetArgs {
    /// Fleet file (TOML) listing the drones.
    #[arg(long, conflicts_with = "sim")]
    fleet: Option<PathBuf>,
    /// Fly N in-process simulated drones instead.
    #[arg(long)]
    sim: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    sim_time_scale: f64,
}

/// Keeps an in-process simulator alive next to the fleet.
struct Connected {
    fleet: Fleet,
    _sim: Option<SimFleet>,
}

impl FleetArgs {
    async fn connect(&self) -> anyhow::Result<Connected> {
        if let Some(n) = self.sim {
            let hub = TelemetryHub::bind(SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), 0)).await?;
            let sim = spawn_fleet(SimConfig::loopback(n, 0, self.sim_time_scale).with_telemetry_sink(hub.local_addr())).await?;
            let entries = sim
                .addresses()
                .into_iter()
                .map(|(id, address)| FleetEntry { id: DroneId::new(id).expect("sim ids start at 1"), address })
                .collect();
            let config = FleetConfig::new(entries)?;
            let fleet = Fleet::connect(config, Some(hub)).await?;
            return Ok(Connected { fleet, _sim: Some(sim) });
        }
        let path = self.fleet.as_ref().context("pass --fleet <file> or --sim <N>")?;
        let config = FleetConfig::load(path)?;
        let listen = SocketAddr::new(IpAddr::V4(Ipv4Addr::UNSPECIFIED), config.telemetry_port);
        let hub = match TelemetryHub::bind(listen).await {
            Ok(hub) => Some(hub),
            Err(e) => {
                tracing::warn!(%listen, error = %e, "telemetry disabled");
                None
            }
        };
        Ok(Connected { fleet: Fleet::connect(config, hub).await?, _sim: None })
    }
}

fn build_gateway(fleet: Fleet, llm: &LlmArgs, sim_scale: Option<f64>) -> anyhow::Result<Gateway> {
    let mut config = llm.config()?;
    if config.hover_time_scale.is_none() {
        config.hover_time_scale = sim_scale;
    }
    let transcript = match &config.transcript_dir {
        Some(dir) => Transcript::in_dir(dir)?,
        None => Transcript::in_memory(),
    };
    Ok(Gateway::new(fleet, config.backend()?, config.options()?, transcript))
}

fn print_preview(preview: &PlanPreview) {
    println!("{}", preview.plan_text);
    println!();
    print!("{}", preview.table());
    if preview.repairs_used > 0 {
        println!("  ({} repair round(s) used)", preview.repairs_used);
    }
}

fn print_planning_error(e: &GatewayError) {
    match e {
        GatewayError::Planning(f) => {
            eprintln!("planning failed at {:?} stage:", f.stage);
            for d in &f.details {
                eprintln!("  {d}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

/// Prints frames until the outcome arrives. Ctrl-C requests an abort.
async fn follow(gateway: &Gateway, session: &str, mut frames: tokio::sync::broadcast::Receiver<Frame>) -> Outcome {
    let mut abort_sent = false;
    loop {
        tokio::select! {
            frame = frames.recv() => match frame {
                Ok(Frame::Event { event, .. }) => {
                    let drone = event.drone.map(|d| format!("drone {d}")).unwrap_or_default();
                    let action = event.action.map(|a| a.to_string()).unwrap_or_default();
                    println!(
                        "[{:>9.1} ms] {:<15} {:<8} {:<22} {}",
                        event.timestamp.as_secs_f64() * 1000.0,
                        format!("{:?}", event.kind),
                        drone,
                        action,
                        if event.kind == EventKind::Acked { "" } else { event.detail.as_str() },
                    );
                }
                Ok(Frame::Outcome { outcome, .. }) => return outcome,
                Ok(Frame::Telemetry { .. }) => {}
                Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => {}
                Err(_) => return Outcome::Aborted { reason: "event stream closed".into() },
            },
            _ = tokio::signal::ctrl_c(), if !abort_sent => {
                abort_sent = true;
                eprintln!("abort requested, landing airborne drones");
                let _ = gateway.abort(session);
            }
        }
    }
}

fn print_outcome(outcome: &Outcome) {
    match outcome {
        Outcome::Completed => println!("completed"),
        Outcome::Aborted { reason } => println!("aborted: {reason}"),
    }
}

async fn fly(gateway: &Gateway, session: &str) -> Result<Outcome, GatewayError> {
    let frames = gateway.subscribe(session)?;
    gateway.approve(session).await?;
    Ok(follow(gateway, session, frames).await)
}

async fn confirm(prompt: &str) -> String {
    use std::io::Write;
    print!("{prompt}");
    let _ = std::io::stdout().flush();
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    lines.next_line().await.ok().flatten().unwrap_or_default()
}

async fn repl(gateway: Gateway) -> anyhow::Result<()> {
    let session = gateway.create_session();
    println!("Type a task, or :status, :reconnect, :quit.");
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    loop {
        use std::io::Write;
        print!("task> ");
        std::io::stdout().flush()?;
        let Some(line) = lines.next_line().await? else { break };
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" | ":q" => break,
            ":status" => {
                println!("{}", serde_json::to_string_pretty(&gateway.fleet_status())?);
                continue;
            }
            ":reconnect" => {
                println!("{}", serde_json::to_string_pretty(&gateway.reconnect().await)?);
                continue;
            }
            _ => {}
        }
        match gateway.submit_task(&session, line).await {
            Ok(preview) => print_preview(&preview),
            Err(e) => {
                print_planning_error(&e);
                continue;
            }
        }
        print!("fly it? [y]es, [n]o, or type feedback: ");
        std::io::stdout().flush()?;
        let answer = lines.next_line().await?.unwrap_or_default();
        match answer.trim() {
            "y" | "yes" => match fly(&gateway, &session).await {
                Ok(outcome) => print_outcome(&outcome),
                Err(e) => eprintln!("error: {e}"),
            },
            "" | "n" | "no" => gateway.reject(&session, None).await?,
            feedback => {
                gateway.reject(&session, Some(feedback)).await?;
                println!("noted; give the next task and the model will take the feedback into account");
            }
        }
    }
    Ok(())
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve { fleet, llm, listen } => {
            let sim_scale = fleet.sim.map(|_| fleet.sim_time_scale);
            let connected = fleet.connect().await?;
            let gateway = build_gateway(connected.fleet, &llm, sim_scale)?;
            let listener = tokio::net::TcpListener::bind(listen).await?;
            tracing::info!(addr = %listener.local_addr()?, "gateway listening");
            axum::serve(listener, llmfleet_gateway::http::router(gateway))
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
            drop(connected._sim);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sim { drones, base_port, time_scale, faults, telemetry_sink } => {
            let mut config = SimConfig::loopback(drones, base_port, time_scale);
            if let Some(path) = faults {
                config = config.with_faults(FaultScript::from_toml(&std::fs::read_to_string(path)?)?);
            }
            if let Some(sink) = telemetry_sink {
                config = config.with_telemetry_sink(sink);
            }
            let sim = spawn_fleet(config).await?;
            let entries = sim
                .addresses()
                .into_iter()
                .map(|(id, address)| FleetEntry { id: DroneId::new(id).expect("sim ids start at 1"), address })
                .collect();
            let mut fleet = FleetConfig::new(entries)?;
            if let Some(sink) = telemetry_sink {
                fleet = fleet.with_telemetry_port(sink.port());
            }
            println!("# fleet file for these simulated drones");
            print!("{}", fleet.to_toml());
            tokio::signal::ctrl_c().await?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Plan { task, fleet, drones, llm } => {
            let roster: Vec<DroneId> = match fleet {
                Some(path) => FleetConfig::load(&path)?.ids().into_iter().collect(),
                None => (1..=drones).filter_map(DroneId::new).collect(),
            };
            let config = llm.config()?;
            let options = config.options()?;
            let backend = config.backend()?;
            let mut bundle = PromptBundle::new(options.templates, &options.persona).with_task(task);
            match plan_with_repair(&mut bundle, roster.as_slice(), backend.as_ref(), &options.planning).await {
                Ok(success) => {
                    print_preview(&PlanPreview::from_plan(&success.plan, success.repairs_used));
                    Ok(ExitCode::SUCCESS)
                }
                Err(failure) => {
                    print_planning_error(&GatewayError::Planning(failure));
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::Run { task, yes, fleet, llm } => {
            let sim_scale = fleet.sim.map(|_| fleet.sim_time_scale);
            let connected = fleet.connect().await?;
            let gateway = build_gateway(connected.fleet, &llm, sim_scale)?;
            let session = gateway.create_session();
            match gateway.submit_task(&session, &task).await {
                Ok(preview) => print_preview(&preview),
                Err(e) => {
                    print_planning_error(&e);
                    return Ok(ExitCode::FAILURE);
                }
            }
            if !yes && !matches!(confirm("fly it? [y/N] ").await.trim(), "y" | "yes") {
                println!("not flown");
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = fly(&gateway, &session).await?;
            print_outcome(&outcome);
            Ok(match outcome {
                Outcome::Completed => ExitCode::SUCCESS,
                Outcome::Aborted { .. } => ExitCode::from(2),
            })
        }
        Command::Repl { fleet, llm } => {
            let sim_scale = fleet.sim.map(|_| fleet.sim_time_scale);
            let connected = fleet.connect().await?;
            repl(build_gateway(connected.fleet, &llm, sim_scale)?).await?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
