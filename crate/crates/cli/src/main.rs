//! `synkernel`: drive a kernel data directory from the shell.
//!
//! Exit codes: 0 success, 1 domain error (bad input, corrupt bundle, ...),
//! 2 usage error.

mod datadir;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use synkernel::agenda::{AgendaDraft, Delivery, Trigger};
use synkernel::bundle::{self, ImportOptions};
use synkernel::session::{DagMutation, Outgoing, Role, Sender};
use synkernel::sim::{self, RetrieverMode, SyntheticWorld};
use synkernel::{
    Command, Contact, ExperienceDraft, KernelError, MemoryCategory, RecordFilter, Reply, SessionId, Target,
};

use datadir::DataDir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Domain(#[from] KernelError),
    #[error("data directory {0} is in use by another process")]
    Busy(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Input(String),
}

#[derive(Parser)]
#[command(name = "synkernel", version, about = "Experience-learning agent runtime kernel")]
struct Cli {
    /// Data directory (overridden by SYNKERNEL_DATA).
    #[arg(long, global = true, default_value = ".synkernel")]
    data_dir: PathBuf,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Show or change the kernel config.
    #[command(subcommand)]
    Config(ConfigCmd),
    #[command(subcommand)]
    Session(SessionCmd),
    #[command(subcommand)]
    Mailbox(MailboxCmd),
    #[command(subcommand)]
    Agenda(AgendaCmd),
    #[command(subcommand)]
    Memory(MemoryCmd),
    #[command(subcommand)]
    Contact(ContactCmd),
    #[command(subcommand)]
    Experience(ExperienceCmd),
    /// Recall experiences for a query.
    Recall {
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
    #[command(subcommand)]
    Bundle(BundleCmd),
    /// Run the synthetic world.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Summarise a success-rate trajectory CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
    },
    /// Fold the experience log into a snapshot.
    Compact,
}

#[derive(Subcommand)]
enum ConfigCmd {
    Show,
    Set { key: String, value: String },
}

#[derive(Subcommand)]
enum SessionCmd {
    New {
        #[arg(long, default_value = "/")]
        scope: String,
        #[arg(long)]
        parent: Option<u64>,
    },
    /// Append a message to a session transcript.
    Append {
        session: u64,
        #[arg(long, value_enum, default_value_t = RoleArg::User)]
        role: RoleArg,
        text: String,
    },
    Show {
        session: u64,
    },
    #[command(subcommand)]
    Dag(DagCmd),
    Close {
        session: u64,
        #[arg(long, default_value = "")]
        result: String,
        #[arg(long)]
        failed: bool,
    },
}

#[derive(Subcommand)]
enum DagCmd {
    Add {
        session: u64,
        id: String,
        #[arg(long)]
        label: Option<String>,
        #[arg(long = "dep")]
        deps: Vec<String>,
    },
    /// `to` gains a dependency on `from`.
    Edge {
        session: u64,
        from: String,
        to: String,
    },
    Start {
        session: u64,
        id: String,
    },
    Complete {
        session: u64,
        id: String,
    },
    Fail {
        session: u64,
        id: String,
    },
}

#[derive(Subcommand)]
enum MailboxCmd {
    Send {
        /// Agent name, or `session:<id>`.
        #[arg(long)]
        from: String,
        /// `home`, `session:<id>` or `contact:<name>`.
        #[arg(long)]
        to: Target,
        #[arg(long)]
        key: Option<String>,
        text: String,
    },
    Poll {
        target: Target,
    },
}

#[derive(Subcommand)]
enum AgendaCmd {
    Add(AgendaAdd),
    Cancel {
        id: u64,
    },
    List,
    /// Advance the logical clock.
    Tick {
        now: u64,
    },
    Raise {
        key: String,
    },
}

#[derive(Args)]
struct AgendaAdd {
    #[arg(long, conflicts_with = "on", required_unless_present = "on")]
    at: Option<u64>,
    #[arg(long)]
    on: Option<String>,
    #[arg(long, requires = "at")]
    every: Option<u64>,
    #[arg(long, default_value = "home")]
    deliver: Delivery,
    action: String,
}

#[derive(Subcommand)]
enum MemoryCmd {
    Put {
        #[arg(long, default_value = "general")]
        category: MemoryCategory,
        text: String,
    },
    Query {
        #[arg(long)]
        category: Option<MemoryCategory>,
        #[arg(long)]
        text: Option<String>,
    },
}

#[derive(Subcommand)]
enum ContactCmd {
    Add {
        name: String,
        address: String,
        #[arg(long)]
        friend: bool,
    },
    List,
}

#[derive(Subcommand)]
enum ExperienceCmd {
    Add {
        #[arg(long)]
        intent: String,
        #[arg(long)]
        script: String,
        /// Defaults to the script.
        #[arg(long)]
        digest: Option<String>,
    },
    List {
        #[arg(long)]
        source_model: Option<String>,
        #[arg(long)]
        contains: Option<String>,
    },
}

#[derive(Subcommand)]
enum BundleCmd {
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        source_model: Option<String>,
    },
    Import {
        path: PathBuf,
        #[arg(long)]
        reset_visits: bool,
    },
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long, default_value_t = 10)]
    families: usize,
    #[arg(long, default_value_t = 200)]
    tasks: usize,
    #[arg(long, default_value_t = 0.3)]
    p0: f64,
    #[arg(long, default_value_t = 0.9)]
    p1: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl WorldArgs {
    fn world(&self) -> SyntheticWorld {
        SyntheticWorld::new(self.families, self.tasks, self.p0, self.p1, self.seed)
    }
}

#[derive(Subcommand)]
enum SimulateCmd {
    Grow {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        /// Write the trajectory CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Transfer {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value_t = 6)]
        donor_epochs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    User,
    Agent,
    System,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    SimilarityOnly,
    NoInjection,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

/// What a command prints: JSON for `--json`, text otherwise.
struct Output {
    json: Value,
    text: String,
}

impl Output {
    fn new(value: impl Serialize, text: impl Into<String>) -> Result<Self, CliError> {
        Ok(Output {
            json: serde_json::to_value(value)?,
            text: text.into(),
        })
    }

    fn json_only(value: impl Serialize) -> Result<Self, CliError> {
        let json = serde_json::to_value(value)?;
        let text = serde_json::to_string_pretty(&json)?;
        Ok(Output { json, text })
    }
}

fn reply_output(reply: Reply) -> Result<Output, CliError> {
    match reply {
        Reply::Unit => Output::new(Value::Null, "ok"),
        Reply::Session(id) => Output::new(id, id.to_string()),
        Reply::Index(i) | Reply::AgendaItem(i) | Reply::Memory(i) => Output::new(i, i.to_string()),
        Reply::Message(id) => Output::new(id, id.to_string()),
        Reply::Messages(messages) => {
            let text = if messages.is_empty() {
                "no messages".to_string()
            } else {
                messages
                    .iter()
                    .map(|m| format!("{} {} -> {}: {}", m.id, m.sender, m.target, m.payload))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            Output::new(messages, text)
        }
        Reply::Fired(outcomes) => {
            let text = if outcomes.is_empty() {
                "nothing due".to_string()
            } else {
                outcomes
                    .iter()
                    .map(|o| {
                        let status = if o.success { "ok" } else { "failed" };
                        format!("item {} ran in session {} ({status})", o.firing.item, o.firing.session)
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            Output::new(outcomes, text)
        }
        Reply::Payload(payload) => {
            let text = if payload.0.is_empty() {
                "no experiences".to_string()
            } else {
                payload
                    .0
                    .iter()
                    .map(|e| format!("{}  {:.3}  {} => {}", e.id, e.score, e.intent, e.script))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            Output::new(payload, text)
        }
        other => {
            let json = serde_json::to_value(&other)?;
            Output::json_only(json.get("value").cloned().unwrap_or(Value::Null))
        }
    }
}

fn parse_sender(from: &str) -> Result<Sender, CliError> {
    match from.strip_prefix("session:") {
        Some(id) => id
            .parse()
            .map(|n| Sender::Session(SessionId(n)))
            .map_err(|_| CliError::Input(format!("bad session id in sender `{from}`"))),
        None if from.is_empty() => Err(CliError::Input("sender is empty".into())),
        None => Ok(Sender::Agent(from.to_string())),
    }
}

fn success_rates_from_csv(text: &str) -> Result<Vec<f64>, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Input("trajectory file is empty".into()))?;
    let column = header
        .split(',')
        .position(|h| h.trim() == "success_rate")
        .ok_or_else(|| CliError::Input("trajectory file has no success_rate column".into()))?;
    lines
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .nth(column)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Input(format!("row {}: bad success_rate", i + 1)))
        })
        .collect()
}

fn run(cli: Cli) -> Result<Output, CliError> {
    let root = std::env::var_os("SYNKERNEL_DATA")
        .map(PathBuf::from)
        .unwrap_or(cli.data_dir);

    // Commands that need nothing from the data directory.
    if let Cmd::Report { input, format } = &cli.command {
        let scores = success_rates_from_csv(&fs::read_to_string(input)?)?;
        let report = sim::report(&scores)?;
        if *format == ReportFormat::Csv {
            let rel = report.relative_gain.map(|r| r.to_string()).unwrap_or_default();
            let text = format!(
                "start,best,gain_pp,relative_gain,gain_by_epoch5_fraction\n{},{},{},{rel},{}",
                report.start, report.best, report.gain_pp, report.gain_by_epoch5_fraction
            );
            return Output::new(report, text);
        }
        return Output::json_only(report);
    }

    let mut dir = DataDir::open(&root)?;
    let command = match cli.command {
        Cmd::Config(ConfigCmd::Show) => {
            let config = dir.config()?;
            return Output::new(&config, config.to_kv_string().trim_end());
        }
        Cmd::Config(ConfigCmd::Set { key, value }) => {
            let mut config = dir.config()?;
            config.set(&key, &value)?;
            dir.save_config(&config)?;
            return Output::new(&config, format!("{key} = {value}"));
        }
        Cmd::Simulate(cmd) => return simulate(&dir, cmd),
        Cmd::Compact => {
            let stats = dir.open_store()?.compact()?;
            return Output::new(
                stats,
                format!(
                    "{} records, {} usage links in snapshot",
                    stats.records, stats.usage_links
                ),
            );
        }
        Cmd::Experience(ExperienceCmd::List { source_model, contains }) => {
            let records = dir.open_store()?.list(&RecordFilter {
                source_model,
                intent_contains: contains,
            });
            let text = records
                .iter()
                .map(|r| {
                    format!(
                        "{}  q={:?}  visits={}  {} => {}",
                        r.id, r.q_values, r.visit_count, r.intent, r.script
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            return Output::new(&records, text);
        }
        Cmd::Bundle(BundleCmd::Export { out, source_model }) => {
            let store = dir.open_store()?;
            let id = dir.kernel_id()?;
            let filter = source_model.map(|m| RecordFilter {
                source_model: Some(m),
                intent_contains: None,
            });
            let bytes = bundle::export(&store, filter.as_ref(), &id)?;
            let path = out.unwrap_or_else(|| dir.bundles_dir().join(format!("{id}.bundle")));
            fs::write(&path, &bytes)?;
            let count = bundle::parse(&bytes)?.header.record_count;
            return Output::new(
                json!({"path": path, "records": count}),
                format!("exported {count} records to {}", path.display()),
            );
        }
        Cmd::Bundle(BundleCmd::Import { path, reset_visits }) => {
            let bytes = fs::read(&path)?;
            let config = dir.config()?;
            let report = bundle::import(&mut dir.open_store()?, &bytes, &config, ImportOptions { reset_visits })?;
            return Output::new(
                report,
                format!(
                    "added {}, replaced {}, skipped {}",
                    report.added, report.replaced, report.skipped
                ),
            );
        }
        Cmd::Contact(ContactCmd::List) => {
            let kernel = dir.load_kernel()?;
            let contacts: Vec<Contact> = kernel.memory().contacts().cloned().collect();
            let text = contacts
                .iter()
                .map(|c| format!("{} <{}>", c.name, c.address))
                .collect::<Vec<_>>()
                .join("\n");
            return Output::new(&contacts, text);
        }
        Cmd::Agenda(AgendaCmd::List) => {
            let kernel = dir.load_kernel()?;
            let items: Vec<_> = kernel.agenda().items().cloned().collect();
            return Output::json_only(items);
        }
        Cmd::Session(SessionCmd::Show { session }) => {
            let kernel = dir.load_kernel()?;
            return Output::json_only(kernel.sessions().get(SessionId(session))?);
        }
        Cmd::Report { .. } => unreachable!("handled above"),

        Cmd::Session(SessionCmd::New { scope, parent }) => Command::CreateSession {
            scope,
            parent: parent.map(SessionId),
        },
        Cmd::Session(SessionCmd::Append { session, role, text }) => Command::Append {
            session: SessionId(session),
            role: match role {
                RoleArg::User => Role::User,
                RoleArg::Agent => Role::Agent,
                RoleArg::System => Role::System,
            },
            text,
        },
        Cmd::Session(SessionCmd::Dag(dag)) => {
            let (session, mutation) = match dag {
                DagCmd::Add {
                    session,
                    id,
                    label,
                    deps,
                } => (
                    session,
                    DagMutation::AddNode {
                        label: label.unwrap_or_else(|| id.clone()),
                        id,
                        deps,
                    },
                ),
                DagCmd::Edge { session, from, to } => (session, DagMutation::AddEdge { from, to }),
                DagCmd::Start { session, id } => (session, DagMutation::StartNode { id }),
                DagCmd::Complete { session, id } => (session, DagMutation::CompleteNode { id }),
                DagCmd::Fail { session, id } => (session, DagMutation::FailNode { id }),
            };
            Command::DagUpdate {
                session: SessionId(session),
                mutation,
            }
        }
        Cmd::Session(SessionCmd::Close {
            session,
            result,
            failed,
        }) => Command::CloseSession {
            session: SessionId(session),
            result,
            failed,
        },
        Cmd::Mailbox(MailboxCmd::Send { from, to, key, text }) => Command::MailboxSend {
            message: Outgoing {
                sender: parse_sender(&from)?,
                target: to,
                payload: text,
                idempotency_key: key,
            },
        },
        Cmd::Mailbox(MailboxCmd::Poll { target }) => Command::MailboxPoll { target },
        Cmd::Agenda(AgendaCmd::Add(add)) => {
            let trigger = match (add.at, add.on) {
                (Some(fire_at), None) => Trigger::WallClock { fire_at },
                (None, Some(event_key)) => Trigger::Event { event_key },
                _ => unreachable!("clap enforces exactly one trigger"),
            };
            Command::AgendaSchedule {
                draft: AgendaDraft {
                    trigger,
                    action_spec: add.action,
                    delivery: add.deliver,
                    recurring: add.every,
                },
            }
        }
        Cmd::Agenda(AgendaCmd::Cancel { id }) => Command::AgendaCancel { id },
        Cmd::Agenda(AgendaCmd::Tick { now }) => Command::Tick { now },
        Cmd::Agenda(AgendaCmd::Raise { key }) => Command::RaiseEvent { key },
        Cmd::Memory(MemoryCmd::Put { category, text }) => Command::MemoryPut {
            category,
            content: text,
        },
        Cmd::Memory(MemoryCmd::Query { category, text }) => Command::MemoryQuery { category, text },
        Cmd::Contact(ContactCmd::Add { name, address, friend }) => Command::ContactUpsert {
            contact: Contact { name, address, friend },
        },
        Cmd::Experience(ExperienceCmd::Add { intent, script, digest }) => Command::ExperienceAdd {
            draft: {
                let digest = digest.unwrap_or_else(|| script.clone());
                ExperienceDraft::new(intent, script, digest).with_source_model("cli")
            },
        },
        Cmd::Recall { query, k } => Command::Recall { query, k },
    };
    let mut kernel = dir.load_kernel()?;
    reply_output(dir.run(&mut kernel, command)?)
}

fn simulate(dir: &DataDir, cmd: SimulateCmd) -> Result<Output, CliError> {
    let config = dir.config()?;
    match cmd {
        SimulateCmd::Grow {
            world,
            epochs,
            mode,
            out,
        } => {
            let mode = match mode {
                ModeArg::Full => RetrieverMode::Full,
                ModeArg::SimilarityOnly => RetrieverMode::SimilarityOnly,
                ModeArg::NoInjection => RetrieverMode::NoInjection,
            };
            let trajectory = sim::run_epochs(&world.world(), &config, mode, epochs)?;
            let csv = trajectory.to_csv();
            if let Some(path) = out {
                fs::write(path, &csv)?;
            }
            Output::new(&trajectory, csv.trim_end())
        }
        SimulateCmd::Transfer {
            world,
            donor_epochs,
            out,
        } => {
            let outcome = sim::transfer_experiment(&world.world(), &config, donor_epochs)?;
            if let Some(path) = out {
                fs::write(path, serde_json::to_string_pretty(&outcome)?)?;
            }
            let text = format!(
                "imported {} records; first-epoch success {:.3} (baseline) vs {:.3} (recipient), delta {:+.3}",
                outcome.import.added,
                outcome.baseline.success_rates.first().copied().unwrap_or(0.0),
                outcome.recipient.success_rates.first().copied().unwrap_or(0.0),
                outcome.success_delta()
            );
            Output::new(&outcome.report, text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                println!("{}", out.json);
            } else if !out.text.is_empty() {
                println!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
