//! `cfexplain`: record episodes, explain decisions, export influence graphs,
//! run what-if edits, serve the HTTP API and train tabular Q policies.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 internal error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use cfexplain_core::envs::{env_by_name, train_tabular_q, Controllers, EnvError, Episode, QParams};
use cfexplain_core::explain::{
    decision_node, important_steps, render_explanation, ExplainError, Lexicon, DEFAULT_HORIZON,
};
use cfexplain_core::graph::{build_graph, GraphError, InfluenceGraph, DEFAULT_XI};
use cfexplain_core::model::ObjectId;
use cfexplain_core::session::{load_episode, record_episode, what_if, SessionError, WhatIfEdit};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments; exit code 1.
    Usage(String),
    /// Unreadable or inconsistent input data; exit code 2.
    Data(String),
    /// Anything else; exit code 3.
    Internal(String),
    /// `--help` / `--version` output; exit code 0.
    Info(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Info(_) => 0,
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    /// Prints the message to stderr, or to stdout for help text.
    pub fn report(&self) {
        match self {
            CliError::Info(text) => print!("{text}"),
            CliError::Usage(msg) => eprint!("{msg}"),
            CliError::Data(msg) | CliError::Internal(msg) => eprintln!("error: {msg}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) | CliError::Info(m) => {
                f.write_str(m.trim_end())
            }
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::UnknownEnv(_)
            | EnvError::UnknownPolicy(_)
            | EnvError::InvalidHyperparameter(_) => CliError::Usage(format!("error: {e}\n")),
            EnvError::PolicyFile(_) | EnvError::NonReplayable(_) => CliError::Data(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InvalidXi(_) | GraphError::BadHorizon | GraphError::BadDirection { .. } => {
                CliError::Usage(format!("error: {e}\n"))
            }
            GraphError::NodeNotFound(_) | GraphError::NonReplayableEpisode(_) => {
                CliError::Data(e.to_string())
            }
            GraphError::Env(env) => env.into(),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::InvalidFraction(_) => CliError::Usage(format!("error: {e}\n")),
            ExplainError::AgentDead { .. } | ExplainError::StepOutOfRange { .. } => {
                CliError::Data(e.to_string())
            }
            ExplainError::Graph(g) => g.into(),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Env(env) => env.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cfexplain",
    version,
    about = "Counterfactual explanations for grid-world agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GraphFormat {
    Json,
    Dot,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out an episode and record it as JSON Lines.
    Run {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `SPEC` for every agent, or `AGENT=SPEC`; repeatable.
        #[arg(long)]
        policy: Vec<String>,
        #[arg(long, default_value_t = 60)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain one agent's decision at one step.
    Explain {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long)]
        step: u32,
        #[arg(long, default_value_t = DEFAULT_XI)]
        xi: f64,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: u32,
    },
    /// Export an agent's influence graph.
    Graph {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long)]
        from: Option<u32>,
        #[arg(long)]
        to: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_XI)]
        xi: f64,
        #[arg(long, value_enum, default_value_t = GraphFormat::Json)]
        format: GraphFormat,
    },
    /// List an agent's most important decision steps.
    Important {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = DEFAULT_XI)]
        xi: f64,
    },
    /// Re-simulate an episode under edits read from a JSON file.
    Whatif {
        #[arg(long)]
        episode: PathBuf,
        /// A JSON array of edits, or an object with an `edits` array.
        #[arg(long)]
        edits: PathBuf,
        /// Where to write the full counterfactual rollout as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Train a tabular Q policy; use it with `--policy q:PATH`.
    Train {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = QParams::default().episodes)]
        episodes: usize,
        #[arg(long, default_value_t = QParams::default().alpha)]
        alpha: f64,
        #[arg(long, default_value_t = QParams::default().gamma)]
        gamma: f64,
        #[arg(long, default_value_t = QParams::default().epsilon)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = QParams::default().max_steps)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let text = e.render().to_string();
        match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                CliError::Info(text)
            }
            _ => CliError::Usage(text),
        }
    })?;
    match cli.command {
        Command::Run {
            env,
            seed,
            policy,
            steps,
            out: path,
        } => {
            let policies = policy_specs(&env, &policy)?;
            let episode = record_episode(&env, seed, &policies, steps, &path)?;
            writeln!(
                out,
                "recorded {} steps of {env} (seed {seed}) to {}",
                episode.len(),
                path.display()
            )?;
        }
        Command::Explain {
            episode,
            agent,
            step,
            xi,
            horizon,
        } => {
            let episode = load(&episode)?;
            let agent = agent_of(&episode, &agent)?;
            let graph = graph_of(&episode, xi)?;
            let lexicon = Lexicon::builtin(&episode.env_name)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let e = render_explanation(&graph, &episode, &lexicon, &agent, step, horizon)?;
            writeln!(out, "{}", e.rendered)?;
            writeln!(out, "{}", to_json(&e)?)?;
        }
        Command::Graph {
            episode,
            agent,
            from,
            to,
            xi,
            format,
        } => {
            let episode = load(&episode)?;
            let agent = agent_of(&episode, &agent)?;
            let last = episode.frames.len() as u32 - 1;
            let (from, to) = (from.unwrap_or(0), to.unwrap_or(last));
            if from > to {
                return Err(CliError::Usage(format!(
                    "error: --from {from} is after --to {to}\n"
                )));
            }
            if to > last {
                return Err(CliError::Data(format!("the episode ends at step {last}")));
            }
            let graph = graph_of(&episode, xi)?
                .agent_view(&agent)
                .subgraph(from, to);
            match format {
                GraphFormat::Json => writeln!(out, "{}", to_json(&graph)?)?,
                GraphFormat::Dot => write!(out, "{}", graph.to_dot())?,
            }
        }
        Command::Important {
            episode,
            agent,
            fraction,
            xi,
        } => {
            let episode = load(&episode)?;
            let agent = agent_of(&episode, &agent)?;
            let graph = graph_of(&episode, xi)?;
            let steps = important_steps(&graph, &episode, &agent, fraction)?;
            for t in steps {
                writeln!(
                    out,
                    "{t}\t{:.6}",
                    graph.importance(&decision_node(&agent, t))
                )?;
            }
        }
        Command::Whatif {
            episode,
            edits,
            out: path,
        } => {
            let episode = load(&episode)?;
            let edits = read_edits(&edits)?;
            let rollout = what_if(&episode, &edits)?;
            let summary = serde_json::json!({
                "start_step": rollout.start_step,
                "divergence_step": rollout.divergence_step,
                "steps": rollout.episode.len(),
                "edits": rollout.edits,
            });
            writeln!(out, "{}", to_json(&summary)?)?;
            if let Some(path) = path {
                fs::write(&path, to_json(&rollout)?)?;
            }
        }
        Command::Serve { port, host } => {
            let addr = SocketAddr::new(host, port);
            let runtime =
                tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            writeln!(out, "listening on http://{addr}")?;
            out.flush()?;
            runtime
                .block_on(cfexplain_service::serve(addr))
                .map_err(|e| CliError::Internal(format!("server on {addr}: {e}")))?;
        }
        Command::Train {
            env,
            episodes,
            alpha,
            gamma,
            epsilon,
            seed,
            steps,
            out: path,
        } => {
            let params = QParams {
                episodes,
                alpha,
                gamma,
                epsilon,
                seed,
                max_steps: steps,
            };
            let policy = train_tabular_q(&env, &params)?;
            policy
                .save(&path)
                .map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(
                out,
                "trained {} ({} states) to {}",
                policy.id,
                policy.table.len(),
                path.display()
            )?;
        }
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))
}

fn load(path: &Path) -> Result<Episode, CliError> {
    load_episode(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn graph_of(episode: &Episode, xi: f64) -> Result<InfluenceGraph, CliError> {
    let controllers = Controllers::for_episode(episode)?;
    Ok(build_graph(episode, &controllers, xi)?)
}

fn agent_of(episode: &Episode, raw: &str) -> Result<ObjectId, CliError> {
    let id = ObjectId::from(raw);
    if episode.env()?.is_agent(&id) {
        Ok(id)
    } else {
        Err(CliError::Data(format!(
            "`{raw}` is not an agent of the {} episode",
            episode.env_name
        )))
    }
}

fn policy_specs(env: &str, raw: &[String]) -> Result<BTreeMap<ObjectId, String>, CliError> {
    let env = env_by_name(env)?;
    let mut specs = BTreeMap::new();
    for item in raw {
        match item.split_once('=') {
            Some((agent, spec)) => {
                let id = ObjectId::from(agent);
                if !env.is_agent(&id) {
                    return Err(CliError::Usage(format!(
                        "error: `{agent}` is not an agent of {}\n",
                        env.name()
                    )));
                }
                specs.insert(id, spec.to_owned());
            }
            None => {
                for id in env.agent_ids() {
                    specs.insert(id.clone(), item.clone());
                }
            }
        }
    }
    Ok(specs)
}

fn read_edits(path: &Path) -> Result<Vec<WhatIfEdit>, CliError> {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum EditFile {
        List(Vec<WhatIfEdit>),
        Wrapped { edits: Vec<WhatIfEdit> },
    }
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(EditFile::List(edits) | EditFile::Wrapped { edits }) => Ok(edits),
        Err(e) => Err(CliError::Data(format!(
            "{}: not a list of edits: {e}",
            path.display()
        ))),
    }
}
