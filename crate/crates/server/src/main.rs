//! `toolplane` CLI: `serve` runs the HTTP server; every other subcommand is
//! a thin HTTP client for the matching endpoint, printing the server's JSON
//! response on stdout.
//!
//! Exit codes: 0 success, 1 domain or transport error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use toolplane_core::payload::Payload;
use toolplane_core::service::ControlPlane;
use toolplane_core::Config;

#[derive(Parser)]
#[command(
    name = "toolplane",
    version,
    about = "Control plane for agent tools: one manifest, many tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Remote {
    /// Address of a running server (host:port or full URL)
    #[arg(long, env = "TOOLPLANE_ADDR", default_value = "127.0.0.1:7171")]
    addr: String,
}

impl Remote {
    fn base_url(&self) -> String {
        if self.addr.starts_with("http://") || self.addr.starts_with("https://") {
            self.addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", self.addr)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP server until interrupted
    Serve {
        /// Address to bind (port 0 picks an ephemeral port)
        #[arg(long, env = "TOOLPLANE_ADDR", default_value = "127.0.0.1:7171")]
        addr: String,
        /// Directory for the audit log, registry snapshot, and preferences
        #[arg(long, env = "TOOLPLANE_DATA_DIR", default_value = "toolplane-data")]
        data_dir: PathBuf,
        /// Optional JSON config file (resolver weights, threshold, alpha, fsync)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register a tool from a JSON descriptor ("-" reads stdin)
    RegisterTool {
        #[arg(long, default_value = "-")]
        file: String,
        #[command(flatten)]
        remote: Remote,
    },
    /// Register an agent from a JSON descriptor ("-" reads stdin)
    RegisterAgent {
        #[arg(long, default_value = "-")]
        file: String,
        #[command(flatten)]
        remote: Remote,
    },
    /// Register a validation rule from a JSON document ("-" reads stdin)
    RegisterRule {
        #[arg(long, default_value = "-")]
        file: String,
        #[command(flatten)]
        remote: Remote,
    },
    /// Submit an intent and print the invocation response
    Invoke {
        #[arg(long)]
        agent: String,
        #[arg(long)]
        intent: String,
        /// Tool arguments as a JSON object
        #[arg(long)]
        args: Option<String>,
        /// Request context as a JSON object
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        request_id: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Rate a previous invocation by request id
    Feedback {
        #[arg(long)]
        request_id: String,
        /// Rating in [0, 1]
        #[arg(long)]
        rating: f64,
        #[arg(long)]
        comment: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Print aggregated usage statistics
    Usage {
        #[arg(long = "agent")]
        agent_id: Option<String>,
        #[arg(long = "tool")]
        tool_id: Option<String>,
        #[arg(long)]
        outcome: Option<String>,
        #[arg(long)]
        seq_min: Option<u64>,
        #[arg(long)]
        seq_max: Option<u64>,
        #[command(flatten)]
        remote: Remote,
    },
    /// List registered tools
    Tools {
        #[arg(long)]
        tag: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve {
            addr,
            data_dir,
            config,
        } => {
            let config = match config {
                Some(path) => Config::load(&path)
                    .with_context(|| format!("loading config {}", path.display()))?,
                None => Config::default(),
            };
            let plane = Arc::new(ControlPlane::open(config, &data_dir)?);
            let addr = addr
                .parse()
                .with_context(|| format!("invalid bind address {addr:?}"))?;
            let (bound, server) = toolplane::bind(plane, addr).await?;
            println!("listening on http://{bound}");
            tokio::select! {
                result = server => result?,
                _ = tokio::signal::ctrl_c() => {}
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RegisterTool { file, remote } => {
            post_document(&remote, "/v1/register/tool", &file).await
        }
        Command::RegisterAgent { file, remote } => {
            post_document(&remote, "/v1/register/agent", &file).await
        }
        Command::RegisterRule { file, remote } => {
            post_document(&remote, "/v1/register/rule", &file).await
        }
        Command::Invoke {
            agent,
            intent,
            args,
            context,
            request_id,
            remote,
        } => {
            let mut envelope = serde_json::Map::new();
            envelope.insert("agent_id".to_string(), json!(agent));
            envelope.insert("intent".to_string(), json!(intent));
            match args.as_deref().map(parse_json_flag).transpose() {
                Ok(Some(args)) => {
                    envelope.insert("args".to_string(), args);
                }
                Ok(None) => {}
                Err(err) => return usage_error(&format!("--args: {err}")),
            }
            match context.as_deref().map(parse_json_flag).transpose() {
                Ok(Some(context)) => {
                    envelope.insert("context".to_string(), context);
                }
                Ok(None) => {}
                Err(err) => return usage_error(&format!("--context: {err}")),
            }
            if let Some(id) = request_id {
                envelope.insert("request_id".to_string(), json!(id));
            }
            let body = post(&remote, "/v1/invoke", &Payload::Object(envelope)).await?;
            println!("{body}");
            let ok = body.get("status").and_then(Payload::as_str) == Some("ok");
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Feedback {
            request_id,
            rating,
            comment,
            remote,
        } => {
            let mut event = json!({"request_id": request_id, "rating": rating});
            if let Some(comment) = comment {
                event["comment"] = json!(comment);
            }
            print_reply(post_checked(&remote, "/v1/feedback", &event).await?)
        }
        Command::Usage {
            agent_id,
            tool_id,
            outcome,
            seq_min,
            seq_max,
            remote,
        } => {
            let mut query: Vec<(&str, String)> = Vec::new();
            push_param(&mut query, "agent_id", agent_id);
            push_param(&mut query, "tool_id", tool_id);
            push_param(&mut query, "outcome", outcome);
            push_param(&mut query, "seq_min", seq_min.map(|v| v.to_string()));
            push_param(&mut query, "seq_max", seq_max.map(|v| v.to_string()));
            print_reply(get_checked(&remote, "/v1/usage", &query).await?)
        }
        Command::Tools { tag, remote } => {
            let mut query: Vec<(&str, String)> = Vec::new();
            push_param(&mut query, "tag", tag);
            print_reply(get_checked(&remote, "/v1/tools", &query).await?)
        }
    }
}

fn usage_error(message: &str) -> anyhow::Result<ExitCode> {
    eprintln!("usage error: {message}");
    Ok(ExitCode::from(2))
}

fn parse_json_flag(text: &str) -> Result<Payload, serde_json::Error> {
    serde_json::from_str(text)
}

fn push_param(query: &mut Vec<(&str, String)>, key: &'static str, value: Option<String>) {
    if let Some(value) = value {
        query.push((key, value));
    }
}

/// POST a JSON document read from a file (or stdin) and report the reply.
async fn post_document(remote: &Remote, path: &str, file: &str) -> anyhow::Result<ExitCode> {
    let text = if file == "-" {
        std::io::read_to_string(std::io::stdin()).context("reading stdin")?
    } else {
        std::fs::read_to_string(file).with_context(|| format!("reading {file}"))?
    };
    let document: Payload = match serde_json::from_str(&text) {
        Ok(document) => document,
        Err(err) => return usage_error(&format!("{file}: {err}")),
    };
    print_reply(post_checked(remote, path, &document).await?)
}

/// POST returning the body regardless of HTTP status.
async fn post(remote: &Remote, path: &str, body: &Payload) -> anyhow::Result<Payload> {
    let url = format!("{}{}", remote.base_url(), path);
    let response = reqwest::Client::new()
        .post(&url)
        .json(body)
        .send()
        .await
        .with_context(|| format!("POST {url}"))?;
    decode_body(response).await
}

/// POST where a non-success HTTP status means a domain error (exit 1).
async fn post_checked(remote: &Remote, path: &str, body: &Payload) -> anyhow::Result<(bool, Payload)> {
    let url = format!("{}{}", remote.base_url(), path);
    let response = reqwest::Client::new()
        .post(&url)
        .json(body)
        .send()
        .await
        .with_context(|| format!("POST {url}"))?;
    let ok = response.status().is_success();
    Ok((ok, decode_body(response).await?))
}

async fn get_checked(
    remote: &Remote,
    path: &str,
    query: &[(&str, String)],
) -> anyhow::Result<(bool, Payload)> {
    let url = format!("{}{}", remote.base_url(), path);
    let response = reqwest::Client::new()
        .get(&url)
        .query(query)
        .send()
        .await
        .with_context(|| format!("GET {url}"))?;
    let ok = response.status().is_success();
    Ok((ok, decode_body(response).await?))
}

async fn decode_body(response: reqwest::Response) -> anyhow::Result<Payload> {
    let status = response.status();
    let text = response.text().await.context("reading response body")?;
    serde_json::from_str(&text)
        .with_context(|| format!("non-JSON response (HTTP {status}): {text}"))
}

fn print_reply((ok, body): (bool, Payload)) -> anyhow::Result<ExitCode> {
    println!("{body}");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
