//! Drives the compiled `toolplane` binary: `serve` plus every client
//! subcommand, asserting the documented exit codes and machine-readable
//! stdout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toolplane"))
}

/// A running `toolplane serve` child, killed on drop.
struct ServerGuard {
    child: Child,
    addr: String,
    _dir: tempfile::TempDir,
}

impl Drop for ServerGuard {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server() -> ServerGuard {
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["serve", "--addr", "127.0.0.1:0"])
        .arg("--data-dir")
        .arg(dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn toolplane serve");

    // The bind announcement is the contract: "listening on http://ADDR".
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .unwrap_or_else(|| panic!("unexpected announcement: {line:?}"))
        .to_string();
    ServerGuard {
        child,
        addr,
        _dir: dir,
    }
}

/// Run a client subcommand against the server; returns (exit code, stdout).
fn run(server: &ServerGuard, args: &[&str], stdin: Option<&str>) -> (i32, String) {
    let mut command = bin();
    command
        .args(args)
        .env("TOOLPLANE_ADDR", &server.addr)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    command.stdin(if stdin.is_some() {
        Stdio::piped()
    } else {
        Stdio::null()
    });
    let mut child = command.spawn().unwrap();
    if let Some(text) = stdin {
        child
            .stdin
            .take()
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
    }
    let output = child.wait_with_output().unwrap();
    (
        output.status.code().unwrap_or(-1),
        String::from_utf8(output.stdout).unwrap(),
    )
}

fn parse(stdout: &str) -> Value {
    serde_json::from_str(stdout.trim()).unwrap_or_else(|e| panic!("bad JSON {stdout:?}: {e}"))
}

const ECHO_TOOL: &str = r#"{
    "tool_id": "echo", "name": "echo message", "description": "",
    "input_schema": {"kind": "any"}, "output_schema": {"kind": "any"},
    "endpoint": {"kind": "builtin", "builtin_name": "echo"}
}"#;

#[test]
fn cli_drives_the_full_flow() {
    let server = start_server();

    // Empty registry: exit 0 and an empty JSON list.
    let (code, stdout) = run(&server, &["tools"], None);
    assert_eq!(code, 0);
    assert_eq!(parse(&stdout), serde_json::json!([]));

    // Register a tool from stdin and an agent from a file.
    let (code, stdout) = run(&server, &["register-tool"], Some(ECHO_TOOL));
    assert_eq!(code, 0, "{stdout}");
    assert_eq!(parse(&stdout)["version"], 1);

    let agent_file = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(agent_file.path(), r#"{"agent_id": "bot"}"#).unwrap();
    let (code, _) = run(
        &server,
        &["register-agent", "--file", agent_file.path().to_str().unwrap()],
        None,
    );
    assert_eq!(code, 0);

    // Successful invoke: exit 0, response JSON on stdout.
    let (code, stdout) = run(
        &server,
        &[
            "invoke", "--agent", "bot", "--intent", "echo message",
            "--args", r#"{"m":"hi"}"#,
        ],
        None,
    );
    assert_eq!(code, 0, "{stdout}");
    let response = parse(&stdout);
    assert_eq!(response["status"], "ok");
    assert_eq!(response["output"]["m"], "hi");
    let request_id = response["request_id"].as_str().unwrap().to_string();

    // Feedback on that request.
    let (code, stdout) = run(
        &server,
        &["feedback", "--request-id", &request_id, "--rating", "1.0"],
        None,
    );
    assert_eq!(code, 0, "{stdout}");
    assert!((parse(&stdout)["weight"].as_f64().unwrap() - 0.6).abs() < 1e-9);

    // Usage aggregation.
    let (code, stdout) = run(&server, &["usage", "--agent", "bot"], None);
    assert_eq!(code, 0);
    assert_eq!(parse(&stdout)["tools"]["echo"]["invocations"], 1);

    // Domain errors exit 1: unknown agent on invoke, duplicate on register.
    let (code, stdout) = run(
        &server,
        &["invoke", "--agent", "nobody", "--intent", "echo message"],
        None,
    );
    assert_eq!(code, 1);
    assert_eq!(parse(&stdout)["error"]["code"], "unknown_agent");

    let (code, stdout) = run(&server, &["register-tool"], Some(ECHO_TOOL));
    assert_eq!(code, 1);
    assert_eq!(parse(&stdout)["code"], "duplicate_id");

    // Usage errors exit 2: malformed --args JSON, unknown flags.
    let (code, _) = run(
        &server,
        &["invoke", "--agent", "bot", "--intent", "x", "--args", "{not json"],
        None,
    );
    assert_eq!(code, 2);
    let (code, _) = run(&server, &["invoke", "--nonsense"], None);
    assert_eq!(code, 2);
}

#[test]
fn unreachable_server_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["tools", "--addr", "127.0.0.1:1"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(!output.stderr.is_empty(), "diagnostic goes to stderr");
}
