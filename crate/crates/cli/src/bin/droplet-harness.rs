//! Runs end-to-end scenarios against a storage node in a child process.

use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use droplet_core::harness::{run_scenario, LaunchedNode, NodeLauncher, RunOptions, Scenario, BUILTIN};

#[derive(Parser)]
#[command(name = "droplet-harness", version, about = "Scripted droplet scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a built-in scenario by name or a scenario TOML file.
    Run {
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Host the node on a thread instead of a `droplet node serve` child.
        #[arg(long)]
        in_process: bool,
    },
    /// List built-in scenarios.
    List,
}

/// Starts `droplet node serve` next to this executable.
struct ProcessLauncher {
    exe: PathBuf,
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

impl NodeLauncher for ProcessLauncher {
    fn launch(&self, chain_dir: &Path, data_dir: &Path) -> io::Result<LaunchedNode> {
        let mut child = Command::new(&self.exe)
            .arg("--chain")
            .arg(chain_dir)
            .args(["node", "serve", "--backend", "disk", "--listen", "127.0.0.1:0", "--poll-ms", "5", "--data"])
            .arg(data_dir)
            .stdout(Stdio::piped())
            .spawn()?;
        let stdout = child.stdout.take().expect("piped");
        let guard = ChildGuard(child);
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line)?;
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| io::Error::other(format!("unexpected node output {line:?}")))?;
        Ok(LaunchedNode::new(addr, guard))
    }
}

fn load(scenario: &str) -> Result<Scenario> {
    if BUILTIN.iter().any(|(n, _)| *n == scenario) {
        return Ok(Scenario::builtin(scenario)?);
    }
    let text = std::fs::read_to_string(scenario).with_context(|| format!("reading scenario {scenario}"))?;
    Ok(Scenario::from_toml(&text)?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::List => {
            for (name, text) in BUILTIN {
                let s = Scenario::from_toml(text)?;
                println!("{name:<14} {}", s.description.lines().next().unwrap_or(""));
            }
            Ok(true)
        }
        Cmd::Run { scenario, seed, in_process } => {
            let scenario = load(&scenario)?;
            let mut options = RunOptions::new(seed);
            if !in_process {
                let exe = std::env::current_exe()?.with_file_name(format!("droplet{}", std::env::consts::EXE_SUFFIX));
                if !exe.exists() {
                    bail!("{} not found; build it or pass --in-process", exe.display());
                }
                options.launcher = Box::new(ProcessLauncher { exe });
            }
            let report = run_scenario(&scenario, &options)?;
            println!("{report}");
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
