use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;

/// Serve a prepared rating study over HTTP.
#[derive(Parser)]
#[command(name = "annotation-service", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Study directory with tasks.json, assignments.json and images/.
    #[arg(long)]
    data_dir: PathBuf,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    msdm_annotation::server::run(args.addr, &args.data_dir)
        .with_context(|| format!("serving study in {}", args.data_dir.display()))
}
