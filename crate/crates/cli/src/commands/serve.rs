use std::net::{IpAddr, SocketAddr};
use std::path::Path;

use crossmask::size_branching::ThresholdTable;
use crossmask_service::AppState;

use super::{require_dir, runtime, validation, CliResult};

pub fn run(host: &str, port: u16, root: &Path, thresholds: Option<&Path>) -> CliResult {
    require_dir(root, "root")?;
    let ip: IpAddr = host.parse().map_err(|_| validation(format!("invalid host address {host}")))?;
    let table = thresholds
        .map(|p| ThresholdTable::load(p).map_err(|e| validation(format!("{}: {e}", p.display()))))
        .transpose()?;
    let state = AppState::new(root, table);
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(crossmask_service::serve(SocketAddr::new(ip, port), state))
        .map_err(runtime)
}
