//! Newline-delimited JSON control protocol over TCP, one request per line.

use ops_core::control::{wire, SharedMachine};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, machine: SharedMachine) -> std::io::Result<()> {
    loop {
        let (sock, peer) = listener.accept().await?;
        let machine = machine.clone();
        tokio::spawn(async move {
            if let Err(e) = handle(sock, machine).await {
                tracing::debug!(%peer, "control connection closed: {e}");
            }
        });
    }
}

async fn handle(sock: TcpStream, machine: SharedMachine) -> std::io::Result<()> {
    let (rd, mut wr) = sock.into_split();
    let mut lines = BufReader::new(rd).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let m = machine.clone();
        let reply = tokio::task::spawn_blocking(move || wire::handle_line(&m, &line))
            .await
            .map_err(std::io::Error::other)?;
        let mut out = reply.to_string();
        out.push('\n');
        wr.write_all(out.as_bytes()).await?;
    }
    Ok(())
}
