//! Telemetry listener: newline-delimited records in, acks out, one ack
//! per line in line order.

use std::io;

use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};

use tuhr_core::telemetry::{parse_record, serialize_ack, AckError, AckRecord, MAX_LINE_BYTES};

use crate::engine::{Engine, EngineError};

enum Slot {
    Ready(AckRecord),
    Waiting(oneshot::Receiver<Result<AckRecord, EngineError>>),
}

/// Acks queued per session before reading pauses.
const PIPELINE_DEPTH: usize = 4096;

/// Read one line of at most `MAX_LINE_BYTES` into `buf`, without the
/// newline. Longer lines are drained and reported as `Some(false)`.
/// `None` at end of stream.
async fn read_line<R: AsyncBufReadExt + Unpin>(
    r: &mut R,
    buf: &mut Vec<u8>,
) -> io::Result<Option<bool>> {
    buf.clear();
    let mut overflow = false;
    let mut seen = false;
    loop {
        let chunk = r.fill_buf().await?;
        if chunk.is_empty() {
            // A final line without a newline is still a record.
            return Ok(seen.then_some(!overflow));
        }
        seen = true;
        let (part, used, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (&chunk[..i], i + 1, true),
            None => (chunk, chunk.len(), false),
        };
        if !overflow {
            if buf.len() + part.len() > MAX_LINE_BYTES {
                overflow = true;
                buf.clear();
            } else {
                buf.extend_from_slice(part);
            }
        }
        r.consume(used);
        if done {
            break;
        }
    }
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    Ok(Some(!overflow))
}

/// Serve one connection until the peer closes it or the engine fails.
pub async fn session<R, W>(reader: R, writer: W, engine: Engine) -> io::Result<()>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::channel::<Slot>(PIPELINE_DEPTH);
    let acker = tokio::spawn(async move {
        let mut out = BufWriter::new(writer);
        while let Some(slot) = rx.recv().await {
            let ack = match slot {
                Slot::Ready(a) => a,
                Slot::Waiting(w) => match w.await {
                    Ok(Ok(a)) => a,
                    // Unacknowledged; the sensor will retry on a new connection.
                    _ => return Err(io::Error::other("store unavailable")),
                },
            };
            out.write_all(&serialize_ack(&ack)).await?;
            if rx.is_empty() {
                out.flush().await?;
            }
        }
        out.flush().await?;
        out.into_inner().shutdown().await.ok();
        Ok::<_, io::Error>(())
    });

    let mut reader = BufReader::with_capacity(64 * 1024, reader);
    let mut buf = Vec::with_capacity(256);
    let result = loop {
        let line = match read_line(&mut reader, &mut buf).await {
            Ok(Some(l)) => l,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        let slot = match line {
            false => Slot::Ready(AckRecord::rejected(AckError::Parse, None)),
            true => match parse_record(&buf) {
                Err(rej) => Slot::Ready(rej.into()),
                Ok(env) => match engine.submit_reading(env).await {
                    Ok(rx) => Slot::Waiting(rx),
                    Err(_) => break Err(io::Error::other("store unavailable")),
                },
            },
        };
        if tx.send(slot).await.is_err() {
            break Ok(());
        }
    };
    drop(tx);
    match acker.await {
        Ok(Err(e)) if result.is_ok() => Err(e),
        _ => result,
    }
}

/// Accept connections until `shutdown` flips to true.
pub async fn serve(listener: TcpListener, engine: Engine, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    let engine = engine.clone();
                    tokio::spawn(async move {
                        let (r, w) = stream.into_split();
                        if let Err(e) = session(r, w, engine).await {
                            log::debug!("telemetry session {peer} ended: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("telemetry accept failed: {e}"),
            },
            _ = shutdown.changed() => break,
        }
    }
}
