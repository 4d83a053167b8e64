//! Runs a [`Session`] in real time and fans its output out to connected
//! clients, over TCP frames or WebSocket text messages.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use log::{debug, info, warn};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{interval, MissedTickBehavior};

use seam_core::protocol::{decode, encode, Message, ProtocolError, MAX_FRAME_LEN};
use seam_core::recorder::RecordingManifest;
use seam_core::session::{Outbound, Session, SessionError};

pub type ClientTx = mpsc::UnboundedSender<Message>;

#[derive(Debug)]
pub enum Command {
    Join { message: Message, tx: ClientTx, reply: oneshot::Sender<Result<String, SessionError>> },
    Ingest { sender: String, message: Message },
    Leave { participant_id: String },
    Stop,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StopPolicy {
    /// Close after this many ticks.
    pub max_ticks: Option<u64>,
    /// Close once every human who joined has left.
    pub close_when_empty: bool,
}

#[derive(Debug)]
pub struct Finished {
    pub manifest: RecordingManifest,
    pub recording_dir: PathBuf,
    pub ticks: u64,
}

#[derive(Debug, Clone)]
pub struct LiveHandle {
    tx: mpsc::UnboundedSender<Command>,
}

impl LiveHandle {
    pub fn send(&self, c: Command) -> bool {
        self.tx.send(c).is_ok()
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }

    /// Joins with a `hello` message; returns the participant id on success.
    pub async fn join(&self, message: Message, tx: ClientTx) -> Result<String, SessionError> {
        let (reply, rx) = oneshot::channel();
        if !self.send(Command::Join { message, tx, reply }) {
            return Err(SessionError::Closed);
        }
        rx.await.unwrap_or(Err(SessionError::Closed))
    }
}

fn dispatch(clients: &BTreeMap<String, ClientTx>, out: Vec<Outbound>) {
    for o in out {
        for (id, tx) in clients {
            if o.to.includes(id) {
                let _ = tx.send(o.message.clone());
            }
        }
    }
}

/// Spawns the tick loop. The returned task resolves when the session closes.
pub fn spawn(mut session: Session, policy: StopPolicy) -> (LiveHandle, JoinHandle<Result<Finished, SessionError>>) {
    let (tx, mut rx) = mpsc::unbounded_channel::<Command>();
    let period = Duration::from_nanos(1_000_000_000 / session.tick_rate() as u64);
    let task = tokio::spawn(async move {
        let mut clients: BTreeMap<String, ClientTx> = BTreeMap::new();
        let mut ever_joined = false;
        let mut clock = interval(period);
        clock.set_missed_tick_behavior(MissedTickBehavior::Burst);
        loop {
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    None | Some(Command::Stop) => break,
                    Some(Command::Join { message: Message::Hello(hello), tx, reply }) => {
                        let id = hello.participant_id.clone();
                        match session.join(hello) {
                            Ok((welcome, out)) => {
                                let _ = tx.send(Message::Welcome(welcome));
                                clients.insert(id.clone(), tx);
                                ever_joined = true;
                                dispatch(&clients, out);
                                let _ = reply.send(Ok(id));
                            }
                            Err(e) => {
                                let _ = reply.send(Err(e));
                            }
                        }
                    }
                    Some(Command::Join { reply, .. }) => {
                        let _ = reply.send(Err(SessionError::Setup("first message must be hello".into())));
                    }
                    Some(Command::Ingest { sender, message }) => match session.ingest(&sender, message) {
                        Ok(out) => dispatch(&clients, out),
                        Err(e) => {
                            if let Some(tx) = clients.get(&sender) {
                                let _ = tx.send(Message::error(e.code(), e.to_string()));
                            }
                        }
                    },
                    Some(Command::Leave { participant_id }) => {
                        if clients.remove(&participant_id).is_some() {
                            let out = session.leave(&participant_id);
                            dispatch(&clients, out);
                        }
                        if policy.close_when_empty && ever_joined && clients.is_empty() {
                            break;
                        }
                    }
                },
                _ = clock.tick() => {
                    let out = session.tick()?;
                    dispatch(&clients, out);
                    if policy.max_ticks.is_some_and(|m| session.current_tick() >= m) {
                        break;
                    }
                }
            }
        }
        let (manifest, out) = session.close()?;
        dispatch(&clients, out);
        info!("session closed after {} ticks, drops {:?}", session.current_tick(), session.drop_counters());
        Ok(Finished { manifest, recording_dir: session.recording_dir().to_path_buf(), ticks: session.current_tick() })
    });
    (LiveHandle { tx }, task)
}

/// Reads one frame. The outer error ends the stream; the inner one is a
/// bad payload inside an intact frame, which the caller can skip.
async fn read_frame(stream: &mut tokio::net::tcp::OwnedReadHalf) -> Result<Option<Result<Message, ProtocolError>>, ProtocolError> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(n));
    }
    let mut buf = vec![0u8; n];
    stream.read_exact(&mut buf).await?;
    Ok(Some(match String::from_utf8(buf) {
        Ok(text) => decode(&text),
        Err(e) => Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e).into()),
    }))
}

fn frame(m: &Message) -> Vec<u8> {
    seam_core::protocol::encode_frame(m)
}

/// Serves one TCP client using length-prefixed frames.
pub async fn serve_tcp_client(stream: TcpStream, live: LiveHandle) {
    let peer = stream.peer_addr().ok();
    let (mut read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let first = match read_frame(&mut read).await {
        Ok(Some(Ok(m))) => m,
        Ok(None) => return,
        Ok(Some(Err(e))) | Err(e) => {
            let _ = write.write_all(&frame(&Message::error("malformed", e.to_string()))).await;
            return;
        }
    };
    let errors = tx.clone();
    let id = match live.join(first, tx).await {
        Ok(id) => id,
        Err(e) => {
            let _ = write.write_all(&frame(&Message::error(e.code(), e.to_string()))).await;
            return;
        }
    };
    debug!("{id} joined from {peer:?}");
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            let bye = matches!(m, Message::Bye(_));
            if write.write_all(&frame(&m)).await.is_err() || bye {
                break;
            }
        }
    });
    loop {
        match read_frame(&mut read).await {
            Ok(Some(Ok(m))) => {
                let bye = matches!(m, Message::Bye(_));
                if !live.send(Command::Ingest { sender: id.clone(), message: m }) || bye {
                    break;
                }
            }
            Ok(Some(Err(e))) => {
                let _ = errors.send(Message::error("malformed", e.to_string()));
            }
            Ok(None) => break,
            Err(e) => {
                warn!("{id}: {e}");
                break;
            }
        }
    }
    live.send(Command::Leave { participant_id: id });
    drop(errors);
    let _ = writer.await;
}

/// Accepts TCP clients until the session finishes.
pub async fn serve_tcp(listener: TcpListener, live: LiveHandle, done: JoinHandle<Result<Finished, SessionError>>) -> Result<Finished, SessionError> {
    let accept = async {
        loop {
            match listener.accept().await {
                Ok((stream, _)) => {
                    tokio::spawn(serve_tcp_client(stream, live.clone()));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    };
    tokio::select! {
        r = done => r.unwrap_or_else(|e| Err(SessionError::Setup(format!("session task failed: {e}")))),
        _ = accept => unreachable!("accept loop never ends"),
    }
}

/// Serves one WebSocket client: each text message carries one envelope.
pub async fn serve_ws_client(socket: axum::extract::ws::WebSocket, live: LiveHandle) {
    use axum::extract::ws::Message as Ws;
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let next_envelope = |m: Option<Result<Ws, axum::Error>>| -> Option<Result<Message, String>> {
        match m? {
            Ok(Ws::Text(t)) => Some(decode(t.as_str()).map_err(|e| e.to_string())),
            Ok(Ws::Binary(b)) => Some(
                std::str::from_utf8(&b).map_err(|e| e.to_string()).and_then(|t| decode(t).map_err(|e| e.to_string())),
            ),
            Ok(Ws::Close(_)) | Err(_) => None,
            Ok(_) => Some(Err(String::new())),
        }
    };
    let first = loop {
        match next_envelope(stream.next().await) {
            None => return,
            Some(Ok(m)) => break m,
            Some(Err(e)) if e.is_empty() => continue,
            Some(Err(e)) => {
                let _ = sink.send(Ws::Text(encode(&Message::error("malformed", e)).into())).await;
                return;
            }
        }
    };
    let errors = tx.clone();
    let id = match live.join(first, tx).await {
        Ok(id) => id,
        Err(e) => {
            let _ = sink.send(Ws::Text(encode(&Message::error(e.code(), e.to_string())).into())).await;
            let _ = sink.close().await;
            return;
        }
    };
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            let bye = matches!(m, Message::Bye(_));
            if sink.send(Ws::Text(encode(&m).into())).await.is_err() {
                break;
            }
            if bye {
                let _ = sink.close().await;
                break;
            }
        }
    });
    loop {
        match next_envelope(stream.next().await) {
            None => break,
            Some(Ok(m)) => {
                let bye = matches!(m, Message::Bye(_));
                if !live.send(Command::Ingest { sender: id.clone(), message: m }) || bye {
                    break;
                }
            }
            Some(Err(e)) if e.is_empty() => {}
            Some(Err(e)) => {
                let _ = errors.send(Message::error("malformed", e));
            }
        }
    }
    live.send(Command::Leave { participant_id: id });
    drop(errors);
    let _ = writer.await;
}
