use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::warn;

use super::{check_hello, decode, encode, hello, Message, ProtocolError, ScoreRequest, ScoreResponse};

#[derive(Debug, Clone, Copy)]
pub struct ClientOptions {
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_in_flight: 256,
        }
    }
}

#[derive(Default)]
struct Pending {
    waiting: HashMap<u64, Sender<ScoreResponse>>,
    closed: Option<String>,
}

/// Client side of the scoring protocol. Requests may be issued from several
/// threads; responses are demultiplexed by id on a background reader.
pub struct ProtocolClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Mutex<Pending>>,
    opts: ClientOptions,
    reader: Option<JoinHandle<()>>,
    child: Option<Child>,
    tcp: Option<TcpStream>,
}

impl ProtocolClient {
    /// Performs the handshake over an established stream pair.
    pub fn from_streams<R, W>(reader: R, writer: W, opts: ClientOptions) -> Result<Self, ProtocolError>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut writer: Box<dyn Write + Send> = Box::new(writer);
        writer.write_all(encode(&hello()).as_bytes())?;
        writer.flush()?;
        let mut reader = reader;
        let mut first = String::new();
        if reader.read_line(&mut first)? == 0 {
            return Err(ProtocolError::ConnectionLost("peer closed before hello".into()));
        }
        check_hello(&first)?;

        let pending = Arc::new(Mutex::new(Pending::default()));
        let shared = Arc::clone(&pending);
        let handle = thread::spawn(move || read_loop(reader, shared));
        Ok(Self {
            writer: Mutex::new(writer),
            pending,
            opts,
            reader: Some(handle),
            child: None,
            tcp: None,
        })
    }

    pub fn connect_tcp<A: ToSocketAddrs>(addr: A, opts: ClientOptions) -> Result<Self, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let handle = stream.try_clone()?;
        let mut client = Self::from_streams(reader, stream, opts)?;
        client.tcp = Some(handle);
        Ok(client)
    }

    /// Launches `cmd` and speaks the protocol over its stdin/stdout.
    pub fn spawn(cmd: &mut Command, opts: ClientOptions) -> Result<Self, ProtocolError> {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        match Self::from_streams(stdout, stdin, opts) {
            Ok(mut c) => {
                c.child = Some(child);
                Ok(c)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Scores `requests`, returning one result per request in input order.
    /// A timeout or failure of one request does not affect the others.
    pub fn score_batch(&self, requests: &[ScoreRequest]) -> Vec<Result<ScoreResponse, ProtocolError>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.opts.max_in_flight.max(1)) {
            out.extend(self.score_chunk(chunk));
        }
        out
    }

    fn score_chunk(&self, chunk: &[ScoreRequest]) -> Vec<Result<ScoreResponse, ProtocolError>> {
        let mut slots: Vec<Result<mpsc::Receiver<ScoreResponse>, ProtocolError>> = Vec::with_capacity(chunk.len());
        {
            let mut p = self.pending.lock().expect("pending lock poisoned");
            for r in chunk {
                if let Some(reason) = &p.closed {
                    slots.push(Err(ProtocolError::ConnectionLost(reason.clone())));
                    continue;
                }
                if p.waiting.contains_key(&r.id) {
                    slots.push(Err(ProtocolError::DuplicateId { id: r.id }));
                    continue;
                }
                let (tx, rx) = mpsc::channel();
                p.waiting.insert(r.id, tx);
                slots.push(Ok(rx));
            }
        }
        let mut payload = String::new();
        for (r, slot) in chunk.iter().zip(&slots) {
            if slot.is_ok() {
                payload.push_str(&encode(&Message::Request(r.clone())));
            }
        }
        if let Err(e) = self.write(&payload) {
            self.forget(chunk);
            return chunk.iter().map(|_| Err(e.clone())).collect();
        }
        let deadline = Instant::now() + self.opts.timeout;
        chunk
            .iter()
            .zip(slots)
            .map(|(r, slot)| {
                let rx = slot?;
                let left = deadline.saturating_duration_since(Instant::now());
                match rx.recv_timeout(left) {
                    Ok(resp) => Ok(resp),
                    Err(RecvTimeoutError::Timeout) => {
                        self.forget(std::slice::from_ref(r));
                        Err(ProtocolError::Timeout { id: r.id })
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        let p = self.pending.lock().expect("pending lock poisoned");
                        Err(ProtocolError::ConnectionLost(
                            p.closed.clone().unwrap_or_else(|| "reader stopped".into()),
                        ))
                    }
                }
            })
            .collect()
    }

    fn write(&self, payload: &str) -> Result<(), ProtocolError> {
        if payload.is_empty() {
            return Ok(());
        }
        let mut w = self.writer.lock().expect("writer lock poisoned");
        w.write_all(payload.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| ProtocolError::ConnectionLost(e.to_string()))
    }

    fn forget(&self, reqs: &[ScoreRequest]) {
        let mut p = self.pending.lock().expect("pending lock poisoned");
        for r in reqs {
            p.waiting.remove(&r.id);
        }
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        // Closing our write half ends the peer's read loop.
        if let Ok(mut w) = self.writer.lock() {
            let _ = w.flush();
            *w = Box::new(std::io::sink());
        }
        if let Some(tcp) = self.tcp.take() {
            let _ = tcp.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.take() {
            let _ = child.wait();
        }
        if let Some(h) = self.reader.take() {
            if h.is_finished() {
                let _ = h.join();
            }
        }
    }
}

fn read_loop<R: BufRead>(reader: R, pending: Arc<Mutex<Pending>>) {
    let mut reason = "peer closed the connection".to_string();
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                reason = e.to_string();
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match decode(&line) {
            Ok(Message::Response(resp)) => {
                let tx = pending.lock().expect("pending lock poisoned").waiting.remove(&resp.id);
                match tx {
                    Some(tx) => {
                        let _ = tx.send(resp);
                    }
                    None => warn!("response for unknown or expired request id {}", resp.id),
                }
            }
            Ok(other) => warn!("ignoring unexpected message {other:?}"),
            Err(e) => warn!("{e}"),
        }
    }
    let mut p = pending.lock().expect("pending lock poisoned");
    p.closed = Some(reason);
    p.waiting.clear();
}
