use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Mutex;
use std::thread;

use log::{info, warn};

use super::{check_hello, decode, encode, hello, Message, ProtocolError, ScoreRequest, ScoreResponse};
use crate::seed;
use crate::synthenv::{self, EnvConfig};
use crate::tokenspace::{Scenario, TokenSequence};

/// Scores requests with the synthetic environment. Noise, when enabled, is
/// seeded from the request id alone, so the same request always receives
/// the same response.
#[derive(Debug, Clone)]
pub struct MockEvaluator {
    pub env: EnvConfig,
}

impl MockEvaluator {
    pub fn new(env: EnvConfig) -> Self {
        Self { env }
    }

    pub fn respond(&self, req: &ScoreRequest) -> Result<ScoreResponse, ProtocolError> {
        let fail = |reason: String| ProtocolError::Scoring { id: req.id, reason };
        let scenario = Scenario::from_query(&self.env.vocab, &req.original).map_err(|e| fail(e.to_string()))?;
        let y = TokenSequence::new(req.rewritten.clone(), &self.env.vocab, self.env.max_len)
            .map_err(|e| fail(e.to_string()))?;
        let result = if self.env.noise_sigma > 0.0 {
            let mut rng = seed::stream(req.id, &[seed::stage::NOISE]);
            synthenv::score(&self.env, &scenario, &y, Some(&mut rng))
        } else {
            synthenv::score::<rand_chacha::ChaCha8Rng>(&self.env, &scenario, &y, None)
        };
        let (s, _) = result.map_err(|e| fail(e.to_string()))?;
        Ok(ScoreResponse {
            id: req.id,
            sa: s.sa,
            pc: s.pc,
        })
    }
}

/// Serves one connection until the peer closes it. Returns the number of
/// requests answered.
pub fn serve<R: BufRead, W: Write>(evaluator: &MockEvaluator, reader: R, writer: W) -> Result<usize, ProtocolError> {
    let writer = Mutex::new(writer);
    let send = |msg: &Message| -> Result<(), ProtocolError> {
        let line = encode(msg);
        let mut w = writer.lock().expect("writer lock poisoned");
        w.write_all(line.as_bytes())?;
        w.flush()?;
        Ok(())
    };
    send(&hello())?;
    let mut lines = reader.lines();
    match lines.next() {
        Some(line) => check_hello(&line?)?,
        None => return Err(ProtocolError::ConnectionLost("peer closed before hello".into())),
    }
    let mut answered = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match decode(&line) {
            Ok(Message::Request(req)) => match evaluator.respond(&req) {
                Ok(resp) => {
                    send(&Message::Response(resp))?;
                    answered += 1;
                }
                Err(e) => warn!("{e}"),
            },
            Ok(other) => warn!("ignoring unexpected message {other:?}"),
            Err(e) => warn!("{e}"),
        }
    }
    Ok(answered)
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(evaluator: MockEvaluator, listener: TcpListener) -> Result<(), ProtocolError> {
    info!("mock evaluator listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        let ev = evaluator.clone();
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = stream.set_nodelay(true) {
                warn!("{e}");
            }
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return warn!("{e}"),
            };
            match serve(&ev, reader, stream) {
                Ok(n) => info!("connection {peer:?} closed after {n} requests"),
                Err(e) => warn!("connection {peer:?}: {e}"),
            }
        });
    }
    Ok(())
}
