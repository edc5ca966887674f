//! Out-of-process scorer speaking newline-delimited JSON over stdio.
//!
//! ```text
//! engine  -> adapter  {"type":"hello","version":1}
//! adapter -> engine   {"type":"ready","channels":C,"images":D,"metric":"miou"|"acc"|"neg_absrel"}
//! engine  -> adapter  {"type":"score","id":n,"map":[..],"images":[..]|null}
//! adapter -> engine   {"type":"result","id":n,"aggregate":f,"per_image":[..]}
//!                   | {"type":"error","id":n,"message":s}
//! engine  -> adapter  {"type":"bye"}, then EOF
//! ```
//!
//! One request is in flight per session. Adapter stderr is inherited.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{Score, Scorer};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::remap::ChannelMap;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EngineMessage {
    Hello {
        version: u32,
    },
    Score {
        id: u64,
        map: Vec<i64>,
        images: Option<Vec<usize>>,
    },
    Bye,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AdapterMessage {
    Ready {
        channels: usize,
        images: usize,
        metric: Metric,
    },
    Result {
        id: u64,
        aggregate: f64,
        per_image: Vec<f64>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

pub struct ExternalScorerSession {
    writer: Box<dyn Write + Send>,
    replies: Receiver<io::Result<String>>,
    child: Option<Child>,
    timeout: Duration,
    next_id: u64,
    channels: usize,
    images: usize,
    metric: Metric,
    closed: bool,
    broken: bool,
}

impl ExternalScorerSession {
    /// Launches `command` through `sh -c` and completes the handshake.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        debug!("starting adapter: {command}");
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command);
        // Own process group, so a kill also reaches anything `sh` started.
        #[cfg(unix)]
        std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::AdapterCrashed(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut session = Self::connect(stdout, stdin, timeout)?;
        session.child = Some(child);
        Ok(session)
    }

    /// Runs the handshake over an arbitrary byte transport.
    pub fn connect(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut session = ExternalScorerSession {
            writer: Box::new(writer),
            replies: rx,
            child: None,
            timeout,
            next_id: 1,
            channels: 0,
            images: 0,
            metric: Metric::MeanIou,
            closed: false,
            broken: false,
        };
        session.send(&EngineMessage::Hello {
            version: PROTOCOL_VERSION,
        })?;
        match session.receive()? {
            AdapterMessage::Ready {
                channels,
                images,
                metric,
            } => {
                if channels < 2 || images < 1 {
                    return Err(Error::Protocol(format!(
                        "adapter announced {channels} channels and {images} images"
                    )));
                }
                session.channels = channels;
                session.images = images;
                session.metric = metric;
                Ok(session)
            }
            other => Err(Error::Protocol(format!("expected ready, got {other:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    fn send(&mut self, msg: &EngineMessage) -> Result<()> {
        let mut line = serde_json::to_vec(msg).expect("engine messages serialize");
        line.push(b'\n');
        self.writer
            .write_all(&line)
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::AdapterCrashed(format!("write failed: {e}")))
    }

    fn receive(&mut self) -> Result<AdapterMessage> {
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match self.replies.recv_timeout(remaining) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(Error::AdapterCrashed(format!("read failed: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::AdapterCrashed("end of stream".into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(&line)
                .map_err(|e| Error::Protocol(format!("unparseable message {line:?}: {e}")));
        }
    }

    /// Sends one score request and waits for its reply. After a transport
    /// or protocol failure the session is unusable and is killed on close.
    pub fn score(&mut self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        if self.broken {
            return Err(Error::Protocol(
                "session is out of sync after an earlier failure".into(),
            ));
        }
        if map.len() != self.channels {
            return Err(Error::LengthMismatch {
                expected: self.channels,
                actual: map.len(),
            });
        }
        // Cleared by `request` once a reply to this request has been read.
        self.broken = true;
        self.request(map, images)
    }

    fn request(&mut self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        let id = self.next_id;
        self.next_id += 1;
        self.send(&EngineMessage::Score {
            id,
            map: map.to_wire(),
            images: images.map(<[usize]>::to_vec),
        })?;
        match self.receive()? {
            AdapterMessage::Result {
                id: rid,
                aggregate,
                per_image,
            } => {
                if rid != id {
                    return Err(Error::Protocol(format!("reply id {rid} does not match request {id}")));
                }
                self.broken = false;
                let expected = images.map_or(self.images, <[usize]>::len);
                if per_image.len() != expected {
                    return Err(Error::Protocol(format!(
                        "reply has {} per-image values, expected {expected}",
                        per_image.len()
                    )));
                }
                if !aggregate.is_finite() || per_image.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Protocol("reply contains non-finite values".into()));
                }
                Ok(Score::new(aggregate, per_image))
            }
            AdapterMessage::Error { id: rid, message } => {
                if rid.is_some_and(|r| r != id) {
                    return Err(Error::Protocol(format!(
                        "error reply id {rid:?} does not match request {id}: {message}"
                    )));
                }
                self.broken = false;
                Err(Error::Protocol(format!("adapter rejected request {id}: {message}")))
            }
            other => Err(Error::Protocol(format!(
                "expected result for request {id}, got {other:?}"
            ))),
        }
    }

    /// Sends `bye`, closes stdin and reaps the process.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let sent = self.send(&EngineMessage::Bye);
        self.writer = Box::new(io::sink());
        if let Some(mut child) = self.child.take() {
            let grace = if self.broken {
                Duration::ZERO
            } else {
                Duration::from_secs(5)
            };
            let deadline = Instant::now() + grace;
            loop {
                match child.try_wait() {
                    Ok(Some(status)) => {
                        if !status.success() {
                            warn!("adapter exited with {status}");
                        }
                        break;
                    }
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => {
                        if !self.broken {
                            warn!("adapter did not exit after bye; killing it");
                        }
                        kill_group(&mut child);
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        sent
    }
}

#[cfg(unix)]
fn kill_group(child: &mut Child) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_group(child: &mut Child) {
    let _ = child.kill();
}

impl Drop for ExternalScorerSession {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// A set of adapter sessions, each lent to one worker at a time.
pub struct ExternalScorerPool {
    idle: Mutex<Vec<ExternalScorerSession>>,
    returned: Condvar,
    channels: usize,
    images: usize,
    metric: Metric,
}

impl ExternalScorerPool {
    pub fn spawn(command: &str, size: usize, timeout: Duration) -> Result<Self> {
        let sessions = (0..size.max(1))
            .map(|_| ExternalScorerSession::spawn(command, timeout))
            .collect::<Result<Vec<_>>>()?;
        Self::from_sessions(sessions)
    }

    pub fn from_sessions(sessions: Vec<ExternalScorerSession>) -> Result<Self> {
        let first = sessions
            .first()
            .ok_or_else(|| Error::InvalidConfig("adapter pool needs at least one session".into()))?;
        let (channels, images, metric) = (first.channels, first.images, first.metric);
        if let Some(s) = sessions
            .iter()
            .find(|s| (s.channels, s.images, s.metric) != (channels, images, metric))
        {
            return Err(Error::Protocol(format!(
                "adapters disagree: ({channels}, {images}, {metric}) vs ({}, {}, {})",
                s.channels, s.images, s.metric
            )));
        }
        Ok(ExternalScorerPool {
            idle: Mutex::new(sessions),
            returned: Condvar::new(),
            channels,
            images,
            metric,
        })
    }

    pub fn close(self) -> Result<()> {
        let sessions = self.idle.into_inner().unwrap_or_else(|p| p.into_inner());
        sessions.into_iter().try_for_each(ExternalScorerSession::close)
    }
}

impl Scorer for ExternalScorerPool {
    fn channels(&self) -> usize {
        self.channels
    }

    fn images(&self) -> usize {
        self.images
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        let mut session = {
            let mut idle = self.idle.lock().unwrap_or_else(|p| p.into_inner());
            loop {
                match idle.pop() {
                    Some(s) => break s,
                    None => idle = self.returned.wait(idle).unwrap_or_else(|p| p.into_inner()),
                }
            }
        };
        let out = session.score(map, images);
        self.idle.lock().unwrap_or_else(|p| p.into_inner()).push(session);
        self.returned.notify_one();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{LineWriter, PipeReader, PipeWriter};

    /// Runs `adapter` on a thread, wired to a session through OS pipes.
    fn fake(
        timeout: Duration,
        adapter: impl FnOnce(BufReader<PipeReader>, LineWriter<PipeWriter>) + Send + 'static,
    ) -> Result<ExternalScorerSession> {
        let (engine_rx, adapter_tx) = io::pipe().unwrap();
        let (adapter_rx, engine_tx) = io::pipe().unwrap();
        thread::spawn(move || adapter(BufReader::new(adapter_rx), LineWriter::new(adapter_tx)));
        ExternalScorerSession::connect(engine_rx, engine_tx, timeout)
    }

    fn next(r: &mut BufReader<PipeReader>) -> Option<EngineMessage> {
        let mut line = String::new();
        (r.read_line(&mut line).ok()? > 0).then(|| serde_json::from_str(&line).unwrap())
    }

    fn say(w: &mut LineWriter<PipeWriter>, s: &str) {
        let _ = writeln!(w, "{s}");
    }

    const READY: &str = r#"{"type":"ready","channels":3,"images":2,"metric":"miou"}"#;

    /// Well-behaved adapter: score = number of identity entries / C.
    fn honest(mut r: BufReader<PipeReader>, mut w: LineWriter<PipeWriter>) {
        assert_eq!(next(&mut r), Some(EngineMessage::Hello { version: 1 }));
        say(&mut w, READY);
        while let Some(msg) = next(&mut r) {
            match msg {
                EngineMessage::Score { id, map, images } => {
                    if map.iter().any(|&m| !(-1..3).contains(&m)) {
                        say(&mut w, &format!(r#"{{"type":"error","id":{id},"message":"bad map"}}"#));
                        continue;
                    }
                    let v = map.iter().enumerate().filter(|(c, &m)| m == *c as i64).count() as f64 / 3.0;
                    let n = images.map_or(2, |i| i.len());
                    let reply = AdapterMessage::Result {
                        id,
                        aggregate: v,
                        per_image: vec![v; n],
                    };
                    say(&mut w, &serde_json::to_string(&reply).unwrap());
                }
                EngineMessage::Bye => break,
                EngineMessage::Hello { .. } => panic!("second hello"),
            }
        }
    }

    #[test]
    fn handshake_and_scoring() {
        let mut s = fake(Duration::from_secs(5), honest).unwrap();
        assert_eq!((s.channels(), s.images(), s.metric()), (3, 2, Metric::MeanIou));
        let id = ChannelMap::identity(3);
        let a = s.score(&id, None).unwrap();
        assert_eq!(a.aggregate, 1.0);
        assert_eq!(a, s.score(&id, None).unwrap());
        let sub = s
            .score(&ChannelMap::from_wire(&[1, 1, -1], 3).unwrap(), Some(&[1]))
            .unwrap();
        assert!((sub.aggregate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(sub.per_image.len(), 1);
        assert!(matches!(
            s.score(&ChannelMap::identity(4), None),
            Err(Error::LengthMismatch { .. })
        ));
        s.close().unwrap();
    }

    #[test]
    fn error_reply_is_protocol_violation() {
        // The engine never builds an out-of-range map, so feed the error path directly.
        let mut s = fake(Duration::from_secs(5), |mut r, mut w| {
            next(&mut r);
            say(&mut w, READY);
            if let Some(EngineMessage::Score { id, .. }) = next(&mut r) {
                say(
                    &mut w,
                    &format!(r#"{{"type":"error","id":{id},"message":"map entry 9 >= C"}}"#),
                );
            }
            next(&mut r);
        })
        .unwrap();
        let err = s.score(&ChannelMap::identity(3), None).unwrap_err();
        assert!(matches!(err, Error::Protocol(ref m) if m.contains("map entry 9")));
    }

    #[test]
    fn mismatched_id() {
        let mut s = fake(Duration::from_secs(5), |mut r, mut w| {
            next(&mut r);
            say(&mut w, READY);
            next(&mut r);
            say(
                &mut w,
                r#"{"type":"result","id":99,"aggregate":0.5,"per_image":[0.5,0.5]}"#,
            );
            next(&mut r);
        })
        .unwrap();
        assert!(matches!(
            s.score(&ChannelMap::identity(3), None),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn garbage_and_wrong_type() {
        let mut s = fake(Duration::from_secs(5), |mut r, mut w| {
            next(&mut r);
            say(&mut w, READY);
            next(&mut r);
            say(&mut w, "this is not json");
            next(&mut r);
            say(&mut w, READY);
            next(&mut r);
            say(&mut w, r#"{"type":"result","id":3,"aggregate":0.5,"per_image":[0.5]}"#);
            next(&mut r);
        })
        .unwrap();
        let id = ChannelMap::identity(3);
        assert!(matches!(s.score(&id, None), Err(Error::Protocol(_))));
        assert!(matches!(s.score(&id, None), Err(Error::Protocol(_))));
        // wrong per-image length
        assert!(matches!(s.score(&id, None), Err(Error::Protocol(_))));
    }

    #[test]
    fn bad_handshake() {
        let err = fake(Duration::from_secs(5), |mut r, mut w| {
            next(&mut r);
            say(&mut w, r#"{"type":"result","id":1,"aggregate":0.0,"per_image":[]}"#);
        })
        .err()
        .unwrap();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn eof_is_crash() {
        let mut s = fake(Duration::from_secs(5), |mut r, mut w| {
            next(&mut r);
            say(&mut w, READY);
            next(&mut r);
        })
        .unwrap();
        assert!(matches!(
            s.score(&ChannelMap::identity(3), None),
            Err(Error::AdapterCrashed(_))
        ));
    }

    #[test]
    fn silence_times_out() {
        let (hold_tx, hold_rx) = mpsc::channel::<()>();
        let mut s = fake(Duration::from_millis(200), move |mut r, mut w| {
            next(&mut r);
            say(&mut w, READY);
            next(&mut r);
            let _ = hold_rx.recv();
        })
        .unwrap();
        let start = Instant::now();
        assert!(matches!(
            s.score(&ChannelMap::identity(3), None),
            Err(Error::Timeout(_))
        ));
        assert!(start.elapsed() < Duration::from_secs(5));
        drop(hold_tx);
    }

    #[test]
    fn spawned_shell_adapter() {
        // A minimal adapter written in shell: ready, then one fixed result.
        let script = r#"read hello; echo '{"type":"ready","channels":2,"images":1,"metric":"acc"}'; read req; echo '{"type":"result","id":1,"aggregate":1.0,"per_image":[1.0]}'; read bye"#;
        let mut s = ExternalScorerSession::spawn(script, Duration::from_secs(10)).unwrap();
        assert_eq!(s.metric(), Metric::Accuracy);
        assert_eq!(s.score(&ChannelMap::identity(2), None).unwrap().aggregate, 1.0);
        s.close().unwrap();

        assert!(ExternalScorerSession::spawn("exit 3", Duration::from_secs(10)).is_err());
    }

    #[test]
    fn pool_serves_concurrent_requests() {
        let sessions = (0..2).map(|_| fake(Duration::from_secs(5), honest).unwrap()).collect();
        let pool = ExternalScorerPool::from_sessions(sessions).unwrap();
        thread::scope(|scope| {
            for _ in 0..4 {
                scope.spawn(|| {
                    for _ in 0..10 {
                        assert_eq!(pool.score(&ChannelMap::identity(3), None).unwrap().aggregate, 1.0);
                    }
                });
            }
        });
        pool.close().unwrap();
    }
}
