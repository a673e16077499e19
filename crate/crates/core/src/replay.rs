//! Scenario replay server.
//!
//! A [`PlaybackSession`] walks an installed scenario one snapshot at a time
//! and emits a [`TapStreamFrame`] per subscribed link. In virtual mode the
//! session advances as fast as its consumer pulls frames; in paced mode each
//! snapshot is released on the wall-clock schedule.
//!
//! [`ReplayServer`] runs a session on its own thread with a command queue and
//! per-subscriber bounded queues, and can serve frames over TCP using a
//! `u32 length | payload` framing.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::engine::{ChannelEmulator, EngineError, IqChunk};
use crate::format::{decode_link, decode_tap_line, encode_link, encode_tap_line, load_scenario, Cursor, FormatError};
use crate::scenario::{LinkId, Scenario, TapLine, ValidationReport};

/// Largest frame payload accepted from the wire.
pub const MAX_FRAME_LEN: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad scenario file: {0}")]
    Format(FormatError),
    #[error("scenario fails validation:\n{0}")]
    Validation(ValidationReport),
    #[error("seek to {target} ms beyond duration {duration_ms} ms")]
    SeekOutOfRange { target: u32, duration_ms: u32 },
    #[error("bad link filter {0:?}")]
    BadFilter(String),
    #[error("bad frame: {0}")]
    BadFrame(String),
    #[error("snapshot period is not a whole number of samples")]
    NonIntegralSnapshot,
    #[error("input stream starts at {start}, not on a snapshot boundary")]
    UnalignedInput { start: u64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("replay server stopped")]
    ServerGone,
}

impl From<FormatError> for ReplayError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(io) => ReplayError::Io(io),
            FormatError::Invalid(r) => ReplayError::Validation(r),
            other => ReplayError::Format(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaybackMode {
    Virtual,
    Paced,
}

impl FromStr for PlaybackMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "virtual" => Ok(Self::Virtual),
            "paced" => Ok(Self::Paced),
            _ => Err(format!("unknown mode {s:?}, expected virtual or paced")),
        }
    }
}

/// One tap-line update for one link.
#[derive(Debug, Clone, PartialEq)]
pub struct TapStreamFrame {
    pub link: LinkId,
    pub effective_ms: u32,
    pub tap_line: TapLine,
    pub sequence_no: u64,
}

impl TapStreamFrame {
    /// `sequence_no u64 | effective_ms u32 | tx u16 | rx u16 | tx_ant u8 |
    /// rx_ant u8 | tap_count u8 | taps`, little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 + 6 + 1 + self.tap_line.len() * 10);
        out.extend_from_slice(&self.sequence_no.to_le_bytes());
        out.extend_from_slice(&self.effective_ms.to_le_bytes());
        encode_link(&self.link, &mut out);
        encode_tap_line(&self.tap_line, &mut out);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ReplayError> {
        let bad = |e: FormatError| ReplayError::BadFrame(e.to_string());
        let mut cur = Cursor::new(payload);
        let sequence_no = cur.u64().map_err(bad)?;
        let effective_ms = cur.u32().map_err(bad)?;
        let link = decode_link(&mut cur).map_err(bad)?;
        let raw = decode_tap_line(&mut cur).map_err(bad)?;
        if cur.remaining() != 0 {
            return Err(ReplayError::BadFrame(format!("{} trailing bytes", cur.remaining())));
        }
        let tap_line = TapLine::new(raw.taps().to_vec()).map_err(|e| ReplayError::BadFrame(e.to_string()))?;
        Ok(Self {
            link,
            effective_ms,
            tap_line,
            sequence_no,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let payload = self.encode();
        w.write_all(&(payload.len() as u32).to_le_bytes())?;
        w.write_all(&payload)
    }

    /// Reads one length-prefixed frame; `Ok(None)` on clean end of stream.
    pub fn read_from(mut r: impl Read) -> Result<Option<Self>, ReplayError> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME_LEN {
            return Err(ReplayError::BadFrame(format!("frame length {len}")));
        }
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Self::decode(&payload).map(Some)
    }
}

/// Which links a subscriber receives.
///
/// Text form: `all`, or comma-separated `tx:rx` / `tx:rx:tx_ant:rx_ant`
/// patterns where any field may be `*`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LinkFilter {
    patterns: Vec<[Option<u16>; 4]>,
}

impl LinkFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only(links: &[LinkId]) -> Self {
        Self {
            patterns: links
                .iter()
                .map(|l| {
                    [
                        Some(l.tx_node),
                        Some(l.rx_node),
                        Some(l.tx_antenna as u16),
                        Some(l.rx_antenna as u16),
                    ]
                })
                .collect(),
        }
    }

    pub fn matches(&self, l: &LinkId) -> bool {
        if self.patterns.is_empty() {
            return true;
        }
        let fields = [l.tx_node, l.rx_node, l.tx_antenna as u16, l.rx_antenna as u16];
        self.patterns
            .iter()
            .any(|p| p.iter().zip(fields).all(|(want, got)| want.is_none_or(|w| w == got)))
    }
}

impl FromStr for LinkFilter {
    type Err = ReplayError;
    fn from_str(s: &str) -> Result<Self, ReplayError> {
        let s = s.trim();
        if s.is_empty() || s == "all" || s == "*" {
            return Ok(Self::all());
        }
        let mut patterns = Vec::new();
        for part in s.split(',') {
            let fields: Vec<&str> = part.trim().split(':').collect();
            if fields.len() != 2 && fields.len() != 4 {
                return Err(ReplayError::BadFilter(part.to_string()));
            }
            let mut p = [None; 4];
            if fields.len() == 2 {
                p[2] = Some(0);
                p[3] = Some(0);
            }
            for (slot, f) in p.iter_mut().zip(&fields) {
                *slot = match *f {
                    "*" => None,
                    v => Some(v.parse().map_err(|_| ReplayError::BadFilter(part.to_string()))?),
                };
            }
            patterns.push(p);
        }
        Ok(Self { patterns })
    }
}

/// Deterministic playback state machine over a scenario.
#[derive(Debug, Clone)]
pub struct PlaybackSession {
    scenario: Arc<Scenario>,
    mode: PlaybackMode,
    looping: bool,
    position_ms: u32,
    playing: bool,
    filter: LinkFilter,
    links: Vec<(usize, LinkId)>,
    next_seq: u64,
}

impl PlaybackSession {
    pub fn new(scenario: Arc<Scenario>, mode: PlaybackMode) -> Self {
        let mut s = Self {
            scenario,
            mode,
            looping: false,
            position_ms: 0,
            playing: false,
            filter: LinkFilter::all(),
            links: Vec::new(),
            next_seq: 0,
        };
        s.set_filter(LinkFilter::all());
        s
    }

    /// Loads, decodes and validates an installed scenario file. The session
    /// starts stopped at position 0.
    pub fn load(path: impl AsRef<Path>, mode: PlaybackMode) -> Result<Self, ReplayError> {
        Ok(Self::new(Arc::new(load_scenario(path)?), mode))
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn mode(&self) -> PlaybackMode {
        self.mode
    }

    pub fn position_ms(&self) -> u32 {
        self.position_ms
    }

    pub fn is_playing(&self) -> bool {
        self.playing
    }

    pub fn set_loop(&mut self, looping: bool) {
        self.looping = looping;
    }

    pub fn set_filter(&mut self, filter: LinkFilter) {
        self.links = self
            .scenario
            .links()
            .enumerate()
            .filter(|(_, l)| filter.matches(l))
            .collect();
        self.filter = filter;
    }

    pub fn subscribed_links(&self) -> impl Iterator<Item = &LinkId> {
        self.links.iter().map(|(_, l)| l)
    }

    pub fn play(&mut self) {
        self.playing = true;
    }

    /// Idempotent.
    pub fn stop(&mut self) {
        self.playing = false;
    }

    pub fn seek(&mut self, ms: u32) -> Result<(), ReplayError> {
        if ms >= self.scenario.duration_ms() {
            return Err(ReplayError::SeekOutOfRange {
                target: ms,
                duration_ms: self.scenario.duration_ms(),
            });
        }
        self.position_ms = ms;
        Ok(())
    }

    /// Emits the frames of the current snapshot and advances. Returns `None`
    /// when stopped. Without looping, playback stops after the last snapshot
    /// and the position rewinds to 0.
    pub fn next_snapshot(&mut self) -> Option<Vec<TapStreamFrame>> {
        if !self.playing {
            return None;
        }
        let ms = self.position_ms;
        let lines = self.scenario.snapshot(ms);
        let frames = self
            .links
            .iter()
            .map(|&(i, link)| {
                let f = TapStreamFrame {
                    link,
                    effective_ms: ms,
                    tap_line: lines[i].clone(),
                    sequence_no: self.next_seq,
                };
                self.next_seq += 1;
                f
            })
            .collect();
        if ms + 1 < self.scenario.duration_ms() {
            self.position_ms = ms + 1;
        } else {
            self.position_ms = 0;
            if !self.looping {
                self.playing = false;
            }
        }
        Some(frames)
    }

    /// Frames in emission order until playback stops. Unbounded when looping.
    pub fn frames(&mut self) -> impl Iterator<Item = TapStreamFrame> + '_ {
        std::iter::from_fn(move || self.next_snapshot()).flatten()
    }

    fn snapshot_period(&self) -> Duration {
        Duration::from_micros(self.scenario.grid().snapshot_period_us as u64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DriveReport {
    pub snapshots: u64,
    pub frames: u64,
    pub samples: u64,
}

/// Streams per-port input through the emulator, applying the session's tap
/// updates at exact snapshot boundaries.
///
/// `inputs` holds one aligned stream per transmit port; its start index must
/// match the emulator position and lie on a snapshot boundary. The session is
/// started if stopped. Every snapshot's output for each receive port is
/// handed to `sink`. Paced mode sleeps to the wall-clock schedule before each
/// snapshot; the output is the same in either mode.
pub fn drive_engine(
    session: &mut PlaybackSession,
    emulator: &mut ChannelEmulator,
    inputs: &[IqChunk],
    mut sink: impl FnMut(usize, IqChunk),
) -> Result<DriveReport, ReplayError> {
    let grid = session.scenario.grid();
    if emulator.grid() != grid {
        return Err(EngineError::GridMismatch {
            engine: emulator.grid(),
            scenario: grid,
        }
        .into());
    }
    let sps = grid.samples_per_snapshot().ok_or(ReplayError::NonIntegralSnapshot)? as usize;
    let Some(first) = inputs.first() else {
        return Err(EngineError::NoContributions.into());
    };
    if first.start_index % sps as u64 != 0 {
        return Err(ReplayError::UnalignedInput {
            start: first.start_index,
        });
    }
    let total = first.len();
    let started = Instant::now();
    let period = session.snapshot_period();
    let mut report = DriveReport::default();
    session.play();
    let mut offset = 0usize;
    while offset < total {
        let Some(frames) = session.next_snapshot() else {
            break;
        };
        if session.mode == PlaybackMode::Paced {
            let due = started + period * report.snapshots as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let at = first.start_index + offset as u64;
        report.frames += frames.len() as u64;
        for f in frames {
            emulator.update_link(f.link, f.tap_line, at)?;
        }
        let len = sps.min(total - offset);
        let segment: Vec<IqChunk> = inputs.iter().map(|c| c.slice(offset, len)).collect();
        for (port, out) in emulator.process(&segment)?.into_iter().enumerate() {
            sink(port, out);
        }
        offset += len;
        report.snapshots += 1;
        report.samples += len as u64;
    }
    Ok(report)
}

/// Collects [`drive_engine`] output into one contiguous chunk per port.
pub fn drive_engine_collect(
    session: &mut PlaybackSession,
    emulator: &mut ChannelEmulator,
    inputs: &[IqChunk],
) -> Result<Vec<IqChunk>, ReplayError> {
    let rate = inputs.first().map(|c| c.sample_rate_hz).unwrap_or(0.0);
    let start = inputs.first().map(|c| c.start_index).unwrap_or(0);
    let mut outs: Vec<IqChunk> = (0..emulator.ports()).map(|_| IqChunk::new(Vec::new(), start, rate)).collect();
    drive_engine(session, emulator, inputs, |port, chunk| outs[port].samples.extend(chunk.samples))?;
    Ok(outs)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SubscriberStatus {
    pub id: u64,
    pub links: usize,
    pub delivered: u64,
    pub dropped: u64,
}

/// Status dump for a running server.
#[derive(Debug, Clone, Serialize)]
pub struct ReplayStatus {
    pub mode: PlaybackMode,
    pub playing: bool,
    pub looping: bool,
    pub position_ms: u32,
    pub duration_ms: u32,
    pub snapshots_emitted: u64,
    pub subscribers: Vec<SubscriberStatus>,
    pub drops: u64,
    /// 95th percentile of paced-mode emission lateness, in microseconds.
    pub lateness_p95_us: Option<f64>,
}

enum Command {
    Play,
    Stop,
    Seek(u32, mpsc::Sender<Result<(), ReplayError>>),
    Subscribe(LinkFilter, usize, mpsc::Sender<(u64, Receiver<TapStreamFrame>)>),
    Status(mpsc::Sender<ReplayStatus>),
    Shutdown,
}

struct Subscriber {
    session: PlaybackSession,
    tx: SyncSender<TapStreamFrame>,
    status: SubscriberStatus,
}

/// Handle to a playback thread.
pub struct ReplayServer {
    commands: mpsc::Sender<Command>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl ReplayServer {
    pub fn spawn(scenario: Arc<Scenario>, mode: PlaybackMode, looping: bool) -> Self {
        let (tx, rx) = mpsc::channel();
        let thread = std::thread::Builder::new()
            .name("replay".into())
            .spawn(move || playback_loop(scenario, mode, looping, rx))
            .expect("spawn replay thread");
        Self {
            commands: tx,
            thread: Mutex::new(Some(thread)),
        }
    }

    fn send(&self, c: Command) -> Result<(), ReplayError> {
        self.commands.send(c).map_err(|_| ReplayError::ServerGone)
    }

    /// Adds a subscriber whose sequence numbers start at 0. `capacity` bounds
    /// its queue.
    pub fn subscribe(&self, filter: LinkFilter, capacity: usize) -> Result<Receiver<TapStreamFrame>, ReplayError> {
        let (tx, rx) = mpsc::channel();
        self.send(Command::Subscribe(filter, capacity.max(1), tx))?;
        rx.recv().map(|(_, r)| r).map_err(|_| ReplayError::ServerGone)
    }

    pub fn play(&self) -> Result<(), ReplayError> {
        self.send(Command::Play)
    }

    pub fn stop(&self) -> Result<(), ReplayError> {
        self.send(Command::Stop)
    }

    pub fn seek(&self, ms: u32) -> Result<(), ReplayError> {
        let (tx, rx) = mpsc::channel();
        self.send(Command::Seek(ms, tx))?;
        rx.recv().map_err(|_| ReplayError::ServerGone)?
    }

    pub fn status(&self) -> Result<ReplayStatus, ReplayError> {
        let (tx, rx) = mpsc::channel();
        self.send(Command::Status(tx))?;
        rx.recv().map_err(|_| ReplayError::ServerGone)
    }

    pub fn shutdown(&self) {
        let _ = self.commands.send(Command::Shutdown);
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }

    /// Accepts tap-stream clients, each receiving frames for `filter` as
    /// length-prefixed frames. Runs until the listener fails or the server
    /// stops.
    pub fn serve_tcp(self: &Arc<Self>, listener: TcpListener, filter: LinkFilter, capacity: usize) -> Result<(), ReplayError> {
        for conn in listener.incoming() {
            let mut stream = conn?;
            stream.set_nodelay(true)?;
            let frames = self.subscribe(filter.clone(), capacity)?;
            std::thread::spawn(move || {
                for f in frames {
                    if f.write_to(&mut stream).is_err() {
                        break;
                    }
                }
            });
        }
        Ok(())
    }

    /// Writes a JSON status dump to every client that connects.
    pub fn serve_status(self: &Arc<Self>, listener: TcpListener) -> Result<(), ReplayError> {
        for conn in listener.incoming() {
            let mut stream = conn?;
            let status = self.status()?;
            let _ = stream.write_all(serde_json::to_string(&status).unwrap_or_default().as_bytes());
        }
        Ok(())
    }
}

impl Drop for ReplayServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn playback_loop(scenario: Arc<Scenario>, mode: PlaybackMode, looping: bool, commands: Receiver<Command>) {
    let mut clock = PlaybackSession::new(scenario.clone(), mode);
    clock.set_loop(looping);
    let period = clock.snapshot_period();
    let mut subs: Vec<Subscriber> = Vec::new();
    // Statuses of subscribers whose queue has been closed.
    let mut retired: Vec<SubscriberStatus> = Vec::new();
    let mut next_id = 0u64;
    let mut emitted = 0u64;
    let mut lateness: Vec<f64> = Vec::new();
    let mut paced_origin: Option<(Instant, u64)> = None;

    loop {
        // Drain commands; block only while stopped.
        loop {
            let cmd = if clock.is_playing() {
                match commands.try_recv() {
                    Ok(c) => c,
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => return,
                }
            } else {
                match commands.recv_timeout(Duration::from_millis(50)) {
                    Ok(c) => c,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            };
            match cmd {
                Command::Play => {
                    clock.play();
                    for s in &mut subs {
                        s.session.play();
                    }
                    paced_origin = Some((Instant::now(), emitted));
                }
                Command::Stop => {
                    clock.stop();
                    for s in &mut subs {
                        s.session.stop();
                    }
                }
                Command::Seek(ms, reply) => {
                    let r = clock.seek(ms);
                    if r.is_ok() {
                        for s in &mut subs {
                            let _ = s.session.seek(ms);
                        }
                        paced_origin = Some((Instant::now(), emitted));
                    }
                    let _ = reply.send(r);
                }
                Command::Subscribe(filter, capacity, reply) => {
                    let (tx, rx) = mpsc::sync_channel(capacity);
                    let mut session = clock.clone();
                    session.next_seq = 0;
                    session.set_filter(filter);
                    let id = next_id;
                    next_id += 1;
                    subs.push(Subscriber {
                        status: SubscriberStatus {
                            id,
                            links: session.links.len(),
                            ..Default::default()
                        },
                        session,
                        tx,
                    });
                    let _ = reply.send((id, rx));
                }
                Command::Status(reply) => {
                    let mut l = lateness.clone();
                    l.sort_by(f64::total_cmp);
                    let p95 = (!l.is_empty()).then(|| l[((l.len() - 1) as f64 * 0.95).round() as usize]);
                    let _ = reply.send(ReplayStatus {
                        mode,
                        playing: clock.is_playing(),
                        looping,
                        position_ms: clock.position_ms(),
                        duration_ms: scenario.duration_ms(),
                        snapshots_emitted: emitted,
                        drops: retired.iter().chain(subs.iter().map(|s| &s.status)).map(|s| s.dropped).sum(),
                        subscribers: retired.iter().chain(subs.iter().map(|s| &s.status)).cloned().collect(),
                        lateness_p95_us: p95,
                    });
                }
                Command::Shutdown => return,
            }
        }

        if !clock.is_playing() {
            continue;
        }
        if mode == PlaybackMode::Paced {
            let (origin, base) = paced_origin.unwrap_or((Instant::now(), emitted));
            let due = origin + period * (emitted - base) as u32;
            let now = Instant::now();
            if let Some(wait) = due.checked_duration_since(now) {
                std::thread::sleep(wait);
            } else {
                lateness.push(now.duration_since(due).as_secs_f64() * 1e6);
            }
        }
        clock.next_snapshot();
        emitted += 1;
        subs.retain_mut(|s| {
            let Some(frames) = s.session.next_snapshot() else {
                return true;
            };
            for f in frames {
                match mode {
                    PlaybackMode::Virtual => {
                        if s.tx.send(f).is_err() {
                            retired.push(s.status.clone());
                            return false;
                        }
                        s.status.delivered += 1;
                    }
                    PlaybackMode::Paced => match s.tx.try_send(f) {
                        Ok(()) => s.status.delivered += 1,
                        Err(TrySendError::Full(_)) => s.status.dropped += 1,
                        Err(TrySendError::Disconnected(_)) => {
                            retired.push(s.status.clone());
                            return false;
                        }
                    },
                }
            }
            true
        });
        if !clock.is_playing() {
            // End of a non-looping run: close subscriber queues.
            retired.extend(subs.drain(..).map(|s| s.status));
        }
    }
}

/// Tap-stream TCP client.
pub struct TapStreamClient {
    stream: std::io::BufReader<TcpStream>,
}

impl TapStreamClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ReplayError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream: std::io::BufReader::new(stream),
        })
    }

    pub fn next_frame(&mut self) -> Result<Option<TapStreamFrame>, ReplayError> {
        TapStreamFrame::read_from(&mut self.stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::GridSpec;
    use num_complex::Complex32;

    fn scenario(duration: u32) -> Arc<Scenario> {
        let mut s = Scenario::new(GridSpec::new(10, 8, 1), 2, 1, duration).unwrap();
        for t in 0..duration {
            s.set_tap_line(LinkId::siso(0, 1), t, TapLine::single(t as u16 % 8, Complex32::new(1.0, 0.0)))
                .unwrap();
        }
        Arc::new(s)
    }

    #[test]
    fn three_frames_for_three_ms() {
        let mut s = PlaybackSession::new(scenario(3), PlaybackMode::Virtual);
        s.set_filter(LinkFilter::only(&[LinkId::siso(0, 1)]));
        assert!(s.next_snapshot().is_none());
        s.play();
        let frames: Vec<_> = s.frames().collect();
        assert_eq!(frames.iter().map(|f| f.effective_ms).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(frames.iter().map(|f| f.sequence_no).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(!s.is_playing());
        assert_eq!(s.position_ms(), 0);
    }

    #[test]
    fn seek_then_play() {
        let mut s = PlaybackSession::new(scenario(3), PlaybackMode::Virtual);
        s.set_filter("0:1".parse().unwrap());
        s.seek(2).unwrap();
        s.play();
        let frames: Vec<_> = s.frames().collect();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].effective_ms, 2);
        assert!(matches!(s.seek(3), Err(ReplayError::SeekOutOfRange { .. })));
    }

    #[test]
    fn loop_wraps() {
        let mut s = PlaybackSession::new(scenario(3), PlaybackMode::Virtual);
        s.set_filter("0:1".parse().unwrap());
        s.set_loop(true);
        s.play();
        let ms: Vec<u32> = s.frames().take(7).map(|f| f.effective_ms).collect();
        assert_eq!(ms, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn stop_is_idempotent() {
        let mut s = PlaybackSession::new(scenario(3), PlaybackMode::Virtual);
        s.play();
        s.stop();
        s.stop();
        assert!(s.next_snapshot().is_none());
    }

    #[test]
    fn filters() {
        let f: LinkFilter = "0:1,1:*:*:*".parse().unwrap();
        assert!(f.matches(&LinkId::siso(0, 1)));
        assert!(!f.matches(&LinkId::new(0, 1, 1, 0)));
        assert!(f.matches(&LinkId::new(1, 5, 1, 0)));
        assert!(!f.matches(&LinkId::siso(2, 1)));
        assert!("all".parse::<LinkFilter>().unwrap().matches(&LinkId::siso(9, 3)));
        assert!("0:1:2".parse::<LinkFilter>().is_err());
        assert!("a:b".parse::<LinkFilter>().is_err());
    }

    #[test]
    fn frame_wire_round_trip() {
        let f = TapStreamFrame {
            link: LinkId::new(3, 1, 1, 0),
            effective_ms: 77,
            tap_line: TapLine::single(9, Complex32::new(0.25, -0.5)),
            sequence_no: 1 << 40,
        };
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_le_bytes());
        let back = TapStreamFrame::read_from(buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, f);
        assert!(TapStreamFrame::read_from(&[][..]).unwrap().is_none());
        assert!(TapStreamFrame::decode(&buf[4..buf.len() - 1]).is_err());
    }

    #[test]
    fn zeroed_second_millisecond() {
        let grid = GridSpec::new(10, 8, 1); // 100 samples per snapshot
        let mut s = Scenario::new(grid, 2, 1, 2).unwrap();
        s.set_tap_line(LinkId::siso(0, 1), 0, TapLine::single(2, Complex32::new(1.0, 0.0))).unwrap();
        let mut session = PlaybackSession::new(Arc::new(s), PlaybackMode::Virtual);
        let mut emu = ChannelEmulator::new(grid, 2, 1, 0).unwrap();
        let ones = IqChunk::new(vec![num_complex::Complex64::new(1.0, 0.0); 200], 0, grid.sample_rate_hz());
        let zeros = IqChunk::zeros(200, 0, grid.sample_rate_hz());
        let out = drive_engine_collect(&mut session, &mut emu, &[ones, zeros]).unwrap();
        assert!(out[1].samples[2..100].iter().all(|v| v.re == 1.0));
        assert!(out[1].samples[100..].iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn drive_rejects_grid_mismatch() {
        let mut session = PlaybackSession::new(scenario(2), PlaybackMode::Virtual);
        let mut emu = ChannelEmulator::new(GridSpec::default(), 2, 1, 0).unwrap();
        let x = IqChunk::zeros(10, 0, 1e8);
        assert!(matches!(
            drive_engine_collect(&mut session, &mut emu, &[x.clone(), x]),
            Err(ReplayError::Engine(EngineError::GridMismatch { .. }))
        ));
    }

    #[test]
    fn threaded_virtual_server() {
        let server = ReplayServer::spawn(scenario(5), PlaybackMode::Virtual, false);
        let rx = server.subscribe("0:1".parse().unwrap(), 1).unwrap();
        server.play().unwrap();
        let frames: Vec<_> = rx.iter().collect();
        assert_eq!(frames.iter().map(|f| f.effective_ms).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(frames.iter().map(|f| f.sequence_no).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let status = server.status().unwrap();
        assert_eq!(status.snapshots_emitted, 5);
        assert!(!status.playing);
        server.shutdown();
    }

    #[test]
    fn paced_server_drops_when_full() {
        let server = ReplayServer::spawn(scenario(50), PlaybackMode::Paced, false);
        let rx = server.subscribe(LinkFilter::all(), 1).unwrap();
        server.play().unwrap();
        std::thread::sleep(Duration::from_millis(120));
        let status = server.status().unwrap();
        assert!(status.drops > 0, "{status:?}");
        drop(rx);
        server.shutdown();
    }

    #[test]
    fn tcp_tap_stream() {
        let server = Arc::new(ReplayServer::spawn(scenario(4), PlaybackMode::Virtual, false));
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let s2 = server.clone();
        std::thread::spawn(move || s2.serve_tcp(listener, "0:1".parse().unwrap(), 8));
        let mut client = TapStreamClient::connect(addr).unwrap();
        // subscription happens on accept; wait for it before playing
        for _ in 0..100 {
            if !server.status().unwrap().subscribers.is_empty() {
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        server.play().unwrap();
        let mut got = Vec::new();
        while let Some(f) = client.next_frame().unwrap() {
            got.push(f.effective_ms);
        }
        assert_eq!(got, vec![0, 1, 2, 3]);
    }
}
