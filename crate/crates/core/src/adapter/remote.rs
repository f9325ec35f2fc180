//! TCP transport: the driver end ([`RemoteSession`]) and a SUT end
//! ([`serve_connection`]) that hosts any [`StreamingSystem`] behind the
//! protocol.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use super::wire::{self, Frame, WireError, PROTOCOL_VERSION};
use super::{
    AdapterError, DriverSink, EventSource, LaunchContext, OutputRecord, OutputSink, ShutdownMode, SourcePoll,
    StreamingSystem, SutReport,
};
use crate::clock::Clock;
use crate::model::Event;
use crate::pacing::CancelToken;
use crate::queue::{QueueError, QueueHandle};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_PULL: usize = 1 << 16;

type Writer = Arc<Mutex<TcpStream>>;

fn send(writer: &Writer, frame: &Frame) -> std::io::Result<()> {
    let mut buf = Vec::new();
    wire::encode(frame, &mut buf);
    writer.lock().unwrap_or_else(|e| e.into_inner()).write_all(&buf)
}

/// Driver end of a remote SUT connection.
pub struct RemoteSession {
    stream: TcpStream,
    writer: Writer,
    closing: Arc<AtomicBool>,
    reader: Option<JoinHandle<Result<SutReport, AdapterError>>>,
}

impl RemoteSession {
    pub fn connect(
        addr: &str,
        queues: &[QueueHandle],
        clock: &Clock,
        sink: DriverSink,
        dropped: Arc<AtomicBool>,
    ) -> Result<RemoteSession, AdapterError> {
        let refused = |source| AdapterError::ConnectionRefused { addr: addr.to_string(), source };
        let target = addr
            .to_socket_addrs()
            .map_err(refused)?
            .next()
            .ok_or_else(|| refused(std::io::Error::new(std::io::ErrorKind::NotFound, "address did not resolve")))?;
        let stream = TcpStream::connect_timeout(&target, CONNECT_TIMEOUT).map_err(refused)?;
        stream.set_nodelay(true).map_err(refused)?;
        let writer: Writer = Arc::new(Mutex::new(stream.try_clone().map_err(refused)?));

        let ours = queues.len() as u16;
        send(
            &writer,
            &Frame::Hello { version: PROTOCOL_VERSION, sources: ours, epoch_unix_nanos: clock.unix_epoch_nanos().unwrap_or(0) },
        )
        .map_err(WireError::from)?;
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).map_err(WireError::from)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(WireError::from)?);
        match wire::read_frame(&mut reader)? {
            Frame::Hello { version, .. } if version != PROTOCOL_VERSION => {
                return Err(AdapterError::HandshakeVersionMismatch { ours: PROTOCOL_VERSION, theirs: version });
            }
            Frame::Hello { sources, .. } if sources != ours => {
                return Err(AdapterError::SourceCountMismatch { ours, theirs: sources });
            }
            Frame::Hello { .. } => {}
            other => return Err(AdapterError::SutFailed(format!("expected HELLO, got {other:?}"))),
        }
        stream.set_read_timeout(None).map_err(WireError::from)?;

        let closing = Arc::new(AtomicBool::new(false));
        let reader = {
            let (writer, closing, queues) = (Arc::clone(&writer), Arc::clone(&closing), queues.to_vec());
            let shutdown_handle = stream.try_clone().map_err(WireError::from)?;
            thread::Builder::new()
                .name("remote-driver".into())
                .spawn(move || {
                    let result = serve_driver_side(&mut reader, &writer, &queues, &sink);
                    let _ = shutdown_handle.shutdown(Shutdown::Both);
                    match result {
                        Ok(report) => Ok(report),
                        Err(_) if closing.load(Ordering::Acquire) => Ok(SutReport::default()),
                        Err(e) => {
                            log::warn!("remote SUT connection lost: {e}");
                            dropped.store(true, Ordering::Release);
                            for q in &queues {
                                q.mark_dropped();
                            }
                            Err(AdapterError::ConnectionDropped)
                        }
                    }
                })
                .expect("spawn remote reader")
        };
        Ok(RemoteSession { stream, writer, closing, reader: Some(reader) })
    }

    pub fn is_finished(&self) -> bool {
        self.reader.as_ref().is_none_or(JoinHandle::is_finished)
    }

    pub fn shutdown(&mut self, mode: ShutdownMode, timeout: Duration) -> Result<SutReport, AdapterError> {
        let Some(reader) = self.reader.take() else {
            return Err(AdapterError::SutFailed("session already shut down".into()));
        };
        self.closing.store(true, Ordering::Release);
        let wait = |limit: Duration| {
            let deadline = Instant::now() + limit;
            while !reader.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(2));
            }
        };
        if mode == ShutdownMode::Drain {
            wait(timeout);
        }
        if !reader.is_finished() {
            let _ = send(&self.writer, &Frame::Bye);
            wait(Duration::from_secs(2));
        }
        if !reader.is_finished() {
            let _ = self.stream.shutdown(Shutdown::Both);
        }
        reader.join().unwrap_or_else(|_| Err(AdapterError::SutFailed("remote reader panicked".into())))
    }
}

/// Answers PULLs and collects OUTPUTs until the SUT says BYE.
fn serve_driver_side(
    reader: &mut BufReader<TcpStream>,
    writer: &Writer,
    queues: &[QueueHandle],
    sink: &DriverSink,
) -> Result<SutReport, AdapterError> {
    let mut report = SutReport::default();
    loop {
        match wire::read_frame(reader)? {
            Frame::Pull { source, max } => {
                let queue = queues
                    .get(source as usize)
                    .ok_or_else(|| AdapterError::SutFailed(format!("PULL for unknown source {source}")))?;
                let reply = match queue.take_batch((max as usize).min(MAX_PULL)) {
                    Ok(events) => {
                        report.events_processed += events.len() as u64;
                        Frame::Events { source, events }
                    }
                    Err(QueueError::Closed) => Frame::Eos { source },
                    Err(e) => return Err(AdapterError::SutFailed(e.to_string())),
                };
                send(writer, &reply).map_err(WireError::from)?;
            }
            Frame::Output(record) => {
                report.outputs_emitted += 1;
                sink.emit(record)?;
            }
            Frame::Bye => return Ok(report),
            other => return Err(AdapterError::SutFailed(format!("unexpected frame from SUT: {other:?}"))),
        }
    }
}

enum Inbound {
    Events(Vec<Event>),
    Eos,
}

/// SUT-side view of one driver queue.
struct RemoteSource {
    id: u16,
    writer: Writer,
    rx: Receiver<Inbound>,
    in_flight: bool,
    finished: bool,
}

impl EventSource for RemoteSource {
    fn poll(&mut self, max: usize) -> SourcePoll {
        if self.finished {
            return SourcePoll::Finished;
        }
        if !self.in_flight {
            let max = max.min(MAX_PULL) as u32;
            if let Err(e) = send(&self.writer, &Frame::Pull { source: self.id, max }) {
                return SourcePoll::Failed(e.to_string());
            }
            self.in_flight = true;
        }
        match self.rx.recv_timeout(Duration::from_millis(1)) {
            Ok(Inbound::Events(events)) => {
                self.in_flight = false;
                if events.is_empty() {
                    SourcePoll::Idle
                } else {
                    SourcePoll::Events(events)
                }
            }
            Ok(Inbound::Eos) => {
                self.finished = true;
                SourcePoll::Finished
            }
            Err(RecvTimeoutError::Timeout) => SourcePoll::Idle,
            Err(RecvTimeoutError::Disconnected) => SourcePoll::Failed("connection to driver closed".into()),
        }
    }
}

struct RemoteSink {
    writer: Writer,
    emitted: AtomicU64,
}

impl OutputSink for RemoteSink {
    fn emit(&self, mut record: OutputRecord) -> Result<(), AdapterError> {
        record.emission_time = None;
        send(&self.writer, &Frame::Output(record)).map_err(|_| AdapterError::ConnectionDropped)?;
        self.emitted.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

/// Runs `system` for one driver connection, until the driver's queues are
/// exhausted or the driver says BYE.
pub fn serve_connection(stream: TcpStream, system: &dyn StreamingSystem) -> Result<SutReport, AdapterError> {
    stream.set_nodelay(true).map_err(WireError::from)?;
    let mut reader = BufReader::new(stream.try_clone().map_err(WireError::from)?);
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone().map_err(WireError::from)?));
    let (sources, epoch) = match wire::read_frame(&mut reader)? {
        Frame::Hello { version, sources, epoch_unix_nanos } => {
            send(&writer, &Frame::Hello { version: PROTOCOL_VERSION, sources, epoch_unix_nanos }).map_err(WireError::from)?;
            if version != PROTOCOL_VERSION {
                return Err(AdapterError::HandshakeVersionMismatch { ours: PROTOCOL_VERSION, theirs: version });
            }
            (sources, epoch_unix_nanos)
        }
        other => return Err(AdapterError::SutFailed(format!("expected HELLO, got {other:?}"))),
    };
    let clock = if epoch == 0 { Clock::system() } else { Clock::from_unix_epoch_nanos(epoch) };
    let cancel = CancelToken::new();
    let (txs, rxs): (Vec<Sender<Inbound>>, Vec<Receiver<Inbound>>) =
        (0..sources).map(|_| crossbeam_channel::bounded(4)).unzip();

    let inbound = {
        let cancel = cancel.clone();
        thread::Builder::new()
            .name("remote-sut-reader".into())
            .spawn(move || {
                loop {
                    let (source, msg) = match wire::read_frame(&mut reader) {
                        Ok(Frame::Events { source, events }) => (source, Inbound::Events(events)),
                        Ok(Frame::Eos { source }) => (source, Inbound::Eos),
                        Ok(Frame::Bye) | Err(_) => break,
                        Ok(other) => {
                            log::warn!("ignoring unexpected frame from driver: {other:?}");
                            continue;
                        }
                    };
                    if let Some(tx) = txs.get(source as usize) {
                        let _ = tx.send(msg);
                    }
                }
                cancel.cancel();
            })
            .expect("spawn remote SUT reader")
    };

    let sink = Arc::new(RemoteSink { writer: Arc::clone(&writer), emitted: AtomicU64::new(0) });
    let ctx = LaunchContext {
        clock,
        sources: rxs
            .into_iter()
            .enumerate()
            .map(|(i, rx)| {
                Box::new(RemoteSource { id: i as u16, writer: Arc::clone(&writer), rx, in_flight: false, finished: false })
                    as Box<dyn EventSource>
            })
            .collect(),
        sink: Arc::clone(&sink) as Arc<dyn OutputSink>,
        cancel: cancel.clone(),
    };
    let result = system
        .launch(ctx)?
        .join()
        .unwrap_or_else(|_| Err(AdapterError::SutFailed("SUT thread panicked".into())));
    let _ = send(&writer, &Frame::Bye);
    let _ = stream.shutdown(Shutdown::Write);
    // The driver closes its end once it has seen BYE.
    let _ = inbound.join();
    result
}

/// Accepts connections on `listener` forever, one run at a time.
pub fn serve(listener: TcpListener, system: &dyn StreamingSystem) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let peer = stream.peer_addr().ok();
        match serve_connection(stream, system) {
            Ok(report) => log::info!("run from {peer:?} finished: {} events", report.events_processed),
            Err(e) => log::warn!("run from {peer:?} failed: {e}"),
        }
    }
    Ok(())
}

/// A misbehaving SUT for exercising failure handling: it completes the
/// handshake, pulls events for `after`, then closes the socket without BYE.
pub fn spawn_dropping_stub(listener: TcpListener, after: Duration) -> JoinHandle<()> {
    thread::spawn(move || {
        let Ok((stream, _)) = listener.accept() else { return };
        let mut reader = BufReader::new(match stream.try_clone() {
            Ok(s) => s,
            Err(_) => return,
        });
        let writer: Writer = Arc::new(Mutex::new(match stream.try_clone() {
            Ok(s) => s,
            Err(_) => return,
        }));
        let Ok(Frame::Hello { sources, epoch_unix_nanos, .. }) = wire::read_frame(&mut reader) else { return };
        if send(&writer, &Frame::Hello { version: PROTOCOL_VERSION, sources, epoch_unix_nanos }).is_err() {
            return;
        }
        let deadline = Instant::now() + after;
        'pulling: while Instant::now() < deadline {
            for source in 0..sources {
                if send(&writer, &Frame::Pull { source, max: 1024 }).is_err() {
                    break 'pulling;
                }
                if wire::read_frame(&mut reader).is_err() {
                    break 'pulling;
                }
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = stream.shutdown(Shutdown::Both);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{connect, Endpoint, OutputPayload, SutDescriptor};
    use crate::clock::Timestamp;
    use crate::model::Price;
    use crate::queue::{QueueLimits, QueueState};

    /// Emits one aggregation record per event, with ingest time stamped on
    /// its own (reconstructed) clock.
    struct Forward;

    impl StreamingSystem for Forward {
        fn name(&self) -> &str {
            "forward"
        }

        fn launch(&self, mut ctx: LaunchContext) -> Result<super::super::SutRun, AdapterError> {
            Ok(thread::spawn(move || {
                let mut report = SutReport::default();
                let mut live = vec![true; ctx.sources.len()];
                while live.iter().any(|&l| l) && !ctx.cancel.is_cancelled() {
                    for (i, source) in ctx.sources.iter_mut().enumerate() {
                        if !live[i] {
                            continue;
                        }
                        match source.poll(100) {
                            SourcePoll::Events(batch) => {
                                let ingest = ctx.clock.now();
                                for e in batch {
                                    report.events_processed += 1;
                                    ctx.sink.emit(OutputRecord {
                                        payload: OutputPayload::Agg {
                                            gem_pack_id: e.gem_pack_id,
                                            sum_price: e.price,
                                            count: 1,
                                            window_start: 0,
                                        },
                                        max_event_time: e.event_time,
                                        max_ingest_time: ingest,
                                        emission_time: None,
                                    })?;
                                }
                            }
                            SourcePoll::Idle => {}
                            SourcePoll::Finished => live[i] = false,
                            SourcePoll::Failed(e) => return Err(AdapterError::SutFailed(e)),
                        }
                    }
                }
                Ok(report)
            }))
        }
    }

    fn filled_queue(id: usize, n: u64, clock: &Clock) -> QueueHandle {
        let q = QueueHandle::new(id, QueueLimits::default());
        let t = clock.now();
        q.offer_batch((0..n).map(|i| Event::purchase(i, i % 7, Price::from_cents(10), t, i))).unwrap();
        q
    }

    #[test]
    fn drained_run_over_tcp() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            serve_connection(stream, &Forward).unwrap()
        });

        let clock = Clock::system();
        let queues = vec![filled_queue(0, 500, &clock), filled_queue(1, 300, &clock)];
        let (sink, rx) = DriverSink::new(clock.clone());
        let sut = SutDescriptor { name: "forward".into(), endpoint: Endpoint::Remote(addr) };
        let mut session = connect(&sut, &queues, &clock, sink).unwrap();
        thread::sleep(Duration::from_millis(20));
        queues.iter().for_each(QueueHandle::close);
        let report = session.shutdown(ShutdownMode::Drain, Duration::from_secs(10)).unwrap();
        assert_eq!(report.events_processed, 800);
        assert_eq!(server.join().unwrap().events_processed, 800);

        let out: Vec<OutputRecord> = rx.try_iter().collect();
        assert_eq!(out.len(), 800);
        for r in &out {
            let emitted = r.emission_time.unwrap();
            assert!(r.max_ingest_time >= r.max_event_time);
            // Clocks are reconstructed from the Unix epoch; allow a little skew.
            assert!(emitted.as_nanos() + 5_000_000 >= r.max_ingest_time.as_nanos());
        }
        assert!(!session.is_dropped());
    }

    #[test]
    fn refused_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let clock = Clock::system();
        let (sink, _rx) = DriverSink::new(clock.clone());
        let sut = SutDescriptor { name: "none".into(), endpoint: Endpoint::Remote(addr) };
        let q = QueueHandle::new(0, QueueLimits::default());
        assert!(matches!(connect(&sut, &[q], &clock, sink), Err(AdapterError::ConnectionRefused { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let _ = wire::read_frame(&mut reader).unwrap();
            let mut w = stream;
            wire::write_frame(&mut w, &Frame::Hello { version: PROTOCOL_VERSION + 1, sources: 1, epoch_unix_nanos: 0 }).unwrap();
        });
        let clock = Clock::system();
        let (sink, _rx) = DriverSink::new(clock.clone());
        let sut = SutDescriptor { name: "future".into(), endpoint: Endpoint::Remote(addr) };
        let q = QueueHandle::new(0, QueueLimits::default());
        match connect(&sut, &[q], &clock, sink) {
            Err(AdapterError::HandshakeVersionMismatch { ours, theirs }) => assert_eq!((ours, theirs), (1, 2)),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn dropped_connection_marks_every_queue() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let stub = spawn_dropping_stub(listener, Duration::from_millis(50));
        let clock = Clock::system();
        let queues = vec![filled_queue(0, 10, &clock), filled_queue(1, 10, &clock)];
        let (sink, _rx) = DriverSink::new(clock.clone());
        let sut = SutDescriptor { name: "stub".into(), endpoint: Endpoint::Remote(addr) };
        let mut session = connect(&sut, &queues, &clock, sink).unwrap();
        stub.join().unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while !session.is_dropped() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(1));
        }
        assert!(session.is_dropped());
        assert!(queues.iter().all(|q| q.state() == QueueState::Dropped));
        assert!(matches!(queues[0].offer(Event::ad(1, 1, Timestamp::ZERO, 0)), Err(QueueError::Dropped)));
        assert!(matches!(session.shutdown(ShutdownMode::Cancel, Duration::ZERO), Err(AdapterError::ConnectionDropped)));
    }
}
