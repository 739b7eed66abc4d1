//! WebSocket service in front of one simulation thread.
//!
//! Sessions parse frames and push world commands onto a bounded queue. The
//! simulation thread is the only writer: it applies queued commands between
//! ticks in arrival order, numbers them, and replies to the sending session.
//! Telemetry fans out through one broadcast channel per decimation; a slow
//! session loses its oldest batches and never holds up a tick.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use limbkit::config::{Config, ConfigError};
use limbkit::driver::{CommandOutcome, Driver, RunManifest, WorldCommand, WorldSource};
use limbkit::sim::{SimError, SimEventKind, WorldSnapshot};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use crate::protocol::{
    AckBody, ClientMessage, ErrorBody, Event, ProgressBody, Request, ServerMessage, Subscription,
    TelemetryBatch, TelemetryBody,
};

/// Ticks run per loop pass when the clock is not paced.
const UNPACED_BATCH: u64 = 10;
/// Most ticks run in one pass while catching up with the wall clock.
const MAX_CATCH_UP: u64 = 50;
const SNAPSHOT_PUBLISH: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("simulation stopped: {0}")]
    Breach(SimError),
    #[error("simulation thread panicked")]
    Panicked,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Config(_) | ServiceError::Bind { .. } => "CONFIG_ERROR",
            ServiceError::Breach(_) | ServiceError::Panicked => "INVARIANT_BREACH",
        }
    }
}

type Reply = mpsc::UnboundedSender<ServerMessage>;

struct Job {
    id: Value,
    command: WorldCommand,
    reply: Reply,
}

type Hub = Mutex<BTreeMap<u64, broadcast::Sender<Arc<TelemetryBatch>>>>;

struct Shared {
    jobs: mpsc::Sender<Job>,
    hub: Hub,
    snapshot: watch::Receiver<Arc<WorldSnapshot>>,
    breach: watch::Receiver<Option<ErrorBody>>,
    token: Option<String>,
    tick: f64,
    telemetry_hz: f64,
    snapshot_hz: f64,
    client_buffer: usize,
}

impl Shared {
    fn subscribe(
        &self,
        rate_hz: f64,
    ) -> Result<Option<(Subscription, broadcast::Receiver<Arc<TelemetryBatch>>)>, ErrorBody> {
        if rate_hz == 0.0 {
            return Ok(None);
        }
        let max = 1.0 / self.tick;
        if !(rate_hz > 0.0 && rate_hz <= max * (1.0 + 1e-9)) {
            return Err(ErrorBody::new(
                "INVALID_REQUEST",
                format!("telemetry rate {rate_hz} Hz outside (0, {max}]"),
            ));
        }
        let every_ticks = ((1.0 / (rate_hz * self.tick)).round() as u64).max(1);
        let mut hub = self.hub.lock().expect("hub lock");
        let tx = hub
            .entry(every_ticks)
            .or_insert_with(|| broadcast::channel(self.client_buffer.max(1)).0);
        Ok(Some((
            Subscription {
                rate_hz,
                every_ticks,
            },
            tx.subscribe(),
        )))
    }
}

/// How the simulation thread ended.
pub enum SimExit {
    Stopped(Box<Driver>),
    Breach(SimError, Box<Driver>),
}

struct SimLoop {
    driver: Driver,
    jobs: mpsc::Receiver<Job>,
    shared: Arc<Shared>,
    snapshot: watch::Sender<Arc<WorldSnapshot>>,
    breach: watch::Sender<Option<ErrorBody>>,
    stop: Arc<AtomicBool>,
    realtime_factor: f64,
    seq: u64,
    ik_owners: BTreeMap<u64, (Value, Reply)>,
    sequence_owner: Option<(Value, Reply, String)>,
    gait_owner: Option<(Value, Reply)>,
}

fn send(reply: &Reply, id: &Value, event: Event) {
    // A closed session simply misses the message.
    let _ = reply.send(ServerMessage::new(id.clone(), event));
}

impl SimLoop {
    fn run(mut self) -> SimExit {
        let tick = self.driver.world().config().sim.tick;
        let wall_start = Instant::now();
        let step_start = self.driver.world().steps();
        let mut last_publish = Instant::now();
        loop {
            if self.stop.load(Ordering::Relaxed) {
                return SimExit::Stopped(Box::new(self.driver));
            }
            let mut handled = false;
            while let Ok(job) = self.jobs.try_recv() {
                self.handle(job);
                handled = true;
            }
            let due = if self.realtime_factor > 0.0 {
                let target =
                    (wall_start.elapsed().as_secs_f64() * self.realtime_factor / tick) as u64;
                (step_start + target)
                    .saturating_sub(self.driver.world().steps())
                    .min(MAX_CATCH_UP)
            } else {
                UNPACED_BATCH
            };
            for _ in 0..due {
                if let Err(e) = self.tick() {
                    let body = ErrorBody::new(e.code(), e.to_string());
                    self.publish();
                    let _ = self.breach.send(Some(body));
                    return SimExit::Breach(e, Box::new(self.driver));
                }
            }
            if handled || due > 0 && last_publish.elapsed() >= SNAPSHOT_PUBLISH {
                self.publish();
                last_publish = Instant::now();
            }
            if due == 0 && !handled {
                let wait = tick / self.realtime_factor;
                std::thread::sleep(Duration::from_secs_f64(wait.min(1e-3)));
            }
        }
    }

    fn publish(&self) {
        let _ = self.snapshot.send(Arc::new(self.driver.world().snapshot()));
    }

    fn handle(&mut self, job: Job) {
        let world = self.driver.world();
        let (step, time_s) = (world.steps(), world.time());
        let seq = (!job.command.is_read_only()).then(|| {
            self.seq += 1;
            self.seq
        });
        match self.driver.apply(&job.command) {
            Ok(outcome) => {
                match &outcome {
                    CommandOutcome::Ik { plan } => {
                        self.ik_owners
                            .insert(plan.goal, (job.id.clone(), job.reply.clone()));
                    }
                    CommandOutcome::SequenceStarted { script } => {
                        self.sequence_owner =
                            Some((job.id.clone(), job.reply.clone(), script.clone()));
                    }
                    _ if matches!(job.command, WorldCommand::Gait { .. }) => {
                        self.gait_owner = Some((job.id.clone(), job.reply.clone()));
                    }
                    _ => {}
                }
                let event = match outcome {
                    CommandOutcome::Snapshot { snapshot } => Event::Snapshot(snapshot),
                    outcome => Event::Ack(AckBody {
                        seq,
                        step,
                        time_s,
                        outcome,
                        subscription: None,
                    }),
                };
                send(&job.reply, &job.id, event);
            }
            Err(e) => send(
                &job.reply,
                &job.id,
                Event::Error(ErrorBody::new(e.code(), e.to_string())),
            ),
        }
    }

    fn tick(&mut self) -> Result<(), SimError> {
        let report = self.driver.tick()?;
        if let Some((id, reply, script)) = &self.sequence_owner {
            for event in report.sequence_events {
                send(
                    reply,
                    id,
                    Event::SequenceEvent(ProgressBody::Sequence { event }),
                );
            }
            if let Some(result) = report.finished {
                let error = result
                    .err()
                    .map(|e| ErrorBody::new(e.code(), e.to_string()));
                let end = ProgressBody::SequenceEnd {
                    script: script.clone(),
                    ok: error.is_none(),
                    error,
                };
                send(reply, id, Event::SequenceEvent(end));
                self.sequence_owner = None;
            }
        }
        for event in self.driver.drain_events() {
            let owner = match &event.kind {
                SimEventKind::IkCompleted { goal, .. }
                | SimEventKind::IkTimedOut { goal, .. }
                | SimEventKind::IkAborted { goal, .. } => self.ik_owners.remove(goal),
                SimEventKind::GaitFinished { .. } => self.gait_owner.take(),
            };
            if let Some((id, reply)) = owner {
                send(
                    &reply,
                    &id,
                    Event::SequenceEvent(ProgressBody::World { event }),
                );
            }
        }
        let records = self.driver.drain_telemetry();
        if !records.is_empty() {
            let world = self.driver.world();
            let (step, time_s) = (world.steps(), world.time());
            let mut hub = self.shared.hub.lock().expect("hub lock");
            hub.retain(|_, tx| tx.receiver_count() > 0);
            for (every_ticks, tx) in hub.iter() {
                if step % every_ticks == 0 {
                    let batch = TelemetryBatch {
                        step,
                        time_s,
                        every_ticks: *every_ticks,
                        records: records.clone(),
                    };
                    let _ = tx.send(Arc::new(batch));
                }
            }
        }
        Ok(())
    }
}

/// A running service.
pub struct Service {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: Option<JoinHandle<SimExit>>,
    server_stop: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<()>,
    breach: watch::Receiver<Option<ErrorBody>>,
}

impl Service {
    /// Builds the world, binds the listener and starts the simulation thread.
    pub async fn start(config: &Config, source: WorldSource) -> Result<Service, ServiceError> {
        let driver = Driver::from_config(config, source)?;
        let svc = &config.service;
        if !(svc.telemetry_hz >= 0.0 && svc.snapshot_hz >= 0.0 && svc.realtime_factor >= 0.0) {
            return Err(ConfigError::Invalid("service rates must be non-negative".into()).into());
        }
        let listener = tokio::net::TcpListener::bind(&svc.bind)
            .await
            .map_err(|source| ServiceError::Bind {
                addr: svc.bind.clone(),
                source,
            })?;
        let addr = listener.local_addr().map_err(|source| ServiceError::Bind {
            addr: svc.bind.clone(),
            source,
        })?;

        let (jobs_tx, jobs_rx) = mpsc::channel(svc.queue_depth.max(1));
        let (snapshot_tx, snapshot_rx) = watch::channel(Arc::new(driver.world().snapshot()));
        let (breach_tx, breach_rx) = watch::channel(None);
        let shared = Arc::new(Shared {
            jobs: jobs_tx,
            hub: Mutex::new(BTreeMap::new()),
            snapshot: snapshot_rx,
            breach: breach_rx.clone(),
            token: svc.token.clone(),
            tick: driver.world().config().sim.tick,
            telemetry_hz: svc.telemetry_hz,
            snapshot_hz: svc.snapshot_hz,
            client_buffer: svc.client_buffer,
        });
        let stop = Arc::new(AtomicBool::new(false));
        let sim = SimLoop {
            driver,
            jobs: jobs_rx,
            shared: shared.clone(),
            snapshot: snapshot_tx,
            breach: breach_tx,
            stop: stop.clone(),
            realtime_factor: svc.realtime_factor,
            seq: 0,
            ik_owners: BTreeMap::new(),
            sequence_owner: None,
            gait_owner: None,
        };
        let sim = std::thread::Builder::new()
            .name("limbkit-sim".into())
            .spawn(move || sim.run())
            .expect("spawn simulation thread");

        let app = Router::new()
            .route("/ws", get(upgrade))
            .route("/health", get(|| async { "ok" }))
            .with_state(shared);
        let (server_stop, stopped) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = stopped.await;
            });
            if let Err(e) = serve.await {
                tracing::error!("server: {e}");
            }
        });
        tracing::info!("listening on ws://{addr}/ws");
        Ok(Service {
            addr,
            stop,
            sim: Some(sim),
            server_stop: Some(server_stop),
            server,
            breach: breach_rx,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// WebSocket endpoint, without the token.
    pub fn url(&self) -> String {
        format!("ws://{}/ws", self.addr)
    }

    /// Resolves once the simulation hits a runtime invariant breach.
    pub async fn breached(&mut self) -> ErrorBody {
        loop {
            if let Some(b) = self.breach.borrow_and_update().clone() {
                return b;
            }
            if self.breach.changed().await.is_err() {
                std::future::pending::<()>().await;
            }
        }
    }

    /// Stops sessions and the simulation. Returns the manifest of the run, or
    /// the breach that stopped it.
    pub async fn shutdown(mut self) -> Result<RunManifest, ServiceError> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(tx) = self.server_stop.take() {
            let _ = tx.send(());
        }
        let sim = self.sim.take().expect("joined once");
        let exit = tokio::task::spawn_blocking(move || sim.join())
            .await
            .map_err(|_| ServiceError::Panicked)?
            .map_err(|_| ServiceError::Panicked)?;
        // Open sessions end when the simulation side of their channels drops.
        let _ = tokio::time::timeout(Duration::from_secs(2), &mut self.server).await;
        match exit {
            SimExit::Stopped(driver) => Ok(driver.manifest()),
            SimExit::Breach(e, _) => Err(ServiceError::Breach(e)),
        }
    }
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::to_owned)
}

async fn upgrade(
    ws: WebSocketUpgrade,
    State(shared): State<Arc<Shared>>,
    Query(query): Query<BTreeMap<String, String>>,
    headers: HeaderMap,
) -> Response {
    if let Some(token) = &shared.token {
        let given = query.get("token").cloned().or_else(|| bearer(&headers));
        if given.as_deref() != Some(token.as_str()) {
            return (StatusCode::UNAUTHORIZED, "missing or wrong token").into_response();
        }
    }
    ws.on_upgrade(move |socket| session(socket, shared))
}

async fn next_batch(
    sub: &mut Option<(Subscription, broadcast::Receiver<Arc<TelemetryBatch>>)>,
) -> Result<Arc<TelemetryBatch>, broadcast::error::RecvError> {
    match sub {
        Some((_, rx)) => rx.recv().await,
        None => std::future::pending().await,
    }
}

async fn session(socket: WebSocket, shared: Arc<Shared>) {
    let (mut sink, mut stream) = socket.split();
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<ServerMessage>();
    let mut breach = shared.breach.clone();
    let mut telemetry = shared.subscribe(shared.telemetry_hz).unwrap_or(None);
    let mut dropped = 0u64;
    let period = if shared.snapshot_hz > 0.0 {
        Duration::from_secs_f64(1.0 / shared.snapshot_hz)
    } else {
        Duration::from_secs(365 * 86_400)
    };
    let mut snapshots = tokio::time::interval(period);
    snapshots.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    macro_rules! emit {
        ($msg:expr) => {
            if sink
                .send(Message::Text($msg.to_json().into()))
                .await
                .is_err()
            {
                break;
            }
        };
    }

    loop {
        tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let body = ErrorBody::new("INVALID_REQUEST", "frames must be text");
                        emit!(ServerMessage::error(Value::Null, body));
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let msg = match ClientMessage::parse(&text) {
                    Ok(m) => m,
                    Err((id, body)) => {
                        emit!(ServerMessage::error(id, body));
                        continue;
                    }
                };
                match msg.request {
                    Request::World(command) => {
                        let job = Job { id: msg.id.clone(), command, reply: reply_tx.clone() };
                        if shared.jobs.send(job).await.is_err() {
                            let body = ErrorBody::new("UNAVAILABLE", "simulation has stopped");
                            emit!(ServerMessage::error(msg.id, body));
                        }
                    }
                    Request::Subscribe { rate_hz } => {
                        let reply = match shared.subscribe(rate_hz) {
                            Ok(sub) => {
                                let subscription = sub.as_ref().map(|(s, _)| *s);
                                telemetry = sub;
                                dropped = 0;
                                local_ack(&shared, msg.id, subscription)
                            }
                            Err(body) => ServerMessage::error(msg.id, body),
                        };
                        emit!(reply);
                    }
                    Request::Ping => emit!(local_ack(&shared, msg.id, None)),
                }
            }
            Some(msg) = reply_rx.recv() => emit!(msg),
            batch = next_batch(&mut telemetry) => match batch {
                Ok(batch) => {
                    let body = TelemetryBody { dropped, batch: (*batch).clone() };
                    dropped = 0;
                    emit!(ServerMessage::new(Value::Null, Event::Telemetry(body)));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => dropped += n,
                Err(broadcast::error::RecvError::Closed) => telemetry = None,
            },
            _ = snapshots.tick() => {
                let snapshot = shared.snapshot.borrow().clone();
                emit!(ServerMessage::new(Value::Null, Event::Snapshot(Box::new((*snapshot).clone()))));
            }
            changed = breach.changed() => {
                let body = breach.borrow_and_update().clone();
                if let (Ok(()), Some(body)) = (changed, body) {
                    // Hand out pending replies before the breach notice.
                    while let Ok(msg) = reply_rx.try_recv() {
                        emit!(msg);
                    }
                    emit!(ServerMessage::error(Value::Null, body));
                }
                break;
            }
        }
    }
    let _ = sink.close().await;
}

fn local_ack(shared: &Shared, id: Value, subscription: Option<Subscription>) -> ServerMessage {
    let snapshot = shared.snapshot.borrow().clone();
    let body = AckBody {
        seq: None,
        step: snapshot.step,
        time_s: snapshot.time_s,
        outcome: CommandOutcome::Applied,
        subscription,
    };
    ServerMessage::new(id, Event::Ack(body))
}
