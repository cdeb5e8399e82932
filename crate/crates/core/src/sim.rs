//! Deterministic discrete-event simulation of devices, links and the server.
//!
//! Time is modeled from throughput alone: a forward batch takes
//! `flops / tflops`, an upload `bytes / bandwidth`, a server step
//! `step_flops / server_tflops`. Each device keeps one packet in flight
//! while computing the next batch. Training math runs when a step's
//! completion event fires, so evaluation ticks observe only finished steps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentPlan;
use crate::client::Client;
use crate::error::{Error, Result};
use crate::seed;
use crate::server::{evaluate, ActivationCache, EvalReport, EvalSet, LogEvent, Phase, SampleRef, Server, TrainConfig};
use crate::sidenet::SideNetwork;
use crate::wire::ActivationPacket;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub tflops: f64,
    pub bandwidth_mbps: f64,
    pub backbone_id: String,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.tflops > 0.0 && self.tflops.is_finite()) || !(self.bandwidth_mbps > 0.0 && self.bandwidth_mbps.is_finite()) {
            return Err(Error::Config(format!(
                "device `{}`: tflops and bandwidth_mbps must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn compute_time(&self, flops: f64) -> f64 {
        flops / (self.tflops * 1e12)
    }

    pub fn upload_time(&self, bytes: usize) -> f64 {
        bytes as f64 * 8.0 / (self.bandwidth_mbps * 1e6)
    }

    /// Divides both compute and link rates by `factor`.
    pub fn slowed(&self, factor: f64) -> DeviceProfile {
        DeviceProfile {
            tflops: self.tflops / factor,
            bandwidth_mbps: self.bandwidth_mbps / factor,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Async,
    Sync,
}

#[derive(Clone, Debug)]
pub struct SimClient {
    pub client: Client,
    pub profile: DeviceProfile,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimParams {
    pub train: TrainConfig,
    pub standalone_epochs: usize,
    /// Replay steps allowed per idle interval between arrivals.
    pub replay_budget: usize,
    pub server_tflops: f64,
    pub eval_interval_s: f64,
    pub target_accuracy: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spill_dir: Option<PathBuf>,
}

/// Everything a run needs, already built.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub plan: AlignmentPlan,
    pub net: SideNetwork,
    pub clients: Vec<SimClient>,
    pub eval_sets: Vec<EvalSet>,
    pub params: SimParams,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientMetrics {
    pub client_id: u32,
    pub backbone_id: String,
    pub device: String,
    pub samples: usize,
    pub packets: usize,
    pub flops: f64,
    pub bytes: u64,
    pub finish_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ServerMetrics {
    pub arrival_steps: u64,
    pub replay_steps: u64,
    pub replay_preempted: u64,
    pub standalone_steps: u64,
    pub streaming_end_time: f64,
    pub standalone_time: f64,
    pub end_time: f64,
    pub final_cache_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub accuracy: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Totals {
    pub flops: f64,
    pub bytes: u64,
    pub packets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub mode: SimMode,
    pub clients: Vec<ClientMetrics>,
    pub server: ServerMetrics,
    pub curve: Vec<CurvePoint>,
    pub backbone_accuracy: BTreeMap<String, f64>,
    pub final_eval: EvalReport,
    pub target_accuracy: f64,
    pub time_to_target: Option<f64>,
    pub totals: Totals,
}

impl RunMetrics {
    /// Slowest client's single-pass finish time.
    pub fn slowest_pass(&self) -> f64 {
        self.clients.iter().map(|c| c.finish_time).fold(0.0, f64::max)
    }
}

pub struct SimOutput {
    pub metrics: RunMetrics,
    pub events: Vec<LogEvent>,
    pub net: SideNetwork,
}

#[derive(Debug)]
enum Kind {
    BatchReady { client: usize },
    UploadDone { client: usize, packet: Box<ActivationPacket>, last: bool },
    StepDone { generation: u64 },
    EvalTick,
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so that `BinaryHeap` pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }
}

enum Msg {
    Packet(Box<ActivationPacket>, f64),
    EndOfData(u32),
}

enum Busy {
    Arrival(Box<ActivationPacket>),
    Replay(Vec<SampleRef>),
    Standalone,
}

/// Shared bookkeeping for both modes.
struct Run<'a> {
    setup: &'a SimSetup,
    server: Server,
    events: Vec<LogEvent>,
    curve: Vec<CurvePoint>,
    clients: Vec<ClientMetrics>,
    time_to_target: Option<f64>,
    streaming_end: Option<f64>,
    preempted: u64,
}

impl<'a> Run<'a> {
    fn new(setup: &'a SimSetup) -> Result<Self> {
        let p = &setup.params;
        let mut cache = ActivationCache::new(seed::rng(p.seed, "cache"));
        if let Some(dir) = &p.spill_dir {
            cache = cache.with_spill(dir)?;
        }
        let server = Server::new(
            setup.net.clone(),
            cache,
            p.train,
            setup.clients.iter().map(|c| c.client.id()),
            seed::rng(p.seed, "replay"),
        );
        let clients = setup
            .clients
            .iter()
            .map(|c| ClientMetrics {
                client_id: c.client.id(),
                backbone_id: c.client.backbone.id().to_string(),
                device: c.profile.name.clone(),
                samples: c.client.shard.len(),
                packets: 0,
                flops: 0.0,
                bytes: 0,
                finish_time: 0.0,
            })
            .collect();
        Ok(Run {
            setup,
            server,
            events: Vec::new(),
            curve: Vec::new(),
            clients,
            time_to_target: None,
            streaming_end: None,
            preempted: 0,
        })
    }

    fn log(&mut self, t: f64, event: &str, client_id: Option<u32>) {
        self.flush_server_log();
        self.events.push(LogEvent {
            t,
            event: event.to_string(),
            client_id,
            step: self.server.total_steps(),
            loss: None,
            phase: self.server.phase(),
        });
    }

    fn flush_server_log(&mut self) {
        self.events.append(&mut self.server.log);
    }

    fn eval(&mut self, t: f64) -> Result<()> {
        let report = evaluate(self.server.net(), &self.setup.eval_sets)?;
        if self.time_to_target.is_none() && report.global >= self.setup.params.target_accuracy {
            self.time_to_target = Some(t);
        }
        self.curve.push(CurvePoint {
            t,
            accuracy: report.global,
            phase: self.server.phase(),
        });
        self.flush_server_log();
        self.events.push(LogEvent {
            t,
            event: "eval_tick".into(),
            client_id: None,
            step: self.server.total_steps(),
            loss: Some(report.global),
            phase: self.server.phase(),
        });
        Ok(())
    }

    fn server_flops(&self) -> f64 {
        self.setup.params.server_tflops * 1e12
    }

    fn packet_step_time(&self, p: &ActivationPacket) -> f64 {
        self.setup.net.step_flops(p.batch(), p.seq_len, p.hidden()) / self.server_flops()
    }

    fn refs_step_time(&self, refs: &[SampleRef]) -> f64 {
        let mut groups: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
        for r in refs {
            if let Some(p) = self.server.cache().packet(r.record_id) {
                let e = groups.entry(p.backbone_id.as_str()).or_insert((0, p.seq_len, p.hidden()));
                e.0 += 1;
            }
        }
        groups
            .values()
            .map(|&(n, s, h)| self.setup.net.step_flops(n, s, h))
            .sum::<f64>()
            / self.server_flops()
    }

    fn end_of_data(&mut self, cid: u32, t: f64) -> Result<()> {
        self.server.end_of_data(cid, t)?;
        if self.server.phase() == Phase::Standalone {
            self.streaming_end = Some(t);
            self.server.begin_standalone(self.setup.params.standalone_epochs)?;
        }
        Ok(())
    }

    fn finish(mut self, mode: SimMode, end: f64) -> Result<SimOutput> {
        self.eval(end)?;
        self.flush_server_log();
        let final_eval = evaluate(self.server.net(), &self.setup.eval_sets)?;
        let backbone_accuracy = self
            .setup
            .eval_sets
            .iter()
            .map(|s| (s.backbone_id.clone(), s.backbone_accuracy()))
            .collect();
        let streaming_end = self.streaming_end.unwrap_or(end);
        let server = ServerMetrics {
            arrival_steps: self.server.arrival_steps,
            replay_steps: self.server.replay_steps,
            replay_preempted: self.preempted,
            standalone_steps: self.server.standalone_steps,
            streaming_end_time: streaming_end,
            standalone_time: end - streaming_end,
            end_time: end,
            final_cache_loss: self.server.cache_loss()?,
        };
        let totals = Totals {
            flops: self.clients.iter().map(|c| c.flops).sum(),
            bytes: self.clients.iter().map(|c| c.bytes).sum(),
            packets: self.clients.iter().map(|c| c.packets).sum(),
        };
        Ok(SimOutput {
            metrics: RunMetrics {
                mode,
                clients: self.clients,
                server,
                curve: self.curve,
                backbone_accuracy,
                final_eval,
                target_accuracy: self.setup.params.target_accuracy,
                time_to_target: self.time_to_target,
                totals,
            },
            events: self.events,
            net: self.server.into_net(),
        })
    }
}

fn validate(setup: &SimSetup) -> Result<()> {
    if setup.clients.is_empty() {
        return Err(Error::Config("simulation needs at least one client".into()));
    }
    let p = &setup.params;
    if !(p.server_tflops > 0.0) || !(p.eval_interval_s > 0.0) {
        return Err(Error::Config("server_tflops and eval_interval_s must be positive".into()));
    }
    for c in &setup.clients {
        c.profile.validate()?;
        if c.client.shard.is_empty() {
            return Err(Error::Config(format!("client {} has no data", c.client.id())));
        }
    }
    Ok(())
}

/// Asynchronous protocol: arrivals are trained on immediately, idle gaps
/// are filled with replay, standalone epochs follow the last upload.
pub fn simulate(setup: &SimSetup) -> Result<SimOutput> {
    validate(setup)?;
    let mut run = Run::new(setup)?;
    let mut clients: Vec<Client> = setup.clients.iter().map(|c| c.client.clone()).collect();
    let profiles: Vec<&DeviceProfile> = setup.clients.iter().map(|c| &c.profile).collect();
    let mut q = Queue::default();
    let mut upload_end = vec![0.0f64; clients.len()];

    for (i, c) in clients.iter().enumerate() {
        let flops = c.backbone.forward_flops(c.shard.samples[0].tokens.len(), c.next_batch_len());
        q.push(profiles[i].compute_time(flops), Kind::BatchReady { client: i });
    }
    q.push(0.0, Kind::EvalTick);

    let mut inbox: VecDeque<Msg> = VecDeque::new();
    let mut busy: Option<Busy> = None;
    let mut generation = 0u64;
    let mut replay_left = 0usize;
    let budget = setup.params.replay_budget;
    let mut end = None;

    while let Some(ev) = q.pop() {
        let t = ev.time;
        match ev.kind {
            Kind::BatchReady { client } => {
                let packet = clients[client].next_packet(&setup.plan)?;
                let seq = packet.seq_len;
                let m = &mut run.clients[client];
                m.flops += clients[client].backbone.forward_flops(seq, packet.batch());
                m.bytes += packet.payload_bytes() as u64;
                m.packets += 1;
                let start = t.max(upload_end[client]);
                upload_end[client] = start + profiles[client].upload_time(packet.payload_bytes());
                let last = clients[client].is_done();
                let cid = clients[client].id();
                run.log(t, "batch_ready", Some(cid));
                q.push(
                    upload_end[client],
                    Kind::UploadDone {
                        client,
                        packet: Box::new(packet),
                        last,
                    },
                );
                if !last {
                    let flops = clients[client].backbone.forward_flops(seq, clients[client].next_batch_len());
                    q.push(start + profiles[client].compute_time(flops), Kind::BatchReady { client });
                }
            }
            Kind::UploadDone { client, packet, last } => {
                let cid = clients[client].id();
                run.log(t, "upload_done", Some(cid));
                inbox.push_back(Msg::Packet(packet, t));
                if last {
                    run.clients[client].finish_time = t;
                    run.log(t, "client_done", Some(cid));
                    inbox.push_back(Msg::EndOfData(cid));
                }
                if matches!(busy, Some(Busy::Replay(_))) {
                    busy = None;
                    generation += 1;
                    run.preempted += 1;
                }
            }
            Kind::StepDone { generation: g } => {
                if g != generation {
                    continue;
                }
                match busy.take() {
                    Some(Busy::Arrival(p)) => {
                        run.server.on_packet(*p, t)?;
                        replay_left = budget;
                    }
                    Some(Busy::Replay(refs)) => {
                        run.server.replay_on(&refs, t)?;
                    }
                    Some(Busy::Standalone) => {
                        run.server.standalone_step(t)?;
                    }
                    None => {}
                }
            }
            Kind::EvalTick => {
                if end.is_none() {
                    run.eval(t)?;
                    q.push(t + setup.params.eval_interval_s, Kind::EvalTick);
                }
                continue;
            }
        }

        // Start the next server activity if idle.
        while busy.is_none() && end.is_none() {
            if let Some(msg) = inbox.pop_front() {
                match msg {
                    Msg::EndOfData(cid) => run.end_of_data(cid, t)?,
                    Msg::Packet(p, arrived) => {
                        debug_assert!(arrived <= t, "packet consumed before its upload finished");
                        let dt = setup.params.train.k_arrival as f64 * run.packet_step_time(&p);
                        busy = Some(Busy::Arrival(p));
                        generation += 1;
                        q.push(t + dt, Kind::StepDone { generation });
                    }
                }
                continue;
            }
            match run.server.phase() {
                Phase::Streaming => {
                    if replay_left > 0 {
                        if let Some(refs) = run.server.draw_replay() {
                            replay_left -= 1;
                            let dt = run.refs_step_time(&refs);
                            busy = Some(Busy::Replay(refs));
                            generation += 1;
                            q.push(t + dt, Kind::StepDone { generation });
                        }
                    }
                    break;
                }
                Phase::Standalone => match run.server.peek_standalone() {
                    Some(refs) => {
                        let dt = run.refs_step_time(refs);
                        busy = Some(Busy::Standalone);
                        generation += 1;
                        q.push(t + dt, Kind::StepDone { generation });
                    }
                    None => {
                        run.server.standalone_step(t)?;
                    }
                },
                Phase::Done => {
                    end = Some(t);
                }
            }
        }
        if end.is_some() {
            break;
        }
    }
    let end = end.ok_or_else(|| Error::State("simulation ended before the server finished".into()))?;
    run.finish(SimMode::Async, end)
}

/// Synchronous ablation: each round waits for one packet from every client
/// that still has data, trains on them in client order, with no replay.
/// Devices start their next batch as soon as a round's barrier clears.
pub fn simulate_sync_baseline(setup: &SimSetup) -> Result<SimOutput> {
    validate(setup)?;
    let mut run = Run::new(setup)?;
    let mut clients: Vec<Client> = setup.clients.iter().map(|c| c.client.clone()).collect();
    let interval = setup.params.eval_interval_s;
    let mut next_tick = 0.0;
    let mut round_start = 0.0f64;
    let mut server_free = 0.0f64;

    // Emits every evaluation tick strictly before `t`.
    fn ticks_until(run: &mut Run<'_>, next_tick: &mut f64, interval: f64, t: f64) -> Result<()> {
        while *next_tick < t {
            run.eval(*next_tick)?;
            *next_tick += interval;
        }
        Ok(())
    }

    while run.server.phase() == Phase::Streaming {
        let mut round = Vec::new();
        let mut barrier = round_start;
        for (i, c) in clients.iter_mut().enumerate() {
            if c.is_done() {
                continue;
            }
            let packet = c.next_packet(&setup.plan)?;
            let profile = &setup.clients[i].profile;
            let flops = c.backbone.forward_flops(packet.seq_len, packet.batch());
            let ready = round_start + profile.compute_time(flops);
            let arrived = ready + profile.upload_time(packet.payload_bytes());
            let m = &mut run.clients[i];
            m.flops += flops;
            m.bytes += packet.payload_bytes() as u64;
            m.packets += 1;
            if c.is_done() {
                m.finish_time = arrived;
            }
            barrier = barrier.max(arrived);
            round.push((i, packet, arrived, c.is_done()));
        }
        let mut t = barrier.max(server_free);
        for (i, packet, arrived, last) in round {
            let cid = clients[i].id();
            run.log(arrived, "upload_done", Some(cid));
            let dt = setup.params.train.k_arrival as f64 * run.packet_step_time(&packet);
            ticks_until(&mut run, &mut next_tick, interval, t + dt)?;
            t += dt;
            run.server.on_packet(packet, t)?;
            if last {
                run.log(t, "client_done", Some(cid));
                run.end_of_data(cid, t)?;
            }
        }
        server_free = t;
        round_start = barrier;
        run.log(barrier, "round_barrier", None);
    }

    let mut t = server_free;
    while let Some(refs) = run.server.peek_standalone() {
        let dt = run.refs_step_time(refs);
        ticks_until(&mut run, &mut next_tick, interval, t + dt)?;
        t += dt;
        run.server.standalone_step(t)?;
    }
    if run.server.phase() != Phase::Done {
        run.server.standalone_step(t)?;
    }
    ticks_until(&mut run, &mut next_tick, interval, t)?;
    run.finish(SimMode::Sync, t)
}

pub fn run_mode(setup: &SimSetup, mode: SimMode) -> Result<SimOutput> {
    match mode {
        SimMode::Async => simulate(setup),
        SimMode::Sync => simulate_sync_baseline(setup),
    }
}
