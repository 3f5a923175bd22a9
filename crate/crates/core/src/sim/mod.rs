//! Deterministic discrete-event simulation of the edge network.
//!
//! One [`Simulation`] owns the whole world: the control plane, the key
//! authority, every device and stream, and a single seeded generator. Events
//! run in `(time, sequence)` order, so a scenario and seed fully determine
//! the trace.

pub mod metrics;
pub mod queue;
pub mod topology;
pub mod transport;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::authn::{
    AccessGate, AuthError, Decision, GateVerdict, GroupId, KeyAuthority, KeyToken, KeyWallet, LocationGroup,
};
use crate::geo::{Disc, Point};
use crate::ids::{ApId, FlowId, MacAddr, MdId};
use crate::mobility::{ControlPlane, FlowDescriptor, HandoverStage, HandoverTxn, MobilityError};
use crate::ring::{ControllerId, RingError, RingKey};
use crate::scenario::{FailureTarget, Params, Scenario, ScenarioError};
use crate::scheduler::{ApStatus, MdStatus, RadioTech};

use metrics::{
    AuthLogEntry, ControllerHandover, FailureRecord, HandoverRecord, MetricsReport, PacketInStats, Sample,
    StreamSeries, Summary, SCHEMA_VERSION,
};
use queue::{EventHandle, EventQueue};
use topology::Topology;
use transport::{Offer, TransportStream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("causality violation: event at {at} scheduled when the clock is at {now}")]
    Causality { at: f64, now: f64 },
    #[error("invalid failure target: {0}")]
    InvalidTarget(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error("at t={t} while handling {event}: {source}")]
    Handler {
        t: f64,
        event: String,
        #[source]
        source: Box<SimError>,
    },
}

pub type Result<T> = std::result::Result<T, SimError>;

/// One line of the event trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub t: f64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Attach {
        md: String,
        ap: String,
        controller: String,
    },
    Move {
        md: String,
        x: f64,
        y: f64,
        status: Option<MdStatus>,
    },
    Disconnect {
        md: String,
        ap: Option<String>,
        reason: String,
    },
    HandoverStep {
        md: String,
        stage: String,
        to: String,
    },
    HandoverRetry {
        md: String,
        attempt: u32,
        error: String,
    },
    HandoverAbandoned {
        md: String,
    },
    Reconnect {
        md: String,
        ap: String,
        migrated: bool,
    },
    KeysDropped {
        md: String,
        ap: String,
    },
    BeaconRx {
        md: String,
        ap: String,
        group: String,
        epoch: u64,
        x: f64,
        y: f64,
    },
    Rotation {
        group: String,
        epoch: u64,
    },
    AuthRequest {
        md: String,
        group: String,
        /// `(ap, epoch)` of every presented key.
        keys: Vec<(String, u64)>,
    },
    AuthDecision {
        md: String,
        group: String,
        granted: bool,
        epoch: Option<u64>,
        reason: Option<String>,
    },
    FlowStart {
        flow: String,
        md: String,
        reserved: bool,
    },
    FlowEnd {
        flow: String,
    },
    Failure {
        target: String,
    },
    FailureIgnored {
        target: String,
    },
    ControllerRecovery {
        failed: Vec<String>,
        heir: Option<String>,
        recovered_records: usize,
        lost_records: usize,
        lost_sessions: usize,
    },
    ApReassign {
        md: String,
        ap: String,
    },
    ApUnassigned {
        md: String,
    },
    Error {
        context: String,
        error: String,
    },
}

#[derive(Clone, Debug)]
enum Event {
    Rotate {
        group: GroupId,
        k: u64,
    },
    Beacon {
        ap: ApId,
        k: u64,
    },
    Waypoint {
        md: MdId,
        idx: usize,
    },
    HandoverStep(MdId),
    AttachRetry(MdId),
    Reconnect(MdId),
    AuthArrive {
        md: MdId,
        group: GroupId,
        wallet: Box<KeyWallet>,
    },
    GateCheck,
    FlowStart(FlowId),
    FlowEnd(FlowId),
    Fail(usize),
    Detect(usize),
    PacketIn(usize),
    JobDone {
        controller: ControllerId,
        generation: u64,
    },
    Sample(u64),
}

impl Event {
    fn label(&self) -> String {
        match self {
            Event::Rotate { group, k } => format!("rotation {k} of {group}"),
            Event::Beacon { ap, k } => format!("beacon {k} of {ap}"),
            Event::Waypoint { md, idx } => format!("waypoint {idx} of {md}"),
            Event::HandoverStep(md) => format!("handover step of {md}"),
            Event::AttachRetry(md) => format!("attach retry of {md}"),
            Event::Reconnect(md) => format!("reconnect of {md}"),
            Event::AuthArrive { md, group, .. } => format!("authentication of {md} for {group}"),
            Event::GateCheck => "gate check".into(),
            Event::FlowStart(f) => format!("start of {f}"),
            Event::FlowEnd(f) => format!("end of {f}"),
            Event::Fail(i) => format!("failure #{i}"),
            Event::Detect(i) => format!("detection of failure #{i}"),
            Event::PacketIn(i) => format!("packet-in source #{i}"),
            Event::JobDone { controller, .. } => format!("job completion at {controller}"),
            Event::Sample(k) => format!("sample #{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub position: Point,
    pub status: Option<MdStatus>,
}

#[derive(Clone, Debug)]
struct ApInfo {
    coverage: Disc,
    capacity: f64,
    beacon_offset: f64,
    alive: bool,
}

#[derive(Clone, Debug)]
struct Disruption {
    at: f64,
    from_ap: Option<ApId>,
}

#[derive(Debug)]
struct Device {
    position: Point,
    wallet: KeyWallet,
    /// AP the device is associated with at the data plane.
    ap: Option<ApId>,
    connected: bool,
    disrupted: Option<Disruption>,
    waypoints: Vec<Waypoint>,
    pending: Option<EventHandle>,
    txn: Option<HandoverTxn>,
    target: Option<ApId>,
    attempts: u32,
    migrated: bool,
    controller_handover: Option<ControllerHandover>,
    last_presented: BTreeMap<GroupId, Vec<KeyToken>>,
    /// Groups whose answer the new association is waiting for.
    awaiting: BTreeSet<GroupId>,
    flows: Vec<FlowId>,
}

impl Device {
    fn in_transition(&self) -> bool {
        self.pending.is_some() || self.txn.is_some()
    }
}

#[derive(Clone, Debug)]
struct FlowSpec {
    md: MdId,
    dst: String,
    descriptor: FlowDescriptor,
    start: f64,
    end: Option<f64>,
}

#[derive(Clone, Debug)]
struct PacketInSource {
    switch: String,
    rate: f64,
    end: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Job {
    PacketIn,
    LookupHop,
}

#[derive(Debug, Default)]
struct ControllerQueue {
    jobs: VecDeque<Job>,
    current: Option<Job>,
    generation: u64,
}

#[derive(Clone, Debug)]
struct PlannedFailure {
    target: FailureTarget,
    at: f64,
    detected_at: Option<f64>,
    detail: String,
}

/// Observable state of a device, for invariant checks.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceState {
    pub md: MdId,
    pub position: Point,
    pub ap: Option<ApId>,
    pub connected: bool,
    pub in_transition: bool,
}

pub struct Simulation {
    params: Params,
    name: String,
    queue: EventQueue<Event>,
    rng: ChaCha8Rng,
    cp: ControlPlane,
    topology: Topology,
    ctrl_ids: BTreeMap<String, ControllerId>,
    ctrl_names: BTreeMap<ControllerId, String>,
    switch_ctrl: BTreeMap<String, ControllerId>,
    aps: BTreeMap<ApId, ApInfo>,
    devices: BTreeMap<MdId, Device>,
    flows: BTreeMap<FlowId, FlowSpec>,
    streams: BTreeMap<FlowId, TransportStream>,
    authority: KeyAuthority,
    gate: AccessGate,
    personal_ap: bool,
    sources: Vec<PacketInSource>,
    ctrl_queues: BTreeMap<ControllerId, ControllerQueue>,
    failures: Vec<PlannedFailure>,
    samples: BTreeMap<FlowId, Vec<Sample>>,
    handovers: Vec<HandoverRecord>,
    packet_in: BTreeMap<String, PacketInStats>,
    lookup_hops: BTreeMap<u32, u64>,
    auth_log: Vec<AuthLogEntry>,
    record_loss: usize,
    events: u64,
    trace: Vec<TraceEntry>,
    digest: Sha256,
}

impl Simulation {
    /// Builds the world at t=0: controllers, APs, devices (placed on their
    /// best covering AP), key groups, and every initial event.
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let restricted;
        let scenario = match scenario.params.controllers {
            Some(k) if k < scenario.controllers.len() => {
                let mut s = scenario.clone();
                s.restrict_controllers(k);
                restricted = s;
                &restricted
            }
            _ => scenario,
        };
        scenario.validate()?;
        let p = scenario.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut topology = Topology::from_scenario(scenario);
        let mut cp = ControlPlane::new(p.m, p.r)?;

        let ids = scenario.controller_ids()?;
        let mut ctrl_ids = BTreeMap::new();
        let mut ctrl_names = BTreeMap::new();
        for (c, id) in scenario.controllers.iter().zip(ids) {
            let id = RingKey(id);
            cp.add_controller(id)?;
            ctrl_ids.insert(c.name.clone(), id);
            ctrl_names.insert(id, c.name.clone());
        }
        for (a, ia) in &ctrl_ids {
            for (b, ib) in &ctrl_ids {
                if ia < ib {
                    let lat = topology.path(a, b).map(|x| x.latency).unwrap_or(p.infra_latency);
                    cp.latency_mut().set(*ia, *ib, lat);
                }
            }
        }
        let mut aps = BTreeMap::new();
        for (i, a) in scenario.aps.iter().enumerate() {
            let id = ApId::new(a.name.clone());
            let coverage = Disc::new(a.position, a.radius);
            let techs: BTreeSet<RadioTech> = a.techs.iter().copied().collect();
            cp.add_ap(
                ctrl_ids[&a.controller],
                ApStatus::new(id.clone(), a.capacity, techs, coverage),
                MacAddr::local(i as u32 + 1),
            )?;
            for (c, cid) in &ctrl_ids {
                let lat = topology.path(c, &a.name).map(|x| x.latency).unwrap_or(p.infra_latency);
                cp.latency_mut().set_ap(*cid, id.clone(), lat);
            }
            aps.insert(
                id,
                ApInfo {
                    coverage,
                    capacity: a.capacity,
                    beacon_offset: a.beacon_offset.unwrap_or(0.0),
                    alive: true,
                },
            );
        }
        let switch_ctrl = scenario
            .switches
            .iter()
            .map(|s| (s.name.clone(), ctrl_ids[&s.controller]))
            .collect();

        // devices and their traces
        let mut devices = BTreeMap::new();
        let mut add_device = |name: &str, position: Point| {
            let md = MdId::new(name);
            devices.insert(
                md.clone(),
                Device {
                    position,
                    wallet: KeyWallet::new(md),
                    ap: None,
                    connected: false,
                    disrupted: None,
                    waypoints: Vec::new(),
                    pending: None,
                    txn: None,
                    target: None,
                    attempts: 0,
                    migrated: false,
                    controller_handover: None,
                    last_presented: BTreeMap::new(),
                    awaiting: BTreeSet::new(),
                    flows: Vec::new(),
                },
            );
        };
        for m in &scenario.mds {
            add_device(&m.name, m.position);
        }
        for g in &scenario.md_groups {
            for name in g.names() {
                let x = uniform(&mut rng, g.x);
                let y = uniform(&mut rng, g.y);
                add_device(&name, Point::new(x, y));
            }
        }
        for w in &scenario.waypoints {
            let d = devices.get_mut(&MdId::new(w.md.clone())).expect("validated");
            d.waypoints.push(Waypoint {
                t: w.t,
                position: w.position,
                status: w.status,
            });
        }
        let names = scenario.md_names();
        let ap_list: Vec<(&ApId, Disc)> = aps.iter().map(|(id, a)| (id, a.coverage)).collect();
        for r in &scenario.roams {
            for name in Scenario::select(&names, &r.selector) {
                let d = devices.get_mut(&MdId::new(name.clone())).expect("selected");
                let mut k = 1u64;
                loop {
                    let t = r.start + k as f64 * r.every + r.jitter * rng.gen::<f64>();
                    if t > p.duration {
                        break;
                    }
                    let (_, disc) = ap_list[rng.gen_range(0..ap_list.len())];
                    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
                    let dist = r.spread * disc.radius * rng.gen::<f64>().sqrt();
                    d.waypoints.push(Waypoint {
                        t,
                        position: Point::new(disc.center.x + dist * angle.cos(), disc.center.y + dist * angle.sin()),
                        status: Some(MdStatus::Staying),
                    });
                    k += 1;
                }
            }
        }
        for d in devices.values_mut() {
            d.waypoints.sort_by(|a, b| a.t.total_cmp(&b.t));
            d.waypoints.dedup_by(|b, a| b.t == a.t);
        }

        // flows
        let mut flows = BTreeMap::new();
        for f in &scenario.flows {
            flows.insert(
                FlowId::new(f.name.clone()),
                FlowSpec {
                    md: MdId::new(f.md.clone()),
                    dst: f.dst.clone(),
                    descriptor: FlowDescriptor {
                        flow: FlowId::new(f.name.clone()),
                        flow_type: f.flow_type.clone(),
                        demand: f.demand,
                        tech: f.tech,
                    },
                    start: f.start,
                    end: f.end,
                },
            );
        }
        for (gi, g) in scenario.flow_gens.iter().enumerate() {
            for name in Scenario::select(&names, &g.selector) {
                let id = FlowId::new(format!("{name}.{}{gi}", g.flow_type));
                flows.insert(
                    id.clone(),
                    FlowSpec {
                        md: MdId::new(name.clone()),
                        dst: g.dst.clone(),
                        descriptor: FlowDescriptor {
                            flow: id,
                            flow_type: g.flow_type.clone(),
                            demand: g.demand,
                            tech: g.tech,
                        },
                        start: g.start,
                        end: g.end,
                    },
                );
            }
        }
        let mut streams = BTreeMap::new();
        for (id, f) in &flows {
            devices.get_mut(&f.md).expect("validated").flows.push(id.clone());
            streams.insert(
                id.clone(),
                TransportStream::new(id.clone(), f.descriptor.demand, p.recovery_lag),
            );
        }

        let mut authority = KeyAuthority::new();
        for g in &scenario.groups {
            let members = g.members.iter().map(|m| {
                let id = ApId::new(m.clone());
                let disc = aps[&id].coverage;
                (id, disc)
            });
            authority.register_group(LocationGroup::new(GroupId(g.name.clone()), members)?)?;
        }

        let personal_ap = p.personal_ap();
        let mut sim = Simulation {
            name: p.name.clone(),
            gate: AccessGate::new(p.mode, p.reauth_window),
            queue: EventQueue::new(),
            rng,
            cp,
            topology,
            ctrl_ids,
            ctrl_names,
            switch_ctrl,
            aps,
            devices,
            flows,
            streams,
            authority,
            personal_ap,
            sources: Vec::new(),
            ctrl_queues: BTreeMap::new(),
            failures: Vec::new(),
            samples: BTreeMap::new(),
            handovers: Vec::new(),
            packet_in: BTreeMap::new(),
            lookup_hops: BTreeMap::new(),
            auth_log: Vec::new(),
            record_loss: 0,
            events: 0,
            trace: Vec::new(),
            digest: Sha256::new(),
            params: p,
        };
        sim.place_devices()?;
        sim.schedule_initial(scenario)?;
        Ok(sim)
    }

    fn place_devices(&mut self) -> Result<()> {
        let mds: Vec<MdId> = self.devices.keys().cloned().collect();
        let first = *self.ctrl_ids.values().next().expect("validated");
        for md in mds {
            let pos = self.devices[&md].position;
            let best = self.best_ap(&pos);
            let ctrl = best.as_ref().and_then(|a| self.cp.ap_controller(a)).unwrap_or(first);
            self.cp.register_md(&md, ctrl)?;
            if let Some(ap) = best {
                self.cp.attach(&md, &ap, pos, self.personal_ap)?;
                let d = self.devices.get_mut(&md).expect("device");
                d.ap = Some(ap.clone());
                d.connected = true;
                self.log(TraceEvent::Attach {
                    md: md.to_string(),
                    ap: ap.to_string(),
                    controller: self.ctrl_names[&ctrl].clone(),
                });
            }
        }
        Ok(())
    }

    fn schedule_initial(&mut self, scenario: &Scenario) -> Result<()> {
        let p = self.params.clone();
        if p.mode.access_controlled() && self.authority.groups().next().is_some() {
            let groups: Vec<GroupId> = self.authority.groups().map(|g| g.id.clone()).collect();
            for g in groups {
                self.queue.schedule(0.0, Event::Rotate { group: g, k: 0 })?;
            }
            let beaconing: BTreeSet<ApId> = self
                .authority
                .groups()
                .flat_map(|g| g.members.iter().cloned())
                .collect();
            for ap in beaconing {
                let off = self.aps[&ap].beacon_offset;
                self.queue.schedule(off, Event::Beacon { ap, k: 0 })?;
            }
        }
        let wps: Vec<(MdId, Vec<f64>)> = self
            .devices
            .iter()
            .map(|(m, d)| (m.clone(), d.waypoints.iter().map(|w| w.t).collect()))
            .collect();
        for (md, times) in wps {
            for (idx, t) in times.into_iter().enumerate() {
                self.queue.schedule(t, Event::Waypoint { md: md.clone(), idx })?;
            }
        }
        let starts: Vec<(FlowId, f64, Option<f64>)> =
            self.flows.iter().map(|(id, f)| (id.clone(), f.start, f.end)).collect();
        for (id, start, end) in starts {
            self.queue.schedule(start, Event::FlowStart(id.clone()))?;
            if let Some(e) = end {
                self.queue.schedule(e, Event::FlowEnd(id))?;
            }
        }
        for (i, f) in scenario.failures.iter().enumerate() {
            self.failures.push(PlannedFailure {
                target: f.target.clone(),
                at: f.at,
                detected_at: None,
                detail: String::new(),
            });
            self.queue.schedule(f.at, Event::Fail(i))?;
        }
        for pk in &scenario.packet_in {
            let i = self.sources.len();
            self.sources.push(PacketInSource {
                switch: pk.switch.clone(),
                rate: pk.rate,
                end: pk.end.unwrap_or(p.duration).min(p.duration),
            });
            let first = pk.start + self.exp(pk.rate);
            if first <= self.sources[i].end {
                self.queue.schedule(first, Event::PacketIn(i))?;
            }
        }
        let n = (p.duration / p.sample_period + 1e-9).floor() as u64;
        for k in 0..=n {
            self.queue
                .schedule(periodic(0.0, p.sample_period, k), Event::Sample(k))?;
        }
        Ok(())
    }

    /// Schedules a failure of `target` at `at`.
    pub fn inject_failure(&mut self, target: FailureTarget, at: f64) -> Result<()> {
        let known = match &target {
            FailureTarget::Controller { name } => self.ctrl_ids.contains_key(name),
            FailureTarget::Ap { name } => self.aps.contains_key(&ApId::new(name.clone())),
            FailureTarget::Link { a, b } => self.ctrl_ids.contains_key(a) && self.ctrl_ids.contains_key(b),
        };
        if !known {
            return Err(SimError::InvalidTarget(target.to_string()));
        }
        let i = self.failures.len();
        self.failures.push(PlannedFailure {
            target,
            at,
            detected_at: None,
            detail: String::new(),
        });
        self.queue.schedule(at, Event::Fail(i))?;
        Ok(())
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn control_plane(&self) -> &ControlPlane {
        &self.cp
    }

    pub fn authority(&self) -> &KeyAuthority {
        &self.authority
    }

    pub fn gate(&self) -> &AccessGate {
        &self.gate
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn trace_digest(&self) -> String {
        hex::encode(self.digest.clone().finalize())
    }

    pub fn waypoints(&self, md: &MdId) -> Option<&[Waypoint]> {
        self.devices.get(md).map(|d| d.waypoints.as_slice())
    }

    pub fn device_states(&self) -> Vec<DeviceState> {
        self.devices
            .iter()
            .map(|(md, d)| DeviceState {
                md: md.clone(),
                position: d.position,
                ap: d.ap.clone(),
                connected: d.connected,
                in_transition: d.in_transition(),
            })
            .collect()
    }

    pub fn ap_coverage(&self, ap: &ApId) -> Option<Disc> {
        self.aps.get(ap).map(|a| a.coverage)
    }

    pub fn stream(&self, flow: &FlowId) -> Option<&TransportStream> {
        self.streams.get(flow)
    }

    /// Runs every event with time `<= t_end`; returns how many ran.
    pub fn run_until(&mut self, t_end: f64) -> Result<u64> {
        let mut n = 0;
        while let Some((t, _, ev)) = self.queue.pop_until(t_end) {
            let label = ev.label();
            self.handle(ev).map_err(|e| SimError::Handler {
                t,
                event: label,
                source: Box::new(e),
            })?;
            n += 1;
        }
        self.events += n;
        self.queue.advance_to(t_end);
        for s in self.streams.values_mut() {
            s.advance(t_end);
        }
        Ok(n)
    }

    /// Runs to the configured duration and produces the report.
    pub fn run(&mut self) -> Result<MetricsReport> {
        self.run_until(self.params.duration)?;
        Ok(self.report())
    }

    fn log(&mut self, event: TraceEvent) {
        let entry = TraceEntry {
            t: self.queue.now(),
            event,
        };
        let line = serde_json::to_string(&entry).expect("trace entry serializes");
        self.digest.update(line.as_bytes());
        self.digest.update(b"\n");
        self.trace.push(entry);
    }

    fn log_error(&mut self, context: impl Into<String>, error: impl std::fmt::Display) {
        let context = context.into();
        log::debug!("t={}: {context}: {error}", self.queue.now());
        self.log(TraceEvent::Error {
            context,
            error: error.to_string(),
        });
    }

    fn exp(&mut self, rate: f64) -> f64 {
        Exp::new(rate).expect("positive rate").sample(&mut self.rng)
    }

    fn at(&mut self, delay: f64, ev: Event) -> Result<EventHandle> {
        let t = self.queue.now() + delay;
        self.queue.schedule(t, ev)
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Rotate { group, k } => self.on_rotate(group, k),
            Event::Beacon { ap, k } => self.on_beacon(ap, k),
            Event::Waypoint { md, idx } => self.on_waypoint(md, idx),
            Event::HandoverStep(md) => self.on_handover_step(md),
            Event::AttachRetry(md) => {
                if let Some(d) = self.devices.get_mut(&md) {
                    d.pending = None;
                }
                self.select_and_attach(&md)
            }
            Event::Reconnect(md) => self.on_reconnect(md),
            Event::AuthArrive { md, group, wallet } => self.on_auth(md, group, &wallet),
            Event::GateCheck => {
                self.refresh_all();
                Ok(())
            }
            Event::FlowStart(f) => self.on_flow_start(f),
            Event::FlowEnd(f) => self.on_flow_end(f),
            Event::Fail(i) => self.on_fail(i),
            Event::Detect(i) => self.on_detect(i),
            Event::PacketIn(i) => self.on_packet_in(i),
            Event::JobDone { controller, generation } => self.on_job_done(controller, generation),
            Event::Sample(k) => {
                let t = periodic(0.0, self.params.sample_period, k);
                let sp = self.params.sample_period;
                for (id, s) in self.streams.iter_mut() {
                    let mbps = if k == 0 { 0.0 } else { s.sample(t, sp) };
                    self.samples.entry(id.clone()).or_default().push(Sample { t, mbps });
                }
                Ok(())
            }
        }
    }

    // ---- connectivity ----

    fn best_ap(&self, pos: &Point) -> Option<ApId> {
        let mut best: Option<(&ApId, f64)> = None;
        for (id, a) in &self.aps {
            if !a.alive || !a.coverage.covers(pos) {
                continue;
            }
            let residual = self
                .cp
                .ap_controller(id)
                .and_then(|c| self.cp.view(c))
                .and_then(|v| v.ap(id))
                .filter(|s| s.alive)
                .map(|s| s.residual());
            let Some(r) = residual else { continue };
            if best.is_none_or(|(_, b)| r > b + 1e-9) {
                best = Some((id, r));
            }
        }
        best.map(|(id, _)| id.clone())
    }

    fn offer(&mut self, flow: &FlowId) -> Offer {
        let spec = &self.flows[flow];
        let d = &self.devices[&spec.md];
        let Some(ap) = d.ap.clone().filter(|_| d.connected) else {
            return Offer {
                connected: false,
                forwarded: true,
                bottleneck: 0.0,
            };
        };
        let reserved = self
            .cp
            .session(&spec.md)
            .and_then(|s| s.active_flows.get(flow))
            .and_then(|a| a.ap.as_ref())
            == Some(&ap);
        let info = &self.aps[&ap];
        let connected = reserved && info.alive && d.awaiting.is_empty();
        let capacity = info.capacity;
        let groups = self.authority.groups_of(&ap);
        let forwarded = self
            .gate
            .gate_traffic(&spec.md, &groups, &self.authority, self.queue.now())
            == GateVerdict::Forward;
        let dst = spec.dst.clone();
        let path = self
            .topology
            .path(ap.as_str(), &dst)
            .map(|p| p.bottleneck)
            .unwrap_or(0.0);
        Offer {
            connected: connected && path > 0.0,
            forwarded,
            bottleneck: capacity.min(path),
        }
    }

    fn refresh(&mut self, md: &MdId) {
        let flows = self.devices.get(md).map(|d| d.flows.clone()).unwrap_or_default();
        let now = self.queue.now();
        for f in flows {
            let o = self.offer(&f);
            self.streams.get_mut(&f).expect("stream").update(now, o);
        }
    }

    fn refresh_all(&mut self) {
        let mds: Vec<MdId> = self.devices.keys().cloned().collect();
        for md in mds {
            self.refresh(&md);
        }
    }

    fn disconnect(&mut self, md: &MdId, reason: &str) {
        let now = self.queue.now();
        let d = self.devices.get_mut(md).expect("device");
        if d.disrupted.is_none() {
            d.disrupted = Some(Disruption {
                at: now,
                from_ap: d.ap.clone(),
            });
        }
        let was = d.connected;
        d.connected = false;
        let ap = d.ap.as_ref().map(|a| a.to_string());
        if was {
            self.log(TraceEvent::Disconnect {
                md: md.to_string(),
                ap,
                reason: reason.into(),
            });
        }
        self.refresh(md);
    }

    /// Drops any association in progress.
    fn cancel_transition(&mut self, md: &MdId) {
        let d = self.devices.get_mut(md).expect("device");
        let pending = d.pending.take();
        let txn = d.txn.take();
        d.awaiting.clear();
        d.target = None;
        d.attempts = 0;
        if let Some(h) = pending {
            self.queue.cancel(h);
        }
        if let Some(t) = txn {
            self.cp.abort_handover(t);
        }
    }

    fn on_waypoint(&mut self, md: MdId, idx: usize) -> Result<()> {
        let wp = self.devices[&md].waypoints[idx].clone();
        self.log(TraceEvent::Move {
            md: md.to_string(),
            x: wp.position.x,
            y: wp.position.y,
            status: wp.status,
        });
        let d = self.devices.get_mut(&md).expect("device");
        d.position = wp.position;
        let gone: BTreeSet<ApId> = d
            .wallet
            .keys()
            .map(|k| k.ap.clone())
            .filter(|ap| !self.aps[ap].coverage.covers(&wp.position))
            .collect();
        for ap in gone {
            self.devices.get_mut(&md).expect("device").wallet.drop_ap(&ap);
            self.log(TraceEvent::KeysDropped {
                md: md.to_string(),
                ap: ap.to_string(),
            });
        }

        let d = &self.devices[&md];
        let keep = d.connected
            && !d.in_transition()
            && d.ap.as_ref().is_some_and(|ap| {
                let a = &self.aps[ap];
                a.alive && a.coverage.covers(&wp.position)
            });
        if keep {
            let ap = d.ap.clone().expect("checked");
            if let Err(e) = self.cp.attach(&md, &ap, wp.position, self.personal_ap) {
                self.log_error(format!("position update of {md}"), e);
            }
            self.refresh(&md);
            return Ok(());
        }
        self.cancel_transition(&md);
        self.disconnect(&md, "coverage");
        self.select_and_attach(&md)
    }

    /// Picks the best covering AP and starts associating with it, handing
    /// the device over to that AP's controller first when needed.
    fn select_and_attach(&mut self, md: &MdId) -> Result<()> {
        let pos = self.devices[md].position;
        let Some(target) = self.best_ap(&pos) else {
            return Ok(());
        };
        let Some(ctrl) = self.cp.ap_controller(&target) else {
            return Ok(());
        };
        self.devices.get_mut(md).expect("device").target = Some(target.clone());
        let current = match self.cp.current_controller(md) {
            Ok(c) => c,
            Err(e) => return self.retry(md, e),
        };
        if current != ctrl {
            match self.cp.begin_handover(md, ctrl) {
                Ok(txn) => {
                    self.devices.get_mut(md).expect("device").txn = Some(txn);
                    self.on_handover_step(md.clone())
                }
                Err(e) => self.retry(md, e),
            }
        } else {
            self.attach_now(md)
        }
    }

    fn retry(&mut self, md: &MdId, err: impl std::fmt::Display) -> Result<()> {
        let limit = self.params.handover_attempts;
        let d = self.devices.get_mut(md).expect("device");
        d.attempts += 1;
        let attempt = d.attempts;
        self.log(TraceEvent::HandoverRetry {
            md: md.to_string(),
            attempt,
            error: err.to_string(),
        });
        if attempt > limit {
            self.log(TraceEvent::HandoverAbandoned { md: md.to_string() });
            let d = self.devices.get_mut(md).expect("device");
            d.attempts = 0;
            d.target = None;
            return Ok(());
        }
        let h = self.at(self.params.handover_retry, Event::AttachRetry(md.clone()))?;
        self.devices.get_mut(md).expect("device").pending = Some(h);
        Ok(())
    }

    fn on_handover_step(&mut self, md: MdId) -> Result<()> {
        let d = self.devices.get_mut(&md).expect("device");
        d.pending = None;
        let Some(mut txn) = d.txn.take() else {
            return Ok(());
        };
        let stage = txn.stage();
        let before = txn.latency();
        match self.cp.step_handover(&mut txn) {
            Ok(next) => {
                let to = self.ctrl_names[&txn.target()].clone();
                self.log(TraceEvent::HandoverStep {
                    md: md.to_string(),
                    stage: stage_name(stage).into(),
                    to,
                });
                if next == HandoverStage::Done {
                    let o = txn.outcome();
                    let name =
                        |c: ControllerId, s: &Self| s.ctrl_names.get(&c).cloned().unwrap_or_else(|| c.to_string());
                    let attempts = self.devices[&md].attempts + 1;
                    let ch = ControllerHandover {
                        from: o.previous.map(|c| name(c, self)).unwrap_or_default(),
                        to: name(o.new, self),
                        supervisor: name(o.supervisor, self),
                        lookup_hops: o.lookup_hops,
                        messages: o.messages,
                        latency: o.latency,
                        used_replica: o.used_replica,
                        attempts,
                    };
                    *self.lookup_hops.entry(o.lookup_hops).or_default() += 1;
                    if !o.noop {
                        self.devices.get_mut(&md).expect("device").controller_handover = Some(ch);
                    }
                    self.attach_now(&md)
                } else {
                    let delay = txn.latency() - before;
                    self.devices.get_mut(&md).expect("device").txn = Some(txn);
                    let h = self.at(delay, Event::HandoverStep(md.clone()))?;
                    self.devices.get_mut(&md).expect("device").pending = Some(h);
                    Ok(())
                }
            }
            Err(e) => self.retry(&md, e),
        }
    }

    fn attach_now(&mut self, md: &MdId) -> Result<()> {
        let d = &self.devices[md];
        let Some(target) = d.target.clone() else {
            return Ok(());
        };
        let pos = d.position;
        match self.cp.attach(md, &target, pos, self.personal_ap) {
            Ok(out) => {
                let delay = if self.personal_ap {
                    out.association_latency + self.params.wireless_latency
                } else {
                    self.params.reassociation_delay
                };
                let d = self.devices.get_mut(md).expect("device");
                d.migrated = out.migrated;
                let h = self.at(delay, Event::Reconnect(md.clone()))?;
                self.devices.get_mut(md).expect("device").pending = Some(h);
                Ok(())
            }
            Err(e) => self.retry(md, e),
        }
    }

    fn on_reconnect(&mut self, md: MdId) -> Result<()> {
        let now = self.queue.now();
        let d = self.devices.get_mut(&md).expect("device");
        d.pending = None;
        let Some(target) = d.target.take() else {
            return Ok(());
        };
        if !self.aps[&target].alive {
            return self.select_and_attach(&md);
        }
        let d = self.devices.get_mut(&md).expect("device");
        d.attempts = 0;
        d.ap = Some(target.clone());
        d.connected = true;
        let migrated = d.migrated;
        let controller = d.controller_handover.take();
        if let Some(dis) = d.disrupted.take() {
            self.handovers.push(HandoverRecord {
                md: md.to_string(),
                from_ap: dis.from_ap.map(|a| a.to_string()),
                to_ap: target.to_string(),
                disrupted_at: dis.at,
                reconnected_at: now,
                delay: now - dis.at,
                migrated,
                controller,
            });
        }
        self.log(TraceEvent::Reconnect {
            md: md.to_string(),
            ap: target.to_string(),
            migrated,
        });
        if self.params.mode.access_controlled() {
            for g in self.authority.groups_of(&target) {
                self.devices.get_mut(&md).expect("device").awaiting.insert(g.clone());
                self.present(&md, &g)?;
            }
        }
        self.refresh(&md);
        Ok(())
    }

    // ---- access control ----

    fn on_rotate(&mut self, g: GroupId, k: u64) -> Result<()> {
        let now = self.queue.now();
        let aps = &self.aps;
        let rot = self
            .authority
            .rotate_group_keys(&g, now, &mut self.rng, |ap| aps.get(ap).is_some_and(|a| a.alive))?;
        self.log(TraceEvent::Rotation {
            group: g.to_string(),
            epoch: rot.epoch,
        });
        self.refresh_all();
        self.at(self.params.reauth_window, Event::GateCheck)?;
        let next = periodic(0.0, self.params.rotation_period, k + 1);
        self.queue.schedule(next, Event::Rotate { group: g, k: k + 1 })?;
        Ok(())
    }

    fn on_beacon(&mut self, ap: ApId, k: u64) -> Result<()> {
        let now = self.queue.now();
        if self.aps[&ap].alive {
            if let Some(b) = self.authority.emit_beacon(&ap, now) {
                let cov = self.aps[&ap].coverage;
                let mds: Vec<MdId> = self
                    .devices
                    .iter()
                    .filter(|(_, d)| cov.covers(&d.position))
                    .map(|(m, _)| m.clone())
                    .collect();
                for md in mds {
                    let mut changed = false;
                    for k in &b.keys {
                        let d = self.devices.get_mut(&md).expect("device");
                        if d.wallet.receive(k) {
                            changed = true;
                            let pos = d.position;
                            self.log(TraceEvent::BeaconRx {
                                md: md.to_string(),
                                ap: ap.to_string(),
                                group: k.group.to_string(),
                                epoch: k.epoch,
                                x: pos.x,
                                y: pos.y,
                            });
                        }
                    }
                    if changed {
                        self.maybe_present(&md)?;
                    }
                }
            }
        }
        let next = periodic(self.aps[&ap].beacon_offset, self.params.beacon_period, k + 1);
        self.queue.schedule(next, Event::Beacon { ap, k: k + 1 })?;
        Ok(())
    }

    /// Presents the wallet for every group of the serving AP for which it
    /// now holds a full, single-epoch key set not presented before.
    fn maybe_present(&mut self, md: &MdId) -> Result<()> {
        let d = &self.devices[md];
        let Some(ap) = d.ap.clone().filter(|_| d.connected && !d.in_transition()) else {
            return Ok(());
        };
        for g in self.authority.groups_of(&ap) {
            let group = self.authority.group(&g).expect("registered");
            let keys: Option<Vec<_>> = group.members.iter().map(|m| d.wallet.key_for(&g, m)).collect();
            let Some(keys) = keys else { continue };
            if keys.windows(2).any(|w| w[0].epoch != w[1].epoch) {
                continue;
            }
            let tokens: Vec<KeyToken> = keys.iter().map(|k| k.key_id).collect();
            if d.last_presented.get(&g) == Some(&tokens) {
                continue;
            }
            self.present(md, &g)?;
            return self.maybe_present(md);
        }
        Ok(())
    }

    fn present(&mut self, md: &MdId, g: &GroupId) -> Result<()> {
        let d = self.devices.get_mut(md).expect("device");
        let Some(ap) = d.ap.clone() else { return Ok(()) };
        let members = self.authority.group(g).expect("registered").members.clone();
        let mut keys = Vec::new();
        let mut tokens = Vec::new();
        for m in &members {
            if let Some(k) = d.wallet.key_for(g, m) {
                keys.push((m.to_string(), k.epoch));
                tokens.push(k.key_id);
            }
        }
        d.last_presented.insert(g.clone(), tokens);
        let wallet = Box::new(d.wallet.clone());
        self.log(TraceEvent::AuthRequest {
            md: md.to_string(),
            group: g.to_string(),
            keys,
        });
        let ctrl = self.cp.ap_controller(&ap).map(|c| self.cp.resolve_alias(c));
        let uplink = ctrl
            .and_then(|c| self.ctrl_names.get(&c).cloned())
            .and_then(|c| self.topology.path(ap.as_str(), &c))
            .map(|p| p.latency)
            .unwrap_or(self.params.infra_latency);
        let delay = self.params.wireless_latency + uplink;
        self.at(
            delay,
            Event::AuthArrive {
                md: md.clone(),
                group: g.clone(),
                wallet,
            },
        )?;
        Ok(())
    }

    fn on_auth(&mut self, md: MdId, g: GroupId, wallet: &KeyWallet) -> Result<()> {
        let now = self.queue.now();
        let decision = self.authority.authenticate(wallet, &g);
        let (granted, epoch, reason) = match decision {
            Decision::Grant { epoch } => (true, Some(epoch), None),
            Decision::Deny { reason } => (false, None, Some(reason.to_string())),
        };
        self.gate.record(&md, &g, decision, now);
        self.devices.get_mut(&md).expect("device").awaiting.remove(&g);
        self.auth_log.push(AuthLogEntry {
            t: now,
            md: md.to_string(),
            group: g.to_string(),
            granted,
            epoch,
            reason: reason.clone(),
        });
        self.log(TraceEvent::AuthDecision {
            md: md.to_string(),
            group: g.to_string(),
            granted,
            epoch,
            reason,
        });
        self.refresh(&md);
        Ok(())
    }

    // ---- flows ----

    fn on_flow_start(&mut self, f: FlowId) -> Result<()> {
        let spec = self.flows[&f].clone();
        let reserved = match self.cp.start_flow(&spec.md, spec.descriptor.clone()) {
            Ok(r) => r,
            Err(e) => {
                self.log_error(format!("start of {f}"), e);
                false
            }
        };
        self.log(TraceEvent::FlowStart {
            flow: f.to_string(),
            md: spec.md.to_string(),
            reserved,
        });
        let now = self.queue.now();
        self.streams.get_mut(&f).expect("stream").set_active(now, true);
        self.refresh(&spec.md);
        Ok(())
    }

    fn on_flow_end(&mut self, f: FlowId) -> Result<()> {
        let md = self.flows[&f].md.clone();
        if let Err(e) = self.cp.end_flow(&md, &f) {
            self.log_error(format!("end of {f}"), e);
        }
        self.log(TraceEvent::FlowEnd { flow: f.to_string() });
        let now = self.queue.now();
        self.streams.get_mut(&f).expect("stream").set_active(now, false);
        Ok(())
    }

    // ---- failures ----

    fn on_fail(&mut self, i: usize) -> Result<()> {
        let target = self.failures[i].target.clone();
        let label = target.to_string();
        match &target {
            FailureTarget::Controller { name } => {
                let id = self.ctrl_ids[name];
                let live = self.cp.ring().is_live(id);
                if !live || self.cp.crash_controller(id).is_err() {
                    self.log(TraceEvent::FailureIgnored { target: label });
                    return Ok(());
                }
                // queued Packet-In work is lost with the controller
                if let Some(q) = self.ctrl_queues.get_mut(&id) {
                    let lost = q
                        .jobs
                        .iter()
                        .chain(q.current.iter())
                        .filter(|j| **j == Job::PacketIn)
                        .count();
                    q.jobs.clear();
                    q.current = None;
                    q.generation += 1;
                    self.packet_in.entry(name.clone()).or_default().dropped += lost as u64;
                }
            }
            FailureTarget::Ap { name } => {
                let ap = ApId::new(name.clone());
                if !self.aps[&ap].alive {
                    self.log(TraceEvent::FailureIgnored { target: label });
                    return Ok(());
                }
                self.aps.get_mut(&ap).expect("ap").alive = false;
                self.log(TraceEvent::Failure { target: label });
                let on_ap: Vec<MdId> = self
                    .devices
                    .iter()
                    .filter(|(_, d)| d.ap.as_ref() == Some(&ap) && d.connected)
                    .map(|(m, _)| m.clone())
                    .collect();
                for md in on_ap {
                    self.disconnect(&md, "ap failure");
                }
                self.queue
                    .schedule(self.queue.now() + self.params.detection_delay, Event::Detect(i))?;
                return Ok(());
            }
            FailureTarget::Link { a, b } => {
                let (ia, ib) = (self.ctrl_ids[a], self.ctrl_ids[b]);
                if !self.cp.link_up(ia, ib) {
                    self.log(TraceEvent::FailureIgnored { target: label });
                    return Ok(());
                }
                self.cp.fail_link(ia, ib);
                self.log(TraceEvent::Failure { target: label });
                self.failures[i].detected_at = Some(self.queue.now());
                return Ok(());
            }
        }
        self.log(TraceEvent::Failure { target: label });
        self.queue
            .schedule(self.queue.now() + self.params.detection_delay, Event::Detect(i))?;
        Ok(())
    }

    fn on_detect(&mut self, i: usize) -> Result<()> {
        let now = self.queue.now();
        self.failures[i].detected_at = Some(now);
        match self.failures[i].target.clone() {
            FailureTarget::Controller { name } => {
                let id = self.ctrl_ids[&name];
                if !self.cp.ring().contains(id) {
                    // already recovered together with an adjacent failure
                    self.failures[i].detail = "recovered with an adjacent failure".into();
                    return Ok(());
                }
                match self.cp.recover_controller_failure(id) {
                    Ok(rep) => {
                        self.record_loss += rep.lost_records.len();
                        let failed: Vec<String> = rep.failed.iter().map(|c| self.ctrl_name(*c)).collect();
                        let heir = rep.heir.map(|c| self.ctrl_name(c));
                        self.failures[i].detail = format!(
                            "heir {}; {} record(s) recovered, {} lost; {} session(s) recovered, {} lost",
                            heir.clone().unwrap_or_default(),
                            rep.recovered_records,
                            rep.lost_records.len(),
                            rep.recovered_sessions,
                            rep.lost_sessions.len()
                        );
                        self.log(TraceEvent::ControllerRecovery {
                            failed,
                            heir,
                            recovered_records: rep.recovered_records,
                            lost_records: rep.lost_records.len(),
                            lost_sessions: rep.lost_sessions.len(),
                        });
                    }
                    Err(e) => {
                        self.failures[i].detail = format!("recovery failed: {e}");
                        self.log_error(format!("recovery of {name}"), e);
                    }
                }
                self.refresh_all();
            }
            FailureTarget::Ap { name } => {
                let ap = ApId::new(name.clone());
                match self.cp.recover_ap_failure(&ap) {
                    Ok(rec) => {
                        self.failures[i].detail = format!(
                            "{} reassigned, {} unassigned, {} flow(s) stranded",
                            rec.reassigned.len(),
                            rec.unassigned.len(),
                            rec.stranded.len()
                        );
                        for (md, to) in rec.reassigned {
                            self.log(TraceEvent::ApReassign {
                                md: md.to_string(),
                                ap: to.to_string(),
                            });
                            let d = self.devices.get_mut(&md).expect("device");
                            if d.in_transition() || d.ap.as_ref() != Some(&ap) {
                                continue;
                            }
                            d.target = Some(to.clone());
                            d.migrated = true;
                            let ctrl = self.cp.ap_controller(&to).expect("reassigned AP has a home");
                            let delay = self.cp.latency().controller_to_ap(ctrl, &to) + self.params.wireless_latency;
                            let h = self.at(delay, Event::Reconnect(md.clone()))?;
                            self.devices.get_mut(&md).expect("device").pending = Some(h);
                        }
                        for md in rec.unassigned {
                            self.log(TraceEvent::ApUnassigned { md: md.to_string() });
                        }
                    }
                    Err(e) => {
                        self.failures[i].detail = format!("recovery failed: {e}");
                        self.log_error(format!("recovery of {name}"), e);
                    }
                }
            }
            FailureTarget::Link { .. } => {}
        }
        Ok(())
    }

    fn ctrl_name(&self, c: ControllerId) -> String {
        self.ctrl_names.get(&c).cloned().unwrap_or_else(|| c.to_string())
    }

    // ---- Packet-In workload ----

    fn on_packet_in(&mut self, i: usize) -> Result<()> {
        let src = self.sources[i].clone();
        let home = self.cp.resolve_alias(self.switch_ctrl[&src.switch]);
        let name = self.ctrl_name(home);
        self.packet_in.entry(name.clone()).or_default().arrived += 1;
        if self.cp.ring().is_live(home) {
            if !self.enqueue(home, Job::PacketIn) {
                self.packet_in.entry(name).or_default().dropped += 1;
            }
        } else {
            self.packet_in.entry(name).or_default().dropped += 1;
        }
        let next = self.queue.now() + self.exp(src.rate);
        if next <= src.end {
            self.queue.schedule(next, Event::PacketIn(i))?;
        }
        Ok(())
    }

    fn service_time(&self, job: Job) -> f64 {
        match job {
            Job::PacketIn => self.params.packet_in_service,
            Job::LookupHop => self.params.lookup_service,
        }
    }

    /// Returns false when the job was dropped.
    fn enqueue(&mut self, c: ControllerId, job: Job) -> bool {
        let cap = self.params.packet_in_queue;
        let q = self.ctrl_queues.entry(c).or_default();
        if q.current.is_some() {
            if q.jobs.len() >= cap {
                return false;
            }
            q.jobs.push_back(job);
            return true;
        }
        q.current = Some(job);
        let generation = q.generation;
        let d = self.service_time(job);
        self.at(
            d,
            Event::JobDone {
                controller: c,
                generation,
            },
        )
        .expect("future event");
        true
    }

    fn on_job_done(&mut self, c: ControllerId, generation: u64) -> Result<()> {
        let q = self.ctrl_queues.entry(c).or_default();
        if q.generation != generation {
            return Ok(());
        }
        let Some(job) = q.current.take() else { return Ok(()) };
        if job == Job::PacketIn {
            let name = self.ctrl_name(c);
            self.packet_in.entry(name.clone()).or_default().processed += 1;
            if self.rng.gen::<f64>() < self.params.packet_in_lookup_ratio {
                let size = self.cp.ring().space().size();
                let key = RingKey(self.rng.gen_range(0..size));
                match self.cp.lookup(c, key) {
                    Ok(l) => {
                        *self.lookup_hops.entry(l.hops).or_default() += 1;
                        for h in l.path.iter().skip(1) {
                            if self.enqueue(*h, Job::LookupHop) {
                                self.packet_in.entry(name.clone()).or_default().lookup_jobs += 1;
                            }
                        }
                    }
                    Err(e) => self.log_error(format!("lookup from {name}"), e),
                }
            }
        }
        let q = self.ctrl_queues.get_mut(&c).expect("queue");
        if let Some(next) = q.jobs.pop_front() {
            q.current = Some(next);
            let d = self.service_time(next);
            self.at(
                d,
                Event::JobDone {
                    controller: c,
                    generation,
                },
            )?;
        }
        Ok(())
    }

    // ---- report ----

    pub fn report(&self) -> MetricsReport {
        let series: Vec<StreamSeries> = self
            .streams
            .iter()
            .map(|(id, s)| StreamSeries {
                stream_id: id.to_string(),
                md: self.flows[id].md.to_string(),
                demand: s.demand,
                samples: self.samples.get(id).cloned().unwrap_or_default(),
                volume: transport::round6(s.volume()),
                active_time: transport::round6(s.active_time()),
            })
            .collect();
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let delays: Vec<f64> = self.handovers.iter().map(|h| h.delay).collect();
        let volume: f64 = self.streams.values().map(|s| s.volume()).sum();
        let active: f64 = self.streams.values().map(|s| s.active_time()).sum();
        let processed: u64 = self.packet_in.values().map(|s| s.processed).sum();
        let hop_count: u64 = self.lookup_hops.values().sum();
        let hop_sum: u64 = self.lookup_hops.iter().map(|(h, n)| u64::from(*h) * n).sum();
        let grants = self.auth_log.iter().filter(|a| a.granted).count();
        let summary = Summary {
            events: self.events,
            handovers: self.handovers.len(),
            mean_handover_delay: mean(&delays).map(transport::round6),
            mean_throughput: (active > 0.0).then(|| transport::round6(volume / active)),
            packet_in_processed: processed,
            packet_in_throughput: transport::round6(processed as f64 / self.params.duration),
            mean_lookup_hops: (hop_count > 0).then(|| transport::round6(hop_sum as f64 / hop_count as f64)),
            grants,
            denies: self.auth_log.len() - grants,
            record_loss: self.record_loss,
            trace_entries: self.trace.len(),
            trace_digest: self.trace_digest(),
        };
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            scenario: self.name.clone(),
            seed: self.params.seed,
            mode: self.params.mode,
            personal_ap: self.personal_ap,
            duration: self.params.duration,
            sample_period: self.params.sample_period,
            series,
            handovers: self.handovers.clone(),
            packet_in: self.packet_in.clone(),
            lookup_hops: self.lookup_hops.clone(),
            auth_log: self.auth_log.clone(),
            failures: self
                .failures
                .iter()
                .map(|f| FailureRecord {
                    t: f.at,
                    target: f.target.to_string(),
                    detected_at: f.detected_at,
                    detail: f.detail.clone(),
                })
                .collect(),
            record_loss: self.record_loss,
            summary,
        }
    }
}

/// `offset + k * period`, snapped to the nanosecond so that periodic
/// events land on clean instants.
fn periodic(offset: f64, period: f64, k: u64) -> f64 {
    ((offset + k as f64 * period) * 1e9).round() / 1e9
}

fn stage_name(s: HandoverStage) -> &'static str {
    match s {
        HandoverStage::Locate => "locate",
        HandoverStage::Query => "query",
        HandoverStage::Fetch => "fetch",
        HandoverStage::Commit => "commit",
        HandoverStage::Done => "done",
    }
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}
