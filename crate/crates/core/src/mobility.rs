//! Mobility management: supervisory records on the controller ring,
//! inter-controller handover, Personal AP association migration and failure
//! recovery.
//!
//! Each device's supervisory record lives at the ring owner of its hashed
//! identifier and names the previous and current controllers. Handover is a
//! four-step exchange: the new controller locates the supervisor, learns the
//! current controller from it, fetches the session directly from that
//! controller, then updates the supervisor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::Point;
use crate::ids::{ApId, FlowId, MacAddr, MdId};
use crate::ring::{ControllerId, JoinReport, Lookup, RecordKey, Ring, RingError, RingKey};
use crate::scheduler::{self, ApStatus, FlowRequest, PartitionView, RadioTech, ScheduleError, ViewEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("mobile {0} is already registered")]
    AlreadyRegistered(MdId),
    #[error("unknown mobile {0}")]
    UnknownMobile(MdId),
    #[error("unknown controller {0}")]
    UnknownController(ControllerId),
    #[error("controller {0} is down")]
    ControllerDown(ControllerId),
    #[error("unknown AP {0}")]
    UnknownAp(ApId),
    #[error("AP {0} is already attached to a controller")]
    DuplicateAp(ApId),
    #[error("handover of {md} failed: {reason}")]
    HandoverFailure { md: MdId, reason: String },
    #[error("a handover of {0} is already in progress")]
    HandoverInProgress(MdId),
    #[error("{0} is not associated")]
    NotAssociated(MdId),
    #[error("migration of {md} to {ap} refused: {reason}")]
    MigrationRefused { md: MdId, ap: ApId, reason: String },
    #[error("unknown flow {0}")]
    UnknownFlow(FlowId),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T> = std::result::Result<T, MobilityError>;

/// Default one-way latency between two controllers, in seconds.
pub const DEFAULT_CONTROL_LATENCY: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupervisoryRecord {
    pub md_id: MdId,
    pub md_key: RingKey,
    /// `None` until the first handover.
    pub previous: Option<ControllerId>,
    pub current: ControllerId,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowDescriptor {
    pub flow: FlowId,
    pub flow_type: String,
    /// Mbps
    pub demand: f64,
    pub tech: RadioTech,
}

/// Opaque per-association key material.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SecurityKeys(pub [u8; 16]);

impl SecurityKeys {
    fn derive(md_mac: MacAddr, association_id: u16) -> Self {
        let mut h = Sha256::new();
        h.update(md_mac.0);
        h.update(association_id.to_be_bytes());
        let digest = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        SecurityKeys(out)
    }
}

impl fmt::Display for SecurityKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for SecurityKeys {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Link-layer association parameters between a device and its AP.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssociationRecord {
    pub md_mac: MacAddr,
    pub ap_mac: MacAddr,
    pub association_id: u16,
    pub frame_seq: u64,
    pub security_keys: SecurityKeys,
    pub flow_status: BTreeMap<FlowId, FlowDescriptor>,
}

impl AssociationRecord {
    /// Everything the device can observe: the record with the AP address
    /// blanked out.
    pub fn md_view(&self) -> AssociationRecord {
        AssociationRecord {
            ap_mac: MacAddr([0; 6]),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActiveFlow {
    pub descriptor: FlowDescriptor,
    /// Controller currently routing the flow.
    pub controller: ControllerId,
    /// AP carrying the flow, `None` while stranded.
    pub ap: Option<ApId>,
}

/// Per-device state held by the associated controller.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionState {
    pub md: MdId,
    pub association: Option<AssociationRecord>,
    pub active_flows: BTreeMap<FlowId, ActiveFlow>,
    pub partition: ControllerId,
}

/// One-way message latencies of the control network.
#[derive(Clone, Debug, Default)]
pub struct ControlLatency {
    pub default: f64,
    pairs: BTreeMap<(ControllerId, ControllerId), f64>,
    to_ap: BTreeMap<(ControllerId, ApId), f64>,
}

impl ControlLatency {
    pub fn uniform(default: f64) -> Self {
        ControlLatency {
            default,
            ..Default::default()
        }
    }

    pub fn set(&mut self, a: ControllerId, b: ControllerId, secs: f64) {
        self.pairs.insert((a, b), secs);
        self.pairs.insert((b, a), secs);
    }

    pub fn set_ap(&mut self, c: ControllerId, ap: ApId, secs: f64) {
        self.to_ap.insert((c, ap), secs);
    }

    pub fn between(&self, a: ControllerId, b: ControllerId) -> f64 {
        if a == b {
            0.0
        } else {
            self.pairs.get(&(a, b)).copied().unwrap_or(self.default)
        }
    }

    pub fn controller_to_ap(&self, c: ControllerId, ap: &ApId) -> f64 {
        self.to_ap.get(&(c, ap.clone())).copied().unwrap_or(self.default)
    }

    fn path(&self, path: &[ControllerId]) -> f64 {
        path.windows(2).map(|w| self.between(w[0], w[1])).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HandoverOutcome {
    pub md: MdId,
    pub supervisor: ControllerId,
    /// Controller the session was fetched from.
    pub previous: Option<ControllerId>,
    pub new: ControllerId,
    pub noop: bool,
    /// The session came from a successor's replica because the previous
    /// controller was down.
    pub used_replica: bool,
    pub rerouted: usize,
    pub lookup_hops: u32,
    pub messages: u32,
    /// Simulated control-plane latency in seconds.
    pub latency: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub enum HandoverStage {
    Locate,
    Query,
    Fetch,
    Commit,
    Done,
}

/// An in-flight handover, advanced one protocol step at a time with
/// [`ControlPlane::step_handover`].
#[derive(Clone, Debug)]
pub struct HandoverTxn {
    md: MdId,
    rk: RecordKey,
    new: ControllerId,
    stage: HandoverStage,
    supervisor: Option<ControllerId>,
    source: Option<ControllerId>,
    session: Option<SessionState>,
    noop: bool,
    used_replica: bool,
    hops: u32,
    messages: u32,
    latency: f64,
    rerouted: usize,
}

impl HandoverTxn {
    pub fn stage(&self) -> HandoverStage {
        self.stage
    }

    pub fn md(&self) -> &MdId {
        &self.md
    }

    pub fn target(&self) -> ControllerId {
        self.new
    }

    /// Control-plane seconds accumulated by the steps run so far.
    pub fn latency(&self) -> f64 {
        self.latency
    }

    pub fn outcome(&self) -> HandoverOutcome {
        HandoverOutcome {
            md: self.md.clone(),
            supervisor: self.supervisor.unwrap_or(self.new),
            previous: self.source,
            new: self.new,
            noop: self.noop,
            used_replica: self.used_replica,
            rerouted: self.rerouted,
            lookup_hops: self.hops,
            messages: self.messages,
            latency: self.latency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttachOutcome {
    pub ap: ApId,
    pub controller: ControllerId,
    pub handover: Option<HandoverOutcome>,
    /// Association reinstated via Personal AP rather than re-established.
    pub migrated: bool,
    pub association: AssociationRecord,
    pub stranded: Vec<FlowId>,
    /// Controller-to-AP signalling time of the association step.
    pub association_latency: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub failed: Vec<ControllerId>,
    pub heir: Option<ControllerId>,
    pub recovered_records: usize,
    pub lost_records: Vec<MdId>,
    pub recovered_sessions: usize,
    pub lost_sessions: Vec<MdId>,
}

impl RecoveryReport {
    pub fn is_lossless(&self) -> bool {
        self.lost_records.is_empty() && self.lost_sessions.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ApRecovery {
    pub ap: Option<ApId>,
    pub reassigned: Vec<(MdId, ApId)>,
    pub unassigned: Vec<MdId>,
    pub stranded: Vec<(MdId, FlowId)>,
}

/// The distributed control plane, simulated in one address space.
#[derive(Clone, Debug)]
pub struct ControlPlane {
    ring: Ring<SupervisoryRecord>,
    latency: ControlLatency,
    sessions: BTreeMap<ControllerId, BTreeMap<MdId, SessionState>>,
    /// holder -> origin -> sessions
    session_replicas: BTreeMap<ControllerId, BTreeMap<ControllerId, BTreeMap<MdId, SessionState>>>,
    views: BTreeMap<ControllerId, PartitionView>,
    ap_home: BTreeMap<ApId, ControllerId>,
    ap_macs: BTreeMap<ApId, MacAddr>,
    /// Live association copies held by each AP.
    ap_records: BTreeMap<ApId, BTreeMap<MdId, AssociationRecord>>,
    adopted_by: BTreeMap<ControllerId, ControllerId>,
    md_macs: BTreeMap<MdId, MacAddr>,
    in_flight: BTreeSet<MdId>,
    next_aid: u16,
    reassociations: BTreeMap<MdId, u32>,
    /// Finger links that are down, stored with the smaller id first.
    failed_links: BTreeSet<(ControllerId, ControllerId)>,
}

fn link(a: ControllerId, b: ControllerId) -> (ControllerId, ControllerId) {
    (a.min(b), a.max(b))
}

impl ControlPlane {
    pub fn new(bits: u32, replication: usize) -> Result<Self> {
        Ok(ControlPlane {
            ring: Ring::new(bits, replication)?,
            latency: ControlLatency::uniform(DEFAULT_CONTROL_LATENCY),
            sessions: BTreeMap::new(),
            session_replicas: BTreeMap::new(),
            views: BTreeMap::new(),
            ap_home: BTreeMap::new(),
            ap_macs: BTreeMap::new(),
            ap_records: BTreeMap::new(),
            adopted_by: BTreeMap::new(),
            md_macs: BTreeMap::new(),
            in_flight: BTreeSet::new(),
            next_aid: 0,
            reassociations: BTreeMap::new(),
            failed_links: BTreeSet::new(),
        })
    }

    pub fn ring(&self) -> &Ring<SupervisoryRecord> {
        &self.ring
    }

    pub fn latency_mut(&mut self) -> &mut ControlLatency {
        &mut self.latency
    }

    pub fn latency(&self) -> &ControlLatency {
        &self.latency
    }

    pub fn view(&self, c: ControllerId) -> Option<&PartitionView> {
        self.views.get(&self.resolve_alias(c))
    }

    pub fn views(&self) -> impl Iterator<Item = &PartitionView> {
        self.views.values()
    }

    pub fn ap_controller(&self, ap: &ApId) -> Option<ControllerId> {
        self.ap_home.get(ap).copied()
    }

    pub fn ap_mac(&self, ap: &ApId) -> Option<MacAddr> {
        self.ap_macs.get(ap).copied()
    }

    /// AP currently holding the live association copy of `md`.
    pub fn serving_ap(&self, md: &MdId) -> Option<&ApId> {
        self.ap_records
            .iter()
            .find(|(_, recs)| recs.contains_key(md))
            .map(|(ap, _)| ap)
    }

    pub fn association_at(&self, ap: &ApId, md: &MdId) -> Option<&AssociationRecord> {
        self.ap_records.get(ap).and_then(|r| r.get(md))
    }

    /// Number of full (non-migrated) associations a device has performed.
    pub fn reassociations(&self, md: &MdId) -> u32 {
        self.reassociations.get(md).copied().unwrap_or(0)
    }

    pub fn registered(&self) -> impl Iterator<Item = &MdId> {
        self.md_macs.keys()
    }

    /// Follows adoption links left by recovered or departed controllers.
    pub fn resolve_alias(&self, mut c: ControllerId) -> ControllerId {
        while let Some(&next) = self.adopted_by.get(&c) {
            c = next;
        }
        c
    }

    pub fn add_controller(&mut self, id: ControllerId) -> Result<JoinReport> {
        let report = self.ring.join(id)?;
        self.views.insert(id, PartitionView::new(id));
        self.sessions.entry(id).or_default();
        self.resync_session_replicas();
        Ok(report)
    }

    /// Graceful departure: the successor takes the records, sessions and
    /// partition of the leaving controller.
    pub fn remove_controller(&mut self, id: ControllerId) -> Result<Option<ControllerId>> {
        let dep = self.ring.leave(id)?;
        let heir = dep.successor;
        if let Some(h) = heir {
            self.adopt(id, h);
        }
        self.resync_session_replicas();
        Ok(heir)
    }

    pub fn add_ap(&mut self, controller: ControllerId, status: ApStatus, mac: MacAddr) -> Result<()> {
        if self.ap_home.contains_key(&status.id) {
            return Err(MobilityError::DuplicateAp(status.id));
        }
        let view = self
            .views
            .get_mut(&controller)
            .ok_or(MobilityError::UnknownController(controller))?;
        self.ap_home.insert(status.id.clone(), controller);
        self.ap_macs.insert(status.id.clone(), mac);
        view.add_ap(status);
        Ok(())
    }

    fn record_key(&self, md: &MdId) -> Result<RecordKey> {
        Ok(RecordKey::new(self.ring.hash_id(md.as_str())?, md.as_str()))
    }

    fn any_live(&self) -> Result<ControllerId> {
        self.ring
            .live_members()
            .next()
            .ok_or(MobilityError::Ring(RingError::EmptyRing))
    }

    /// Creates the supervisory record of a new device at the owner of its
    /// hashed id, with `first` as the current controller.
    pub fn register_md(&mut self, md: &MdId, first: ControllerId) -> Result<SupervisoryRecord> {
        if self.md_macs.contains_key(md) {
            return Err(MobilityError::AlreadyRegistered(md.clone()));
        }
        self.live(first)?;
        let rk = self.record_key(md)?;
        let record = SupervisoryRecord {
            md_id: md.clone(),
            md_key: rk.key,
            previous: None,
            current: first,
        };
        self.ring.put(first, rk, record.clone())?;
        let mac = MacAddr::local(0x0100_0000 + self.md_macs.len() as u32);
        self.md_macs.insert(md.clone(), mac);
        let session = SessionState {
            md: md.clone(),
            association: None,
            active_flows: BTreeMap::new(),
            partition: first,
        };
        self.sessions.entry(first).or_default().insert(md.clone(), session);
        self.replicate_session(first, md);
        Ok(record)
    }

    pub fn fail_link(&mut self, a: ControllerId, b: ControllerId) {
        self.failed_links.insert(link(a, b));
    }

    pub fn restore_link(&mut self, a: ControllerId, b: ControllerId) {
        self.failed_links.remove(&link(a, b));
    }

    pub fn link_up(&self, a: ControllerId, b: ControllerId) -> bool {
        !self.failed_links.contains(&link(a, b))
    }

    /// Ring lookup from `from` that avoids crashed controllers and failed
    /// finger links.
    pub fn lookup(&self, from: ControllerId, key: RingKey) -> Result<Lookup> {
        let crashed = self.ring.crashed();
        Ok(self
            .ring
            .route(from, key, &|id| crashed.contains(&id), &|a, b| self.link_up(a, b))?)
    }

    /// Supervisor of `md` as seen from controller `from`. Does not require
    /// the device to be registered.
    pub fn locate_supervisory(&self, from: ControllerId, md: &MdId) -> Result<ControllerId> {
        let key = self.ring.hash_id(md.as_str())?;
        Ok(self.lookup(from, key)?.owner)
    }

    pub fn supervisory_record(&self, md: &MdId) -> Result<SupervisoryRecord> {
        if !self.md_macs.contains_key(md) {
            return Err(MobilityError::UnknownMobile(md.clone()));
        }
        let rk = self.record_key(md)?;
        match self.ring.get(self.any_live()?, &rk) {
            Ok((r, _)) => Ok(r.clone()),
            Err(RingError::RecordNotFound(_)) => Err(MobilityError::UnknownMobile(md.clone())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn current_controller(&self, md: &MdId) -> Result<ControllerId> {
        Ok(self.resolve_alias(self.supervisory_record(md)?.current))
    }

    /// Controller whose session store holds `md`.
    pub fn session_holder(&self, md: &MdId) -> Option<ControllerId> {
        self.sessions.iter().find(|(_, s)| s.contains_key(md)).map(|(c, _)| *c)
    }

    pub fn session(&self, md: &MdId) -> Option<&SessionState> {
        self.sessions.values().find_map(|s| s.get(md))
    }

    fn session_mut(&mut self, md: &MdId) -> Result<(ControllerId, &mut SessionState)> {
        let c = self
            .session_holder(md)
            .ok_or_else(|| MobilityError::UnknownMobile(md.clone()))?;
        self.live(c)?;
        let s = self.sessions.get_mut(&c).and_then(|m| m.get_mut(md)).expect("holder");
        Ok((c, s))
    }

    fn live(&self, c: ControllerId) -> Result<()> {
        if !self.ring.contains(c) {
            return Err(MobilityError::UnknownController(c));
        }
        if !self.ring.is_live(c) {
            return Err(MobilityError::ControllerDown(c));
        }
        Ok(())
    }

    /// Runs a complete handover of `md` to `new`.
    pub fn handover(&mut self, md: &MdId, new: ControllerId) -> Result<HandoverOutcome> {
        let mut txn = self.begin_handover(md, new)?;
        while txn.stage != HandoverStage::Done {
            self.step_handover(&mut txn)?;
        }
        Ok(txn.outcome())
    }

    pub fn begin_handover(&mut self, md: &MdId, new: ControllerId) -> Result<HandoverTxn> {
        if !self.md_macs.contains_key(md) {
            return Err(MobilityError::UnknownMobile(md.clone()));
        }
        self.live(new)?;
        if !self.in_flight.insert(md.clone()) {
            return Err(MobilityError::HandoverInProgress(md.clone()));
        }
        Ok(HandoverTxn {
            md: md.clone(),
            rk: self.record_key(md)?,
            new,
            stage: HandoverStage::Locate,
            supervisor: None,
            source: None,
            session: None,
            noop: false,
            used_replica: false,
            hops: 0,
            messages: 0,
            latency: 0.0,
            rerouted: 0,
        })
    }

    /// Abandons a transaction; nothing it has not committed is kept.
    pub fn abort_handover(&mut self, txn: HandoverTxn) {
        self.in_flight.remove(&txn.md);
    }

    /// Executes the next protocol step. On error the transaction is aborted
    /// and the supervisory record and session are left as they were.
    pub fn step_handover(&mut self, txn: &mut HandoverTxn) -> Result<HandoverStage> {
        let res = self.step_inner(txn);
        if res.is_err() || txn.stage == HandoverStage::Done {
            self.in_flight.remove(&txn.md);
        }
        res.map(|_| txn.stage)
    }

    fn fail(md: &MdId, reason: impl Into<String>) -> MobilityError {
        MobilityError::HandoverFailure {
            md: md.clone(),
            reason: reason.into(),
        }
    }

    fn step_inner(&mut self, txn: &mut HandoverTxn) -> Result<()> {
        let md = txn.md.clone();
        match txn.stage {
            HandoverStage::Locate => {
                self.live(txn.new)?;
                let unreachable = |e: &dyn std::fmt::Display| Self::fail(&md, format!("supervisor unreachable: {e}"));
                let lookup = self.lookup(txn.new, txn.rk.key).map_err(|e| unreachable(&e))?;
                let (_, slot) = self.ring.resolve(txn.new, txn.rk.key).map_err(|e| unreachable(&e))?;
                txn.supervisor = Some(slot.server());
                txn.hops = lookup.hops;
                txn.messages += lookup.hops;
                txn.latency += self.latency.path(&lookup.path);
                if slot.server() != lookup.owner {
                    txn.latency += self.latency.between(lookup.owner, slot.server());
                }
                txn.stage = HandoverStage::Query;
            }
            HandoverStage::Query => {
                let (record, slot) = self
                    .ring
                    .get(txn.new, &txn.rk)
                    .map_err(|e| Self::fail(&md, format!("supervisory record unavailable: {e}")))?;
                let supervisor = slot.server();
                txn.supervisor = Some(supervisor);
                txn.messages += 1;
                txn.latency += self.latency.between(supervisor, txn.new);
                let current = self.resolve_alias(record.current);
                txn.source = Some(current);
                if current == txn.new {
                    txn.noop = true;
                    txn.stage = HandoverStage::Done;
                } else {
                    txn.stage = HandoverStage::Fetch;
                }
            }
            HandoverStage::Fetch => {
                let mut source = txn.source.expect("set by query");
                // recovered since the query: its sessions now live at the heir
                let heir = self.resolve_alias(source);
                if heir != source && self.ring.is_live(heir) {
                    source = heir;
                    txn.source = Some(heir);
                    txn.used_replica = true;
                }
                let primary = if self.ring.is_live(source) {
                    self.sessions.get(&source).and_then(|m| m.get(&md)).cloned()
                } else {
                    None
                };
                let (session, server) = match primary {
                    Some(s) => (s, source),
                    None => {
                        let (holder, s) = self.session_replica(source, &md).ok_or_else(|| {
                            Self::fail(&md, format!("session lost: {source} and its replicas are down"))
                        })?;
                        txn.used_replica = true;
                        (s, holder)
                    }
                };
                txn.messages += 2;
                txn.latency += 2.0 * self.latency.between(txn.new, server);
                txn.session = Some(session);
                txn.stage = HandoverStage::Commit;
            }
            HandoverStage::Commit => {
                self.live(txn.new)?;
                // the supervisor must be writable before anything moves
                self.ring
                    .resolve(txn.new, txn.rk.key)
                    .map_err(|e| Self::fail(&md, format!("supervisor unreachable: {e}")))?;
                let source = txn.source.expect("set by query");
                let mut session = txn.session.take().expect("set by fetch");
                session.partition = txn.new;
                for f in session.active_flows.values_mut() {
                    f.controller = txn.new;
                }
                txn.rerouted = session.active_flows.len();
                self.sessions.entry(txn.new).or_default().insert(md.clone(), session);
                self.replicate_session(txn.new, &md);
                // ack: the previous controller retires its copy
                for m in self.sessions.iter_mut().filter(|(c, _)| **c != txn.new) {
                    m.1.remove(&md);
                }
                for origins in self.session_replicas.values_mut() {
                    for (origin, m) in origins.iter_mut() {
                        if *origin != txn.new {
                            m.remove(&md);
                        }
                    }
                }
                let record = SupervisoryRecord {
                    md_id: md.clone(),
                    md_key: txn.rk.key,
                    previous: Some(source),
                    current: txn.new,
                };
                let slot = self.ring.put(txn.new, txn.rk.clone(), record)?;
                txn.messages += 2;
                txn.latency += self
                    .latency
                    .between(txn.new, source)
                    .max(self.latency.between(txn.new, slot.server()));
                txn.stage = HandoverStage::Done;
            }
            HandoverStage::Done => {}
        }
        Ok(())
    }

    fn session_replica(&self, origin: ControllerId, md: &MdId) -> Option<(ControllerId, SessionState)> {
        self.session_replicas
            .iter()
            .filter(|(h, _)| self.ring.is_live(**h))
            .find_map(|(h, origins)| origins.get(&origin).and_then(|m| m.get(md)).map(|s| (*h, s.clone())))
    }

    fn replica_holders(&self, origin: ControllerId) -> Vec<ControllerId> {
        self.ring
            .node(origin)
            .map(|n| {
                n.successor_list
                    .iter()
                    .copied()
                    .filter(|h| *h != origin && self.ring.is_live(*h))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn replicate_session(&mut self, origin: ControllerId, md: &MdId) {
        let Some(s) = self.sessions.get(&origin).and_then(|m| m.get(md)).cloned() else {
            return;
        };
        for h in self.replica_holders(origin) {
            self.session_replicas
                .entry(h)
                .or_default()
                .entry(origin)
                .or_default()
                .insert(md.clone(), s.clone());
        }
    }

    fn resync_session_replicas(&mut self) {
        // replicas of crashed controllers are kept: they are what recovery uses
        let crashed: BTreeSet<ControllerId> = self.ring.crashed().clone();
        for origins in self.session_replicas.values_mut() {
            origins.retain(|o, _| crashed.contains(o));
        }
        let live: Vec<ControllerId> = self.ring.live_members().collect();
        for c in live {
            let mds: Vec<MdId> = self
                .sessions
                .get(&c)
                .map(|m| m.keys().cloned().collect())
                .unwrap_or_default();
            for md in mds {
                self.replicate_session(c, &md);
            }
        }
    }

    fn adopt(&mut self, failed: ControllerId, heir: ControllerId) {
        self.adopted_by.insert(failed, heir);
        if let Some(v) = self.views.remove(&failed) {
            self.views
                .entry(heir)
                .or_insert_with(|| PartitionView::new(heir))
                .absorb(v);
        }
        for home in self.ap_home.values_mut() {
            if *home == failed {
                *home = heir;
            }
        }
        if let Some(moved) = self.sessions.remove(&failed) {
            let dst = self.sessions.entry(heir).or_default();
            for (md, mut s) in moved {
                s.partition = heir;
                for f in s.active_flows.values_mut() {
                    f.controller = heir;
                }
                dst.insert(md, s);
            }
        }
        self.session_replicas.remove(&failed);
        for origins in self.session_replicas.values_mut() {
            origins.remove(&failed);
        }
    }

    pub fn crash_controller(&mut self, id: ControllerId) -> Result<bool> {
        Ok(self.ring.crash(id)?)
    }

    /// Recovers from the crash of `failed` (crashing it first if it is still
    /// live). The first live successor adopts the arc, sessions and partition
    /// of the whole run of adjacent failed controllers; anything without a
    /// surviving replica is reported as lost.
    pub fn recover_controller_failure(&mut self, failed: ControllerId) -> Result<RecoveryReport> {
        self.ring.crash(failed)?;
        let rr = self.ring.recover(failed)?;
        let heir = rr.heir;
        let mut report = RecoveryReport {
            failed: rr.failed.clone(),
            heir: Some(heir),
            recovered_records: rr.recovered.len(),
            lost_records: rr.lost.iter().map(|k| MdId::new(k.name.clone())).collect(),
            ..Default::default()
        };
        for f in &rr.failed {
            let original = self.sessions.remove(f).unwrap_or_default();
            let replica = std::iter::once(heir)
                .chain(self.ring.live_members().filter(|h| *h != heir))
                .find_map(|h| self.session_replicas.get(&h).and_then(|o| o.get(f)).cloned())
                .unwrap_or_default();
            report
                .lost_sessions
                .extend(original.keys().filter(|md| !replica.contains_key(*md)).cloned());
            report.recovered_sessions += replica.len();
            self.sessions.insert(*f, replica);
            self.adopt(*f, heir);
        }
        self.resync_session_replicas();
        if !report.is_lossless() {
            log::warn!(
                "controller recovery by {heir}: {} record(s) and {} session(s) lost",
                report.lost_records.len(),
                report.lost_sessions.len()
            );
        }
        Ok(report)
    }

    fn view_holding(&self, md: &MdId) -> Option<ControllerId> {
        self.views
            .iter()
            .find(|(_, v)| v.roster().contains_key(md))
            .map(|(c, _)| *c)
    }

    pub fn position(&self, md: &MdId) -> Option<Point> {
        self.views.values().find_map(|v| v.roster().get(md).map(|e| e.position))
    }

    fn install_association(&mut self, md: &MdId, ap: &ApId, rec: AssociationRecord) {
        for recs in self.ap_records.values_mut() {
            recs.remove(md);
        }
        self.ap_records
            .entry(ap.clone())
            .or_default()
            .insert(md.clone(), rec.clone());
        if let Some(s) = self.sessions.values_mut().find_map(|m| m.get_mut(md)) {
            s.association = Some(rec);
        }
    }

    fn fresh_association(&mut self, md: &MdId, ap: &ApId) -> AssociationRecord {
        self.next_aid = self.next_aid % 2007 + 1;
        let md_mac = self.md_macs[md];
        let flow_status = self
            .session(md)
            .map(|s| {
                s.active_flows
                    .iter()
                    .map(|(f, a)| (f.clone(), a.descriptor.clone()))
                    .collect()
            })
            .unwrap_or_default();
        let rec = AssociationRecord {
            md_mac,
            ap_mac: self.ap_macs[ap],
            association_id: self.next_aid,
            frame_seq: 0,
            security_keys: SecurityKeys::derive(md_mac, self.next_aid),
            flow_status,
        };
        *self.reassociations.entry(md.clone()).or_default() += 1;
        self.install_association(md, ap, rec.clone());
        rec
    }

    /// Reinstates the association of `md` at `ap_new`, changing only the AP
    /// address. The device does not see a re-association.
    pub fn personal_ap_migrate(&mut self, md: &MdId, ap_old: &ApId, ap_new: &ApId) -> Result<AssociationRecord> {
        let rec = self
            .association_at(ap_old, md)
            .cloned()
            .ok_or_else(|| MobilityError::NotAssociated(md.clone()))?;
        if ap_old == ap_new {
            return Ok(rec);
        }
        self.reinstate(md, rec, ap_new)
    }

    fn reinstate(&mut self, md: &MdId, rec: AssociationRecord, ap_new: &ApId) -> Result<AssociationRecord> {
        let refuse = |reason: &str| MobilityError::MigrationRefused {
            md: md.clone(),
            ap: ap_new.clone(),
            reason: reason.into(),
        };
        let home = self
            .ap_home
            .get(ap_new)
            .copied()
            .ok_or_else(|| MobilityError::UnknownAp(ap_new.clone()))?;
        let status = self.views[&home].ap(ap_new).expect("AP has a home view");
        if !status.alive {
            return Err(refuse("AP is down"));
        }
        let pos = self.position(md).ok_or_else(|| refuse("device position unknown"))?;
        if !status.coverage.covers(&pos) {
            return Err(refuse("device is outside the AP's coverage"));
        }
        let moved = AssociationRecord {
            ap_mac: self.ap_macs[ap_new],
            ..rec
        };
        self.install_association(md, ap_new, moved.clone());
        Ok(moved)
    }

    /// Bumps the frame sequence number of the live association.
    pub fn advance_frames(&mut self, md: &MdId, frames: u64) -> Result<()> {
        let ap = self
            .serving_ap(md)
            .cloned()
            .ok_or_else(|| MobilityError::NotAssociated(md.clone()))?;
        let mut rec = self.ap_records[&ap][md].clone();
        rec.frame_seq += frames;
        self.install_association(md, &ap, rec);
        Ok(())
    }

    /// Moves `md` onto `ap` at `position`: hands over to the AP's controller
    /// if needed, updates the partition views, then associates, either by
    /// Personal AP migration or by a fresh association.
    pub fn attach(&mut self, md: &MdId, ap: &ApId, position: Point, personal_ap: bool) -> Result<AttachOutcome> {
        let ctrl = self
            .ap_home
            .get(ap)
            .copied()
            .ok_or_else(|| MobilityError::UnknownAp(ap.clone()))?;
        self.live(ctrl)?;
        let current = self.current_controller(md)?;
        let handover = if current != ctrl {
            Some(self.handover(md, ctrl)?)
        } else {
            None
        };

        let old_ap = self.serving_ap(md).cloned();
        let old_ctrl = old_ap.as_ref().and_then(|a| self.ap_home.get(a).copied());
        match self.view_holding(md) {
            Some(v) if v == ctrl => {
                self.release_flows(ctrl, md);
                let view = self.views.get_mut(&ctrl).expect("view");
                view.update(ViewEvent::MdMove {
                    md: md.clone(),
                    position,
                })?;
                view.update(ViewEvent::MdStay { md: md.clone() })?;
            }
            other => {
                if let Some(v) = other {
                    self.views
                        .get_mut(&v)
                        .expect("view")
                        .update(ViewEvent::MdLeave { md: md.clone() })?;
                }
                self.views.get_mut(&ctrl).expect("view").update(ViewEvent::MdJoin {
                    md: md.clone(),
                    position,
                })?;
            }
        }
        self.views.get_mut(&ctrl).expect("view").update(ViewEvent::MdAttach {
            md: md.clone(),
            ap: Some(ap.clone()),
        })?;

        let (association, migrated, association_latency) = match old_ap {
            Some(ref old) if personal_ap => {
                let rec = self.personal_ap_migrate(md, old, ap)?;
                let retire = old_ctrl.map_or(0.0, |c| self.latency.controller_to_ap(c, old));
                let reinstate = self.latency.controller_to_ap(ctrl, ap);
                (rec, old != ap, retire.max(reinstate))
            }
            Some(ref old) if old == ap => (self.ap_records[ap][md].clone(), false, 0.0),
            _ => {
                let rec = self.fresh_association(md, ap);
                (rec, false, self.latency.controller_to_ap(ctrl, ap))
            }
        };
        let stranded = self.reserve_flows(ctrl, md, ap)?;
        Ok(AttachOutcome {
            ap: ap.clone(),
            controller: ctrl,
            handover,
            migrated,
            association,
            stranded,
            association_latency,
        })
    }

    /// Removes `md` from its AP and partition. Flows stay in the session.
    pub fn detach(&mut self, md: &MdId) -> Result<()> {
        if let Some(v) = self.view_holding(md) {
            self.views
                .get_mut(&v)
                .expect("view")
                .update(ViewEvent::MdLeave { md: md.clone() })?;
        }
        for recs in self.ap_records.values_mut() {
            recs.remove(md);
        }
        if let Ok((_, s)) = self.session_mut(md) {
            s.association = None;
            for f in s.active_flows.values_mut() {
                f.ap = None;
            }
        }
        Ok(())
    }

    fn release_flows(&mut self, ctrl: ControllerId, md: &MdId) {
        let view = self.views.get_mut(&ctrl).expect("view");
        let flows: Vec<FlowId> = view
            .reservations()
            .iter()
            .filter(|(_, r)| &r.md == md)
            .map(|(f, _)| f.clone())
            .collect();
        for f in flows {
            let _ = view.update(ViewEvent::FlowEnd { flow: f });
        }
    }

    /// Reserves every active flow of `md` on `ap`; returns the ones that did
    /// not fit.
    fn reserve_flows(&mut self, ctrl: ControllerId, md: &MdId, ap: &ApId) -> Result<Vec<FlowId>> {
        let (_, session) = self.session_mut(md)?;
        let mut flows: Vec<(FlowId, FlowDescriptor)> = session
            .active_flows
            .iter()
            .map(|(f, a)| (f.clone(), a.descriptor.clone()))
            .collect();
        flows.sort_by(|a, b| b.1.demand.total_cmp(&a.1.demand).then_with(|| a.0.cmp(&b.0)));
        let mut placed = Vec::new();
        let mut stranded = Vec::new();
        let view = self.views.get_mut(&ctrl).expect("view");
        for (f, d) in flows {
            let fits = view
                .ap(ap)
                .map(|s| s.alive && s.techs.contains(&d.tech) && s.residual() + 1e-9 >= d.demand)
                .unwrap_or(false);
            if fits {
                view.update(ViewEvent::FlowStart {
                    flow: f.clone(),
                    md: md.clone(),
                    ap: ap.clone(),
                    demand: d.demand,
                })?;
                placed.push(f);
            } else {
                stranded.push(f);
            }
        }
        let (_, session) = self.session_mut(md)?;
        for (f, a) in session.active_flows.iter_mut() {
            a.ap = placed.contains(f).then(|| ap.clone());
            a.controller = ctrl;
        }
        Ok(stranded)
    }

    /// Registers a new flow of `md`; reserves it on the device's AP when it
    /// fits. Returns whether it was reserved.
    pub fn start_flow(&mut self, md: &MdId, descriptor: FlowDescriptor) -> Result<bool> {
        let (ctrl, session) = self.session_mut(md)?;
        let flow = descriptor.flow.clone();
        session.active_flows.insert(
            flow.clone(),
            ActiveFlow {
                descriptor: descriptor.clone(),
                controller: ctrl,
                ap: None,
            },
        );
        if let Some(ap) = self.serving_ap(md).cloned() {
            let mut rec = self.ap_records[&ap][md].clone();
            rec.flow_status.insert(flow.clone(), descriptor.clone());
            self.install_association(md, &ap, rec);
            let view_ctrl = self.ap_home[&ap];
            let view = self.views.get_mut(&view_ctrl).expect("view");
            let fits = view
                .ap(&ap)
                .map(|s| s.alive && s.techs.contains(&descriptor.tech) && s.residual() + 1e-9 >= descriptor.demand)
                .unwrap_or(false);
            if fits {
                view.update(ViewEvent::FlowStart {
                    flow: flow.clone(),
                    md: md.clone(),
                    ap: ap.clone(),
                    demand: descriptor.demand,
                })?;
                let (_, s) = self.session_mut(md)?;
                s.active_flows.get_mut(&flow).expect("inserted").ap = Some(ap);
            }
            self.replicate_session(ctrl, md);
            return Ok(fits);
        }
        self.replicate_session(ctrl, md);
        Ok(false)
    }

    pub fn end_flow(&mut self, md: &MdId, flow: &FlowId) -> Result<()> {
        let (ctrl, session) = self.session_mut(md)?;
        session
            .active_flows
            .remove(flow)
            .ok_or_else(|| MobilityError::UnknownFlow(flow.clone()))?;
        if let Some(a) = session.association.as_mut() {
            a.flow_status.remove(flow);
        }
        if let Some(ap) = self.serving_ap(md).cloned() {
            let mut rec = self.ap_records[&ap][md].clone();
            rec.flow_status.remove(flow);
            self.install_association(md, &ap, rec);
        }
        for v in self.views.values_mut() {
            if v.reservations().contains_key(flow) {
                v.update(ViewEvent::FlowEnd { flow: flow.clone() })?;
            }
        }
        self.replicate_session(ctrl, md);
        Ok(())
    }

    /// Handles the failure of an AP: its devices are moved to the best
    /// surviving AP of the partition with their association reinstated, and
    /// their flows re-reserved. Flows that fit nowhere are stranded.
    pub fn recover_ap_failure(&mut self, ap: &ApId) -> Result<ApRecovery> {
        let ctrl = self
            .ap_home
            .get(ap)
            .copied()
            .ok_or_else(|| MobilityError::UnknownAp(ap.clone()))?;
        self.live(ctrl)?;
        let view = self.views.get_mut(&ctrl).expect("view");
        view.update(ViewEvent::ApDown { ap: ap.clone() })?;
        let released: Vec<FlowId> = view
            .reservations()
            .iter()
            .filter(|(_, r)| &r.ap == ap)
            .map(|(f, _)| f.clone())
            .collect();
        for f in released {
            view.update(ViewEvent::FlowEnd { flow: f })?;
        }
        let affected: Vec<(MdId, Point)> = view
            .roster()
            .iter()
            .filter(|(_, e)| e.ap.as_ref() == Some(ap))
            .map(|(md, e)| (md.clone(), e.position))
            .collect();

        let mut out = ApRecovery {
            ap: Some(ap.clone()),
            ..Default::default()
        };
        for (md, position) in affected {
            let flows: Vec<FlowDescriptor> = self
                .session(&md)
                .map(|s| s.active_flows.values().map(|a| a.descriptor.clone()).collect())
                .unwrap_or_default();
            let hint = flows
                .iter()
                .max_by(|a, b| a.demand.total_cmp(&b.demand).then_with(|| b.flow.cmp(&a.flow)))
                .map(|d| FlowRequest {
                    md: md.clone(),
                    flow_type: d.flow_type.clone(),
                    demand: d.demand,
                    required_tech: d.tech,
                    origin: position,
                });
            let view = &self.views[&ctrl];
            let choice = scheduler::select_ap_for_join(&md, position, hint.as_ref(), view)
                .or_else(|_| scheduler::select_ap_for_join(&md, position, None, view));
            match choice {
                Ok(target) => {
                    // the controller's copy stands in for the dead AP's
                    let rec = self
                        .ap_records
                        .get(ap)
                        .and_then(|r| r.get(&md))
                        .cloned()
                        .or_else(|| self.session(&md).and_then(|s| s.association.clone()));
                    match rec {
                        Some(rec) => {
                            self.reinstate(&md, rec, &target)?;
                        }
                        None => {
                            self.fresh_association(&md, &target);
                        }
                    }
                    self.views.get_mut(&ctrl).expect("view").update(ViewEvent::MdAttach {
                        md: md.clone(),
                        ap: Some(target.clone()),
                    })?;
                    let stranded = self.reserve_flows(ctrl, &md, &target)?;
                    out.stranded.extend(stranded.into_iter().map(|f| (md.clone(), f)));
                    out.reassigned.push((md, target));
                }
                Err(_) => {
                    self.views.get_mut(&ctrl).expect("view").update(ViewEvent::MdAttach {
                        md: md.clone(),
                        ap: None,
                    })?;
                    if let Ok((_, s)) = self.session_mut(&md) {
                        for f in s.active_flows.values_mut() {
                            f.ap = None;
                        }
                    }
                    out.stranded.extend(flows.into_iter().map(|d| (md.clone(), d.flow)));
                    out.unassigned.push(md);
                }
            }
        }
        if let Some(recs) = self.ap_records.get_mut(ap) {
            recs.clear();
        }
        Ok(out)
    }

    /// Brings a failed AP back into service.
    pub fn restore_ap(&mut self, ap: &ApId) -> Result<()> {
        let ctrl = self
            .ap_home
            .get(ap)
            .copied()
            .ok_or_else(|| MobilityError::UnknownAp(ap.clone()))?;
        self.views
            .get_mut(&ctrl)
            .expect("view")
            .update(ViewEvent::ApUp { ap: ap.clone() })?;
        Ok(())
    }
}
