//! Consistent-hashing ring of SDN controllers.
//!
//! Controllers are overlay nodes on an `m`-bit identifier circle. Each node
//! owns the key arc `(predecessor, id]`, keeps a finger table with entries at
//! `id + 2^i`, and a list of its `r` nearest successors which receive copies
//! of its record store.
//!
//! Membership changes are applied as atomic multi-step transactions: a join
//! locates its successor, splices itself in, takes over the keys of its new
//! arc, and then every finger table, successor list and replica is refreshed
//! before the call returns. Crashes are different: a crashed node stays in the
//! pointer structure (other nodes still hold fingers to it) until
//! [`Ring::recover`] splices it out and hands its arc to the first live
//! successor, which rebuilds the lost store from its replica.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported ring width.
pub const MAX_BITS: u32 = 63;
pub const DEFAULT_BITS: u32 = 16;
pub const DEFAULT_REPLICATION: usize = 2;

/// A point on the identifier circle.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RingKey(pub u64);

/// Controllers are named by their position on the ring.
pub type ControllerId = RingKey;

impl RingKey {
    /// Clockwise half-open membership `self ∈ (a, b]`. When `a == b` the
    /// interval is the whole circle.
    pub fn in_half_open(self, a: RingKey, b: RingKey) -> bool {
        if a < b {
            a < self && self <= b
        } else {
            self > a || self <= b
        }
    }

    /// Clockwise open membership `self ∈ (a, b)`. When `a == b` this is every
    /// key except `a`.
    pub fn in_open(self, a: RingKey, b: RingKey) -> bool {
        if a < b {
            a < self && self < b
        } else {
            self > a || self < b
        }
    }
}

impl fmt::Display for RingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("controller {0} is already a ring member")]
    MembershipConflict(ControllerId),
    #[error("controller {0} is not a ring member")]
    NotAMember(ControllerId),
    #[error("controller {0} is down")]
    NodeDown(ControllerId),
    #[error("routing failure from {start} towards key {key}: {reason}")]
    RoutingFailure {
        start: ControllerId,
        key: RingKey,
        reason: String,
    },
    #[error("ring is empty")]
    EmptyRing,
    #[error("record `{0}` not found")]
    RecordNotFound(String),
    #[error("record `{name}` is unavailable: owner {owner} is down and no live replica exists")]
    RecordUnavailable { name: String, owner: ControllerId },
    #[error("ring invariant violated: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, RingError>;

/// Size of the identifier space (`m` bits).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySpace {
    bits: u32,
}

impl KeySpace {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(RingError::InvalidArgument(format!(
                "ring width must be in 1..={MAX_BITS}, got {bits}"
            )));
        }
        Ok(KeySpace { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn size(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn mask(&self) -> u64 {
        self.size() - 1
    }

    pub fn key(&self, value: u64) -> Result<RingKey> {
        if value > self.mask() {
            return Err(RingError::InvalidArgument(format!(
                "key {value} outside [0, 2^{})",
                self.bits
            )));
        }
        Ok(RingKey(value))
    }

    /// `(k + 2^i) mod 2^m`
    pub fn offset(&self, k: RingKey, i: u32) -> RingKey {
        RingKey(k.0.wrapping_add(1u64 << i) & self.mask())
    }

    /// Maps an identifier onto the ring.
    ///
    /// The identifier's UTF-8 bytes are hashed with 64-bit FNV-1a, the result
    /// is passed through the MurmurHash3 `fmix64` finalizer, and the 64-bit
    /// value is XOR-folded into `m` bits (successive `m`-bit chunks, low bits
    /// first, XORed together). The function is platform independent and
    /// pinned by fixtures.
    pub fn hash_id(&self, identifier: &str) -> Result<RingKey> {
        if identifier.is_empty() {
            return Err(RingError::InvalidArgument("empty identifier".into()));
        }
        Ok(RingKey(xor_fold(fmix64(fnv1a64(identifier.as_bytes())), self.bits)))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

fn xor_fold(mut h: u64, bits: u32) -> u64 {
    let mask = (1u64 << bits) - 1;
    let mut out = 0;
    while h != 0 {
        out ^= h & mask;
        h >>= bits;
    }
    out
}

/// Convenience wrapper around [`KeySpace::hash_id`].
pub fn hash_id(identifier: &str, bits: u32) -> Result<RingKey> {
    KeySpace::new(bits)?.hash_id(identifier)
}

/// Records are addressed by their ring key; the name disambiguates keys that
/// collide after folding.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub key: RingKey,
    pub name: String,
}

impl RecordKey {
    pub fn new(key: RingKey, name: impl Into<String>) -> Self {
        RecordKey { key, name: name.into() }
    }
}

#[derive(Clone, Debug)]
pub struct ControllerNode<T> {
    pub id: ControllerId,
    pub successor: ControllerId,
    pub predecessor: ControllerId,
    pub fingers: Vec<ControllerId>,
    pub successor_list: Vec<ControllerId>,
    store: BTreeMap<RecordKey, T>,
    replica_store: BTreeMap<ControllerId, BTreeMap<RecordKey, T>>,
}

impl<T: Clone> ControllerNode<T> {
    fn singleton(id: ControllerId, bits: u32) -> Self {
        ControllerNode {
            id,
            successor: id,
            predecessor: id,
            fingers: vec![id; bits as usize],
            successor_list: Vec::new(),
            store: BTreeMap::new(),
            replica_store: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &BTreeMap<RecordKey, T> {
        &self.store
    }

    /// Replicas held on behalf of predecessors, keyed by origin.
    pub fn replica_store(&self) -> &BTreeMap<ControllerId, BTreeMap<RecordKey, T>> {
        &self.replica_store
    }
}

/// Result of a lookup: the owning controller and the forwarding path taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Lookup {
    pub owner: ControllerId,
    pub hops: u32,
    /// Nodes visited, starting with the lookup origin.
    pub path: Vec<ControllerId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinReport {
    pub id: ControllerId,
    pub successor: ControllerId,
    pub predecessor: ControllerId,
    pub migrated: usize,
}

#[derive(Clone, Debug)]
pub struct Departure<T> {
    pub id: ControllerId,
    /// `None` when the last member left.
    pub successor: Option<ControllerId>,
    pub moved: usize,
    /// Records that had nowhere to go (only when the last member leaves).
    pub orphaned: Vec<(RecordKey, T)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplicaCopy {
    pub holder: ControllerId,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReplicationReceipt {
    pub origin: ControllerId,
    pub copies: Vec<ReplicaCopy>,
    /// Fewer than `r` live successors were available.
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RingRecovery {
    /// The contiguous run of crashed controllers that was spliced out.
    pub failed: Vec<ControllerId>,
    pub heir: ControllerId,
    pub recovered: Vec<RecordKey>,
    pub lost: Vec<RecordKey>,
}

/// Where a record currently lives.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Slot {
    Primary(ControllerId),
    /// Owner is down; the record is served from `holder`'s replica of it.
    Replica {
        holder: ControllerId,
        origin: ControllerId,
    },
}

impl Slot {
    pub fn server(&self) -> ControllerId {
        match *self {
            Slot::Primary(id) => id,
            Slot::Replica { holder, .. } => holder,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ring<T> {
    space: KeySpace,
    replication: usize,
    nodes: BTreeMap<ControllerId, ControllerNode<T>>,
    crashed: BTreeSet<ControllerId>,
}

impl<T: Clone> Ring<T> {
    pub fn new(bits: u32, replication: usize) -> Result<Self> {
        Ok(Ring {
            space: KeySpace::new(bits)?,
            replication,
            nodes: BTreeMap::new(),
            crashed: BTreeSet::new(),
        })
    }

    pub fn space(&self) -> KeySpace {
        self.space
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn hash_id(&self, identifier: &str) -> Result<RingKey> {
        self.space.hash_id(identifier)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: ControllerId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn is_live(&self, id: ControllerId) -> bool {
        self.nodes.contains_key(&id) && !self.crashed.contains(&id)
    }

    pub fn is_crashed(&self, id: ControllerId) -> bool {
        self.crashed.contains(&id)
    }

    pub fn crashed(&self) -> &BTreeSet<ControllerId> {
        &self.crashed
    }

    pub fn members(&self) -> impl Iterator<Item = ControllerId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn live_members(&self) -> impl Iterator<Item = ControllerId> + '_ {
        self.nodes.keys().copied().filter(move |id| !self.crashed.contains(id))
    }

    pub fn node(&self, id: ControllerId) -> Option<&ControllerNode<T>> {
        self.nodes.get(&id)
    }

    fn member(&self, id: ControllerId) -> Result<&ControllerNode<T>> {
        self.nodes.get(&id).ok_or(RingError::NotAMember(id))
    }

    fn check_key(&self, key: RingKey) -> Result<()> {
        self.space.key(key.0).map(|_| ())
    }

    fn any_live(&self) -> Result<ControllerId> {
        self.live_members().next().ok_or(RingError::EmptyRing)
    }

    /// Finger entry that most closely precedes `key` on the way from `node`,
    /// or `node` itself when no finger lies strictly between them.
    pub fn closest_preceding_finger(&self, node: ControllerId, key: RingKey) -> Result<ControllerId> {
        let n = self.member(node)?;
        Ok(n.fingers
            .iter()
            .rev()
            .copied()
            .find(|f| f.in_open(n.id, key))
            .unwrap_or(n.id))
    }

    /// Iterative finger-table lookup. Fails if the path would forward to a
    /// crashed node; use [`Ring::route_with_fallback`] to route around failures.
    pub fn find_successor(&self, start: ControllerId, key: RingKey) -> Result<Lookup> {
        self.check_key(key)?;
        if self.crashed.contains(&start) {
            return Err(RingError::NodeDown(start));
        }
        self.member(start)?;
        let mut n = start;
        let mut path = vec![start];
        for _ in 0..=(self.nodes.len() + self.space.bits() as usize) {
            let node = &self.nodes[&n];
            if key.in_half_open(node.predecessor, n) {
                return Ok(lookup(n, path));
            }
            if key.in_half_open(n, node.successor) {
                return Ok(lookup(node.successor, path));
            }
            let mut next = self.closest_preceding_finger(n, key)?;
            if next == n {
                next = node.successor;
            }
            if self.crashed.contains(&next) {
                return Err(RingError::RoutingFailure {
                    start,
                    key,
                    reason: format!("finger {next} of {n} is unreachable"),
                });
            }
            n = next;
            path.push(n);
        }
        Err(RingError::RoutingFailure {
            start,
            key,
            reason: "lookup did not converge".into(),
        })
    }

    /// Lookup that routes around the crashed nodes of this ring plus `failed`.
    ///
    /// When a finger does not respond, earlier fingers of the local table are
    /// tried; when none of them helps, the finger table replica of the first
    /// live successor is adopted; as a last resort the lookup advances to that
    /// successor.
    pub fn route_with_fallback(
        &self,
        start: ControllerId,
        key: RingKey,
        failed: &BTreeSet<ControllerId>,
    ) -> Result<Lookup> {
        self.route(
            start,
            key,
            &|id| failed.contains(&id) || self.crashed.contains(&id),
            &|_, _| true,
        )
    }

    /// General routing with a node-liveness predicate and a link predicate
    /// (`link_up(from, to)`), used for finger-link failures.
    pub fn route(
        &self,
        start: ControllerId,
        key: RingKey,
        dead: &dyn Fn(ControllerId) -> bool,
        link_up: &dyn Fn(ControllerId, ControllerId) -> bool,
    ) -> Result<Lookup> {
        self.check_key(key)?;
        self.member(start)?;
        if dead(start) {
            return Err(RingError::NodeDown(start));
        }
        let fail = |reason: String| RingError::RoutingFailure { start, key, reason };
        let mut n = start;
        let mut path = vec![start];
        for _ in 0..=(self.nodes.len() + self.space.bits() as usize) {
            let node = &self.nodes[&n];
            if key.in_half_open(node.predecessor, n) {
                return Ok(lookup(n, path));
            }
            let owner = std::iter::once(node.successor)
                .chain(node.successor_list.iter().copied())
                .find(|&s| !dead(s))
                .ok_or_else(|| fail(format!("no live successor known to {n}")))?;
            if owner == n || key.in_half_open(n, owner) {
                return Ok(lookup(owner, path));
            }
            let usable = |f: ControllerId| f.in_open(n, key) && !dead(f) && link_up(n, f);
            let next = node
                .fingers
                .iter()
                .rev()
                .copied()
                .find(|&f| usable(f))
                .or_else(|| {
                    // finger-table replica of one live successor
                    self.nodes
                        .get(&owner)
                        .and_then(|s| s.fingers.iter().rev().copied().find(|&f| usable(f)))
                })
                .or_else(|| {
                    std::iter::once(node.successor)
                        .chain(node.successor_list.iter().copied())
                        .find(|&s| usable(s))
                })
                .ok_or_else(|| fail(format!("every route out of {n} is down")))?;
            n = next;
            path.push(n);
        }
        Err(fail("lookup did not converge".into()))
    }

    /// Adds a controller. The new node looks up its successor, adopts the
    /// successor's former predecessor as its own, and takes over the keys in
    /// `(predecessor, new_id]`.
    pub fn join(&mut self, new_id: ControllerId) -> Result<JoinReport> {
        self.check_key(new_id)?;
        if self.nodes.contains_key(&new_id) {
            return Err(RingError::MembershipConflict(new_id));
        }
        if self.nodes.is_empty() {
            self.nodes
                .insert(new_id, ControllerNode::singleton(new_id, self.space.bits()));
            return Ok(JoinReport {
                id: new_id,
                successor: new_id,
                predecessor: new_id,
                migrated: 0,
            });
        }
        let bootstrap = self.any_live()?;
        let successor = self.route_with_fallback(bootstrap, new_id, &BTreeSet::new())?.owner;
        let predecessor = self.nodes[&successor].predecessor;

        let mut node = ControllerNode::singleton(new_id, self.space.bits());
        node.successor = successor;
        node.predecessor = predecessor;
        let succ = self.nodes.get_mut(&successor).expect("successor is a member");
        let moving: Vec<RecordKey> = succ
            .store
            .keys()
            .filter(|rk| rk.key.in_half_open(predecessor, new_id))
            .cloned()
            .collect();
        for rk in &moving {
            let v = succ.store.remove(rk).expect("key listed above");
            node.store.insert(rk.clone(), v);
        }
        succ.predecessor = new_id;
        self.nodes
            .get_mut(&predecessor)
            .expect("predecessor is a member")
            .successor = new_id;
        self.nodes.insert(new_id, node);
        self.rebuild_routing()?;
        Ok(JoinReport {
            id: new_id,
            successor,
            predecessor,
            migrated: moving.len(),
        })
    }

    /// Graceful departure: all records move to the successor before the node
    /// unlinks itself.
    pub fn leave(&mut self, id: ControllerId) -> Result<Departure<T>> {
        let node = self.member(id)?;
        if self.crashed.contains(&id) {
            return Err(RingError::NodeDown(id));
        }
        if self.nodes.len() == 1 {
            let node = self.nodes.remove(&id).expect("checked above");
            return Ok(Departure {
                id,
                successor: None,
                moved: 0,
                orphaned: node.store.into_iter().collect(),
            });
        }
        let predecessor = node.predecessor;
        let successor = node.successor;
        let heir = std::iter::once(successor)
            .chain(node.successor_list.iter().copied())
            .find(|s| *s != id && !self.crashed.contains(s))
            .ok_or_else(|| RingError::Inconsistent(format!("{id} has no live successor")))?;

        let node = self.nodes.remove(&id).expect("checked above");
        let moved = node.store.len();
        let target = self.nodes.get_mut(&heir).expect("heir is a member");
        target.store.extend(node.store);
        self.nodes
            .get_mut(&successor)
            .expect("successor is a member")
            .predecessor = predecessor;
        self.nodes
            .get_mut(&predecessor)
            .expect("predecessor is a member")
            .successor = successor;
        self.rebuild_routing()?;
        Ok(Departure {
            id,
            successor: Some(heir),
            moved,
            orphaned: Vec::new(),
        })
    }

    /// Marks a controller as crashed. Its state becomes unreachable; other
    /// nodes keep their (now stale) pointers until [`Ring::recover`].
    pub fn crash(&mut self, id: ControllerId) -> Result<bool> {
        self.member(id)?;
        Ok(self.crashed.insert(id))
    }

    /// Splices out the run of adjacent crashed controllers containing `id`.
    /// The first live successor adopts the whole arc and rebuilds each failed
    /// node's store from replicas; records with no surviving replica are
    /// reported as lost.
    pub fn recover(&mut self, id: ControllerId) -> Result<RingRecovery> {
        self.member(id)?;
        if !self.crashed.contains(&id) {
            return Err(RingError::InvalidArgument(format!("controller {id} has not failed")));
        }
        let mut first = id;
        while self.crashed.contains(&self.nodes[&first].predecessor) && self.nodes[&first].predecessor != id {
            first = self.nodes[&first].predecessor;
        }
        let mut run = vec![first];
        let mut cursor = self.nodes[&first].successor;
        while self.crashed.contains(&cursor) && cursor != first {
            run.push(cursor);
            cursor = self.nodes[&cursor].successor;
        }
        if self.crashed.contains(&cursor) {
            return Err(RingError::Inconsistent("every controller has failed".into()));
        }
        let heir = cursor;
        let live_pred = self.nodes[&first].predecessor;

        let mut recovered = Vec::new();
        let mut lost = Vec::new();
        for failed in &run {
            // Prefer the heir's replica, then any other live holder.
            let holders: Vec<ControllerId> = std::iter::once(heir)
                .chain(self.live_members().filter(|h| *h != heir))
                .filter(|h| self.nodes[h].replica_store.contains_key(failed))
                .collect();
            let replica = holders
                .first()
                .map(|h| self.nodes[h].replica_store[failed].clone())
                .unwrap_or_default();
            let original = &self.nodes[failed].store;
            lost.extend(original.keys().filter(|k| !replica.contains_key(*k)).cloned());
            recovered.extend(replica.keys().cloned());
            self.nodes
                .get_mut(&heir)
                .expect("heir is a member")
                .store
                .extend(replica);
        }
        for failed in &run {
            self.nodes.remove(failed);
            self.crashed.remove(failed);
            for node in self.nodes.values_mut() {
                node.replica_store.remove(failed);
            }
        }
        self.nodes.get_mut(&heir).expect("heir").predecessor = live_pred;
        self.nodes.get_mut(&live_pred).expect("live predecessor").successor = heir;
        self.rebuild_routing()?;
        if !lost.is_empty() {
            log::warn!("recovery of {:?} by {heir}: {} record(s) lost", run, lost.len());
        }
        Ok(RingRecovery {
            failed: run,
            heir,
            recovered,
            lost,
        })
    }

    /// Copies `id`'s record store into the replica stores of its live
    /// successors and drops stale copies held elsewhere.
    pub fn replicate_to_successors(&mut self, id: ControllerId) -> Result<ReplicationReceipt> {
        let node = self.member(id)?;
        let holders: Vec<ControllerId> = node
            .successor_list
            .iter()
            .copied()
            .filter(|h| !self.crashed.contains(h))
            .collect();
        let snapshot = node.store.clone();
        for (hid, h) in self.nodes.iter_mut() {
            if !holders.contains(hid) {
                h.replica_store.remove(&id);
            }
        }
        let mut copies = Vec::with_capacity(holders.len());
        for h in &holders {
            self.nodes
                .get_mut(h)
                .expect("holder is a member")
                .replica_store
                .insert(id, snapshot.clone());
            copies.push(ReplicaCopy {
                holder: *h,
                records: snapshot.len(),
            });
        }
        let partial = copies.len() < self.replication;
        if partial && self.nodes.len() > self.replication {
            log::warn!(
                "partial replication of {id}: {} of {} successors",
                copies.len(),
                self.replication
            );
        }
        Ok(ReplicationReceipt {
            origin: id,
            copies,
            partial,
        })
    }

    /// Recomputes fingers and successor lists from the successor pointers,
    /// then refreshes every live node's replicas.
    fn rebuild_routing(&mut self) -> Result<()> {
        let order = self.walk()?;
        let mut sorted = order.clone();
        sorted.sort();
        let successor_of = |target: RingKey| -> ControllerId {
            match sorted.binary_search(&target) {
                Ok(i) => sorted[i],
                Err(i) if i == sorted.len() => sorted[0],
                Err(i) => sorted[i],
            }
        };
        let bits = self.space.bits();
        let r = self.replication;
        let n = order.len();
        for (pos, id) in order.iter().enumerate() {
            let fingers: Vec<ControllerId> = (0..bits).map(|i| successor_of(self.space.offset(*id, i))).collect();
            let successors: Vec<ControllerId> = (1..n.min(r + 1)).map(|k| order[(pos + k) % n]).collect();
            let node = self.nodes.get_mut(id).expect("walked node is a member");
            node.fingers = fingers;
            node.successor_list = successors;
        }
        let live: Vec<ControllerId> = self.live_members().collect();
        for id in live {
            self.replicate_to_successors(id)?;
        }
        Ok(())
    }

    /// Follows successor pointers once around the ring.
    fn walk(&self) -> Result<Vec<ControllerId>> {
        let Some(&start) = self.nodes.keys().next() else {
            return Ok(Vec::new());
        };
        let mut order = vec![start];
        let mut seen = BTreeSet::from([start]);
        let mut cursor = self.nodes[&start].successor;
        while cursor != start {
            let node = self
                .nodes
                .get(&cursor)
                .ok_or_else(|| RingError::Inconsistent(format!("dangling successor {cursor}")))?;
            if !seen.insert(cursor) {
                return Err(RingError::Inconsistent(format!("successor cycle through {cursor}")));
            }
            order.push(cursor);
            cursor = node.successor;
        }
        if order.len() != self.nodes.len() {
            return Err(RingError::Inconsistent(format!(
                "successor walk visits {} of {} members",
                order.len(),
                self.nodes.len()
            )));
        }
        Ok(order)
    }

    /// Checks the ring property: following successors from any member visits
    /// every member exactly once, and predecessor pointers mirror successors.
    pub fn check_ring(&self) -> Result<()> {
        self.walk()?;
        for node in self.nodes.values() {
            let succ = &self.nodes[&node.successor];
            if succ.predecessor != node.id {
                return Err(RingError::Inconsistent(format!(
                    "{}.successor = {} but {}.predecessor = {}",
                    node.id, succ.id, succ.id, succ.predecessor
                )));
            }
        }
        Ok(())
    }

    /// Live owner of `key`, routed from an arbitrary live member.
    pub fn owner_of(&self, key: RingKey) -> Result<ControllerId> {
        let start = self.any_live()?;
        Ok(self.route_with_fallback(start, key, &BTreeSet::new())?.owner)
    }

    /// Resolves where the record for `key` lives, routing from `start`.
    pub fn resolve(&self, start: ControllerId, key: RingKey) -> Result<(Lookup, Slot)> {
        let lookup = self.route_with_fallback(start, key, &BTreeSet::new())?;
        let live = lookup.owner;
        // Walk back from the live owner to the member (possibly crashed)
        // whose arc contains the key.
        let mut member = live;
        for _ in 0..self.nodes.len() {
            let node = &self.nodes[&member];
            if key.in_half_open(node.predecessor, member) {
                break;
            }
            member = node.predecessor;
        }
        if member == live {
            return Ok((lookup, Slot::Primary(live)));
        }
        if self.nodes[&live].replica_store.contains_key(&member) {
            Ok((
                lookup,
                Slot::Replica {
                    holder: live,
                    origin: member,
                },
            ))
        } else {
            Err(RingError::RecordUnavailable {
                name: format!("key {key}"),
                owner: member,
            })
        }
    }

    pub fn get(&self, start: ControllerId, rk: &RecordKey) -> Result<(&T, Slot)> {
        let (_, slot) = self.resolve(start, rk.key)?;
        let value = match slot {
            Slot::Primary(id) => self.nodes[&id].store.get(rk),
            Slot::Replica { holder, origin } => self.nodes[&holder].replica_store[&origin].get(rk),
        };
        value
            .map(|v| (v, slot))
            .ok_or_else(|| RingError::RecordNotFound(rk.name.clone()))
    }

    /// Writes a record at its owner (or into the serving replica when the
    /// owner is down) and refreshes replicas.
    pub fn put(&mut self, start: ControllerId, rk: RecordKey, value: T) -> Result<Slot> {
        let (_, slot) = self.resolve(start, rk.key)?;
        match slot {
            Slot::Primary(id) => {
                self.nodes.get_mut(&id).expect("owner").store.insert(rk, value);
                self.replicate_to_successors(id)?;
            }
            Slot::Replica { origin, .. } => {
                for node in self.nodes.values_mut() {
                    if let Some(rep) = node.replica_store.get_mut(&origin) {
                        if !self.crashed.contains(&node.id) {
                            rep.insert(rk.clone(), value.clone());
                        }
                    }
                }
            }
        }
        Ok(slot)
    }

    pub fn remove(&mut self, start: ControllerId, rk: &RecordKey) -> Result<T> {
        let (_, slot) = self.resolve(start, rk.key)?;
        match slot {
            Slot::Primary(id) => {
                let v = self
                    .nodes
                    .get_mut(&id)
                    .expect("owner")
                    .store
                    .remove(rk)
                    .ok_or_else(|| RingError::RecordNotFound(rk.name.clone()))?;
                self.replicate_to_successors(id)?;
                Ok(v)
            }
            Slot::Replica { origin, .. } => {
                let mut out = None;
                for node in self.nodes.values_mut() {
                    if let Some(rep) = node.replica_store.get_mut(&origin) {
                        if let Some(v) = rep.remove(rk) {
                            out.get_or_insert(v);
                        }
                    }
                }
                out.ok_or_else(|| RingError::RecordNotFound(rk.name.clone()))
            }
        }
    }

    /// Every record held in a live primary store.
    pub fn records(&self) -> impl Iterator<Item = (ControllerId, &RecordKey, &T)> + '_ {
        self.nodes
            .values()
            .filter(move |n| !self.crashed.contains(&n.id))
            .flat_map(|n| n.store.iter().map(move |(k, v)| (n.id, k, v)))
    }
}

fn lookup(owner: ControllerId, path: Vec<ControllerId>) -> Lookup {
    Lookup {
        owner,
        hops: (path.len() - 1) as u32,
        path,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(bits: u32, ids: &[u64]) -> Ring<u32> {
        let mut r = Ring::new(bits, 2).unwrap();
        for &id in ids {
            r.join(RingKey(id)).unwrap();
        }
        r
    }

    fn rk(key: u64, name: &str) -> RecordKey {
        RecordKey::new(RingKey(key), name)
    }

    #[test]
    fn interval_membership() {
        let k = RingKey;
        assert!(k(5).in_half_open(k(3), k(5)));
        assert!(!k(3).in_half_open(k(3), k(5)));
        assert!(k(1).in_half_open(k(30), k(3)));
        assert!(k(31).in_half_open(k(30), k(3)));
        assert!(!k(10).in_half_open(k(30), k(3)));
        assert!(k(7).in_half_open(k(7), k(7)));
        assert!(!k(7).in_open(k(7), k(7)));
        assert!(k(8).in_open(k(7), k(7)));
    }

    #[test]
    fn hash_is_deterministic_and_rejects_empty() {
        let space = KeySpace::new(5).unwrap();
        assert_eq!(space.hash_id("M1").unwrap(), space.hash_id("M1").unwrap());
        assert!(matches!(space.hash_id(""), Err(RingError::InvalidArgument(_))));
        assert!(KeySpace::new(0).is_err());
        assert!(KeySpace::new(64).is_err());
    }

    #[test]
    fn lookup_on_small_ring() {
        let r = ring(5, &[3, 10, 16]);
        for start in [3, 10, 16] {
            assert_eq!(
                r.find_successor(RingKey(start), RingKey(12)).unwrap().owner,
                RingKey(16)
            );
            assert_eq!(
                r.find_successor(RingKey(start), RingKey(10)).unwrap().owner,
                RingKey(10)
            );
            assert_eq!(r.find_successor(RingKey(start), RingKey(20)).unwrap().owner, RingKey(3));
        }
    }

    #[test]
    fn singleton_owns_everything() {
        let r = ring(5, &[7]);
        for k in 0..32 {
            let l = r.find_successor(RingKey(7), RingKey(k)).unwrap();
            assert_eq!(l.owner, RingKey(7));
            assert_eq!(l.hops, 0);
        }
        let n = r.node(RingKey(7)).unwrap();
        assert_eq!((n.successor, n.predecessor), (RingKey(7), RingKey(7)));
    }

    #[test]
    fn closest_preceding_finger_examples() {
        let r = ring(5, &[3, 10, 16]);
        // fingers of 3: 4,5,7 -> 10; 11 -> 16; 19 -> 3
        assert_eq!(
            r.node(RingKey(3)).unwrap().fingers,
            vec![RingKey(10), RingKey(10), RingKey(10), RingKey(16), RingKey(3)]
        );
        assert_eq!(
            r.closest_preceding_finger(RingKey(3), RingKey(12)).unwrap(),
            RingKey(10)
        );
        assert_eq!(r.closest_preceding_finger(RingKey(3), RingKey(4)).unwrap(), RingKey(3));
    }

    #[test]
    fn join_links_and_migrates() {
        let mut r = ring(5, &[3, 16]);
        for k in [5u64, 8, 10, 12, 20] {
            r.put(RingKey(3), rk(k, &format!("r{k}")), k as u32).unwrap();
        }
        assert_eq!(r.node(RingKey(16)).unwrap().store().len(), 4);
        let report = r.join(RingKey(10)).unwrap();
        assert_eq!(report.migrated, 3);
        let n10 = r.node(RingKey(10)).unwrap();
        assert_eq!(n10.successor, RingKey(16));
        assert_eq!(n10.predecessor, RingKey(3));
        assert_eq!(r.node(RingKey(16)).unwrap().predecessor, RingKey(10));
        let keys: Vec<u64> = n10.store().keys().map(|k| k.key.0).collect();
        assert_eq!(keys, vec![5, 8, 10]);
        r.check_ring().unwrap();
    }

    #[test]
    fn duplicate_join_is_a_conflict() {
        let mut r = ring(5, &[3]);
        assert_eq!(
            r.join(RingKey(3)).unwrap_err(),
            RingError::MembershipConflict(RingKey(3))
        );
    }

    #[test]
    fn leave_hands_keys_to_successor() {
        let mut r = ring(5, &[3, 10, 16]);
        r.put(RingKey(3), rk(14, "a"), 1).unwrap();
        r.put(RingKey(3), rk(16, "b"), 2).unwrap();
        let d = r.leave(RingKey(16)).unwrap();
        assert_eq!(d.successor, Some(RingKey(3)));
        assert_eq!(d.moved, 2);
        assert_eq!(r.node(RingKey(3)).unwrap().predecessor, RingKey(10));
        assert_eq!(r.node(RingKey(10)).unwrap().successor, RingKey(3));
        assert_eq!(r.get(RingKey(10), &rk(14, "a")).unwrap().0, &1);
        assert!(matches!(r.leave(RingKey(16)), Err(RingError::NotAMember(_))));
    }

    #[test]
    fn last_member_leaves() {
        let mut r = ring(5, &[3]);
        let d = r.leave(RingKey(3)).unwrap();
        assert!(d.orphaned.is_empty());
        assert!(r.is_empty());
    }

    #[test]
    fn replication_reaches_r_successors() {
        let mut r = ring(5, &[3, 10, 16]);
        r.put(RingKey(10), rk(2, "x"), 9).unwrap();
        let receipt = r.replicate_to_successors(RingKey(3)).unwrap();
        assert_eq!(
            receipt.copies,
            vec![
                ReplicaCopy {
                    holder: RingKey(10),
                    records: 1
                },
                ReplicaCopy {
                    holder: RingKey(16),
                    records: 1
                }
            ]
        );
        assert!(!receipt.partial);
        for h in [10, 16] {
            assert!(r.node(RingKey(h)).unwrap().replica_store()[&RingKey(3)].contains_key(&rk(2, "x")));
        }
    }

    #[test]
    fn empty_store_replicates_zero_records() {
        let mut r = ring(5, &[3, 10, 16]);
        let receipt = r.replicate_to_successors(RingKey(3)).unwrap();
        assert!(receipt.copies.iter().all(|c| c.records == 0));
    }

    #[test]
    fn partial_replication_is_flagged() {
        let mut r = ring(5, &[3, 10]);
        assert!(r.replicate_to_successors(RingKey(3)).unwrap().partial);
    }

    #[test]
    fn fallback_routes_around_failed_finger() {
        let r = ring(5, &[3, 10, 16, 24]);
        // node 3: fingers 4,5,7 -> 10, 11 -> 16, 19 -> 24; key 23 would go to 16 first
        assert_eq!(
            r.closest_preceding_finger(RingKey(3), RingKey(23)).unwrap(),
            RingKey(16)
        );
        let failed = BTreeSet::from([RingKey(16)]);
        let l = r.route_with_fallback(RingKey(3), RingKey(23), &failed).unwrap();
        assert_eq!(l.owner, RingKey(24));
        assert!(!l.path.contains(&RingKey(16)));
    }

    #[test]
    fn fallback_without_failures_matches_plain_lookup() {
        let r = ring(6, &[1, 9, 17, 30, 41, 55]);
        for start in r.members().collect::<Vec<_>>() {
            for k in 0..64 {
                let a = r.find_successor(start, RingKey(k)).unwrap();
                let b = r.route_with_fallback(start, RingKey(k), &BTreeSet::new()).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn all_routes_dead_is_reported() {
        let r = ring(5, &[3, 10, 16, 24]);
        let failed = BTreeSet::from([RingKey(10), RingKey(16), RingKey(24)]);
        let err = r.route_with_fallback(RingKey(3), RingKey(12), &failed).unwrap_err();
        assert!(matches!(err, RingError::RoutingFailure { .. }));
    }

    #[test]
    fn plain_lookup_fails_on_crashed_finger() {
        let mut r = ring(5, &[3, 10, 16, 24]);
        r.crash(RingKey(16)).unwrap();
        assert!(matches!(
            r.find_successor(RingKey(3), RingKey(23)),
            Err(RingError::RoutingFailure { .. })
        ));
        assert_eq!(r.owner_of(RingKey(23)).unwrap(), RingKey(24));
    }

    #[test]
    fn crash_then_recover_serves_replicas() {
        let mut r = ring(5, &[3, 10, 16]);
        r.put(RingKey(16), rk(2, "m"), 7).unwrap();
        r.crash(RingKey(3)).unwrap();
        // served from 10's replica while 3 is down
        let (v, slot) = r.get(RingKey(16), &rk(2, "m")).unwrap();
        assert_eq!(
            (*v, slot),
            (
                7,
                Slot::Replica {
                    holder: RingKey(10),
                    origin: RingKey(3)
                }
            )
        );
        r.put(RingKey(16), rk(2, "m"), 8).unwrap();
        let rec = r.recover(RingKey(3)).unwrap();
        assert_eq!(rec.heir, RingKey(10));
        assert_eq!(rec.recovered, vec![rk(2, "m")]);
        assert!(rec.lost.is_empty());
        assert_eq!(
            r.get(RingKey(16), &rk(2, "m")).unwrap(),
            (&8, Slot::Primary(RingKey(10)))
        );
        r.check_ring().unwrap();
    }

    #[test]
    fn losing_more_than_r_adjacent_nodes_reports_loss() {
        let mut r = ring(5, &[3, 10, 16, 24, 28]);
        r.put(RingKey(3), rk(2, "m"), 1).unwrap();
        for id in [3, 10, 16] {
            r.crash(RingKey(id)).unwrap();
        }
        let rec = r.recover(RingKey(10)).unwrap();
        assert_eq!(rec.failed, vec![RingKey(3), RingKey(10), RingKey(16)]);
        assert_eq!(rec.heir, RingKey(24));
        assert_eq!(rec.lost, vec![rk(2, "m")]);
    }
}
