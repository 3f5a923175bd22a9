//! Location-group authentication.
//!
//! The controller issues one key per member AP of a location group and
//! rotates them periodically. APs broadcast their keys in beacons; a device
//! can only hold an AP's key while it hears that AP, so presenting a current
//! key from every member AP proves presence in the shared coverage area.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{Disc, Point, Region};
use crate::ids::{ApId, MdId};

pub const DEFAULT_BEACON_PERIOD: f64 = 0.1;
pub const DEFAULT_ROTATION_PERIOD: f64 = 10.0;
pub const DEFAULT_REAUTH_WINDOW: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId(s.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuthError {
    #[error("location group {0} needs at least two member APs")]
    TooFewMembers(GroupId),
    #[error("location group {0} has an empty access area")]
    EmptyAccessArea(GroupId),
    #[error("unknown location group {0}")]
    UnknownGroup(GroupId),
    #[error("location group {0} already registered")]
    DuplicateGroup(GroupId),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocationGroup {
    pub id: GroupId,
    pub members: BTreeSet<ApId>,
    /// Intersection of the member coverages.
    pub access_area: Region,
}

impl LocationGroup {
    pub fn new(id: GroupId, members: impl IntoIterator<Item = (ApId, Disc)>) -> Result<Self, AuthError> {
        let (ids, discs): (BTreeSet<ApId>, Vec<Disc>) = members.into_iter().unzip();
        if ids.len() < 2 {
            return Err(AuthError::TooFewMembers(id));
        }
        let access_area = Region::intersection(discs);
        if !has_common_point(&access_area) {
            return Err(AuthError::EmptyAccessArea(id));
        }
        Ok(LocationGroup {
            id,
            members: ids,
            access_area,
        })
    }

    pub fn in_access_area(&self, p: &Point) -> bool {
        self.access_area.contains(p)
    }
}

/// Coarse check that a disc intersection is non-empty: tests the centers,
/// pairwise midpoints and a sampled grid around the smallest disc.
fn has_common_point(region: &Region) -> bool {
    let discs = &region.discs;
    let mut candidates: Vec<Point> = discs.iter().map(|d| d.center).collect();
    for (i, a) in discs.iter().enumerate() {
        for b in &discs[i + 1..] {
            candidates.push(Point::new(
                (a.center.x + b.center.x) / 2.0,
                (a.center.y + b.center.y) / 2.0,
            ));
        }
    }
    if let Some(small) = discs.iter().min_by(|a, b| a.radius.total_cmp(&b.radius)) {
        let steps = 24;
        for i in 0..=steps {
            for j in 0..=steps {
                let fx = i as f64 / steps as f64 * 2.0 - 1.0;
                let fy = j as f64 / steps as f64 * 2.0 - 1.0;
                candidates.push(Point::new(
                    small.center.x + fx * small.radius,
                    small.center.y + fy * small.radius,
                ));
            }
        }
    }
    candidates.iter().any(|p| region.contains(p))
}

/// Opaque key token.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyToken(pub u64);

impl fmt::Display for KeyToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeaconKey {
    pub key_id: KeyToken,
    pub ap: ApId,
    pub group: GroupId,
    pub epoch: u64,
    pub issued_at: f64,
}

/// Keys a device has collected from beacons. Holds at most one key per
/// (group, AP), so at most one per (AP, epoch).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyWallet {
    pub md: MdId,
    held: BTreeMap<(GroupId, ApId), BeaconKey>,
}

impl KeyWallet {
    pub fn new(md: MdId) -> Self {
        KeyWallet {
            md,
            held: BTreeMap::new(),
        }
    }

    /// Stores a key, replacing any older key from the same AP and group.
    /// Returns whether the wallet changed.
    pub fn receive(&mut self, key: &BeaconKey) -> bool {
        let slot = (key.group.clone(), key.ap.clone());
        match self.held.get(&slot) {
            Some(k) if k.key_id == key.key_id => false,
            _ => {
                self.held.insert(slot, key.clone());
                true
            }
        }
    }

    /// Forgets every key received from `ap`.
    pub fn drop_ap(&mut self, ap: &ApId) -> usize {
        let before = self.held.len();
        self.held.retain(|(_, a), _| a != ap);
        before - self.held.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BeaconKey> {
        self.held.values()
    }

    pub fn key_for(&self, group: &GroupId, ap: &ApId) -> Option<&BeaconKey> {
        self.held.get(&(group.clone(), ap.clone()))
    }

    pub fn len(&self) -> usize {
        self.held.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyReason {
    MissingKeys,
    StaleEpoch,
    UnknownGroup,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenyReason::MissingKeys => "missing-keys",
            DenyReason::StaleEpoch => "stale-epoch",
            DenyReason::UnknownGroup => "unknown-group",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Decision {
    Grant { epoch: u64 },
    Deny { reason: DenyReason },
}

impl Decision {
    pub fn is_grant(&self) -> bool {
        matches!(self, Decision::Grant { .. })
    }
}

#[derive(Clone, Debug)]
struct GroupState {
    group: LocationGroup,
    epoch: u64,
    rotated_at: f64,
    /// Keys of the current epoch, per member AP.
    issued: BTreeMap<ApId, BeaconKey>,
}

/// Result of one key rotation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rotation {
    pub group: GroupId,
    pub epoch: u64,
    pub delivered: Vec<BeaconKey>,
    /// Member APs that were down; their keys are delivered on recovery.
    pub deferred: Vec<ApId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Beacon {
    pub ap: ApId,
    pub at: f64,
    pub keys: Vec<BeaconKey>,
}

impl Beacon {
    /// Delivers the beacon's keys to every wallet whose device is inside
    /// `coverage`. Returns the devices that received it.
    pub fn deliver<'a>(
        &self,
        coverage: &Disc,
        devices: impl IntoIterator<Item = (&'a Point, &'a mut KeyWallet)>,
    ) -> Vec<MdId> {
        let mut out = Vec::new();
        for (pos, wallet) in devices {
            if coverage.covers(pos) {
                for k in &self.keys {
                    wallet.receive(k);
                }
                out.push(wallet.md.clone());
            }
        }
        out
    }
}

/// Controller-side key management and verification.
#[derive(Clone, Debug, Default)]
pub struct KeyAuthority {
    groups: BTreeMap<GroupId, GroupState>,
    /// Keys each AP currently holds, per group.
    ap_keys: BTreeMap<ApId, BTreeMap<GroupId, BeaconKey>>,
    /// Keys waiting for a down AP.
    pending: BTreeMap<ApId, BTreeMap<GroupId, BeaconKey>>,
}

impl KeyAuthority {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_group(&mut self, group: LocationGroup) -> Result<(), AuthError> {
        if self.groups.contains_key(&group.id) {
            return Err(AuthError::DuplicateGroup(group.id));
        }
        self.groups.insert(
            group.id.clone(),
            GroupState {
                group,
                epoch: 0,
                rotated_at: f64::NEG_INFINITY,
                issued: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn group(&self, id: &GroupId) -> Option<&LocationGroup> {
        self.groups.get(id).map(|g| &g.group)
    }

    pub fn groups(&self) -> impl Iterator<Item = &LocationGroup> {
        self.groups.values().map(|g| &g.group)
    }

    /// Groups an AP belongs to.
    pub fn groups_of(&self, ap: &ApId) -> Vec<GroupId> {
        self.groups
            .values()
            .filter(|g| g.group.members.contains(ap))
            .map(|g| g.group.id.clone())
            .collect()
    }

    pub fn epoch(&self, id: &GroupId) -> Option<u64> {
        self.groups.get(id).map(|g| g.epoch)
    }

    pub fn rotated_at(&self, id: &GroupId) -> Option<f64> {
        self.groups.get(id).map(|g| g.rotated_at)
    }

    /// Starts a new epoch: one fresh key per member AP. Keys for APs that are
    /// down are held back until [`KeyAuthority::ap_recovered`].
    pub fn rotate_group_keys(
        &mut self,
        id: &GroupId,
        now: f64,
        rng: &mut impl RngCore,
        ap_up: impl Fn(&ApId) -> bool,
    ) -> Result<Rotation, AuthError> {
        let state = self
            .groups
            .get_mut(id)
            .ok_or_else(|| AuthError::UnknownGroup(id.clone()))?;
        state.epoch += 1;
        state.rotated_at = now;
        state.issued.clear();
        let mut delivered = Vec::new();
        let mut deferred = Vec::new();
        for ap in &state.group.members {
            let key = BeaconKey {
                key_id: KeyToken(rng.next_u64()),
                ap: ap.clone(),
                group: id.clone(),
                epoch: state.epoch,
                issued_at: now,
            };
            state.issued.insert(ap.clone(), key.clone());
            if ap_up(ap) {
                self.ap_keys
                    .entry(ap.clone())
                    .or_default()
                    .insert(id.clone(), key.clone());
                self.pending.entry(ap.clone()).or_default().remove(id);
                delivered.push(key);
            } else {
                // a down AP must not keep advertising the old epoch
                if let Some(held) = self.ap_keys.get_mut(ap) {
                    held.remove(id);
                }
                self.pending.entry(ap.clone()).or_default().insert(id.clone(), key);
                deferred.push(ap.clone());
            }
        }
        Ok(Rotation {
            group: id.clone(),
            epoch: state.epoch,
            delivered,
            deferred,
        })
    }

    /// Delivers keys that were deferred while `ap` was down.
    pub fn ap_recovered(&mut self, ap: &ApId) -> Vec<BeaconKey> {
        let Some(waiting) = self.pending.remove(ap) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (group, key) in waiting {
            if self.groups.get(&group).map(|g| g.epoch) == Some(key.epoch) {
                self.ap_keys.entry(ap.clone()).or_default().insert(group, key.clone());
                out.push(key);
            }
        }
        out
    }

    /// Keys currently held by an AP.
    pub fn keys_at(&self, ap: &ApId) -> Vec<BeaconKey> {
        self.ap_keys
            .get(ap)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default()
    }

    /// Beacon content for `ap` at `now`: its current-epoch keys. `None` when
    /// the AP holds no current key.
    pub fn emit_beacon(&self, ap: &ApId, now: f64) -> Option<Beacon> {
        let keys: Vec<BeaconKey> = self
            .keys_at(ap)
            .into_iter()
            .filter(|k| self.groups.get(&k.group).map(|g| g.epoch) == Some(k.epoch))
            .collect();
        (!keys.is_empty()).then(|| Beacon {
            ap: ap.clone(),
            at: now,
            keys,
        })
    }

    /// Grants iff the wallet holds the current-epoch key of every member AP.
    pub fn authenticate(&self, wallet: &KeyWallet, group: &GroupId) -> Decision {
        let Some(state) = self.groups.get(group) else {
            return Decision::Deny {
                reason: DenyReason::UnknownGroup,
            };
        };
        let mut stale = false;
        for ap in &state.group.members {
            match wallet.key_for(group, ap) {
                None => {
                    return Decision::Deny {
                        reason: DenyReason::MissingKeys,
                    }
                }
                Some(k) => {
                    let current = state.issued.get(ap);
                    if k.epoch != state.epoch || current.map(|c| c.key_id) != Some(k.key_id) {
                        stale = true;
                    }
                }
            }
        }
        if stale {
            Decision::Deny {
                reason: DenyReason::StaleEpoch,
            }
        } else {
            Decision::Grant { epoch: state.epoch }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    #[serde(rename = "None")]
    None,
    #[serde(rename = "LEDGE-LA")]
    LocationAuth,
    #[serde(rename = "LEDGE-PAP")]
    PersonalAp,
}

impl AccessMode {
    pub fn access_controlled(&self) -> bool {
        !matches!(self, AccessMode::None)
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessMode::None => "None",
            AccessMode::LocationAuth => "LEDGE-LA",
            AccessMode::PersonalAp => "LEDGE-PAP",
        })
    }
}

impl FromStr for AccessMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(AccessMode::None),
            "LEDGE-LA" | "LA" => Ok(AccessMode::LocationAuth),
            "LEDGE-PAP" | "PAP" => Ok(AccessMode::PersonalAp),
            _ => Err(format!("unknown access-control mode `{s}`")),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GateVerdict {
    Forward,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct AuthRecord {
    decision: Decision,
    at: f64,
}

/// Per-device admission state enforced at the data plane.
///
/// A grant stays usable across a key rotation for `reauth_window` seconds so
/// that a device still inside the area can re-authenticate with the new keys;
/// missing that window revokes it.
#[derive(Clone, Debug)]
pub struct AccessGate {
    mode: AccessMode,
    reauth_window: f64,
    latest: BTreeMap<(MdId, GroupId), AuthRecord>,
}

impl AccessGate {
    pub fn new(mode: AccessMode, reauth_window: f64) -> Self {
        AccessGate {
            mode,
            reauth_window,
            latest: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn record(&mut self, md: &MdId, group: &GroupId, decision: Decision, now: f64) {
        self.latest
            .insert((md.clone(), group.clone()), AuthRecord { decision, at: now });
    }

    pub fn latest(&self, md: &MdId, group: &GroupId) -> Option<&Decision> {
        self.latest.get(&(md.clone(), group.clone())).map(|r| &r.decision)
    }

    /// Whether a grant for `group` is currently usable by `md`.
    pub fn admitted(&self, md: &MdId, group: &GroupId, authority: &KeyAuthority, now: f64) -> bool {
        let Some(rec) = self.latest.get(&(md.clone(), group.clone())) else {
            return false;
        };
        let Decision::Grant { epoch } = rec.decision else {
            return false;
        };
        match (authority.epoch(group), authority.rotated_at(group)) {
            (Some(cur), _) if cur == epoch => true,
            (Some(cur), Some(at)) if cur == epoch + 1 => now < at + self.reauth_window,
            _ => false,
        }
    }

    /// Forwarding decision for traffic of `md` through an AP that belongs to
    /// `groups` (empty when the AP is outside every location group).
    pub fn gate_traffic(&self, md: &MdId, groups: &[GroupId], authority: &KeyAuthority, now: f64) -> GateVerdict {
        if !self.mode.access_controlled() || groups.is_empty() {
            return GateVerdict::Forward;
        }
        if groups.iter().any(|g| self.admitted(md, g, authority, now)) {
            GateVerdict::Forward
        } else {
            GateVerdict::Drop
        }
    }
}
