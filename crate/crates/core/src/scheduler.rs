//! Per-partition resource view and flow-to-AP assignment.
//!
//! Assignment is a generalized assignment problem: flows (items) go to access
//! points (bins) subject to residual capacity, radio technology and coverage,
//! maximizing total satisfied demand. [`assign_flows_greedy`] is the online
//! heuristic; [`brute_force_assign`] enumerates small instances exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{Disc, Point};
use crate::ids::{ApId, FlowId, MdId};
use crate::ring::ControllerId;

const EPS: f64 = 1e-9;

/// Largest instance [`brute_force_assign`] accepts.
pub const ORACLE_MAX_REQUESTS: usize = 8;
pub const ORACLE_MAX_APS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("unknown mobile device {0}")]
    UnknownMobile(MdId),
    #[error("mobile device {0} already present")]
    DuplicateMobile(MdId),
    #[error("unknown access point {0}")]
    UnknownAp(ApId),
    #[error("flow {0} ended without a matching start")]
    UnmatchedRelease(FlowId),
    #[error("flow {0} already started")]
    DuplicateFlow(FlowId),
    #[error("flow demand must be positive, got {0}")]
    InvalidDemand(f64),
    #[error("access point {ap} cannot carry {demand} Mbps (residual {residual})")]
    CapacityExceeded { ap: ApId, demand: f64, residual: f64 },
    #[error("no access point available for {0}")]
    NoApAvailable(MdId),
    #[error("instance too large for exhaustive search ({requests} requests, {aps} APs)")]
    OracleTooLarge { requests: usize, aps: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadioTech {
    Wifi,
    Wimax,
    Bluetooth,
    Zigbee,
    Lte,
}

impl RadioTech {
    pub const ALL: [RadioTech; 5] = [
        RadioTech::Wifi,
        RadioTech::Wimax,
        RadioTech::Bluetooth,
        RadioTech::Zigbee,
        RadioTech::Lte,
    ];
}

impl fmt::Display for RadioTech {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RadioTech::Wifi => "wifi",
            RadioTech::Wimax => "wimax",
            RadioTech::Bluetooth => "bluetooth",
            RadioTech::Zigbee => "zigbee",
            RadioTech::Lte => "lte",
        })
    }
}

impl FromStr for RadioTech {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wifi" => Ok(RadioTech::Wifi),
            "wimax" => Ok(RadioTech::Wimax),
            "bluetooth" => Ok(RadioTech::Bluetooth),
            "zigbee" => Ok(RadioTech::Zigbee),
            "lte" => Ok(RadioTech::Lte),
            other => Err(format!("unknown radio technology `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApStatus {
    pub id: ApId,
    /// Mbps
    pub capacity: f64,
    /// Mbps currently reserved
    pub load: f64,
    pub techs: BTreeSet<RadioTech>,
    pub coverage: Disc,
    pub alive: bool,
}

impl ApStatus {
    pub fn new(id: ApId, capacity: f64, techs: BTreeSet<RadioTech>, coverage: Disc) -> Self {
        ApStatus {
            id,
            capacity,
            load: 0.0,
            techs,
            coverage,
            alive: true,
        }
    }

    pub fn residual(&self) -> f64 {
        self.capacity - self.load
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MdStatus {
    Joining,
    Leaving,
    Staying,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RosterEntry {
    pub status: MdStatus,
    pub position: Point,
    pub ap: Option<ApId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reservation {
    pub md: MdId,
    pub ap: ApId,
    pub demand: f64,
}

/// A typed flow demand from one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRequest {
    pub md: MdId,
    pub flow_type: String,
    /// Mbps, strictly positive
    pub demand: f64,
    pub required_tech: RadioTech,
    pub origin: Point,
}

/// Placement of each request (same order as the input) and the total
/// satisfied demand.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assignment {
    pub placements: Vec<Option<ApId>>,
    pub utility: f64,
}

impl Assignment {
    pub fn assigned(&self) -> usize {
        self.placements.iter().filter(|p| p.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViewEvent {
    MdJoin {
        md: MdId,
        position: Point,
    },
    MdMove {
        md: MdId,
        position: Point,
    },
    MdAttach {
        md: MdId,
        ap: Option<ApId>,
    },
    MdStay {
        md: MdId,
    },
    MdDepart {
        md: MdId,
    },
    MdLeave {
        md: MdId,
    },
    FlowStart {
        flow: FlowId,
        md: MdId,
        ap: ApId,
        demand: f64,
    },
    FlowEnd {
        flow: FlowId,
    },
    ApDown {
        ap: ApId,
    },
    ApUp {
        ap: ApId,
    },
}

/// A controller's accounting of its partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionView {
    pub controller: ControllerId,
    aps: BTreeMap<ApId, ApStatus>,
    roster: BTreeMap<MdId, RosterEntry>,
    reservations: BTreeMap<FlowId, Reservation>,
}

impl PartitionView {
    pub fn new(controller: ControllerId) -> Self {
        PartitionView {
            controller,
            aps: BTreeMap::new(),
            roster: BTreeMap::new(),
            reservations: BTreeMap::new(),
        }
    }

    pub fn with_aps(controller: ControllerId, aps: impl IntoIterator<Item = ApStatus>) -> Self {
        let mut v = PartitionView::new(controller);
        for ap in aps {
            v.add_ap(ap);
        }
        v
    }

    pub fn add_ap(&mut self, ap: ApStatus) {
        self.aps.insert(ap.id.clone(), ap);
    }

    /// Removes an AP together with its reservations, returning both.
    pub fn remove_ap(&mut self, id: &ApId) -> Option<(ApStatus, Vec<(FlowId, Reservation)>)> {
        let ap = self.aps.remove(id)?;
        let flows: Vec<FlowId> = self
            .reservations
            .iter()
            .filter(|(_, r)| &r.ap == id)
            .map(|(f, _)| f.clone())
            .collect();
        let released = flows
            .into_iter()
            .map(|f| {
                let r = self.reservations.remove(&f).expect("listed above");
                (f, r)
            })
            .collect();
        Some((ap, released))
    }

    /// Takes over another partition (used when a controller adopts the
    /// partition of a failed one).
    pub fn absorb(&mut self, other: PartitionView) {
        self.aps.extend(other.aps);
        self.roster.extend(other.roster);
        self.reservations.extend(other.reservations);
    }

    pub fn aps(&self) -> &BTreeMap<ApId, ApStatus> {
        &self.aps
    }

    pub fn ap(&self, id: &ApId) -> Option<&ApStatus> {
        self.aps.get(id)
    }

    pub fn roster(&self) -> &BTreeMap<MdId, RosterEntry> {
        &self.roster
    }

    pub fn reservations(&self) -> &BTreeMap<FlowId, Reservation> {
        &self.reservations
    }

    /// Number of devices present in the partition.
    pub fn density(&self) -> usize {
        self.roster.len()
    }

    fn entry(&mut self, md: &MdId) -> Result<&mut RosterEntry, ScheduleError> {
        self.roster
            .get_mut(md)
            .ok_or_else(|| ScheduleError::UnknownMobile(md.clone()))
    }

    fn ap_mut(&mut self, ap: &ApId) -> Result<&mut ApStatus, ScheduleError> {
        self.aps.get_mut(ap).ok_or_else(|| ScheduleError::UnknownAp(ap.clone()))
    }

    pub fn update(&mut self, event: ViewEvent) -> Result<(), ScheduleError> {
        match event {
            ViewEvent::MdJoin { md, position } => {
                if self.roster.contains_key(&md) {
                    return Err(ScheduleError::DuplicateMobile(md));
                }
                self.roster.insert(
                    md,
                    RosterEntry {
                        status: MdStatus::Joining,
                        position,
                        ap: None,
                    },
                );
            }
            ViewEvent::MdMove { md, position } => self.entry(&md)?.position = position,
            ViewEvent::MdAttach { md, ap } => {
                if let Some(ap) = &ap {
                    if !self.aps.contains_key(ap) {
                        return Err(ScheduleError::UnknownAp(ap.clone()));
                    }
                }
                self.entry(&md)?.ap = ap;
            }
            ViewEvent::MdStay { md } => self.entry(&md)?.status = MdStatus::Staying,
            ViewEvent::MdDepart { md } => self.entry(&md)?.status = MdStatus::Leaving,
            ViewEvent::MdLeave { md } => {
                if self.roster.remove(&md).is_none() {
                    return Err(ScheduleError::UnknownMobile(md));
                }
                let flows: Vec<FlowId> = self
                    .reservations
                    .iter()
                    .filter(|(_, r)| r.md == md)
                    .map(|(f, _)| f.clone())
                    .collect();
                for f in flows {
                    self.update(ViewEvent::FlowEnd { flow: f })?;
                }
            }
            ViewEvent::FlowStart { flow, md, ap, demand } => {
                if demand <= 0.0 || !demand.is_finite() {
                    return Err(ScheduleError::InvalidDemand(demand));
                }
                if self.reservations.contains_key(&flow) {
                    return Err(ScheduleError::DuplicateFlow(flow));
                }
                if !self.roster.contains_key(&md) {
                    return Err(ScheduleError::UnknownMobile(md));
                }
                let status = self.ap_mut(&ap)?;
                if status.residual() + EPS < demand {
                    return Err(ScheduleError::CapacityExceeded {
                        ap,
                        demand,
                        residual: status.residual(),
                    });
                }
                status.load += demand;
                self.reservations.insert(flow, Reservation { md, ap, demand });
            }
            ViewEvent::FlowEnd { flow } => {
                let r = self
                    .reservations
                    .remove(&flow)
                    .ok_or(ScheduleError::UnmatchedRelease(flow))?;
                if let Some(ap) = self.aps.get_mut(&r.ap) {
                    ap.load -= r.demand;
                    if ap.load.abs() < EPS {
                        ap.load = 0.0;
                    }
                }
            }
            ViewEvent::ApDown { ap } => self.ap_mut(&ap)?.alive = false,
            ViewEvent::ApUp { ap } => self.ap_mut(&ap)?.alive = true,
        }
        Ok(())
    }

    fn feasible(ap: &ApStatus, req: &FlowRequest, residual: f64) -> bool {
        ap.alive
            && ap.techs.contains(&req.required_tech)
            && ap.coverage.covers(&req.origin)
            && residual + EPS >= req.demand
    }
}

/// Picks the AP with maximum residual; ties go to the smallest AP id.
fn best_by_residual<'a>(candidates: impl Iterator<Item = (&'a ApId, f64)>) -> Option<&'a ApId> {
    let mut best: Option<(&ApId, f64)> = None;
    for (id, residual) in candidates {
        match best {
            Some((_, r)) if residual <= r + EPS => {}
            _ => best = Some((id, residual)),
        }
    }
    best.map(|(id, _)| id)
}

/// Largest-demand-first greedy with max-residual placement.
pub fn assign_flows_greedy(requests: &[FlowRequest], view: &PartitionView) -> Assignment {
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&requests[a], &requests[b]);
        rb.demand
            .total_cmp(&ra.demand)
            .then_with(|| ra.md.cmp(&rb.md))
            .then(a.cmp(&b))
    });
    let mut residual: BTreeMap<&ApId, f64> = view.aps.iter().map(|(id, ap)| (id, ap.residual())).collect();
    let mut placements = vec![None; requests.len()];
    let mut utility = 0.0;
    for i in order {
        let req = &requests[i];
        let pick = best_by_residual(
            view.aps
                .iter()
                .filter(|(id, ap)| PartitionView::feasible(ap, req, residual[id]))
                .map(|(id, _)| (id, residual[id])),
        );
        if let Some(id) = pick {
            *residual.get_mut(id).expect("every AP has a residual") -= req.demand;
            placements[i] = Some(id.clone());
            utility += req.demand;
        }
    }
    Assignment { placements, utility }
}

/// Exhaustive search for the maximum-utility feasible assignment. Among
/// equal-utility mappings the lexicographically smallest placement vector
/// wins (unassigned sorts before any AP, APs by id).
pub fn brute_force_assign(requests: &[FlowRequest], view: &PartitionView) -> Result<Assignment, ScheduleError> {
    if requests.len() > ORACLE_MAX_REQUESTS || view.aps.len() > ORACLE_MAX_APS {
        return Err(ScheduleError::OracleTooLarge {
            requests: requests.len(),
            aps: view.aps.len(),
        });
    }
    let aps: Vec<&ApStatus> = view.aps.values().collect();
    let mut residual: Vec<f64> = aps.iter().map(|a| a.residual()).collect();
    let mut current = vec![None; requests.len()];
    let mut best: Option<(f64, Vec<Option<usize>>)> = None;

    fn search(
        i: usize,
        utility: f64,
        requests: &[FlowRequest],
        aps: &[&ApStatus],
        residual: &mut [f64],
        current: &mut Vec<Option<usize>>,
        best: &mut Option<(f64, Vec<Option<usize>>)>,
    ) {
        if i == requests.len() {
            let better = match best {
                None => true,
                Some((u, m)) => utility > *u + EPS || (utility >= *u - EPS && *current < *m),
            };
            if better {
                *best = Some((utility, current.clone()));
            }
            return;
        }
        current[i] = None;
        search(i + 1, utility, requests, aps, residual, current, best);
        for (j, ap) in aps.iter().enumerate() {
            if PartitionView::feasible(ap, &requests[i], residual[j]) {
                residual[j] -= requests[i].demand;
                current[i] = Some(j);
                search(
                    i + 1,
                    utility + requests[i].demand,
                    requests,
                    aps,
                    residual,
                    current,
                    best,
                );
                residual[j] += requests[i].demand;
            }
        }
        current[i] = None;
    }

    search(0, 0.0, requests, &aps, &mut residual, &mut current, &mut best);
    let (utility, mapping) = best.expect("the empty assignment is always feasible");
    Ok(Assignment {
        placements: mapping.into_iter().map(|m| m.map(|j| aps[j].id.clone())).collect(),
        utility,
    })
}

/// Chooses the AP for a newly arriving device: the feasible AP with maximum
/// residual capacity. Without a hint only coverage constrains feasibility.
pub fn select_ap_for_join(
    md: &MdId,
    position: Point,
    hint: Option<&FlowRequest>,
    view: &PartitionView,
) -> Result<ApId, ScheduleError> {
    best_by_residual(
        view.aps
            .iter()
            .filter(|(_, ap)| ap.alive && ap.coverage.covers(&position))
            .filter(|(_, ap)| match hint {
                None => true,
                Some(h) => ap.techs.contains(&h.required_tech) && ap.residual() + EPS >= h.demand,
            })
            .map(|(id, ap)| (id, ap.residual())),
    )
    .cloned()
    .ok_or_else(|| ScheduleError::NoApAvailable(md.clone()))
}

/// Checks capacity, technology and coverage for an assignment.
pub fn check_feasible(requests: &[FlowRequest], view: &PartitionView, a: &Assignment) -> Result<(), String> {
    let mut used: BTreeMap<&ApId, f64> = BTreeMap::new();
    for (req, place) in requests.iter().zip(&a.placements) {
        let Some(id) = place else { continue };
        let ap = view.ap(id).ok_or_else(|| format!("unknown AP {id}"))?;
        if !ap.alive || !ap.techs.contains(&req.required_tech) || !ap.coverage.covers(&req.origin) {
            return Err(format!("{} placed on incompatible AP {id}", req.md));
        }
        *used.entry(id).or_default() += req.demand;
    }
    for (id, u) in used {
        let residual = view.aps[id].residual();
        if u > residual + 1e-6 {
            return Err(format!("AP {id} over capacity: {u} > {residual}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::RingKey;

    fn ap(id: &str, cap: f64, techs: &[RadioTech]) -> ApStatus {
        ApStatus::new(
            ApId::from(id),
            cap,
            techs.iter().copied().collect(),
            Disc::new(Point::new(0.0, 0.0), 100.0),
        )
    }

    fn req(md: &str, demand: f64, tech: RadioTech) -> FlowRequest {
        FlowRequest {
            md: MdId::from(md),
            flow_type: "video".into(),
            demand,
            required_tech: tech,
            origin: Point::new(1.0, 1.0),
        }
    }

    fn wifi_view(caps: &[(&str, f64)]) -> PartitionView {
        PartitionView::with_aps(RingKey(1), caps.iter().map(|(id, c)| ap(id, *c, &[RadioTech::Wifi])))
    }

    #[test]
    fn join_then_leave_restores_view() {
        let initial = wifi_view(&[("AP1", 11.0)]);
        let mut v = initial.clone();
        v.update(ViewEvent::MdJoin {
            md: "M1".into(),
            position: Point::new(0.0, 0.0),
        })
        .unwrap();
        assert_eq!(v.density(), 1);
        v.update(ViewEvent::MdLeave { md: "M1".into() }).unwrap();
        assert_eq!(v, initial);
    }

    #[test]
    fn flow_start_reserves_and_end_releases() {
        let mut v = wifi_view(&[("AP1", 11.0)]);
        v.update(ViewEvent::MdJoin {
            md: "M1".into(),
            position: Point::new(0.0, 0.0),
        })
        .unwrap();
        v.update(ViewEvent::FlowStart {
            flow: "F1".into(),
            md: "M1".into(),
            ap: "AP1".into(),
            demand: 2.0,
        })
        .unwrap();
        let a = v.ap(&"AP1".into()).unwrap();
        assert_eq!((a.load, a.residual()), (2.0, 9.0));
        v.update(ViewEvent::FlowEnd { flow: "F1".into() }).unwrap();
        assert_eq!(v.ap(&"AP1".into()).unwrap().load, 0.0);
    }

    #[test]
    fn view_errors() {
        let mut v = wifi_view(&[("AP1", 11.0)]);
        assert_eq!(
            v.update(ViewEvent::MdLeave { md: "ghost".into() }),
            Err(ScheduleError::UnknownMobile("ghost".into()))
        );
        assert_eq!(
            v.update(ViewEvent::FlowEnd { flow: "F9".into() }),
            Err(ScheduleError::UnmatchedRelease("F9".into()))
        );
        v.update(ViewEvent::MdJoin {
            md: "M1".into(),
            position: Point::new(0.0, 0.0),
        })
        .unwrap();
        let over = v.update(ViewEvent::FlowStart {
            flow: "F1".into(),
            md: "M1".into(),
            ap: "AP1".into(),
            demand: 12.0,
        });
        assert!(matches!(over, Err(ScheduleError::CapacityExceeded { .. })));
    }

    #[test]
    fn greedy_single_forced_request() {
        let v = wifi_view(&[("AP1", 11.0)]);
        let a = assign_flows_greedy(&[req("M1", 3.0, RadioTech::Wifi)], &v);
        assert_eq!(a.placements, vec![Some(ApId::from("AP1"))]);
        assert_eq!(a.utility, 3.0);
    }

    #[test]
    fn greedy_splits_two_sevens() {
        let v = wifi_view(&[("AP1", 11.0), ("AP2", 11.0)]);
        let reqs = [req("M1", 7.0, RadioTech::Wifi), req("M2", 7.0, RadioTech::Wifi)];
        let a = assign_flows_greedy(&reqs, &v);
        assert_eq!(a.placements, vec![Some("AP1".into()), Some("AP2".into())]);
        assert_eq!(brute_force_assign(&reqs, &v).unwrap().utility, a.utility);
    }

    #[test]
    fn technology_mismatch_is_unassigned() {
        let v = wifi_view(&[("AP1", 11.0)]);
        let a = assign_flows_greedy(&[req("M1", 1.0, RadioTech::Bluetooth)], &v);
        assert_eq!(a.placements, vec![None]);
        assert_eq!(a.utility, 0.0);
    }

    #[test]
    fn oracle_beats_greedy_on_crafted_instance() {
        let v = wifi_view(&[("AP-big", 11.0), ("AP-small", 8.0)]);
        let reqs = [
            req("M1", 8.0, RadioTech::Wifi),
            req("M2", 6.0, RadioTech::Wifi),
            req("M3", 5.0, RadioTech::Wifi),
        ];
        let g = assign_flows_greedy(&reqs, &v);
        let o = brute_force_assign(&reqs, &v).unwrap();
        assert_eq!(g.utility, 14.0);
        assert_eq!(o.utility, 19.0);
        assert_eq!(
            o.placements,
            vec![Some("AP-small".into()), Some("AP-big".into()), Some("AP-big".into())]
        );
    }

    #[test]
    fn oracle_guard() {
        let v = wifi_view(&[("A", 1.0), ("B", 1.0), ("C", 1.0), ("D", 1.0), ("E", 1.0)]);
        assert!(matches!(
            brute_force_assign(&[], &v),
            Err(ScheduleError::OracleTooLarge { aps: 5, .. })
        ));
    }

    #[test]
    fn select_prefers_max_residual() {
        let mut v = wifi_view(&[("AP1", 9.0), ("AP2", 4.0)]);
        let pos = Point::new(0.0, 0.0);
        assert_eq!(
            select_ap_for_join(&"M".into(), pos, None, &v).unwrap(),
            ApId::from("AP1")
        );
        v.add_ap(ap("AP3", 4.0, &[RadioTech::Wimax]));
        let hint = req("M", 1.0, RadioTech::Wimax);
        assert_eq!(
            select_ap_for_join(&"M".into(), pos, Some(&hint), &v).unwrap(),
            ApId::from("AP3")
        );
    }

    #[test]
    fn select_fails_when_full() {
        let v = wifi_view(&[("AP1", 0.0), ("AP2", 0.0)]);
        let hint = req("M", 1.0, RadioTech::Wifi);
        assert_eq!(
            select_ap_for_join(&"M".into(), Point::new(0.0, 0.0), Some(&hint), &v),
            Err(ScheduleError::NoApAvailable("M".into()))
        );
    }

    #[test]
    fn radio_tech_round_trip() {
        for t in RadioTech::ALL {
            assert_eq!(t.to_string().parse::<RadioTech>().unwrap(), t);
        }
        assert!("laser".parse::<RadioTech>().is_err());
    }
}
