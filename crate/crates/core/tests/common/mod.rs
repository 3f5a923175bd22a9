//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdedge::geo::{Disc, Point};
use sdedge::ids::{ApId, MdId};
use sdedge::mobility::{ControlPlane, FlowDescriptor};
use sdedge::ring::{ControllerId, Ring, RingKey};
use sdedge::scenario::Scenario;
use sdedge::scheduler::{ApStatus, FlowRequest, PartitionView, RadioTech};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn bundled(name: &str) -> Scenario {
    Scenario::from_path(scenario_dir().join(format!("{name}.scenario"))).expect("bundled scenario is valid")
}

/// Brute-force ring: a sorted set of live ids.
#[derive(Clone, Debug, Default)]
pub struct RingView {
    pub ids: BTreeSet<u64>,
}

impl RingView {
    pub fn new(ids: impl IntoIterator<Item = u64>) -> Self {
        RingView {
            ids: ids.into_iter().collect(),
        }
    }

    /// First id at or after `k`, wrapping.
    pub fn owner(&self, k: u64) -> u64 {
        *self
            .ids
            .range(k..)
            .next()
            .or_else(|| self.ids.iter().next())
            .expect("non-empty ring")
    }
}

pub fn random_ids(rng: &mut impl Rng, n: usize, bits: u32) -> Vec<u64> {
    let mut ids = BTreeSet::new();
    while ids.len() < n {
        ids.insert(rng.gen_range(0..1u64 << bits));
    }
    let mut v: Vec<u64> = ids.into_iter().collect();
    v.shuffle(rng);
    v
}

pub fn ring_of(bits: u32, r: usize, ids: &[u64]) -> Ring<u32> {
    let mut ring = Ring::new(bits, r).unwrap();
    for &id in ids {
        ring.join(RingKey(id)).unwrap();
    }
    ring
}

/// One random scheduling instance: up to 6 requests over up to 4 APs.
pub fn gap_instance(rng: &mut impl Rng) -> (Vec<FlowRequest>, PartitionView) {
    let techs = [RadioTech::Wifi, RadioTech::Wimax, RadioTech::Lte];
    let n_aps = rng.gen_range(1..=4);
    let mut view = PartitionView::new(RingKey(0));
    for i in 0..n_aps {
        let mut t: BTreeSet<RadioTech> = [RadioTech::Wifi].into_iter().collect();
        for extra in &techs[1..] {
            if rng.gen_bool(0.4) {
                t.insert(*extra);
            }
        }
        let center = Point::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
        let mut ap = ApStatus::new(
            ApId::new(format!("AP{}", i + 1)),
            rng.gen_range(2.0..12.0),
            t,
            Disc::new(center, rng.gen_range(15.0..35.0)),
        );
        ap.load = if rng.gen_bool(0.3) {
            rng.gen_range(0.0..ap.capacity / 2.0)
        } else {
            0.0
        };
        view.add_ap(ap);
    }
    let n_req = rng.gen_range(1..=6);
    let requests = (0..n_req)
        .map(|i| FlowRequest {
            md: MdId::new(format!("M{i}")),
            flow_type: "data".into(),
            demand: (rng.gen_range(0.5..8.0f64) * 10.0).round() / 10.0,
            required_tech: if rng.gen_bool(0.7) {
                RadioTech::Wifi
            } else {
                *techs.choose(rng).unwrap()
            },
            origin: Point::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)),
        })
        .collect();
    (requests, view)
}

pub const GAP_CORPUS_SEED: u64 = 0x6a70_2024;
pub const GAP_CORPUS_SIZE: usize = 200;

pub fn gap_corpus() -> Vec<(Vec<FlowRequest>, PartitionView)> {
    let mut r = rng(GAP_CORPUS_SEED);
    (0..GAP_CORPUS_SIZE).map(|_| gap_instance(&mut r)).collect()
}

/// Control plane with 8 controllers (m = 16, r = 2), one AP per controller
/// and `devices` registered devices, each with one active flow.
pub struct Workload {
    pub cp: ControlPlane,
    pub controllers: Vec<ControllerId>,
    pub devices: Vec<MdId>,
}

pub fn workload(seed: u64, devices: usize) -> Workload {
    let mut r = rng(seed);
    let mut cp = ControlPlane::new(16, 2).unwrap();
    let mut controllers: Vec<ControllerId> = random_ids(&mut r, 8, 16).into_iter().map(RingKey).collect();
    controllers.sort();
    for (i, &c) in controllers.iter().enumerate() {
        cp.add_controller(c).unwrap();
        let ap = ApStatus::new(
            ApId::new(format!("AP{i}")),
            100.0,
            [RadioTech::Wifi].into_iter().collect(),
            Disc::new(Point::new(50.0 * i as f64, 0.0), 30.0),
        );
        cp.add_ap(c, ap, sdedge::ids::MacAddr::local(i as u32 + 1)).unwrap();
    }
    let devices: Vec<MdId> = (0..devices).map(|i| MdId::new(format!("md-{i:03}"))).collect();
    for md in &devices {
        let first = *controllers.choose(&mut r).unwrap();
        cp.register_md(md, first).unwrap();
        cp.start_flow(
            md,
            FlowDescriptor {
                flow: format!("{md}.f").as_str().into(),
                flow_type: "data".into(),
                demand: 0.5,
                tech: RadioTech::Wifi,
            },
        )
        .unwrap();
    }
    Workload {
        cp,
        controllers,
        devices,
    }
}

/// The fig6 topology with a random walk of the device. Returns the scenario
/// text; positions jump between waypoints.
pub fn auth_trace(seed: u64) -> String {
    let mut r = rng(seed);
    // points inside the three-AP intersection, inside exactly one or two
    // discs, and outside every disc
    let inside = [(20.0, 10.0), (18.0, 12.0), (22.0, 8.0), (20.0, 14.0)];
    let partial = [(20.0, 50.0), (-10.0, 0.0), (50.0, 0.0), (5.0, 20.0), (35.0, 22.0)];
    let outside = [(100.0, 100.0), (-40.0, -40.0)];
    let rotation = r.gen_range(2.0..8.0f64);
    let mut text = format!(
        "[params]\nname = auth-{seed}\nm = 5\nduration = 30\nseed = {seed}\nmode = LEDGE-LA\nrotation_period = {rotation:.3}\n\n\
         [topology]\ncontroller C1 id=7\nswitch S1 controller=C1\n\
         ap AP1 x=0 y=0 radius=30 capacity=11 controller=C1 beacon_offset=0.05\n\
         ap AP2 x=40 y=0 radius=30 capacity=11 controller=C1 beacon_offset=0.07\n\
         ap AP3 x=20 y=30 radius=30 capacity=11 controller=C1 beacon_offset=0.02\n\
         link AP1 S1 latency=0.001 rate=11\nlink AP2 S1 latency=0.001 rate=11\nlink AP3 S1 latency=0.001 rate=11\n\
         link S1 C1 latency=0.001 rate=100\nmd M1 x=20 y=10\n\n[traces]\n"
    );
    let mut t = 0.0;
    loop {
        t += r.gen_range(0.3..4.0f64);
        if t >= 29.0 {
            break;
        }
        let pool: &[(f64, f64)] = match r.gen_range(0..10) {
            0..=4 => &inside,
            5..=8 => &partial,
            _ => &outside,
        };
        let (x, y) = *pool.choose(&mut r).unwrap();
        text.push_str(&format!("move M1 t={t:.3} x={x} y={y}\n"));
    }
    text.push_str("\n[flows]\nflow F1 md=M1 dst=S1 demand=2 start=0.5\n\n[groups]\ngroup G1 AP1 AP2 AP3\n");
    text
}

pub fn coverage_of(s: &Scenario) -> BTreeMap<String, Disc> {
    s.aps
        .iter()
        .map(|a| (a.name.clone(), Disc::new(a.position, a.radius)))
        .collect()
}

pub struct AuthAudit {
    pub grants: usize,
    pub denies: usize,
    pub soundness: Vec<String>,
    pub rotation: Vec<String>,
    /// Dwell windows checked for completeness, and those that were not admitted.
    pub dwell_checks: usize,
    pub completeness: Vec<String>,
}

/// Runs one randomized trace and audits every authentication decision
/// against the beacon receipts and rotations recorded in the trace.
pub fn audit_auth_trace(seed: u64) -> AuthAudit {
    use sdedge::authn::GroupId;
    use sdedge::sim::{Simulation, TraceEvent};

    let scenario = Scenario::from_text(&auth_trace(seed)).unwrap();
    let cover = coverage_of(&scenario);
    let members: Vec<String> = scenario.groups[0].members.clone();
    let access = |x: f64, y: f64| members.iter().all(|ap| cover[ap].covers(&Point::new(x, y)));
    let mut sim = Simulation::new(&scenario).unwrap();
    let md = MdId::from("M1");
    let group = GroupId::from("G1");
    let p = sim.params().clone();
    let window = p.reassociation_delay + p.beacon_period + 0.1;

    let mut points: Vec<(f64, f64, f64)> = vec![(0.0, scenario.mds[0].position.x, scenario.mds[0].position.y)];
    points.extend(scenario.waypoints.iter().map(|w| (w.t, w.position.x, w.position.y)));
    let mut dwell_checks = 0;
    let mut completeness = Vec::new();
    for (i, &(t0, x, y)) in points.iter().enumerate() {
        let t_next = points.get(i + 1).map_or(p.duration, |w| w.0);
        let tc = t0 + window;
        if !access(x, y) || tc >= t_next {
            continue;
        }
        sim.run_until(tc).unwrap();
        let rotated = sim
            .trace()
            .iter()
            .any(|e| matches!(e.event, TraceEvent::Rotation { .. }) && e.t > t0 - p.beacon_period && e.t <= tc);
        if rotated {
            continue;
        }
        dwell_checks += 1;
        if !sim.gate().admitted(&md, &group, sim.authority(), tc) {
            completeness.push(format!(
                "seed {seed}: not admitted at {tc:.3} after arriving at {t0:.3}"
            ));
        }
    }
    sim.run().unwrap();

    let trace = sim.trace();
    let mut epoch_at = Vec::new();
    let (mut grants, mut denies) = (0, 0);
    let mut soundness = Vec::new();
    let mut rotation = Vec::new();
    for e in trace {
        match &e.event {
            TraceEvent::Rotation { epoch, .. } => epoch_at.push((e.t, *epoch)),
            TraceEvent::AuthDecision { granted, epoch, .. } => {
                let current = epoch_at.last().map(|r| r.1);
                if !granted {
                    denies += 1;
                    continue;
                }
                grants += 1;
                if *epoch != current {
                    rotation.push(format!(
                        "seed {seed}: grant for epoch {epoch:?} at {:.3}, current {current:?}",
                        e.t
                    ));
                }
                for ap in &members {
                    let seen = trace.iter().take_while(|b| b.t <= e.t).any(|b| match &b.event {
                        TraceEvent::BeaconRx {
                            md: m,
                            ap: a,
                            epoch: be,
                            x,
                            y,
                            ..
                        } => m == "M1" && a == ap && Some(*be) == *epoch && cover[ap].covers(&Point::new(*x, *y)),
                        _ => false,
                    });
                    if !seen {
                        soundness.push(format!(
                            "seed {seed}: grant at {:.3} without an in-coverage beacon from {ap}",
                            e.t
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    AuthAudit {
        grants,
        denies,
        soundness,
        rotation,
        dwell_checks,
        completeness,
    }
}
