//! Scenario files: a line-oriented declarative format.
//!
//! ```text
//! # comments run to end of line
//! [params]
//! m = 5
//! duration = 40
//! mode = LEDGE-LA
//!
//! [topology]
//! controller C1 id=3
//! switch S1 controller=C1
//! ap AP1 x=0 y=0 radius=30 capacity=11 tech=wifi controller=C1 beacon_offset=0.05
//! link AP1 S1 latency=0.001 rate=11
//! md M1 x=10 y=5
//! mdgroup dev count=300 x=0..100 y=0..40
//!
//! [traces]
//! move M1 t=22.1 x=60 y=0
//! roam dev-* every=5 jitter=1
//!
//! [flows]
//! flow F1 md=M1 dst=C1 demand=8 start=1
//! flows dev-* dst=S1 demand=0.15
//! packetin S1 rate=2000
//!
//! [groups]
//! group G1 AP1 AP2 AP3
//!
//! [failures]
//! fail controller C1 at=12
//! fail ap AP1 at=5
//! fail link C1 C2 at=3
//! ```
//!
//! Generators (`mdgroup`, `roam`, `flows`) are kept as directives and
//! expanded by the engine with its seeded generator.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::authn::AccessMode;
use crate::geo::Point;
use crate::ring::{self, KeySpace};
use crate::scheduler::{MdStatus, RadioTech};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}", format_issues(.0))]
    Invalid(Vec<ValidationIssue>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid value for `{key}`: {message}")]
    BadValue { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}", self.line, self.message)
        } else {
            f.write_str(&self.message)
        }
    }
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    let mut s = format!("{} validation error(s)", issues.len());
    for i in issues {
        let _ = write!(s, "\n  {i}");
    }
    s
}

/// A declaration with the line it came from. Equality ignores the line.
#[derive(Clone, Debug, Serialize)]
pub struct Spanned<T> {
    pub line: usize,
    #[serde(flatten)]
    pub value: T,
}

impl<T: PartialEq> PartialEq for Spanned<T> {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl<T> std::ops::Deref for Spanned<T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.value
    }
}

/// Engine parameters. Every field can be set in `[params]` or overridden.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Params {
    pub name: String,
    pub m: u32,
    pub r: usize,
    pub seed: u64,
    pub duration: f64,
    pub mode: AccessMode,
    /// Defaults to `mode == LEDGE-PAP`.
    pub personal_ap: Option<bool>,
    pub beacon_period: f64,
    pub rotation_period: f64,
    pub reauth_window: f64,
    pub recovery_lag: f64,
    pub reassociation_delay: f64,
    pub sample_period: f64,
    pub detection_delay: f64,
    pub infra_latency: f64,
    pub wireless_latency: f64,
    pub link_rate: f64,
    pub packet_in_service: f64,
    pub lookup_service: f64,
    pub packet_in_lookup_ratio: f64,
    pub packet_in_queue: usize,
    pub handover_retry: f64,
    pub handover_attempts: u32,
    /// Keep only the first `k` controllers.
    pub controllers: Option<usize>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            name: String::new(),
            m: ring::DEFAULT_BITS,
            r: ring::DEFAULT_REPLICATION,
            seed: 1,
            duration: 10.0,
            mode: AccessMode::None,
            personal_ap: None,
            beacon_period: crate::authn::DEFAULT_BEACON_PERIOD,
            rotation_period: crate::authn::DEFAULT_ROTATION_PERIOD,
            reauth_window: crate::authn::DEFAULT_REAUTH_WINDOW,
            recovery_lag: 4.0,
            reassociation_delay: 0.5,
            sample_period: 0.1,
            detection_delay: 0.0,
            infra_latency: 0.001,
            wireless_latency: 0.005,
            link_rate: 1000.0,
            packet_in_service: 0.001,
            lookup_service: 0.0002,
            packet_in_lookup_ratio: 0.1,
            packet_in_queue: 1000,
            handover_retry: 0.1,
            handover_attempts: 50,
            controllers: None,
        }
    }
}

pub const PARAM_KEYS: &[&str] = &[
    "name",
    "m",
    "r",
    "seed",
    "duration",
    "mode",
    "personal_ap",
    "beacon_period",
    "rotation_period",
    "reauth_window",
    "recovery_lag",
    "reassociation_delay",
    "sample_period",
    "detection_delay",
    "infra_latency",
    "wireless_latency",
    "link_rate",
    "packet_in_service",
    "lookup_service",
    "packet_in_lookup_ratio",
    "packet_in_queue",
    "handover_retry",
    "handover_attempts",
    "controllers",
];

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T, ScenarioError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ScenarioError::BadValue {
        key: key.into(),
        message: format!("`{v}`: {e}"),
    })
}

impl Params {
    pub fn personal_ap(&self) -> bool {
        self.personal_ap.unwrap_or(self.mode == AccessMode::PersonalAp)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ScenarioError> {
        match key {
            "name" => self.name = v.to_string(),
            "m" => self.m = parse_val(key, v)?,
            "r" => self.r = parse_val(key, v)?,
            "seed" => self.seed = parse_val(key, v)?,
            "duration" => self.duration = parse_val(key, v)?,
            "mode" => self.mode = parse_val(key, v)?,
            "personal_ap" => self.personal_ap = Some(parse_val(key, v)?),
            "beacon_period" => self.beacon_period = parse_val(key, v)?,
            "rotation_period" => self.rotation_period = parse_val(key, v)?,
            "reauth_window" => self.reauth_window = parse_val(key, v)?,
            "recovery_lag" => self.recovery_lag = parse_val(key, v)?,
            "reassociation_delay" => self.reassociation_delay = parse_val(key, v)?,
            "sample_period" => self.sample_period = parse_val(key, v)?,
            "detection_delay" => self.detection_delay = parse_val(key, v)?,
            "infra_latency" => self.infra_latency = parse_val(key, v)?,
            "wireless_latency" => self.wireless_latency = parse_val(key, v)?,
            "link_rate" => self.link_rate = parse_val(key, v)?,
            "packet_in_service" => self.packet_in_service = parse_val(key, v)?,
            "lookup_service" => self.lookup_service = parse_val(key, v)?,
            "packet_in_lookup_ratio" => self.packet_in_lookup_ratio = parse_val(key, v)?,
            "packet_in_queue" => self.packet_in_queue = parse_val(key, v)?,
            "handover_retry" => self.handover_retry = parse_val(key, v)?,
            "handover_attempts" => self.handover_attempts = parse_val(key, v)?,
            "controllers" => self.controllers = Some(parse_val(key, v)?),
            _ => return Err(ScenarioError::UnknownParameter(key.to_string())),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "name" => self.name.clone(),
            "m" => self.m.to_string(),
            "r" => self.r.to_string(),
            "seed" => self.seed.to_string(),
            "duration" => self.duration.to_string(),
            "mode" => self.mode.to_string(),
            "personal_ap" => self.personal_ap?.to_string(),
            "beacon_period" => self.beacon_period.to_string(),
            "rotation_period" => self.rotation_period.to_string(),
            "reauth_window" => self.reauth_window.to_string(),
            "recovery_lag" => self.recovery_lag.to_string(),
            "reassociation_delay" => self.reassociation_delay.to_string(),
            "sample_period" => self.sample_period.to_string(),
            "detection_delay" => self.detection_delay.to_string(),
            "infra_latency" => self.infra_latency.to_string(),
            "wireless_latency" => self.wireless_latency.to_string(),
            "link_rate" => self.link_rate.to_string(),
            "packet_in_service" => self.packet_in_service.to_string(),
            "lookup_service" => self.lookup_service.to_string(),
            "packet_in_lookup_ratio" => self.packet_in_lookup_ratio.to_string(),
            "packet_in_queue" => self.packet_in_queue.to_string(),
            "handover_retry" => self.handover_retry.to_string(),
            "handover_attempts" => self.handover_attempts.to_string(),
            "controllers" => self.controllers?.to_string(),
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControllerDecl {
    pub name: String,
    /// Ring id; hashed from the name when absent.
    pub id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchDecl {
    pub name: String,
    pub controller: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApDecl {
    pub name: String,
    pub position: Point,
    pub radius: f64,
    /// Mbps
    pub capacity: f64,
    pub techs: Vec<RadioTech>,
    pub controller: String,
    pub beacon_offset: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkDecl {
    pub a: String,
    pub b: String,
    pub latency: Option<f64>,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MdDecl {
    pub name: String,
    pub position: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MdGroupGen {
    pub prefix: String,
    pub count: usize,
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl MdGroupGen {
    pub fn names(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.count).map(move |i| format!("{}-{i:03}", self.prefix))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaypointDecl {
    pub md: String,
    pub t: f64,
    pub position: Point,
    pub status: Option<MdStatus>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoamGen {
    pub selector: String,
    pub every: f64,
    pub jitter: f64,
    pub start: f64,
    /// Waypoints land within this fraction of the target AP's radius.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowDecl {
    pub name: String,
    pub md: String,
    pub dst: String,
    pub demand: f64,
    pub flow_type: String,
    pub tech: RadioTech,
    pub start: f64,
    pub end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowGen {
    pub selector: String,
    pub dst: String,
    pub demand: f64,
    pub flow_type: String,
    pub tech: RadioTech,
    pub start: f64,
    pub end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PacketInDecl {
    pub switch: String,
    /// Packet-In messages per second.
    pub rate: f64,
    pub start: f64,
    pub end: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupDecl {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FailureTarget {
    Controller {
        name: String,
    },
    Ap {
        name: String,
    },
    /// Finger link between two controllers.
    Link {
        a: String,
        b: String,
    },
}

impl fmt::Display for FailureTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureTarget::Controller { name } => write!(f, "controller {name}"),
            FailureTarget::Ap { name } => write!(f, "ap {name}"),
            FailureTarget::Link { a, b } => write!(f, "link {a} {b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailureDecl {
    pub target: FailureTarget,
    pub at: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Scenario {
    pub params: Params,
    pub controllers: Vec<Spanned<ControllerDecl>>,
    pub switches: Vec<Spanned<SwitchDecl>>,
    pub aps: Vec<Spanned<ApDecl>>,
    pub links: Vec<Spanned<LinkDecl>>,
    pub mds: Vec<Spanned<MdDecl>>,
    pub md_groups: Vec<Spanned<MdGroupGen>>,
    pub waypoints: Vec<Spanned<WaypointDecl>>,
    pub roams: Vec<Spanned<RoamGen>>,
    pub flows: Vec<Spanned<FlowDecl>>,
    pub flow_gens: Vec<Spanned<FlowGen>>,
    pub packet_in: Vec<Spanned<PacketInDecl>>,
    pub groups: Vec<Spanned<GroupDecl>>,
    pub failures: Vec<Spanned<FailureDecl>>,
    /// Line of each `[params]` key, for error reporting.
    #[serde(skip)]
    param_lines: ParamLines,
}

/// Source lines of `[params]` keys. Never affects equality.
#[derive(Clone, Debug, Default)]
struct ParamLines(BTreeMap<String, usize>);

impl PartialEq for ParamLines {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Section {
    None,
    Params,
    Topology,
    Traces,
    Flows,
    Groups,
    Failures,
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

struct Line<'a> {
    no: usize,
    tokens: Vec<Token<'a>>,
}

fn tokenize(no: usize, raw: &str) -> Line<'_> {
    let content = raw.split('#').next().unwrap_or("");
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in content.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(Token {
                    text: &content[s..i],
                    column: content[..s].chars().count() + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: &content[s..],
            column: content[..s].chars().count() + 1,
        });
    }
    Line { no, tokens }
}

/// `key=value` options of a declaration, with their columns.
struct Options<'a> {
    line: usize,
    map: BTreeMap<&'a str, (&'a str, usize)>,
    end_column: usize,
}

impl<'a> Options<'a> {
    fn collect(line: &Line<'a>, from: usize) -> Result<Self, ScenarioError> {
        let mut map = BTreeMap::new();
        for t in &line.tokens[from..] {
            let Some((k, v)) = t.text.split_once('=') else {
                return Err(perr(
                    line.no,
                    t.column,
                    format!("expected key=value, found `{}`", t.text),
                ));
            };
            if k.is_empty() || v.is_empty() {
                return Err(perr(line.no, t.column, format!("malformed option `{}`", t.text)));
            }
            if map.insert(k, (v, t.column + k.len() + 1)).is_some() {
                return Err(perr(line.no, t.column, format!("duplicate option `{k}`")));
            }
        }
        let end_column = line
            .tokens
            .last()
            .map(|t| t.column + t.text.chars().count())
            .unwrap_or(1);
        Ok(Options {
            line: line.no,
            map,
            end_column,
        })
    }

    fn take_str(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key).map(|(v, _)| v)
    }

    fn req_str(&mut self, key: &str) -> Result<&'a str, ScenarioError> {
        self.take_str(key)
            .ok_or_else(|| perr(self.line, self.end_column, format!("missing option `{key}=`")))
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ScenarioError>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, col)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| perr(self.line, col, format!("invalid value `{v}` for `{key}`: {e}"))),
        }
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T, ScenarioError>
    where
        T::Err: fmt::Display,
    {
        self.take(key)?
            .ok_or_else(|| perr(self.line, self.end_column, format!("missing option `{key}=`")))
    }

    fn range(&mut self, key: &str) -> Result<(f64, f64), ScenarioError> {
        let (v, col) = self
            .map
            .remove(key)
            .ok_or_else(|| perr(self.line, self.end_column, format!("missing option `{key}=`")))?;
        let bad = || {
            perr(
                self.line,
                col,
                format!("expected a range `a..b` for `{key}`, found `{v}`"),
            )
        };
        let (a, b) = v.split_once("..").ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }

    fn finish(self) -> Result<(), ScenarioError> {
        match self.map.iter().next() {
            None => Ok(()),
            Some((k, (_, col))) => Err(perr(self.line, col - k.len() - 1, format!("unknown option `{k}`"))),
        }
    }
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn techs(v: &str) -> Result<Vec<RadioTech>, String> {
    let mut out: Vec<RadioTech> = v.split(',').map(|t| t.parse()).collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn positional<'a>(line: &Line<'a>, i: usize, what: &str) -> Result<&'a str, ScenarioError> {
    match line.tokens.get(i) {
        Some(t) if !t.text.contains('=') => Ok(t.text),
        Some(t) => Err(perr(line.no, t.column, format!("expected {what}, found `{}`", t.text))),
        None => {
            let col = line
                .tokens
                .last()
                .map(|t| t.column + t.text.chars().count())
                .unwrap_or(1);
            Err(perr(line.no, col, format!("missing {what}")))
        }
    }
}

impl Scenario {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut s = Self::parse(&text)?;
        if s.params.name.is_empty() {
            s.params.name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        s.validate()?;
        Ok(s)
    }

    /// Parses and validates scenario text.
    pub fn from_text(text: &str) -> Result<Self, ScenarioError> {
        let s = Self::parse(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Syntax only; see [`Scenario::validate`].
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut s = Scenario::default();
        let mut section = Section::None;
        for (i, raw) in text.lines().enumerate() {
            let line = tokenize(i + 1, raw);
            let Some(first) = line.tokens.first() else {
                continue;
            };
            if first.text.starts_with('[') {
                let name = raw.split('#').next().unwrap_or("").trim();
                section = match name {
                    "[params]" => Section::Params,
                    "[topology]" => Section::Topology,
                    "[traces]" => Section::Traces,
                    "[flows]" => Section::Flows,
                    "[groups]" => Section::Groups,
                    "[failures]" => Section::Failures,
                    _ => return Err(perr(line.no, first.column, format!("unknown section `{name}`"))),
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(perr(line.no, first.column, "declaration outside of any section"));
                }
                Section::Params => s.parse_param(raw, &line)?,
                Section::Topology => s.parse_topology(&line)?,
                Section::Traces => s.parse_trace(&line)?,
                Section::Flows => s.parse_flow(&line)?,
                Section::Groups => s.parse_group(&line)?,
                Section::Failures => s.parse_failure(&line)?,
            }
        }
        Ok(s)
    }

    fn parse_param(&mut self, raw: &str, line: &Line<'_>) -> Result<(), ScenarioError> {
        let content = raw.split('#').next().unwrap_or("");
        let col = line.tokens[0].column;
        let Some((k, v)) = content.split_once('=') else {
            return Err(perr(line.no, col, "expected `key = value`"));
        };
        let (k, v) = (k.trim(), v.trim());
        if v.is_empty() {
            return Err(perr(
                line.no,
                col + content[..].find('=').unwrap_or(0),
                format!("missing value for `{k}`"),
            ));
        }
        match self.params.set(k, v) {
            Ok(()) => {
                self.param_lines.0.insert(k.to_string(), line.no);
                Ok(())
            }
            Err(ScenarioError::UnknownParameter(_)) => Err(perr(line.no, col, format!("unknown parameter `{k}`"))),
            Err(e) => {
                let vcol = content.find('=').map(|p| p + 2).unwrap_or(col);
                Err(perr(line.no, vcol, e.to_string()))
            }
        }
    }

    fn parse_topology(&mut self, line: &Line<'_>) -> Result<(), ScenarioError> {
        let kw = line.tokens[0].text;
        let no = line.no;
        match kw {
            "controller" => {
                let name = positional(line, 1, "controller name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let id = o.take::<u64>("id")?;
                o.finish()?;
                self.controllers.push(Spanned {
                    line: no,
                    value: ControllerDecl { name, id },
                });
            }
            "switch" => {
                let name = positional(line, 1, "switch name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let controller = o.req_str("controller")?.to_string();
                o.finish()?;
                self.switches.push(Spanned {
                    line: no,
                    value: SwitchDecl { name, controller },
                });
            }
            "ap" => {
                let name = positional(line, 1, "AP name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let x = o.req("x")?;
                let y = o.req("y")?;
                let radius = o.req("radius")?;
                let capacity = o.req("capacity")?;
                let techs = match o.map.remove("tech") {
                    None => vec![RadioTech::Wifi],
                    Some((v, col)) => techs(v).map_err(|e| perr(no, col, e))?,
                };
                let controller = o.req_str("controller")?.to_string();
                let beacon_offset = o.take("beacon_offset")?;
                o.finish()?;
                self.aps.push(Spanned {
                    line: no,
                    value: ApDecl {
                        name,
                        position: Point::new(x, y),
                        radius,
                        capacity,
                        techs,
                        controller,
                        beacon_offset,
                    },
                });
            }
            "link" => {
                let a = positional(line, 1, "link endpoint")?.to_string();
                let b = positional(line, 2, "second link endpoint")?.to_string();
                let mut o = Options::collect(line, 3)?;
                let latency = o.take("latency")?;
                let rate = o.take("rate")?;
                o.finish()?;
                self.links.push(Spanned {
                    line: no,
                    value: LinkDecl { a, b, latency, rate },
                });
            }
            "md" => {
                let name = positional(line, 1, "device name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let position = Point::new(o.req("x")?, o.req("y")?);
                o.finish()?;
                self.mds.push(Spanned {
                    line: no,
                    value: MdDecl { name, position },
                });
            }
            "mdgroup" => {
                let prefix = positional(line, 1, "name prefix")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let count = o.req("count")?;
                let x = o.range("x")?;
                let y = o.range("y")?;
                o.finish()?;
                self.md_groups.push(Spanned {
                    line: no,
                    value: MdGroupGen { prefix, count, x, y },
                });
            }
            other => {
                return Err(perr(
                    no,
                    line.tokens[0].column,
                    format!("unknown topology declaration `{other}`"),
                ));
            }
        }
        Ok(())
    }

    fn parse_trace(&mut self, line: &Line<'_>) -> Result<(), ScenarioError> {
        let no = line.no;
        match line.tokens[0].text {
            "move" => {
                let md = positional(line, 1, "device name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let t = o.req("t")?;
                let position = Point::new(o.req("x")?, o.req("y")?);
                let status = match o.map.remove("status") {
                    None => None,
                    Some((v, col)) => Some(match v {
                        "joining" => MdStatus::Joining,
                        "leaving" => MdStatus::Leaving,
                        "staying" => MdStatus::Staying,
                        _ => return Err(perr(no, col, format!("unknown status `{v}`"))),
                    }),
                };
                o.finish()?;
                self.waypoints.push(Spanned {
                    line: no,
                    value: WaypointDecl {
                        md,
                        t,
                        position,
                        status,
                    },
                });
            }
            "roam" => {
                let selector = positional(line, 1, "device selector")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let every = o.req("every")?;
                let jitter = o.take("jitter")?.unwrap_or(0.0);
                let start = o.take("start")?.unwrap_or(0.0);
                let spread = o.take("spread")?.unwrap_or(0.5);
                o.finish()?;
                self.roams.push(Spanned {
                    line: no,
                    value: RoamGen {
                        selector,
                        every,
                        jitter,
                        start,
                        spread,
                    },
                });
            }
            other => {
                return Err(perr(
                    no,
                    line.tokens[0].column,
                    format!("unknown trace declaration `{other}`"),
                ));
            }
        }
        Ok(())
    }

    fn parse_flow(&mut self, line: &Line<'_>) -> Result<(), ScenarioError> {
        let no = line.no;
        let tech_of = |o: &mut Options<'_>| -> Result<RadioTech, ScenarioError> {
            match o.map.remove("tech") {
                None => Ok(RadioTech::Wifi),
                Some((v, col)) => v.parse().map_err(|e: String| perr(no, col, e)),
            }
        };
        match line.tokens[0].text {
            "flow" => {
                let name = positional(line, 1, "flow name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let md = o.req_str("md")?.to_string();
                let dst = o.req_str("dst")?.to_string();
                let demand = o.req("demand")?;
                let flow_type = o.take_str("type").unwrap_or("data").to_string();
                let tech = tech_of(&mut o)?;
                let start = o.take("start")?.unwrap_or(0.0);
                let end = o.take("end")?;
                o.finish()?;
                self.flows.push(Spanned {
                    line: no,
                    value: FlowDecl {
                        name,
                        md,
                        dst,
                        demand,
                        flow_type,
                        tech,
                        start,
                        end,
                    },
                });
            }
            "flows" => {
                let selector = positional(line, 1, "device selector")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let dst = o.req_str("dst")?.to_string();
                let demand = o.req("demand")?;
                let flow_type = o.take_str("type").unwrap_or("data").to_string();
                let tech = tech_of(&mut o)?;
                let start = o.take("start")?.unwrap_or(0.0);
                let end = o.take("end")?;
                o.finish()?;
                self.flow_gens.push(Spanned {
                    line: no,
                    value: FlowGen {
                        selector,
                        dst,
                        demand,
                        flow_type,
                        tech,
                        start,
                        end,
                    },
                });
            }
            "packetin" => {
                let switch = positional(line, 1, "switch name")?.to_string();
                let mut o = Options::collect(line, 2)?;
                let rate = o.req("rate")?;
                let start = o.take("start")?.unwrap_or(0.0);
                let end = o.take("end")?;
                o.finish()?;
                self.packet_in.push(Spanned {
                    line: no,
                    value: PacketInDecl {
                        switch,
                        rate,
                        start,
                        end,
                    },
                });
            }
            other => {
                return Err(perr(
                    no,
                    line.tokens[0].column,
                    format!("unknown flow declaration `{other}`"),
                ));
            }
        }
        Ok(())
    }

    fn parse_group(&mut self, line: &Line<'_>) -> Result<(), ScenarioError> {
        if line.tokens[0].text != "group" {
            return Err(perr(
                line.no,
                line.tokens[0].column,
                format!("unknown group declaration `{}`", line.tokens[0].text),
            ));
        }
        let name = positional(line, 1, "group name")?.to_string();
        let mut members = Vec::new();
        for i in 2..line.tokens.len() {
            members.push(positional(line, i, "member AP")?.to_string());
        }
        self.groups.push(Spanned {
            line: line.no,
            value: GroupDecl { name, members },
        });
        Ok(())
    }

    fn parse_failure(&mut self, line: &Line<'_>) -> Result<(), ScenarioError> {
        if line.tokens[0].text != "fail" {
            return Err(perr(
                line.no,
                line.tokens[0].column,
                format!("unknown failure declaration `{}`", line.tokens[0].text),
            ));
        }
        let kind = positional(line, 1, "failure target kind")?;
        let (target, rest) = match kind {
            "controller" => (
                FailureTarget::Controller {
                    name: positional(line, 2, "controller name")?.to_string(),
                },
                3,
            ),
            "ap" => (
                FailureTarget::Ap {
                    name: positional(line, 2, "AP name")?.to_string(),
                },
                3,
            ),
            "link" => (
                FailureTarget::Link {
                    a: positional(line, 2, "controller name")?.to_string(),
                    b: positional(line, 3, "controller name")?.to_string(),
                },
                4,
            ),
            other => {
                return Err(perr(
                    line.no,
                    line.tokens[1].column,
                    format!("unknown failure target `{other}`"),
                ));
            }
        };
        let mut o = Options::collect(line, rest)?;
        let at = o.req("at")?;
        o.finish()?;
        self.failures.push(Spanned {
            line: line.no,
            value: FailureDecl { target, at },
        });
        Ok(())
    }

    /// Names of every device, explicit and generated, in declaration order.
    pub fn md_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.mds.iter().map(|m| m.name.clone()).collect();
        for g in &self.md_groups {
            out.extend(g.names());
        }
        out
    }

    /// Devices matched by a selector: an exact name, `prefix*`, or `*`.
    pub fn select<'a>(names: &'a [String], selector: &str) -> Vec<&'a String> {
        match selector.strip_suffix('*') {
            Some(prefix) => names.iter().filter(|n| n.starts_with(prefix)).collect(),
            None => names.iter().filter(|n| *n == selector).collect(),
        }
    }

    /// Ring id of each controller, in declaration order.
    pub fn controller_ids(&self) -> Result<Vec<u64>, ScenarioError> {
        let space = KeySpace::new(self.params.m).map_err(|e| ScenarioError::BadValue {
            key: "m".into(),
            message: e.to_string(),
        })?;
        self.controllers
            .iter()
            .map(|c| match c.id {
                Some(id) => Ok(id),
                None => space
                    .hash_id(&c.name)
                    .map(|k| k.0)
                    .map_err(|e| ScenarioError::BadValue {
                        key: c.name.clone(),
                        message: e.to_string(),
                    }),
            })
            .collect()
    }

    /// Checks referential integrity and value ranges, collecting every issue.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut issues = Vec::new();
        let mut issue = |line: usize, message: String| issues.push(ValidationIssue { line, message });
        let p = &self.params;
        let pl = |k: &str| self.param_lines.0.get(k).copied().unwrap_or(0);

        if !(p.duration > 0.0 && p.duration.is_finite()) {
            issue(pl("duration"), format!("duration must be positive, got {}", p.duration));
        }
        if p.m == 0 || p.m > ring::MAX_BITS {
            issue(pl("m"), format!("m must be in 1..={}, got {}", ring::MAX_BITS, p.m));
        }
        for (k, v) in [
            ("beacon_period", p.beacon_period),
            ("rotation_period", p.rotation_period),
            ("sample_period", p.sample_period),
            ("packet_in_service", p.packet_in_service),
            ("handover_retry", p.handover_retry),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                issue(pl(k), format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [
            ("reauth_window", p.reauth_window),
            ("recovery_lag", p.recovery_lag),
            ("reassociation_delay", p.reassociation_delay),
            ("detection_delay", p.detection_delay),
            ("infra_latency", p.infra_latency),
            ("wireless_latency", p.wireless_latency),
            ("lookup_service", p.lookup_service),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                issue(pl(k), format!("{k} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&p.packet_in_lookup_ratio) {
            issue(
                pl("packet_in_lookup_ratio"),
                "packet_in_lookup_ratio must be in [0, 1]".into(),
            );
        }
        if p.controllers == Some(0) {
            issue(pl("controllers"), "controllers must be at least 1".into());
        }

        // names
        let mut kinds: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        let mut all: Vec<(&str, &'static str, usize)> = Vec::new();
        all.extend(self.controllers.iter().map(|c| (c.name.as_str(), "controller", c.line)));
        all.extend(self.switches.iter().map(|s| (s.name.as_str(), "switch", s.line)));
        all.extend(self.aps.iter().map(|a| (a.name.as_str(), "ap", a.line)));
        all.extend(self.mds.iter().map(|m| (m.name.as_str(), "md", m.line)));
        let generated: Vec<(String, usize)> = self
            .md_groups
            .iter()
            .flat_map(|g| g.names().map(move |n| (n, g.line)))
            .collect();
        all.extend(generated.iter().map(|(n, l)| (n.as_str(), "md", *l)));
        for (name, kind, line) in &all {
            if let Some((k0, l0)) = kinds.insert(name, (kind, *line)) {
                issue(
                    *line,
                    format!("`{name}` declared twice (as {k0} on line {l0} and as {kind})"),
                );
            }
        }
        let kind_of = |n: &str| kinds.get(n).map(|(k, _)| *k);
        let is = |n: &str, k: &str| kind_of(n) == Some(k);
        let is_infra = |n: &str| matches!(kind_of(n), Some("controller" | "switch" | "ap"));

        if self.controllers.is_empty() {
            issue(0, "at least one controller is required".into());
        }
        match self.controller_ids() {
            Ok(ids) => {
                let size = 1u128 << p.m.min(ring::MAX_BITS);
                let mut by_id: BTreeMap<u64, &str> = BTreeMap::new();
                for (c, id) in self.controllers.iter().zip(ids) {
                    if u128::from(id) >= size {
                        issue(
                            c.line,
                            format!("controller {} id {id} is outside the {}-bit ring", c.name, p.m),
                        );
                    }
                    if let Some(other) = by_id.insert(id, &c.name) {
                        issue(c.line, format!("controllers {other} and {} share ring id {id}", c.name));
                    }
                }
            }
            Err(e) => issue(0, e.to_string()),
        }
        for s in &self.switches {
            if !is(&s.controller, "controller") {
                issue(
                    s.line,
                    format!("switch {} references undeclared controller {}", s.name, s.controller),
                );
            }
        }
        for a in &self.aps {
            if !is(&a.controller, "controller") {
                issue(
                    a.line,
                    format!("AP {} references undeclared controller {}", a.name, a.controller),
                );
            }
            if !(a.radius > 0.0) {
                issue(a.line, format!("AP {} radius must be positive", a.name));
            }
            if !(a.capacity > 0.0) {
                issue(a.line, format!("AP {} capacity must be positive", a.name));
            }
            if let Some(off) = a.beacon_offset {
                if !(0.0..p.beacon_period).contains(&off) {
                    issue(
                        a.line,
                        format!("AP {} beacon_offset must be in [0, beacon_period)", a.name),
                    );
                }
            }
        }
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !is_infra(end) {
                    issue(
                        l.line,
                        format!("link endpoint {end} is not a declared controller, switch or AP"),
                    );
                }
            }
            if l.a == l.b {
                issue(l.line, format!("link {} {} is a self-loop", l.a, l.b));
            }
            if l.latency.is_some_and(|v| !(v >= 0.0)) || l.rate.is_some_and(|v| !(v > 0.0)) {
                issue(l.line, format!("link {} {} needs latency >= 0 and rate > 0", l.a, l.b));
            }
        }
        if !self.controllers.is_empty() {
            // connectivity of the infrastructure graph
            let nodes: Vec<&str> = all.iter().filter(|(_, k, _)| *k != "md").map(|(n, _, _)| *n).collect();
            let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for l in &self.links {
                adj.entry(&l.a).or_default().push(&l.b);
                adj.entry(&l.b).or_default().push(&l.a);
            }
            let mut reached: BTreeSet<&str> = BTreeSet::new();
            let mut stack = vec![nodes[0]];
            while let Some(n) = stack.pop() {
                if reached.insert(n) {
                    stack.extend(adj.get(n).into_iter().flatten().copied());
                }
            }
            let cut: Vec<&str> = nodes.iter().copied().filter(|n| !reached.contains(n)).collect();
            if !cut.is_empty() {
                issue(
                    0,
                    format!(
                        "infrastructure is not connected; unreachable from {}: {}",
                        nodes[0],
                        cut.join(", ")
                    ),
                );
            }
        }
        for g in &self.md_groups {
            if g.count == 0 {
                issue(g.line, format!("mdgroup {} is empty", g.prefix));
            }
            if g.x.0 > g.x.1 || g.y.0 > g.y.1 {
                issue(g.line, format!("mdgroup {} has an empty range", g.prefix));
            }
        }

        let names = self.md_names();
        let mut last_t: BTreeMap<&str, f64> = BTreeMap::new();
        for w in &self.waypoints {
            if !is(&w.md, "md") {
                issue(w.line, format!("waypoint references undeclared device {}", w.md));
                continue;
            }
            if !(w.t >= 0.0) {
                issue(w.line, format!("waypoint time must be non-negative, got {}", w.t));
            }
            if let Some(prev) = last_t.insert(&w.md, w.t) {
                if w.t <= prev {
                    issue(
                        w.line,
                        format!("waypoints of {} must have strictly increasing times", w.md),
                    );
                }
            }
        }
        for r in &self.roams {
            if Self::select(&names, &r.selector).is_empty() {
                issue(r.line, format!("roam selector `{}` matches no device", r.selector));
            }
            if !(r.every > 0.0) || r.jitter < 0.0 || !(0.0..=1.0).contains(&r.spread) {
                issue(r.line, "roam needs every > 0, jitter >= 0 and spread in [0, 1]".into());
            }
            if self.aps.is_empty() {
                issue(r.line, "roam needs at least one AP".into());
            }
        }
        let mut flow_names = BTreeSet::new();
        for f in &self.flows {
            if !flow_names.insert(f.name.as_str()) {
                issue(f.line, format!("flow {} declared twice", f.name));
            }
            if !is(&f.md, "md") {
                issue(f.line, format!("flow {} references undeclared device {}", f.name, f.md));
            }
            if !is_infra(&f.dst) {
                issue(
                    f.line,
                    format!("flow {} references undeclared destination {}", f.name, f.dst),
                );
            }
            check_flow_values(f.line, &f.name, f.demand, f.start, f.end, &mut issue);
        }
        for f in &self.flow_gens {
            if Self::select(&names, &f.selector).is_empty() {
                issue(f.line, format!("flows selector `{}` matches no device", f.selector));
            }
            if !is_infra(&f.dst) {
                issue(f.line, format!("flows reference undeclared destination {}", f.dst));
            }
            check_flow_values(f.line, &f.selector, f.demand, f.start, f.end, &mut issue);
        }
        for pk in &self.packet_in {
            if !is(&pk.switch, "switch") {
                issue(pk.line, format!("packetin references undeclared switch {}", pk.switch));
            }
            if !(pk.rate > 0.0) || pk.end.is_some_and(|e| e < pk.start) {
                issue(
                    pk.line,
                    format!("packetin on {} needs rate > 0 and start <= end", pk.switch),
                );
            }
        }
        let mut group_names = BTreeSet::new();
        for g in &self.groups {
            if !group_names.insert(g.name.as_str()) {
                issue(g.line, format!("group {} declared twice", g.name));
            }
            let distinct: BTreeSet<&String> = g.members.iter().collect();
            if distinct.len() < 2 {
                issue(g.line, format!("group {} needs at least two member APs", g.name));
            }
            for m in &g.members {
                if !is(m, "ap") {
                    issue(g.line, format!("group {} references undeclared AP {m}", g.name));
                }
            }
        }
        for f in &self.failures {
            if !(f.at >= 0.0) {
                issue(f.line, format!("failure time must be non-negative, got {}", f.at));
            }
            match &f.target {
                FailureTarget::Controller { name } if !is(name, "controller") => {
                    issue(f.line, format!("failure target {name} is not a declared controller"));
                }
                FailureTarget::Ap { name } if !is(name, "ap") => {
                    issue(f.line, format!("failure target {name} is not a declared AP"));
                }
                FailureTarget::Link { a, b } => {
                    for end in [a, b] {
                        if !is(end, "controller") {
                            issue(
                                f.line,
                                format!("failed link endpoint {end} is not a declared controller"),
                            );
                        }
                    }
                }
                _ => {}
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(issues))
        }
    }

    /// Applies `key=value` overrides to the parameters, then revalidates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ScenarioError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ScenarioError::BadValue {
                key: o.to_string(),
                message: "expected key=value".into(),
            })?;
            self.params.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Keeps the first `k` controllers; partitions of the others are handed
    /// out round-robin to the survivors.
    pub fn restrict_controllers(&mut self, k: usize) {
        if k == 0 || k >= self.controllers.len() {
            return;
        }
        let kept: Vec<String> = self.controllers[..k].iter().map(|c| c.name.clone()).collect();
        let dropped: BTreeSet<String> = self.controllers[k..].iter().map(|c| c.name.clone()).collect();
        self.controllers.truncate(k);
        let mut next = 0usize;
        let mut reassign = |c: &mut String| {
            if dropped.contains(c) {
                *c = kept[next % kept.len()].clone();
                next += 1;
            }
        };
        for s in &mut self.switches {
            reassign(&mut s.value.controller);
        }
        for a in &mut self.aps {
            reassign(&mut a.value.controller);
        }
        self.links
            .retain(|l| !dropped.contains(&l.a) && !dropped.contains(&l.b));
        self.failures.retain(|f| match &f.target {
            FailureTarget::Controller { name } => !dropped.contains(name),
            FailureTarget::Link { a, b } => !dropped.contains(a) && !dropped.contains(b),
            FailureTarget::Ap { .. } => true,
        });
        for f in &mut self.flows {
            if dropped.contains(&f.dst) {
                f.value.dst = kept[0].clone();
            }
        }
        for f in &mut self.flow_gens {
            if dropped.contains(&f.dst) {
                f.value.dst = kept[0].clone();
            }
        }
    }

    /// Canonical text form; parsing it yields an equal scenario.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let defaults = Params::default();
        let _ = writeln!(s, "[params]");
        for k in PARAM_KEYS {
            if let Some(v) = self.params.get(k) {
                if defaults.get(k).as_deref() != Some(v.as_str()) || *k == "duration" || *k == "seed" {
                    let _ = writeln!(s, "{k} = {v}");
                }
            }
        }
        let _ = writeln!(s, "\n[topology]");
        for c in &self.controllers {
            match c.id {
                Some(id) => writeln!(s, "controller {} id={id}", c.name),
                None => writeln!(s, "controller {}", c.name),
            }
            .ok();
        }
        for w in &self.switches {
            let _ = writeln!(s, "switch {} controller={}", w.name, w.controller);
        }
        for a in &self.aps {
            let techs: Vec<String> = a.techs.iter().map(|t| t.to_string()).collect();
            let _ = write!(
                s,
                "ap {} x={} y={} radius={} capacity={} tech={} controller={}",
                a.name,
                a.position.x,
                a.position.y,
                a.radius,
                a.capacity,
                techs.join(","),
                a.controller
            );
            if let Some(o) = a.beacon_offset {
                let _ = write!(s, " beacon_offset={o}");
            }
            s.push('\n');
        }
        for l in &self.links {
            let _ = write!(s, "link {} {}", l.a, l.b);
            if let Some(v) = l.latency {
                let _ = write!(s, " latency={v}");
            }
            if let Some(v) = l.rate {
                let _ = write!(s, " rate={v}");
            }
            s.push('\n');
        }
        for m in &self.mds {
            let _ = writeln!(s, "md {} x={} y={}", m.name, m.position.x, m.position.y);
        }
        for g in &self.md_groups {
            let _ = writeln!(
                s,
                "mdgroup {} count={} x={}..{} y={}..{}",
                g.prefix, g.count, g.x.0, g.x.1, g.y.0, g.y.1
            );
        }
        let _ = writeln!(s, "\n[traces]");
        for w in &self.waypoints {
            let _ = write!(s, "move {} t={} x={} y={}", w.md, w.t, w.position.x, w.position.y);
            if let Some(st) = w.status {
                let _ = write!(
                    s,
                    " status={}",
                    match st {
                        MdStatus::Joining => "joining",
                        MdStatus::Leaving => "leaving",
                        MdStatus::Staying => "staying",
                    }
                );
            }
            s.push('\n');
        }
        for r in &self.roams {
            let _ = writeln!(
                s,
                "roam {} every={} jitter={} start={} spread={}",
                r.selector, r.every, r.jitter, r.start, r.spread
            );
        }
        let _ = writeln!(s, "\n[flows]");
        for f in &self.flows {
            let _ = write!(
                s,
                "flow {} md={} dst={} demand={} type={} tech={} start={}",
                f.name, f.md, f.dst, f.demand, f.flow_type, f.tech, f.start
            );
            if let Some(e) = f.end {
                let _ = write!(s, " end={e}");
            }
            s.push('\n');
        }
        for f in &self.flow_gens {
            let _ = write!(
                s,
                "flows {} dst={} demand={} type={} tech={} start={}",
                f.selector, f.dst, f.demand, f.flow_type, f.tech, f.start
            );
            if let Some(e) = f.end {
                let _ = write!(s, " end={e}");
            }
            s.push('\n');
        }
        for p in &self.packet_in {
            let _ = write!(s, "packetin {} rate={} start={}", p.switch, p.rate, p.start);
            if let Some(e) = p.end {
                let _ = write!(s, " end={e}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\n[groups]");
        for g in &self.groups {
            let _ = writeln!(s, "group {} {}", g.name, g.members.join(" "));
        }
        let _ = writeln!(s, "\n[failures]");
        for f in &self.failures {
            let _ = writeln!(s, "fail {} at={}", f.target, f.at);
        }
        s
    }
}

fn check_flow_values(
    line: usize,
    name: &str,
    demand: f64,
    start: f64,
    end: Option<f64>,
    issue: &mut dyn FnMut(usize, String),
) {
    if !(demand > 0.0 && demand.is_finite()) {
        issue(line, format!("flow {name} demand must be positive, got {demand}"));
    }
    if !(start >= 0.0) || end.is_some_and(|e| e < start) {
        issue(line, format!("flow {name} needs 0 <= start <= end"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
[params]
duration = 10
m = 5

[topology]
controller C1 id=3
switch S1 controller=C1
ap AP1 x=0 y=0 radius=30 capacity=11 controller=C1
link AP1 S1
link S1 C1 latency=0.002
md M1 x=1 y=1

[flows]
flow F1 md=M1 dst=C1 demand=2
";

    #[test]
    fn parses_small_scenario() {
        let s = Scenario::from_text(SMALL).unwrap();
        assert_eq!(s.controllers[0].id, Some(3));
        assert_eq!(s.aps[0].techs, vec![RadioTech::Wifi]);
        assert_eq!(s.links[1].latency, Some(0.002));
        assert_eq!(s.flows[0].demand, 2.0);
        assert_eq!(s.params.m, 5);
    }

    #[test]
    fn syntax_errors_carry_position() {
        let bad = SMALL.replace("radius=30", "radius=thirty");
        match Scenario::parse(&bad) {
            Err(ScenarioError::Parse { line, column, .. }) => {
                assert_eq!(line, 8);
                assert_eq!(column, 23);
            }
            other => panic!("{other:?}"),
        }
        let bad = SMALL.replace("[flows]", "[flow]");
        assert!(matches!(
            Scenario::parse(&bad),
            Err(ScenarioError::Parse {
                line: 13,
                column: 1,
                ..
            })
        ));
        let bad = SMALL.replace("m = 5", "bogus = 5");
        assert!(matches!(
            Scenario::parse(&bad),
            Err(ScenarioError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn collects_every_validation_error() {
        let bad = format!("{SMALL}flow F2 md=M9 dst=C1 demand=1\n[groups]\ngroup G AP1 AP9\n");
        match Scenario::from_text(&bad) {
            Err(ScenarioError::Invalid(issues)) => {
                assert_eq!(issues.len(), 2, "{issues:?}");
                assert!(issues.iter().any(|i| i.message.contains("M9")));
                assert!(issues.iter().any(|i| i.message.contains("AP9")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn disconnected_infrastructure_is_rejected() {
        let bad = SMALL.replace("link S1 C1 latency=0.002\n", "");
        let err = Scenario::from_text(&bad).unwrap_err().to_string();
        assert!(err.contains("not connected"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let s = Scenario::from_text(SMALL).unwrap();
        let again = Scenario::from_text(&s.to_text()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn overrides() {
        let mut s = Scenario::from_text(SMALL).unwrap();
        s.apply_overrides(&["seed=42", "mode=LEDGE-PAP"]).unwrap();
        assert_eq!(s.params.seed, 42);
        assert!(s.params.personal_ap());
        assert_eq!(
            s.apply_overrides(&["warp=9"]).unwrap_err(),
            ScenarioError::UnknownParameter("warp".into())
        );
        assert!(matches!(
            s.apply_overrides(&["duration=-1"]),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn selectors() {
        let names: Vec<String> = ["dev-000", "dev-001", "M1"].iter().map(|s| s.to_string()).collect();
        assert_eq!(Scenario::select(&names, "dev-*").len(), 2);
        assert_eq!(Scenario::select(&names, "*").len(), 3);
        assert_eq!(Scenario::select(&names, "M1").len(), 1);
    }
}
