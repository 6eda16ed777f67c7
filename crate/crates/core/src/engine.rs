//! Deterministic discrete-event simulation of the gNB - PE1 - P - PE2 - UPF
//! path: CBR and burst traffic generators, link serialization, the ingress
//! resource-control model at PE1, and the coarse-grained queue banks at the
//! output ports.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsStore;
use crate::model::{
    ByteSize, ClassId, Color, DscpValue, FlowId, MappingTable, Nanos, Packet, QosMapEntry, Rate,
    SliceId, TnQosClass, VlanId, NANOS_PER_SEC,
};
use crate::policer::htb::{Admission, BuildError, HtbSpec, PolicerTree};
use crate::policer::markers::{
    ietf_ingress, lin_ingress, IetfDisposition, LinDisposition, MarkingMode, TrTcmState,
    TwoColorState,
};
use crate::sched::{BankSpec, Enqueued, HierBankSpec, HierDrrBank, QueueBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hctns,
    Ietf,
    Lin,
}

/// Point-to-point link: serialization at `rate` plus fixed propagation.
/// Transmissions never overlap.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkSpec {
    pub rate: Rate,
    #[serde(default)]
    pub propagation: Nanos,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinksSpec {
    pub gnb_pe1: LinkSpec,
    pub pe1_p: LinkSpec,
    pub p_pe2: LinkSpec,
    pub pe2_upf: LinkSpec,
}

/// Periodic fixed-size burst riding on top of a flow's constant bitrate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BurstSpec {
    pub size: ByteSize,
    pub period: Nanos,
    pub first_at: Nanos,
    /// Bursts are emitted while t < until (defaults to the flow stop).
    #[serde(default)]
    pub until: Option<Nanos>,
    /// Spacing of the burst frames at the source. None stamps the whole
    /// burst at one instant and lets the first link serialize it.
    #[serde(default)]
    pub pace: Option<Rate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSpec {
    pub name: String,
    pub vlan: VlanId,
    pub dscp: DscpValue,
    pub cbr: Rate,
    pub frame: ByteSize,
    pub start: Nanos,
    pub stop: Nanos,
    #[serde(default)]
    pub burst: Option<BurstSpec>,
}

impl FlowSpec {
    /// Spacing between CBR emissions.
    pub fn emission_interval(&self) -> Option<Nanos> {
        if self.cbr.0 == 0 {
            return None;
        }
        let bits = self.frame.0 as u128 * 8 * NANOS_PER_SEC as u128;
        Some(((bits + self.cbr.0 as u128 / 2) / self.cbr.0 as u128) as Nanos)
    }

    pub fn frames_per_burst(&self) -> u64 {
        self.burst
            .as_ref()
            .map(|b| b.size.0.div_ceil(self.frame.0))
            .unwrap_or(0)
    }
}

/// Arrival times and sizes a generator produces up to `upto` (exclusive).
/// CBR arrivals fall on exact multiples of the emission interval; burst
/// frames are back-to-back at the source unless a pace is configured.
pub fn gen_events(gen: &FlowSpec, upto: Nanos) -> Vec<(Nanos, ByteSize)> {
    let mut out = Vec::new();
    let stop = gen.stop.min(upto);
    if let Some(iv) = gen.emission_interval() {
        let mut t = gen.start;
        while t < stop {
            out.push((t, gen.frame));
            t += iv;
        }
    }
    if let Some(b) = &gen.burst {
        let frames = gen.frames_per_burst();
        let spacing = b.pace.map(|r| r.transmit_time(gen.frame.0)).unwrap_or(0);
        let until = b.until.unwrap_or(gen.stop).min(upto);
        let mut t = b.first_at;
        while t < until {
            for k in 0..frames {
                out.push((t + k * spacing, gen.frame));
            }
            t += b.period;
        }
    }
    out.sort_by_key(|(t, _)| *t);
    out
}

/// One traffic class of a slice in the mapping section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub dscp: DscpValue,
    pub five_qi: u16,
    pub tn_class: TnQosClass,
    /// Catches DSCP values with no row of their own.
    #[serde(default)]
    pub default: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceDef {
    pub name: String,
    pub vlan: VlanId,
    pub classes: Vec<ClassDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IetfSliceParams {
    pub slice: String,
    pub cir: Rate,
    pub pir: Rate,
    pub cbs: ByteSize,
    pub pbs: ByteSize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IetfClassParams {
    pub slice: String,
    pub class: String,
    pub cir: Rate,
    pub cbs: ByteSize,
}

/// 5QI-aware model: a trTCM per slice and a single-rate two-color policer
/// per guaranteed-rate class. Classes without an entry are best effort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IetfSpec {
    pub slices: Vec<IetfSliceParams>,
    pub classes: Vec<IetfClassParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinFlowParams {
    pub flow: String,
    pub cir: Rate,
    pub pir: Rate,
    pub cbs: ByteSize,
    pub pbs: ByteSize,
}

/// trTCM-per-flow model; flows without an entry carry no meter and go to
/// the low-priority queue unconditionally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinSpec {
    pub flows: Vec<LinFlowParams>,
    #[serde(default)]
    pub marking: MarkingMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: ModelKind,
    pub duration: Nanos,
    #[serde(default = "default_sample")]
    pub sample_interval: Nanos,
    pub slices: Vec<SliceDef>,
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub htb: Option<HtbSpec>,
    #[serde(default)]
    pub ietf: Option<IetfSpec>,
    #[serde(default)]
    pub lin: Option<LinSpec>,
    pub pe1_bank: BankSpec,
    pub p_bank: BankSpec,
    #[serde(default)]
    pub pe2_bank: Option<HierBankSpec>,
    pub links: LinksSpec,
    #[serde(default = "default_gnb_cap")]
    pub gnb_queue_cap: usize,
    #[serde(default)]
    pub record_raw_latency: bool,
}

fn default_sample() -> Nanos {
    NANOS_PER_SEC
}

fn default_gnb_cap() -> usize {
    16_384
}

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("policer tree: {0}")]
    Build(#[from] BuildError),
    #[error("model {0:?} requires its policer section")]
    MissingPolicer(ModelKind),
    #[error("flow {0}: {1}")]
    Flow(String, String),
    #[error("duplicate flow name {0}")]
    DuplicateFlow(String),
    #[error("link rates must be positive")]
    ZeroRateLink,
    #[error("duration and sample interval must be positive")]
    BadDuration,
    #[error("slice {0} referenced by the policer section is not defined")]
    UnknownSlice(String),
}

#[derive(Debug, Clone, Copy)]
struct FlowRoute {
    slice: SliceId,
    slice_pos: usize,
    class: ClassId,
    tn_class: TnQosClass,
}

impl Scenario {
    pub fn mapping_table(&self) -> MappingTable {
        let mut t = MappingTable::default();
        for (si, s) in self.slices.iter().enumerate() {
            let sid = SliceId(si as u16);
            t.vlans.push((s.vlan, sid));
            for (ci, c) in s.classes.iter().enumerate() {
                let cid = ClassId(ci as u16);
                t.entries.push(QosMapEntry {
                    slice: sid,
                    class: cid,
                    five_qi: c.five_qi,
                    dscp_in: c.dscp,
                    tn_class: c.tn_class,
                });
                if c.default {
                    t.default_class.push((sid, cid));
                }
            }
        }
        t
    }

    pub fn slice_pos(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn class_pos(&self, slice: usize, name: &str) -> Option<usize> {
        self.slices[slice].classes.iter().position(|c| c.name == name)
    }

    fn routes(&self) -> Result<Vec<FlowRoute>, ValidationError> {
        let table = self.mapping_table();
        let mut routes = Vec::new();
        for f in &self.flows {
            let probe = Packet {
                id: 0,
                flow: FlowId(0),
                size: f.frame,
                vlan: f.vlan,
                dscp: f.dscp,
                tn_class: None,
                color: None,
                created_at: 0,
                delivered_at: None,
            };
            let (slice, class) = table
                .classify(&probe)
                .map_err(|e| ValidationError::Flow(f.name.clone(), e.to_string()))?;
            let tn = table
                .map_to_tn_class(slice, class)
                .map_err(|e| ValidationError::Flow(f.name.clone(), e.to_string()))?;
            routes.push(FlowRoute { slice, slice_pos: slice.0 as usize, class, tn_class: tn });
        }
        Ok(routes)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.duration == 0 || self.sample_interval == 0 {
            return Err(ValidationError::BadDuration);
        }
        for l in [
            self.links.gnb_pe1,
            self.links.pe1_p,
            self.links.p_pe2,
            self.links.pe2_upf,
        ] {
            if l.rate.0 == 0 {
                return Err(ValidationError::ZeroRateLink);
            }
        }
        for (i, f) in self.flows.iter().enumerate() {
            if self.flows[..i].iter().any(|g| g.name == f.name) {
                return Err(ValidationError::DuplicateFlow(f.name.clone()));
            }
            if f.frame.0 == 0 {
                return Err(ValidationError::Flow(f.name.clone(), "zero frame size".into()));
            }
            if f.cbr.0 == 0 && f.burst.is_none() {
                return Err(ValidationError::Flow(f.name.clone(), "flow emits nothing".into()));
            }
            if f.start >= f.stop {
                return Err(ValidationError::Flow(f.name.clone(), "start after stop".into()));
            }
        }
        self.routes()?;
        match self.model {
            ModelKind::Hctns => {
                let spec = self
                    .htb
                    .as_ref()
                    .ok_or(ValidationError::MissingPolicer(ModelKind::Hctns))?;
                let tree = PolicerTree::build(spec)?;
                let routes = self.routes()?;
                for (f, r) in self.flows.iter().zip(&routes) {
                    if tree.leaf_for(r.slice, Some(r.class)).is_none() {
                        return Err(ValidationError::Flow(
                            f.name.clone(),
                            "no policer leaf for this flow".into(),
                        ));
                    }
                }
            }
            ModelKind::Ietf => {
                let spec = self
                    .ietf
                    .as_ref()
                    .ok_or(ValidationError::MissingPolicer(ModelKind::Ietf))?;
                for s in &spec.slices {
                    if self.slice_pos(&s.slice).is_none() {
                        return Err(ValidationError::UnknownSlice(s.slice.clone()));
                    }
                }
                let routes = self.routes()?;
                for (f, r) in self.flows.iter().zip(&routes) {
                    let sname = &self.slices[r.slice_pos].name;
                    if !spec.slices.iter().any(|s| &s.slice == sname) {
                        return Err(ValidationError::Flow(
                            f.name.clone(),
                            format!("no slice policer for {sname}"),
                        ));
                    }
                }
            }
            ModelKind::Lin => {
                if self.lin.is_none() {
                    return Err(ValidationError::MissingPolicer(ModelKind::Lin));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlowStats {
    pub name: String,
    pub generated_pkts: u64,
    pub generated_bytes: u64,
    pub delivered_pkts: u64,
    pub delivered_bytes: u64,
    pub ingress_admitted_pkts: u64,
    pub ingress_dropped: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub per_flow: Vec<FlowStats>,
    pub generated: u64,
    pub delivered: u64,
    pub dropped_total: u64,
    pub resident_end: u64,
    pub in_transit_end: u64,
    pub conservation_ok: bool,
}

pub struct RunOutput {
    pub metrics: MetricsStore,
    pub stats: RunStats,
}

#[derive(Debug)]
enum EvKind {
    Sample,
    CbrTick { flow: usize },
    BurstTick { flow: usize },
    Emit { flow: usize },
    Arrival { node: u8, pkt: Packet },
    LinkFree { link: u8 },
    Wake { gen: u64 },
}

struct Ev {
    t: Nanos,
    rank: u8,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.rank, self.seq) == (other.t, other.rank, other.seq)
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.rank, self.seq).cmp(&(other.t, other.rank, other.seq))
    }
}

const NODE_PE1: u8 = 0;
const NODE_P: u8 = 1;
const NODE_PE2: u8 = 2;
const NODE_UPF: u8 = 3;

const LINK_GNB_PE1: u8 = 0;
const LINK_PE1_P: u8 = 1;
const LINK_P_PE2: u8 = 2;
const LINK_PE2_UPF: u8 = 3;

struct Sim<'a> {
    sc: &'a Scenario,
    routes: Vec<FlowRoute>,
    now: Nanos,
    seq: u64,
    heap: BinaryHeap<Reverse<Ev>>,
    gnb_q: VecDeque<Packet>,
    gnb_drops: u64,
    pe1_bank: QueueBank,
    p_bank: QueueBank,
    pe2_bank: HierDrrBank,
    link_busy: [bool; 4],
    link_rates: [LinkSpec; 4],
    tree: Option<PolicerTree>,
    leaf_of_flow: Vec<usize>,
    wake_gen: u64,
    wake_at: Option<Nanos>,
    ietf_slices: Vec<TrTcmState>,
    ietf_classes: Vec<Option<TwoColorState>>,
    lin_meters: Vec<Option<TrTcmState>>,
    metrics: MetricsStore,
    next_pkt_id: u64,
    flow_stats: Vec<FlowStats>,
    in_transit: u64,
}

impl<'a> Sim<'a> {
    fn push(&mut self, t: Nanos, rank: u8, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev { t, rank, seq: self.seq, kind }));
    }

    fn link_of_node_output(node: u8) -> u8 {
        node + 1
    }

    fn emit_frame(&mut self, flow: usize) {
        let f = &self.sc.flows[flow];
        self.next_pkt_id += 1;
        let pkt = Packet {
            id: self.next_pkt_id,
            flow: FlowId(flow as u16),
            size: f.frame,
            vlan: f.vlan,
            dscp: f.dscp,
            tn_class: None,
            color: None,
            created_at: self.now,
            delivered_at: None,
        };
        self.flow_stats[flow].generated_pkts += 1;
        self.flow_stats[flow].generated_bytes += pkt.size.0;
        if self.gnb_q.len() >= self.sc.gnb_queue_cap {
            self.gnb_drops += 1;
        } else {
            self.gnb_q.push_back(pkt);
            self.try_start_link(LINK_GNB_PE1);
        }
    }

    fn pop_source(&mut self, link: u8) -> Option<Packet> {
        match link {
            LINK_GNB_PE1 => self.gnb_q.pop_front(),
            LINK_PE1_P => self.pe1_bank.dequeue(),
            LINK_P_PE2 => self.p_bank.dequeue(),
            LINK_PE2_UPF => self.pe2_bank.dequeue(),
            _ => unreachable!(),
        }
    }

    fn try_start_link(&mut self, link: u8) {
        if self.link_busy[link as usize] {
            return;
        }
        let Some(pkt) = self.pop_source(link) else { return };
        self.link_busy[link as usize] = true;
        let spec = self.link_rates[link as usize];
        let ser = spec.rate.transmit_time(pkt.size.0);
        let done = self.now + ser;
        self.push(done, 1, EvKind::LinkFree { link });
        self.in_transit += 1;
        self.push(done + spec.propagation, 1, EvKind::Arrival { node: link, pkt });
    }

    fn resched_wake(&mut self) {
        let Some(tree) = &self.tree else { return };
        let nw = tree.next_wake(self.now);
        if nw == self.wake_at {
            return;
        }
        self.wake_gen += 1;
        self.wake_at = nw;
        if let Some(t) = nw {
            let gen = self.wake_gen;
            self.push(t, 1, EvKind::Wake { gen });
        }
    }

    fn forward_admitted(&mut self) {
        let Some(tree) = &mut self.tree else { return };
        let admitted = tree.take_admitted();
        for (mut pkt, _at) in admitted {
            let flow = pkt.flow.0 as usize;
            pkt.tn_class = Some(self.routes[flow].tn_class);
            self.flow_stats[flow].ingress_admitted_pkts += 1;
            self.pe1_bank.enqueue(pkt);
        }
        self.try_start_link(LINK_PE1_P);
    }

    fn pe1_ingress(&mut self, mut pkt: Packet) {
        let flow = pkt.flow.0 as usize;
        let route = self.routes[flow];
        match self.sc.model {
            ModelKind::Hctns => {
                let leaf = self.leaf_of_flow[flow];
                let tree = self.tree.as_mut().expect("hctns model has a tree");
                match tree.offer(leaf, pkt, self.now) {
                    Admission::Admitted(_) | Admission::Queued => {}
                    Admission::Dropped => {
                        self.flow_stats[flow].ingress_dropped += 1;
                    }
                }
                self.forward_admitted();
                self.resched_wake();
            }
            ModelKind::Ietf => {
                let slice_state = &mut self.ietf_slices[route.slice_pos];
                let class_state = self.ietf_classes[flow].as_mut();
                match ietf_ingress(slice_state, class_state, route.tn_class, pkt.size, self.now) {
                    IetfDisposition::Pass(tn, col) | IetfDisposition::Deprioritized(tn, col) => {
                        pkt.tn_class = Some(tn);
                        pkt.color = Some(col);
                        self.flow_stats[flow].ingress_admitted_pkts += 1;
                        self.pe1_bank.enqueue(pkt);
                        self.try_start_link(LINK_PE1_P);
                    }
                    IetfDisposition::Drop => {
                        self.flow_stats[flow].ingress_dropped += 1;
                    }
                }
            }
            ModelKind::Lin => {
                let meter = self.lin_meters[flow].as_mut();
                let (disp, col) = lin_ingress(meter, pkt.size, self.now);
                pkt.color = Some(col);
                match disp {
                    LinDisposition::HighQueue => pkt.tn_class = Some(TnQosClass::A),
                    LinDisposition::LowQueue => pkt.tn_class = Some(TnQosClass::B),
                    LinDisposition::Drop => {
                        self.flow_stats[flow].ingress_dropped += 1;
                        return;
                    }
                }
                self.flow_stats[flow].ingress_admitted_pkts += 1;
                self.pe1_bank.enqueue(pkt);
                self.try_start_link(LINK_PE1_P);
            }
        }
    }

    fn deliver(&mut self, mut pkt: Packet) {
        pkt.delivered_at = Some(self.now);
        let flow = pkt.flow.0 as usize;
        let name = self.sc.flows[flow].name.clone();
        self.metrics.record_delivery(&name, pkt.size.0, pkt.created_at, self.now);
        if self.sc.model == ModelKind::Lin {
            if let Some(col) = pkt.color {
                let suffix = match col {
                    Color::Green => "green",
                    Color::Yellow => "yellow",
                    Color::Red => "red",
                };
                self.metrics.record_delivery(
                    &format!("{name}.{suffix}"),
                    pkt.size.0,
                    pkt.created_at,
                    self.now,
                );
            }
        }
        self.metrics.add_sink_bytes(pkt.size.0);
        self.flow_stats[flow].delivered_pkts += 1;
        self.flow_stats[flow].delivered_bytes += pkt.size.0;
    }

    fn sample(&mut self) {
        let t = self.now;
        self.metrics
            .record_queue_sample("gnb.q", t, self.gnb_q.len() as u64, self.gnb_drops);
        for (class, len, drops) in self.pe1_bank.queue_stats() {
            self.metrics
                .record_queue_sample(&format!("pe1.{}", class.as_str()), t, len as u64, drops);
        }
        for (class, len, drops) in self.p_bank.queue_stats() {
            self.metrics
                .record_queue_sample(&format!("p.{}", class.as_str()), t, len as u64, drops);
        }
        for (slice, class, len, drops) in self.pe2_bank.queue_stats() {
            let sname = &self.sc.slices[slice.0 as usize].name;
            let cname = &self.sc.slices[slice.0 as usize].classes[class.0 as usize].name;
            self.metrics
                .record_queue_sample(&format!("pe2.{sname}.{cname}"), t, len as u64, drops);
        }
        if let Some(tree) = &self.tree {
            for (name, len, drops) in tree.leaf_stats() {
                self.metrics.record_queue_sample(&name, t, len as u64, drops);
            }
        }
    }

    fn resident(&self) -> u64 {
        let tree_q: usize = self
            .tree
            .as_ref()
            .map(|t| t.leaves().iter().map(|&l| t.node(l).queue_len()).sum())
            .unwrap_or(0);
        (self.gnb_q.len()
            + self.pe1_bank.total_len()
            + self.p_bank.total_len()
            + self.pe2_bank.total_len()
            + tree_q) as u64
    }
}

fn default_pe2_bank(sc: &Scenario) -> HierBankSpec {
    HierBankSpec {
        slices: sc
            .slices
            .iter()
            .enumerate()
            .map(|(si, s)| {
                (
                    SliceId(si as u16),
                    ByteSize(1538),
                    s.classes
                        .iter()
                        .enumerate()
                        .map(|(ci, _)| (ClassId(ci as u16), ByteSize(1538)))
                        .collect(),
                )
            })
            .collect(),
        queue_cap: 1000,
    }
}

/// Runs the scenario to completion. Bit-deterministic: the same scenario
/// always produces the same metrics.
pub fn run(sc: &Scenario) -> Result<RunOutput, ValidationError> {
    sc.validate()?;
    let routes = sc.routes()?;

    let tree = match sc.model {
        ModelKind::Hctns => Some(PolicerTree::build(sc.htb.as_ref().unwrap())?),
        _ => None,
    };
    let leaf_of_flow: Vec<usize> = match &tree {
        Some(t) => routes
            .iter()
            .map(|r| t.leaf_for(r.slice, Some(r.class)).expect("validated"))
            .collect(),
        None => vec![0; sc.flows.len()],
    };

    let mut ietf_slices = Vec::new();
    let mut ietf_classes: Vec<Option<TwoColorState>> = vec![None; sc.flows.len()];
    if let Some(spec) = &sc.ietf {
        for s in &sc.slices {
            let p = spec
                .slices
                .iter()
                .find(|x| x.slice == s.name)
                .cloned()
                .unwrap_or(IetfSliceParams {
                    slice: s.name.clone(),
                    cir: Rate(u64::MAX / 2),
                    pir: Rate(u64::MAX / 2),
                    cbs: ByteSize(1538),
                    pbs: ByteSize(1538),
                });
            ietf_slices.push(TrTcmState::new(p.cir, p.pir, p.cbs, p.pbs));
        }
        for (fi, r) in routes.iter().enumerate() {
            let sname = &sc.slices[r.slice_pos].name;
            let cname = &sc.slices[r.slice_pos].classes[r.class.0 as usize].name;
            if let Some(c) = spec
                .classes
                .iter()
                .find(|c| &c.slice == sname && &c.class == cname)
            {
                ietf_classes[fi] = Some(TwoColorState::new(c.cir, c.cbs));
            }
        }
    }

    let mut lin_meters: Vec<Option<TrTcmState>> = vec![None; sc.flows.len()];
    if let Some(spec) = &sc.lin {
        for (fi, f) in sc.flows.iter().enumerate() {
            if let Some(p) = spec.flows.iter().find(|x| x.flow == f.name) {
                lin_meters[fi] =
                    Some(TrTcmState::new(p.cir, p.pir, p.cbs, p.pbs).with_mode(spec.marking));
            }
        }
    }

    let pe2_spec = sc.pe2_bank.clone().unwrap_or_else(|| default_pe2_bank(sc));
    let mut sim = Sim {
        sc,
        routes,
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        gnb_q: VecDeque::new(),
        gnb_drops: 0,
        pe1_bank: QueueBank::new(&sc.pe1_bank),
        p_bank: QueueBank::new(&sc.p_bank),
        pe2_bank: HierDrrBank::new(&pe2_spec),
        link_busy: [false; 4],
        link_rates: [sc.links.gnb_pe1, sc.links.pe1_p, sc.links.p_pe2, sc.links.pe2_upf],
        tree,
        leaf_of_flow,
        wake_gen: 0,
        wake_at: None,
        ietf_slices,
        ietf_classes,
        lin_meters,
        metrics: MetricsStore::new(sc.duration, sc.sample_interval, sc.record_raw_latency),
        next_pkt_id: 0,
        flow_stats: sc
            .flows
            .iter()
            .map(|f| FlowStats { name: f.name.clone(), ..Default::default() })
            .collect(),
        in_transit: 0,
    };

    let mut t = 0;
    while t < sc.duration {
        sim.push(t, 0, EvKind::Sample);
        t += sc.sample_interval;
    }
    for (fi, f) in sc.flows.iter().enumerate() {
        if f.emission_interval().is_some() && f.start < f.stop {
            sim.push(f.start, 1, EvKind::CbrTick { flow: fi });
        }
        if let Some(b) = &f.burst {
            let until = b.until.unwrap_or(f.stop);
            if b.first_at < until {
                sim.push(b.first_at, 1, EvKind::BurstTick { flow: fi });
            }
        }
    }

    while let Some(Reverse(ev)) = sim.heap.pop() {
        if ev.t >= sc.duration {
            break;
        }
        sim.now = ev.t;
        match ev.kind {
            EvKind::Sample => sim.sample(),
            EvKind::CbrTick { flow } => {
                sim.emit_frame(flow);
                let f = &sc.flows[flow];
                let iv = f.emission_interval().expect("cbr tick for cbr flow");
                let next = ev.t + iv;
                if next < f.stop {
                    sim.push(next, 1, EvKind::CbrTick { flow });
                }
            }
            EvKind::BurstTick { flow } => {
                let f = &sc.flows[flow];
                let b = f.burst.as_ref().expect("burst tick for bursty flow");
                let frames = f.frames_per_burst();
                let spacing = b.pace.map(|r| r.transmit_time(f.frame.0));
                match spacing {
                    None => {
                        for _ in 0..frames {
                            sim.emit_frame(flow);
                        }
                    }
                    Some(dt) => {
                        for k in 0..frames {
                            sim.push(ev.t + k * dt, 1, EvKind::Emit { flow });
                        }
                    }
                }
                let until = b.until.unwrap_or(f.stop);
                let next = ev.t + b.period;
                if next < until {
                    sim.push(next, 1, EvKind::BurstTick { flow });
                }
            }
            EvKind::Emit { flow } => sim.emit_frame(flow),
            EvKind::LinkFree { link } => {
                sim.link_busy[link as usize] = false;
                sim.try_start_link(link);
            }
            EvKind::Arrival { node, pkt } => {
                sim.in_transit -= 1;
                match node {
                    NODE_PE1 => sim.pe1_ingress(pkt),
                    NODE_P => {
                        sim.p_bank.enqueue(pkt);
                        sim.try_start_link(Sim::link_of_node_output(NODE_P));
                    }
                    NODE_PE2 => {
                        let r = sim.routes[pkt.flow.0 as usize];
                        if sim.pe2_bank.enqueue(r.slice, r.class, pkt) == Enqueued::Dropped {
                            // counted by the bank's own drop counters
                        }
                        sim.try_start_link(Sim::link_of_node_output(NODE_PE2));
                    }
                    NODE_UPF => sim.deliver(pkt),
                    _ => unreachable!(),
                }
            }
            EvKind::Wake { gen } => {
                if gen != sim.wake_gen {
                    continue;
                }
                sim.wake_at = None;
                if let Some(tree) = &mut sim.tree {
                    tree.drain(sim.now);
                }
                sim.forward_admitted();
                sim.resched_wake();
            }
        }
    }

    let mut stats = RunStats {
        per_flow: sim.flow_stats.clone(),
        ..Default::default()
    };
    stats.generated = sim.flow_stats.iter().map(|f| f.generated_pkts).sum();
    stats.delivered = sim.flow_stats.iter().map(|f| f.delivered_pkts).sum();
    let ingress_drops: u64 = sim.flow_stats.iter().map(|f| f.ingress_dropped).sum();
    let bank_drops: u64 = sim
        .pe1_bank
        .queue_stats()
        .iter()
        .chain(sim.p_bank.queue_stats().iter())
        .map(|(_, _, d)| d)
        .sum::<u64>()
        + sim.pe2_bank.queue_stats().iter().map(|(_, _, _, d)| d).sum::<u64>();
    stats.dropped_total = ingress_drops + bank_drops + sim.gnb_drops;
    stats.resident_end = sim.resident();
    stats.in_transit_end = sim.in_transit;
    stats.conservation_ok = stats.generated
        == stats.delivered + stats.dropped_total + stats.resident_end + stats.in_transit_end;
    debug_assert!(stats.conservation_ok, "packet conservation violated: {stats:?}");

    Ok(RunOutput { metrics: sim.metrics, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cbr_interval_is_exact() {
        let f = FlowSpec {
            name: "f".into(),
            vlan: 0,
            dscp: 0,
            cbr: Rate::mbps(100.0),
            frame: ByteSize(1538),
            start: 0,
            stop: NANOS_PER_SEC,
            burst: None,
        };
        // 1538 B at 100 Mbps: one frame every 123.04 us
        assert_eq!(f.emission_interval(), Some(123_040));
        let ev = gen_events(&f, 1_000_000);
        assert_eq!(ev.len(), 9); // 0, 123040, ..., 984320
        assert_eq!(ev[1].0, 123_040);
    }

    #[test]
    fn burst_frame_count() {
        let f = FlowSpec {
            name: "f".into(),
            vlan: 0,
            dscp: 0,
            cbr: Rate(0),
            frame: ByteSize(1538),
            start: 0,
            stop: 60 * NANOS_PER_SEC,
            burst: Some(BurstSpec {
                size: ByteSize::kilobytes(100),
                period: NANOS_PER_SEC,
                first_at: 10 * NANOS_PER_SEC,
                until: Some(45 * NANOS_PER_SEC),
                pace: None,
            }),
        };
        // 100 KB of 1538 B frames: 66 per burst
        assert_eq!(f.frames_per_burst(), 66);
        let ev = gen_events(&f, 60 * NANOS_PER_SEC);
        // one burst per second from t=10s while t < 45s: 35 bursts
        assert_eq!(ev.len(), 35 * 66);
        // back-to-back at the source: the whole burst shares one timestamp
        assert!(ev[..66].iter().all(|(t, _)| *t == 10 * NANOS_PER_SEC));
    }

    #[test]
    fn paced_burst_spreads_frames() {
        let f = FlowSpec {
            name: "f".into(),
            vlan: 0,
            dscp: 0,
            cbr: Rate(0),
            frame: ByteSize(1538),
            start: 0,
            stop: 10 * NANOS_PER_SEC,
            burst: Some(BurstSpec {
                size: ByteSize(3076),
                period: NANOS_PER_SEC,
                first_at: 0,
                until: Some(NANOS_PER_SEC),
                pace: Some(Rate::mbps(100.0)),
            }),
        };
        let ev = gen_events(&f, NANOS_PER_SEC);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[1].0 - ev[0].0, 123_040);
    }
}
