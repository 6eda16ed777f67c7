//! Built-in scenarios reproducing the experimental campaign: Experiment A
//! (model comparison under constant saturation), Experiment B (coarse-
//! grained quantum sweeps), and Experiment C (traffic burst control), for
//! each ingress model.

use crate::engine::{
    BurstSpec, ClassDef, FlowSpec, IetfClassParams, IetfSliceParams, IetfSpec, LinFlowParams,
    LinSpec, LinkSpec, LinksSpec, ModelKind, Scenario, SliceDef,
};
use crate::model::{ByteSize, Nanos, Rate, TnQosClass, NANOS_PER_SEC};
use crate::policer::htb::{ClassSpec, HtbSpec, NodeParams, SliceSpec};
use crate::policer::markers::MarkingMode;
use crate::sched::BankSpec;

const FRAME: ByteSize = ByteSize(1538);

fn secs(s: u64) -> Nanos {
    s * NANOS_PER_SEC
}

/// Slices and traffic classes of the campaign: URLLC (5QI 82, DSCP 46,
/// TN A), ToD video/telemetry (130/131, 38/28, B/C), eMBB VC/BE (2/9,
/// 28/0, C/D with BE as the default class).
fn campaign_slices() -> Vec<SliceDef> {
    vec![
        SliceDef {
            name: "urllc".into(),
            vlan: 100,
            classes: vec![ClassDef {
                name: "urllc".into(),
                dscp: 46,
                five_qi: 82,
                tn_class: TnQosClass::A,
                default: false,
            }],
        },
        SliceDef {
            name: "tod".into(),
            vlan: 200,
            classes: vec![
                ClassDef { name: "video".into(), dscp: 38, five_qi: 130, tn_class: TnQosClass::B, default: false },
                ClassDef { name: "telemetry".into(), dscp: 28, five_qi: 131, tn_class: TnQosClass::C, default: false },
            ],
        },
        SliceDef {
            name: "embb".into(),
            vlan: 300,
            classes: vec![
                ClassDef { name: "vc".into(), dscp: 28, five_qi: 2, tn_class: TnQosClass::C, default: false },
                ClassDef { name: "be".into(), dscp: 0, five_qi: 9, tn_class: TnQosClass::D, default: true },
            ],
        },
    ]
}

fn links() -> LinksSpec {
    LinksSpec {
        gnb_pe1: LinkSpec { rate: Rate::mbps(1000.0), propagation: 0 },
        pe1_p: LinkSpec { rate: Rate::mbps(100.0), propagation: 0 },
        p_pe2: LinkSpec { rate: Rate::mbps(1000.0), propagation: 0 },
        pe2_upf: LinkSpec { rate: Rate::mbps(1000.0), propagation: 0 },
    }
}

fn cbr(name: &str, vlan: u16, dscp: u8, mbps: f64, start: u64, stop: u64) -> FlowSpec {
    FlowSpec {
        name: name.into(),
        vlan,
        dscp,
        cbr: Rate::mbps(mbps),
        frame: FRAME,
        start: secs(start),
        stop: secs(stop),
        burst: None,
    }
}

/// The six intervals of Experiment A: every flow saturates at 100 Mbps
/// while active.
fn exp_a_flows() -> Vec<FlowSpec> {
    vec![
        cbr("be", 300, 0, 100.0, 0, 100),
        cbr("video", 200, 38, 100.0, 20, 60),
        cbr("telemetry", 200, 28, 100.0, 20, 80),
        cbr("vc", 300, 28, 100.0, 40, 70),
        cbr("urllc", 100, 46, 100.0, 40, 80),
    ]
}

fn node(cir_mbps: f64, pir_mbps: f64, burst: u64, queue_cap: usize) -> NodeParams {
    NodeParams {
        cir: Rate::mbps(cir_mbps),
        pir: Rate::mbps(pir_mbps),
        cbs: ByteSize(burst),
        pbs: ByteSize(burst),
        quantum: FRAME,
        priority: 0,
        queue_cap,
    }
}

/// HCTNS policer for Experiments A and B: burst control disabled, so every
/// bucket holds one maximum frame.
fn htb_exp_a() -> HtbSpec {
    let q = 2; // shallow ingress queues: excess is policed away, not parked
    HtbSpec {
        global: node(100.0, 100.0, 1538, q),
        slices: vec![
            SliceSpec { name: "urllc".into(), slice: crate::model::SliceId(0), params: node(1.2, 100.0, 1538, q), classes: vec![] },
            SliceSpec {
                name: "tod".into(),
                slice: crate::model::SliceId(1),
                params: node(36.0, 100.0, 1538, q),
                classes: vec![
                    ClassSpec { name: "video".into(), class: crate::model::ClassId(0), params: node(32.0, 100.0, 1538, q) },
                    ClassSpec { name: "telemetry".into(), class: crate::model::ClassId(1), params: node(4.0, 100.0, 1538, q) },
                ],
            },
            SliceSpec {
                name: "embb".into(),
                slice: crate::model::SliceId(2),
                params: node(52.8, 100.0, 1538, q),
                classes: vec![
                    ClassSpec { name: "vc".into(), class: crate::model::ClassId(0), params: node(52.8, 100.0, 1538, q) },
                    ClassSpec { name: "be".into(), class: crate::model::ClassId(1), params: node(0.0, 100.0, 1538, q) },
                ],
            },
        ],
    }
}

fn ietf_campaign() -> IetfSpec {
    IetfSpec {
        slices: vec![
            IetfSliceParams { slice: "urllc".into(), cir: Rate::mbps(1.2), pir: Rate::mbps(100.0), cbs: ByteSize(1538), pbs: ByteSize(1538) },
            // no best-effort class in the slice: traffic is held to the CIR
            IetfSliceParams { slice: "tod".into(), cir: Rate::mbps(36.0), pir: Rate::mbps(36.0), cbs: ByteSize(1538), pbs: ByteSize(1538) },
            IetfSliceParams { slice: "embb".into(), cir: Rate::mbps(52.8), pir: Rate::mbps(100.0), cbs: ByteSize(1538), pbs: ByteSize(1538) },
        ],
        classes: vec![
            IetfClassParams { slice: "tod".into(), class: "video".into(), cir: Rate::mbps(32.0), cbs: ByteSize(1538) },
            IetfClassParams { slice: "tod".into(), class: "telemetry".into(), cir: Rate::mbps(4.0), cbs: ByteSize(1538) },
            IetfClassParams { slice: "embb".into(), class: "vc".into(), cir: Rate::mbps(52.8), cbs: ByteSize(1538) },
        ],
    }
}

fn lin_exp_a() -> LinSpec {
    let m = |flow: &str, cir: f64| LinFlowParams {
        flow: flow.into(),
        cir: Rate::mbps(cir),
        pir: Rate::mbps(100.0),
        cbs: ByteSize(1538),
        pbs: ByteSize(1538),
    };
    LinSpec {
        flows: vec![m("urllc", 1.2), m("video", 32.0), m("telemetry", 4.0), m("vc", 52.8)],
        marking: MarkingMode::PeakFirst,
    }
}

/// PQ for class A plus DRR queues for B, C, D with the given quanta.
fn bank(qb: u64, qc: u64, qd: u64) -> BankSpec {
    BankSpec {
        priority_classes: vec![TnQosClass::A],
        drr_classes: vec![
            (TnQosClass::B, ByteSize(qb)),
            (TnQosClass::C, ByteSize(qc)),
            (TnQosClass::D, ByteSize(qd)),
        ],
        queue_cap: 1000,
    }
}

/// The two-priority-queue bank of the trTCM-per-flow model: the high queue
/// maps to TN class A, the low one to TN class B.
fn lin_bank() -> BankSpec {
    BankSpec {
        priority_classes: vec![TnQosClass::A, TnQosClass::B],
        drr_classes: vec![],
        queue_cap: 1000,
    }
}

fn base(name: &str, model: ModelKind, duration_s: u64, flows: Vec<FlowSpec>) -> Scenario {
    Scenario {
        name: name.into(),
        model,
        duration: secs(duration_s),
        sample_interval: NANOS_PER_SEC,
        slices: campaign_slices(),
        flows,
        htb: None,
        ietf: None,
        lin: None,
        pe1_bank: bank(1538, 1538, 1538),
        p_bank: bank(1538, 1538, 1538),
        pe2_bank: None,
        links: links(),
        gnb_queue_cap: 16_384,
        record_raw_latency: false,
    }
}

fn exp_a_hctns() -> Scenario {
    let mut sc = base("exp_a_hctns", ModelKind::Hctns, 100, exp_a_flows());
    sc.htb = Some(htb_exp_a());
    sc
}

/// Quantum/priority bandwidth sharing variant: ToD and URLLC classes take
/// the excess first, video weighted five times telemetry; VC and BE are
/// left whatever remains.
fn exp_a_hctns_prio() -> Scenario {
    let mut sc = base("exp_a_hctns_prio", ModelKind::Hctns, 100, exp_a_flows());
    let mut htb = htb_exp_a();
    let set = |p: &mut NodeParams, prio: u8, quantum: u64| {
        p.priority = prio;
        p.quantum = ByteSize(quantum);
    };
    set(&mut htb.slices[0].params, 0, 18_456); // urllc
    set(&mut htb.slices[1].classes[0].params, 0, 15_380); // video
    set(&mut htb.slices[1].classes[1].params, 0, 3_076); // telemetry
    set(&mut htb.slices[2].classes[0].params, 7, 12_304); // vc
    set(&mut htb.slices[2].classes[1].params, 7, 6_152); // be
    sc.htb = Some(htb);
    sc
}

fn exp_a_ietf() -> Scenario {
    let mut sc = base("exp_a_ietf", ModelKind::Ietf, 100, exp_a_flows());
    sc.ietf = Some(ietf_campaign());
    sc
}

fn exp_a_lin() -> Scenario {
    let mut sc = base("exp_a_lin", ModelKind::Lin, 100, exp_a_flows());
    sc.lin = Some(lin_exp_a());
    sc.pe1_bank = lin_bank();
    sc.p_bank = lin_bank();
    sc
}

/// Experiment B: the four coarse-grained quantum configurations.
fn exp_b_quanta(conf: usize) -> (u64, u64, u64) {
    match conf {
        1 => (1_538, 1_538, 15_380),
        2 => (1_538, 15_380, 1_538),
        3 => (15_380, 1_538, 1_538),
        4 => (15_380, 10_766, 1_538),
        _ => unreachable!(),
    }
}

fn exp_b(conf: usize, model: ModelKind) -> Scenario {
    let tag = match model {
        ModelKind::Hctns => "hctns",
        ModelKind::Ietf => "ietf",
        ModelKind::Lin => unreachable!(),
    };
    let mut sc = base(
        &format!("exp_b_conf{conf}_{tag}"),
        model,
        100,
        exp_a_flows(),
    );
    let (qb, qc, qd) = exp_b_quanta(conf);
    sc.pe1_bank = bank(qb, qc, qd);
    sc.p_bank = bank(qb, qc, qd);
    match model {
        ModelKind::Hctns => sc.htb = Some(htb_exp_a()),
        ModelKind::Ietf => sc.ietf = Some(ietf_campaign()),
        ModelKind::Lin => unreachable!(),
    }
    sc
}

/// Experiment C traffic: low constant background per class plus 100 KB
/// bursts (URLLC every second until t=45, video every 2 s, telemetry and
/// VC every 5 s), and best effort saturating at 100 Mbps throughout.
fn exp_c_flows(pace: Option<Rate>) -> Vec<FlowSpec> {
    let burst = |period_s: u64, first_s: u64, until_s: u64| {
        Some(BurstSpec {
            size: ByteSize::kilobytes(100),
            period: secs(period_s),
            first_at: secs(first_s),
            until: Some(secs(until_s)),
            pace,
        })
    };
    let mut urllc = cbr("urllc", 100, 46, 0.4, 0, 60);
    urllc.burst = burst(1, 10, 45);
    let mut video = cbr("video", 200, 38, 16.0, 0, 60);
    video.burst = burst(2, 10, 60);
    let mut telemetry = cbr("telemetry", 200, 28, 2.0, 0, 60);
    telemetry.burst = burst(5, 10, 60);
    let mut vc = cbr("vc", 300, 28, 26.4, 0, 60);
    vc.burst = burst(5, 10, 60);
    let be = cbr("be", 300, 0, 100.0, 0, 60);
    vec![urllc, video, telemetry, vc, be]
}

/// HCTNS policer for Experiment C: burst control enabled at the leaves
/// (CBS = PBS = 50 KB), slices and global kept at one frame. Leaf queues
/// are disabled so whatever the buckets cannot cover at arrival is policed
/// away instead of trickling out at the committed rate.
fn htb_exp_c() -> HtbSpec {
    HtbSpec {
        global: node(100.0, 100.0, 1538, 0),
        slices: vec![
            SliceSpec {
                name: "urllc".into(),
                slice: crate::model::SliceId(0),
                params: node(1.2, 100.0, 50_000, 0),
                classes: vec![],
            },
            SliceSpec {
                name: "tod".into(),
                slice: crate::model::SliceId(1),
                params: node(36.0, 100.0, 1538, 0),
                classes: vec![
                    ClassSpec { name: "video".into(), class: crate::model::ClassId(0), params: node(32.0, 100.0, 50_000, 0) },
                    ClassSpec { name: "telemetry".into(), class: crate::model::ClassId(1), params: node(4.0, 100.0, 50_000, 0) },
                ],
            },
            SliceSpec {
                name: "embb".into(),
                slice: crate::model::SliceId(2),
                params: node(52.8, 100.0, 1538, 0),
                classes: vec![
                    ClassSpec { name: "vc".into(), class: crate::model::ClassId(0), params: node(52.8, 100.0, 50_000, 0) },
                    ClassSpec { name: "be".into(), class: crate::model::ClassId(1), params: node(0.0, 100.0, 1538, 0) },
                ],
            },
        ],
    }
}

fn exp_c_hctns(conf: usize) -> Scenario {
    let mut sc = base(
        &format!("exp_c_hctns_conf{conf}"),
        ModelKind::Hctns,
        60,
        exp_c_flows(None),
    );
    sc.htb = Some(htb_exp_c());
    let (qb, qc, qd) = match conf {
        1 => (1_538, 1_538, 1_538),
        2 => (15_380, 10_766, 1_538),
        _ => unreachable!(),
    };
    sc.pe1_bank = bank(qb, qc, qd);
    sc.p_bank = bank(qb, qc, qd);
    sc
}

/// trTCM-per-flow model under bursts: committed buckets sized for the
/// bursts (50 KB) so burst traffic rides green, peak buckets left at one
/// frame. Burst frames are paced at the peak rate so the committed-first
/// meter sees them the way the reference rate limiter would.
fn exp_c_lin() -> Scenario {
    let mut sc = base(
        "exp_c_lin",
        ModelKind::Lin,
        60,
        exp_c_flows(Some(Rate::mbps(100.0))),
    );
    let m = |flow: &str, cir: f64| LinFlowParams {
        flow: flow.into(),
        cir: Rate::mbps(cir),
        pir: Rate::mbps(100.0),
        cbs: ByteSize(50_000),
        pbs: ByteSize(1538),
    };
    sc.lin = Some(LinSpec {
        flows: vec![m("urllc", 1.2), m("video", 32.0), m("telemetry", 4.0), m("vc", 52.8)],
        marking: MarkingMode::CommittedFirst,
    });
    sc.pe1_bank = lin_bank();
    sc.p_bank = lin_bank();
    sc
}

pub const PRESET_NAMES: [&str; 15] = [
    "exp_a_hctns",
    "exp_a_ietf",
    "exp_a_lin",
    "exp_a_hctns_prio",
    "exp_b_conf1_hctns",
    "exp_b_conf1_ietf",
    "exp_b_conf2_hctns",
    "exp_b_conf2_ietf",
    "exp_b_conf3_hctns",
    "exp_b_conf3_ietf",
    "exp_b_conf4_hctns",
    "exp_b_conf4_ietf",
    "exp_c_hctns_conf1",
    "exp_c_hctns_conf2",
    "exp_c_lin",
];

pub fn preset(name: &str) -> Option<Scenario> {
    let sc = match name {
        "exp_a_hctns" => exp_a_hctns(),
        "exp_a_ietf" => exp_a_ietf(),
        "exp_a_lin" => exp_a_lin(),
        "exp_a_hctns_prio" => exp_a_hctns_prio(),
        "exp_b_conf1_hctns" => exp_b(1, ModelKind::Hctns),
        "exp_b_conf1_ietf" => exp_b(1, ModelKind::Ietf),
        "exp_b_conf2_hctns" => exp_b(2, ModelKind::Hctns),
        "exp_b_conf2_ietf" => exp_b(2, ModelKind::Ietf),
        "exp_b_conf3_hctns" => exp_b(3, ModelKind::Hctns),
        "exp_b_conf3_ietf" => exp_b(3, ModelKind::Ietf),
        "exp_b_conf4_hctns" => exp_b(4, ModelKind::Hctns),
        "exp_b_conf4_ietf" => exp_b(4, ModelKind::Ietf),
        "exp_c_hctns_conf1" => exp_c_hctns(1),
        "exp_c_hctns_conf2" => exp_c_hctns(2),
        "exp_c_lin" => exp_c_lin(),
        _ => return None,
    };
    Some(sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            let sc = preset(name).unwrap();
            assert_eq!(sc.name, name);
            sc.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_preset_is_none() {
        assert!(preset("exp_z").is_none());
    }

    #[test]
    fn exp_a_hctns_encodes_the_parameter_table() {
        let sc = preset("exp_a_hctns").unwrap();
        let htb = sc.htb.unwrap();
        assert_eq!(htb.global.cir, Rate::mbps(100.0));
        let tod = &htb.slices[1];
        assert_eq!(tod.params.cir, Rate::mbps(36.0));
        assert_eq!(tod.params.pir, Rate::mbps(100.0));
        assert_eq!(tod.classes[0].params.cir, Rate::mbps(32.0));
        assert_eq!(tod.classes[1].params.cir, Rate::mbps(4.0));
        assert_eq!(htb.slices[2].params.cir, Rate::mbps(52.8));
        assert_eq!(htb.slices[0].params.cir, Rate::mbps(1.2));
    }
}
