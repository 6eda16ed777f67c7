//! Shared domain vocabulary: packets, identities, rates, marks, and the
//! classification tables binding 5G-side identifiers to TN-side treatment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since simulation start.
pub type Nanos = u64;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Bits per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rate(pub u64);

impl Rate {
    pub const fn bps(v: u64) -> Self {
        Rate(v)
    }

    pub fn mbps(v: f64) -> Self {
        Rate((v * 1e6).round() as u64)
    }

    /// Time to move `bytes` at this rate, rounded up to whole nanoseconds.
    pub fn transmit_time(&self, bytes: u64) -> Nanos {
        assert!(self.0 > 0, "transmit over zero-rate link");
        let bits = bytes as u128 * 8 * NANOS_PER_SEC as u128;
        bits.div_ceil(self.0 as u128) as Nanos
    }
}

/// Byte count (frame sizes, burst sizes, bucket capacities).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const fn bytes(v: u64) -> Self {
        ByteSize(v)
    }

    pub const fn kilobytes(v: u64) -> Self {
        ByteSize(v * 1000)
    }
}

/// Transport-network QoS class. Four values are reserved for data-plane
/// traffic; class A is served from the strict-priority queue.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum TnQosClass {
    A,
    B,
    C,
    D,
}

impl TnQosClass {
    pub const ALL: [TnQosClass; 4] = [TnQosClass::A, TnQosClass::B, TnQosClass::C, TnQosClass::D];

    pub fn as_str(&self) -> &'static str {
        match self {
            TnQosClass::A => "A",
            TnQosClass::B => "B",
            TnQosClass::C => "C",
            TnQosClass::D => "D",
        }
    }
}

/// Policer color marks. Red is dropped at marking and never enqueued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Green,
    Yellow,
    Red,
}

/// Index of a slice within the scenario's slice table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceId(pub u16);

/// Index of a traffic class, scoped to one slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

/// Index of a traffic flow within the scenario's flow table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u16);

pub type VlanId = u16;
pub type DscpValue = u8;

/// The unit flowing through the pipeline.
#[derive(Debug, Clone)]
pub struct Packet {
    pub id: u64,
    pub flow: FlowId,
    /// Full on-wire frame size, link and physical overhead included.
    pub size: ByteSize,
    pub vlan: VlanId,
    pub dscp: DscpValue,
    /// TN QoS class, written at ingress before any coarse-grained enqueue.
    pub tn_class: Option<TnQosClass>,
    pub color: Option<Color>,
    pub created_at: Nanos,
    pub delivered_at: Option<Nanos>,
}

/// One row of the 5QI / DSCP / TN-class mapping table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QosMapEntry {
    pub slice: SliceId,
    pub class: ClassId,
    pub five_qi: u16,
    pub dscp_in: DscpValue,
    pub tn_class: TnQosClass,
}

/// Classification tables for one scenario: VLAN to slice, then DSCP to a
/// class within the slice (with an optional per-slice default class).
#[derive(Debug, Clone, Default)]
pub struct MappingTable {
    pub entries: Vec<QosMapEntry>,
    /// (vlan, slice) pairs; a VLAN identifies exactly one slice.
    pub vlans: Vec<(VlanId, SliceId)>,
    /// Per-slice fallback class for DSCP values not in the table.
    pub default_class: Vec<(SliceId, ClassId)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("no slice is bound to VLAN {0}")]
    UnknownVlan(VlanId),
    #[error("slice {0:?} has no class for DSCP {1} and declares no default")]
    UnknownDscpNoDefault(SliceId, DscpValue),
    #[error("no TN QoS class mapped for ({0:?}, {1:?})")]
    UnknownPair(SliceId, ClassId),
}

impl MappingTable {
    /// Looks up the (slice, class) pair for a packet's VLAN tag and DSCP
    /// field. Pure: does not mutate the packet.
    pub fn classify(&self, pkt: &Packet) -> Result<(SliceId, ClassId), ClassifyError> {
        let slice = self
            .vlans
            .iter()
            .find(|(v, _)| *v == pkt.vlan)
            .map(|(_, s)| *s)
            .ok_or(ClassifyError::UnknownVlan(pkt.vlan))?;
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.slice == slice && e.dscp_in == pkt.dscp)
        {
            return Ok((slice, e.class));
        }
        self.default_class
            .iter()
            .find(|(s, _)| *s == slice)
            .map(|(_, c)| (slice, *c))
            .ok_or(ClassifyError::UnknownDscpNoDefault(slice, pkt.dscp))
    }

    /// TN QoS class for a classified (slice, class) pair.
    pub fn map_to_tn_class(
        &self,
        slice: SliceId,
        class: ClassId,
    ) -> Result<TnQosClass, ClassifyError> {
        self.entries
            .iter()
            .find(|e| e.slice == slice && e.class == class)
            .map(|e| e.tn_class)
            .ok_or(ClassifyError::UnknownPair(slice, class))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(vlan: VlanId, dscp: DscpValue) -> Packet {
        Packet {
            id: 0,
            flow: FlowId(0),
            size: ByteSize(1538),
            vlan,
            dscp,
            tn_class: None,
            color: None,
            created_at: 0,
            delivered_at: None,
        }
    }

    /// The campaign's mapping table: URLLC / ToD(video, telemetry) /
    /// eMBB(VC, BE), with BE as the eMBB default class.
    fn campaign_table() -> MappingTable {
        let urllc = SliceId(0);
        let tod = SliceId(1);
        let embb = SliceId(2);
        MappingTable {
            entries: vec![
                QosMapEntry { slice: urllc, class: ClassId(0), five_qi: 82, dscp_in: 46, tn_class: TnQosClass::A },
                QosMapEntry { slice: tod, class: ClassId(0), five_qi: 130, dscp_in: 38, tn_class: TnQosClass::B },
                QosMapEntry { slice: tod, class: ClassId(1), five_qi: 131, dscp_in: 28, tn_class: TnQosClass::C },
                QosMapEntry { slice: embb, class: ClassId(0), five_qi: 2, dscp_in: 28, tn_class: TnQosClass::C },
                QosMapEntry { slice: embb, class: ClassId(1), five_qi: 9, dscp_in: 0, tn_class: TnQosClass::D },
            ],
            vlans: vec![(100, urllc), (200, tod), (300, embb)],
            default_class: vec![(embb, ClassId(1))],
        }
    }

    #[test]
    fn classify_campaign_rows() {
        let t = campaign_table();
        // ToD video row: DSCP 38
        assert_eq!(t.classify(&pkt(200, 38)).unwrap(), (SliceId(1), ClassId(0)));
        // URLLC row: DSCP 46
        assert_eq!(t.classify(&pkt(100, 46)).unwrap(), (SliceId(0), ClassId(0)));
        // eMBB BE row: DSCP 0
        assert_eq!(t.classify(&pkt(300, 0)).unwrap(), (SliceId(2), ClassId(1)));
    }

    #[test]
    fn classify_is_pure_and_repeatable() {
        let t = campaign_table();
        let p = pkt(200, 28);
        let a = t.classify(&p).unwrap();
        let b = t.classify(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.tn_class, None);
    }

    #[test]
    fn classify_errors() {
        let t = campaign_table();
        assert_eq!(t.classify(&pkt(999, 0)), Err(ClassifyError::UnknownVlan(999)));
        // ToD declares no default class
        assert_eq!(
            t.classify(&pkt(200, 63)),
            Err(ClassifyError::UnknownDscpNoDefault(SliceId(1), 63))
        );
        // unknown DSCP in eMBB falls back to BE
        assert_eq!(t.classify(&pkt(300, 63)).unwrap(), (SliceId(2), ClassId(1)));
    }

    #[test]
    fn tn_class_mapping() {
        let t = campaign_table();
        // telemetry and VC share TN class C; the mapping is not injective
        assert_eq!(t.map_to_tn_class(SliceId(1), ClassId(1)).unwrap(), TnQosClass::C);
        assert_eq!(t.map_to_tn_class(SliceId(2), ClassId(0)).unwrap(), TnQosClass::C);
        assert_eq!(t.map_to_tn_class(SliceId(0), ClassId(0)).unwrap(), TnQosClass::A);
        assert!(t.map_to_tn_class(SliceId(0), ClassId(9)).is_err());
    }

    #[test]
    fn every_entry_has_one_tn_class() {
        let t = campaign_table();
        for e in &t.entries {
            assert_eq!(t.map_to_tn_class(e.slice, e.class).unwrap(), e.tn_class);
        }
    }

    #[test]
    fn transmit_times() {
        // 1538 B at 100 Mbps is 123.04 us on the wire
        assert_eq!(Rate::mbps(100.0).transmit_time(1538), 123_040);
        assert_eq!(Rate::mbps(1000.0).transmit_time(1538), 12_304);
    }
}
