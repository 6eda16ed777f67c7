//! Comparison ingress models: the 5QI-aware policer (per-slice two-rate
//! three-color marking with yellow de-prioritization and per-class
//! single-rate two-color policing) and the single-level trTCM-per-flow
//! model feeding a two-queue strict-priority bank.

use serde::{Deserialize, Serialize};

use crate::model::{ByteSize, Color, Nanos, Rate, TnQosClass};

const BITS_NS_PER_SEC: u128 = 8_000_000_000;

fn accrue(tokens: u64, cap: u64, rate: Rate, carry: &mut u64, last: &mut Nanos, now: Nanos) -> u64 {
    debug_assert!(now >= *last);
    let dt = now - *last;
    *last = now;
    if dt == 0 {
        return tokens;
    }
    let num = rate.0 as u128 * dt as u128 + *carry as u128;
    let add = (num / BITS_NS_PER_SEC) as u64;
    *carry = (num % BITS_NS_PER_SEC) as u64;
    let t = tokens.saturating_add(add);
    if t >= cap {
        *carry = 0;
        cap
    } else {
        t
    }
}

/// Which bucket the marker consults first.
///
/// `PeakFirst` is the classic two-rate three-color discipline: a packet the
/// peak bucket cannot cover is red no matter how many committed tokens
/// remain. `CommittedFirst` lets committed tokens win outright and leaves
/// the peak bucket to meter only the excess, which is how a rate-limiter
/// built from a committed/ceil pair behaves; burst-tolerant comparison
/// scenarios use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MarkingMode {
    #[default]
    PeakFirst,
    CommittedFirst,
}

/// Two-rate three-color marker state.
#[derive(Debug, Clone)]
pub struct TrTcmState {
    pub cir: Rate,
    pub pir: Rate,
    pub cbs: ByteSize,
    pub pbs: ByteSize,
    pub tc: u64,
    pub tp: u64,
    pub last_update: Nanos,
    pub mode: MarkingMode,
    carry_c: u64,
    carry_p: u64,
}

impl TrTcmState {
    pub fn new(cir: Rate, pir: Rate, cbs: ByteSize, pbs: ByteSize) -> Self {
        TrTcmState {
            cir,
            pir,
            cbs,
            pbs,
            tc: cbs.0,
            tp: pbs.0,
            last_update: 0,
            mode: MarkingMode::PeakFirst,
            carry_c: 0,
            carry_p: 0,
        }
    }

    pub fn with_mode(mut self, mode: MarkingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn refill(&mut self, now: Nanos) {
        let mut last = self.last_update;
        self.tc = accrue(self.tc, self.cbs.0, self.cir, &mut self.carry_c, &mut last, now);
        let mut last = self.last_update;
        self.tp = accrue(self.tp, self.pbs.0, self.pir, &mut self.carry_p, &mut last, now);
        self.last_update = now;
    }

    /// Color-blind marking of one packet of `size` bytes arriving at `now`.
    pub fn mark(&mut self, size: ByteSize, now: Nanos) -> Color {
        self.refill(now);
        let s = size.0;
        match self.mode {
            MarkingMode::PeakFirst => {
                if self.tp < s {
                    Color::Red
                } else if self.tc >= s {
                    self.tc -= s;
                    self.tp -= s;
                    Color::Green
                } else {
                    self.tp -= s;
                    Color::Yellow
                }
            }
            MarkingMode::CommittedFirst => {
                if self.tc >= s {
                    self.tc -= s;
                    Color::Green
                } else if self.tp >= s {
                    self.tp -= s;
                    Color::Yellow
                } else {
                    Color::Red
                }
            }
        }
    }

    /// Consumes `size` from both buckets without a marking decision,
    /// saturating at zero. Used when committed traffic that was already
    /// admitted elsewhere must still count against this meter.
    pub fn precharge(&mut self, size: ByteSize, now: Nanos) {
        self.refill(now);
        self.tc = self.tc.saturating_sub(size.0);
        self.tp = self.tp.saturating_sub(size.0);
    }
}

/// Two-rate three-color marking with the classic peak-first discipline.
pub fn trtcm_mark(state: &mut TrTcmState, size: ByteSize, now: Nanos) -> Color {
    debug_assert_eq!(state.mode, MarkingMode::PeakFirst);
    state.mark(size, now)
}

/// Single-rate two-color policer state: only a committed rate is defined
/// and all traffic exceeding it is dropped.
#[derive(Debug, Clone)]
pub struct TwoColorState {
    pub cir: Rate,
    pub cbs: ByteSize,
    pub tokens: u64,
    pub last_update: Nanos,
    carry: u64,
}

impl TwoColorState {
    pub fn new(cir: Rate, cbs: ByteSize) -> Self {
        TwoColorState { cir, cbs, tokens: cbs.0, last_update: 0, carry: 0 }
    }

    /// True iff the packet conforms to the committed rate; conforming
    /// packets consume tokens.
    pub fn conforms(&mut self, size: ByteSize, now: Nanos) -> bool {
        let mut last = self.last_update;
        self.tokens = accrue(self.tokens, self.cbs.0, self.cir, &mut self.carry, &mut last, now);
        self.last_update = last;
        if self.tokens >= size.0 {
            self.tokens -= size.0;
            true
        } else {
            false
        }
    }
}

/// Verdict of the 5QI-aware ingress for one packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IetfDisposition {
    Pass(TnQosClass, Color),
    /// Yellow slice traffic is remapped into the best-effort TN class.
    Deprioritized(TnQosClass, Color),
    Drop,
}

/// 5QI-aware ingress: the class policer gates guaranteed-rate classes
/// first (excess is dropped and conforming traffic counts against the
/// slice meter), then the slice policer three-colors whatever has no class
/// policer, de-prioritizing yellow into TN class D and dropping red.
pub fn ietf_ingress(
    slice_state: &mut TrTcmState,
    class_state: Option<&mut TwoColorState>,
    tn_class: TnQosClass,
    size: ByteSize,
    now: Nanos,
) -> IetfDisposition {
    match class_state {
        Some(cs) => {
            if cs.conforms(size, now) {
                slice_state.precharge(size, now);
                IetfDisposition::Pass(tn_class, Color::Green)
            } else {
                IetfDisposition::Drop
            }
        }
        None => match slice_state.mark(size, now) {
            Color::Green => IetfDisposition::Pass(tn_class, Color::Green),
            Color::Yellow => IetfDisposition::Deprioritized(TnQosClass::D, Color::Yellow),
            Color::Red => IetfDisposition::Drop,
        },
    }
}

/// Verdict of the trTCM-per-flow comparison model for one packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinDisposition {
    HighQueue,
    LowQueue,
    Drop,
}

/// Single-level ingress: each flow is its own slice with a trTCM; green
/// goes to the high-priority queue, yellow to the low one, red is dropped.
/// Best-effort flows have no meter and always take the low queue.
pub fn lin_ingress(
    state: Option<&mut TrTcmState>,
    size: ByteSize,
    now: Nanos,
) -> (LinDisposition, Color) {
    match state {
        None => (LinDisposition::LowQueue, Color::Yellow),
        Some(s) => match s.mark(size, now) {
            Color::Green => (LinDisposition::HighQueue, Color::Green),
            Color::Yellow => (LinDisposition::LowQueue, Color::Yellow),
            Color::Red => (LinDisposition::Drop, Color::Red),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trtcm() -> TrTcmState {
        TrTcmState::new(Rate::mbps(32.0), Rate::mbps(100.0), ByteSize(50_000), ByteSize(50_000))
    }

    #[test]
    fn mark_green_when_both_buckets_cover() {
        let mut s = trtcm();
        assert_eq!(trtcm_mark(&mut s, ByteSize(1538), 0), Color::Green);
        assert_eq!(s.tc, 50_000 - 1538);
        assert_eq!(s.tp, 50_000 - 1538);
    }

    #[test]
    fn mark_yellow_between_cir_and_pir() {
        let mut s = trtcm();
        s.tc = 0;
        assert_eq!(trtcm_mark(&mut s, ByteSize(1538), 0), Color::Yellow);
        assert_eq!(s.tp, 50_000 - 1538);
        assert_eq!(s.tc, 0);
    }

    #[test]
    fn mark_red_above_pir() {
        let mut s = trtcm();
        s.tp = 1000;
        assert_eq!(trtcm_mark(&mut s, ByteSize(1538), 0), Color::Red);
    }

    #[test]
    fn marking_is_monotone_in_offered_load() {
        // consuming more tokens beforehand never upgrades the next verdict
        let rank = |c: Color| match c {
            Color::Green => 0,
            Color::Yellow => 1,
            Color::Red => 2,
        };
        for tc in [0u64, 1000, 1538, 20_000, 50_000] {
            for tp in [0u64, 1000, 1538, 20_000, 50_000] {
                let mut a = trtcm();
                a.tc = tc;
                a.tp = tp;
                let va = a.mark(ByteSize(1538), 0);
                let mut b = trtcm();
                b.tc = tc.saturating_sub(1538);
                b.tp = tp.saturating_sub(1538);
                let vb = b.mark(ByteSize(1538), 0);
                assert!(rank(vb) >= rank(va), "tc={tc} tp={tp}");
            }
        }
    }

    #[test]
    fn committed_first_lets_green_ride_a_small_peak_bucket() {
        let mut s = TrTcmState::new(
            Rate::mbps(32.0),
            Rate::mbps(100.0),
            ByteSize(50_000),
            ByteSize(1538),
        )
        .with_mode(MarkingMode::CommittedFirst);
        // a back-to-back burst stays green until the committed bucket runs
        // out, then turns yellow at the pace of the peak bucket
        let mut greens = 0;
        for i in 0..40 {
            let c = s.mark(ByteSize(1538), i * 10);
            if c == Color::Green {
                greens += 1;
            }
        }
        assert_eq!(greens, 32); // 50_000 / 1538
    }

    #[test]
    fn ietf_class_conforming_passes_green() {
        // video limited to 32 Mbps inside a 36 Mbps slice
        let mut slice = TrTcmState::new(Rate::mbps(36.0), Rate::mbps(36.0), ByteSize(1538), ByteSize(1538));
        let mut class = TwoColorState::new(Rate::mbps(32.0), ByteSize(1538));
        assert_eq!(
            ietf_ingress(&mut slice, Some(&mut class), TnQosClass::B, ByteSize(1538), 0),
            IetfDisposition::Pass(TnQosClass::B, Color::Green)
        );
    }

    #[test]
    fn ietf_class_excess_drops() {
        // telemetry offered far above its 4 Mbps class CIR: only the
        // conforming share passes
        let mut slice = TrTcmState::new(Rate::mbps(36.0), Rate::mbps(36.0), ByteSize(1538), ByteSize(1538));
        let mut class = TwoColorState::new(Rate::mbps(4.0), ByteSize(1538));
        let mut passed = 0u64;
        let mut t = 0;
        for _ in 0..8127 {
            // 100 Mbps arrival pace for one second
            if ietf_ingress(&mut slice, Some(&mut class), TnQosClass::C, ByteSize(1538), t)
                != IetfDisposition::Drop
            {
                passed += 1538 * 8;
            }
            t += 123_040;
        }
        let mbps = passed as f64 / 1e6;
        assert!((mbps - 4.0).abs() < 0.1, "passed {mbps} Mbps");
    }

    #[test]
    fn ietf_classless_yellow_is_deprioritized() {
        // URLLC above its 1.2 Mbps slice CIR but under the 100 Mbps PIR
        let mut slice = TrTcmState::new(Rate::mbps(1.2), Rate::mbps(100.0), ByteSize(1538), ByteSize(1538));
        slice.tc = 0;
        assert_eq!(
            ietf_ingress(&mut slice, None, TnQosClass::A, ByteSize(1538), 0),
            IetfDisposition::Deprioritized(TnQosClass::D, Color::Yellow)
        );
    }

    #[test]
    fn lin_dispositions() {
        let mut s = TrTcmState::new(Rate::mbps(1.2), Rate::mbps(100.0), ByteSize(1538), ByteSize(1538));
        // at or under the CIR: green, high queue
        assert_eq!(lin_ingress(Some(&mut s), ByteSize(1538), 0).0, LinDisposition::HighQueue);
        // between CIR and PIR: yellow, low queue
        s.tc = 0;
        s.tp = 1538;
        assert_eq!(lin_ingress(Some(&mut s), ByteSize(1538), 1).0, LinDisposition::LowQueue);
        // best effort is low queue at any rate
        assert_eq!(lin_ingress(None, ByteSize(1538), 2).0, LinDisposition::LowQueue);
    }
}
