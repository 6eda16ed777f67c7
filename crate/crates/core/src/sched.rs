//! Coarse-grained egress scheduling: a strict-priority queue bank combined
//! with deficit-round-robin queues keyed by TN QoS class, plus the
//! hierarchical two-level DRR used at the egress PE.

use serde::{Deserialize, Serialize};

use std::collections::VecDeque;

use crate::model::{ByteSize, ClassId, Packet, SliceId, TnQosClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Enqueued,
    Dropped,
}

#[derive(Debug)]
pub struct BoundedFifo {
    q: VecDeque<Packet>,
    cap: usize,
    pub drops: u64,
}

impl BoundedFifo {
    fn new(cap: usize) -> Self {
        BoundedFifo { q: VecDeque::new(), cap, drops: 0 }
    }

    fn push(&mut self, pkt: Packet) -> Enqueued {
        if self.q.len() >= self.cap {
            self.drops += 1;
            Enqueued::Dropped
        } else {
            self.q.push_back(pkt);
            Enqueued::Enqueued
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

#[derive(Debug)]
struct DrrQueue {
    class: TnQosClass,
    quantum: i64,
    deficit: i64,
    fifo: BoundedFifo,
}

/// Where a TN QoS class is queued within a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueTarget {
    /// Index into the ordered priority queues, highest first.
    Priority(usize),
    Drr,
}

/// Configuration of one output-port bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSpec {
    /// TN classes served from strict-priority queues, highest first.
    pub priority_classes: Vec<TnQosClass>,
    /// TN classes served from DRR queues, with their quanta, in rotation
    /// order.
    pub drr_classes: Vec<(TnQosClass, ByteSize)>,
    #[serde(default = "default_cap")]
    pub queue_cap: usize,
}

fn default_cap() -> usize {
    1000
}

/// Strict-priority queues plus a DRR bank. A DRR packet is dequeued only
/// when every priority queue is empty.
#[derive(Debug)]
pub struct QueueBank {
    prio_classes: Vec<TnQosClass>,
    prio: Vec<BoundedFifo>,
    drr: Vec<DrrQueue>,
    cursor: usize,
    fresh: bool,
}

impl QueueBank {
    pub fn new(spec: &BankSpec) -> Self {
        QueueBank {
            prio_classes: spec.priority_classes.clone(),
            prio: spec.priority_classes.iter().map(|_| BoundedFifo::new(spec.queue_cap)).collect(),
            drr: spec
                .drr_classes
                .iter()
                .map(|(c, q)| DrrQueue {
                    class: *c,
                    quantum: (q.0 as i64).max(1),
                    deficit: 0,
                    fifo: BoundedFifo::new(spec.queue_cap),
                })
                .collect(),
            cursor: 0,
            fresh: true,
        }
    }

    /// Appends the packet to the queue its TN class selects; drop-tail when
    /// the queue is full.
    pub fn enqueue(&mut self, pkt: Packet) -> Enqueued {
        let class = pkt.tn_class.expect("tn_class assigned before coarse-grained enqueue");
        if let Some(i) = self.prio_classes.iter().position(|c| *c == class) {
            return self.prio[i].push(pkt);
        }
        match self.drr.iter_mut().find(|d| d.class == class) {
            Some(d) => d.fifo.push(pkt),
            None => {
                // misconfigured scenario; count rather than lose silently
                if let Some(d) = self.drr.first_mut() {
                    d.fifo.push(pkt)
                } else {
                    self.prio.last_mut().expect("bank has at least one queue").push(pkt)
                }
            }
        }
    }

    /// Returns the next packet the port should transmit: the head of the
    /// highest non-empty priority queue, otherwise one packet from the DRR
    /// rotation. DRR state persists across calls: a queue's deficit grows
    /// by its quantum once per visit, it dequeues while the deficit covers
    /// the head, and an emptied queue leaves the rotation with deficit 0.
    pub fn dequeue(&mut self) -> Option<Packet> {
        for q in &mut self.prio {
            if let Some(p) = q.q.pop_front() {
                return Some(p);
            }
        }
        if self.drr.iter().all(|d| d.fifo.is_empty()) {
            return None;
        }
        loop {
            let n = self.drr.len();
            let d = &mut self.drr[self.cursor];
            if d.fifo.is_empty() {
                d.deficit = 0;
                self.cursor = (self.cursor + 1) % n;
                self.fresh = true;
                continue;
            }
            if self.fresh {
                d.deficit += d.quantum;
                self.fresh = false;
            }
            let head = d.fifo.q.front().expect("non-empty").size.0 as i64;
            if d.deficit >= head {
                let p = d.fifo.q.pop_front().expect("non-empty");
                d.deficit -= head;
                if d.fifo.is_empty() {
                    d.deficit = 0;
                    self.cursor = (self.cursor + 1) % n;
                    self.fresh = true;
                }
                return Some(p);
            }
            self.cursor = (self.cursor + 1) % n;
            self.fresh = true;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.prio.iter().all(|q| q.is_empty()) && self.drr.iter().all(|d| d.fifo.is_empty())
    }

    pub fn total_len(&self) -> usize {
        self.prio.iter().map(|q| q.len()).sum::<usize>()
            + self.drr.iter().map(|d| d.fifo.len()).sum::<usize>()
    }

    /// (`TN class`, occupancy, cumulative drops) per queue, priority
    /// queues first.
    pub fn queue_stats(&self) -> Vec<(TnQosClass, usize, u64)> {
        let mut out = Vec::new();
        for (c, q) in self.prio_classes.iter().zip(&self.prio) {
            out.push((*c, q.len(), q.drops));
        }
        for d in &self.drr {
            out.push((d.class, d.fifo.len(), d.fifo.drops));
        }
        out
    }
}

#[derive(Debug)]
struct HierClass {
    class: ClassId,
    quantum: i64,
    deficit: i64,
    fifo: BoundedFifo,
}

#[derive(Debug)]
struct HierSlice {
    slice: SliceId,
    quantum: i64,
    deficit: i64,
    classes: Vec<HierClass>,
    cursor: usize,
    fresh: bool,
}

impl HierSlice {
    fn len(&self) -> usize {
        self.classes.iter().map(|c| c.fifo.len()).sum()
    }

    /// Inner DRR bounded by the slice's remaining budget. Returns the
    /// dequeued packet, or None when the budget cannot cover any head the
    /// inner rotation would serve next.
    fn dequeue_within(&mut self, budget: i64) -> Option<Packet> {
        if self.len() == 0 {
            return None;
        }
        let n = self.classes.len();
        let mut rotations = 0usize;
        loop {
            let c = &mut self.classes[self.cursor];
            if c.fifo.is_empty() {
                c.deficit = 0;
                self.cursor = (self.cursor + 1) % n;
                self.fresh = true;
                rotations += 1;
                if rotations > n * 1600 {
                    return None;
                }
                continue;
            }
            if self.fresh {
                c.deficit += c.quantum;
                self.fresh = false;
            }
            let head = c.fifo.q.front().expect("non-empty").size.0 as i64;
            if c.deficit >= head {
                if budget < head {
                    return None;
                }
                let p = c.fifo.q.pop_front().expect("non-empty");
                c.deficit -= head;
                if c.fifo.is_empty() {
                    c.deficit = 0;
                    self.cursor = (self.cursor + 1) % n;
                    self.fresh = true;
                }
                return Some(p);
            }
            self.cursor = (self.cursor + 1) % n;
            self.fresh = true;
            rotations += 1;
            if rotations > n * 1600 {
                return None;
            }
        }
    }
}

/// Slice/class spec for the hierarchical egress bank: (slice, slice
/// quantum, classes with their quanta).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierBankSpec {
    pub slices: Vec<(SliceId, ByteSize, Vec<(ClassId, ByteSize)>)>,
    #[serde(default = "default_cap")]
    pub queue_cap: usize,
}

/// Hierarchical two-level DRR: the outer level differentiates slices, the
/// inner level the classes within the selected slice's quantum budget.
#[derive(Debug)]
pub struct HierDrrBank {
    slices: Vec<HierSlice>,
    cursor: usize,
    fresh: bool,
}

impl HierDrrBank {
    pub fn new(spec: &HierBankSpec) -> Self {
        HierDrrBank {
            slices: spec
                .slices
                .iter()
                .map(|(s, q, classes)| HierSlice {
                    slice: *s,
                    quantum: (q.0 as i64).max(1),
                    deficit: 0,
                    classes: classes
                        .iter()
                        .map(|(c, cq)| HierClass {
                            class: *c,
                            quantum: (cq.0 as i64).max(1),
                            deficit: 0,
                            fifo: BoundedFifo::new(spec.queue_cap),
                        })
                        .collect(),
                    cursor: 0,
                    fresh: true,
                })
                .collect(),
            cursor: 0,
            fresh: true,
        }
    }

    pub fn enqueue(&mut self, slice: SliceId, class: ClassId, pkt: Packet) -> Enqueued {
        for s in &mut self.slices {
            if s.slice == slice {
                if let Some(c) = s.classes.iter_mut().find(|c| c.class == class) {
                    return c.fifo.push(pkt);
                }
                if let Some(c) = s.classes.first_mut() {
                    return c.fifo.push(pkt);
                }
            }
        }
        Enqueued::Dropped
    }

    pub fn dequeue(&mut self) -> Option<Packet> {
        if self.slices.iter().all(|s| s.len() == 0) {
            return None;
        }
        let n = self.slices.len();
        loop {
            let s = &mut self.slices[self.cursor];
            if s.len() == 0 {
                s.deficit = 0;
                self.cursor = (self.cursor + 1) % n;
                self.fresh = true;
                continue;
            }
            if self.fresh {
                s.deficit += s.quantum;
                self.fresh = false;
            }
            let budget = s.deficit;
            match s.dequeue_within(budget) {
                Some(p) => {
                    s.deficit -= p.size.0 as i64;
                    if s.len() == 0 {
                        s.deficit = 0;
                        self.cursor = (self.cursor + 1) % n;
                        self.fresh = true;
                    }
                    return Some(p);
                }
                None => {
                    self.cursor = (self.cursor + 1) % n;
                    self.fresh = true;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slices.iter().all(|s| s.len() == 0)
    }

    pub fn total_len(&self) -> usize {
        self.slices.iter().map(|s| s.len()).sum()
    }

    pub fn queue_stats(&self) -> Vec<(SliceId, ClassId, usize, u64)> {
        let mut out = Vec::new();
        for s in &self.slices {
            for c in &s.classes {
                out.push((s.slice, c.class, c.fifo.len(), c.fifo.drops));
            }
        }
        out
    }
}
