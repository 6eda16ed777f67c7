//! Collection and export of the four observables: per-flow throughput,
//! per-flow latency (per-window maximum and mean), cumulative per-queue
//! packet loss, and per-queue occupancy samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::model::{Nanos, NANOS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default)]
struct LatencyWindow {
    max_ns: u64,
    sum_ns: u128,
    count: u64,
}

/// Per-second (by default) time series produced by one run.
#[derive(Debug)]
pub struct MetricsStore {
    pub window_ns: Nanos,
    pub n_windows: usize,
    throughput_bytes: BTreeMap<String, Vec<u64>>,
    latency: BTreeMap<String, Vec<LatencyWindow>>,
    /// Cumulative drop counter sampled at each window start.
    loss: BTreeMap<String, Vec<u64>>,
    /// Queue occupancy in packets sampled at each window start.
    occupancy: BTreeMap<String, Vec<u64>>,
    raw_latency: Option<Vec<(String, Nanos, Nanos)>>,
    pub delivered_bytes_total: u64,
}

impl MetricsStore {
    pub fn new(duration: Nanos, window_ns: Nanos, record_raw: bool) -> Self {
        let n_windows = (duration.div_ceil(window_ns)) as usize;
        MetricsStore {
            window_ns,
            n_windows,
            throughput_bytes: BTreeMap::new(),
            latency: BTreeMap::new(),
            loss: BTreeMap::new(),
            occupancy: BTreeMap::new(),
            raw_latency: record_raw.then(Vec::new),
            delivered_bytes_total: 0,
        }
    }

    fn window_of(&self, t: Nanos) -> Option<usize> {
        let w = (t / self.window_ns) as usize;
        (w < self.n_windows).then_some(w)
    }

    /// Registers a delivered packet: its bytes count toward the flow's
    /// current throughput window and its sojourn time toward the latency
    /// series.
    pub fn record_delivery(&mut self, key: &str, size_bytes: u64, created_at: Nanos, now: Nanos) {
        debug_assert!(now >= created_at);
        let Some(w) = self.window_of(now) else { return };
        let tp = self
            .throughput_bytes
            .entry(key.to_string())
            .or_insert_with(|| vec![0; self.n_windows]);
        tp[w] += size_bytes;
        let lat = now - created_at;
        let l = self
            .latency
            .entry(key.to_string())
            .or_insert_with(|| vec![LatencyWindow::default(); self.n_windows]);
        l[w].max_ns = l[w].max_ns.max(lat);
        l[w].sum_ns += lat as u128;
        l[w].count += 1;
        if let Some(raw) = &mut self.raw_latency {
            raw.push((key.to_string(), now, lat));
        }
    }

    /// Counts delivered bytes toward the sink total without touching the
    /// per-flow series (used for flow-aggregate keys).
    pub fn add_sink_bytes(&mut self, size_bytes: u64) {
        self.delivered_bytes_total += size_bytes;
    }

    /// Records a queue sample taken at a window boundary: instantaneous
    /// occupancy and the cumulative drop counter.
    pub fn record_queue_sample(&mut self, queue: &str, t: Nanos, occupancy: u64, cum_drops: u64) {
        let Some(w) = self.window_of(t) else { return };
        let occ = self
            .occupancy
            .entry(queue.to_string())
            .or_insert_with(|| vec![0; self.n_windows]);
        occ[w] = occupancy;
        let loss = self
            .loss
            .entry(queue.to_string())
            .or_insert_with(|| vec![0; self.n_windows]);
        loss[w] = cum_drops;
    }

    fn window_secs(&self) -> f64 {
        self.window_ns as f64 / NANOS_PER_SEC as f64
    }

    /// Throughput of `key` in Mbps per window.
    pub fn throughput_mbps(&self, key: &str) -> Option<Vec<f64>> {
        self.throughput_bytes
            .get(key)
            .map(|v| v.iter().map(|b| *b as f64 * 8.0 / 1e6 / self.window_secs()).collect())
    }

    /// Per-window maximum latency of `key` in milliseconds (0 when no
    /// packet was delivered in the window).
    pub fn latency_max_ms(&self, key: &str) -> Option<Vec<f64>> {
        self.latency
            .get(key)
            .map(|v| v.iter().map(|w| w.max_ns as f64 / 1e6).collect())
    }

    pub fn latency_mean_ms(&self, key: &str) -> Option<Vec<f64>> {
        self.latency.get(key).map(|v| {
            v.iter()
                .map(|w| {
                    if w.count == 0 {
                        0.0
                    } else {
                        w.sum_ns as f64 / w.count as f64 / 1e6
                    }
                })
                .collect()
        })
    }

    pub fn loss_series(&self, queue: &str) -> Option<&[u64]> {
        self.loss.get(queue).map(|v| v.as_slice())
    }

    pub fn occupancy_series(&self, queue: &str) -> Option<&[u64]> {
        self.occupancy.get(queue).map(|v| v.as_slice())
    }

    pub fn queue_keys(&self) -> Vec<String> {
        self.loss.keys().cloned().collect()
    }

    pub fn flow_keys(&self) -> Vec<String> {
        self.throughput_bytes.keys().cloned().collect()
    }

    pub fn delivered_bytes(&self, key: &str) -> u64 {
        self.throughput_bytes.get(key).map_or(0, |v| v.iter().sum())
    }

    fn t_start(&self, w: usize) -> f64 {
        w as f64 * self.window_secs()
    }

    fn csv_of<F: Fn(usize, &str) -> Option<f64>>(&self, keys: &[String], f: F) -> String {
        let mut out = String::from("t_start,flow_or_queue,value\n");
        for w in 0..self.n_windows {
            for k in keys {
                if let Some(v) = f(w, k) {
                    let _ = writeln!(out, "{:.3},{},{:.3}", self.t_start(w), k, v);
                }
            }
        }
        out
    }

    pub fn throughput_csv(&self) -> String {
        let keys = self.flow_keys();
        self.csv_of(&keys, |w, k| {
            self.throughput_bytes
                .get(k)
                .map(|v| v[w] as f64 * 8.0 / 1e6 / self.window_secs())
        })
    }

    pub fn latency_csv(&self) -> String {
        let mut keys: Vec<String> = Vec::new();
        for k in self.latency.keys() {
            keys.push(k.clone());
            keys.push(format!("{k}.mean"));
        }
        keys.sort();
        self.csv_of(&keys, |w, k| match k.strip_suffix(".mean") {
            Some(base) => self.latency.get(base).map(|v| {
                if v[w].count == 0 {
                    0.0
                } else {
                    v[w].sum_ns as f64 / v[w].count as f64 / 1e6
                }
            }),
            None => self.latency.get(k).map(|v| v[w].max_ns as f64 / 1e6),
        })
    }

    pub fn loss_csv(&self) -> String {
        let keys = self.queue_keys();
        self.csv_of(&keys, |w, k| self.loss.get(k).map(|v| v[w] as f64))
    }

    pub fn occupancy_csv(&self) -> String {
        let keys: Vec<String> = self.occupancy.keys().cloned().collect();
        self.csv_of(&keys, |w, k| self.occupancy.get(k).map(|v| v[w] as f64))
    }

    fn json_value(&self) -> serde_json::Value {
        let series = |csv: &str| -> serde_json::Value {
            let mut m: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for (t, k, v) in parse_csv(csv).expect("own csv parses") {
                m.entry(k).or_default().push((t, v));
            }
            serde_json::to_value(m).expect("serializable")
        };
        serde_json::json!({
            "throughput": series(&self.throughput_csv()),
            "latency": series(&self.latency_csv()),
            "loss": series(&self.loss_csv()),
            "occupancy": series(&self.occupancy_csv()),
        })
    }

    /// Writes one file per observable (`<scenario>_<observable>.csv`), or a
    /// single JSON document keyed by observable.
    pub fn export(&self, format: ExportFormat, dir: &Path, scenario: &str) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        match format {
            ExportFormat::Csv => {
                let files = [
                    ("throughput", self.throughput_csv()),
                    ("latency", self.latency_csv()),
                    ("loss", self.loss_csv()),
                    ("occupancy", self.occupancy_csv()),
                ];
                for (name, body) in files {
                    std::fs::write(dir.join(format!("{scenario}_{name}.csv")), body)?;
                }
                if let Some(raw) = &self.raw_latency {
                    let mut out = String::from("t,flow,latency_ms\n");
                    for (k, t, lat) in raw {
                        let _ = writeln!(
                            out,
                            "{:.6},{},{:.3}",
                            *t as f64 / NANOS_PER_SEC as f64,
                            k,
                            *lat as f64 / 1e6
                        );
                    }
                    std::fs::write(dir.join(format!("{scenario}_latency_raw.csv")), out)?;
                }
            }
            ExportFormat::Json => {
                let body = serde_json::to_string_pretty(&self.json_value()).expect("serializable");
                std::fs::write(dir.join(format!("{scenario}_metrics.json")), body)?;
            }
        }
        Ok(())
    }
}

/// Parses a metrics CSV back into (t_start, key, value) rows.
pub fn parse_csv(body: &str) -> Result<Vec<(f64, String, f64)>, String> {
    let mut rows = Vec::new();
    let mut lines = body.lines();
    let header = lines.next().ok_or("empty csv")?;
    if header != "t_start,flow_or_queue,value" {
        return Err(format!("unexpected header: {header}"));
    }
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let t: f64 = parts
            .next()
            .ok_or_else(|| format!("line {}: missing t", i + 2))?
            .parse()
            .map_err(|e| format!("line {}: {e}", i + 2))?;
        let key = parts.next().ok_or_else(|| format!("line {}: missing key", i + 2))?;
        let v: f64 = parts
            .next()
            .ok_or_else(|| format!("line {}: missing value", i + 2))?
            .parse()
            .map_err(|e| format!("line {}: {e}", i + 2))?;
        rows.push((t, key.to_string(), v));
    }
    Ok(rows)
}
