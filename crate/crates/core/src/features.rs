//! Window features: 31 traffic statistics per device and tumbling window,
//! MinMax scaling, and the device views that decide which entries a
//! device can see.
//!
//! Slot layout (1-based, delays in milliseconds):
//!
//! | slots  | content                                              |
//! |--------|------------------------------------------------------|
//! | 1-4    | end-to-end delay mean, std, min, max                 |
//! | 5-7    | end-to-end delay Q1, Q2, Q3                          |
//! | 8-9    | first-hop delay mean, std                            |
//! | 10-12  | first-hop delay Q1, Q2, Q3                           |
//! | 13-14  | Shannon entropy of end-to-end and first-hop delay    |
//! | 15-16  | communication count, average hops                    |
//! | 17-23  | hops sent by E1..E4, R1..R3                          |
//! | 24-28  | hops received by R1, R2, R3, C, A                    |
//! | 29-31  | communications with 1, 2 and 3 hops                 |
//!
//! A router only logs the hops up to its own transmission, so router-level
//! vectors zero-fill the end-to-end slots (1-7 and 13). The vector length is
//! the same at both levels.

use std::io;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::Truth;
use crate::logfmt::{EntryKind, LogEntry, Timestamp};
use crate::netmodel::NodeId;

pub const FEATURE_COUNT: usize = 31;
pub const ENTROPY_BINS: usize = 10;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "e2e_mean_ms",
    "e2e_std_ms",
    "e2e_min_ms",
    "e2e_max_ms",
    "e2e_q1_ms",
    "e2e_q2_ms",
    "e2e_q3_ms",
    "first_hop_mean_ms",
    "first_hop_std_ms",
    "first_hop_q1_ms",
    "first_hop_q2_ms",
    "first_hop_q3_ms",
    "e2e_entropy_bits",
    "first_hop_entropy_bits",
    "count_total",
    "avg_hops",
    "sent_by_E1",
    "sent_by_E2",
    "sent_by_E3",
    "sent_by_E4",
    "sent_by_R1",
    "sent_by_R2",
    "sent_by_R3",
    "recv_by_R1",
    "recv_by_R2",
    "recv_by_R3",
    "recv_by_C",
    "recv_by_A",
    "count_1_hop",
    "count_2_hop",
    "count_3_hop",
];

const SENDERS: [NodeId; 7] = [
    NodeId::edge(1),
    NodeId::edge(2),
    NodeId::edge(3),
    NodeId::edge(4),
    NodeId::router(1),
    NodeId::router(2),
    NodeId::router(3),
];

const RECEIVERS: [NodeId; 5] =
    [NodeId::router(1), NodeId::router(2), NodeId::router(3), NodeId::COORDINATOR, NodeId::ATTACKER];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("scaler was fitted on {expected:?} vectors, got {got:?}")]
    ScalerMismatch { expected: FeatureLevel, got: FeatureLevel },
    #[error("cannot fit a scaler on an empty training set")]
    EmptyTraining,
    #[error("vector is already normalized")]
    AlreadyNormalized,
    #[error("feature csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<csv::Error> for FeatureError {
    fn from(e: csv::Error) -> Self {
        FeatureError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureLevel {
    Coordinator,
    Router,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSchema {
    pub level: FeatureLevel,
}

impl FeatureSchema {
    pub const VERSION: u32 = 1;

    pub fn coordinator() -> FeatureSchema {
        FeatureSchema { level: FeatureLevel::Coordinator }
    }

    pub fn router() -> FeatureSchema {
        FeatureSchema { level: FeatureLevel::Router }
    }

    pub fn names(&self) -> &'static [&'static str; FEATURE_COUNT] {
        &FEATURE_NAMES
    }

    /// Slots (0-based) this level cannot observe and always fills with zero.
    pub fn is_zero_filled(&self, slot: usize) -> bool {
        self.level == FeatureLevel::Router && (slot <= 6 || slot == 12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub window_start: Timestamp,
    pub device: NodeId,
    pub level: FeatureLevel,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn as_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| *v as f32).collect()
    }
}

fn mean(sorted: &[f64]) -> f64 {
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

/// Population standard deviation.
fn std_dev(sorted: &[f64], mean: f64) -> f64 {
    (sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / sorted.len() as f64).sqrt()
}

/// Quantile of sorted, nonempty samples with linear interpolation between
/// order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Shannon entropy in bits of an equal-width histogram spanning the sample
/// range. Empty and constant samples give 0.
pub fn shannon_entropy(samples: &[f64], bins: usize) -> f64 {
    assert!(bins >= 1, "entropy needs at least one bin");
    if samples.is_empty() {
        return 0.0;
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for x in samples {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Raw (unnormalized) features of the entries of one window. The caller
/// selects the entries; an empty slice yields the zero vector.
pub fn extract_window(
    entries: &[LogEntry],
    window_start: Timestamp,
    device: NodeId,
    schema: FeatureSchema,
) -> FeatureVector {
    let mut v = vec![0.0; FEATURE_COUNT];
    if !entries.is_empty() {
        let e2e = sorted(entries.iter().filter_map(|e| e.end_to_end_delay().ok()).collect());
        let fh = sorted(entries.iter().filter_map(|e| e.first_hop_delay().ok()).collect());
        if !e2e.is_empty() {
            let m = mean(&e2e);
            v[0] = m;
            v[1] = std_dev(&e2e, m);
            v[2] = e2e[0];
            v[3] = e2e[e2e.len() - 1];
            v[4] = quantile(&e2e, 0.25);
            v[5] = quantile(&e2e, 0.5);
            v[6] = quantile(&e2e, 0.75);
            v[12] = shannon_entropy(&e2e, ENTROPY_BINS);
        }
        if !fh.is_empty() {
            let m = mean(&fh);
            v[7] = m;
            v[8] = std_dev(&fh, m);
            v[9] = quantile(&fh, 0.25);
            v[10] = quantile(&fh, 0.5);
            v[11] = quantile(&fh, 0.75);
            v[13] = shannon_entropy(&fh, ENTROPY_BINS);
        }
        v[14] = entries.len() as f64;
        let hops: usize = entries.iter().map(LogEntry::hop_count).sum();
        v[15] = hops as f64 / entries.len() as f64;
        for e in entries {
            for s in e.segments() {
                if let Some(i) = SENDERS.iter().position(|n| *n == s.from) {
                    v[16 + i] += 1.0;
                }
                if let Some(i) = RECEIVERS.iter().position(|n| *n == s.to) {
                    v[23 + i] += 1.0;
                }
            }
            if (1..=3).contains(&e.hop_count()) {
                v[27 + e.hop_count()] += 1.0;
            }
        }
    }
    for (slot, x) in v.iter_mut().enumerate() {
        if schema.is_zero_filled(slot) {
            *x = 0.0;
        }
    }
    FeatureVector { window_start, device, level: schema.level, values: v, normalized: false }
}

/// Buckets entries into `count` tumbling windows by first send time and
/// extracts each window. Entries outside the covered span are ignored.
pub fn extract_windows(
    entries: &[LogEntry],
    start: Timestamp,
    window_len: Duration,
    count: usize,
    device: NodeId,
    schema: FeatureSchema,
) -> Vec<FeatureVector> {
    let len = window_len.as_micros() as i64;
    let mut buckets: Vec<Vec<LogEntry>> = vec![Vec::new(); count];
    for e in entries {
        let dt = e.first_sent().micros() - start.micros();
        if dt >= 0 && ((dt / len) as usize) < count {
            buckets[(dt / len) as usize].push(e.clone());
        }
    }
    buckets
        .iter()
        .enumerate()
        .map(|(i, b)| extract_window(b, start.plus_micros(i as i64 * len), device, schema))
        .collect()
}

/// Entries a router wrote itself.
pub fn router_view(entries: &[LogEntry], router: NodeId) -> Vec<LogEntry> {
    entries.iter().filter(|e| e.kind() == EntryKind::Router && e.logged_by() == router).cloned().collect()
}

/// Coordinator entries whose path crossed `router`: the share of the
/// central log attributable to one router.
pub fn coordinator_view(entries: &[LogEntry], router: NodeId) -> Vec<LogEntry> {
    entries.iter().filter(|e| e.kind() == EntryKind::Coordinator && e.visits(router)).cloned().collect()
}

/// Per-slot MinMax bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub level: FeatureLevel,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_scaler(train: &[FeatureVector]) -> Result<ScalerParams, FeatureError> {
    let first = train.first().ok_or(FeatureError::EmptyTraining)?;
    let mut min = vec![f64::INFINITY; FEATURE_COUNT];
    let mut max = vec![f64::NEG_INFINITY; FEATURE_COUNT];
    for v in train {
        if v.level != first.level {
            return Err(FeatureError::ScalerMismatch { expected: first.level, got: v.level });
        }
        if v.normalized {
            return Err(FeatureError::AlreadyNormalized);
        }
        for (i, x) in v.values.iter().enumerate() {
            min[i] = min[i].min(*x);
            max[i] = max[i].max(*x);
        }
    }
    Ok(ScalerParams { level: first.level, min, max })
}

impl ScalerParams {
    /// Slot-wise min of mins and max of maxes. Merging scalers fitted on
    /// disjoint parts equals fitting the union, so devices can agree on
    /// shared bounds by exchanging only their local bounds.
    pub fn merge(parts: &[ScalerParams]) -> Result<ScalerParams, FeatureError> {
        let first = parts.first().ok_or(FeatureError::EmptyTraining)?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.level != first.level {
                return Err(FeatureError::ScalerMismatch { expected: first.level, got: p.level });
            }
            for i in 0..FEATURE_COUNT {
                out.min[i] = out.min[i].min(p.min[i]);
                out.max[i] = out.max[i].max(p.max[i]);
            }
        }
        Ok(out)
    }

    /// `(x - min) / (max - min)` clamped to `[0, 1]`; constant slots map to 0.
    pub fn apply(&self, v: &FeatureVector) -> Result<FeatureVector, FeatureError> {
        if v.level != self.level {
            return Err(FeatureError::ScalerMismatch { expected: self.level, got: v.level });
        }
        if v.normalized {
            return Err(FeatureError::AlreadyNormalized);
        }
        let values = v
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let span = self.max[i] - self.min[i];
                if span > 0.0 {
                    ((x - self.min[i]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(FeatureVector { values, normalized: true, ..v.clone() })
    }

    pub fn apply_all(&self, vs: &[FeatureVector]) -> Result<Vec<FeatureVector>, FeatureError> {
        vs.iter().map(|v| self.apply(v)).collect()
    }
}

pub fn apply_scaler(v: &FeatureVector, params: &ScalerParams) -> Result<FeatureVector, FeatureError> {
    params.apply(v)
}

/// Writes a feature matrix: `window_start, device`, the 31 slot names, `truth`.
pub fn write_feature_csv<W: io::Write>(
    out: W,
    rows: &[FeatureVector],
    truths: Option<&[Truth]>,
) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["window_start", "device"];
    header.extend(FEATURE_NAMES);
    header.push("truth");
    w.write_record(&header)?;
    for (i, v) in rows.iter().enumerate() {
        let mut rec = vec![v.window_start.to_string(), v.device.to_string()];
        rec.extend(v.values.iter().map(|x| format!("{x}")));
        rec.push(truths.map(|t| t[i].to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_feature_csv`].
pub fn read_feature_csv<R: io::Read>(
    input: R,
    level: FeatureLevel,
    normalized: bool,
) -> Result<Vec<(FeatureVector, Option<Truth>)>, FeatureError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != FEATURE_COUNT + 3 {
            return Err(FeatureError::Csv(format!("expected {} columns, got {}", FEATURE_COUNT + 3, rec.len())));
        }
        let bad = |what: &str| FeatureError::Csv(format!("bad {what} `{}`", rec.as_slice()));
        let window_start = Timestamp::parse(&rec[0]).ok_or_else(|| bad("timestamp"))?;
        let device = rec[1].parse().map_err(|_| bad("device"))?;
        let values = (2..2 + FEATURE_COUNT)
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>, _>>()?;
        let truth = match &rec[FEATURE_COUNT + 2] {
            "" => None,
            "normal" => Some(Truth::Normal),
            "attack" => Some(Truth::Attack),
            _ => return Err(bad("truth")),
        };
        out.push((FeatureVector { window_start, device, level, values, normalized }, truth));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logfmt::{parse_entry, Segment};

    const COORDINATOR_EXAMPLE: &str = "E3>R3,2024-04-26 13:36:10.273312,2024-04-26 13:36:10.336880,\
        R3>R2,2024-04-26 13:36:10.369257,2024-04-26 13:36:10.488817,\
        R2>C,2024-04-26 13:36:10.522766,2024-04-26 13:36:10.787851";
    const ROUTER_EXAMPLE: &str =
        "E3>R3,2024-04-26 13:36:10.273312,2024-04-26 13:36:10.336880,R3>R2,2024-04-26 13:36:10.369257, S:0";

    fn n(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn t0() -> Timestamp {
        Timestamp::parse("2024-04-26 13:36:00.000000").unwrap()
    }

    /// A direct E1>C entry with the given end-to-end delay.
    fn direct(delay_ms: i64, at: i64) -> LogEntry {
        let sent = t0().plus_micros(at);
        let seg = Segment::complete(n("E1"), NodeId::COORDINATOR, sent, sent.plus_micros(delay_ms * 1000));
        LogEntry::new(EntryKind::Coordinator, vec![seg], None).unwrap()
    }

    #[test]
    fn sample_coordinator_entry() {
        let e = parse_entry(COORDINATOR_EXAMPLE).unwrap();
        let v = extract_window(&[e], t0(), NodeId::COORDINATOR, FeatureSchema::coordinator());
        assert_eq!(v.values.len(), FEATURE_COUNT);
        assert!((v.values[0] - 514.539).abs() < 1e-9);
        assert!((v.values[7] - 63.568).abs() < 1e-9);
        assert_eq!(v.values[14], 1.0);
        assert_eq!(v.values[15], 3.0);
        assert_eq!(v.values[1], 0.0);
        assert_eq!(v.values[12], 0.0);
        // E3, R3, R2 each send once; R3, R2, C each receive once; one 3-hop trip
        assert_eq!(&v.values[16..23], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&v.values[23..28], &[0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(&v.values[28..31], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sample_router_entry_at_router_level() {
        let e = parse_entry(ROUTER_EXAMPLE).unwrap();
        let view = router_view(&[e], n("R3"));
        assert_eq!(view.len(), 1);
        let v = extract_window(&view, t0(), n("R3"), FeatureSchema::router());
        assert!((v.values[7] - 63.568).abs() < 1e-9);
        for slot in 0..FEATURE_COUNT {
            if FeatureSchema::router().is_zero_filled(slot) {
                assert_eq!(v.values[slot], 0.0);
            }
        }
        assert_eq!(v.values[15], 2.0);
        assert!(router_view(&view, n("R2")).is_empty());
    }

    #[test]
    fn coordinator_schema_fills_nothing() {
        let s = FeatureSchema::coordinator();
        assert!((0..FEATURE_COUNT).all(|i| !s.is_zero_filled(i)));
        let r = FeatureSchema::router();
        assert_eq!((0..FEATURE_COUNT).filter(|i| r.is_zero_filled(*i)).count(), 8);
    }

    #[test]
    fn empty_window_is_zero() {
        for s in [FeatureSchema::coordinator(), FeatureSchema::router()] {
            let v = extract_window(&[], t0(), n("R1"), s);
            assert_eq!(v.values, vec![0.0; FEATURE_COUNT]);
        }
    }

    #[test]
    fn two_entry_quartiles() {
        let v =
            extract_window(&[direct(100, 0), direct(300, 10)], t0(), NodeId::COORDINATOR, FeatureSchema::coordinator());
        assert_eq!(v.values[0], 200.0);
        assert_eq!(v.values[4], 150.0);
        assert_eq!(v.values[5], 200.0);
        assert_eq!(v.values[6], 250.0);
        assert_eq!(v.values[1], 100.0);
        assert_eq!(v.values[2], 100.0);
        assert_eq!(v.values[3], 300.0);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(shannon_entropy(&[0., 0., 0., 0., 1., 1., 1., 1.], ENTROPY_BINS), 1.0);
        assert_eq!(shannon_entropy(&[4.2; 9], ENTROPY_BINS), 0.0);
        assert_eq!(shannon_entropy(&[], ENTROPY_BINS), 0.0);
        // p = {2/4, 1/4, 1/4}
        let expected = -(0.5f64 * 0.5f64.log2() + 2.0 * 0.25 * 0.25f64.log2());
        assert_eq!(expected, 1.5);
        assert_eq!(shannon_entropy(&[1., 1., 2., 3.], 3), expected);
    }

    #[test]
    fn windows_bucket_by_first_send() {
        let es = vec![direct(100, 0), direct(100, 59_999_999), direct(100, 60_000_000), direct(100, 200_000_000)];
        let ws =
            extract_windows(&es, t0(), Duration::from_secs(60), 3, NodeId::COORDINATOR, FeatureSchema::coordinator());
        let counts: Vec<f64> = ws.iter().map(|w| w.values[14]).collect();
        assert_eq!(counts, vec![2.0, 1.0, 0.0]);
        assert_eq!(ws[1].window_start, t0().plus_micros(60_000_000));
    }

    fn raw(values: Vec<f64>) -> FeatureVector {
        FeatureVector { window_start: t0(), device: n("R1"), level: FeatureLevel::Router, values, normalized: false }
    }

    #[test]
    fn scaler_rules() {
        let mut a = vec![0.0; FEATURE_COUNT];
        let mut b = vec![0.0; FEATURE_COUNT];
        a[0] = 0.0;
        b[0] = 10.0;
        a[1] = 3.0;
        b[1] = 3.0;
        let p = fit_scaler(&[raw(a), raw(b)]).unwrap();
        let mut x = vec![0.0; FEATURE_COUNT];
        x[0] = 5.0;
        x[1] = 99.0;
        let y = p.apply(&raw(x.clone())).unwrap();
        assert!(y.normalized);
        assert_eq!(y.values[0], 0.5);
        assert_eq!(y.values[1], 0.0);
        x[0] = 15.0;
        assert_eq!(p.apply(&raw(x.clone())).unwrap().values[0], 1.0);
        x[0] = -3.0;
        assert_eq!(p.apply(&raw(x)).unwrap().values[0], 0.0);
    }

    #[test]
    fn scaler_errors() {
        assert!(matches!(fit_scaler(&[]), Err(FeatureError::EmptyTraining)));
        let p = fit_scaler(&[raw(vec![1.0; FEATURE_COUNT])]).unwrap();
        let mut c = raw(vec![1.0; FEATURE_COUNT]);
        c.level = FeatureLevel::Coordinator;
        assert!(matches!(p.apply(&c), Err(FeatureError::ScalerMismatch { .. })));
        let done = p.apply(&raw(vec![1.0; FEATURE_COUNT])).unwrap();
        assert!(matches!(p.apply(&done), Err(FeatureError::AlreadyNormalized)));
    }

    #[test]
    fn csv_round_trip() {
        let v = extract_window(
            &[parse_entry(COORDINATOR_EXAMPLE).unwrap()],
            t0(),
            NodeId::COORDINATOR,
            FeatureSchema::coordinator(),
        );
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, std::slice::from_ref(&v), Some(&[Truth::Attack])).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("window_start,device,e2e_mean_ms,"));
        assert!(text.lines().next().unwrap().ends_with(",count_3_hop,truth"));
        let back = read_feature_csv(&buf[..], FeatureLevel::Coordinator, false).unwrap();
        assert_eq!(back, vec![(v, Some(Truth::Attack))]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_bounded(xs in prop::collection::vec(0.0f64..1e4, 0..200), bins in 1usize..20) {
                let h = shannon_entropy(&xs, bins);
                prop_assert!(h >= 0.0);
                prop_assert!(h <= (bins as f64).log2() + 1e-12);
            }

            #[test]
            fn permutation_invariant(delays in prop::collection::vec(1i64..2000, 1..40), seed in any::<u64>()) {
                let es: Vec<LogEntry> = delays.iter().enumerate().map(|(i, d)| direct(*d, i as i64 * 1000)).collect();
                let mut shuffled = es.clone();
                let mut s = seed;
                for i in (1..shuffled.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
                let schema = FeatureSchema::coordinator();
                prop_assert_eq!(
                    extract_window(&es, t0(), NodeId::COORDINATOR, schema),
                    extract_window(&shuffled, t0(), NodeId::COORDINATOR, schema)
                );
            }

            #[test]
            fn scaling_is_monotone(lo in -100.0f64..100.0, span in 0.1f64..100.0, a in -300.0f64..300.0, b in -300.0f64..300.0) {
                let mut mn = vec![0.0; FEATURE_COUNT];
                let mut mx = vec![0.0; FEATURE_COUNT];
                mn[0] = lo;
                mx[0] = lo + span;
                let p = fit_scaler(&[raw(mn), raw(mx)]).unwrap();
                let (x1, x2) = if a <= b { (a, b) } else { (b, a) };
                let mut v1 = vec![0.0; FEATURE_COUNT];
                let mut v2 = vec![0.0; FEATURE_COUNT];
                v1[0] = x1;
                v2[0] = x2;
                let s1 = p.apply(&raw(v1)).unwrap().values[0];
                let s2 = p.apply(&raw(v2)).unwrap().values[0];
                prop_assert!(s1 <= s2);
                prop_assert!((0.0..=1.0).contains(&s1) && (0.0..=1.0).contains(&s2));
            }

            #[test]
            fn merged_fit_equals_pooled_fit(
                rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, FEATURE_COUNT), 2..30),
                cut in 1usize..29,
            ) {
                let vs: Vec<FeatureVector> = rows.into_iter().map(raw).collect();
                let cut = cut.min(vs.len() - 1);
                let merged = ScalerParams::merge(&[fit_scaler(&vs[..cut]).unwrap(), fit_scaler(&vs[cut..]).unwrap()]).unwrap();
                prop_assert_eq!(merged, fit_scaler(&vs).unwrap());
            }
        }
    }
}
