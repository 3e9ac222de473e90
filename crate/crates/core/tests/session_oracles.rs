//! Brute-force oracles for the sessionization layer: an O(n^2) gap scanner
//! for burst boundaries, interval-graph connected components for session
//! grouping, and per-second counting for peak concurrency.

use chrono::{DateTime, Duration, Utc};
use coasting_core::model::{EventKind, EventLog, SchoolCalendar, TransactionEvent};
use coasting_core::sessions::{
    build_class_sessions, classify_session, concurrency_profile, infer_sessions, segment_bursts,
    ActivityBurst, CandidateSession, SessionConfig,
};
use proptest::prelude::*;

fn t0() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2023-02-06T15:00:00Z")
        .unwrap()
        .with_timezone(&Utc)
}

fn event(student: usize, class: usize, offset_secs: i64) -> TransactionEvent {
    TransactionEvent {
        student_id: format!("s{student:02}").as_str().into(),
        class_id: format!("c{class}").as_str().into(),
        timestamp: t0() + Duration::seconds(offset_secs),
        kind: EventKind::Response,
        assignment_id: "a1".into(),
        problem_id: None,
    }
}

proptest! {
    /// Burst segmentation equals an independent pairwise scan over each
    /// student's sorted timestamps.
    #[test]
    fn bursts_match_brute_force_gap_scan(
        offsets in prop::collection::vec((0usize..4, 0usize..3, 0i64..7200), 1..120),
        split_secs in 120i64..1800,
    ) {
        let events: Vec<TransactionEvent> =
            offsets.iter().map(|&(s, c, o)| event(s, c, o)).collect();
        let (log, _) = EventLog::from_unsorted(events);
        let split = Duration::seconds(split_secs);
        let bursts = segment_bursts(&log, split);

        // Oracle: group timestamps per (class, student), sort, scan gaps.
        use std::collections::BTreeMap;
        let mut grouped: BTreeMap<(String, String), Vec<DateTime<Utc>>> = BTreeMap::new();
        for e in log.events() {
            grouped
                .entry((e.class_id.to_string(), e.student_id.to_string()))
                .or_default()
                .push(e.timestamp);
        }
        let mut expected: Vec<(String, String, DateTime<Utc>, DateTime<Utc>, u32)> = Vec::new();
        for ((class, student), mut times) in grouped {
            times.sort();
            times.dedup();
            // Duplicated kinds at one timestamp were deduped by the log, but
            // distinct events can share a second; count events, not times.
            let mut all_times: Vec<DateTime<Utc>> = log
                .events()
                .iter()
                .filter(|e| e.class_id.as_str() == class && e.student_id.as_str() == student)
                .map(|e| e.timestamp)
                .collect();
            all_times.sort();
            let mut start = all_times[0];
            let mut prev = start;
            let mut count = 0u32;
            for &t in &all_times {
                if count > 0 && (t - prev).num_seconds() > split_secs {
                    expected.push((class.clone(), student.clone(), start, prev, count));
                    start = t;
                    count = 0;
                }
                prev = t;
                count += 1;
            }
            expected.push((class.clone(), student.clone(), start, prev, count));
        }
        expected.sort();

        let mut actual: Vec<(String, String, DateTime<Utc>, DateTime<Utc>, u32)> = bursts
            .iter()
            .map(|b| {
                (
                    b.class_id.to_string(),
                    b.student_id.to_string(),
                    b.start,
                    b.end,
                    b.event_count,
                )
            })
            .collect();
        actual.sort();
        prop_assert_eq!(actual, expected);
    }

    /// Session grouping equals connected components of the interval-overlap
    /// graph (closed intervals, touching counts).
    #[test]
    fn sessions_match_interval_graph_components(
        spans in prop::collection::vec((0usize..8, 0i64..5000, 1i64..2400), 1..100),
    ) {
        let bursts: Vec<ActivityBurst> = spans
            .iter()
            .enumerate()
            .map(|(i, &(student, start, len))| ActivityBurst {
                student_id: format!("s{student:02}").as_str().into(),
                class_id: "c0".into(),
                start: t0() + Duration::seconds(start),
                end: t0() + Duration::seconds(start + len),
                event_count: 1 + (i as u32 % 3),
            })
            .collect();

        let grouping = build_class_sessions(bursts.clone());

        // Oracle: BFS over pairwise overlap.
        let n = bursts.len();
        let overlap = |a: &ActivityBurst, b: &ActivityBurst| a.start <= b.end && b.start <= a.end;
        let mut component = vec![usize::MAX; n];
        let mut next = 0;
        for i in 0..n {
            if component[i] != usize::MAX {
                continue;
            }
            let mut queue = vec![i];
            component[i] = next;
            while let Some(k) = queue.pop() {
                for j in 0..n {
                    if component[j] == usize::MAX && overlap(&bursts[k], &bursts[j]) {
                        component[j] = next;
                        queue.push(j);
                    }
                }
            }
            next += 1;
        }
        use std::collections::BTreeMap;
        let mut envelopes: BTreeMap<usize, (DateTime<Utc>, DateTime<Utc>, usize)> = BTreeMap::new();
        for (i, b) in bursts.iter().enumerate() {
            let entry = envelopes
                .entry(component[i])
                .or_insert((b.start, b.end, 0));
            entry.0 = entry.0.min(b.start);
            entry.1 = entry.1.max(b.end);
            entry.2 += 1;
        }
        let mut expected: Vec<(DateTime<Utc>, DateTime<Utc>, usize)> =
            envelopes.into_values().collect();
        expected.sort();

        let mut actual: Vec<(DateTime<Utc>, DateTime<Utc>, usize)> = grouping
            .candidates
            .iter()
            .map(|c| (c.start, c.end, c.bursts.len()))
            .collect();
        actual.sort();
        // All generated bursts have positive length, so none are degenerate.
        prop_assert_eq!(grouping.degenerate_groups, 0);
        prop_assert_eq!(actual, expected);
    }

    /// Peak concurrency equals per-second brute-force counting of distinct
    /// students over merged closed intervals.
    #[test]
    fn peak_matches_per_second_counting(
        spans in prop::collection::vec((0usize..7, 0i64..900, 0i64..600), 1..40),
    ) {
        let bursts: Vec<ActivityBurst> = spans
            .iter()
            .map(|&(student, start, len)| ActivityBurst {
                student_id: format!("s{student}").as_str().into(),
                class_id: "c0".into(),
                start: t0() + Duration::seconds(start),
                end: t0() + Duration::seconds(start + len),
                event_count: 1,
            })
            .collect();
        let session = CandidateSession {
            class_id: "c0".into(),
            start: bursts.iter().map(|b| b.start).min().unwrap(),
            end: bursts.iter().map(|b| b.end).max().unwrap(),
            bursts: bursts.clone(),
            peak_concurrency: 0,
        };
        let profile = concurrency_profile(&session);

        let lo = (session.start - t0()).num_seconds();
        let hi = (session.end - t0()).num_seconds();
        let mut peak = 0;
        for s in lo..=hi {
            let instant = t0() + Duration::seconds(s);
            let mut active: Vec<&str> = bursts
                .iter()
                .filter(|b| b.start <= instant && instant <= b.end)
                .map(|b| b.student_id.as_str())
                .collect();
            active.sort();
            active.dedup();
            peak = peak.max(active.len() as u32);
        }
        prop_assert_eq!(profile.peak, peak);
    }

    /// Every event lands in exactly one burst and every burst in exactly one
    /// session; classification never depends on input order.
    #[test]
    fn partition_and_order_invariance(
        offsets in prop::collection::vec((0usize..5, 0usize..2, 0i64..10_000), 2..80),
        shuffle_seed in 0u64..1000,
    ) {
        let events: Vec<TransactionEvent> =
            offsets.iter().map(|&(s, c, o)| event(s, c, o)).collect();
        let (log, _) = EventLog::from_unsorted(events.clone());
        let config = SessionConfig::default();
        let calendar = SchoolCalendar::new("America/Chicago").unwrap();

        let bursts = segment_bursts(&log, config.split_gap);
        let total_events: u32 = bursts.iter().map(|b| b.event_count).sum();
        prop_assert_eq!(total_events as usize, log.len());

        let grouping = build_class_sessions(bursts.clone());
        let grouped: usize = grouping.candidates.iter().map(|c| c.bursts.len()).sum();
        prop_assert_eq!(
            grouped + grouping.degenerate_bursts as usize,
            bursts.len()
        );

        // Permute input order; inference output must be identical.
        let inference_a = infer_sessions(&log, &calendar, &config);
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = events;
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        let (log_b, _) = EventLog::from_unsorted(shuffled);
        let inference_b = infer_sessions(&log_b, &calendar, &config);
        prop_assert_eq!(inference_a.sessions.len(), inference_b.sessions.len());
        for (a, b) in inference_a.sessions.iter().zip(&inference_b.sessions) {
            prop_assert_eq!(a.session_type, b.session_type);
            prop_assert_eq!(a.start, b.start);
            prop_assert_eq!(a.end, b.end);
            prop_assert_eq!(a.peak_concurrency, b.peak_concurrency);
        }
    }
}

/// The 50-case rule-table fixture: day, local start time, length, peak
/// concurrency, and the expected label worked out by hand from the rules.
#[test]
fn fifty_case_classification_fixture() {
    use coasting_core::sessions::SessionType::{self, *};
    // Week of Mon 2023-02-06 .. Sun 2023-02-12, America/Chicago: CST all
    // week, no DST transitions.
    let cases: [(&str, &str, i64, u32, SessionType); 50] = [
        ("2023-02-06", "09:00", 30, 12, Classwork),
        ("2023-02-06", "09:00", 30, 6, Classwork),
        ("2023-02-06", "09:00", 30, 5, IndependentWork),
        ("2023-02-06", "09:00", 30, 3, IndependentWork),
        ("2023-02-06", "07:00", 40, 12, Classwork),
        ("2023-02-06", "07:00", 40, 3, IndependentWork),
        ("2023-02-06", "06:59", 30, 12, Homework),
        ("2023-02-06", "06:59", 30, 3, Homework),
        ("2023-02-06", "14:50", 40, 12, Classwork),
        ("2023-02-06", "14:50", 40, 6, Classwork),
        ("2023-02-06", "14:50", 40, 5, IndependentWork),
        ("2023-02-06", "14:59", 30, 12, Classwork),
        ("2023-02-06", "15:00", 30, 12, Homework),
        ("2023-02-06", "15:00", 30, 3, Homework),
        ("2023-02-06", "20:00", 30, 20, Homework),
        ("2023-02-07", "09:30", 25, 12, Classwork),
        ("2023-02-07", "09:30", 25, 5, IndependentWork),
        ("2023-02-07", "09:30", 25, 6, Classwork),
        ("2023-02-07", "12:00", 45, 3, IndependentWork),
        ("2023-02-07", "05:30", 30, 12, Homework),
        ("2023-02-08", "08:15", 35, 12, Classwork),
        ("2023-02-08", "08:15", 35, 5, IndependentWork),
        ("2023-02-08", "10:45", 20, 6, Classwork),
        ("2023-02-08", "10:45", 20, 3, IndependentWork),
        ("2023-02-08", "16:30", 30, 12, Homework),
        ("2023-02-09", "11:00", 30, 12, Classwork),
        ("2023-02-09", "11:00", 30, 5, IndependentWork),
        ("2023-02-09", "13:30", 60, 6, Classwork),
        ("2023-02-09", "13:30", 60, 12, Classwork),
        ("2023-02-09", "22:00", 30, 6, Homework),
        ("2023-02-10", "07:30", 30, 12, Classwork),
        ("2023-02-10", "07:30", 30, 3, IndependentWork),
        ("2023-02-10", "14:30", 45, 12, Classwork),
        ("2023-02-10", "14:30", 45, 5, IndependentWork),
        ("2023-02-10", "06:00", 30, 12, Homework),
        ("2023-02-11", "10:00", 30, 20, Homework),
        ("2023-02-11", "10:00", 30, 3, Homework),
        ("2023-02-11", "14:00", 30, 12, Homework),
        ("2023-02-11", "08:00", 30, 6, Homework),
        ("2023-02-11", "20:00", 30, 5, Homework),
        ("2023-02-12", "09:00", 30, 12, Homework),
        ("2023-02-12", "09:00", 30, 5, Homework),
        ("2023-02-12", "13:00", 40, 6, Homework),
        ("2023-02-12", "19:00", 30, 3, Homework),
        ("2023-02-12", "07:00", 30, 12, Homework),
        ("2023-02-06", "12:30", 90, 12, Classwork),
        ("2023-02-07", "14:59", 31, 6, Classwork),
        ("2023-02-08", "14:59", 31, 5, IndependentWork),
        ("2023-02-09", "07:00", 5, 6, Classwork),
        ("2023-02-10", "11:11", 17, 4, IndependentWork),
    ];

    let calendar = SchoolCalendar::new("America/Chicago").unwrap();
    let mut failures = Vec::new();
    for (i, &(date, time, length_mins, peak, expected)) in cases.iter().enumerate() {
        let naive = format!("{date} {time}:00");
        let naive = chrono::NaiveDateTime::parse_from_str(&naive, "%Y-%m-%d %H:%M:%S").unwrap();
        let (start, _) = calendar.resolve_local(naive).unwrap();
        let session = CandidateSession {
            class_id: "c0".into(),
            start,
            end: start + Duration::minutes(length_mins),
            bursts: Vec::new(),
            peak_concurrency: peak,
        };
        let got = classify_session(&session, &calendar, 5);
        if got != expected {
            failures.push(format!("case {i}: {date} {time} x{peak} -> {got:?}, want {expected:?}"));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
