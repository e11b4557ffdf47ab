use std::collections::BTreeSet;

use driftlearn_core::stream::{
    build_rosters, build_stream, check_speaker_disjointness, export_stream, import_stream,
    read_frames, retention, write_frames, GenConfig, ScheduleSpec, SpeakerId,
};
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1u32..80, 1..14)
}

fn small_gen() -> GenConfig {
    GenConfig {
        input_dim: 4,
        vocab_size: 6,
        utterances_per_batch: 30,
        dev_utterances: 12,
        test_utterances: 12,
        probe_utterances: 6,
        pretrain_utterances: 8,
        dev_speakers: 4,
        test_speakers: 4,
        probe_speakers: 2,
        pretrain_speakers: 3,
        min_frames: 2,
        max_frames: 6,
        ..GenConfig::default()
    }
}

proptest! {
    #[test]
    fn roster_sizes_match_the_retention_sum(s in schedule(), seed in any::<u64>()) {
        let spec = ScheduleSpec::new(s.clone()).unwrap();
        let rosters = build_rosters(&spec, seed);
        for (idx, r) in rosters.iter().enumerate() {
            let i = idx + 1;
            let expected: u32 = (1..i).map(|j| retention(&spec, i, j).unwrap()).sum::<u32>() + s[idx];
            prop_assert_eq!(r.total() as u32, expected);
            prop_assert_eq!(r.total() as u32, spec.total_speakers(i));
            let unique: BTreeSet<SpeakerId> = r.members.iter().copied().collect();
            prop_assert_eq!(unique.len(), r.total());
        }
    }

    #[test]
    fn retention_never_grows_with_distance(s in schedule()) {
        let spec = ScheduleSpec::new(s).unwrap();
        let b = spec.num_batches();
        for j in 1..b {
            for i in (j + 1)..b {
                prop_assert!(retention(&spec, i + 1, j).unwrap() <= retention(&spec, i, j).unwrap());
            }
        }
    }

    #[test]
    fn retained_sets_are_nested(s in schedule(), seed in any::<u64>()) {
        let spec = ScheduleSpec::new(s).unwrap();
        let rosters = build_rosters(&spec, seed);
        // Speakers of cohort j retained at batch i+1 were also present at batch i.
        for w in rosters.windows(2) {
            let earlier: BTreeSet<SpeakerId> = w[0].members.iter().copied().collect();
            for id in &w[1].members {
                if !w[1].new_speakers.contains(id) {
                    prop_assert!(earlier.contains(id));
                }
            }
        }
    }

    #[test]
    fn held_out_speakers_never_train(s in prop::collection::vec(1u32..12, 1..5), seed in any::<u64>()) {
        let spec = ScheduleSpec::new(s).unwrap();
        let stream = build_stream(&spec, &small_gen(), seed).unwrap();
        prop_assert!(check_speaker_disjointness(&stream).is_ok());
    }
}

#[test]
fn every_roster_member_gets_utterances() {
    let spec = ScheduleSpec::new(vec![6, 4, 4]).unwrap();
    let stream = build_stream(&spec, &small_gen(), 3).unwrap();
    for b in &stream.batches {
        let speaking: BTreeSet<SpeakerId> = b.utterances.iter().map(|u| u.speaker).collect();
        let roster: BTreeSet<SpeakerId> = b.roster.members.iter().copied().collect();
        assert_eq!(speaking, roster);
    }
    assert!(stream.probe.iter().all(|u| u.cohort == 1));
    assert!(stream.pretrain.iter().all(|u| u.cohort == 0));
}

#[test]
fn stream_is_deterministic_and_seed_sensitive() {
    let spec = ScheduleSpec::new(vec![5, 3]).unwrap();
    let a = build_stream(&spec, &small_gen(), 17).unwrap();
    let b = build_stream(&spec, &small_gen(), 17).unwrap();
    let c = build_stream(&spec, &small_gen(), 18).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn corrupt_batches_keep_frames_but_scramble_labels() {
    let spec = ScheduleSpec::new(vec![5, 3, 3]).unwrap();
    let clean = build_stream(&spec, &small_gen(), 4).unwrap();
    let noisy = build_stream(
        &spec,
        &GenConfig {
            corrupt_batches: vec![2],
            ..small_gen()
        },
        4,
    )
    .unwrap();
    assert_eq!(clean.batches[0], noisy.batches[0]);
    assert_eq!(clean.batches[2], noisy.batches[2]);
    let (c, n) = (&clean.batches[1].utterances, &noisy.batches[1].utterances);
    assert!(c.iter().zip(n).all(|(a, b)| a.frames == b.frames));
    assert!(c.iter().zip(n).any(|(a, b)| a.reference != b.reference));
    assert_eq!(clean.test, noisy.test);
}

#[test]
fn export_import_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScheduleSpec::new(vec![4, 2, 3]).unwrap();
    let stream = build_stream(&spec, &small_gen(), 99).unwrap();
    export_stream(&stream, dir.path()).unwrap();
    let back = import_stream(dir.path()).unwrap();
    assert_eq!(stream, back);
}

#[test]
fn frame_file_rejects_truncation_and_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    write_frames(&path, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, f64::MIN_POSITIVE]).unwrap();
    let m = read_frames(&path).unwrap();
    assert_eq!(m.row(1), &[4.0, 5.0, f64::MIN_POSITIVE]);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_frames(&path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(read_frames(&path).is_err());
}
