use std::collections::BTreeMap;
use std::sync::Arc;

use super::stages::qa_prompt;
use super::*;
use crate::audio::synth::{gain, mix, progression, ClickTrack};
use crate::audio::{encode_wav_pcm16, AudioClip, ChordLabel};
use crate::metadata::shard::read_shards;
use crate::metadata::{AudioRef, DatasetRecord, MusicMetadata, RecordKind};
use crate::provider::templates::*;
use crate::provider::{MockOutcome, MockProvider, MockRule, ProviderClient, PLANTED_FLAW, PLANTED_REJECT};

const SR: u32 = 22_050;

fn client(mock: MockProvider) -> ProviderClient {
    ProviderClient::new(Arc::new(mock)).with_sleeper(Arc::new(|_| {}))
}

fn shared(mock: Arc<MockProvider>) -> ProviderClient {
    ProviderClient::new(mock).with_sleeper(Arc::new(|_| {}))
}

fn segment_ref(i: usize) -> SegmentRef {
    SegmentRef {
        segment_id: format!("clip{:02}-s{:03}", i / 3, i % 3),
        clip_id: format!("clip{:02}", i / 3),
        path: format!("clip{:02}.wav", i / 3),
        offset_sec: 30.0 * (i % 3) as f64,
        duration_sec: 30.0,
        resolved: format!("clip{:02}.wav", i / 3).into(),
    }
}

fn meta(bpm: f64, key: &str) -> MusicMetadata {
    MusicMetadata { bpm: Some(bpm), key: Some(key.into()), meter: Some("4/4".into()), ..Default::default() }
}

fn record(id: &str, kind: RecordKind, target: &str, metadata: MusicMetadata) -> DatasetRecord {
    DatasetRecord {
        record_id: id.into(),
        kind,
        audio_ref: AudioRef { path: "a.wav".into(), offset_sec: 0.0 },
        skill: None,
        prompt: "Describe.".into(),
        target: target.into(),
        options: None,
        answer_index: None,
        think: None,
        metadata,
        stage_audit: Vec::new(),
    }
}

fn qa_record(id: &str, options: &[&str], answer: usize) -> DatasetRecord {
    let options: Vec<String> = options.iter().map(|s| s.to_string()).collect();
    DatasetRecord {
        prompt: qa_prompt("What genre is this track?", &options),
        target: format!("({}) {}", (b'A' + answer as u8) as char, options[answer]),
        options: Some(options),
        answer_index: Some(answer),
        ..record(id, RecordKind::Qa, "x", MusicMetadata::default())
    }
}

fn synthetic_clip(bpm: f64, chords: &[ChordLabel], seconds: f64) -> AudioClip {
    let click = ClickTrack { sample_rate: SR, click_hz: 1046.5, ..ClickTrack::new(bpm, seconds) }.render();
    let per = seconds / chords.len() as f64;
    mix(&click, &gain(&progression(SR, chords, per), 0.5))
}

#[test]
fn synthesize_one_record_per_segment() {
    let c = client(MockProvider::new(1));
    let ctx = StageContext::new(Some(&c), 1);
    let segs: Vec<SegmentRef> = (0..3).map(segment_ref).collect();
    let out = synthesize_initial_captions(&segs, &ctx).unwrap();
    assert_eq!(out.len(), 3);
    for (r, s) in out.iter().zip(&segs) {
        assert_eq!(r.segment_id(), s.segment_id);
        assert_eq!(r.stage_audit.len(), 1);
        assert_eq!((r.stage_audit[0].stage.as_str(), r.stage_audit[0].passed), ("synthesize", true));
    }
    assert!(synthesize_initial_captions(&[], &ctx).unwrap().is_empty());
}

#[test]
fn provider_down_checkpoints_and_resumes_without_duplicate_work() {
    let dir = tempfile::tempdir().unwrap();
    let segs: Vec<SegmentRef> = (0..100).map(segment_ref).collect();
    let clean = {
        let c = client(MockProvider::new(5));
        synthesize_initial_captions(&segs, &StageContext::new(Some(&c), 5)).unwrap()
    };
    let ctx_template = |c| {
        let mut ctx = StageContext::new(Some(c), 5);
        ctx.checkpoint_dir = Some(dir.path().to_owned());
        ctx
    };

    let first = client(MockProvider::new(5).fail_after(70));
    let err = synthesize_initial_captions(&segs, &ctx_template(&first)).unwrap_err();
    assert_eq!(err.class_name(), "ProviderUnavailable");
    let lines = std::fs::read_to_string(dir.path().join("synthesize.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 1 + 70);

    let mock = Arc::new(MockProvider::new(5));
    let second = shared(mock.clone());
    let resumed = synthesize_initial_captions(&segs, &ctx_template(&second)).unwrap();
    assert_eq!(mock.calls(), 30);
    assert_eq!(resumed, clean);

    // a complete checkpoint means no further provider work
    let mock = Arc::new(MockProvider::unavailable());
    let third = shared(mock.clone());
    assert_eq!(synthesize_initial_captions(&segs, &ctx_template(&third)).unwrap(), clean);
    assert_eq!(mock.calls(), 0);
}

#[test]
fn changed_inputs_invalidate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = client(MockProvider::new(5));
    let mut ctx = StageContext::new(Some(&c), 5);
    ctx.checkpoint_dir = Some(dir.path().to_owned());
    let a: Vec<SegmentRef> = (0..3).map(segment_ref).collect();
    synthesize_initial_captions(&a, &ctx).unwrap();
    let mut b = a.clone();
    b[0].offset_sec = 1.0;
    let out = synthesize_initial_captions(&b, &ctx).unwrap();
    assert_eq!(out[0].audio_ref.offset_sec, 1.0);
}

#[test]
fn extract_click_and_chords() {
    let c_major = [ChordLabel::Major(0), ChordLabel::Major(5), ChordLabel::Major(7), ChordLabel::Major(0)];
    let clip = synthetic_clip(120.0, &c_major, 30.0);
    let (m, audit) = extract_clip(&clip);
    let bpm = m.bpm.expect("tempo found");
    assert!((bpm - 120.0).abs() <= 2.4, "bpm {bpm}, audit {audit:?}");
    assert_eq!(m.key.as_deref(), Some("C major"));

    let two = progression(SR, &[ChordLabel::Major(0), ChordLabel::Minor(9)], 4.0);
    let (m, _) = extract_clip(&two);
    let labels: Vec<ChordLabel> = m.chords.iter().map(|c| c.label).collect();
    assert_eq!(labels, vec![ChordLabel::Major(0), ChordLabel::Minor(9)]);
}

#[test]
fn extract_silence_audits_failures() {
    let silence = AudioClip::new(vec![0.0; SR as usize * 10], SR).unwrap();
    let (m, audit) = extract_clip(&silence);
    assert_eq!((m.bpm, m.key.as_deref(), m.meter.as_deref()), (None, None, None));
    assert!(m.chords.is_empty());
    let notes: Vec<&str> = audit.iter().map(|a| a.note.as_str()).collect();
    assert!(notes.contains(&"tempo: NoPeriodicity"), "{notes:?}");
    assert!(notes.contains(&"key: NoTonalContent"), "{notes:?}");
    assert!(audit.iter().all(|a| !a.passed));
}

fn segment_metadata(seg: &str, m: MusicMetadata) -> SegmentMetadata {
    SegmentMetadata {
        segment_id: seg.into(),
        audio_ref: AudioRef { path: "a.wav".into(), offset_sec: 0.0 },
        metadata: m,
        audit: Vec::new(),
    }
}

fn initial(seg: &str) -> DatasetRecord {
    record(&format!("{seg}/initial"), RecordKind::Caption, "A bright pop piece.", MusicMetadata::default())
}

#[test]
fn create_captions_and_five_skills() {
    let c = client(MockProvider::new(3));
    let ctx = StageContext::new(Some(&c), 3);
    let rows = vec![segment_metadata("a-s000", meta(120.0, "C major")), segment_metadata("b-s000", meta(96.0, "A minor"))];
    let initials = vec![initial("a-s000"), initial("b-s000"), initial("c-s000")];
    let out = create_caption_and_qa(&initials, &rows, &ctx).unwrap();
    assert_eq!(out.dropped.len(), 1);
    assert_eq!(out.dropped[0].record_id, "c-s000");
    let caption = out.records.iter().find(|r| r.record_id == "a-s000/caption").unwrap();
    assert!(caption.target.contains("120") && caption.target.contains("C major"), "{}", caption.target);
    for seg in ["a-s000", "b-s000"] {
        let skills: std::collections::BTreeSet<&str> = out
            .records
            .iter()
            .filter(|r| r.segment_id() == seg && r.kind == RecordKind::Qa)
            .map(|r| r.skill.as_deref().unwrap())
            .collect();
        assert_eq!(skills.len(), 5);
    }
    let qa = out.records.iter().find(|r| r.record_id == "a-s000/qa/temporal").unwrap();
    assert_eq!(qa.correct_option(), Some("120 BPM"));
    let words = mean_caption_words(&out.records).unwrap();
    let captions: Vec<&DatasetRecord> = out.records.iter().filter(|r| r.kind == RecordKind::Caption).collect();
    let oracle = captions.iter().map(|r| r.target.split(' ').filter(|w| !w.is_empty()).count()).sum::<usize>() as f64
        / captions.len() as f64;
    assert_eq!(words, oracle);
}

#[test]
fn unparseable_qa_is_dropped_with_reason() {
    let mock = MockProvider::new(3).with_rule(MockRule::new(
        |r| r.template_id == QA_GENERATION && r.variables["skill"].starts_with("Lyric"),
        |_, _| MockOutcome::Text("Question: Who sings?\n(A) Someone\nAnswer: (Q)".into()),
    ));
    let c = client(mock);
    let ctx = StageContext::new(Some(&c), 3);
    let out = create_caption_and_qa(&[initial("a-s000")], &[segment_metadata("a-s000", meta(120.0, "C major"))], &ctx).unwrap();
    assert_eq!(out.records.len(), 5);
    assert_eq!(out.dropped.len(), 1);
    assert_eq!(out.dropped[0].record_id, "a-s000/qa/lyric");
    assert!(out.dropped[0].reason.contains("unparseable"));
}

#[test]
fn rewrite_fixes_tempo_claim() {
    let c = client(MockProvider::new(2));
    let existing = record("x-s000/caption", RecordKind::Caption, "An upbeat track at 140 BPM in C major.", MusicMetadata::default());
    let out = rewrite_caption(&existing, &meta(120.0, "C major"), &c).unwrap();
    assert!(out.target.contains("120"), "{}", out.target);
    assert!(!out.target.contains("140"));
    assert_eq!(out.record_id, "x-s000/caption/rewrite");
    assert!(!out.target.contains("lyrics"));

    let mut sung = meta(120.0, "C major");
    sung.lyrics = Some("walking down the road".into());
    let out = rewrite_caption(&existing, &sung, &c).unwrap();
    assert!(out.target.contains("walking down the road"));
}

#[test]
fn rewrite_post_check_rejects_missing_key() {
    let mock = MockProvider::new(2)
        .with_rule(MockRule::new(|r| r.template_id == CAPTION_CORRECTION, |_, _| MockOutcome::Text("A track at 120 BPM.".into())));
    let c = client(mock);
    let existing = record("x-s000/caption", RecordKind::Caption, "Old caption.", meta(120.0, "C major"));
    let err = rewrite_caption(&existing, &meta(120.0, "C major"), &c).unwrap_err();
    assert_eq!(err.class_name(), "RewriteInconsistent");
    let ctx = StageContext::new(Some(&c), 2);
    let out = rewrite_captions(&[existing.clone()], &ctx).unwrap();
    assert_eq!(out.records[0].record_id, existing.record_id);
    assert_eq!(out.records[0].target, existing.target);
    assert!(!out.records[0].stage_audit.last().unwrap().passed);
}

#[test]
fn augment_reaches_eight_options() {
    let c = client(MockProvider::new(4));
    let qa = qa_record("g-s000/qa/genre", &["Jazz", "Classical", "Rock", "Spoken Word"], 3);
    let out = augment_options(&qa, &c, 9).unwrap();
    let options = out.options.clone().unwrap();
    assert!(options.len() >= MIN_OPTIONS, "{options:?}");
    for o in qa.options.as_ref().unwrap() {
        assert!(options.contains(o));
    }
    let mut lower: Vec<String> = options.iter().map(|o| o.to_lowercase()).collect();
    lower.sort();
    lower.dedup();
    assert_eq!(lower.len(), options.len());
    assert_eq!(out.correct_option(), Some("Spoken Word"));
    assert!(out.target.ends_with("Spoken Word"));
    assert_eq!(augment_options(&qa, &c, 9).unwrap(), out);
}

#[test]
fn augment_drops_duplicates_and_answer() {
    let mock = MockProvider::new(4).with_rule(MockRule::new(
        |r| r.template_id == OPTION_AUGMENTATION,
        |_, _| MockOutcome::Text("(E) jazz\n- Podcast intro\npodcast INTRO\nspoken word\n1. Radio drama\nSea shanty\nOpera aria\nChiptune".into()),
    ));
    let c = client(mock);
    let qa = qa_record("g/qa", &["Jazz", "Classical", "Rock", "Spoken Word"], 3);
    let out = augment_options(&qa, &c, 1).unwrap();
    let options = out.options.unwrap();
    let mut sorted = options.clone();
    sorted.sort();
    assert_eq!(sorted, ["Chiptune", "Classical", "Jazz", "Opera aria", "Podcast intro", "Radio drama", "Rock", "Sea shanty", "Spoken Word"]);
    assert_eq!(options[out.answer_index.unwrap()], "Spoken Word");
}

#[test]
fn quality_filter_rules() {
    let c = client(MockProvider::new(8));
    let ctx = StageContext::new(Some(&c), 8);
    let records: Vec<DatasetRecord> = (0..1000)
        .map(|i| {
            let text = if i % 10 == 3 { format!("caption {i} {PLANTED_REJECT}") } else { format!("caption {i}") };
            record(&format!("s{i:04}/caption"), RecordKind::Caption, &text, MusicMetadata::default())
        })
        .collect();
    let out = quality_filter(&records, &ctx).unwrap();
    assert_eq!(out.records.len(), 900);
    assert!(out.dropped.iter().all(|d| records.iter().any(|r| r.record_id == d.record_id && r.target.contains(PLANTED_REJECT))));

    let clean: Vec<DatasetRecord> = records.iter().filter(|r| !r.target.contains(PLANTED_REJECT)).cloned().collect();
    let out = quality_filter(&clean, &ctx).unwrap();
    let stripped: Vec<DatasetRecord> = out
        .records
        .into_iter()
        .map(|mut r| {
            assert_eq!(r.stage_audit.pop().unwrap().stage, "filter");
            r
        })
        .collect();
    assert_eq!(stripped, clean);
}

#[test]
fn malformed_verdict_keeps_and_flags() {
    let mock = MockProvider::new(0).with_rule(MockRule::new(|r| r.template_id == QUALITY_CHECK, |_, _| MockOutcome::Text("maybe".into())));
    let c = client(mock);
    let ctx = StageContext::new(Some(&c), 0);
    let r = record("s/caption", RecordKind::Caption, "text", MusicMetadata::default());
    let out = quality_filter(&[r], &ctx).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.flagged, vec!["s/caption".to_owned()]);
}

#[test]
fn hard_examples_are_those_with_many_options() {
    let c = client(MockProvider::new(8));
    let ctx = StageContext::new(Some(&c), 8);
    let mut records = Vec::new();
    for n in 2..=10usize {
        let opts: Vec<String> = (0..n).map(|i| format!("option {i}")).collect();
        let refs: Vec<&str> = opts.iter().map(String::as_str).collect();
        records.push(qa_record(&format!("q{n:02}"), &refs, 0));
    }
    let out = select_hard_examples(&records, &ctx).unwrap();
    let kept: Vec<usize> = out.records.iter().map(|r| r.options.as_ref().unwrap().len()).collect();
    assert_eq!(kept, vec![7, 8, 9, 10]);
    assert_eq!(select_hard_examples(&records, &ctx).unwrap(), out);
    assert!(select_hard_examples(&[], &ctx).unwrap().records.is_empty());
}

#[test]
fn disposition_boundary() {
    let cases = [(0.0, Disposition::Kept), (0.30, Disposition::Rewritten), (0.300001, Disposition::Discarded), (1.0, Disposition::Discarded)];
    for (f, d) in cases {
        assert_eq!(Disposition::from_fraction(f), d, "{f}");
    }
    assert_eq!(Disposition::from_counts(4, 10), Disposition::Discarded);
    assert_eq!(Disposition::from_counts(3, 10), Disposition::Rewritten);
    assert_eq!(Disposition::from_counts(0, 10), Disposition::Kept);
    for total in 1..200 {
        for failing in 0..=total {
            assert_eq!(Disposition::from_counts(failing, total), Disposition::from_fraction(failing as f64 / total as f64));
        }
    }
}

#[test]
fn steps_split_on_sentences_and_lines() {
    assert_eq!(
        split_steps("The tempo is 120.5 BPM. Is it major? Yes!\nNext line\n\n  last"),
        vec!["The tempo is 120.5 BPM.", "Is it major?", "Yes!", "Next line", "last"]
    );
    assert!(split_steps("  \n ").is_empty());
}

fn scripted_chain(flawed: usize) -> String {
    (0..10)
        .map(|i| if i < flawed { format!("Step {i} is wrong {PLANTED_FLAW}.") } else { format!("Step {i} holds.") })
        .collect::<Vec<_>>()
        .join(" ")
}

fn think_with(flawed: usize) -> CotRecord {
    let mock = MockProvider::new(0).with_rule(MockRule::new(
        |r| r.template_id == COT_CAPTION,
        move |_, _| MockOutcome::Text(scripted_chain(flawed)),
    ));
    let c = client(mock);
    let r = record("s/caption", RecordKind::Caption, "A caption.", meta(120.0, "C major"));
    think_one(&r, &c).unwrap()
}

#[test]
fn think_dispositions_follow_fail_fraction() {
    let discarded = think_with(4);
    assert_eq!(discarded.disposition, Disposition::Discarded);
    assert_eq!(discarded.fail_fraction(), 0.4);

    let rewritten = think_with(3);
    assert_eq!(rewritten.disposition, Disposition::Rewritten);
    assert_eq!(rewritten.steps.len(), rewritten.step_verdicts.len());
    let think = rewritten.base.think.as_deref().unwrap();
    assert!(!think.contains(PLANTED_FLAW));
    assert_eq!(split_steps(think).len(), 10);

    let kept = think_with(0);
    assert_eq!(kept.disposition, Disposition::Kept);
    assert_eq!(kept.base.think.as_deref(), Some(scripted_chain(0).as_str()));
    assert_eq!(kept.base.kind, RecordKind::CotCaption);
    assert!(kept.base.prompt.ends_with(SFT_INSTRUCTION));
    assert_eq!(kept.base.record_id, "s/caption/think");
}

#[test]
fn failed_rewrite_removes_step() {
    let mock = MockProvider::new(0)
        .with_rule(MockRule::new(|r| r.template_id == COT_CAPTION, |_, _| MockOutcome::Text(scripted_chain(2))))
        .with_rule(MockRule::new(|r| r.template_id == STEP_REWRITE, |r, _| MockOutcome::Text(r.variables["step"].clone())));
    let c = client(mock);
    let r = record("s/caption", RecordKind::Caption, "A caption.", meta(120.0, "C major"));
    let cot = think_one(&r, &c).unwrap();
    assert_eq!(cot.disposition, Disposition::Rewritten);
    assert_eq!(split_steps(cot.base.think.as_deref().unwrap()).len(), 8);
}

fn write_corpus(dir: &std::path::Path) -> std::path::PathBuf {
    let clips = [
        ("alpha", 120.0, [ChordLabel::Major(0), ChordLabel::Major(5), ChordLabel::Major(7), ChordLabel::Major(0)]),
        ("beta", 96.0, [ChordLabel::Minor(9), ChordLabel::Major(5), ChordLabel::Minor(4), ChordLabel::Minor(9)]),
    ];
    let mut entries = Vec::new();
    for (id, bpm, chords) in clips {
        let wav = encode_wav_pcm16(&synthetic_clip(bpm, &chords, 40.0));
        std::fs::write(dir.join(format!("{id}.wav")), wav).unwrap();
        entries.push(CorpusClip { clip_id: id.into(), path: format!("{id}.wav") });
    }
    let path = dir.join("corpus.json");
    std::fs::write(&path, serde_json::to_vec(&CorpusManifest { clips: entries }).unwrap()).unwrap();
    path
}

fn tree(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn job_end_to_end_is_reproducible_and_idempotent() {
    let corpus_dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(corpus_dir.path());
    let run = |out: &std::path::Path, mock: Arc<MockProvider>| {
        let mut job = PipelineJob::new(out);
        job.corpus_manifest = Some(corpus.clone());
        job.seed = 11;
        job.workers = 3;
        run_job(&job, &shared(mock)).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report = run(a.path(), Arc::new(MockProvider::new(11)));
    run(b.path(), Arc::new(MockProvider::new(11)));
    let first = tree(a.path());
    assert_eq!(first, tree(b.path()));

    assert_eq!(report.stages[0].outputs, 2, "alpha and beta each yield one 30 s window plus a dropped tail");
    assert_eq!(report.stages[2].outputs, 12);
    assert!(report.mean_caption_words.unwrap() > 0.0);
    let think = read_shards(&a.path().join("think/manifest.json")).unwrap();
    for r in &think {
        assert!(r.kind.is_cot());
        assert!(["alpha-s000", "beta-s000"].contains(&r.segment_id()));
    }

    let mock = Arc::new(MockProvider::unavailable());
    run(a.path(), mock.clone());
    assert_eq!(mock.calls(), 0);
    assert_eq!(tree(a.path()), first);
}

#[test]
fn job_validation() {
    let mut job = PipelineJob::new("out");
    job.stages = vec![Stage::Create, Stage::Synthesize];
    assert_eq!(job.validate().unwrap_err().class_name(), "ConfigError");
    job.stages = vec![Stage::Synthesize];
    assert!(job.validate().is_err(), "corpus required");
    job.stages = vec![Stage::Filter, Stage::Think];
    assert!(job.validate().is_ok());
    assert_eq!(Stage::parse("think"), Some(Stage::Think));
    assert_eq!(Stage::parse("rewrite"), None);
}
