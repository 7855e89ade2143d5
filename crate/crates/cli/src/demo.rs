//! The bundled toy audio set: click tracks, scales, triad progressions and
//! one mixed "song", with generator labels alongside.

use std::path::Path;

use anyhow::{Context, Result};
use mfkit::audio::synth::{gain, mix, progression, scale, ClickTrack};
use mfkit::audio::{encode_wav_pcm16, AudioClip, ChordLabel, Mode, PITCH_CLASS_NAMES};
use serde_json::{json, Value};

pub const SAMPLE_RATE: u32 = 22_050;

struct Clip {
    id: String,
    audio: AudioClip,
    labels: Value,
}

fn chord_labels(chords: &[ChordLabel], chord_sec: f64) -> Value {
    chords
        .iter()
        .enumerate()
        .map(|(i, c)| json!({"label": c.to_string(), "start": i as f64 * chord_sec, "end": (i + 1) as f64 * chord_sec}))
        .collect()
}

fn clips() -> Vec<Clip> {
    let mut out = Vec::new();
    for bpm in [60.0, 90.0, 120.0, 150.0, 180.0] {
        out.push(Clip {
            id: format!("click_{bpm:03}"),
            audio: ClickTrack { sample_rate: SAMPLE_RATE, ..ClickTrack::new(bpm, 20.0) }.render(),
            labels: json!({"bpm": bpm}),
        });
    }
    for (tonic, mode) in [(0u8, Mode::Major), (9, Mode::Minor), (7, Mode::Major), (4, Mode::Minor)] {
        let name = format!("{} {}", PITCH_CLASS_NAMES[tonic as usize], mode);
        out.push(Clip {
            id: format!("scale_{}", name.replace(' ', "_").replace('#', "s").to_lowercase()),
            audio: scale(SAMPLE_RATE, 60 + tonic as i32, mode, 0.5),
            labels: json!({"key": name}),
        });
    }
    let progressions = [
        [ChordLabel::Major(0), ChordLabel::Major(5), ChordLabel::Major(7), ChordLabel::Major(0)],
        [ChordLabel::Minor(9), ChordLabel::Minor(2), ChordLabel::Major(4), ChordLabel::Minor(9)],
    ];
    for (i, chords) in progressions.iter().enumerate() {
        out.push(Clip {
            id: format!("triads_{}", i + 1),
            audio: progression(SAMPLE_RATE, chords, 2.0),
            labels: json!({"chords": chord_labels(chords, 2.0)}),
        });
    }
    // clicks pitched on C so they reinforce rather than blur the key
    let song_chords = [ChordLabel::Major(0), ChordLabel::Major(5), ChordLabel::Major(7), ChordLabel::Major(0)];
    let clicks = ClickTrack { sample_rate: SAMPLE_RATE, click_hz: 1046.5, ..ClickTrack::new(120.0, 36.0) }.render();
    out.push(Clip {
        id: "song_120_c_major".into(),
        audio: mix(&clicks, &gain(&progression(SAMPLE_RATE, &song_chords, 9.0), 0.5)),
        labels: json!({"bpm": 120.0, "key": "C major", "chords": chord_labels(&song_chords, 9.0)}),
    });
    out
}

/// Write every clip as 16-bit WAV plus `corpus.json` and `labels.json`.
pub fn write_demo_corpus(dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let clips = clips();
    let mut entries = Vec::new();
    let mut labels = serde_json::Map::new();
    for clip in &clips {
        let file = format!("{}.wav", clip.id);
        let path = dir.join(&file);
        std::fs::write(&path, encode_wav_pcm16(&clip.audio)).with_context(|| format!("writing {}", path.display()))?;
        entries.push(json!({"clip_id": clip.id, "path": file}));
        labels.insert(clip.id.clone(), clip.labels.clone());
    }
    let corpus = serde_json::to_string_pretty(&json!({"clips": entries}))? + "\n";
    std::fs::write(dir.join("corpus.json"), corpus)?;
    let labels = serde_json::to_string_pretty(&Value::Object(labels))? + "\n";
    std::fs::write(dir.join("labels.json"), labels)?;
    Ok(clips.len())
}
