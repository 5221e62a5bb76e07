//! Audio and metadata ingestion: WAV I/O, manifests, trial lists, and a
//! deterministic synthetic corpus generator for desk-scale experiments.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Result<Gender> {
        match s {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            "unknown" => Ok(Gender::Unknown),
            other => Err(Error::InvalidGender(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub speaker_id: String,
    pub gender: Gender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    NonTarget,
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub label: TrialLabel,
    pub enroll_utt: String,
    pub test_utt: String,
}

/// Mono waveform, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct WaveBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

pub fn load_wav(path: &Path) -> Result<WaveBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels {
            path: path.to_path_buf(),
            got: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate {
            path: path.to_path_buf(),
            got: spec.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    Ok(WaveBuffer {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

pub fn write_wav(path: &Path, wave: &WaveBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

/// Parse a manifest file. CSV with header `utt_id,path,speaker_id,gender`,
/// or JSONL with the same keys when the file extension is `.jsonl`.
pub fn parse_manifest(path: &Path) -> Result<Vec<UtteranceManifestEntry>> {
    let entries = if path.extension().is_some_and(|e| e == "jsonl") {
        parse_manifest_jsonl(path)?
    } else {
        parse_manifest_csv(path)?
    };
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.utt_id.clone()) {
            return Err(Error::DuplicateUttId(e.utt_id.clone()));
        }
    }
    Ok(entries)
}

fn parse_manifest_csv(path: &Path) -> Result<Vec<UtteranceManifestEntry>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let rec = rec.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line,
                reason: format!("expected 4 fields, got {}", rec.len()),
            });
        }
        let field = |idx: usize, name: &str| -> Result<String> {
            let v = rec.get(idx).unwrap_or("").trim();
            if v.is_empty() {
                Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("missing field '{name}'"),
                })
            } else {
                Ok(v.to_string())
            }
        };
        entries.push(UtteranceManifestEntry {
            utt_id: field(0, "utt_id")?,
            path: PathBuf::from(field(1, "path")?),
            speaker_id: field(2, "speaker_id")?,
            gender: Gender::parse(&field(3, "gender")?)?,
        });
    }
    Ok(entries)
}

fn parse_manifest_jsonl(path: &Path) -> Result<Vec<UtteranceManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: UtteranceManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[UtteranceManifestEntry]) -> Result<()> {
    let mut out = String::from("utt_id,path,speaker_id,gender\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.utt_id,
            e.path.display(),
            e.speaker_id,
            e.gender.as_str()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trial list: `label enroll test` per line, label 1 (target) or 0 (nontarget).
pub fn parse_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::TrialFile {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let label = match parts[0] {
            "1" => TrialLabel::Target,
            "0" => TrialLabel::NonTarget,
            other => {
                return Err(Error::TrialFile {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("invalid label '{other}'"),
                })
            }
        };
        trials.push(TrialRecord {
            label,
            enroll_utt: parts[1].to_string(),
            test_utt: parts[2].to_string(),
        });
    }
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in trials {
        let label = match t.label {
            TrialLabel::Target => 1,
            TrialLabel::NonTarget => 0,
        };
        writeln!(file, "{} {} {}", label, t.enroll_utt, t.test_utt)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// All-pairs trial list over a manifest: same-speaker pairs are targets,
/// cross-speaker pairs nontargets.
pub fn make_trials(entries: &[UtteranceManifestEntry]) -> Vec<TrialRecord> {
    let mut trials = Vec::new();
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let label = if entries[i].speaker_id == entries[j].speaker_id {
                TrialLabel::Target
            } else {
                TrialLabel::NonTarget
            };
            trials.push(TrialRecord {
                label,
                enroll_utt: entries[i].utt_id.clone(),
                test_utt: entries[j].utt_id.clone(),
            });
        }
    }
    trials
}

/// Per-speaker recipe for the synthetic corpus: a pitch and a bank of
/// resonant filters applied to seeded noise.
struct SpeakerRecipe {
    f0: f64,
    formants: Vec<(f64, f64, f64)>, // (center Hz, radius, gain)
}

fn speaker_recipe(seed: u64, speaker: usize, gender: Gender) -> SpeakerRecipe {
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 0xA5EED, speaker as u64, 0));
    let f0 = match gender {
        Gender::Female => rng.gen_range(170.0..250.0),
        _ => rng.gen_range(85.0..150.0),
    };
    let mut formants = Vec::new();
    let bands = [(250.0, 850.0), (900.0, 2300.0), (2400.0, 3500.0)];
    for (lo, hi) in bands {
        let center = rng.gen_range(lo..hi);
        let radius = rng.gen_range(0.94..0.985);
        let gain = rng.gen_range(0.5..1.0);
        formants.push((center, radius, gain));
    }
    SpeakerRecipe { f0, formants }
}

fn mix_seed(seed: u64, salt: u64, a: u64, b: u64) -> u64 {
    // splitmix64-style mixing so per-utterance streams are independent
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(salt)
        .wrapping_add(a.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(b.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn resonator(input: &[f64], center_hz: f64, radius: f64, sample_rate: f64) -> Vec<f64> {
    let omega = 2.0 * std::f64::consts::PI * center_hz / sample_rate;
    let a1 = 2.0 * radius * omega.cos();
    let a2 = -radius * radius;
    let mut y = vec![0.0; input.len()];
    let mut y1 = 0.0;
    let mut y2 = 0.0;
    for (n, &x) in input.iter().enumerate() {
        let v = x + a1 * y1 + a2 * y2;
        y[n] = v;
        y2 = y1;
        y1 = v;
    }
    y
}

fn synth_utterance(recipe: &SpeakerRecipe, rng: &mut ChaCha20Rng, n_samples: usize) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    // glottal-like excitation: impulse train at f0 with jitter, plus noise
    let mut excitation = vec![0.0f64; n_samples];
    let mut next_pulse = 0.0f64;
    while (next_pulse as usize) < n_samples {
        excitation[next_pulse as usize] = 1.0;
        let jitter: f64 = rng.gen_range(0.97..1.03);
        next_pulse += sr / (recipe.f0 * jitter);
    }
    for e in excitation.iter_mut() {
        *e += rng.gen_range(-0.05..0.05);
    }
    let mut out = vec![0.0f64; n_samples];
    for &(center, radius, gain) in &recipe.formants {
        let filtered = resonator(&excitation, center, radius, sr);
        for (o, f) in out.iter_mut().zip(&filtered) {
            *o += gain * f;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
    out.iter().map(|&v| (0.5 * v / peak) as f32).collect()
}

/// Generate a deterministic synthetic corpus under `out_dir`. Returns the
/// manifest entries in (speaker, utterance) order. Half the speakers are
/// labeled male, half female.
pub fn synth_corpus(
    out_dir: &Path,
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<Vec<UtteranceManifestEntry>> {
    if n_speakers < 2 {
        return Err(Error::Config("synth_corpus needs n_speakers >= 2".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for spk in 0..n_speakers {
        let gender = if spk < n_speakers / 2 {
            Gender::Male
        } else {
            Gender::Female
        };
        let recipe = speaker_recipe(seed, spk, gender);
        let speaker_id = format!("spk{spk:03}");
        for utt in 0..utts_per_speaker {
            let mut rng =
                ChaCha20Rng::seed_from_u64(mix_seed(seed, 0x07717, spk as u64, utt as u64));
            // 2.6 .. 3.4 s
            let n_samples = rng.gen_range(41_600..54_400);
            let samples = synth_utterance(&recipe, &mut rng, n_samples);
            let utt_id = format!("{speaker_id}_u{utt:03}");
            let path = out_dir.join(format!("{utt_id}.wav"));
            write_wav(
                &path,
                &WaveBuffer {
                    samples,
                    sample_rate: SAMPLE_RATE,
                },
            )?;
            entries.push(UtteranceManifestEntry {
                utt_id,
                path,
                speaker_id: speaker_id.clone(),
                gender,
            });
        }
    }
    Ok(entries)
}

/// Split a manifest into train/eval, holding out the last `eval_per_speaker`
/// utterances of each speaker.
pub fn split_manifest(
    entries: &[UtteranceManifestEntry],
    eval_per_speaker: usize,
) -> (Vec<UtteranceManifestEntry>, Vec<UtteranceManifestEntry>) {
    use std::collections::HashMap;
    let mut per_speaker: HashMap<&str, usize> = HashMap::new();
    for e in entries {
        *per_speaker.entry(e.speaker_id.as_str()).or_default() += 1;
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for e in entries {
        let idx = seen.entry(e.speaker_id.clone()).or_default();
        let total = per_speaker[e.speaker_id.as_str()];
        if *idx + eval_per_speaker >= total {
            eval.push(e.clone());
        } else {
            train.push(e.clone());
        }
        *idx += 1;
    }
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pcm16_scaling() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 16384, -32768] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_wav(&path).unwrap();
        assert_eq!(wave.samples, vec![0.0, 0.5, -1.0]);
    }

    #[test]
    fn empty_wav_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        hound::WavWriter::create(&path, spec).unwrap().finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::EmptyAudio(_))));
    }

    #[test]
    fn wrong_rate_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_wav(&path),
            Err(Error::UnsupportedSampleRate { got: 8000, .. })
        ));
    }

    #[test]
    fn wav_roundtrip_identity_on_pcm16() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let samples: Vec<f32> = (0..100).map(|i| ((i * 331 % 65536) - 32768) as f32 / 32768.0).collect();
        write_wav(&path, &WaveBuffer { samples: samples.clone(), sample_rate: 16_000 }).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn manifest_roundtrip_and_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "utt_id,path,speaker_id,gender\nu1,/a/u1.wav,s1,male\nu2,/a/u2.wav,s2,female\n",
        )
        .unwrap();
        let entries = parse_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].utt_id, "u1");
        assert_eq!(entries[1].gender, Gender::Female);
    }

    #[test]
    fn manifest_duplicate_id_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "utt_id,path,speaker_id,gender\nu1,/a/u1.wav,s1,male\nu1,/a/u2.wav,s2,female\n",
        )
        .unwrap();
        match parse_manifest(&path) {
            Err(Error::DuplicateUttId(id)) => assert_eq!(id, "u1"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_bad_gender_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "utt_id,path,speaker_id,gender\nu1,/a/u1.wav,s1,x\n",
        )
        .unwrap();
        assert!(matches!(parse_manifest(&path), Err(Error::InvalidGender(_))));
    }

    #[test]
    fn synth_corpus_deterministic() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let ea = synth_corpus(&a, 4, 3, 7).unwrap();
        let eb = synth_corpus(&b, 4, 3, 7).unwrap();
        assert_eq!(ea.len(), 12);
        for (x, y) in ea.iter().zip(&eb) {
            let bx = std::fs::read(&x.path).unwrap();
            let by = std::fs::read(&y.path).unwrap();
            assert_eq!(bx, by, "WAVs differ for {}", x.utt_id);
        }
    }

    #[test]
    fn synth_corpus_seed_sensitivity() {
        let dir = tempdir().unwrap();
        let ea = synth_corpus(&dir.path().join("a"), 4, 3, 7).unwrap();
        let eb = synth_corpus(&dir.path().join("b"), 4, 3, 8).unwrap();
        let bx = std::fs::read(&ea[0].path).unwrap();
        let by = std::fs::read(&eb[0].path).unwrap();
        assert_ne!(bx, by);
    }

    #[test]
    fn synth_corpus_shape_and_genders() {
        let dir = tempdir().unwrap();
        let entries = synth_corpus(dir.path(), 2, 2, 1).unwrap();
        assert_eq!(entries.len(), 4);
        let speakers: HashSet<_> = entries.iter().map(|e| e.speaker_id.clone()).collect();
        assert_eq!(speakers.len(), 2);
        let genders: HashSet<_> = entries.iter().map(|e| e.gender).collect();
        assert_eq!(genders, HashSet::from([Gender::Male, Gender::Female]));
    }

    #[test]
    fn trials_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let trials = vec![
            TrialRecord { label: TrialLabel::Target, enroll_utt: "a".into(), test_utt: "b".into() },
            TrialRecord { label: TrialLabel::NonTarget, enroll_utt: "a".into(), test_utt: "c".into() },
        ];
        write_trials(&path, &trials).unwrap();
        let back = parse_trials(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].label, TrialLabel::Target);
        assert_eq!(back[1].test_utt, "c");
    }

    #[test]
    fn split_holds_out_last_utts() {
        let dir = tempdir().unwrap();
        let entries = synth_corpus(dir.path(), 4, 5, 3).unwrap();
        let (train, eval) = split_manifest(&entries, 2);
        assert_eq!(train.len(), 12);
        assert_eq!(eval.len(), 8);
    }
}
