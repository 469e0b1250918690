//! Manifests, WAV input/output, validation splits and a synthetic corpus in
//! which every character is a short frequency sweep.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch_assembler::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const MIN_SAMPLES: usize = 13_280;
pub const MAX_SAMPLES: usize = 480_000;

/// Output classes for character recognition: blank, `a`-`z`, space, apostrophe.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz '";
pub const BLANK: usize = 0;

pub fn num_classes() -> usize {
    ALPHABET.len() + 1
}

/// Class index of a character, or `None` outside the alphabet.
pub fn char_to_class(c: char) -> Option<usize> {
    ALPHABET.find(c).map(|i| i + 1)
}

pub fn class_to_char(class: usize) -> Option<char> {
    class.checked_sub(1).and_then(|i| ALPHABET.chars().nth(i))
}

pub fn encode_transcript(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            char_to_class(c).ok_or_else(|| {
                Error::InvalidArgument(format!("character {c:?} is outside the alphabet"))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub path: PathBuf,
    pub num_samples: usize,
    pub transcript: Option<String>,
}

impl Utterance {
    pub fn seconds(&self) -> f64 {
        self.num_samples as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub subset: String,
    pub entries: Vec<Utterance>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.entries.iter().map(|u| u.num_samples).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.entries.iter().map(Utterance::seconds).sum()
    }

    /// Decode every referenced file.
    pub fn load_audio(&self) -> Result<Vec<Vec<f64>>> {
        self.entries.iter().map(|u| read_wav(&u.path)).collect()
    }
}

/// Read a tab-separated manifest: `id, path, num_samples, transcript`.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut ids = HashSet::new();
    let mut entries = Vec::new();
    for (n, row) in text.lines().enumerate() {
        let line = n + 1;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(line, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(bad(line, "empty id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(bad(line, format!("duplicate id {id}")));
        }
        let num_samples: usize = fields[2]
            .parse()
            .map_err(|_| bad(line, format!("num_samples {:?} is not an integer", fields[2])))?;
        if !(MIN_SAMPLES..=MAX_SAMPLES).contains(&num_samples) {
            return Err(bad(
                line,
                format!(
                    "{num_samples} samples is outside the accepted range of {MIN_SAMPLES} (0.83 s) to {MAX_SAMPLES} (30 s)"
                ),
            ));
        }
        let transcript = match fields[3] {
            "" => None,
            t => {
                encode_transcript(t).map_err(|e| bad(line, e.to_string()))?;
                Some(t.to_string())
            }
        };
        let p = Path::new(fields[1]);
        let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let header = hound::WavReader::open(&p).map_err(|e| bad(line, format!("{}: {e}", p.display())))?;
        if header.duration() as usize != num_samples {
            return Err(bad(
                line,
                format!("{} holds {} samples, manifest says {num_samples}", p.display(), header.duration()),
            ));
        }
        entries.push(Utterance {
            id,
            path: p,
            num_samples,
            transcript,
        });
    }
    let subset = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Manifest { subset, entries })
}

/// Write a manifest; paths are stored as given.
pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut out = String::new();
    for u in &m.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            u.id,
            u.path.display(),
            u.num_samples,
            u.transcript.as_deref().unwrap_or("")
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mono 16 kHz PCM16 samples scaled to `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE as u32 || spec.bits_per_sample != 16 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected mono 16 kHz PCM16, found {} channels at {} Hz with {} bits",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample
        )));
    }
    r.samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(wav_err))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Randomly hold out `round(fraction * N)` utterances for validation.
pub fn split_validation(m: &Manifest, fraction: f64, rng: &mut Rng) -> Result<(Manifest, Manifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = m.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 && n > 0 {
        log::warn!("validation split of {fraction} over {n} utterances is empty");
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let pick = |want: bool, suffix: &str| Manifest {
        subset: format!("{}{suffix}", m.subset),
        entries: m
            .entries
            .iter()
            .zip(&is_val)
            .filter(|(_, &v)| v == want)
            .map(|(u, _)| u.clone())
            .collect(),
    };
    Ok((pick(false, ""), pick(true, "-val")))
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Characters that may appear in transcripts; space renders as silence.
    pub vocab: String,
    pub char_seconds: f64,
    /// Probability that a character is followed by its fixed successor.
    pub successor_prob: f64,
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, count: usize, min_seconds: f64, max_seconds: f64, vocab: &str) -> Self {
        SynthConfig {
            seed,
            count,
            min_seconds,
            max_seconds,
            vocab: vocab.to_string(),
            char_seconds: 0.1,
            successor_prob: 0.8,
            noise: 0.02,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let (lo, hi) = (seconds_of(MIN_SAMPLES), seconds_of(MAX_SAMPLES));
        if !(self.min_seconds >= lo && self.min_seconds <= self.max_seconds && self.max_seconds <= hi) {
            errs.push(format!(
                "durations must satisfy {lo} <= min <= max <= {hi}, got {} and {}",
                self.min_seconds, self.max_seconds
            ));
        }
        if self.vocab.is_empty() {
            errs.push("vocabulary is empty".into());
        } else if self.vocab.chars().all(|c| c == ' ') {
            errs.push("vocabulary needs at least one non-space character".into());
        }
        if let Some(c) = self.vocab.chars().find(|&c| char_to_class(c).is_none()) {
            errs.push(format!("vocabulary character {c:?} is outside the alphabet"));
        }
        if !(self.char_seconds > 0.0 && self.char_seconds <= self.min_seconds) {
            errs.push("char_seconds must be positive and at most min_seconds".into());
        }
        if !(0.0..=1.0).contains(&self.successor_prob) {
            errs.push("successor_prob must lie in [0, 1]".into());
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            errs.push("noise must be non-negative".into());
        }
        errs
    }

    fn letters(&self) -> Vec<char> {
        let mut seen = Vec::new();
        for c in self.vocab.chars() {
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen
    }

    fn char_samples(&self) -> usize {
        (self.char_seconds * SAMPLE_RATE as f64).round() as usize
    }

    /// Start and end frequency of the sweep for `c`; `None` for space.
    pub fn sweep(&self, c: char) -> Option<(f64, f64)> {
        if c == ' ' {
            return None;
        }
        let i = self.letters().into_iter().filter(|&x| x != ' ').position(|x| x == c)?;
        let start = 200.0 + 180.0 * i as f64;
        Some((start, start + 150.0))
    }
}

fn seconds_of(samples: usize) -> f64 {
    samples as f64 / SAMPLE_RATE as f64
}

/// Utterance lengths in samples, uniform over the configured duration range.
pub fn synth_lengths(cfg: &SynthConfig, rng: &mut Rng) -> Vec<usize> {
    (0..cfg.count)
        .map(|_| {
            let s = rng.uniform_range(cfg.min_seconds, cfg.max_seconds);
            ((s * SAMPLE_RATE as f64).round() as usize).clamp(MIN_SAMPLES, MAX_SAMPLES)
        })
        .collect()
}

/// Transcript of `len` characters from a first-order chain in which each
/// character has one favoured successor.
pub fn synth_transcript(cfg: &SynthConfig, len: usize, rng: &mut Rng) -> String {
    let letters = cfg.letters();
    let n = letters.len();
    // Favoured successor: the next character in vocabulary order.
    let mut cur = rng.below(n);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(letters[cur]);
        cur = if rng.uniform() < cfg.successor_prob {
            (cur + 1) % n
        } else {
            rng.below(n)
        };
    }
    let text: String = out.into_iter().collect();
    let trimmed = text.trim();
    let trimmed: String = trimmed.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ");
    if trimmed.is_empty() {
        letters.iter().find(|&&c| c != ' ').map(|c| c.to_string()).expect("validated")
    } else {
        trimmed
    }
}

/// Render `text` into `samples` samples; unused tail samples carry only noise.
pub fn render(cfg: &SynthConfig, text: &str, samples: usize, rng: &mut Rng) -> Vec<f64> {
    let per = cfg.char_samples();
    let fade = (0.005 * SAMPLE_RATE as f64) as usize;
    let mut out: Vec<f64> = (0..samples).map(|_| cfg.noise * rng.normal()).collect();
    for (k, c) in text.chars().enumerate() {
        let Some((f0, f1)) = cfg.sweep(c) else {
            continue;
        };
        let start = k * per;
        if start >= samples {
            break;
        }
        let len = per.min(samples - start);
        let dur = per as f64 / SAMPLE_RATE as f64;
        for j in 0..len {
            let t = j as f64 / SAMPLE_RATE as f64;
            let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
            let ramp = (j.min(len - 1 - j) as f64 / fade as f64).min(1.0);
            out[start + j] += 0.5 * ramp * phase.sin();
        }
    }
    out
}

/// Generate `cfg.count` utterances into `dir` and write `dir/manifest.tsv`.
pub fn synth_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = Rng::new(cfg.seed);
    let lengths = synth_lengths(cfg, &mut rng);
    let per = cfg.char_samples();
    let mut entries = Vec::with_capacity(cfg.count);
    for (i, &n) in lengths.iter().enumerate() {
        let id = format!("synth-{i:05}");
        let text = synth_transcript(cfg, (n / per).max(1), &mut rng);
        let audio = render(cfg, &text, n, &mut rng);
        let file = format!("{id}.wav");
        write_wav(&dir.join(&file), &audio)?;
        entries.push(Utterance {
            id,
            path: PathBuf::from(file),
            num_samples: n,
            transcript: Some(text),
        });
    }
    let m = Manifest {
        subset: "synth".into(),
        entries,
    };
    write_manifest(&dir.join("manifest.tsv"), &m)?;
    load_manifest(&dir.join("manifest.tsv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn write_tone(dir: &Path, name: &str, n: usize) -> PathBuf {
        let p = dir.join(name);
        write_wav(&p, &vec![0.25; n]).unwrap();
        p
    }

    #[test]
    fn manifest_rows_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        for (i, n) in [16000, 20000, 13280].iter().enumerate() {
            write_tone(dir.path(), &format!("{i}.wav"), *n);
        }
        let p = dir.path().join("train.tsv");
        fs::write(&p, "a\t0.wav\t16000\thello\nb\t1.wav\t20000\t\nc\t2.wav\t13280\tit's\n").unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.subset, "train");
        assert_eq!(m.entries[1].transcript, None);

        write_tone(dir.path(), "short.wav", 1000);
        fs::write(&p, "a\t0.wav\t16000\t\nz\tshort.wav\t1000\t\n").unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("0.83 s"), "{err}");

        fs::write(&p, "a\t0.wav\t16000\n").unwrap();
        assert!(matches!(load_manifest(&p).unwrap_err(), Error::Manifest { line: 1, .. }));

        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            subset: "m".into(),
            entries: (0..4)
                .map(|i| Utterance {
                    id: format!("u{i}"),
                    path: write_tone(dir.path(), &format!("u{i}.wav"), 14000 + i * 100),
                    num_samples: 14000 + i * 100,
                    transcript: (i % 2 == 0).then(|| "ab c".to_string()),
                })
                .collect(),
        };
        let p = dir.path().join("m.tsv");
        write_manifest(&p, &m).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn wav_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.01).sin() * 0.9).collect();
        write_wav(&p, &x).unwrap();
        let y = read_wav(&p).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    fn fake(n: usize) -> Manifest {
        Manifest {
            subset: "s".into(),
            entries: (0..n)
                .map(|i| Utterance {
                    id: format!("u{i}"),
                    path: PathBuf::from("x.wav"),
                    num_samples: MIN_SAMPLES,
                    transcript: None,
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split_validation(&fake(100), 0.05, &mut Rng::new(0)).unwrap();
        assert_eq!((t.len(), v.len()), (95, 5));
        let (t, v) = split_validation(&fake(10), 0.01, &mut Rng::new(0)).unwrap();
        assert_eq!((t.len(), v.len()), (10, 0));
        let (t, v) = split_validation(&fake(0), 0.05, &mut Rng::new(0)).unwrap();
        assert!(t.is_empty() && v.is_empty());
        assert!(split_validation(&fake(3), 1.0, &mut Rng::new(0)).is_err());
        let a = split_validation(&fake(50), 0.2, &mut Rng::new(9)).unwrap();
        let b = split_validation(&fake(50), 0.2, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_corpus_is_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(1, 10, 0.9, 1.5, "abcd ");
        let m1 = synth_corpus(&cfg, d1.path()).unwrap();
        let m2 = synth_corpus(&cfg, d2.path()).unwrap();
        assert_eq!(m1.len(), 10);
        for (a, b) in m1.entries.iter().zip(&m2.entries) {
            assert!((MIN_SAMPLES..=MAX_SAMPLES).contains(&a.num_samples));
            assert!(a.seconds() >= 0.9 - 1e-4 && a.seconds() <= 1.5 + 1e-4);
            assert_eq!(a.transcript, b.transcript);
            assert_eq!(fs::read(&a.path).unwrap(), fs::read(&b.path).unwrap());
        }
        let empty = SynthConfig::new(1, 1, 0.9, 1.5, "");
        assert!(synth_corpus(&empty, d1.path()).is_err());
    }

    /// Frequency of the largest magnitude in a direct DFT over 10 Hz bins.
    fn dominant_frequency(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        (2..800)
            .map(|k| {
                let f = k as f64 * 10.0;
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in x.iter().enumerate() {
                    let w = 2.0 * PI * f * j as f64 / SAMPLE_RATE as f64;
                    re += v * w.cos();
                    im -= v * w.sin();
                }
                (f, (re * re + im * im) / n)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn characters_have_distinct_spectral_peaks() {
        let cfg = SynthConfig::new(0, 1, 0.9, 1.0, "ab");
        let audio = render(&cfg, "ab", MIN_SAMPLES, &mut Rng::new(3));
        let per = cfg.char_samples();
        let fa = dominant_frequency(&audio[..per]);
        let fb = dominant_frequency(&audio[per..2 * per]);
        let (a0, a1) = cfg.sweep('a').unwrap();
        let (b0, b1) = cfg.sweep('b').unwrap();
        assert!(fa >= a0 - 20.0 && fa <= a1 + 20.0, "a peaks at {fa}");
        assert!(fb >= b0 - 20.0 && fb <= b1 + 20.0, "b peaks at {fb}");
        assert!(fb - fa > 100.0);
    }

    #[test]
    fn durations_are_uniform() {
        let cfg = SynthConfig::new(4, 1000, 0.83, 2.0, "ab");
        let mut secs: Vec<f64> = synth_lengths(&cfg, &mut Rng::new(cfg.seed))
            .iter()
            .map(|&n| n as f64 / SAMPLE_RATE as f64)
            .collect();
        secs.sort_by(f64::total_cmp);
        let n = secs.len() as f64;
        let d = secs
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let f = ((s - 0.83) / (2.0 - 0.83)).clamp(0.0, 1.0);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov-Smirnov critical value at the 1% level.
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
    }

    proptest! {
        #[test]
        fn split_partitions(n in 0usize..200, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let m = fake(n);
            let (t, v) = split_validation(&m, frac, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(v.len(), (frac * n as f64).round() as usize);
            let mut ids: Vec<_> = t.entries.iter().chain(&v.entries).map(|u| u.id.clone()).collect();
            ids.sort();
            let mut all: Vec<_> = m.entries.iter().map(|u| u.id.clone()).collect();
            all.sort();
            prop_assert_eq!(ids, all);
        }

        #[test]
        fn transcripts_stay_in_vocabulary(seed in any::<u64>(), len in 1usize..40) {
            let cfg = SynthConfig::new(seed, 1, 1.0, 2.0, "xyz '");
            let t = synth_transcript(&cfg, len, &mut Rng::new(seed));
            prop_assert!(!t.is_empty());
            prop_assert!(t.chars().all(|c| "xyz '".contains(c)));
            prop_assert_eq!(t.trim(), t.as_str());
        }
    }
}
