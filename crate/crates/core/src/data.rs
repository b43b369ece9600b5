//! Dataset plumbing: tab-separated manifests, PCM WAV ingestion, the
//! binary raster container, dataset directories, and a synthetic
//! spike-pattern generator for desk-scale verification of the network and
//! trainer without any audio in the loop.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::neuron::SpikeRaster;
use crate::signal::DEFAULT_DT;
use crate::{Error, Result};

pub const EXPECTED_SAMPLE_RATE: u32 = 16_000;

/// Fraction of template spikes kept when a synthetic sample is drawn.
const TEMPLATE_KEEP_PROB: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    /// Clip duration in seconds; 0 when the manifest does not carry it.
    pub duration: f64,
}

/// Parse a manifest: one `path<TAB>label<TAB>split[<TAB>duration]` entry
/// per line. Entries whose file is missing are kept but reported in the
/// warning list.
pub fn load_manifest(path: &Path) -> Result<(Vec<ManifestEntry>, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 or 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let label: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad label '{}'", fields[1]),
        })?;
        let split = Split::parse(fields[2]).ok_or(Error::Parse {
            line: i + 1,
            msg: format!("unknown split '{}'", fields[2]),
        })?;
        let duration = if fields.len() == 4 {
            fields[3].parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad duration '{}'", fields[3]),
            })?
        } else {
            0.0
        };
        let entry_path = PathBuf::from(fields[0]);
        if !entry_path.exists() {
            warnings.push(format!("line {}: missing file {}", i + 1, fields[0]));
        }
        entries.push(ManifestEntry { path: entry_path, label, split, duration });
    }
    Ok((entries, warnings))
}

/// No split may share a path with another.
pub fn check_split_disjoint(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen: std::collections::HashMap<&Path, Split> = Default::default();
    for e in entries {
        if let Some(prev) = seen.insert(&e.path, e.split) {
            if prev != e.split {
                return Err(Error::InvalidInput(format!(
                    "{} appears in both {} and {}",
                    e.path.display(),
                    prev.as_str(),
                    e.split.as_str()
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// WAV I/O (PCM 16-bit mono at 16 kHz; anything else is rejected, never
// resampled)
// ---------------------------------------------------------------------------

fn rd_u16(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn rd_u32(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

/// Parse a WAV file from bytes; see [`read_wav`].
pub fn read_wav_bytes(bytes: &[u8]) -> Result<Waveform> {
    let fmt_err = |detail: String| Error::Format { what: "wav", detail };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(bytes, pos + 4) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fmt_err("chunk extends past end of file".into()));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err("fmt chunk too short".into()));
                }
                fmt = Some((
                    rd_u16(bytes, pos + 8),
                    rd_u16(bytes, pos + 10),
                    rd_u32(bytes, pos + 12),
                    rd_u16(bytes, pos + 22),
                ));
            }
            b"data" => data = Some(&bytes[pos + 8..body_end]),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (codec, channels, rate, bits) =
        fmt.ok_or_else(|| fmt_err("missing fmt chunk".into()))?;
    if codec != 1 {
        return Err(fmt_err(format!("codec {codec} unsupported, PCM required")));
    }
    if channels != 1 {
        return Err(fmt_err(format!("{channels} channels, mono required")));
    }
    if bits != 16 {
        return Err(fmt_err(format!("{bits}-bit samples, 16-bit required")));
    }
    if rate != EXPECTED_SAMPLE_RATE {
        return Err(fmt_err(format!(
            "sample rate {rate} Hz, {EXPECTED_SAMPLE_RATE} Hz required"
        )));
    }
    let data = data.ok_or_else(|| fmt_err("missing data chunk".into()))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

/// Read a mono 16-bit PCM WAV at 16 kHz, scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<Waveform> {
    read_wav_bytes(&fs::read(path)?)
}

/// Write a waveform as mono 16-bit PCM, clipping to full scale.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Raster container: magic "WSRAS1", u32 channels, u32 bins, f32 dt seconds,
// then channels x bins u16 counts row-major. Everything little-endian.
// ---------------------------------------------------------------------------

const RASTER_MAGIC: &[u8; 6] = b"WSRAS1";

pub fn raster_to_bytes(r: &SpikeRaster) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(18 + r.counts().len() * 2);
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&(r.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(r.bins() as u32).to_le_bytes());
    out.extend_from_slice(&(r.dt as f32).to_le_bytes());
    for &c in r.counts() {
        if c > u16::MAX as u32 {
            return Err(Error::Format {
                what: "raster",
                detail: format!("count {c} exceeds the u16 container range"),
            });
        }
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<SpikeRaster> {
    let fmt_err = |detail: String| Error::Format { what: "raster", detail };
    if bytes.len() < 18 || &bytes[0..6] != RASTER_MAGIC {
        return Err(fmt_err("missing WSRAS1 magic".into()));
    }
    let channels = rd_u32(bytes, 6) as usize;
    let bins = rd_u32(bytes, 10) as usize;
    let dt = f32::from_le_bytes([bytes[14], bytes[15], bytes[16], bytes[17]]) as f64;
    let expect = 18 + channels * bins * 2;
    if bytes.len() != expect {
        return Err(fmt_err(format!(
            "payload is {} bytes, {channels}x{bins} needs {expect}",
            bytes.len()
        )));
    }
    let counts: Vec<u32> = bytes[18..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    SpikeRaster::from_counts(channels, bins, counts, dt)
}

pub fn write_raster(path: &Path, r: &SpikeRaster) -> Result<()> {
    fs::write(path, raster_to_bytes(r)?)?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<SpikeRaster> {
    raster_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Synthetic spike-pattern datasets
// ---------------------------------------------------------------------------

/// Generator settings for the synthetic keyword task. Each class gets a
/// fixed random spatio-temporal template; samples are jittered, thinned
/// copies embedded in Poisson background noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub channels: usize,
    pub bins: usize,
    /// Probability that a template cell is active.
    pub density: f64,
    /// Max temporal displacement of a template spike, bins.
    pub jitter: u32,
    /// Poisson background rate, spikes per channel-bin.
    pub noise_rate: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            channels: 64,
            bins: 100,
            density: 0.08,
            jitter: 2,
            noise_rate: 0.02,
            n_per_class: 200,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "density must be in (0,1), got {}",
                self.density
            )));
        }
        if !(self.noise_rate >= 0.0) {
            return Err(Error::InvalidParameter("noise_rate must be >= 0".into()));
        }
        if self.n_classes < 2 || self.channels == 0 || self.bins == 0 || self.n_per_class == 0 {
            return Err(Error::InvalidParameter(
                "n_classes >= 2 and channels/bins/n_per_class >= 1 required".into(),
            ));
        }
        Ok(())
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (line, key, value) in crate::net::parse_kv(text)? {
            let bad = || Error::Parse {
                line,
                msg: format!("bad value '{value}' for {key}"),
            };
            match key.as_str() {
                "n_classes" => spec.n_classes = value.parse().map_err(|_| bad())?,
                "channels" => spec.channels = value.parse().map_err(|_| bad())?,
                "bins" => spec.bins = value.parse().map_err(|_| bad())?,
                "density" => spec.density = value.parse().map_err(|_| bad())?,
                "jitter" => spec.jitter = value.parse().map_err(|_| bad())?,
                "noise_rate" => spec.noise_rate = value.parse().map_err(|_| bad())?,
                "n_per_class" => spec.n_per_class = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                _ => {
                    return Err(Error::Parse { line, msg: format!("unknown key '{key}'") })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Rasters with labels for one split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitData {
    pub rasters: Vec<SpikeRaster>,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }

    pub fn push(&mut self, raster: SpikeRaster, label: usize) {
        self.rasters.push(raster);
        self.labels.push(label);
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// A generated synthetic dataset, split 80/10/10 per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    pub templates: Vec<SpikeRaster>,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &SplitData {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn active_cells(r: &SpikeRaster) -> HashSet<(usize, usize)> {
    let mut set = HashSet::new();
    for c in 0..r.channels() {
        for t in 0..r.bins() {
            if r.count(c, t) > 0 {
                set.insert((c, t));
            }
        }
    }
    set
}

fn templates_distinct(templates: &[SpikeRaster]) -> bool {
    let sets: Vec<_> = templates.iter().map(active_cells).collect();
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let overlap = sets[i].intersection(&sets[j]).count();
            let smaller = sets[i].len().min(sets[j].len()).max(1);
            if overlap as f64 > 0.7 * smaller as f64 {
                return false;
            }
        }
    }
    true
}

fn poisson(rng: &mut ChaCha8Rng, dist: Option<&rand_distr::Poisson<f64>>) -> u32 {
    use rand_distr::Distribution;
    dist.map_or(0, |d| d.sample(rng) as u32)
}

/// Generate the synthetic keyword dataset. Fully determined by the spec's
/// seed: the same spec yields byte-identical rasters.
pub fn synth_keyword_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Class templates, re-drawn until pairwise-distinct enough.
    let mut templates = Vec::new();
    for attempt in 0.. {
        if attempt > 1000 {
            return Err(Error::InvalidParameter(
                "could not draw distinct class templates; lower the density".into(),
            ));
        }
        templates.clear();
        for _ in 0..spec.n_classes {
            let mut t = SpikeRaster::zeros(spec.channels, spec.bins, DEFAULT_DT);
            for c in 0..spec.channels {
                for b in 0..spec.bins {
                    if rng.gen_bool(spec.density) {
                        let count = if rng.gen_bool(0.3) { 2 } else { 1 };
                        t.set(c, b, count);
                    }
                }
            }
            templates.push(t);
        }
        if templates_distinct(&templates) {
            break;
        }
    }

    let noise_dist = if spec.noise_rate > 0.0 {
        Some(rand_distr::Poisson::new(spec.noise_rate).map_err(|_| {
            Error::InvalidParameter(format!("bad noise rate {}", spec.noise_rate))
        })?)
    } else {
        None
    };
    let n_val = spec.n_per_class / 10;
    let n_test = spec.n_per_class / 10;
    let n_train = spec.n_per_class - n_val - n_test;
    let mut ds = SyntheticDataset {
        train: SplitData::default(),
        val: SplitData::default(),
        test: SplitData::default(),
        templates,
    };
    for class in 0..spec.n_classes {
        for i in 0..spec.n_per_class {
            let mut r = SpikeRaster::zeros(spec.channels, spec.bins, DEFAULT_DT);
            let template = &ds.templates[class];
            for c in 0..spec.channels {
                for b in 0..spec.bins {
                    let count = template.count(c, b);
                    if count == 0 || !rng.gen_bool(TEMPLATE_KEEP_PROB) {
                        continue;
                    }
                    let shift = if spec.jitter == 0 {
                        0
                    } else {
                        rng.gen_range(-(spec.jitter as i64)..=spec.jitter as i64)
                    };
                    let nb = (b as i64 + shift).clamp(0, spec.bins as i64 - 1) as usize;
                    r.add(c, nb, count);
                }
            }
            for c in 0..spec.channels {
                for b in 0..spec.bins {
                    let n = poisson(&mut rng, noise_dist.as_ref());
                    if n > 0 {
                        r.add(c, b, n);
                    }
                }
            }
            let target = if i < n_train {
                &mut ds.train
            } else if i < n_train + n_val {
                &mut ds.val
            } else {
                &mut ds.test
            };
            target.push(r, class);
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Dataset directories: <dir>/{train,val,test}.idx index files pointing at
// rasters under <dir>/rasters/.
// ---------------------------------------------------------------------------

pub fn save_split(dir: &Path, split: Split, data: &SplitData) -> Result<()> {
    let raster_dir = dir.join("rasters");
    fs::create_dir_all(&raster_dir)?;
    let mut idx = fs::File::create(dir.join(format!("{}.idx", split.as_str())))?;
    for (i, (raster, label)) in data.rasters.iter().zip(&data.labels).enumerate() {
        let rel = format!("rasters/{}_{i:05}.wsras", split.as_str());
        write_raster(&dir.join(&rel), raster)?;
        writeln!(idx, "{rel}\t{label}")?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<SplitData> {
    let idx_path = dir.join(format!("{}.idx", split.as_str()));
    let text = fs::read_to_string(&idx_path)?;
    let mut data = SplitData::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (rel, label) = line.split_once('\t').ok_or(Error::Parse {
            line: i + 1,
            msg: "expected 'path<TAB>label'".into(),
        })?;
        let label: usize = label.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad label '{label}'"),
        })?;
        data.push(read_raster(&dir.join(rel))?, label);
    }
    Ok(data)
}

pub fn save_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    for split in Split::all() {
        save_split(dir, split, ds.split(split))?;
    }
    Ok(())
}
