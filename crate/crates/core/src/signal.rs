//! Appliance-level power signals: ingestion, resampling, windowing into
//! energy snippets, chronological splits, and a synthetic household generator
//! with exact ground truth.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Sample timestamps this close to a bin edge count as on the edge.
const TIME_EPS: f64 = 1e-9;

/// One metered channel. `device_id` is 0 for mains, `1..=L` for appliances.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChannel {
    pub device_id: usize,
    pub samples: Vec<(f64, f64)>,
}

impl RawChannel {
    pub fn new(device_id: usize, samples: Vec<(f64, f64)>) -> Result<Self> {
        let channel = Self { device_id, samples };
        channel.validate()?;
        Ok(channel)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidChannel {
            device: self.device_id,
            reason,
        };
        for (n, &(t, p)) in self.samples.iter().enumerate() {
            if !t.is_finite() {
                return Err(invalid(format!("non-finite timestamp at sample {n}")));
            }
            if !p.is_finite() {
                return Err(invalid(format!("non-finite power at sample {n}")));
            }
            if p < 0.0 {
                return Err(invalid(format!("negative power {p} W at sample {n}")));
            }
        }
        if let Some(n) = self.samples.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(invalid(format!(
                "timestamps not strictly increasing at sample {}",
                n + 1
            )));
        }
        Ok(())
    }

    pub fn powers(&self) -> Vec<f64> {
        self.samples.iter().map(|&(_, p)| p).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Elementwise sum of equal-length device signals.
pub fn aggregate<S: AsRef<[f64]>>(device_signals: &[S]) -> Result<Vec<f64>> {
    let Some(first) = device_signals.first() else {
        return Ok(Vec::new());
    };
    let len = first.as_ref().len();
    let mut total = vec![0.0; len];
    for (i, signal) in device_signals.iter().enumerate() {
        let signal = signal.as_ref();
        if signal.len() != len {
            return Err(Error::LengthMismatch {
                device: i,
                expected: len,
                found: signal.len(),
            });
        }
        if let Some(t) = signal.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidChannel {
                device: i,
                reason: format!("non-finite power at sample {t}"),
            });
        }
        for (acc, v) in total.iter_mut().zip(signal) {
            *acc += v;
        }
    }
    Ok(total)
}

/// Mean-decimates a channel sampled at an integer rate down to 1 Hz.
///
/// Each output sample is the mean of the source samples falling in its
/// one-second bin, stamped with the bin start.
pub fn resample_to_1hz(channel: &RawChannel, source_rate: f64) -> Result<RawChannel> {
    if !(source_rate >= 1.0) || (source_rate - source_rate.round()).abs() > TIME_EPS {
        return Err(Error::NonIntegerRate(source_rate));
    }
    channel.validate()?;

    let gaps: Vec<(f64, f64)> = channel
        .samples
        .windows(2)
        .filter(|w| w[1].0 - w[0].0 > 1.0 + TIME_EPS)
        .map(|w| (w[0].0, w[1].0))
        .collect();
    if !gaps.is_empty() {
        return Err(Error::Gaps(gaps));
    }
    let Some(&(t0, _)) = channel.samples.first() else {
        return Ok(channel.clone());
    };

    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut current_bin = usize::MAX;
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(t, p) in &channel.samples {
        let bin = ((t - t0) + TIME_EPS).floor() as usize;
        if bin != current_bin {
            if count > 0 {
                out.push((t0 + current_bin as f64, sum / count as f64));
            }
            current_bin = bin;
            sum = 0.0;
            count = 0;
        }
        sum += p;
        count += 1;
    }
    if count > 0 {
        out.push((t0 + current_bin as f64, sum / count as f64));
    }
    RawChannel::new(channel.device_id, out)
}

/// Affine normalization applied to every snippet before it reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Scaler {
    fn default() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
        }
    }
}

impl Scaler {
    /// Scale by the largest aggregate sample; falls back to 1 for all-zero data.
    pub fn fit<'a>(aggregate_snippets: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let max = aggregate_snippets
            .into_iter()
            .flat_map(|s| s.iter().copied())
            .fold(0.0_f64, f64::max);
        Self {
            scale: if max > 0.0 { max } else { 1.0 },
            offset: 0.0,
        }
    }

    pub fn normalize(&self, watts: &[f64]) -> Vec<f64> {
        watts.iter().map(|w| (w - self.offset) / self.scale).collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.scale + self.offset).collect()
    }
}

/// Per-device and aggregate energy snippets cut into windows of `omega` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    omega: usize,
    device_names: Vec<String>,
    /// `[k][i]` -> snippet of device `i` in window `k`, in watts.
    device_snippets: Vec<Vec<Vec<f64>>>,
    aggregate_snippets: Vec<Vec<f64>>,
    /// `[k][i]` ground-truth on/off, when known.
    on_truth: Option<Vec<Vec<bool>>>,
    /// Index of the first window in the source signal.
    first_window: usize,
    pub scaler: Scaler,
}

/// Cuts L device signals into `floor(T / omega)` windows; trailing samples are dropped.
pub fn make_windows<S: AsRef<[f64]>>(device_signals: &[S], omega: usize) -> Result<WindowedDataset> {
    if omega < 2 {
        return Err(Error::InvalidSplit(format!("window length {omega} < 2")));
    }
    if device_signals.is_empty() {
        return Err(Error::Dimension("no device signals".into()));
    }
    let total = aggregate(device_signals)?;
    let t = total.len();
    if t < omega {
        return Err(Error::TooShort { len: t, omega });
    }
    let k = t / omega;
    let device_snippets: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|w| {
            device_signals
                .iter()
                .map(|s| s.as_ref()[w * omega..(w + 1) * omega].to_vec())
                .collect()
        })
        .collect();
    let aggregate_snippets: Vec<Vec<f64>> = (0..k)
        .map(|w| total[w * omega..(w + 1) * omega].to_vec())
        .collect();
    let scaler = Scaler::fit(aggregate_snippets.iter().map(Vec::as_slice));
    Ok(WindowedDataset {
        omega,
        device_names: (1..=device_signals.len())
            .map(|i| format!("device_{i}"))
            .collect(),
        device_snippets,
        aggregate_snippets,
        on_truth: None,
        first_window: 0,
        scaler,
    })
}

impl WindowedDataset {
    pub fn omega(&self) -> usize {
        self.omega
    }

    /// Window count K.
    pub fn windows(&self) -> usize {
        self.aggregate_snippets.len()
    }

    /// Device count L.
    pub fn devices(&self) -> usize {
        self.device_names.len()
    }

    pub fn device_names(&self) -> &[String] {
        &self.device_names
    }

    pub fn with_device_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.devices() {
            return Err(Error::Dimension(format!(
                "{} names for {} devices",
                names.len(),
                self.devices()
            )));
        }
        self.device_names = names;
        Ok(self)
    }

    /// Attaches `[k][i]` ground-truth on/off flags.
    pub fn with_truth(mut self, truth: Vec<Vec<bool>>) -> Result<Self> {
        if truth.len() != self.windows() || truth.iter().any(|r| r.len() != self.devices()) {
            return Err(Error::Dimension("truth flags must be K x L".into()));
        }
        self.on_truth = Some(truth);
        Ok(self)
    }

    pub fn truth(&self) -> Option<&[Vec<bool>]> {
        self.on_truth.as_deref()
    }

    /// Truth flags if attached, otherwise "mean power above `threshold_w`".
    pub fn on_flags(&self, threshold_w: f64) -> Vec<Vec<bool>> {
        match &self.on_truth {
            Some(t) => t.clone(),
            None => self
                .device_snippets
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|s| s.iter().sum::<f64>() / s.len() as f64 > threshold_w)
                        .collect()
                })
                .collect(),
        }
    }

    pub fn first_window(&self) -> usize {
        self.first_window
    }

    pub fn device(&self, k: usize, i: usize) -> &[f64] {
        &self.device_snippets[k][i]
    }

    pub fn aggregate(&self, k: usize) -> &[f64] {
        &self.aggregate_snippets[k]
    }

    pub fn normalized_device(&self, k: usize, i: usize) -> Vec<f64> {
        self.scaler.normalize(self.device(k, i))
    }

    pub fn normalized_aggregate(&self, k: usize) -> Vec<f64> {
        self.scaler.normalize(self.aggregate(k))
    }

    /// Windows `range` as a new dataset sharing this scaler.
    pub fn subset(&self, range: Range<usize>) -> WindowedDataset {
        WindowedDataset {
            omega: self.omega,
            device_names: self.device_names.clone(),
            device_snippets: self.device_snippets[range.clone()].to_vec(),
            aggregate_snippets: self.aggregate_snippets[range.clone()].to_vec(),
            on_truth: self.on_truth.as_ref().map(|t| t[range.clone()].to_vec()),
            first_window: self.first_window + range.start,
            scaler: self.scaler,
        }
    }

    /// Concatenation of device signals back into the time domain (`L x K*omega`).
    pub fn device_signals(&self) -> Vec<Vec<f64>> {
        (0..self.devices())
            .map(|i| {
                self.device_snippets
                    .iter()
                    .flat_map(|row| row[i].iter().copied())
                    .collect()
            })
            .collect()
    }

    pub fn aggregate_signal(&self) -> Vec<f64> {
        self.aggregate_snippets.iter().flatten().copied().collect()
    }
}

/// Train, validation and test partitions.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: WindowedDataset,
    pub validation: WindowedDataset,
    pub test: WindowedDataset,
}

/// Windows `[0, boundary)` are week one, split 80/20 in chronological order
/// into train and validation; windows from `boundary` on are the test set.
/// The scaler of every partition is refit on the training windows.
pub fn split_dataset(ds: &WindowedDataset, boundary: usize) -> Result<DatasetSplit> {
    let k = ds.windows();
    if boundary == 0 || boundary >= k {
        return Err(Error::InvalidSplit(format!(
            "boundary {boundary} must lie strictly inside 0..{k}"
        )));
    }
    let n_train = boundary * 4 / 5;
    if n_train == 0 || n_train == boundary {
        return Err(Error::InvalidSplit(format!(
            "{boundary} week-one windows leave an empty train or validation partition"
        )));
    }
    let scaler = Scaler::fit(ds.aggregate_snippets[..n_train].iter().map(Vec::as_slice));
    let mut split = DatasetSplit {
        train: ds.subset(0..n_train),
        validation: ds.subset(n_train..boundary),
        test: ds.subset(boundary..k),
    };
    split.train.scaler = scaler;
    split.validation.scaler = scaler;
    split.test.scaler = scaler;
    Ok(split)
}

// ---------------------------------------------------------------------------
// Synthetic households
// ---------------------------------------------------------------------------

/// How long an appliance stays in a state once it enters it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dwell {
    Fixed { samples: usize },
    /// Geometric on `{1, 2, ...}` with the given mean.
    Geometric { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceState {
    pub power_w: f64,
    pub dwell: Dwell,
}

/// A cyclic finite-state appliance: states are visited in order, wrapping around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceModel {
    pub name: String,
    pub states: Vec<ApplianceState>,
    #[serde(default)]
    pub initial_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub device_models: Vec<DeviceModel>,
    /// T, in samples.
    pub duration: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl SyntheticSpec {
    /// Three appliances with distinct state machines, 2800 samples at 1 Hz.
    pub fn reference() -> Self {
        let geo = |mean: f64| Dwell::Geometric { mean };
        let state = |power_w: f64, dwell: Dwell| ApplianceState { power_w, dwell };
        Self {
            device_models: vec![
                DeviceModel {
                    name: "refrigerator".into(),
                    states: vec![state(0.0, geo(50.0)), state(150.0, geo(40.0))],
                    initial_state: 0,
                },
                DeviceModel {
                    name: "washer_dryer".into(),
                    states: vec![
                        state(0.0, geo(160.0)),
                        state(500.0, geo(30.0)),
                        state(250.0, geo(25.0)),
                    ],
                    initial_state: 0,
                },
                DeviceModel {
                    name: "lighting".into(),
                    states: vec![state(0.0, geo(90.0)), state(60.0, geo(110.0))],
                    initial_state: 1,
                },
            ],
            duration: 2800,
            noise_std: 2.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        for d in &self.device_models {
            if d.states.is_empty() {
                return bad(format!("device {} has no states", d.name));
            }
            if d.initial_state >= d.states.len() {
                return bad(format!("device {} initial_state out of range", d.name));
            }
            for (s, st) in d.states.iter().enumerate() {
                if !(st.power_w >= 0.0 && st.power_w.is_finite()) {
                    return bad(format!("device {} state {s}: power must be >= 0", d.name));
                }
                match st.dwell {
                    Dwell::Fixed { samples } if samples < 1 => {
                        return bad(format!("device {} state {s}: dwell < 1 sample", d.name))
                    }
                    Dwell::Geometric { mean } if !(mean >= 1.0 && mean.is_finite()) => {
                        return bad(format!("device {} state {s}: mean dwell < 1", d.name))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Output of [`synth_household`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHousehold {
    pub device_names: Vec<String>,
    /// `L x T` watts.
    pub signals: Vec<Vec<f64>>,
    /// `L x T`; true while the device sits in a state with positive power.
    pub active: Vec<Vec<bool>>,
    pub duration: usize,
}

impl SyntheticHousehold {
    pub fn aggregate(&self) -> Vec<f64> {
        if self.signals.is_empty() {
            return vec![0.0; self.duration];
        }
        aggregate(&self.signals).expect("generated signals share one length")
    }

    /// `[k][i]`: device `i` is on in window `k` if any of its samples there is active.
    pub fn on_off_per_window(&self, omega: usize) -> Vec<Vec<bool>> {
        window_truth(&self.active, omega)
    }

    pub fn windowed(&self, omega: usize) -> Result<WindowedDataset> {
        make_windows(&self.signals, omega)?
            .with_device_names(self.device_names.clone())?
            .with_truth(self.on_off_per_window(omega))
    }
}

/// Collapses per-sample activity (`L x T`) into per-window flags (`[k][i]`).
pub fn window_truth(active: &[Vec<bool>], omega: usize) -> Vec<Vec<bool>> {
    let t = active.first().map_or(0, Vec::len);
    let k = t.checked_div(omega).unwrap_or(0);
    (0..k)
        .map(|w| {
            active
                .iter()
                .map(|a| a[w * omega..(w + 1) * omega].iter().any(|&x| x))
                .collect()
        })
        .collect()
}

/// Runs every appliance state machine for `duration` samples and adds
/// zero-clipped Gaussian noise. Deterministic for a fixed seed.
pub fn synth_household(spec: &SyntheticSpec) -> Result<SyntheticHousehold> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed);
    let mut signals = Vec::with_capacity(spec.device_models.len());
    let mut active = Vec::with_capacity(spec.device_models.len());
    for (i, device) in spec.device_models.iter().enumerate() {
        let mut dwell_rng = seeds.rng(&format!("synth/dwell/{i}"));
        let mut noise_rng = seeds.rng(&format!("synth/noise/{i}"));
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;

        let mut power = Vec::with_capacity(spec.duration);
        let mut on = Vec::with_capacity(spec.duration);
        let mut state = device.initial_state;
        while power.len() < spec.duration {
            let st = &device.states[state];
            let dwell = sample_dwell(st.dwell, &mut dwell_rng);
            for _ in 0..dwell.min(spec.duration - power.len()) {
                power.push(st.power_w);
                on.push(st.power_w > 0.0);
            }
            state = (state + 1) % device.states.len();
        }
        if spec.noise_std > 0.0 {
            for p in &mut power {
                *p = (*p + noise.sample(&mut noise_rng)).max(0.0);
            }
        }
        signals.push(power);
        active.push(on);
    }
    Ok(SyntheticHousehold {
        device_names: spec.device_models.iter().map(|d| d.name.clone()).collect(),
        signals,
        active,
        duration: spec.duration,
    })
}

fn sample_dwell<R: Rng>(dwell: Dwell, rng: &mut R) -> usize {
    match dwell {
        Dwell::Fixed { samples } => samples,
        Dwell::Geometric { mean } => {
            if mean <= 1.0 {
                return 1;
            }
            let geo = Geometric::new(1.0 / mean).expect("probability in (0, 1]");
            1 + geo.sample(rng) as usize
        }
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDevice {
    pub name: String,
    pub path: PathBuf,
}

/// House manifest; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub house_id: String,
    pub mains: PathBuf,
    pub devices: Vec<ManifestDevice>,
}

#[derive(Debug, Clone)]
pub struct LoadedHouse {
    pub house_id: String,
    pub device_names: Vec<String>,
    /// Mains first (`device_id` 0), then devices in manifest order.
    pub channels: Vec<RawChannel>,
}

impl LoadedHouse {
    pub fn mains(&self) -> &RawChannel {
        &self.channels[0]
    }

    pub fn devices(&self) -> &[RawChannel] {
        &self.channels[1..]
    }

    /// Device power signals truncated to the shortest channel.
    pub fn device_signals(&self) -> Vec<Vec<f64>> {
        let t = self.devices().iter().map(RawChannel::len).min().unwrap_or(0);
        self.devices()
            .iter()
            .map(|c| c.powers()[..t].to_vec())
            .collect()
    }
}

pub fn load_house_csv(manifest_path: &Path) -> Result<LoadedHouse> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut channels = vec![read_channel_csv(&resolve(&manifest.mains), 0)?];
    for (i, dev) in manifest.devices.iter().enumerate() {
        channels.push(read_channel_csv(&resolve(&dev.path), i + 1)?);
    }
    Ok(LoadedHouse {
        house_id: manifest.house_id,
        device_names: manifest.devices.iter().map(|d| d.name.clone()).collect(),
        channels,
    })
}

/// Reads header-less `timestamp_s,watts` rows.
pub fn read_channel_csv(path: &Path, device_id: usize) -> Result<RawChannel> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_channel(file, path, device_id)
}

fn parse_channel<R: std::io::Read>(reader: R, path: &Path, device_id: usize) -> Result<RawChannel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.len() != 2 {
            return Err(parse_err(format!("expected 2 fields, found {}", record.len())));
        }
        let t: f64 = record[0]
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp {:?}", &record[0])))?;
        let p: f64 = record[1]
            .parse()
            .map_err(|_| parse_err(format!("bad power {:?}", &record[1])))?;
        if !p.is_finite() || p < 0.0 {
            return Err(parse_err(format!("power {p} must be finite and >= 0")));
        }
        samples.push((t, p));
    }
    RawChannel::new(device_id, samples)
}

pub fn write_channel_csv(path: &Path, channel: &RawChannel) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(channel.len() * 16);
    for &(t, p) in &channel.samples {
        let _ = writeln!(out, "{t},{p}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 1 Hz channel with timestamps `0, 1, 2, ...`.
pub fn channel_from_powers(device_id: usize, powers: &[f64]) -> Result<RawChannel> {
    RawChannel::new(
        device_id,
        powers.iter().enumerate().map(|(t, &p)| (t as f64, p)).collect(),
    )
}
