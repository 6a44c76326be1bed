//! Sliding-window online inference that reproduces offline emissions.
//!
//! Each run recomputes the frontend and encoder over a hop-aligned buffer
//! holding at least the receptive field of the earliest frame not yet
//! emitted, then emits every frame whose receptive field lies inside the
//! received signal. Because all operators are causal and row-local outside
//! their receptive field, the emitted rows are bit-identical to the rows of
//! a single forward pass over the whole signal.

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::EmissionLattice;
use crate::dataio::{Session, CHANNELS, SAMPLE_RATE};
use crate::decode::{BeamSearch, DecodeConfig, GreedyStream};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::frontend::{frame_count, Stft, HOP};
use crate::lm::NgramModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Hop equal to the context window.
    PaperOnline,
    /// Short hop behind a long history window.
    LowLatency,
}

impl FromStr for StreamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_online" => Ok(StreamMode::PaperOnline),
            "low_latency" => Ok(StreamMode::LowLatency),
            _ => Err(Error::Config(format!("unknown stream mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub context_s: f64,
    pub hop_s: f64,
    pub mode: StreamMode,
}

impl StreamConfig {
    pub fn paper_online() -> Self {
        StreamConfig {
            context_s: 4.0,
            hop_s: 4.0,
            mode: StreamMode::PaperOnline,
        }
    }

    pub fn low_latency() -> Self {
        StreamConfig {
            context_s: 4.0,
            hop_s: 0.05,
            mode: StreamMode::LowLatency,
        }
    }

    pub fn for_mode(mode: StreamMode) -> Self {
        match mode {
            StreamMode::PaperOnline => Self::paper_online(),
            StreamMode::LowLatency => Self::low_latency(),
        }
    }

    fn samples(s: f64) -> usize {
        (s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn context_samples(&self) -> usize {
        Self::samples(self.context_s)
    }

    pub fn hop_samples(&self) -> usize {
        Self::samples(self.hop_s)
    }

    pub fn validate(&self, receptive_field: usize) -> Result<()> {
        if !(self.hop_s > 0.0 && self.hop_s <= self.context_s) || self.hop_samples() == 0 {
            return Err(Error::Config(format!(
                "need 0 < hop_s ({}) <= context_s ({})",
                self.hop_s, self.context_s
            )));
        }
        let frames = frame_count(self.context_samples());
        if self.context_s < 1.0 || frames < receptive_field {
            return Err(Error::Config(format!(
                "context of {} s ({frames} frames) must be at least 1 s and cover the {receptive_field}-frame receptive field",
                self.context_s
            )));
        }
        Ok(())
    }
}

/// Rows produced by one engine run.
#[derive(Debug, Clone)]
pub struct EmissionChunk {
    /// Global index of the first row.
    pub first_frame: usize,
    pub lattice: EmissionLattice,
    /// Samples per channel received when the run started.
    pub signal_samples: usize,
    /// Frames in the buffer the run recomputed.
    pub window_frames: usize,
    pub compute: Duration,
}

/// The inference loop's state. Memory is bounded by the larger of the
/// context and the receptive field.
pub struct StreamEngine<'m> {
    model: &'m Model,
    cfg: StreamConfig,
    stft: Stft,
    rf: usize,
    context_frames: usize,
    /// Interleaved samples starting at sample `HOP · buffer_frame`.
    buffer: Vec<i16>,
    buffer_frame: usize,
    received: usize,
    emitted: usize,
    next_run: usize,
}

impl<'m> StreamEngine<'m> {
    pub fn new(model: &'m Model, cfg: StreamConfig) -> Result<Self> {
        let rf = model.receptive_field();
        cfg.validate(rf)?;
        Ok(StreamEngine {
            model,
            stft: Stft::new(),
            rf,
            context_frames: frame_count(cfg.context_samples()),
            buffer: Vec::new(),
            buffer_frame: 0,
            received: 0,
            emitted: 0,
            next_run: cfg.context_samples(),
            cfg,
        })
    }

    /// Frames emitted so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    /// Samples per channel currently buffered.
    pub fn buffered(&self) -> usize {
        self.buffer.len() / CHANNELS
    }

    /// Appends interleaved samples, running the model at every hop boundary
    /// crossed.
    pub fn push(&mut self, mut samples: &[i16]) -> Result<Vec<EmissionChunk>> {
        if samples.len() % CHANNELS != 0 {
            return Err(Error::Input(format!("{} samples is not a whole number of frames", samples.len())));
        }
        let mut out = Vec::new();
        while !samples.is_empty() {
            let room = self.next_run - self.received;
            let take = room.min(samples.len() / CHANNELS);
            self.buffer.extend_from_slice(&samples[..take * CHANNELS]);
            self.received += take;
            samples = &samples[take * CHANNELS..];
            if self.received == self.next_run {
                out.extend(self.run()?);
                self.next_run += self.cfg.hop_samples();
            }
        }
        Ok(out)
    }

    /// Emits whatever frames remain at end of stream.
    pub fn finish(&mut self) -> Result<Option<EmissionChunk>> {
        self.run()
    }

    fn run(&mut self) -> Result<Option<EmissionChunk>> {
        let available = frame_count(self.received);
        if available <= self.emitted {
            return Ok(None);
        }
        let start = Instant::now();
        // Earliest frame needed: the receptive field of the first frame to
        // emit, extended to the full context window when more is available.
        let need = (self.emitted + 1).saturating_sub(self.rf);
        let first = need.min(available.saturating_sub(self.context_frames));
        if first < self.buffer_frame {
            return Err(Error::Contract(format!(
                "frame {first} was already dropped from the buffer (starts at {})",
                self.buffer_frame
            )));
        }
        let skip = (first - self.buffer_frame) * HOP * CHANNELS;
        let spec = self.stft.log_spectrogram(&self.buffer[skip..])?;
        let spec = spec.slice_frames(0, available - first);
        let lattice = self.model.forward_at(&spec, first)?;
        let rows = lattice.data()[(self.emitted - first) * lattice.width()..].to_vec();
        let lattice_out = EmissionLattice::new(available - self.emitted, lattice.width(), rows)?;
        let chunk = EmissionChunk {
            first_frame: self.emitted,
            lattice: lattice_out,
            signal_samples: self.received,
            window_frames: available - first,
            compute: Duration::ZERO,
        };
        self.emitted = available;

        // Later runs never start before this frame.
        let keep = self.emitted.saturating_sub(self.context_frames.max(self.rf - 1));
        if keep > self.buffer_frame {
            let drop = (keep - self.buffer_frame) * HOP * CHANNELS;
            self.buffer.drain(..drop.min(self.buffer.len()));
            self.buffer_frame = keep;
        }
        Ok(Some(EmissionChunk {
            compute: start.elapsed(),
            ..chunk
        }))
    }
}

/// Text decoder driven by streamed emissions.
pub enum StreamDecoder<'a> {
    Greedy(GreedyStream),
    Beam(BeamSearch<'a>),
}

impl<'a> StreamDecoder<'a> {
    pub fn new(cfg: Option<&DecodeConfig>, lm: Option<&'a NgramModel>) -> Result<Self> {
        Ok(match cfg {
            None => StreamDecoder::Greedy(GreedyStream::default()),
            Some(c) => StreamDecoder::Beam(BeamSearch::new(c, lm)?),
        })
    }

    pub fn advance(&mut self, lattice: &EmissionLattice) -> Result<()> {
        match self {
            StreamDecoder::Greedy(g) => g.advance(lattice),
            StreamDecoder::Beam(b) => b.advance(lattice)?,
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        match self {
            StreamDecoder::Greedy(g) => g.text().to_string(),
            StreamDecoder::Beam(b) => b.best(),
        }
    }
}

/// Transcript after one engine run.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEvent {
    pub signal_s: f64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct StreamOutput {
    /// All emitted rows, in order.
    pub emissions: EmissionLattice,
    pub chunks: Vec<ChunkInfo>,
    pub events: Vec<TextEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkInfo {
    pub first_frame: usize,
    pub frames: usize,
    pub signal_samples: usize,
    pub window_frames: usize,
    pub compute: Duration,
}

/// Replays `session` through a producer thread and a bounded queue into the
/// engine, decoding as emissions arrive. `chunk_samples` is the producer's
/// delivery granularity; with `realtime` it sleeps to match signal time.
pub fn stream_session(
    session: &Session,
    model: &Model,
    cfg: &StreamConfig,
    decode: Option<&DecodeConfig>,
    lm: Option<&NgramModel>,
    chunk_samples: usize,
    realtime: bool,
) -> Result<StreamOutput> {
    if chunk_samples == 0 {
        return Err(Error::Config("chunk_samples must be positive".into()));
    }
    let mut engine = StreamEngine::new(model, cfg.clone())?;
    let mut decoder = StreamDecoder::new(decode, lm)?;
    let mut emissions = EmissionLattice::new(0, model.arch.alphabet_size, Vec::new())?;
    let mut chunks = Vec::new();
    let mut events = Vec::new();
    let (tx, rx) = sync_channel::<Vec<i16>>(4);
    std::thread::scope(|scope| -> Result<()> {
        scope.spawn(move || {
            let pace = Duration::from_secs_f64(chunk_samples as f64 / session.sample_rate as f64);
            for block in session.samples.chunks(chunk_samples * CHANNELS) {
                if realtime {
                    std::thread::sleep(pace);
                }
                if tx.send(block.to_vec()).is_err() {
                    return;
                }
            }
        });
        let mut handle = |c: EmissionChunk| -> Result<()> {
            decoder.advance(&c.lattice)?;
            emissions.extend(&c.lattice)?;
            chunks.push(ChunkInfo {
                first_frame: c.first_frame,
                frames: c.lattice.frames(),
                signal_samples: c.signal_samples,
                window_frames: c.window_frames,
                compute: c.compute,
            });
            events.push(TextEvent {
                signal_s: c.signal_samples as f64 / session.sample_rate as f64,
                text: decoder.text(),
            });
            Ok(())
        };
        for block in rx {
            for c in engine.push(&block)? {
                handle(c)?;
            }
        }
        if let Some(c) = engine.finish()? {
            handle(c)?;
        }
        Ok(())
    })?;
    Ok(StreamOutput {
        emissions,
        chunks,
        events,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub windows: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// Compute time of the first run, which fires once the context window
    /// has filled.
    pub first_emission_ms: f64,
    /// Signal time before the first emission.
    pub first_emission_signal_s: f64,
    /// Total compute time over signal time covered by the measured runs.
    pub real_time_factor: f64,
}

impl LatencyReport {
    pub const CSV_HEADER: &'static str = "windows,p50_ms,p95_ms,max_ms,first_emission_ms,first_emission_signal_s,rtf";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}",
            self.windows,
            self.p50_ms,
            self.p95_ms,
            self.max_ms,
            self.first_emission_ms,
            self.first_emission_signal_s,
            self.real_time_factor
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} windows: p50 {:.2} ms, p95 {:.2} ms, max {:.2} ms, first emission {:.2} ms after {:.2} s, RTF {:.4}",
            self.windows,
            self.p50_ms,
            self.p95_ms,
            self.max_ms,
            self.first_emission_ms,
            self.first_emission_signal_s,
            self.real_time_factor
        )
    }
}

/// Warmup runs excluded from a latency report.
pub const WARMUP_WINDOWS: usize = 5;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `n_windows` engine runs (after warmups) on a fixed pseudo-random
/// signal.
pub fn latency_bench(model: &Model, cfg: &StreamConfig, n_windows: usize) -> Result<LatencyReport> {
    if n_windows == 0 {
        return Err(Error::Input("latency report needs at least one window".into()));
    }
    let total = cfg.context_samples() + (WARMUP_WINDOWS + n_windows - 1) * cfg.hop_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let samples: Vec<i16> = (0..total * CHANNELS).map(|_| rng.random_range(-2000..2000)).collect();
    let mut engine = StreamEngine::new(model, cfg.clone())?;
    let chunks = engine.push(&samples)?;
    let first = chunks.first().ok_or_else(|| Error::Contract("no emission".into()))?;
    let first_emission_ms = first.compute.as_secs_f64() * 1e3;
    let first_emission_signal_s = first.signal_samples as f64 / SAMPLE_RATE as f64;
    let mut ms: Vec<f64> = chunks.iter().skip(WARMUP_WINDOWS).map(|c| c.compute.as_secs_f64() * 1e3).collect();
    if ms.len() != n_windows {
        return Err(Error::Contract(format!("expected {n_windows} timed windows, got {}", ms.len())));
    }
    let compute_s: f64 = ms.iter().sum::<f64>() / 1e3;
    let signal_s = (n_windows * cfg.hop_samples()) as f64 / SAMPLE_RATE as f64;
    ms.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        windows: n_windows,
        p50_ms: percentile(&ms, 0.5),
        p95_ms: percentile(&ms, 0.95),
        max_ms: ms[ms.len() - 1],
        first_emission_ms,
        first_emission_signal_s,
        real_time_factor: compute_s / signal_s,
    })
}
