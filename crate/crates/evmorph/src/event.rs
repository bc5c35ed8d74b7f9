//! Event stream decoding, fixed-window frame aggregation and cross-modal
//! timestamp alignment.
//!
//! Events are aggregated into frames over fixed windows (33 ms by default,
//! giving 30 FPS parity with RGB video). Each frame cell keeps the polarity
//! of the last event that hit the pixel inside the window, `None` when no
//! event occurred.
//!
//! ```
//! use evmorph::event::{
//!     aggregate_periodic, render_frame, Event, EventStream, Polarity, DEFAULT_DELTA_T,
//! };
//!
//! let events = vec![
//!     Event { t: 1_000, x: 0, y: 0, p: Polarity::On },
//!     Event { t: 5_000, x: 0, y: 0, p: Polarity::Off }, // same cell: last polarity wins
//!     Event { t: 40_000, x: 1, y: 1, p: Polarity::On },
//! ];
//! let stream = EventStream::new(2, 2, events).unwrap();
//! let frames = aggregate_periodic(&stream, DEFAULT_DELTA_T).unwrap();
//! assert_eq!(frames.len(), 2); // last timestamp 40 ms -> two 33 ms windows
//!
//! let image = render_frame(&frames[0]);
//! assert_eq!(image.get(0, 0, 0), 0.0); // Off renders as 0.0
//! assert_eq!(image.get(1, 1, 0), 0.5); // no event renders as 0.5
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Default accumulation window in microseconds (33 ms, 30 FPS).
pub const DEFAULT_DELTA_T: u64 = 33_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    /// Column index.
    pub x: u16,
    /// Row index.
    pub y: u16,
    pub p: Polarity,
}

/// Time-ordered event stream with sensor geometry.
///
/// Events are kept sorted by timestamp; the sort is stable so records with
/// equal timestamps keep their original file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, stably sorting events by timestamp and checking
    /// coordinate bounds.
    pub fn new(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        for e in &events {
            if e.x >= width || e.y >= height {
                return Err(Error::Bounds(format!(
                    "event at t={} has (x={}, y={}) outside {}x{}",
                    e.t, e.x, e.y, width, height
                )));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    None,
    Off,
    On,
}

/// Dense accumulation of all events inside `[t_start, t_start + delta_t)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    pub t_start: u64,
    pub delta_t: u64,
    pub width: u16,
    pub height: u16,
    grid: Vec<CellState>,
}

impl EventFrame {
    pub fn empty(t_start: u64, delta_t: u64, width: u16, height: u16) -> Self {
        Self {
            t_start,
            delta_t,
            width,
            height,
            grid: vec![CellState::None; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u16, y: u16) -> CellState {
        self.grid[y as usize * self.width as usize + x as usize]
    }

    fn set(&mut self, x: u16, y: u16, s: CellState) {
        self.grid[y as usize * self.width as usize + x as usize] = s;
    }

    pub fn cells(&self) -> &[CellState] {
        &self.grid
    }
}

/// Dense numeric grid in `[0, 1]`, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image values {} != {}x{}x{}",
                values.len(),
                height,
                width,
                channels
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite image value".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![v; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Evbin,
}

impl EventFormat {
    /// Picks the format from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("evbin") => EventFormat::Evbin,
            _ => EventFormat::Csv,
        }
    }
}

/// Decodes an event file into a sorted stream.
///
/// CSV layout: line 1 `width,height`, then `t_us,x,y,p` with p in {0,1}.
/// evbin layout: magic `EVB1`, u32 width, u32 height, u64 count, then
/// `(u64 t, u16 x, u16 y, u8 p)` records, little-endian.
pub fn decode_events(path: &Path, format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Csv => decode_csv(path),
        EventFormat::Evbin => decode_evbin(path),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn decode_csv(path: &Path) -> Result<EventStream> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected width,height header"))?;
    let header = header?;
    let mut parts = header.trim().split(',');
    let width: u16 = parts
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, "bad width in header"))?;
    let height: u16 = parts
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, "bad height in header"))?;

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, idx + 1, "expected t,x,y,p"));
        }
        let t: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad timestamp"))?;
        let x: u16 = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad x"))?;
        let y: u16 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad y"))?;
        let p = match fields[3].trim() {
            "0" => Polarity::Off,
            "1" => Polarity::On,
            other => return Err(parse_err(path, idx + 1, format!("bad polarity '{other}'"))),
        };
        events.push(Event { t, x, y, p });
    }
    EventStream::new(width, height, events)
}

const EVBIN_MAGIC: &[u8; 4] = b"EVB1";

fn decode_evbin(path: &Path) -> Result<EventStream> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != EVBIN_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected EVB1",
            path.display()
        )));
    }
    let width = read_u32(&mut file)?;
    let height = read_u32(&mut file)?;
    if width > u16::MAX as u32 || height > u16::MAX as u32 {
        return Err(Error::Format(format!(
            "{}: sensor size {}x{} exceeds u16",
            path.display(),
            width,
            height
        )));
    }
    let count = read_u64(&mut file)?;
    let mut events = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut rec = [0u8; 13];
        file.read_exact(&mut rec).map_err(|_| {
            Error::Format(format!(
                "{}: truncated at record {i} of {count}",
                path.display()
            ))
        })?;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = match rec[12] {
            0 => Polarity::Off,
            1 => Polarity::On,
            other => {
                return Err(Error::Format(format!(
                    "{}: bad polarity byte {other} at record {i}",
                    path.display()
                )))
            }
        };
        events.push(Event { t, x, y, p });
    }
    EventStream::new(width as u16, height as u16, events)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes a stream in the declared format.
pub fn encode_events(stream: &EventStream, path: &Path, format: EventFormat) -> Result<()> {
    match format {
        EventFormat::Csv => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "{},{}", stream.width, stream.height)?;
            for e in stream.events() {
                let p = match e.p {
                    Polarity::Off => 0,
                    Polarity::On => 1,
                };
                writeln!(w, "{},{},{},{}", e.t, e.x, e.y, p)?;
            }
            w.flush()?;
        }
        EventFormat::Evbin => {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(EVBIN_MAGIC)?;
            w.write_all(&(stream.width as u32).to_le_bytes())?;
            w.write_all(&(stream.height as u32).to_le_bytes())?;
            w.write_all(&(stream.len() as u64).to_le_bytes())?;
            for e in stream.events() {
                w.write_all(&e.t.to_le_bytes())?;
                w.write_all(&e.x.to_le_bytes())?;
                w.write_all(&e.y.to_le_bytes())?;
                w.write_all(&[match e.p {
                    Polarity::Off => 0u8,
                    Polarity::On => 1u8,
                }])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Aggregates a stream into fixed-rate frames.
///
/// Frame `k` covers `[k*delta_t, (k+1)*delta_t)`; windows are indexed from
/// t=0 of the stream so frame indices match the RGB frame indices. Each cell
/// holds the polarity of the last event at that pixel inside the window;
/// records with equal timestamps resolve by stream order (later record wins).
pub fn aggregate_periodic(stream: &EventStream, delta_t: u64) -> Result<Vec<EventFrame>> {
    if delta_t == 0 {
        return Err(Error::InvalidArgument("delta_t must be > 0".into()));
    }
    let Some(last) = stream.events().last() else {
        return Ok(Vec::new());
    };
    let n_frames = ((last.t + 1) + delta_t - 1) / delta_t;
    let mut frames: Vec<EventFrame> = (0..n_frames)
        .map(|k| EventFrame::empty(k * delta_t, delta_t, stream.width, stream.height))
        .collect();
    for e in stream.events() {
        let k = (e.t / delta_t) as usize;
        let s = match e.p {
            Polarity::Off => CellState::Off,
            Polarity::On => CellState::On,
        };
        frames[k].set(e.x, e.y, s);
    }
    Ok(frames)
}

/// Renders a frame for model input: ON -> 1.0, OFF -> 0.0, NONE -> 0.5.
pub fn render_frame(frame: &EventFrame) -> Image {
    let values = frame
        .cells()
        .iter()
        .map(|c| match c {
            CellState::On => 1.0,
            CellState::Off => 0.0,
            CellState::None => 0.5,
        })
        .collect();
    Image {
        height: frame.height as usize,
        width: frame.width as usize,
        channels: 1,
        values,
    }
}

/// Index of the frame timestamp nearest to `query_t`; ties break toward the
/// earlier index. Timestamps must be sorted and non-empty.
pub fn nearest_frame_index(frame_timestamps: &[u64], query_t: u64) -> Result<usize> {
    if frame_timestamps.is_empty() {
        return Err(Error::InvalidArgument("empty timestamp list".into()));
    }
    let n = frame_timestamps.len();
    let right = frame_timestamps.partition_point(|&t| t < query_t);
    let best = if right == 0 {
        0
    } else if right == n {
        n - 1
    } else {
        let left = right - 1;
        let dl = query_t - frame_timestamps[left];
        let dr = frame_timestamps[right] - query_t;
        if dl <= dr {
            left
        } else {
            right
        }
    };
    // duplicates: the earliest index with the winning timestamp
    Ok(frame_timestamps.partition_point(|&t| t < frame_timestamps[best]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn ev(t: u64, x: u16, y: u16, p: Polarity) -> Event {
        Event { t, x, y, p }
    }

    /// Naive reference: scan every event into its window, per frame.
    pub fn aggregate_naive(stream: &EventStream, delta_t: u64) -> Vec<EventFrame> {
        let Some(last) = stream.events().last() else {
            return Vec::new();
        };
        let n_frames = ((last.t + 1) + delta_t - 1) / delta_t;
        let mut frames = Vec::new();
        for k in 0..n_frames {
            let t0 = k * delta_t;
            let t1 = t0 + delta_t;
            let mut frame = EventFrame::empty(t0, delta_t, stream.width, stream.height);
            for e in stream.events() {
                if e.t >= t0 && e.t < t1 {
                    frame.set(
                        e.x,
                        e.y,
                        match e.p {
                            Polarity::Off => CellState::Off,
                            Polarity::On => CellState::On,
                        },
                    );
                }
            }
            frames.push(frame);
        }
        frames
    }

    #[test]
    fn decode_empty_csv() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "1280,720\n").unwrap();
        let s = decode_events(&path, EventFormat::Csv).unwrap();
        assert_eq!(s.len(), 0);
        assert_eq!(s.width, 1280);
        assert_eq!(s.height, 720);
    }

    #[test]
    fn decode_csv_resorts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "4,4\n5,0,0,1\n2,1,1,0\n").unwrap();
        let s = decode_events(&path, EventFormat::Csv).unwrap();
        assert_eq!(s.events()[0], ev(2, 1, 1, Polarity::Off));
        assert_eq!(s.events()[1], ev(5, 0, 0, Polarity::On));
    }

    #[test]
    fn decode_rejects_out_of_bounds() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "4,4\n5,4,0,1\n").unwrap();
        assert!(matches!(
            decode_events(&path, EventFormat::Csv),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn decode_reports_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "4,4\n1,0,0,1\nbogus\n").unwrap();
        match decode_events(&path, EventFormat::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn evbin_round_trip_large() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut t = 0u64;
        let events: Vec<Event> = (0..1_000_000)
            .map(|_| {
                t += rng.gen_range(0..5);
                ev(
                    t,
                    rng.gen_range(0..640),
                    rng.gen_range(0..480),
                    if rng.gen_bool(0.5) {
                        Polarity::On
                    } else {
                        Polarity::Off
                    },
                )
            })
            .collect();
        let stream = EventStream::new(640, 480, events).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.evbin");
        encode_events(&stream, &path, EventFormat::Evbin).unwrap();
        let decoded = decode_events(&path, EventFormat::Evbin).unwrap();
        assert_eq!(stream, decoded);
    }

    #[test]
    fn aggregate_empty_stream() {
        let s = EventStream::new(4, 4, vec![]).unwrap();
        assert!(aggregate_periodic(&s, 33_000).unwrap().is_empty());
    }

    #[test]
    fn aggregate_window_boundaries() {
        let s = EventStream::new(4, 4, vec![ev(40_000, 2, 3, Polarity::On)]).unwrap();
        let frames = aggregate_periodic(&s, 33_000).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames[0].cells().iter().all(|c| *c == CellState::None));
        assert_eq!(frames[1].get(2, 3), CellState::On);
        assert_eq!(
            frames[1]
                .cells()
                .iter()
                .filter(|c| **c != CellState::None)
                .count(),
            1
        );
    }

    #[test]
    fn aggregate_zero_delta_t_rejected() {
        let s = EventStream::new(4, 4, vec![]).unwrap();
        assert!(matches!(
            aggregate_periodic(&s, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn aggregate_last_event_wins_on_ties() {
        let events = vec![ev(10, 1, 1, Polarity::On), ev(10, 1, 1, Polarity::Off)];
        let s = EventStream::new(4, 4, events).unwrap();
        let frames = aggregate_periodic(&s, 100).unwrap();
        assert_eq!(frames[0].get(1, 1), CellState::Off);
    }

    #[test]
    fn render_all_none_is_half() {
        let frame = EventFrame::empty(0, 33_000, 3, 2);
        let img = render_frame(&frame);
        assert!(img.values.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn render_single_on_cell() {
        let mut frame = EventFrame::empty(0, 33_000, 3, 2);
        frame.set(1, 0, CellState::On);
        let img = render_frame(&frame);
        assert_eq!(img.get(0, 1, 0), 1.0);
        assert_eq!(img.values.iter().filter(|v| **v == 0.5).count(), 5);
    }

    #[test]
    fn render_histogram_matches_event_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // one event per pixel so counts survive the last-wins rule
        let mut events = Vec::new();
        for y in 0..8u16 {
            for x in 0..8u16 {
                if rng.gen_bool(0.6) {
                    events.push(ev(
                        rng.gen_range(0..33_000),
                        x,
                        y,
                        if rng.gen_bool(0.5) {
                            Polarity::On
                        } else {
                            Polarity::Off
                        },
                    ));
                }
            }
        }
        let n_on = events.iter().filter(|e| e.p == Polarity::On).count();
        let n_off = events.len() - n_on;
        let s = EventStream::new(8, 8, events).unwrap();
        let frames = aggregate_periodic(&s, 33_000).unwrap();
        let img = render_frame(&frames[0]);
        assert_eq!(img.values.iter().filter(|v| **v == 1.0).count(), n_on);
        assert_eq!(img.values.iter().filter(|v| **v == 0.0).count(), n_off);
    }

    #[test]
    fn nearest_index_basic_and_ties() {
        assert_eq!(nearest_frame_index(&[0, 33_000, 66_000], 34_000).unwrap(), 1);
        assert_eq!(nearest_frame_index(&[0, 20_000], 10_000).unwrap(), 0);
        assert!(nearest_frame_index(&[], 5).is_err());
    }

    #[test]
    fn nearest_index_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ts: Vec<u64> = (0..1000).map(|_| rng.gen_range(0..1_000_000)).collect();
        ts.sort_unstable();
        for _ in 0..1000 {
            let q = rng.gen_range(0..1_100_000);
            let by_scan = ts
                .iter()
                .enumerate()
                .min_by_key(|(i, &t)| (t.abs_diff(q), *i))
                .unwrap()
                .0;
            assert_eq!(nearest_frame_index(&ts, q).unwrap(), by_scan);
        }
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec(
            (0u64..200_000, 0u16..8, 0u16..8, prop::bool::ANY),
            0..200,
        )
        .prop_map(|raw| {
            let events = raw
                .into_iter()
                .map(|(t, x, y, p)| {
                    ev(t, x, y, if p { Polarity::On } else { Polarity::Off })
                })
                .collect();
            EventStream::new(8, 8, events).unwrap()
        })
    }

    proptest! {
        #[test]
        fn aggregate_matches_naive_oracle(stream in arb_stream(), delta_t in 1u64..50_000) {
            let fast = aggregate_periodic(&stream, delta_t).unwrap();
            let naive = aggregate_naive(&stream, delta_t);
            prop_assert_eq!(fast, naive);
        }

        #[test]
        fn aggregation_concatenation(stream in arb_stream()) {
            // aggregating the whole stream equals aggregating each window's
            // restriction independently
            let delta_t = 33_000u64;
            let frames = aggregate_periodic(&stream, delta_t).unwrap();
            for (k, frame) in frames.iter().enumerate() {
                let t0 = k as u64 * delta_t;
                let sub: Vec<Event> = stream
                    .events()
                    .iter()
                    .copied()
                    .filter(|e| e.t >= t0 && e.t < t0 + delta_t)
                    .collect();
                let sub_stream = EventStream::new(8, 8, sub).unwrap();
                let sub_frames = aggregate_periodic(&sub_stream, delta_t).unwrap();
                if let Some(sf) = sub_frames.get(k) {
                    prop_assert_eq!(frame.cells(), sf.cells());
                } else {
                    prop_assert!(frame.cells().iter().all(|c| *c == CellState::None));
                }
            }
        }
    }
}
