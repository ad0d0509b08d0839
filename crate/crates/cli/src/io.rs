//! Atomic file output, digests and the CSV log formats.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use caccsim_core::engine::Recorder;
use caccsim_core::{Event, EventKind, PlatoonId, Role, TrajectorySample, VehicleClass, VehicleId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const EVENTS: &str = "events.csv";
pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";
pub const REPORT: &str = "report.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Passes writes through while hashing them.
pub struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, hasher: Sha256::new() }
    }

    pub fn finish(self) -> (W, String) {
        (self.inner, hex::encode(self.hasher.finalize()))
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Passes reads through while hashing them.
pub struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, hasher: Sha256::new() }
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

/// A file that only appears under its final name once `commit` succeeds.
/// Dropping it uncommitted removes the temporary file.
pub struct AtomicFile {
    tmp: BufWriter<NamedTempFile>,
    dest: std::path::PathBuf,
}

impl AtomicFile {
    pub fn create(dest: &Path) -> Result<Self> {
        let dir = dest.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = dest.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let prefix = format!(".{name}.");
        let mut builder = tempfile::Builder::new();
        builder.prefix(&prefix).suffix(".tmp");
        // Temporary files default to owner-only access; outputs are ordinary files.
        #[cfg(unix)]
        builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
        let tmp = builder
            .tempfile_in(dir)
            .with_context(|| format!("cannot create a file in {}", dir.display()))?;
        Ok(Self { tmp: BufWriter::new(tmp), dest: dest.to_path_buf() })
    }

    pub fn commit(self) -> Result<()> {
        let tmp = self.tmp.into_inner().map_err(|e| e.into_error())?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.dest).with_context(|| format!("cannot write {}", self.dest.display()))?;
        Ok(())
    }
}

impl Write for AtomicFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tmp.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.tmp.flush()
    }
}

pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = AtomicFile::create(dest)?;
    f.write_all(bytes)?;
    f.commit()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(dest: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(dest, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("missing {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

/// One row of trajectories.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time_s: f64,
    pub vehicle_id: u64,
    pub class: VehicleClass,
    pub lane: usize,
    pub position_m: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub platoon_id: Option<u64>,
    pub role: Role,
    pub leader_id: Option<u64>,
    pub leader_class: Option<VehicleClass>,
}

impl From<&TrajectorySample> for TrajectoryRow {
    fn from(s: &TrajectorySample) -> Self {
        Self {
            time_s: s.time,
            vehicle_id: s.vehicle_id.0,
            class: s.class,
            lane: s.lane,
            position_m: s.position,
            speed_mps: s.speed,
            accel_mps2: s.accel,
            platoon_id: s.platoon_id.map(|p| p.0),
            role: s.role,
            leader_id: s.leader_id.map(|l| l.0),
            leader_class: s.leader_class,
        }
    }
}

impl From<TrajectoryRow> for TrajectorySample {
    fn from(r: TrajectoryRow) -> Self {
        Self {
            time: r.time_s,
            vehicle_id: VehicleId(r.vehicle_id),
            class: r.class,
            lane: r.lane,
            position: r.position_m,
            speed: r.speed_mps,
            accel: r.accel_mps2,
            platoon_id: r.platoon_id.map(PlatoonId),
            role: r.role,
            leader_id: r.leader_id.map(VehicleId),
            leader_class: r.leader_class,
        }
    }
}

/// One row of events.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub time_s: f64,
    pub vehicle_id: u64,
    pub class: VehicleClass,
    pub kind: String,
    pub from_lane: usize,
    pub to_lane: usize,
    pub platoon_id: Option<u64>,
}

impl From<&Event> for EventRow {
    fn from(e: &Event) -> Self {
        Self {
            time_s: e.time,
            vehicle_id: e.vehicle_id.0,
            class: e.class,
            kind: e.kind.as_str().to_string(),
            from_lane: e.from_lane,
            to_lane: e.to_lane,
            platoon_id: e.platoon_id.map(|p| p.0),
        }
    }
}

impl TryFrom<EventRow> for Event {
    type Error = anyhow::Error;

    fn try_from(r: EventRow) -> Result<Self> {
        let kind = EventKind::parse(&r.kind).ok_or_else(|| anyhow!("unknown event kind {:?}", r.kind))?;
        Ok(Self {
            time: r.time_s,
            vehicle_id: VehicleId(r.vehicle_id),
            class: r.class,
            kind,
            from_lane: r.from_lane,
            to_lane: r.to_lane,
            platoon_id: r.platoon_id.map(PlatoonId),
        })
    }
}

type LogWriter = csv::Writer<HashingWriter<AtomicFile>>;

// Headers are written explicitly so that they are present even for an empty log.
fn log_writer(dest: &Path) -> Result<LogWriter> {
    let file = HashingWriter::new(AtomicFile::create(dest)?);
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn close(w: LogWriter) -> Result<(AtomicFile, String)> {
    let inner = w.into_inner().map_err(|e| anyhow!("flushing log: {}", e.error()))?;
    Ok(inner.finish())
}

/// Streams a run's records into trajectories.csv and events.csv.
pub struct CsvRecorder {
    trajectories: LogWriter,
    events: LogWriter,
    error: Option<csv::Error>,
}

/// Finished but not yet committed log files with their digests.
pub struct PendingLogs {
    files: Vec<(AtomicFile, &'static str, String)>,
}

impl PendingLogs {
    /// `(file name, sha256)` of each log.
    pub fn digests(&self) -> Vec<(&'static str, String)> {
        self.files.iter().map(|(_, n, d)| (*n, d.clone())).collect()
    }

    pub fn commit(self) -> Result<()> {
        for (f, _, _) in self.files {
            f.commit()?;
        }
        Ok(())
    }
}

impl CsvRecorder {
    pub fn create(dir: &Path) -> Result<Self> {
        let mut trajectories = log_writer(&dir.join(TRAJECTORIES))?;
        let mut events = log_writer(&dir.join(EVENTS))?;
        trajectories.write_record(TRAJECTORY_COLUMNS)?;
        events.write_record(EVENT_COLUMNS)?;
        Ok(Self { trajectories, events, error: None })
    }

    pub fn finish(self) -> Result<PendingLogs> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        let (t, td) = close(self.trajectories)?;
        let (e, ed) = close(self.events)?;
        Ok(PendingLogs { files: vec![(t, TRAJECTORIES, td), (e, EVENTS, ed)] })
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 11] = [
    "time_s",
    "vehicle_id",
    "class",
    "lane",
    "position_m",
    "speed_mps",
    "accel_mps2",
    "platoon_id",
    "role",
    "leader_id",
    "leader_class",
];

pub const EVENT_COLUMNS: [&str; 7] = ["time_s", "vehicle_id", "class", "kind", "from_lane", "to_lane", "platoon_id"];

impl Recorder for CsvRecorder {
    fn sample(&mut self, sample: &TrajectorySample) {
        if self.error.is_none() {
            self.error = self.trajectories.serialize(TrajectoryRow::from(sample)).err();
        }
    }

    fn event(&mut self, event: &Event) {
        if self.error.is_none() {
            self.error = self.events.serialize(EventRow::from(event)).err();
        }
    }
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str], path: &Path) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(anyhow!("{}: unexpected columns {:?}", path.display(), header));
    }
    Ok(())
}

/// Feeds every row of trajectories.csv to `f`; returns the file's digest.
pub fn read_trajectories(path: &Path, mut f: impl FnMut(TrajectorySample)) -> Result<String> {
    let file = File::open(path).with_context(|| format!("missing {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(HashingReader::new(BufReader::new(file)));
    check_header(&mut reader, &TRAJECTORY_COLUMNS, path)?;
    for row in reader.deserialize::<TrajectoryRow>() {
        let row = row.with_context(|| format!("reading {}", path.display()))?;
        f(row.into());
    }
    Ok(reader.into_inner().finish())
}

/// Feeds every row of events.csv to `f`; returns the file's digest.
pub fn read_events(path: &Path, mut f: impl FnMut(Event)) -> Result<String> {
    let file = File::open(path).with_context(|| format!("missing {}", path.display()))?;
    let mut reader = csv::Reader::from_reader(HashingReader::new(BufReader::new(file)));
    check_header(&mut reader, &EVENT_COLUMNS, path)?;
    for row in reader.deserialize::<EventRow>() {
        let row = row.with_context(|| format!("reading {}", path.display()))?;
        f(row.try_into()?);
    }
    Ok(reader.into_inner().finish())
}
