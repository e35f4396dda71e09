//! Telemetry datasets: simulated generation, CSV interchange and
//! window-level splitting.

mod drive;
mod track;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{ControlInput, PoseState, VelocityState};
use crate::error::{Error, Result};

pub use drive::{pure_pursuit_drive, speed_profile, DriveConfig, SpeedProfile};
pub use track::{hausdorff, make_tracks, Point, Polyline, Projection, Track};

/// Column order of the telemetry CSV.
pub const CSV_HEADER: [&str; 12] = [
    "t", "x", "y", "theta", "vx", "vy", "omega", "throttle", "steer", "dthrottle", "dsteer", "session",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub t: f64,
    pub pose: PoseState,
    pub state: VelocityState,
    /// Input applied at `t`; the next row's throttle and steer include it.
    pub input: ControlInput,
    pub session: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rate_hz: f64,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(rate_hz: f64, records: Vec<Record>) -> Self {
        Self { rate_hz, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ts(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Contiguous rows `[start, start + len)`.
    pub fn excerpt(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.len() {
            return Err(Error::InsufficientData(format!(
                "excerpt [{start}, {}) exceeds {} rows",
                start + len,
                self.len()
            )));
        }
        Ok(Dataset::new(self.rate_hz, self.records[start..start + len].to_vec()))
    }

    /// The last `len` rows (or all of them when shorter).
    pub fn tail(&self, len: usize) -> Dataset {
        let start = self.len().saturating_sub(len);
        Dataset::new(self.rate_hz, self.records[start..].to_vec())
    }

    /// Row indices `t` such that rows `t - tau ..= t + horizon` exist and
    /// share one session.
    pub fn window_ends(&self, tau: usize, horizon: usize) -> Vec<usize> {
        let n = self.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let session = self.records[start].session;
            let mut end = start;
            while end + 1 < n && self.records[end + 1].session == session {
                end += 1;
            }
            // session occupies [start, end]
            let first = start + tau;
            if first + horizon <= end {
                out.extend(first..=end - horizon);
            }
            start = end + 1;
        }
        out
    }

    /// Number of `(start, horizon)` candidates that cross a session
    /// boundary and are therefore dropped.
    pub fn skipped_windows(&self, tau: usize, horizon: usize) -> usize {
        let n = self.len();
        let possible = n.saturating_sub(tau + horizon);
        possible.saturating_sub(self.window_ends(tau, horizon).len())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.records {
            let fields = [
                r.t,
                r.pose.x,
                r.pose.y,
                r.pose.theta,
                r.state.v_x,
                r.state.v_y,
                r.state.omega,
                r.state.throttle,
                r.state.steer,
                r.input.dthrottle,
                r.input.dsteer,
            ];
            let mut row: Vec<String> = fields.iter().map(|v| format!("{v:?}")).collect();
            row.push(r.session.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the telemetry CSV. Rows are numbered from 1, excluding the
    /// header. The sampling rate is inferred from the first session, rounded
    /// to 1e-6 Hz, and every spacing must agree with it to within 1e-6 s.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let schema = |reason: String| Error::CsvSchema {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(BufReader::new(file));
        let headers = rdr.headers().map_err(|e| schema(e.to_string()))?.clone();
        if headers.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(schema(format!(
                "expected header `{}`, found `{}`",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records: Vec<Record> = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i + 1;
            let row = row.map_err(|e| schema(format!("row {row_no}: {e}")))?;
            let mut vals = [0.0; 11];
            for (k, v) in vals.iter_mut().enumerate() {
                let raw = row[k].trim();
                let parsed: f64 = raw
                    .parse()
                    .map_err(|_| schema(format!("row {row_no}: field `{}` is not a number: `{raw}`", CSV_HEADER[k])))?;
                if !parsed.is_finite() {
                    return Err(Error::CsvNan {
                        path: path.to_path_buf(),
                        row: row_no,
                        field: CSV_HEADER[k],
                    });
                }
                *v = parsed;
            }
            let session: u32 = row[11]
                .trim()
                .parse()
                .map_err(|_| schema(format!("row {row_no}: field `session` is not an unsigned integer")))?;
            let rec = Record {
                t: vals[0],
                pose: PoseState::new(vals[1], vals[2], vals[3]),
                state: VelocityState::new(vals[4], vals[5], vals[6], vals[7], vals[8]),
                input: ControlInput::new(vals[9], vals[10]),
                session,
            };
            if let Some(prev) = records.last() {
                if prev.session == session && !(rec.t > prev.t) {
                    return Err(Error::CsvNonMonotone {
                        path: path.to_path_buf(),
                        row: row_no,
                        t: rec.t,
                        session,
                    });
                }
            }
            records.push(rec);
        }
        let dt = records
            .windows(2)
            .find(|w| w[0].session == w[1].session)
            .map(|w| w[1].t - w[0].t)
            .ok_or_else(|| schema("need two rows in one session to infer the sampling rate".into()))?;
        for (i, w) in records.windows(2).enumerate() {
            if w[0].session == w[1].session && ((w[1].t - w[0].t) - dt).abs() > 1e-6 {
                return Err(schema(format!(
                    "row {}: irregular spacing {} s (expected {dt} s)",
                    i + 2,
                    w[1].t - w[0].t
                )));
            }
        }
        // timestamp differences carry rounding noise; the rate feeds the integrator
        let rate_hz = (1e6 / dt).round() / 1e6;
        Ok(Dataset::new(rate_hz, records))
    }
}

/// Window end indices assigned to each side of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Random split of the valid windows (history `tau`, one-step target), so no
/// window belongs to both sides.
pub fn split(dataset: &Dataset, tau: usize, validation_fraction: f64, seed: u64) -> Result<WindowSplit> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::invalid(
            "validation_fraction",
            format!("must lie in (0, 1), got {validation_fraction}"),
        ));
    }
    let mut ends = dataset.window_ends(tau, 1);
    if ends.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} windows of history {tau}; need one on each side of the split",
            ends.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ends.shuffle(&mut rng);
    let n_val = ((ends.len() as f64 * validation_fraction).round() as usize).clamp(1, ends.len() - 1);
    let validation = ends.split_off(ends.len() - n_val);
    Ok(WindowSplit {
        train: ends,
        validation,
    })
}
