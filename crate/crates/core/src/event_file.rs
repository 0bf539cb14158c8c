//! HOMX binary event files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `48 4F 4D 58` ("HOMX")                 |
//! | 4      | 2    | format version (u16)                         |
//! | 6      | 8    | bunch frequency in Hz (f64)                  |
//! | 14     | 8    | record count (u64)                           |
//! | 22     | 1    | record type: 0 = integer pair, 1 = amplitude |
//! | 23     | 9    | reserved, zero                               |
//!
//! followed by 16-byte records. Integer pair: pulse index (u64), count_a
//! (u8), count_b (u8), flags (u8), 5 zero bytes. Amplitude: pulse index
//! (u64), amplitude_a (f32), amplitude_b (f32).

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::detector::Calibration;
use crate::error::{Error, Result};
use crate::event_engine::{
    classify, classify_parallel, AmplitudeRecord, CoincidenceCounters, PulseOutcome,
    PulseSimulator, BATCH_SIZE,
};

pub const MAGIC: [u8; 4] = *b"HOMX";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RecordType {
    IntegerPair = 0,
    AmplitudePair = 1,
}

impl RecordType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(RecordType::IntegerPair),
            1 => Some(RecordType::AmplitudePair),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub version: u16,
    pub bunch_frequency_hz: f64,
    pub record_count: u64,
    pub record_type: RecordType,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..14].copy_from_slice(&self.bunch_frequency_hz.to_le_bytes());
        b[14..22].copy_from_slice(&self.record_count.to_le_bytes());
        b[22] = self.record_type as u8;
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: b.len() as u64,
                message: format!("header truncated, need {HEADER_LEN} bytes"),
            });
        }
        if b[0..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:02X?}", &b[0..4]),
            });
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let bunch_frequency_hz = f64::from_le_bytes(b[6..14].try_into().unwrap());
        let record_count = u64::from_le_bytes(b[14..22].try_into().unwrap());
        let record_type = RecordType::from_tag(b[22]).ok_or_else(|| Error::Format {
            offset: 22,
            message: format!("unknown record type {}", b[22]),
        })?;
        Ok(Self {
            version,
            bunch_frequency_hz,
            record_count,
            record_type,
        })
    }
}

pub fn encode_outcome(o: &PulseOutcome) -> [u8; RECORD_LEN] {
    let mut b = [0u8; RECORD_LEN];
    b[0..8].copy_from_slice(&o.pulse_index.to_le_bytes());
    b[8] = o.count_a;
    b[9] = o.count_b;
    b[10] = o.flags;
    b
}

pub fn decode_outcome(b: &[u8; RECORD_LEN]) -> PulseOutcome {
    PulseOutcome {
        pulse_index: u64::from_le_bytes(b[0..8].try_into().unwrap()),
        count_a: b[8],
        count_b: b[9],
        flags: b[10],
    }
}

pub fn encode_amplitude(r: &AmplitudeRecord) -> [u8; RECORD_LEN] {
    let mut b = [0u8; RECORD_LEN];
    b[0..8].copy_from_slice(&r.pulse_index.to_le_bytes());
    b[8..12].copy_from_slice(&r.amplitude_a.to_le_bytes());
    b[12..16].copy_from_slice(&r.amplitude_b.to_le_bytes());
    b
}

pub fn decode_amplitude(b: &[u8; RECORD_LEN]) -> AmplitudeRecord {
    AmplitudeRecord {
        pulse_index: u64::from_le_bytes(b[0..8].try_into().unwrap()),
        amplitude_a: f32::from_le_bytes(b[8..12].try_into().unwrap()),
        amplitude_b: f32::from_le_bytes(b[12..16].try_into().unwrap()),
    }
}

/// Streaming writer. The record count is fixed up front and checked when
/// the writer is finished.
pub struct EventWriter<W: Write> {
    out: W,
    header: Header,
    written: u64,
    last_index: Option<u64>,
}

impl EventWriter<BufWriter<File>> {
    pub fn create(
        path: &Path,
        bunch_frequency_hz: f64,
        record_count: u64,
        record_type: RecordType,
    ) -> Result<Self> {
        let file = File::create(path)?;
        Self::new(
            BufWriter::with_capacity(1 << 20, file),
            bunch_frequency_hz,
            record_count,
            record_type,
        )
    }
}

impl<W: Write> EventWriter<W> {
    pub fn new(
        mut out: W,
        bunch_frequency_hz: f64,
        record_count: u64,
        record_type: RecordType,
    ) -> Result<Self> {
        let header = Header {
            version: VERSION,
            bunch_frequency_hz,
            record_count,
            record_type,
        };
        out.write_all(&header.encode())?;
        Ok(Self {
            out,
            header,
            written: 0,
            last_index: None,
        })
    }

    fn check_index(&mut self, index: u64, expected: RecordType) -> Result<()> {
        if self.header.record_type != expected {
            return Err(Error::domain("record type does not match file header"));
        }
        if self.last_index.is_some_and(|last| index <= last) {
            return Err(Error::domain(format!("pulse index {index} not increasing")));
        }
        if self.written == self.header.record_count {
            return Err(Error::domain("more records than declared in the header"));
        }
        self.last_index = Some(index);
        self.written += 1;
        Ok(())
    }

    pub fn write_outcome(&mut self, o: &PulseOutcome) -> Result<()> {
        self.check_index(o.pulse_index, RecordType::IntegerPair)?;
        self.out.write_all(&encode_outcome(o))?;
        Ok(())
    }

    pub fn write_amplitude(&mut self, r: &AmplitudeRecord) -> Result<()> {
        self.check_index(r.pulse_index, RecordType::AmplitudePair)?;
        self.out.write_all(&encode_amplitude(r))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.record_count {
            return Err(Error::domain(format!(
                "wrote {} records, header declares {}",
                self.written, self.header.record_count
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Pairs(Vec<PulseOutcome>),
    Amplitudes(Vec<AmplitudeRecord>),
}

/// Chunked reader; every short read is reported with its byte offset.
pub struct EventReader<R: Read> {
    input: R,
    header: Header,
    read: u64,
}

impl EventReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::with_capacity(1 << 20, File::open(path)?))
    }
}

impl<R: Read> EventReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut buf = [0u8; HEADER_LEN];
        let got = read_full(&mut input, &mut buf)?;
        let header = Header::decode(&buf[..got])?;
        Ok(Self {
            input,
            header,
            read: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    fn offset(&self) -> u64 {
        HEADER_LEN as u64 + self.read * RECORD_LEN as u64
    }

    fn next_raw(&mut self) -> Result<Option<[u8; RECORD_LEN]>> {
        if self.read == self.header.record_count {
            return Ok(None);
        }
        let mut b = [0u8; RECORD_LEN];
        let got = read_full(&mut self.input, &mut b)?;
        if got < RECORD_LEN {
            return Err(Error::Format {
                offset: self.offset() + got as u64,
                message: format!(
                    "file truncated in record {} of {}",
                    self.read, self.header.record_count
                ),
            });
        }
        self.read += 1;
        Ok(Some(b))
    }

    /// Up to `max` integer records; empty at end of file.
    pub fn next_outcomes(&mut self, max: usize, out: &mut Vec<PulseOutcome>) -> Result<()> {
        if self.header.record_type != RecordType::IntegerPair {
            return Err(Error::Format {
                offset: 22,
                message: "file holds amplitude records".into(),
            });
        }
        out.clear();
        while out.len() < max {
            match self.next_raw()? {
                Some(b) => out.push(decode_outcome(&b)),
                None => break,
            }
        }
        Ok(())
    }

    pub fn next_amplitudes(&mut self, max: usize, out: &mut Vec<AmplitudeRecord>) -> Result<()> {
        if self.header.record_type != RecordType::AmplitudePair {
            return Err(Error::Format {
                offset: 22,
                message: "file holds integer records".into(),
            });
        }
        out.clear();
        while out.len() < max {
            match self.next_raw()? {
                Some(b) => out.push(decode_amplitude(&b)),
                None => break,
            }
        }
        Ok(())
    }

    pub fn read_all(mut self) -> Result<Records> {
        let n = self.header.record_count as usize;
        match self.header.record_type {
            RecordType::IntegerPair => {
                let mut v = Vec::with_capacity(n.min(1 << 24));
                self.next_outcomes(usize::MAX, &mut v)?;
                Ok(Records::Pairs(v))
            }
            RecordType::AmplitudePair => {
                let mut v = Vec::with_capacity(n.min(1 << 24));
                self.next_amplitudes(usize::MAX, &mut v)?;
                Ok(Records::Amplitudes(v))
            }
        }
    }
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match input.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

/// Records held in memory at once by the streaming helpers below.
const CHUNK: u64 = 16 * BATCH_SIZE;

/// Simulates pulses `0..n_pulses` into `out` and returns their counters.
/// Amplitude files are digitized with the simulator's calibration, so both
/// record types yield the same counters for the same seed.
pub fn write_simulated<W: Write>(
    sim: &PulseSimulator,
    n_pulses: u64,
    record_type: RecordType,
    out: W,
    pool: &rayon::ThreadPool,
) -> Result<(CoincidenceCounters, W)> {
    let f = sim.config().bunch_frequency_hz;
    let mut writer = EventWriter::new(out, f, n_pulses, record_type)?;
    let mut counters = sim.new_counters();
    let mut start = 0;
    while start < n_pulses {
        let end = (start + CHUNK).min(n_pulses);
        match record_type {
            RecordType::IntegerPair => {
                let chunk: Vec<PulseOutcome> = pool.install(|| {
                    (start..end)
                        .into_par_iter()
                        .map(|i| sim.simulate_pulse(i))
                        .collect()
                });
                for o in &chunk {
                    writer.write_outcome(o)?;
                    classify(o, &mut counters);
                }
            }
            RecordType::AmplitudePair => {
                let chunk: Vec<AmplitudeRecord> = pool.install(|| {
                    (start..end)
                        .into_par_iter()
                        .map(|i| sim.simulate_amplitudes(i))
                        .collect()
                });
                let cal = &sim.config().calibration;
                for r in &chunk {
                    writer.write_amplitude(r)?;
                    classify(&r.digitize(cal), &mut counters);
                }
            }
        }
        start = end;
    }
    Ok((counters, writer.finish()?))
}

/// Counts a stored stream. Amplitude files need a calibration; integer
/// files are binned into a matrix of side `max_resolvable + 1`.
pub fn count_events<R: Read>(
    mut reader: EventReader<R>,
    calibration: Option<&Calibration>,
    max_resolvable: u8,
    pool: &rayon::ThreadPool,
) -> Result<CoincidenceCounters> {
    let f = reader.header().bunch_frequency_hz;
    let mut counters = CoincidenceCounters::new(max_resolvable, f);
    let chunk = CHUNK as usize;
    match reader.header().record_type {
        RecordType::IntegerPair => {
            let mut buf = Vec::with_capacity(chunk);
            loop {
                reader.next_outcomes(chunk, &mut buf)?;
                if buf.is_empty() {
                    break;
                }
                counters.merge_from(&classify_parallel(&buf, max_resolvable, f, pool))?;
            }
        }
        RecordType::AmplitudePair => {
            let cal = calibration.ok_or_else(|| {
                Error::Calibration("amplitude records need a calibration file to digitize".into())
            })?;
            if cal.max_resolvable() != max_resolvable {
                return Err(Error::DimensionMismatch {
                    left: max_resolvable as usize + 1,
                    right: cal.max_resolvable() as usize + 1,
                });
            }
            let mut buf = Vec::with_capacity(chunk);
            loop {
                reader.next_amplitudes(chunk, &mut buf)?;
                if buf.is_empty() {
                    break;
                }
                let digitized: Vec<PulseOutcome> =
                    pool.install(|| buf.par_iter().map(|r| r.digitize(cal)).collect());
                counters.merge_from(&classify_parallel(&digitized, max_resolvable, f, pool))?;
            }
        }
    }
    Ok(counters)
}
