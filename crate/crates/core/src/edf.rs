//! EDF/EDF+ container reading and writing, hypnogram annotations, channel
//! selection, resampling and epoch extraction.
//!
//! Layout handled here: a 256-byte ASCII fixed header, 256 bytes of ASCII
//! per-signal header, then `n_records` data records, each holding
//! `samples_per_record` little-endian `i16` samples for every signal in
//! header order. EDF+ annotation channels (label `EDF Annotations`) carry
//! TAL byte streams in the same 16-bit slots.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIXED_HEADER_BYTES: usize = 256;
pub const SIGNAL_HEADER_BYTES: usize = 256;
pub const ANNOTATION_LABEL: &str = "EDF Annotations";

const TAL_DURATION: u8 = 0x15;
const TAL_SEPARATOR: u8 = 0x14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl SignalHeader {
    /// A plain EEG-style channel header with the full 16-bit digital range.
    pub fn new(label: &str, physical_min: f64, physical_max: f64, samples_per_record: usize) -> Self {
        Self {
            label: label.to_string(),
            transducer: String::new(),
            physical_dimension: "uV".to_string(),
            physical_min,
            physical_max,
            digital_min: i16::MIN as i32,
            digital_max: i16::MAX as i32,
            prefiltering: String::new(),
            samples_per_record,
        }
    }

    pub fn annotations(samples_per_record: usize) -> Self {
        Self {
            label: ANNOTATION_LABEL.to_string(),
            transducer: String::new(),
            physical_dimension: String::new(),
            physical_min: -1.0,
            physical_max: 1.0,
            digital_min: i16::MIN as i32,
            digital_max: i16::MAX as i32,
            prefiltering: String::new(),
            samples_per_record,
        }
    }

    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATION_LABEL
    }

    /// Affine digital -> physical conversion.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let scale = (self.physical_max - self.physical_min)
            / (self.digital_max as f64 - self.digital_min as f64);
        self.physical_min + (digital as f64 - self.digital_min as f64) * scale
    }

    /// Inverse of [`to_physical`](Self::to_physical), rounded and clamped to the digital range.
    pub fn to_digital(&self, physical: f64) -> i16 {
        let scale = (self.digital_max as f64 - self.digital_min as f64)
            / (self.physical_max - self.physical_min);
        let d = ((physical - self.physical_min) * scale + self.digital_min as f64).round();
        d.clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.digital_min >= self.digital_max {
            return Err(Error::EdfInvalid(format!(
                "signal {index} ({}): digital_min {} >= digital_max {}",
                self.label, self.digital_min, self.digital_max
            )));
        }
        if self.physical_min == self.physical_max {
            return Err(Error::EdfInvalid(format!(
                "signal {index} ({}): physical_min equals physical_max",
                self.label
            )));
        }
        if self.digital_min < i16::MIN as i32 || self.digital_max > i16::MAX as i32 {
            return Err(Error::EdfInvalid(format!(
                "signal {index} ({}): digital range exceeds 16 bits",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfHeader {
    pub version: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start: NaiveDateTime,
    pub header_bytes: usize,
    /// `EDF+C` / `EDF+D` for EDF+ files, blank for plain EDF.
    pub reserved: String,
    pub n_records: usize,
    pub record_duration_s: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    /// Header for a new recording; `header_bytes` is derived from the signal count.
    pub fn new(n_records: usize, record_duration_s: f64, signals: Vec<SignalHeader>) -> Self {
        let start = NaiveDate::from_ymd_opt(2000, 1, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid constant date");
        let plus = signals.iter().any(SignalHeader::is_annotation);
        Self {
            version: "0".to_string(),
            patient_id: "X X X X".to_string(),
            recording_id: "Startdate X X X X".to_string(),
            start,
            header_bytes: FIXED_HEADER_BYTES + SIGNAL_HEADER_BYTES * signals.len(),
            reserved: if plus { "EDF+C".to_string() } else { String::new() },
            n_records,
            record_duration_s,
            signals,
        }
    }

    /// Bytes occupied by one data record.
    pub fn record_bytes(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record * 2).sum()
    }

    pub fn is_annotation_only(&self) -> bool {
        !self.signals.is_empty() && self.signals.iter().all(SignalHeader::is_annotation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSignal {
    pub channel: String,
    pub rate_hz: f64,
    pub samples: Vec<f64>,
}

impl SampledSignal {
    pub fn new(channel: impl Into<String>, rate_hz: f64, samples: Vec<f64>) -> Self {
        Self {
            channel: channel.into(),
            rate_hz,
            samples,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepAnnotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub stage_label: String,
}

impl SleepAnnotation {
    pub fn new(onset_s: f64, duration_s: f64, stage_label: impl Into<String>) -> Self {
        Self {
            onset_s,
            duration_s,
            stage_label: stage_label.into(),
        }
    }
}

/// A fixed-length annotated window of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesEpoch {
    pub samples: Vec<f64>,
    pub stage: usize,
    pub source_id: String,
    /// Position of the window within its recording, counted in epochs.
    pub index: usize,
}

/// A parsed EDF file with its raw digital samples, one vector per signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub digital: Vec<Vec<i16>>,
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let record_bytes = header.record_bytes();
        let data = &bytes[header.header_bytes..];
        let available = data.len().checked_div(record_bytes).unwrap_or(header.n_records);
        if available < header.n_records {
            return Err(Error::EdfTruncated {
                expected: header.n_records,
                actual: available,
            });
        }

        let mut digital: Vec<Vec<i16>> = header
            .signals
            .iter()
            .map(|s| Vec::with_capacity(s.samples_per_record * header.n_records))
            .collect();
        let mut pos = 0;
        for _ in 0..header.n_records {
            for (sig, out) in header.signals.iter().zip(digital.iter_mut()) {
                let chunk = &data[pos..pos + sig.samples_per_record * 2];
                out.extend(chunk.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
                pos += chunk.len();
            }
        }
        Ok(Self { header, digital })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_edf(&self.header, &self.digital)
    }

    /// Physical-unit signals, annotation channels excluded.
    pub fn signals(&self) -> Vec<SampledSignal> {
        self.header
            .signals
            .iter()
            .zip(&self.digital)
            .filter(|(h, _)| !h.is_annotation())
            .map(|(h, d)| {
                let rate_hz = h.samples_per_record as f64 / self.header.record_duration_s;
                SampledSignal::new(h.label.trim(), rate_hz, d.iter().map(|&v| h.to_physical(v)).collect())
            })
            .collect()
    }

    /// Annotations decoded from every `EDF Annotations` channel.
    pub fn annotations(&self) -> Result<Vec<SleepAnnotation>> {
        let mut out = Vec::new();
        for (h, d) in self.header.signals.iter().zip(&self.digital) {
            if !h.is_annotation() {
                continue;
            }
            let bytes = samples_to_bytes(d);
            for record in bytes.chunks(h.samples_per_record * 2) {
                out.extend(parse_tal(record)?);
            }
        }
        sort_annotations(&mut out);
        Ok(out)
    }
}

/// Parse an EDF/EDF+ byte buffer into its header and physical-unit signals.
pub fn parse_edf(bytes: &[u8]) -> Result<(EdfHeader, Vec<SampledSignal>)> {
    let file = EdfFile::parse(bytes)?;
    let signals = file.signals();
    Ok((file.header, signals))
}

/// Serialize a header plus one digital sample vector per signal.
pub fn write_edf(header: &EdfHeader, digital: &[Vec<i16>]) -> Result<Vec<u8>> {
    if digital.len() != header.signals.len() {
        return Err(Error::EdfInvalid(format!(
            "header lists {} signals, {} sample vectors given",
            header.signals.len(),
            digital.len()
        )));
    }
    for (i, (sig, samples)) in header.signals.iter().zip(digital).enumerate() {
        sig.validate(i)?;
        if samples.len() != sig.samples_per_record * header.n_records {
            return Err(Error::EdfInvalid(format!(
                "signal {i} ({}): {} samples but {} per record x {} records",
                sig.label,
                samples.len(),
                sig.samples_per_record,
                header.n_records
            )));
        }
    }
    if header.signals.len() > 9999 {
        return Err(Error::EdfInvalid("more than 9999 signals".into()));
    }

    let ns = header.signals.len();
    let header_bytes = FIXED_HEADER_BYTES + SIGNAL_HEADER_BYTES * ns;
    let mut out = Vec::with_capacity(header_bytes + header.record_bytes() * header.n_records);

    push_field(&mut out, &header.version, 8);
    push_field(&mut out, &header.patient_id, 80);
    push_field(&mut out, &header.recording_id, 80);
    let start = header.start;
    push_field(
        &mut out,
        &format!("{:02}.{:02}.{:02}", start.day(), start.month(), start.year() % 100),
        8,
    );
    push_field(
        &mut out,
        &format!("{:02}.{:02}.{:02}", start.hour(), start.minute(), start.second()),
        8,
    );
    push_field(&mut out, &header_bytes.to_string(), 8);
    push_field(&mut out, &header.reserved, 44);
    push_field(&mut out, &header.n_records.to_string(), 8);
    push_field(&mut out, &format_real(header.record_duration_s, 8)?, 8);
    push_field(&mut out, &ns.to_string(), 4);

    let sigs = &header.signals;
    sigs.iter().for_each(|s| push_field(&mut out, &s.label, 16));
    sigs.iter().for_each(|s| push_field(&mut out, &s.transducer, 80));
    sigs.iter().for_each(|s| push_field(&mut out, &s.physical_dimension, 8));
    for s in sigs {
        push_field(&mut out, &format_real(s.physical_min, 8)?, 8);
    }
    for s in sigs {
        push_field(&mut out, &format_real(s.physical_max, 8)?, 8);
    }
    sigs.iter().for_each(|s| push_field(&mut out, &s.digital_min.to_string(), 8));
    sigs.iter().for_each(|s| push_field(&mut out, &s.digital_max.to_string(), 8));
    sigs.iter().for_each(|s| push_field(&mut out, &s.prefiltering, 80));
    sigs.iter().for_each(|s| push_field(&mut out, &s.samples_per_record.to_string(), 8));
    sigs.iter().for_each(|_| push_field(&mut out, "", 32));
    debug_assert_eq!(out.len(), header_bytes);

    for r in 0..header.n_records {
        for (sig, samples) in sigs.iter().zip(digital) {
            let n = sig.samples_per_record;
            for v in &samples[r * n..(r + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn push_field(out: &mut Vec<u8>, value: &str, width: usize) {
    let mut bytes: Vec<u8> = value
        .bytes()
        .map(|b| if (0x20..0x7f).contains(&b) { b } else { b'?' })
        .take(width)
        .collect();
    bytes.resize(width, b' ');
    out.extend_from_slice(&bytes);
}

/// Shortest decimal text of `v` fitting `width` characters.
fn format_real(v: f64, width: usize) -> Result<String> {
    let s = format!("{v}");
    if s.len() <= width {
        return Ok(s);
    }
    for prec in (0..width).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= width {
            return Ok(s);
        }
    }
    Err(Error::EdfInvalid(format!("value {v} does not fit an {width}-character field")))
}

struct FieldReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> FieldReader<'a> {
    fn text(&mut self, width: usize) -> Result<String> {
        let end = self.pos + width;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| Error::EdfHeader {
            offset: self.bytes.len(),
            reason: format!("header ends before field at byte {}", self.pos),
        })?;
        let s = String::from_utf8_lossy(slice).trim().to_string();
        self.pos = end;
        Ok(s)
    }

    fn number<T: std::str::FromStr>(&mut self, width: usize, name: &str) -> Result<T> {
        let offset = self.pos;
        let s = self.text(width)?;
        s.parse().map_err(|_| Error::EdfHeader {
            offset,
            reason: format!("{name} is not numeric: {s:?}"),
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<EdfHeader> {
    if bytes.len() < FIXED_HEADER_BYTES {
        return Err(Error::EdfHeader {
            offset: bytes.len(),
            reason: format!("file is {} bytes, shorter than the 256-byte header", bytes.len()),
        });
    }
    let mut r = FieldReader { bytes, pos: 0 };
    let version = r.text(8)?;
    let patient_id = r.text(80)?;
    let recording_id = r.text(80)?;
    let date_offset = r.pos;
    let date = r.text(8)?;
    let time = r.text(8)?;
    let start = parse_start(&date, &time).ok_or_else(|| Error::EdfHeader {
        offset: date_offset,
        reason: format!("bad start date/time {date:?} {time:?}"),
    })?;
    let hb_offset = r.pos;
    let header_bytes: usize = r.number(8, "header byte count")?;
    let reserved = r.text(44)?;
    let nr_offset = r.pos;
    let n_records: i64 = r.number(8, "number of data records")?;
    let duration_offset = r.pos;
    let record_duration_s: f64 = r.number(8, "data record duration")?;
    let ns: usize = r.number(4, "number of signals")?;

    if header_bytes != FIXED_HEADER_BYTES + SIGNAL_HEADER_BYTES * ns {
        return Err(Error::EdfHeader {
            offset: hb_offset,
            reason: format!("header byte count {header_bytes} inconsistent with {ns} signals"),
        });
    }
    if bytes.len() < header_bytes {
        return Err(Error::EdfHeader {
            offset: bytes.len(),
            reason: format!("signal headers need {header_bytes} bytes, file has {}", bytes.len()),
        });
    }

    let mut labels = Vec::with_capacity(ns);
    let mut transducers = Vec::with_capacity(ns);
    let mut dims = Vec::with_capacity(ns);
    let mut pmins = Vec::with_capacity(ns);
    let mut pmaxs = Vec::with_capacity(ns);
    let mut dmins = Vec::with_capacity(ns);
    let mut dmaxs = Vec::with_capacity(ns);
    let mut prefilters = Vec::with_capacity(ns);
    let mut spr = Vec::with_capacity(ns);
    for _ in 0..ns {
        labels.push(r.text(16)?);
    }
    for _ in 0..ns {
        transducers.push(r.text(80)?);
    }
    for _ in 0..ns {
        dims.push(r.text(8)?);
    }
    for _ in 0..ns {
        pmins.push(r.number::<f64>(8, "physical minimum")?);
    }
    for _ in 0..ns {
        pmaxs.push(r.number::<f64>(8, "physical maximum")?);
    }
    for _ in 0..ns {
        dmins.push(r.number::<i32>(8, "digital minimum")?);
    }
    for _ in 0..ns {
        dmaxs.push(r.number::<i32>(8, "digital maximum")?);
    }
    for _ in 0..ns {
        prefilters.push(r.text(80)?);
    }
    for _ in 0..ns {
        spr.push(r.number::<usize>(8, "samples per record")?);
    }

    let signals: Vec<SignalHeader> = (0..ns)
        .map(|i| SignalHeader {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: pmins[i],
            physical_max: pmaxs[i],
            digital_min: dmins[i],
            digital_max: dmaxs[i],
            prefiltering: prefilters[i].clone(),
            samples_per_record: spr[i],
        })
        .collect();
    for (i, s) in signals.iter().enumerate() {
        s.validate(i).map_err(|e| Error::EdfHeader {
            offset: FIXED_HEADER_BYTES + 8 * ns * 13 + i,
            reason: e.to_string(),
        })?;
    }
    let annotation_only = !signals.is_empty() && signals.iter().all(SignalHeader::is_annotation);
    if record_duration_s < 0.0 || (record_duration_s == 0.0 && !annotation_only) {
        return Err(Error::EdfHeader {
            offset: duration_offset,
            reason: format!("data record duration must be positive, got {record_duration_s}"),
        });
    }

    let record_bytes: usize = signals.iter().map(|s| s.samples_per_record * 2).sum();
    let n_records = match n_records {
        -1 if record_bytes > 0 => (bytes.len() - header_bytes) / record_bytes,
        n if n < 0 => {
            return Err(Error::EdfHeader {
                offset: nr_offset,
                reason: format!("negative record count {n}"),
            })
        }
        n => n as usize,
    };

    Ok(EdfHeader {
        version,
        patient_id,
        recording_id,
        start,
        header_bytes,
        reserved,
        n_records,
        record_duration_s,
        signals,
    })
}

fn parse_start(date: &str, time: &str) -> Option<NaiveDateTime> {
    let d: Vec<u32> = date.split('.').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    let t: Vec<u32> = time.split('.').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    if d.len() != 3 || t.len() != 3 {
        return None;
    }
    // EDF clipping date: two-digit years 85..99 are 19xx.
    let year = if d[2] >= 85 { 1900 + d[2] } else { 2000 + d[2] } as i32;
    let date = NaiveDate::from_ymd_opt(year, d[1], d[0])?;
    let time = NaiveTime::from_hms_opt(t[0], t[1], t[2])?;
    Some(date.and_time(time))
}

fn samples_to_bytes(samples: &[i16]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

fn bytes_to_samples(bytes: &[u8]) -> Vec<i16> {
    bytes
        .chunks(2)
        .map(|c| i16::from_le_bytes([c[0], c.get(1).copied().unwrap_or(0)]))
        .collect()
}

/// Decode a TAL byte stream (one or more NUL-terminated TALs, NUL padded).
///
/// Each TAL is `+onset[0x15 duration]0x14[text0x14]*` followed by `0x00`.
/// TALs without text (record timekeeping) produce no annotations.
pub fn parse_tal(bytes: &[u8]) -> Result<Vec<SleepAnnotation>> {
    let mut out = Vec::new();
    let mut record = 0;
    let mut rest = bytes;
    // skip padding between TALs
    while let Some(start) = rest.iter().position(|&b| b != 0) {
        rest = &rest[start..];
        let end = rest.iter().position(|&b| b == 0).ok_or_else(|| Error::Tal {
            record,
            reason: "missing NUL terminator".into(),
        })?;
        let tal = &rest[..end];
        rest = &rest[end..];
        decode_tal(tal, record, &mut out)?;
        record += 1;
    }
    Ok(out)
}

fn decode_tal(tal: &[u8], record: usize, out: &mut Vec<SleepAnnotation>) -> Result<()> {
    let tal_err = |reason: String| Error::Tal { record, reason };
    if tal.last() != Some(&TAL_SEPARATOR) {
        return Err(tal_err("TAL does not end with 0x14".into()));
    }
    let mut parts = tal[..tal.len() - 1].split(|&b| b == TAL_SEPARATOR);
    let stamp = parts.next().unwrap_or_default();
    let mut stamp_parts = stamp.splitn(2, |&b| b == TAL_DURATION);
    let onset_bytes = stamp_parts.next().unwrap_or_default();
    if !matches!(onset_bytes.first(), Some(b'+') | Some(b'-')) {
        return Err(tal_err(format!(
            "onset must start with '+' or '-', got {:?}",
            String::from_utf8_lossy(onset_bytes)
        )));
    }
    let onset_s = parse_tal_number(onset_bytes).ok_or_else(|| {
        tal_err(format!("bad onset {:?}", String::from_utf8_lossy(onset_bytes)))
    })?;
    let duration_s = match stamp_parts.next() {
        Some(d) => parse_tal_number(d)
            .ok_or_else(|| tal_err(format!("bad duration {:?}", String::from_utf8_lossy(d))))?,
        None => 0.0,
    };
    if duration_s < 0.0 {
        return Err(tal_err(format!("negative duration {duration_s}")));
    }
    for text in parts.filter(|t| !t.is_empty()) {
        out.push(SleepAnnotation {
            onset_s,
            duration_s,
            stage_label: String::from_utf8_lossy(text).into_owned(),
        });
    }
    Ok(())
}

fn parse_tal_number(bytes: &[u8]) -> Option<f64> {
    std::str::from_utf8(bytes).ok()?.trim().parse().ok()
}

/// Encode annotations as TAL bytes, one TAL per annotation.
pub fn encode_tal(annotations: &[SleepAnnotation]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in annotations {
        out.extend_from_slice(format!("+{}", a.onset_s).as_bytes());
        if a.duration_s > 0.0 {
            out.push(TAL_DURATION);
            out.extend_from_slice(a.duration_s.to_string().as_bytes());
        }
        out.push(TAL_SEPARATOR);
        out.extend_from_slice(a.stage_label.as_bytes());
        out.push(TAL_SEPARATOR);
        out.push(0);
    }
    out
}

/// Build an annotation-only EDF+ file (hypnogram) holding `annotations`.
///
/// Every record starts with the mandatory timekeeping TAL; annotation TALs
/// are packed into the first records that have room.
pub fn write_hypnogram(annotations: &[SleepAnnotation], record_duration_s: f64) -> Result<Vec<u8>> {
    let tals: Vec<Vec<u8>> = annotations.iter().map(|a| encode_tal(std::slice::from_ref(a))).collect();
    let longest = tals.iter().map(Vec::len).max().unwrap_or(0);
    let keep = |r: usize| format!("+{}\x14\x14\0", r as f64 * record_duration_s).into_bytes();
    let spr_bytes = (longest + keep(0).len() + 16).max(120).next_multiple_of(2);

    let mut records: Vec<Vec<u8>> = vec![keep(0)];
    for tal in &tals {
        let last = records.last_mut().expect("non-empty");
        if last.len() + tal.len() <= spr_bytes {
            last.extend_from_slice(tal);
        } else {
            let mut rec = keep(records.len());
            rec.extend_from_slice(tal);
            records.push(rec);
        }
    }
    let n_records = records.len();
    let mut stream = Vec::with_capacity(n_records * spr_bytes);
    for mut rec in records {
        rec.resize(spr_bytes, 0);
        stream.extend_from_slice(&rec);
    }
    let header = EdfHeader::new(n_records, record_duration_s, vec![SignalHeader::annotations(spr_bytes / 2)]);
    write_edf(&header, &[bytes_to_samples(&stream)])
}

/// Plain text table, one `onset,duration,label` row per line (comma or tab
/// separated). A non-numeric first row is treated as a column header;
/// blank lines and `#` comments are skipped.
pub fn parse_annotation_table(text: &str) -> Result<Vec<SleepAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let sep = if line.contains('\t') { '\t' } else { ',' };
        let fields: Vec<&str> = line.splitn(3, sep).map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::AnnotationTable {
                line: line_no,
                reason: format!("expected onset,duration,label; got {line:?}"),
            });
        }
        let onset = fields[0].parse::<f64>();
        if onset.is_err() && out.is_empty() && i == first_content_line(text) {
            continue;
        }
        let onset_s = onset.map_err(|_| Error::AnnotationTable {
            line: line_no,
            reason: format!("onset {:?} is not a number", fields[0]),
        })?;
        let duration_s = fields[1].parse::<f64>().map_err(|_| Error::AnnotationTable {
            line: line_no,
            reason: format!("duration {:?} is not a number", fields[1]),
        })?;
        if onset_s < 0.0 || duration_s < 0.0 {
            return Err(Error::AnnotationTable {
                line: line_no,
                reason: "onset and duration must be non-negative".into(),
            });
        }
        out.push(SleepAnnotation::new(onset_s, duration_s, fields[2].trim_matches('"')));
    }
    sort_annotations(&mut out);
    Ok(out)
}

fn first_content_line(text: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim();
            !l.is_empty() && !l.starts_with('#')
        })
        .unwrap_or(0)
}

/// Decode annotations from an EDF+ file, a bare TAL stream, or a text table.
pub fn parse_annotations(bytes: &[u8]) -> Result<Vec<SleepAnnotation>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    if bytes.len() >= FIXED_HEADER_BYTES && bytes.starts_with(b"0       ") {
        return EdfFile::parse(bytes)?.annotations();
    }
    if bytes.contains(&TAL_SEPARATOR) {
        let mut out = parse_tal(bytes)?;
        sort_annotations(&mut out);
        return Ok(out);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::AnnotationTable {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    parse_annotation_table(text)
}

fn sort_annotations(list: &mut [SleepAnnotation]) {
    list.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
}

/// Pick the signal whose label matches `name` (trimmed, case-insensitive).
pub fn select_channel(signals: &[SampledSignal], name: &str) -> Result<SampledSignal> {
    let want = name.trim().to_lowercase();
    let matches: Vec<&SampledSignal> = signals
        .iter()
        .filter(|s| s.channel.trim().to_lowercase() == want)
        .collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::ChannelNotFound {
            requested: name.to_string(),
            available: signals.iter().map(|s| s.channel.clone()).collect(),
        }),
        many => Err(Error::ChannelAmbiguous {
            requested: name.to_string(),
            matches: many.iter().map(|s| s.channel.clone()).collect(),
        }),
    }
}

/// Keep only the samples in `[0, seconds)`.
pub fn crop(signal: &SampledSignal, seconds: f64) -> SampledSignal {
    let n = ((seconds * signal.rate_hz).ceil().max(0.0) as usize).min(signal.samples.len());
    SampledSignal::new(signal.channel.clone(), signal.rate_hz, signal.samples[..n].to_vec())
}

/// Linear interpolation onto the grid `k / target_hz` spanning the original
/// samples' time range.
pub fn resample(signal: &SampledSignal, target_hz: f64) -> Result<SampledSignal> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::config(format!("target rate must be positive, got {target_hz}")));
    }
    if signal.samples.is_empty() {
        return Err(Error::Empty("signal to resample"));
    }
    if target_hz == signal.rate_hz {
        return Ok(signal.clone());
    }
    let src = &signal.samples;
    let last = (src.len() - 1) as f64;
    let span_s = last / signal.rate_hz;
    let n_out = (span_s * target_hz + 1e-9).floor() as usize + 1;
    let samples = (0..n_out)
        .map(|k| {
            let pos = (k as f64 * signal.rate_hz / target_hz).min(last);
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if frac == 0.0 || i + 1 >= src.len() {
                src[i]
            } else {
                src[i] + (src[i + 1] - src[i]) * frac
            }
        })
        .collect();
    Ok(SampledSignal::new(signal.channel.clone(), target_hz, samples))
}

/// Mapping from hypnogram label to class index, or exclusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMap {
    pub class_names: Vec<String>,
    /// Lower-cased, trimmed label -> class index; `None` means drop.
    pub labels: BTreeMap<String, Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageClass {
    Class(usize),
    Exclude,
}

impl StageMap {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            labels: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: &str, class: StageClass) -> Self {
        let v = match class {
            StageClass::Class(c) => Some(c),
            StageClass::Exclude => None,
        };
        self.labels.insert(label.trim().to_lowercase(), v);
        self
    }

    /// Sleep-EDF Expanded: W, R, 1, 2, 3, 4, ? with movement time dropped.
    pub fn edfx() -> Self {
        let classes = ["W", "R", "1", "2", "3", "4", "?"];
        let mut map = Self::new(classes.iter().map(|s| s.to_string()).collect());
        for (i, c) in classes.iter().enumerate() {
            map = map.with_label(&format!("Sleep stage {c}"), StageClass::Class(i));
        }
        map.with_label("Movement time", StageClass::Exclude)
    }

    /// Haaglanden Medisch Centrum: W, R, N1, N2, N3.
    pub fn hmc() -> Self {
        let classes = ["W", "R", "N1", "N2", "N3"];
        let mut map = Self::new(classes.iter().map(|s| s.to_string()).collect());
        for (i, c) in classes.iter().enumerate() {
            map = map.with_label(&format!("Sleep stage {c}"), StageClass::Class(i));
        }
        map.with_label("Lights off", StageClass::Exclude)
            .with_label("Lights on", StageClass::Exclude)
    }

    /// Nationwide Children's Hospital: W, R, N1, N2, N3, ?.
    pub fn nch() -> Self {
        let classes = ["W", "R", "N1", "N2", "N3", "?"];
        let mut map = Self::new(classes.iter().map(|s| s.to_string()).collect());
        for (i, c) in classes.iter().enumerate() {
            map = map.with_label(&format!("Sleep stage {c}"), StageClass::Class(i));
        }
        map
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Unknown labels are excluded.
    pub fn classify(&self, label: &str) -> StageClass {
        match self.labels.get(&label.trim().to_lowercase()) {
            Some(Some(c)) => StageClass::Class(*c),
            _ => StageClass::Exclude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::config("stage map has no classes"));
        }
        if let Some((label, c)) = self
            .labels
            .iter()
            .find_map(|(l, c)| c.filter(|&c| c >= self.class_names.len()).map(|c| (l, c)))
        {
            return Err(Error::config(format!(
                "stage map label {label:?} -> class {c}, but only {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }
}

/// Samples per epoch, or a config error when `epoch_s * rate_hz` is fractional.
pub fn epoch_len(epoch_s: f64, rate_hz: f64) -> Result<usize> {
    let n = epoch_s * rate_hz;
    let rounded = n.round();
    if !(epoch_s.is_finite() && epoch_s > 0.0) || (n - rounded).abs() > 1e-9 * n.abs().max(1.0) || rounded < 1.0 {
        return Err(Error::config(format!(
            "epoch of {epoch_s} s at {rate_hz} Hz is not a whole number of samples ({n})"
        )));
    }
    Ok(rounded as usize)
}

/// Cut non-overlapping `epoch_s` windows lying fully inside an annotation span.
pub fn extract_epochs(
    signal: &SampledSignal,
    annotations: &[SleepAnnotation],
    epoch_s: f64,
    stage_map: &StageMap,
    source_id: &str,
) -> Result<Vec<TimeSeriesEpoch>> {
    let n = epoch_len(epoch_s, signal.rate_hz)?;
    let rate = signal.rate_hz;
    let mut sorted = annotations.to_vec();
    sort_annotations(&mut sorted);

    let mut out = Vec::new();
    let mut next_free = 0usize;
    for ann in &sorted {
        let stage = match stage_map.classify(&ann.stage_label) {
            StageClass::Class(c) => c,
            StageClass::Exclude => continue,
        };
        let span_start = ann.onset_s * rate;
        let span_end = (ann.onset_s + ann.duration_s) * rate;
        let mut start = snap_up(span_start);
        while (start + n) as f64 <= span_end + 1e-6 && start + n <= signal.samples.len() {
            if start >= next_free {
                out.push(TimeSeriesEpoch {
                    samples: signal.samples[start..start + n].to_vec(),
                    stage,
                    source_id: source_id.to_string(),
                    index: start / n,
                });
                next_free = start + n;
            }
            start += n;
        }
    }
    Ok(out)
}

fn snap_up(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-6 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}
