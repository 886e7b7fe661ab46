//! On-disk formats for boxes, masks, ground truth, segment scores and
//! feature matrices.
//!
//! Feature matrices are binary (`SDMF`); everything else is line-oriented
//! text. Class ids are 1-based in files and 0-based in memory. Every reader
//! reports the file and line (or byte offset) of the first violation it finds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::mask::{Run, SegmentMask};

pub const FEATURE_MAGIC: &[u8; 4] = b"SDMF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: u64 = 4 + 4 + 8 + 8;

/// Dense row-major `f32` matrix, the payload of an `SDMF` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows).then(|| &self.data[i * self.cols..(i + 1) * self.cols])
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies a contiguous block of rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Dimension(format!(
                "pushed row has {} columns, expected {}",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN as usize + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an `SDMF` buffer; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: u64, msg: String| Error::Binary {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if bytes.len() < FEATURE_HEADER_LEN as usize {
            return Err(err(
                bytes.len() as u64,
                format!("truncated header ({} of {FEATURE_HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| err(8, format!("{rows}x{cols} overflows")))?;
        let payload = &bytes[FEATURE_HEADER_LEN as usize..];
        if payload.len() as u64 != expected {
            return Err(err(
                FEATURE_HEADER_LEN,
                format!(
                    "payload is {} bytes, header {rows}x{cols} requires {expected}",
                    payload.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity((rows * cols) as usize);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(err(
                    FEATURE_HEADER_LEN + 4 * i as u64,
                    format!(
                        "non-finite value at row {}, col {}",
                        i as u64 / cols,
                        i as u64 % cols
                    ),
                ));
            }
            data.push(v);
        }
        Ok(Self {
            rows: rows as usize,
            cols: cols as usize,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// A candidate box as stored in the boxes file.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub image_id: String,
    pub box_id: u32,
    pub bbox: BoxF,
}

/// A ground-truth object; `class` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub image_id: String,
    pub class: usize,
    pub bbox: BoxF,
    pub difficult: bool,
}

/// One raw ranker score; `class` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SegScoreRecord {
    pub image_id: String,
    pub segment_id: u32,
    pub class: usize,
    pub score: f64,
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`", expected.join(",")),
        ));
    }
    Ok(rdr)
}

fn for_each_record(
    path: &Path,
    expected: &[&str],
    mut f: impl FnMut(usize, &csv::StringRecord) -> std::result::Result<(), String>,
) -> Result<()> {
    let mut rdr = csv_reader(path, expected)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, got {}", expected.len(), rec.len()),
            ));
        }
        f(line, &rec).map_err(|msg| Error::parse(path, line, msg))?;
    }
    Ok(())
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
) -> std::result::Result<T, String> {
    let raw = rec[i].trim();
    raw.parse().map_err(|_| format!("bad {name} `{raw}`"))
}

fn finite(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = field(rec, i, name)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} must be finite"))
    }
}

fn parse_box(rec: &csv::StringRecord, first: usize) -> std::result::Result<BoxF, String> {
    let x1 = finite(rec, first, "x1")?;
    let y1 = finite(rec, first + 1, "y1")?;
    let x2 = finite(rec, first + 2, "x2")?;
    let y2 = finite(rec, first + 3, "y2")?;
    BoxF::new(x1, y1, x2, y2).map_err(|e| e.to_string())
}

fn class_id(rec: &csv::StringRecord, i: usize) -> std::result::Result<usize, String> {
    let c: usize = field(rec, i, "class_id")?;
    if c == 0 {
        return Err("class_id is 1-based".into());
    }
    Ok(c - 1)
}

const BOX_HEADER: [&str; 6] = ["image_id", "box_id", "x1", "y1", "x2", "y2"];
const GT_HEADER: [&str; 7] = ["image_id", "class_id", "x1", "y1", "x2", "y2", "difficult"];
const SCORE_HEADER: [&str; 4] = ["image_id", "segment_id", "class_id", "raw_score"];

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for_each_record(path, &BOX_HEADER, |_, rec| {
        out.push(BoxRecord {
            image_id: rec[0].trim().to_string(),
            box_id: field(rec, 1, "box_id")?,
            bbox: parse_box(rec, 2)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[BoxRecord]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", BOX_HEADER.join(",")).map_err(io)?;
    for b in boxes {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            b.image_id, b.box_id, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthObject>> {
    let mut out = Vec::new();
    for_each_record(path, &GT_HEADER, |_, rec| {
        let difficult = match rec[6].trim() {
            "0" => false,
            "1" => true,
            other => return Err(format!("difficult must be 0 or 1, got `{other}`")),
        };
        out.push(GroundTruthObject {
            image_id: rec[0].trim().to_string(),
            class: class_id(rec, 1)?,
            bbox: parse_box(rec, 2)?,
            difficult,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruthObject]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", GT_HEADER.join(",")).map_err(io)?;
    for g in gts {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            g.image_id,
            g.class + 1,
            g.bbox.x1,
            g.bbox.y1,
            g.bbox.x2,
            g.bbox.y2,
            g.difficult as u8
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_segment_scores(path: &Path) -> Result<Vec<SegScoreRecord>> {
    let mut out = Vec::new();
    for_each_record(path, &SCORE_HEADER, |_, rec| {
        out.push(SegScoreRecord {
            image_id: rec[0].trim().to_string(),
            segment_id: field(rec, 1, "segment_id")?,
            class: class_id(rec, 2)?,
            score: finite(rec, 3, "raw_score")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_segment_scores(path: &Path, scores: &[SegScoreRecord]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", SCORE_HEADER.join(",")).map_err(io)?;
    for s in scores {
        writeln!(w, "{},{},{},{}", s.image_id, s.segment_id, s.class + 1, s.score).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parses one line of the masks file:
/// `image_id segment_id height width start:len[,start:len...]` (`-` for no runs).
pub fn parse_mask_line(line: &str) -> std::result::Result<SegmentMask, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, got {}", fields.len()));
    }
    let num = |i: usize, name: &str| -> std::result::Result<u32, String> {
        fields[i]
            .parse()
            .map_err(|_| format!("bad {name} `{}`", fields[i]))
    };
    let segment_id = num(1, "segment_id")?;
    let height = num(2, "height")?;
    let width = num(3, "width")?;
    let mut runs = Vec::new();
    if fields[4] != "-" {
        for tok in fields[4].split(',') {
            let (s, l) = tok
                .split_once(':')
                .ok_or_else(|| format!("run `{tok}` is not start:len"))?;
            runs.push(Run {
                start: s.parse().map_err(|_| format!("bad run start `{s}`"))?,
                len: l.parse().map_err(|_| format!("bad run length `{l}`"))?,
            });
        }
    }
    SegmentMask::from_runs(fields[0], segment_id, height, width, runs).map_err(|e| e.to_string())
}

pub fn format_mask_line(m: &SegmentMask) -> String {
    let runs = if m.runs().is_empty() {
        "-".to_string()
    } else {
        m.runs()
            .iter()
            .map(|r| format!("{}:{}", r.start, r.len))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "{} {} {} {} {}",
        m.image_id, m.segment_id, m.height, m.width, runs
    )
}

pub fn read_masks(path: &Path) -> Result<Vec<SegmentMask>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_mask_line(trimmed).map_err(|msg| Error::parse(path, i + 1, msg))?);
    }
    Ok(out)
}

pub fn write_masks(path: &Path, masks: &[SegmentMask]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for m in masks {
        writeln!(w, "{}", format_mask_line(m)).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_header_layout() {
        let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = m.encode();
        assert_eq!(&bytes[0..4], b"SDMF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[44..48].try_into().unwrap()), 6.5);
        assert_eq!(bytes.len(), 48);
    }

    #[test]
    fn feature_reader_rejects_bad_inputs() {
        let p = Path::new("x.sdmf");
        let good = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap().encode();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            FeatureMatrix::decode(&bad_magic, p),
            Err(Error::Binary { offset: 0, .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            FeatureMatrix::decode(&bad_version, p),
            Err(Error::Binary { offset: 4, .. })
        ));

        assert!(matches!(
            FeatureMatrix::decode(&good[..10], p),
            Err(Error::Binary { .. })
        ));
        assert!(matches!(
            FeatureMatrix::decode(&good[..good.len() - 1], p),
            Err(Error::Binary { offset: 24, .. })
        ));

        let mut nan = good.clone();
        nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureMatrix::decode(&nan, p),
            Err(Error::Binary { offset: 28, .. })
        ));

        let mut huge = good;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(FeatureMatrix::decode(&huge, p).is_err());
    }

    #[test]
    fn mask_line_errors() {
        assert!(parse_mask_line("img 1 2 2").is_err());
        assert!(parse_mask_line("img 1 2 2 0:5").is_err());
        assert!(parse_mask_line("img 1 2 2 0-1").is_err());
        assert!(parse_mask_line("img x 2 2 0:1").is_err());
        let m = parse_mask_line("img 3 2 2 0:1,2:2").unwrap();
        assert_eq!(m.pixel_count(), 3);
        assert_eq!(format_mask_line(&m), "img 3 2 2 0:1,2:2");
        assert_eq!(parse_mask_line("img 3 2 2 -").unwrap().pixel_count(), 0);
    }

    #[test]
    fn csv_readers_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        std::fs::write(
            &p,
            "image_id,class_id,x1,y1,x2,y2,difficult\na,1,0,0,4,4,0\na,0,0,0,4,4,0\n",
        )
        .unwrap();
        match read_ground_truth(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "image_id,class_id,x1,y1,x2,y2,difficult\na,1,5,0,4,4,0\n").unwrap();
        assert!(matches!(read_ground_truth(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "image_id,class,x1,y1,x2,y2,difficult\n").unwrap();
        assert!(matches!(read_ground_truth(&p), Err(Error::Parse { line: 1, .. })));

        let b = dir.path().join("boxes.csv");
        let recs = vec![BoxRecord {
            image_id: "im".into(),
            box_id: 4,
            bbox: BoxF {
                x1: 0.25,
                y1: 1.0,
                x2: 7.125,
                y2: 3.0,
            },
        }];
        write_boxes(&b, &recs).unwrap();
        assert_eq!(read_boxes(&b).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn feature_matrix_roundtrip(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32) * 0.37 - 5.0).collect();
            let m = FeatureMatrix::new(rows, cols, data).unwrap();
            prop_assert_eq!(FeatureMatrix::decode(&m.encode(), Path::new("p")).unwrap(), m);
        }

        #[test]
        fn truncation_never_panics(cut in 0usize..48) {
            let bytes = FeatureMatrix::new(2, 3, vec![0.5; 6]).unwrap().encode();
            prop_assert!(FeatureMatrix::decode(&bytes[..cut], Path::new("p")).is_err());
        }
    }
}
