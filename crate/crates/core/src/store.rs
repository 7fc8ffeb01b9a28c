//! Binary files: concepts (`KLC1`), covariance caches (`KLR1`), and feature
//! grids (`KLG1`). All numbers are little-endian with no padding; each file
//! ends with a CRC32 of its payload.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::diffuser::FeatureGrid;
use crate::error::{ensure, Error, Result};
use crate::metric::MetricSpace;
use crate::personalize::ConceptWeights;
use crate::{Matrix, Vector};

pub const CONCEPT_MAGIC: &[u8; 4] = b"KLC1";
pub const COVARIANCE_MAGIC: &[u8; 4] = b"KLR1";
pub const GRID_MAGIC: &[u8; 4] = b"KLG1";
pub const FORMAT_VERSION: u16 = 1;

/// Float width of a stored payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_code(code: u16) -> Result<Self> {
        match code {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(Error::Format(format!("unknown precision code {other}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Contract(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

/// Tensor dimensions recorded in a concept header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptDims {
    pub d_w: usize,
    pub d_e: usize,
    /// `(d_k, d_v)` per layer.
    pub layers: Vec<(usize, usize)>,
}

impl ConceptDims {
    pub fn of(w: &ConceptWeights) -> Self {
        Self {
            d_w: w.embedding.len(),
            d_e: w.i_star.len(),
            layers: w.key_targets.iter().zip(&w.value_targets).map(|(k, v)| (k.len(), v.len())).collect(),
        }
    }

    /// Stored floats: embedding, `i*`, every target-output, and `β`.
    pub fn payload_floats(&self) -> usize {
        self.d_w + self.d_e + self.layers.iter().map(|(k, v)| k + v).sum::<usize>() + 1
    }

    pub fn header_bytes(&self) -> usize {
        20 + 8 * self.layers.len()
    }
}

/// Exact size of a concept file.
pub fn predicted_size(dims: &ConceptDims, precision: Precision) -> usize {
    dims.header_bytes() + precision.bytes() * dims.payload_floats() + 4
}

/// Decoded concept header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptHeader {
    pub version: u16,
    pub precision: Precision,
    pub dims: ConceptDims,
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn new(precision: Precision) -> Self {
        Self { buf: Vec::new(), precision }
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Contract(format!("dimension {v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn float(&mut self, v: f64) {
        match self.precision {
            Precision::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn floats<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.float(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    precision: Precision,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            precision: Precision::F64,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("file ends at byte {} inside a field", self.bytes.len())))?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn float(&mut self) -> Result<f64> {
        Ok(match self.precision {
            Precision::F32 => f32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as f64,
            Precision::F64 => f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")),
        })
    }

    fn vector(&mut self, n: usize) -> Result<Vector> {
        let mut v = Vector::zeros(n);
        for x in v.iter_mut() {
            *x = self.float()?;
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.float()?;
            }
        }
        Ok(m)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        ensure_format(found == expected, || {
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(found), String::from_utf8_lossy(expected))
        })
    }

    fn version(&mut self) -> Result<u16> {
        let found = self.u16()?;
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(found)
    }
}

fn ensure_format(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(msg()))
    }
}

/// Appends the payload CRC.
fn seal(mut buf: Vec<u8>, payload_start: usize) -> Vec<u8> {
    let crc = crc32fast::hash(&buf[payload_start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Checks that `bytes` holds exactly `payload_len` payload bytes after
/// `payload_start` plus a matching CRC. Short or long files fail the
/// checksum rather than being parsed.
fn verify(bytes: &[u8], payload_start: usize, payload_len: usize) -> Result<()> {
    let expected_len = payload_start + payload_len + 4;
    if bytes.len() != expected_len {
        let stored = if bytes.len() >= payload_start + 4 {
            u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("four bytes"))
        } else {
            0
        };
        let end = bytes.len().min(payload_start + payload_len).max(payload_start);
        return Err(Error::Checksum {
            stored,
            computed: crc32fast::hash(&bytes[payload_start.min(end)..end]),
        });
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored = u32::from_le_bytes(bytes[expected_len - 4..].try_into().expect("four bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<usize> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_concept(w: &ConceptWeights, precision: Precision) -> Result<Vec<u8>> {
    ensure(w.is_finite(), || "concept has non-finite values".into())?;
    ensure(w.key_targets.len() == w.value_targets.len(), || "key and value layer counts differ".into())?;
    let dims = ConceptDims::of(w);
    let mut out = Writer::new(precision);
    out.buf.extend_from_slice(CONCEPT_MAGIC);
    out.u16(FORMAT_VERSION);
    out.u16(precision.bytes() as u16);
    out.u32(dims.d_w)?;
    out.u32(dims.d_e)?;
    out.u32(dims.layers.len())?;
    for &(k, v) in &dims.layers {
        out.u32(k)?;
        out.u32(v)?;
    }
    let start = out.buf.len();
    out.floats(w.embedding.iter());
    out.floats(w.i_star.iter());
    for (k, v) in w.key_targets.iter().zip(&w.value_targets) {
        out.floats(k.iter());
        out.floats(v.iter());
    }
    out.float(w.beta);
    Ok(seal(out.buf, start))
}

fn parse_concept_header(r: &mut Reader<'_>) -> Result<ConceptHeader> {
    r.magic(CONCEPT_MAGIC)?;
    let version = r.version()?;
    let precision = Precision::from_code(r.u16()?)?;
    let d_w = r.u32()?;
    let d_e = r.u32()?;
    let n_layers = r.u32()?;
    ensure_format(n_layers <= 4096, || format!("implausible layer count {n_layers}"))?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push((r.u32()?, r.u32()?));
    }
    Ok(ConceptHeader {
        version,
        precision,
        dims: ConceptDims { d_w, d_e, layers },
    })
}

/// Parses only the header, so it can be shown even for corrupt payloads.
pub fn read_concept_header(bytes: &[u8]) -> Result<ConceptHeader> {
    parse_concept_header(&mut Reader::new(bytes))
}

pub fn decode_concept(bytes: &[u8]) -> Result<ConceptWeights> {
    let mut r = Reader::new(bytes);
    let header = parse_concept_header(&mut r)?;
    let dims = &header.dims;
    verify(bytes, r.pos, header.precision.bytes() * dims.payload_floats())?;
    r.precision = header.precision;
    let embedding = r.vector(dims.d_w)?;
    let i_star = r.vector(dims.d_e)?;
    let mut key_targets = Vec::with_capacity(dims.layers.len());
    let mut value_targets = Vec::with_capacity(dims.layers.len());
    for &(k, v) in &dims.layers {
        key_targets.push(r.vector(k)?);
        value_targets.push(r.vector(v)?);
    }
    let beta = r.float()?;
    Ok(ConceptWeights {
        embedding,
        i_star,
        key_targets,
        value_targets,
        beta,
    })
}

/// Writes a concept file and returns its size in bytes.
pub fn save_concept(w: &ConceptWeights, path: &Path, precision: Precision) -> Result<usize> {
    write_file(path, &encode_concept(w, precision)?)
}

pub fn load_concept(path: &Path) -> Result<ConceptWeights> {
    decode_concept(&read_file(path)?)
}

/// Covariance cache: `C⁻¹` and its Cholesky factor at full precision.
pub fn encode_metric(m: &MetricSpace) -> Result<Vec<u8>> {
    let mut out = Writer::new(Precision::F64);
    out.buf.extend_from_slice(COVARIANCE_MAGIC);
    out.u16(FORMAT_VERSION);
    out.u32(m.dim())?;
    let start = out.buf.len();
    for mat in [m.c_inv(), m.chol()] {
        for r in 0..mat.nrows() {
            out.floats(mat.row(r).iter());
        }
    }
    Ok(seal(out.buf, start))
}

pub fn decode_metric(bytes: &[u8]) -> Result<MetricSpace> {
    let mut r = Reader::new(bytes);
    r.magic(COVARIANCE_MAGIC)?;
    r.version()?;
    let d = r.u32()?;
    ensure_format(d > 0 && d <= 1 << 14, || format!("implausible dimension {d}"))?;
    verify(bytes, r.pos, 2 * d * d * 8)?;
    let c_inv = r.matrix(d, d)?;
    let chol = r.matrix(d, d)?;
    MetricSpace::from_parts(c_inv, chol)
}

pub fn save_metric(m: &MetricSpace, path: &Path) -> Result<usize> {
    write_file(path, &encode_metric(m)?)
}

pub fn load_metric(path: &Path) -> Result<MetricSpace> {
    decode_metric(&read_file(path)?)
}

pub fn encode_grid(g: &FeatureGrid, precision: Precision) -> Result<Vec<u8>> {
    let mut out = Writer::new(precision);
    out.buf.extend_from_slice(GRID_MAGIC);
    out.u16(FORMAT_VERSION);
    out.u16(precision.bytes() as u16);
    out.u32(g.height())?;
    out.u32(g.width())?;
    out.u32(g.channels())?;
    let start = out.buf.len();
    for r in 0..g.pixels() {
        out.floats(g.data().row(r).iter());
    }
    Ok(seal(out.buf, start))
}

pub fn decode_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let mut r = Reader::new(bytes);
    r.magic(GRID_MAGIC)?;
    r.version()?;
    let precision = Precision::from_code(r.u16()?)?;
    let (h, w, c) = (r.u32()?, r.u32()?, r.u32()?);
    let count = h.checked_mul(w).and_then(|p| p.checked_mul(c)).filter(|&n| n <= 1 << 28);
    let count = count.ok_or_else(|| Error::Format(format!("implausible grid {h}x{w}x{c}")))?;
    verify(bytes, r.pos, count * precision.bytes())?;
    r.precision = precision;
    let data = r.matrix(h * w, c)?;
    FeatureGrid::new(h, w, data)
}

pub fn save_grid(g: &FeatureGrid, path: &Path, precision: Precision) -> Result<usize> {
    write_file(path, &encode_grid(g, precision)?)
}

pub fn load_grid(path: &Path) -> Result<FeatureGrid> {
    decode_grid(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vector, stream_rng};

    fn weights(seed: u64, layers: usize) -> ConceptWeights {
        let mut rng = stream_rng(seed, 99);
        ConceptWeights {
            embedding: normal_vector(&mut rng, 32, 1.0),
            i_star: normal_vector(&mut rng, 32, 1.0),
            key_targets: (0..layers).map(|_| normal_vector(&mut rng, 16, 1.0)).collect(),
            value_targets: (0..layers).map(|_| normal_vector(&mut rng, 16, 1.0)).collect(),
            beta: 0.75,
        }
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let w = weights(1, 3);
        let back = decode_concept(&encode_concept(&w, Precision::F64).unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn f32_round_trip_matches_f32_rounding() {
        let w = weights(2, 3);
        let back = decode_concept(&encode_concept(&w, Precision::F32).unwrap()).unwrap();
        for (a, b) in back.embedding.iter().zip(w.embedding.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn sizes_follow_the_formula() {
        let w = weights(3, 3);
        let dims = ConceptDims::of(&w);
        // header 20 + 8·3, payload (32 + 32 + 3·32 + 1) floats, CRC 4
        let f32_expected = 44 + 4 * 161 + 4;
        let f64_expected = 44 + 8 * 161 + 4;
        assert_eq!(predicted_size(&dims, Precision::F32), f32_expected);
        assert_eq!(predicted_size(&dims, Precision::F64), f64_expected);
        assert_eq!(encode_concept(&w, Precision::F32).unwrap().len(), f32_expected);
        assert_eq!(encode_concept(&w, Precision::F64).unwrap().len(), f64_expected);
    }

    #[test]
    fn doubling_layers_doubles_the_per_layer_portion() {
        let per_layer = |n: usize| {
            let dims = ConceptDims {
                d_w: 32,
                d_e: 32,
                layers: vec![(16, 16); n],
            };
            predicted_size(&dims, Precision::F32) - predicted_size(&ConceptDims { layers: vec![], ..dims }, Precision::F32)
        };
        assert_eq!(per_layer(6), 2 * per_layer(3));
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = encode_concept(&weights(4, 3), Precision::F32).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 5, 50] {
            assert!(matches!(decode_concept(&bytes[..cut]), Err(Error::Checksum { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn flipped_payload_bit_is_a_checksum_error() {
        let mut bytes = encode_concept(&weights(5, 2), Precision::F64).unwrap();
        bytes[60] ^= 0x10;
        assert!(matches!(decode_concept(&bytes), Err(Error::Checksum { .. })));
        assert!(read_concept_header(&bytes).is_ok());
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let mut bytes = encode_concept(&weights(6, 1), Precision::F32).unwrap();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(decode_concept(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode_concept(&weights(7, 1), Precision::F32).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_concept(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_concepts_are_rejected() {
        let mut w = weights(8, 1);
        w.beta = f64::NAN;
        assert!(matches!(encode_concept(&w, Precision::F32), Err(Error::Contract(_))));
    }

    #[test]
    fn metric_and_grid_round_trip() {
        let mut rng = stream_rng(9, 1);
        let a = crate::rng::normal_matrix(&mut rng, 6, 6, 1.0);
        let m = MetricSpace::from_covariance(&a * a.transpose() + Matrix::identity(6, 6)).unwrap();
        let back = decode_metric(&encode_metric(&m).unwrap()).unwrap();
        assert_eq!(back.c_inv(), m.c_inv());
        assert_eq!(back.chol(), m.chol());

        let g = FeatureGrid::random(&mut rng, 3, 4, 5);
        assert_eq!(decode_grid(&encode_grid(&g, Precision::F64).unwrap()).unwrap(), g);
        let bytes = encode_grid(&g, Precision::F32).unwrap();
        assert!(matches!(decode_grid(&bytes[..bytes.len() - 2]), Err(Error::Checksum { .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.klc");
        let w = weights(10, 3);
        let n = save_concept(&w, &path, Precision::F64).unwrap();
        assert_eq!(n, fs::metadata(&path).unwrap().len() as usize);
        assert_eq!(load_concept(&path).unwrap(), w);
        assert!(matches!(load_concept(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
