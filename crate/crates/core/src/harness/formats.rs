//! On-disk formats.
//!
//! * `FTN1` feature tensors: magic `FTN1`, then height, width and channel
//!   count as little-endian `u32`, then `height * width * channels`
//!   little-endian `f32` values, row-major with channels fastest. Saliency
//!   and fixation maps are single-channel `FTN1` files.
//! * Detection lists: one `x_min y_min x_max y_max confidence [class_id]`
//!   record per line, whitespace separated, `#` starts a comment.
//! * `RDM1` readout checkpoints: magic `RDM1`, `u32` layer count, then per
//!   layer `u32` outputs, `u32` inputs, `outputs * inputs` weights and
//!   `outputs` biases as `f64`; then a `u8` center-bias flag followed by
//!   `mu_x mu_y sigma_x sigma_y weight` as `f64` (zeros when the flag is 0);
//!   then the smoothing sigma as `f64`. All little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::readout::{CenterBias, Layer, ReadoutModel};
use crate::tensor::{normalize_to_distribution, Detection, FeatureMap, FixationMap, Grid, SaliencyMap};
use crate::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"FTN1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDM1";
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.7;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, only {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                found: m.try_into().unwrap(),
                expected,
            });
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn encode_feature_tensor(map: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * map.data().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    for dim in [map.height(), map.width(), map.channels()] {
        let d =
            u32::try_from(dim).map_err(|_| Error::InvalidArgument(format!("dimension {dim} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in map.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite(format!(
                "value #{i} ({v}) is not representable as f32"
            )));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_tensor(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("zero dimension in header {h}x{w}x{c}"),
        });
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("header {h}x{w}x{c} overflows"),
        })?;
    let payload_len = n.checked_mul(4).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        detail: format!("header {h}x{w}x{c} overflows"),
    })?;
    let payload = r.take(payload_len, "payload")?;
    r.finish()?;
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("non-finite payload value #{i}: {v}"),
            });
        }
        data.push(f64::from(v));
    }
    FeatureMap::new(h, w, c, data)
}

pub fn save_feature_tensor(map: &FeatureMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_tensor(map)?)
}

pub fn load_feature_tensor(path: &Path) -> Result<FeatureMap> {
    decode_feature_tensor(&read(path)?, path)
}

pub fn save_grid(grid: &Grid, path: &Path) -> Result<()> {
    save_feature_tensor(&FeatureMap::from_grid(grid), path)
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let f = load_feature_tensor(path)?;
    if f.channels() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected a single-channel map, found {} channels", f.channels()),
        });
    }
    Ok(f.channel_grid(0))
}

/// Loads a map and normalises it to unit mass.
pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    let g = load_grid(path)?;
    normalize_to_distribution(&g).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn save_fixations(map: &FixationMap, path: &Path) -> Result<()> {
    save_grid(&map.to_grid(), path)
}

pub fn load_fixations(path: &Path) -> Result<FixationMap> {
    let g = load_grid(path)?;
    let mut data = Vec::with_capacity(g.len());
    for (i, &v) in g.data().iter().enumerate() {
        match v {
            0.0 => data.push(false),
            1.0 => data.push(true),
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("fixation value #{i} is {other}, expected 0 or 1"),
                })
            }
        }
    }
    FixationMap::new(g.height(), g.width(), data)
}

/// Parses every record of a detection list, without confidence gating.
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(5..=6).contains(&fields.len()) {
            return Err(err(format!(
                "expected 5 or 6 fields (x_min y_min x_max y_max confidence [class_id]), found {}",
                fields.len()
            )));
        }
        let mut nums = [0.0; 5];
        for (slot, f) in nums.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|_| err(format!("{f:?} is not a number")))?;
        }
        let class_id = match fields.get(5) {
            Some(f) => Some(f.parse::<u32>().map_err(|_| err(format!("{f:?} is not a class id")))?),
            None => None,
        };
        let det = Detection {
            x_min: nums[0],
            y_min: nums[1],
            x_max: nums[2],
            y_max: nums[3],
            confidence: nums[4],
            class_id,
        };
        if !(det.x_min < det.x_max && det.y_min < det.y_max) {
            return Err(err("box has non-positive extent".into()));
        }
        if nums.iter().any(|v| !v.is_finite()) || !(0.0..=1.0).contains(&det.confidence) {
            return Err(err(format!("confidence {} outside [0, 1]", det.confidence)));
        }
        out.push(det);
    }
    Ok(out)
}

/// Keeps detections whose confidence is strictly above `threshold`.
pub fn gate_detections(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.confidence > threshold).copied().collect()
}

/// Reads a detection list and drops records at or below `threshold`.
pub fn load_detections(path: &Path, threshold: f64) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(gate_detections(&parse_detections(&text, path)?, threshold))
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::from("# x_min y_min x_max y_max confidence [class_id]\n");
    for d in dets {
        out.push_str(&format!(
            "{} {} {} {} {}",
            d.x_min, d.y_min, d.x_max, d.y_max, d.confidence
        ));
        if let Some(c) = d.class_id {
            out.push_str(&format!(" {c}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_detections(dets: &[Detection], path: &Path) -> Result<()> {
    write_atomic(path, format_detections(dets).as_bytes())
}

pub fn encode_checkpoint(model: &ReadoutModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for l in model.layers() {
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cb = model.center_bias;
    out.push(u8::from(cb.is_some()));
    let fields = cb.map_or([0.0; 5], |c| [c.mu_x, c.mu_y, c.sigma_x, c.sigma_y, c.weight]);
    for v in fields {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&model.smooth_sigma.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ReadoutModel> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let n = r.u32("layer count")? as usize;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if n == 0 {
        return Err(bad("checkpoint has no layers".into()));
    }
    let mut layers = Vec::with_capacity(n);
    for li in 0..n {
        let outputs = r.u32("layer outputs")? as usize;
        let inputs = r.u32("layer inputs")? as usize;
        let count = outputs
            .checked_mul(inputs)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| bad(format!("layer {li} claims {outputs}x{inputs} weights")))?;
        let weight = (0..count).map(|_| r.f64("weight")).collect::<Result<Vec<_>>>()?;
        let bias = (0..outputs).map(|_| r.f64("bias")).collect::<Result<Vec<_>>>()?;
        layers.push(Layer::new(inputs, outputs, weight, bias).map_err(|e| bad(format!("layer {li}: {e}")))?);
    }
    let flag = r.u8("center-bias flag")?;
    let mut f = [0.0; 5];
    for v in &mut f {
        *v = r.f64("center-bias field")?;
    }
    let cb = match flag {
        0 => None,
        1 => Some(CenterBias {
            mu_x: f[0],
            mu_y: f[1],
            sigma_x: f[2],
            sigma_y: f[3],
            weight: f[4],
        }),
        other => return Err(bad(format!("center-bias flag is {other}, expected 0 or 1"))),
    };
    let sigma = r.f64("smoothing sigma")?;
    r.finish()?;
    ReadoutModel::from_layers(layers, cb, sigma).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(model: &ReadoutModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ReadoutModel> {
    decode_checkpoint(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn bad_magic_and_truncation() {
        let map = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_feature_tensor(&map).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_feature_tensor(&bytes, p()),
            Err(Error::BadMagic { .. })
        ));

        let bytes = encode_feature_tensor(&map).unwrap();
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            decode_feature_tensor(short, p()),
            Err(Error::Truncated { .. })
        ));

        let mut nan = bytes.clone();
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_tensor(&nan, p()), Err(Error::Format { .. })));

        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_feature_tensor(&long, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn header_layout() {
        let map = FeatureMap::new(1, 2, 3, vec![0.5; 6]).unwrap();
        let bytes = encode_feature_tensor(&map).unwrap();
        assert_eq!(&bytes[..4], b"FTN1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn detection_parsing() {
        let d = parse_detections("10 10 50 50 0.9\n", p()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(gate_detections(&d, 0.7).len(), 1);
        let low = parse_detections("10 10 50 50 0.5 3 # comment\n", p()).unwrap();
        assert_eq!(low[0].class_id, Some(3));
        assert!(gate_detections(&low, 0.7).is_empty());
        // exactly at the threshold is dropped
        let edge = parse_detections("0 0 1 1 0.7", p()).unwrap();
        assert!(gate_detections(&edge, 0.7).is_empty());
        assert!(parse_detections("", p()).unwrap().is_empty());
        assert!(parse_detections("# only comments\n\n", p()).unwrap().is_empty());
        match parse_detections("0 0 1 1 0.9\n1 2 three 4 0.9\n", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_detections("0 0 1 1", p()).is_err());
        assert!(parse_detections("5 0 1 1 0.9", p()).is_err());
        assert!(parse_detections("0 0 1 1 1.5", p()).is_err());
    }

    #[test]
    fn detection_text_round_trip() {
        let dets = vec![
            Detection::new(0.5, 1.25, 30.0, 40.125, 0.875).with_class(2),
            Detection::new(3.0, 4.0, 5.0, 6.0, 0.71),
        ];
        let back = parse_detections(&format_detections(&dets), p()).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let model = ReadoutModel::new(5, &[4, 2, 1], 9)
            .unwrap()
            .with_center_bias(Some(CenterBias {
                mu_x: 3.5,
                mu_y: 2.25,
                sigma_x: 4.0,
                sigma_y: 1.5,
                weight: 0.75,
            }))
            .unwrap()
            .with_smoothing(1.25)
            .unwrap();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..4], b"RDM1");
        let back = decode_checkpoint(&bytes, p()).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_checkpoint(&back), bytes);

        let plain = ReadoutModel::new(2, &[1], 1).unwrap();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&plain), p()).unwrap(), plain);

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], p()),
            Err(Error::Truncated { .. })
        ));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_checkpoint(&wrong, p()), Err(Error::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn feature_round_trip_is_f32_exact(
            h in 1usize..5, w in 1usize..5, c in 1usize..4,
            seed in proptest::collection::vec(-1e6f64..1e6, 64),
        ) {
            let data: Vec<f64> = (0..h * w * c).map(|i| seed[i % seed.len()] * (1.0 + i as f64)).collect();
            let map = FeatureMap::new(h, w, c, data.clone()).unwrap();
            let bytes = encode_feature_tensor(&map).unwrap();
            let back = decode_feature_tensor(&bytes, p()).unwrap();
            for (a, b) in back.data().iter().zip(&data) {
                prop_assert_eq!(*a, f64::from(*b as f32));
            }
            prop_assert_eq!(encode_feature_tensor(&back).unwrap(), bytes);
        }
    }
}
