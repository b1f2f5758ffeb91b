//! Keypoint files: CSV with header `u,v,c,d0..d{k-1}`, or the IMPK binary
//! container (IMPW framing, tensors `coords` [n,2], `confidence` [n],
//! `descriptors` [n,d]).

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use posematch_core::epipolar::ImagePoint;
use posematch_core::numerics::weights::{decode_tensors, encode_tensors};
use posematch_core::numerics::{DenseMatrix, Tensor};

pub const KEYPOINTS_MAGIC: [u8; 4] = *b"IMPK";

#[derive(Debug, Clone, PartialEq)]
pub struct RawKeypoints {
    pub coords: Vec<ImagePoint>,
    pub confidences: Vec<f64>,
    pub descriptors: DenseMatrix,
}

pub fn read_keypoints(path: &Path) -> Result<RawKeypoints> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(&KEYPOINTS_MAGIC) {
        parse_impk(&bytes).with_context(|| format!("{}: bad IMPK file", path.display()))
    } else {
        parse_csv(&bytes).with_context(|| format!("{}: bad keypoint CSV", path.display()))
    }
}

pub fn parse_csv(bytes: &[u8]) -> Result<RawKeypoints> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for (k, want) in ["u", "v", "c"].iter().enumerate() {
        match header.get(k) {
            Some(h) if h == want => {}
            Some(h) => bail!("header column {} is `{h}`, expected `{want}`", k + 1),
            None => bail!("missing column `{want}` (header has {} columns)", header.len()),
        }
    }
    let d = header.len() - 3;
    if d == 0 {
        bail!("missing descriptor column `d0`");
    }
    for k in 0..d {
        let want = format!("d{k}");
        if header[3 + k] != want {
            bail!("missing descriptor column `{want}`: header column {} is `{}`", 4 + k, header[3 + k]);
        }
    }
    let mut coords = Vec::new();
    let mut conf = Vec::new();
    let mut desc = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            bail!("line {line}: {} fields, header has {}", rec.len(), header.len());
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| anyhow!("line {line}, column `{}`: cannot parse `{field}`", header[k]))?;
            if !v.is_finite() {
                bail!("line {line}, column `{}`: non-finite value", header[k]);
            }
            vals.push(v);
        }
        coords.push(ImagePoint::new(vals[0], vals[1]));
        conf.push(vals[2]);
        desc.extend_from_slice(&vals[3..]);
    }
    if coords.is_empty() {
        bail!("no keypoint rows");
    }
    Ok(RawKeypoints { descriptors: DenseMatrix::new(coords.len(), d, desc)?, coords, confidences: conf })
}

pub fn write_csv(k: &RawKeypoints) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = k.descriptors.cols();
    let mut header = vec!["u".to_string(), "v".to_string(), "c".to_string()];
    header.extend((0..d).map(|j| format!("d{j}")));
    w.write_record(&header)?;
    for (i, p) in k.coords.iter().enumerate() {
        let mut row = vec![p.u.to_string(), p.v.to_string(), k.confidences[i].to_string()];
        row.extend(k.descriptors.row(i).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

pub fn parse_impk(bytes: &[u8]) -> Result<RawKeypoints> {
    let tensors = decode_tensors(&KEYPOINTS_MAGIC, bytes)?;
    let get = |name: &str| {
        tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| anyhow!("missing tensor `{name}`"))
    };
    let (coords, conf, desc) = (get("coords")?, get("confidence")?, get("descriptors")?);
    let n = conf.dims.first().copied().unwrap_or(0);
    if coords.dims != [n, 2] || desc.dims.len() != 2 || desc.dims[0] != n || conf.dims.len() != 1 {
        bail!("inconsistent shapes: coords {:?}, confidence {:?}, descriptors {:?}", coords.dims, conf.dims, desc.dims);
    }
    let c = coords.to_vector();
    Ok(RawKeypoints {
        coords: c.chunks_exact(2).map(|p| ImagePoint::new(p[0], p[1])).collect(),
        confidences: conf.to_vector(),
        descriptors: desc.to_matrix(),
    })
}

pub fn write_impk(k: &RawKeypoints) -> Vec<u8> {
    let n = k.coords.len();
    let tensors = [
        ("coords".to_string(), Tensor::new(vec![n, 2], k.coords.iter().flat_map(|p| [p.u as f32, p.v as f32]).collect())),
        ("confidence".to_string(), Tensor::from_vector(&k.confidences)),
        ("descriptors".to_string(), Tensor::from_matrix(&k.descriptors)),
    ];
    encode_tensors(&KEYPOINTS_MAGIC, tensors.iter().map(|(n, t)| (n, t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawKeypoints {
        RawKeypoints {
            coords: vec![ImagePoint::new(1.5, 2.0), ImagePoint::new(10.0, 20.25)],
            confidences: vec![0.5, 1.0],
            descriptors: DenseMatrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.5, -0.5]).unwrap(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let k = sample();
        assert_eq!(parse_csv(&write_csv(&k).unwrap()).unwrap(), k);
    }

    #[test]
    fn impk_round_trip() {
        let k = sample();
        assert_eq!(parse_impk(&write_impk(&k)).unwrap(), k);
    }

    #[test]
    fn csv_diagnostics() {
        let err = parse_csv(b"u,v,c,d0,d2\n1,2,3,4,5\n").unwrap_err().to_string();
        assert!(err.contains("missing descriptor column `d1`"), "{err}");
        let err = parse_csv(b"u,v,c\n1,2,3\n").unwrap_err().to_string();
        assert!(err.contains("d0"), "{err}");
        let err = parse_csv(b"u,v,c,d0\n1,2,3,4\n1,x,3,4\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("`v`"), "{err}");
    }

    #[test]
    fn truncated_impk_rejected() {
        let bytes = write_impk(&sample());
        assert!(parse_impk(&bytes[..bytes.len() - 3]).is_err());
    }
}
